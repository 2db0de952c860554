#![allow(dead_code)]

use fabnet::{FabParams, Shape4, Tensor};
use rand::Rng;

pub fn shape(b: usize, h: usize, w: usize, c: usize) -> Shape4 {
    Shape4::new(b, h, w, c).unwrap()
}

pub fn random(rng: &mut impl Rng, s: Shape4, lo: f64, hi: f64) -> Tensor {
    Tensor::new(s, (0..s.numel()).map(|_| rng.gen_range(lo..=hi)).collect()).unwrap()
}

fn at(x: &Tensor, b: usize, h: usize, w: usize, c: usize) -> f64 {
    let s = x.shape();
    x.values()[((b * s.height + h) * s.width + w) * s.channels + c]
}

pub fn mean_spatial(x: &Tensor) -> Vec<f64> {
    let s = x.shape();
    let mut out = Vec::new();
    for b in 0..s.batch {
        for c in 0..s.channels {
            let mut acc = 0.0;
            for h in 0..s.height {
                for w in 0..s.width {
                    acc += at(x, b, h, w, c);
                }
            }
            out.push(acc / (s.height * s.width) as f64);
        }
    }
    out
}

/// Same-padded stride-1 cross-correlation; `k` is `(Cout, kh, kw, Cin)`.
pub fn conv2d(x: &Tensor, k: &Tensor, bias: &[f64]) -> Vec<f64> {
    let s = x.shape();
    let ks = k.shape();
    let (cout, kh, kw, cin) = (ks.batch, ks.height, ks.width, ks.channels);
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut out = vec![0.0; s.batch * s.height * s.width * cout];
    for b in 0..s.batch {
        for i in 0..s.height {
            for j in 0..s.width {
                for o in 0..cout {
                    let mut acc = bias[o];
                    for di in 0..kh {
                        for dj in 0..kw {
                            let y = i as isize + di as isize - ph;
                            let x_ = j as isize + dj as isize - pw;
                            if y < 0 || x_ < 0 || y >= s.height as isize || x_ >= s.width as isize {
                                continue;
                            }
                            for c in 0..cin {
                                acc += at(x, b, y as usize, x_ as usize, c) * at(k, o, di, dj, c);
                            }
                        }
                    }
                    out[((b * s.height + i) * s.width + j) * cout + o] = acc;
                }
            }
        }
    }
    out
}

pub fn maxpool2x2(x: &Tensor) -> Vec<f64> {
    let s = x.shape();
    let mut out = Vec::new();
    for b in 0..s.batch {
        for i in 0..s.height / 2 {
            for j in 0..s.width / 2 {
                for c in 0..s.channels {
                    let mut m = f64::NEG_INFINITY;
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        m = m.max(at(x, b, 2 * i + di, 2 * j + dj, c));
                    }
                    out.push(m);
                }
            }
        }
    }
    out
}

/// Straight-line attention block: returns `(gate, out)`.
pub fn fab(x: &Tensor, p: &FabParams) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let c = s.channels;
    let r = c / p.ratio();
    let (w1, b1, w2, b2) = (p.w1.values(), p.b1.values(), p.w2.values(), p.b2.values());
    let pooled = mean_spatial(x);
    let mut gate = vec![0.0; s.batch * c];
    for b in 0..s.batch {
        let mut hidden = vec![0.0; r];
        for k in 0..r {
            let mut acc = b1[k];
            for d in 0..c {
                acc += w1[k * c + d] * pooled[b * c + d];
            }
            hidden[k] = acc.max(0.0);
        }
        for k in 0..c {
            let mut acc = b2[k];
            for d in 0..r {
                acc += w2[k * r + d] * hidden[d];
            }
            gate[b * c + k] = 1.0 / (1.0 + (-acc).exp());
        }
    }
    let mut out = vec![0.0; s.numel()];
    for b in 0..s.batch {
        for h in 0..s.height {
            for w in 0..s.width {
                for k in 0..c {
                    let v = at(x, b, h, w, k);
                    out[((b * s.height + h) * s.width + w) * c + k] = gate[b * c + k] * v + v;
                }
            }
        }
    }
    (gate, out)
}

pub struct Counts {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub confusion: Vec<Vec<u64>>,
}

/// Per-class metrics from explicit TP/FP/FN counts, 0/0 taken as 0.
pub fn metrics(truth: &[usize], pred: &[usize], k: usize) -> Counts {
    let mut confusion = vec![vec![0u64; k]; k];
    let mut correct = 0;
    for (&t, &p) in truth.iter().zip(pred) {
        confusion[t][p] += 1;
        if t == p {
            correct += 1;
        }
    }
    let (mut precision, mut recall, mut f1) = (vec![], vec![], vec![]);
    for c in 0..k {
        let mut tp = 0u64;
        let mut fp = 0u64;
        let mut fn_ = 0u64;
        for (&t, &p) in truth.iter().zip(pred) {
            match (t == c, p == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        precision.push(p);
        recall.push(r);
        f1.push(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
    }
    Counts {
        accuracy: correct as f64 / truth.len() as f64,
        precision,
        recall,
        f1,
        confusion,
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub struct Dataset {
    pub class_names: Vec<String>,
    pub train: Vec<fabnet::data::Sample>,
    pub test: Vec<fabnet::data::Sample>,
}

/// Generates a synthetic dataset under `dir` and splits it 80/20.
pub fn synth_dataset(dir: &std::path::Path, spec: &fabnet::data::SynthSpec) -> Dataset {
    use fabnet::data::{load_manifest, load_samples, stratified_split, SplitSpec};
    let path = fabnet::data::synth_generate(dir, spec).unwrap();
    let m = load_manifest(path).unwrap();
    let (tr, te) = stratified_split(&m, &SplitSpec::default()).unwrap();
    Dataset {
        class_names: m.class_names.clone(),
        train: load_samples(&m.subset(&tr), spec.size).unwrap(),
        test: load_samples(&m.subset(&te), spec.size).unwrap(),
    }
}
