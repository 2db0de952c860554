mod common;

use common::{max_abs_diff, random, shape};
use fabnet::data::{batch_iterator, preprocess, stratified_split, DatasetManifest, RgbImage, SplitSpec};
use fabnet::train::{adam_step, AdamConfig, AdamState, MetricsReport};
use fabnet::{fab_forward, FabParams, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mean_spatial_matches_loops(b in 1usize..=4, h in 1usize..=8, w in 1usize..=8, c in 1usize..=16, seed: u64) {
        let x = random(&mut rng(seed), shape(b, h, w, c), -2.0, 2.0);
        let y = Tape::new().mean_spatial(&x).unwrap();
        prop_assert_eq!(y.shape(), shape(b, 1, 1, c));
        prop_assert!(max_abs_diff(y.values(), &common::mean_spatial(&x)) <= 1e-12);
    }

    #[test]
    fn add_and_mul_commute(b in 1usize..=3, h in 1usize..=5, w in 1usize..=5, c in 1usize..=6, seed: u64) {
        let mut r = rng(seed);
        let x = random(&mut r, shape(b, h, w, c), -2.0, 2.0);
        let y = random(&mut r, shape(b, h, w, c), -2.0, 2.0);
        let mut t = Tape::new();
        prop_assert!(t.add(&x, &y).unwrap().bit_eq(&t.add(&y, &x).unwrap()));
        prop_assert!(t.mul(&x, &y).unwrap().bit_eq(&t.mul(&y, &x).unwrap()));
    }

    #[test]
    fn conv2d_matches_loops(b in 1usize..=2, h in 1usize..=8, w in 1usize..=8, cin in 1usize..=4,
                            cout in 1usize..=4, k in prop::sample::select(vec![1usize, 3]), seed: u64) {
        let mut r = rng(seed);
        let x = random(&mut r, shape(b, h, w, cin), -2.0, 2.0);
        let kern = random(&mut r, shape(cout, k, k, cin), -1.0, 1.0);
        let bias = random(&mut r, shape(1, 1, 1, cout), -1.0, 1.0);
        let y = Tape::new().conv2d(&x, &kern, &bias).unwrap();
        prop_assert_eq!(y.shape(), shape(b, h, w, cout));
        prop_assert!(max_abs_diff(y.values(), &common::conv2d(&x, &kern, bias.values())) <= 1e-12);
    }

    #[test]
    fn maxpool_matches_loops(b in 1usize..=2, h in 1usize..=4, w in 1usize..=4, c in 1usize..=4, seed: u64) {
        let x = random(&mut rng(seed), shape(b, 2 * h, 2 * w, c), -2.0, 2.0);
        let y = Tape::new().maxpool2x2(&x).unwrap();
        prop_assert_eq!(y.values(), &common::maxpool2x2(&x)[..]);
    }

    #[test]
    fn backward_is_deterministic(seed: u64) {
        let mut r = rng(seed);
        let p = FabParams::init(8, 2, &mut r).unwrap();
        let x = random(&mut r, shape(2, 3, 3, 8), -2.0, 2.0);
        let run = || {
            let mut t = Tape::new();
            let xl = t.leaf(&x);
            let tp = p.track(&mut t);
            let acts = fab_forward(&mut t, &xl, &tp).unwrap();
            let loss = t.sum(&acts.out).unwrap();
            t.backward(&loss).unwrap()
        };
        prop_assert!(run().bit_eq(&run()));
    }

    #[test]
    fn attention_matches_loops(b in 1usize..=2, h in 1usize..=3, w in 1usize..=3,
                               (c, ratio) in prop::sample::select(vec![(1usize, 1usize), (2, 1), (2, 2), (4, 1), (4, 2), (4, 4)]),
                               seed: u64) {
        let mut r = rng(seed);
        let init = FabParams::init(c, ratio, &mut r).unwrap();
        let p = FabParams::from_tensors(
            init.w1,
            random(&mut r, shape(1, 1, 1, c / ratio), -1.0, 1.0),
            init.w2,
            random(&mut r, shape(1, 1, 1, c), -1.0, 1.0),
            ratio,
        ).unwrap();
        let x = random(&mut r, shape(b, h, w, c), -2.0, 2.0);
        let acts = fab_forward(&mut Tape::new(), &x, &p).unwrap();
        let (gate, out) = common::fab(&x, &p);
        prop_assert!(max_abs_diff(acts.gate.values(), &gate) <= 1e-12);
        prop_assert!(max_abs_diff(acts.out.values(), &out) <= 1e-12);
    }

    #[test]
    fn attention_output_is_one_plus_gate_times_input(seed: u64) {
        let mut r = rng(seed);
        let p = FabParams::init(16, 4, &mut r).unwrap();
        let x = random(&mut r, shape(3, 4, 5, 16), -3.0, 3.0);
        let acts = fab_forward(&mut Tape::new(), &x, &p).unwrap();
        prop_assert_eq!(acts.out.shape(), x.shape());
        for (i, (&o, &v)) in acts.out.values().iter().zip(x.values()).enumerate() {
            let g = acts.gate.values()[(i / (4 * 5 * 16)) * 16 + i % 16];
            prop_assert!(g > 0.0 && g < 1.0);
            prop_assert!((o - (1.0 + g) * v).abs() <= 1e-12);
        }
    }

    #[test]
    fn attention_commutes_with_spatial_permutation(seed: u64) {
        let mut r = rng(seed);
        let p = FabParams::init(8, 2, &mut r).unwrap();
        let s = shape(2, 3, 4, 8);
        let x = random(&mut r, s, -2.0, 2.0);
        let mut perm: Vec<usize> = (0..12).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, r.gen_range(0..=i));
        }
        let permute = |t: &Tensor| {
            let mut v = vec![0.0; t.values().len()];
            for b in 0..2 {
                for (dst, &src) in perm.iter().enumerate() {
                    let d = (b * 12 + dst) * 8;
                    let s_ = (b * 12 + src) * 8;
                    v[d..d + 8].copy_from_slice(&t.values()[s_..s_ + 8]);
                }
            }
            Tensor::new(s, v).unwrap()
        };
        let out = fab_forward(&mut Tape::new(), &x, &p).unwrap().out;
        let out_p = fab_forward(&mut Tape::new(), &permute(&x), &p).unwrap().out;
        prop_assert!(max_abs_diff(out_p.values(), permute(&out).values()) <= 1e-12);
    }

    #[test]
    fn metrics_match_counting(n in 1usize..=1000, k in 2usize..=10, seed: u64) {
        let mut r = rng(seed);
        let truth: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        let rep = MetricsReport::from_predictions(&truth, &pred, k).unwrap();
        let o = common::metrics(&truth, &pred, k);
        prop_assert_eq!(rep.accuracy, o.accuracy);
        prop_assert_eq!(&rep.precision, &o.precision);
        prop_assert_eq!(&rep.recall, &o.recall);
        prop_assert_eq!(&rep.f1, &o.f1);
        for t in 0..k {
            for p in 0..k {
                prop_assert_eq!(rep.confusion.get(t, p), o.confusion[t][p]);
            }
        }
        prop_assert_eq!(rep.top1_error_percent, 100.0 - 100.0 * rep.accuracy);
        prop_assert_eq!(rep.confusion.total(), n as u64);
    }

    #[test]
    fn split_keeps_class_proportions(counts in prop::collection::vec(3usize..60, 2..6), seed: u64, stratified: bool) {
        let mut pairs = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                pairs.push((PathBuf::from(format!("{c}/{i}.ppm")), format!("k{c}")));
            }
        }
        let m = DatasetManifest::from_pairs(pairs).unwrap();
        let spec = SplitSpec { seed, stratified, ..SplitSpec::default() };
        let (train, test) = stratified_split(&m, &spec).unwrap();
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..m.len()).collect::<Vec<_>>());
        prop_assert_eq!(stratified_split(&m, &spec).unwrap(), (train, test.clone()));
        if stratified {
            for (c, &n) in counts.iter().enumerate() {
                let t = test.iter().filter(|&&i| m.entries[i].label_id == c).count();
                prop_assert!((t as f64 / n as f64 - 0.2).abs() <= 0.5 / n as f64 + 1e-12);
            }
        }
    }

    #[test]
    fn batches_cover_every_index_once(n in 1usize..200, bs in 1usize..40, seed: u64, epoch in 0usize..50) {
        let idx: Vec<usize> = (0..n).map(|i| i * 3 + 1).collect();
        let batches = batch_iterator(&idx, bs, seed, epoch).unwrap();
        prop_assert_eq!(batches.len(), n.div_ceil(bs));
        prop_assert!(batches[..batches.len() - 1].iter().all(|b| b.len() == bs));
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        prop_assert_eq!(seen, idx);
    }

    #[test]
    fn preprocessed_pixels_stay_in_unit_range(w in 1usize..12, h in 1usize..12, tw in 1usize..20, th in 1usize..20, seed: u64) {
        let mut r = rng(seed);
        let img = RgbImage { width: w, height: h, data: (0..w * h * 3).map(|_| r.gen()).collect() };
        let t = preprocess(&img, (th, tw)).unwrap();
        prop_assert_eq!(t.shape(), shape(1, th, tw, 3));
        prop_assert!(t.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn adam_second_moment_nonnegative(seed: u64, steps in 1u64..20) {
        let mut r = rng(seed);
        let mut params = vec![random(&mut r, shape(1, 1, 3, 4), -1.0, 1.0)];
        let mut state = AdamState::new();
        for _ in 0..steps {
            let g = vec![random(&mut r, shape(1, 1, 3, 4), -5.0, 5.0)];
            adam_step(&mut params, &g, &mut state, 1e-3, &AdamConfig::default()).unwrap();
        }
        prop_assert_eq!(state.t, steps);
        prop_assert!(state.v.iter().all(|v| v.iter().all(|&x| x >= 0.0)));
    }
}
