//! Raw loops behind the differentiable ops. All reductions run in a fixed
//! order so results are bit-reproducible.

use crate::tensor::Shape4;

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Same-padded, stride-1 cross-correlation. `k` is laid out
/// (out_channels, kh, kw, in_channels).
pub(crate) fn conv2d_forward(x: &[f64], xs: Shape4, k: &[f64], ks: Shape4, bias: &[f64]) -> Vec<f64> {
    let (n, h, w, cin) = (xs.batch, xs.height, xs.width, xs.channels);
    let (cout, kh, kw) = (ks.batch, ks.height, ks.width);
    let (ph, pw) = (kh / 2, kw / 2);

    // (kh, kw, cin, cout) so the innermost update is contiguous over cout.
    let mut kt = vec![0.0; k.len()];
    for co in 0..cout {
        for i in 0..kh {
            for j in 0..kw {
                for ci in 0..cin {
                    kt[((i * kw + j) * cin + ci) * cout + co] = k[ks.offset(co, i, j, ci)];
                }
            }
        }
    }

    let mut out = vec![0.0; n * h * w * cout];
    for b in 0..n {
        for oh in 0..h {
            for ow in 0..w {
                let o = ((b * h + oh) * w + ow) * cout;
                let acc = &mut out[o..o + cout];
                acc.copy_from_slice(bias);
                for i in 0..kh {
                    let Some(ih) = (oh + i).checked_sub(ph).filter(|&v| v < h) else {
                        continue;
                    };
                    for j in 0..kw {
                        let Some(iw) = (ow + j).checked_sub(pw).filter(|&v| v < w) else {
                            continue;
                        };
                        let xo = xs.offset(b, ih, iw, 0);
                        let xv = &x[xo..xo + cin];
                        let ko = (i * kw + j) * cin * cout;
                        for (ci, &xval) in xv.iter().enumerate() {
                            if xval != 0.0 {
                                axpy(acc, xval, &kt[ko + ci * cout..ko + (ci + 1) * cout]);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub x: Option<Vec<f64>>,
    pub k: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    g: &[f64],
    x: &[f64],
    xs: Shape4,
    k: &[f64],
    ks: Shape4,
    want: (bool, bool, bool),
) -> ConvGrads {
    let (n, h, w, cin) = (xs.batch, xs.height, xs.width, xs.channels);
    let (cout, kh, kw) = (ks.batch, ks.height, ks.width);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut gx = want.0.then(|| vec![0.0; x.len()]);
    let mut gk = want.1.then(|| vec![0.0; k.len()]);
    let mut gb = want.2.then(|| vec![0.0; cout]);

    for b in 0..n {
        for oh in 0..h {
            for ow in 0..w {
                let o = ((b * h + oh) * w + ow) * cout;
                let go = &g[o..o + cout];
                if let Some(gb) = gb.as_mut() {
                    for (acc, v) in gb.iter_mut().zip(go) {
                        *acc += v;
                    }
                }
                for i in 0..kh {
                    let Some(ih) = (oh + i).checked_sub(ph).filter(|&v| v < h) else {
                        continue;
                    };
                    for j in 0..kw {
                        let Some(iw) = (ow + j).checked_sub(pw).filter(|&v| v < w) else {
                            continue;
                        };
                        let xo = xs.offset(b, ih, iw, 0);
                        for (co, &gv) in go.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let ko = ks.offset(co, i, j, 0);
                            if let Some(gx) = gx.as_mut() {
                                axpy(&mut gx[xo..xo + cin], gv, &k[ko..ko + cin]);
                            }
                            if let Some(gk) = gk.as_mut() {
                                axpy(&mut gk[ko..ko + cin], gv, &x[xo..xo + cin]);
                            }
                        }
                    }
                }
            }
        }
    }
    ConvGrads {
        x: gx,
        k: gk,
        bias: gb,
    }
}

/// 2x2 stride-2 max pooling. Returns the pooled values and, per output
/// element, the flat input index that won (first in row-major window order
/// on ties).
pub(crate) fn maxpool2x2_forward(x: &[f64], xs: Shape4) -> (Vec<f64>, Vec<usize>) {
    let (n, h, w, c) = (xs.batch, xs.height, xs.width, xs.channels);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut arg = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let mut best = xs.offset(b, 2 * i, 2 * j, ch);
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = xs.offset(b, 2 * i + di, 2 * j + dj, ch);
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    arg.push(best);
                }
            }
        }
    }
    (out, arg)
}

/// `out(i, e) = sum_d W(e, d) x(i, d) + b(e)` with W row-major (dout, din).
pub(crate) fn dense_forward(x: &[f64], n: usize, din: usize, wt: &[f64], dout: usize, b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * dout);
    for i in 0..n {
        let xi = &x[i * din..(i + 1) * din];
        for e in 0..dout {
            out.push(dot(&wt[e * din..(e + 1) * din], xi) + b[e]);
        }
    }
    out
}
