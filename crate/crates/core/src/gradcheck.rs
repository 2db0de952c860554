//! Finite-difference verification of the reverse-mode rules.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{fab_forward, FabParams};
use crate::autodiff::{softmax_rows, OpKind, Tape};
use crate::error::{Error, Result};
use crate::model::{ConvBlockSpec, Model, ModelConfig};
use crate::tensor::{Shape4, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
/// Gradient magnitude, relative to `max(1, |f|)`, below which summation
/// roundoff in `f` keeps a central difference at [`DEFAULT_EPS`] from
/// resolving a relative error of [`TOLERANCE`].
pub const RESOLUTION: f64 = 1e-4;
/// Minimum distance from any ReLU or max-pool kink required of a
/// composite probe point.
pub const KINK_MARGIN: f64 = 1e-4;
/// Smallest class probability allowed at a composite probe point; keeps the
/// loss gradient well above finite-difference roundoff.
pub const MIN_PROBABILITY: f64 = 1e-3;
const MAX_RESAMPLES: usize = 1000;

/// Compares the reverse-mode gradient of scalar `f` at `x` with central
/// differences, returning the worst `|a - n| / max(floor, |a| + |n|)`.
///
/// `floor` is the resolution of the difference quotient itself,
/// `RESOLUTION * max(1, |f(x)|)`; below it the numeric side is roundoff.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &Tensor) -> Result<Tensor>,
{
    grad_check_with_fault(f, x, eps, None)
}

fn scalar_value(out: &Tensor) -> Result<f64> {
    if out.shape().numel() != 1 {
        return Err(Error::Shape(format!("checked function returned {}", out.shape())));
    }
    let v = out.values()[0];
    if !v.is_finite() {
        return Err(Error::Value(format!("checked function returned {v}")));
    }
    Ok(v)
}

fn grad_check_with_fault<F>(f: F, x: &Tensor, eps: f64, fault: Option<OpKind>) -> Result<f64>
where
    F: FnMut(&mut Tape, &Tensor) -> Result<Tensor>,
{
    Ok(checked_ops(f, x, eps, fault)?.0)
}

/// Worst relative error plus the ops whose backward rules were exercised.
fn checked_ops<F>(mut f: F, x: &Tensor, eps: f64, fault: Option<OpKind>) -> Result<(f64, Vec<OpKind>)>
where
    F: FnMut(&mut Tape, &Tensor) -> Result<Tensor>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Value(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_fault(kind);
    }
    let leaf = tape.leaf(x);
    let out = f(&mut tape, &leaf)?;
    let floor = RESOLUTION * scalar_value(&out)?.abs().max(1.0);
    let grads = tape.backward(&out)?;
    let ops = tape.recorded_ops();
    let analytic = grads
        .get(&leaf)
        .ok_or_else(|| Error::Graph("no gradient for the checked input".into()))?
        .clone();

    let mut probe = x.detach();
    let mut worst = 0.0f64;
    for i in 0..x.shape().numel() {
        let orig = x.values()[i];
        probe.values_mut()[i] = orig + eps;
        let plus = scalar_value(&f(&mut Tape::new(), &probe)?)?;
        probe.values_mut()[i] = orig - eps;
        let minus = scalar_value(&f(&mut Tape::new(), &probe)?)?;
        probe.values_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.values()[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    Ok((worst, ops))
}

/// Tensor with entries uniform in `[-2, 2]`.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape4) -> Tensor {
    let dist = Uniform::new_inclusive(-2.0, 2.0);
    Tensor::from_parts(shape, (0..shape.numel()).map(|_| dist.sample(rng)).collect())
}

#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub name: String,
    /// Ops whose backward rules this case exercises.
    pub ops: Vec<OpKind>,
    pub max_rel_error: f64,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn shape(b: usize, h: usize, w: usize, c: usize) -> Shape4 {
    Shape4::new(b, h, w, c).expect("static shape")
}

/// `sum(y ⊙ r)` for a fixed random `r`, so upstream gradients are not uniform.
fn weighted_sum(tape: &mut Tape, y: &Tensor, r: &Tensor) -> Result<Tensor> {
    let z = tape.mul(y, r)?;
    tape.sum(&z)
}

/// Small model used by the composite check.
pub fn probe_model(seed: u64) -> Result<Model> {
    let cfg = ModelConfig {
        input_size: (8, 8),
        blocks: vec![ConvBlockSpec::new(4, true), ConvBlockSpec::new(8, true)],
        fab_ratio: 2,
        head_hidden: 6,
        num_classes: 3,
        ..ModelConfig::default()
    };
    let names = (0..3).map(|i| format!("c{i}")).collect();
    let mut model = Model::build(cfg, names, seed)?;
    // non-zero biases so no unit sits exactly on a ReLU kink
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for i in 0..model.parameters().len() {
        let p = &model.parameters()[i];
        if p.name.ends_with("bias") || p.name.ends_with(".b1") || p.name.ends_with(".b2") {
            let t = random_tensor(&mut rng, p.value.shape());
            let scaled = Tensor::new(t.shape(), t.values().iter().map(|v| v * 0.05).collect())?;
            model.set_parameter(i, scaled)?;
        }
    }
    let idx = model
        .parameters()
        .iter()
        .position(|p| p.name == "head.out.weight")
        .expect("head weight");
    let w = &model.parameters()[idx].value;
    let shrunk = Tensor::new(w.shape(), w.values().iter().map(|v| v * 0.25).collect())?;
    model.set_parameter(idx, shrunk)?;
    Ok(model)
}

/// Draws pixel-range model inputs until the forward pass keeps every ReLU input and
/// max-pool winner at least [`KINK_MARGIN`] away from a kink and no class
/// probability drops below [`MIN_PROBABILITY`].
fn smooth_probe_input(model: &Model, rng: &mut ChaCha8Rng, shape: Shape4) -> Result<Tensor> {
    let pixel = Uniform::new_inclusive(0.0, 1.0);
    for _ in 0..MAX_RESAMPLES {
        let x = Tensor::from_parts(shape, (0..shape.numel()).map(|_| pixel.sample(rng)).collect());
        let mut tape = Tape::new();
        let leaf = tape.leaf(&x);
        let bound = model.bind(&mut tape, true);
        let logits = model.forward_with(&mut tape, &leaf, &bound)?.logits;
        let k = logits.shape().channels;
        let (probs, _) = softmax_rows(logits.values(), k, &vec![0; shape.batch]);
        let min_p = probs.iter().copied().fold(1.0, f64::min);
        if tape.kink_margin() >= KINK_MARGIN && min_p >= MIN_PROBABILITY {
            return Ok(x);
        }
    }
    Err(Error::Value(format!(
        "none of {MAX_RESAMPLES} probe inputs is clear of kinks and softmax saturation"
    )))
}

/// Draws `[-2, 2]` tensors until `f` evaluated on one stays [`KINK_MARGIN`]
/// away from every ReLU and max-pool kink.
fn clear_of_kinks<F>(rng: &mut ChaCha8Rng, shape: Shape4, mut f: F) -> Result<Tensor>
where
    F: FnMut(&mut Tape, &Tensor) -> Result<Tensor>,
{
    for _ in 0..MAX_RESAMPLES {
        let x = random_tensor(rng, shape);
        let mut tape = Tape::new();
        let leaf = tape.leaf(&x);
        f(&mut tape, &leaf)?;
        if tape.kink_margin() >= KINK_MARGIN {
            return Ok(x);
        }
    }
    Err(Error::Value(format!("none of {MAX_RESAMPLES} draws is clear of kinks")))
}

/// Runs every case for one seed. `fault` corrupts one op's backward rule.
pub fn run_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<GradCheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = DEFAULT_EPS;
    let mut rows = Vec::new();
    let mut check = |name: &str, f: &mut dyn FnMut(&mut Tape, &Tensor) -> Result<Tensor>, x: &Tensor| -> Result<()> {
        let (err, ops) = checked_ops(f, x, eps, fault)?;
        rows.push(GradCheckRow {
            name: name.to_string(),
            ops,
            max_rel_error: err,
        });
        Ok(())
    };

    let s = shape(2, 3, 4, 5);
    let (a, b, r) = (random_tensor(&mut rng, s), random_tensor(&mut rng, s), random_tensor(&mut rng, s));
    check("ew_add", &mut |t, x| {
        let y = t.add(x, &b)?;
        weighted_sum(t, &y, &r)
    }, &a)?;
    check("ew_mul", &mut |t, x| {
        let y = t.mul(x, &b)?;
        weighted_sum(t, &y, &r)
    }, &a)?;

    let gate = random_tensor(&mut rng, shape(2, 1, 1, 5));
    check("ew_mul broadcast (input)", &mut |t, x| {
        let y = t.mul(x, &gate)?;
        weighted_sum(t, &y, &r)
    }, &a)?;
    check("ew_mul broadcast (gate)", &mut |t, g| {
        let y = t.mul(&a, g)?;
        weighted_sum(t, &y, &r)
    }, &gate)?;

    let rp = random_tensor(&mut rng, shape(2, 1, 1, 5));
    check("mean_spatial", &mut |t, x| {
        let y = t.mean_spatial(x)?;
        weighted_sum(t, &y, &rp)
    }, &a)?;

    let xd = random_tensor(&mut rng, shape(3, 1, 1, 4));
    let wd = random_tensor(&mut rng, shape(1, 1, 6, 4));
    let bd = random_tensor(&mut rng, shape(1, 1, 1, 6));
    let rd = random_tensor(&mut rng, shape(3, 1, 1, 6));
    check("dense (input)", &mut |t, x| {
        let y = t.dense(x, &wd, &bd)?;
        weighted_sum(t, &y, &rd)
    }, &xd)?;
    check("dense (weight)", &mut |t, w| {
        let y = t.dense(&xd, w, &bd)?;
        weighted_sum(t, &y, &rd)
    }, &wd)?;
    check("dense (bias)", &mut |t, bias| {
        let y = t.dense(&xd, &wd, bias)?;
        weighted_sum(t, &y, &rd)
    }, &bd)?;

    let xr = clear_of_kinks(&mut rng, s, |t, x| t.relu(x))?;
    check("relu", &mut |t, x| {
        let y = t.relu(x)?;
        weighted_sum(t, &y, &r)
    }, &xr)?;
    check("sigmoid", &mut |t, x| {
        let y = t.sigmoid(x)?;
        t.sum(&y)
    }, &a)?;

    let xc = random_tensor(&mut rng, shape(1, 6, 6, 2));
    let kc = random_tensor(&mut rng, shape(3, 3, 3, 2));
    let bc = random_tensor(&mut rng, shape(1, 1, 1, 3));
    let rc = random_tensor(&mut rng, shape(1, 6, 6, 3));
    check("conv2d (input)", &mut |t, x| {
        let y = t.conv2d(x, &kc, &bc)?;
        weighted_sum(t, &y, &rc)
    }, &xc)?;
    check("conv2d (kernel)", &mut |t, k| {
        let y = t.conv2d(&xc, k, &bc)?;
        weighted_sum(t, &y, &rc)
    }, &kc)?;
    check("conv2d (bias)", &mut |t, bias| {
        let y = t.conv2d(&xc, &kc, bias)?;
        weighted_sum(t, &y, &rc)
    }, &bc)?;

    let xm = clear_of_kinks(&mut rng, shape(2, 4, 6, 3), |t, x| t.maxpool2x2(x))?;
    let rm = random_tensor(&mut rng, shape(2, 2, 3, 3));
    check("maxpool2x2", &mut |t, x| {
        let y = t.maxpool2x2(x)?;
        weighted_sum(t, &y, &rm)
    }, &xm)?;

    let logits = random_tensor(&mut rng, shape(4, 1, 1, 5));
    let labels = [3usize, 0, 4, 1];
    check("softmax_cross_entropy", &mut |t, z| {
        t.softmax_cross_entropy(z, &labels)
    }, &logits)?;

    let mut prng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let fab = FabParams::init(8, 2, &mut prng)?;
    let fab = FabParams::from_tensors(
        fab.w1,
        random_tensor(&mut rng, shape(1, 1, 1, 4)),
        fab.w2,
        random_tensor(&mut rng, shape(1, 1, 1, 8)),
        2,
    )?;
    let xf = clear_of_kinks(&mut rng, shape(2, 4, 4, 8), |t, x| Ok(fab_forward(t, x, &fab)?.out))?;
    check("attention block (input)", &mut |t, x| {
        let acts = fab_forward(t, x, &fab)?;
        t.sum(&acts.out)
    }, &xf)?;
    check("attention block (W1)", &mut |t, w1| {
        let p = FabParams::from_tensors(w1.clone(), fab.b1.clone(), fab.w2.clone(), fab.b2.clone(), 2)?;
        let acts = fab_forward(t, &xf, &p)?;
        t.sum(&acts.out)
    }, &fab.w1)?;
    check("attention block (W2)", &mut |t, w2| {
        let p = FabParams::from_tensors(fab.w1.clone(), fab.b1.clone(), w2.clone(), fab.b2.clone(), 2)?;
        let acts = fab_forward(t, &xf, &p)?;
        t.sum(&acts.out)
    }, &fab.w2)?;
    check("attention block (b2)", &mut |t, b2| {
        let p = FabParams::from_tensors(fab.w1.clone(), fab.b1.clone(), fab.w2.clone(), b2.clone(), 2)?;
        let acts = fab_forward(t, &xf, &p)?;
        t.sum(&acts.out)
    }, &fab.b2)?;

    let model = probe_model(seed)?;
    let labels = [2usize, 0];
    let base: Vec<Tensor> = model.parameters().iter().map(|p| p.value.detach()).collect();
    let xi = smooth_probe_input(&model, &mut rng, shape(2, 8, 8, 3))?;
    check("model + loss (input)", &mut |t, x| {
        let logits = model.forward_with(t, x, &base)?.logits;
        t.softmax_cross_entropy(&logits, &labels)
    }, &xi)?;
    for name in ["conv0.kernel", "conv1.kernel", "fab.W1", "fab.W2", "head.hidden.weight", "head.out.bias"] {
        let idx = model
            .parameters()
            .iter()
            .position(|p| p.name == name)
            .expect("probe model parameter");
        check(&format!("model + loss ({name})"), &mut |t, p| {
            let mut bound = base.clone();
            bound[idx] = p.clone();
            let logits = model.forward_with(t, &xi, &bound)?.logits;
            t.softmax_cross_entropy(&logits, &labels)
        }, &base[idx])?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_tensor(&mut rng, shape(2, 3, 3, 2));
        let err = grad_check(|t, x| t.sum(x), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn sigmoid_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, shape(1, 4, 4, 3));
        let err = grad_check(
            |t, x| {
                let y = t.sigmoid(x)?;
                t.sum(&y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn bad_eps() {
        let x = Tensor::zeros(Shape4::scalar());
        assert!(grad_check(|t, x| t.sum(x), &x, 0.0).is_err());
    }

    #[test]
    fn fault_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&mut rng, shape(1, 2, 2, 2));
        let err = grad_check_with_fault(
            |t, x| {
                let y = t.relu(x)?;
                let y = t.sigmoid(&y)?;
                t.sum(&y)
            },
            &x,
            1e-5,
            Some(OpKind::Sigmoid),
        )
        .unwrap();
        assert!(err > 0.1);
    }
}
