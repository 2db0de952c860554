//! Feature attention block.
//!
//! Given a feature map `x` of shape `(N, H, W, C)`:
//!
//! ```text
//! pooled   = mean over (H, W) of x                    (N, 1, 1, C)
//! squeezed = relu(W1 · pooled + b1)                   (N, 1, 1, C / ratio)
//! gate     = sigmoid(W2 · squeezed + b2)              (N, 1, 1, C)
//! attended = gate ⊙ x   (gate broadcast over H, W)    (N, H, W, C)
//! out      = attended + x                             (N, H, W, C)
//! ```
//!
//! The residual term means the block is the identity map when the gate is
//! closed and doubles the input when it is fully open.

use rand::Rng;

use crate::autodiff::Tape;
use crate::error::{shape_err, Error, Result};
use crate::init::{glorot_uniform, he_uniform};
use crate::tensor::{Shape4, Tensor};

pub const DEFAULT_RATIO: usize = 8;

/// Weights of one attention block. `w1` is `(1, 1, C/ratio, C)`, `w2` is
/// `(1, 1, C, C/ratio)`, and the biases are `(1, 1, 1, ·)` rows.
#[derive(Debug, Clone)]
pub struct FabParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    ratio: usize,
}

fn check_ratio(channels: usize, ratio: usize) -> Result<usize> {
    if ratio == 0 || channels == 0 || !channels.is_multiple_of(ratio) {
        return Err(Error::Config(format!(
            "reduction ratio {ratio} must divide the channel count {channels}"
        )));
    }
    Ok(channels / ratio)
}

impl FabParams {
    /// He-uniform `w1`, Glorot-uniform `w2`, zero biases.
    pub fn init<R: Rng + ?Sized>(channels: usize, ratio: usize, rng: &mut R) -> Result<Self> {
        let reduced = check_ratio(channels, ratio)?;
        let w1 = he_uniform(rng, channels, reduced * channels);
        let w2 = glorot_uniform(rng, reduced, channels, channels * reduced);
        Ok(FabParams {
            w1: Tensor::from_parts(Shape4::new(1, 1, reduced, channels)?, w1),
            b1: Tensor::zeros(Shape4::new(1, 1, 1, reduced)?),
            w2: Tensor::from_parts(Shape4::new(1, 1, channels, reduced)?, w2),
            b2: Tensor::zeros(Shape4::new(1, 1, 1, channels)?),
            ratio,
        })
    }

    pub fn from_tensors(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, ratio: usize) -> Result<Self> {
        let channels = w1.shape().channels;
        let reduced = check_ratio(channels, ratio)?;
        let expect = [
            (&w1, Shape4::new(1, 1, reduced, channels)?, "W1"),
            (&b1, Shape4::new(1, 1, 1, reduced)?, "b1"),
            (&w2, Shape4::new(1, 1, channels, reduced)?, "W2"),
            (&b2, Shape4::new(1, 1, 1, channels)?, "b2"),
        ];
        for (t, shape, name) in expect {
            if t.shape() != shape {
                return Err(shape_err!("{name} has shape {}, expected {shape}", t.shape()));
            }
        }
        Ok(FabParams {
            w1,
            b1,
            w2,
            b2,
            ratio,
        })
    }

    pub fn channels(&self) -> usize {
        self.w1.shape().channels
    }

    pub fn reduced(&self) -> usize {
        self.w1.shape().width
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    /// Copy whose four tensors are leaves on `tape`.
    pub fn track(&self, tape: &mut Tape) -> FabParams {
        FabParams {
            w1: tape.leaf(&self.w1),
            b1: tape.leaf(&self.b1),
            w2: tape.leaf(&self.w2),
            b2: tape.leaf(&self.b2),
            ratio: self.ratio,
        }
    }
}

/// Every intermediate of one forward pass through the block.
#[derive(Debug, Clone)]
pub struct FabActivations {
    /// Per-channel spatial mean, `(N, 1, 1, C)`.
    pub pooled: Tensor,
    /// Bottleneck after ReLU, `(N, 1, 1, C/ratio)`.
    pub squeezed: Tensor,
    /// Sigmoid channel gate, `(N, 1, 1, C)`.
    pub gate: Tensor,
    /// Gated features, `(N, H, W, C)`.
    pub attended: Tensor,
    /// Gated features plus the residual input, `(N, H, W, C)`.
    pub out: Tensor,
}

pub fn fab_forward(tape: &mut Tape, x: &Tensor, p: &FabParams) -> Result<FabActivations> {
    if x.shape().channels != p.channels() {
        return Err(shape_err!(
            "attention block expects {} channels, input is {}",
            p.channels(),
            x.shape()
        ));
    }
    let pooled = tape.mean_spatial(x)?;
    let hidden = tape.dense(&pooled, &p.w1, &p.b1)?;
    let squeezed = tape.relu(&hidden)?;
    let logits = tape.dense(&squeezed, &p.w2, &p.b2)?;
    let gate = tape.sigmoid(&logits)?;
    let attended = tape.mul(x, &gate)?;
    let out = tape.add(&attended, x)?;
    Ok(FabActivations {
        pooled,
        squeezed,
        gate,
        attended,
        out,
    })
}

/// Per-channel summary of the gate over the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GateStats {
    pub min: Vec<f64>,
    pub mean: Vec<f64>,
    pub max: Vec<f64>,
}

pub fn gate_stats(acts: &FabActivations) -> GateStats {
    let s = acts.gate.shape();
    let c = s.channels;
    let mut min = vec![f64::INFINITY; c];
    let mut max = vec![f64::NEG_INFINITY; c];
    let mut sum = vec![0.0; c];
    for row in acts.gate.values().chunks_exact(c) {
        for (ch, &v) in row.iter().enumerate() {
            min[ch] = min[ch].min(v);
            max[ch] = max[ch].max(v);
            sum[ch] += v;
        }
    }
    let mean = sum.into_iter().map(|v| v / s.batch as f64).collect();
    GateStats { min, mean, max }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params_with_gate_bias(c: usize, ratio: usize, bias: f64) -> FabParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = FabParams::init(c, ratio, &mut rng).unwrap();
        p.w2 = Tensor::zeros(p.w2.shape());
        p.b2 = Tensor::full(p.b2.shape(), bias);
        p
    }

    #[test]
    fn init_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = FabParams::init(8, 8, &mut rng).unwrap();
        assert_eq!(p.w1.shape(), Shape4::new(1, 1, 1, 8).unwrap());
        assert_eq!(p.w2.shape(), Shape4::new(1, 1, 8, 1).unwrap());
        assert!(p.b1.values().iter().chain(p.b2.values()).all(|&v| v == 0.0));
    }

    #[test]
    fn init_rejects_non_divisor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(FabParams::init(8, 3, &mut rng), Err(Error::Config(_))));
        assert!(matches!(FabParams::init(8, 0, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn init_is_deterministic() {
        let a = FabParams::init(16, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = FabParams::init(16, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!(a.w1.bit_eq(&b.w1) && a.w2.bit_eq(&b.w2));
    }

    #[test]
    fn init_respects_bounds() {
        let p = FabParams::init(32, 8, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let he = (6.0f64 / 32.0).sqrt();
        let glorot = (6.0f64 / 36.0).sqrt();
        assert!(p.w1.values().iter().all(|v| v.abs() <= he));
        assert!(p.w2.values().iter().all(|v| v.abs() <= glorot));
    }

    #[test]
    fn half_gate_scales_by_one_and_a_half() {
        let p = params_with_gate_bias(4, 2, 0.0);
        let x = Tensor::full(Shape4::new(1, 3, 3, 4).unwrap(), 2.0);
        let acts = fab_forward(&mut Tape::new(), &x, &p).unwrap();
        assert!(acts.out.values().iter().all(|&v| v == 3.0));
        let stats = gate_stats(&acts);
        assert!(stats.min.iter().chain(&stats.mean).chain(&stats.max).all(|&v| v == 0.5));
    }

    #[test]
    fn closed_gate_is_identity() {
        let p = params_with_gate_bias(4, 2, -1000.0);
        let x = Tensor::full(Shape4::new(2, 2, 2, 4).unwrap(), -1.25);
        let acts = fab_forward(&mut Tape::new(), &x, &p).unwrap();
        for (o, i) in acts.out.values().iter().zip(x.values()) {
            assert!((o - i).abs() < 1e-6);
        }
    }

    #[test]
    fn open_gate_doubles() {
        let p = params_with_gate_bias(4, 2, 1000.0);
        let x = Tensor::full(Shape4::new(1, 2, 2, 4).unwrap(), 0.75);
        let acts = fab_forward(&mut Tape::new(), &x, &p).unwrap();
        for (o, i) in acts.out.values().iter().zip(x.values()) {
            assert!((o - 2.0 * i).abs() < 1e-6);
        }
        assert!(gate_stats(&acts).mean.iter().all(|&m| m > 0.999));
    }

    #[test]
    fn shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = FabParams::init(16, 4, &mut rng).unwrap();
        let x = Tensor::full(Shape4::new(2, 7, 5, 16).unwrap(), 0.1);
        let acts = fab_forward(&mut Tape::new(), &x, &p).unwrap();
        assert_eq!(acts.out.shape(), x.shape());
        assert_eq!(acts.squeezed.shape(), Shape4::new(2, 1, 1, 4).unwrap());
        assert_eq!(acts.gate.shape(), Shape4::new(2, 1, 1, 16).unwrap());
    }

    #[test]
    fn channel_mismatch() {
        let p = params_with_gate_bias(4, 2, 0.0);
        let x = Tensor::full(Shape4::new(1, 2, 2, 3).unwrap(), 1.0);
        assert!(matches!(fab_forward(&mut Tape::new(), &x, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn from_tensors_validates_shapes() {
        let p = params_with_gate_bias(4, 2, 0.0);
        let bad = FabParams::from_tensors(p.w1.clone(), p.b2.clone(), p.w2.clone(), p.b2.clone(), 2);
        assert!(matches!(bad, Err(Error::Shape(_))));
        assert!(FabParams::from_tensors(p.w1, p.b1, p.w2, p.b2, 2).is_ok());
    }
}
