//! Weight initializers. Both draw from a uniform distribution with the
//! usual variance-preserving bounds.

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

/// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn he_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, count: usize) -> Vec<f64> {
    symmetric_uniform(rng, (6.0 / fan_in as f64).sqrt(), count)
}

/// `U(-sqrt(6 / (fan_in + fan_out)), sqrt(6 / (fan_in + fan_out)))`.
pub fn glorot_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize, count: usize) -> Vec<f64> {
    symmetric_uniform(rng, (6.0 / (fan_in + fan_out) as f64).sqrt(), count)
}

fn symmetric_uniform<R: Rng + ?Sized>(rng: &mut R, limit: f64, count: usize) -> Vec<f64> {
    let dist = Uniform::new_inclusive(-limit, limit);
    (0..count).map(|_| dist.sample(rng)).collect()
}
