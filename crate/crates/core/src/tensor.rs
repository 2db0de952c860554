//! Rank-4 NHWC tensors.
//!
//! A [`Tensor`] is an immutable value plus an optional identity on a
//! [`Tape`](crate::autodiff::Tape). Cloning is cheap: the values are
//! reference counted and never mutated in place once shared.

use std::fmt;
use std::sync::Arc;

use crate::autodiff::NodeId;
use crate::error::{shape_err, Error, Result};

/// Extents of a rank-4 tensor in (batch, height, width, channels) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape4 {
    pub fn new(batch: usize, height: usize, width: usize, channels: usize) -> Result<Self> {
        let shape = Shape4 {
            batch,
            height,
            width,
            channels,
        };
        if batch == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(shape_err!("every extent must be >= 1, got {shape}"));
        }
        batch
            .checked_mul(height)
            .and_then(|n| n.checked_mul(width))
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| shape_err!("element count of {shape} overflows"))?;
        Ok(shape)
    }

    /// Shape `(1, 1, 1, 1)`.
    pub const fn scalar() -> Self {
        Shape4 {
            batch: 1,
            height: 1,
            width: 1,
            channels: 1,
        }
    }

    pub fn numel(&self) -> usize {
        self.batch * self.height * self.width * self.channels
    }

    /// Flat row-major offset of `(b, h, w, c)`.
    #[inline]
    pub fn offset(&self, b: usize, h: usize, w: usize, c: usize) -> usize {
        ((b * self.height + h) * self.width + w) * self.channels + c
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.height, self.width, self.channels]
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.batch, self.height, self.width, self.channels
        )
    }
}

#[derive(Clone)]
pub struct Tensor {
    shape: Shape4,
    values: Arc<Vec<f64>>,
    pub(crate) node: Option<NodeId>,
}

impl Tensor {
    /// Builds an untracked tensor. Values must be finite and match the
    /// shape's element count.
    pub fn new(shape: Shape4, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.numel() {
            return Err(shape_err!(
                "{} values supplied for shape {shape} ({} elements)",
                values.len(),
                shape.numel()
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Value(format!(
                "non-finite value {} at flat index {i}",
                values[i]
            )));
        }
        Ok(Self::from_parts(shape, values))
    }

    pub fn zeros(shape: Shape4) -> Self {
        Self::from_parts(shape, vec![0.0; shape.numel()])
    }

    pub fn full(shape: Shape4, value: f64) -> Self {
        Self::from_parts(shape, vec![value; shape.numel()])
    }

    /// Unchecked constructor for kernel outputs.
    pub(crate) fn from_parts(shape: Shape4, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), shape.numel());
        Tensor {
            shape,
            values: Arc::new(values),
            node: None,
        }
    }

    pub(crate) fn shared_values(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.values)
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        Arc::try_unwrap(self.values).unwrap_or_else(|v| (*v).clone())
    }

    pub fn get(&self, b: usize, h: usize, w: usize, c: usize) -> f64 {
        self.values[self.shape.offset(b, h, w, c)]
    }

    /// Tape identity, if this tensor is tracked.
    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// The same values without tape identity.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape,
            values: Arc::clone(&self.values),
            node: None,
        }
    }

    /// Mutable access to the values; copies if they are shared. Drops any
    /// tape identity since the tensor no longer matches its recorded node.
    pub fn values_mut(&mut self) -> &mut [f64] {
        self.node = None;
        Arc::make_mut(&mut self.values).as_mut_slice()
    }

    /// Reinterprets the values under a new shape with the same element count.
    pub fn reshape(&self, shape: Shape4) -> Result<Tensor> {
        if shape.numel() != self.shape.numel() {
            return Err(shape_err!("cannot reshape {} into {shape}", self.shape));
        }
        Ok(Tensor {
            shape,
            values: Arc::clone(&self.values),
            node: None,
        })
    }

    /// Stacks single-sample tensors along the batch axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| shape_err!("cannot stack zero tensors"))?
            .shape();
        let mut values = Vec::with_capacity(first.numel() * items.len());
        let mut batch = 0;
        for t in items {
            let s = t.shape();
            if (s.height, s.width, s.channels) != (first.height, first.width, first.channels) {
                return Err(shape_err!("cannot stack {s} with {first}"));
            }
            batch += s.batch;
            values.extend_from_slice(t.values());
        }
        let shape = Shape4::new(batch, first.height, first.width, first.channels)?;
        Ok(Tensor::from_parts(shape, values))
    }

    /// Bitwise equality of shape and values.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .values
                .iter()
                .zip(other.values.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape).field("node", &self.node);
        if self.values.len() <= 16 {
            s.field("values", &self.values);
        }
        s.finish()
    }
}
