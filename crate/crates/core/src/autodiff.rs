//! Reverse-mode differentiation tape.
//!
//! Every op on [`Tape`] computes its value eagerly and, when at least one
//! operand is tracked, appends a node holding whatever its backward rule
//! needs. Node indices are assigned in execution order, so operands always
//! precede their consumers and a single reverse sweep visits each node once.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::kernels;
use crate::tensor::{Shape4, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a recorded value: which tape, and its position on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

impl NodeId {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Kinds of recorded operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Mul,
    MeanSpatial,
    Dense,
    Relu,
    Sigmoid,
    Conv2d,
    MaxPool,
    Sum,
    SoftmaxCrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 11] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Mul,
        OpKind::MeanSpatial,
        OpKind::Dense,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Conv2d,
        OpKind::MaxPool,
        OpKind::Sum,
        OpKind::SoftmaxCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "ew_add",
            OpKind::Mul => "ew_mul",
            OpKind::MeanSpatial => "mean_spatial",
            OpKind::Dense => "dense",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool => "maxpool2x2",
            OpKind::Sum => "sum",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

type Values = Arc<Vec<f64>>;

enum Op {
    Leaf,
    Add {
        a: Option<usize>,
        b: Option<usize>,
    },
    Mul {
        a: Option<usize>,
        b: Option<usize>,
        a_val: Values,
        b_val: Values,
        a_shape: Shape4,
        broadcast: bool,
    },
    MeanSpatial {
        x: usize,
        in_shape: Shape4,
    },
    Dense {
        x: Option<usize>,
        w: Option<usize>,
        b: Option<usize>,
        x_val: Values,
        w_val: Values,
        n: usize,
        din: usize,
        dout: usize,
    },
    Relu {
        x: usize,
        x_val: Values,
    },
    Sigmoid {
        x: usize,
        out: Values,
    },
    Conv2d {
        x: Option<usize>,
        k: Option<usize>,
        b: Option<usize>,
        x_val: Values,
        k_val: Values,
        x_shape: Shape4,
        k_shape: Shape4,
    },
    MaxPool {
        x: usize,
        x_val: Values,
        argmax: Vec<usize>,
        in_shape: Shape4,
    },
    Sum {
        x: usize,
        in_shape: Shape4,
    },
    SoftmaxCe {
        logits: usize,
        probs: Vec<f64>,
        labels: Vec<usize>,
        classes: usize,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::MeanSpatial { .. } => OpKind::MeanSpatial,
            Op::Dense { .. } => OpKind::Dense,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::Sum { .. } => OpKind::Sum,
            Op::SoftmaxCe { .. } => OpKind::SoftmaxCrossEntropy,
        }
    }
}

struct Node {
    op: Op,
    shape: Shape4,
}

/// Append-only record of one forward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scales the upstream gradient of every `kind` node by 1.5 during
    /// backward. Used to verify that the gradient checker catches bad rules.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, op: Op, shape: Shape4) -> NodeId {
        let index = self.nodes.len();
        self.nodes.push(Node { op, shape });
        NodeId { tape: self.id, index }
    }

    fn operand(&self, t: &Tensor) -> Result<Option<usize>> {
        match t.node {
            None => Ok(None),
            Some(id) if id.tape == self.id && id.index < self.nodes.len() => Ok(Some(id.index)),
            Some(id) => Err(Error::Graph(format!(
                "tensor node {} does not belong to this tape",
                id.index
            ))),
        }
    }

    fn output(&mut self, shape: Shape4, values: Vec<f64>, op: Option<Op>) -> Tensor {
        let mut t = Tensor::from_parts(shape, values);
        if let Some(op) = op {
            t.node = Some(self.push(op, shape));
        }
        t
    }

    /// Registers `t` as a differentiable leaf and returns the tracked copy.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let mut out = t.detach();
        out.node = Some(self.push(Op::Leaf, t.shape()));
        out
    }

    /// Builds a tensor, optionally registering it as a leaf.
    pub fn tensor_new(&mut self, shape: Shape4, values: Vec<f64>, track: bool) -> Result<Tensor> {
        let t = Tensor::new(shape, values)?;
        Ok(if track { self.leaf(&t) } else { t })
    }

    /// Elementwise `a + b` for operands of identical shape.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(shape_err!("ew_add of {} and {}", a.shape(), b.shape()));
        }
        let (ia, ib) = (self.operand(a)?, self.operand(b)?);
        let values = a.values().iter().zip(b.values()).map(|(x, y)| x + y).collect();
        let op = (ia.is_some() || ib.is_some()).then_some(Op::Add { a: ia, b: ib });
        Ok(self.output(a.shape(), values, op))
    }

    /// Elementwise `a * b`. `b` may also have shape `(N, 1, 1, C)`, in which
    /// case it scales every spatial position of the matching channel of `a`.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        let broadcast = if sa == sb {
            false
        } else if sb.batch == sa.batch && sb.channels == sa.channels && sb.height == 1 && sb.width == 1 {
            true
        } else {
            return Err(shape_err!("ew_mul of {sa} and {sb}"));
        };
        let (ia, ib) = (self.operand(a)?, self.operand(b)?);
        let values = if broadcast {
            let (hw, c) = (sa.spatial(), sa.channels);
            let (av, bv) = (a.values(), b.values());
            let mut out = Vec::with_capacity(av.len());
            for n in 0..sa.batch {
                let gate = &bv[n * c..(n + 1) * c];
                for p in 0..hw {
                    let base = (n * hw + p) * c;
                    out.extend(av[base..base + c].iter().zip(gate).map(|(x, s)| x * s));
                }
            }
            out
        } else {
            a.values().iter().zip(b.values()).map(|(x, y)| x * y).collect()
        };
        let op = (ia.is_some() || ib.is_some()).then(|| Op::Mul {
            a: ia,
            b: ib,
            a_val: a.shared_values(),
            b_val: b.shared_values(),
            a_shape: sa,
            broadcast,
        });
        Ok(self.output(sa, values, op))
    }

    /// Per-channel mean over the spatial extent: `(N,H,W,C) -> (N,1,1,C)`.
    pub fn mean_spatial(&mut self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        let ix = self.operand(x)?;
        let (hw, c) = (s.spatial(), s.channels);
        let scale = 1.0 / hw as f64;
        let xv = x.values();
        let mut values = vec![0.0; s.batch * c];
        for n in 0..s.batch {
            let acc = &mut values[n * c..(n + 1) * c];
            for p in 0..hw {
                let base = (n * hw + p) * c;
                for (a, v) in acc.iter_mut().zip(&xv[base..base + c]) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a *= scale;
            }
        }
        let out_shape = Shape4::new(s.batch, 1, 1, c)?;
        let op = ix.map(|x| Op::MeanSpatial { x, in_shape: s });
        Ok(self.output(out_shape, values, op))
    }

    /// Affine map `x (N,1,1,Din)`, `w (1,1,Dout,Din)`, `b (1,1,1,Dout)`.
    pub fn dense(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sx, sw, sb) = (x.shape(), w.shape(), b.shape());
        if sx.height != 1 || sx.width != 1 {
            return Err(shape_err!("dense input must be (N,1,1,D), got {sx}"));
        }
        if sw.batch != 1 || sw.height != 1 || sw.channels != sx.channels {
            return Err(shape_err!("dense weight {sw} incompatible with input {sx}"));
        }
        let dout = sw.width;
        if sb != Shape4::new(1, 1, 1, dout)? {
            return Err(shape_err!("dense bias {sb} incompatible with {dout} outputs"));
        }
        let (ix, iw, ib) = (self.operand(x)?, self.operand(w)?, self.operand(b)?);
        let (n, din) = (sx.batch, sx.channels);
        let values = kernels::dense_forward(x.values(), n, din, w.values(), dout, b.values());
        let op = (ix.is_some() || iw.is_some() || ib.is_some()).then(|| Op::Dense {
            x: ix,
            w: iw,
            b: ib,
            x_val: x.shared_values(),
            w_val: w.shared_values(),
            n,
            din,
            dout,
        });
        Ok(self.output(Shape4::new(n, 1, 1, dout)?, values, op))
    }

    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        let ix = self.operand(x)?;
        let values = x.values().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let op = ix.map(|i| Op::Relu {
            x: i,
            x_val: x.shared_values(),
        });
        Ok(self.output(x.shape(), values, op))
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        let ix = self.operand(x)?;
        let values: Vec<f64> = x.values().iter().map(|&v| sigmoid_scalar(v)).collect();
        let mut out = Tensor::from_parts(x.shape(), values);
        if let Some(i) = ix {
            let op = Op::Sigmoid {
                x: i,
                out: out.shared_values(),
            };
            out.node = Some(self.push(op, x.shape()));
        }
        Ok(out)
    }

    /// Same-padded stride-1 cross-correlation. `k` is
    /// `(out_channels, kh, kw, in_channels)` with odd spatial extents and
    /// `bias` is `(1, 1, 1, out_channels)`.
    pub fn conv2d(&mut self, x: &Tensor, k: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (sx, sk, sb) = (x.shape(), k.shape(), bias.shape());
        if sk.channels != sx.channels {
            return Err(shape_err!("conv2d kernel {sk} does not match input channels of {sx}"));
        }
        if sk.height % 2 == 0 || sk.width % 2 == 0 {
            return Err(shape_err!("conv2d kernel extents must be odd, got {sk}"));
        }
        if sb != Shape4::new(1, 1, 1, sk.batch)? {
            return Err(shape_err!("conv2d bias {sb} does not match {} filters", sk.batch));
        }
        let (ix, ik, ib) = (self.operand(x)?, self.operand(k)?, self.operand(bias)?);
        let values = kernels::conv2d_forward(x.values(), sx, k.values(), sk, bias.values());
        let out_shape = Shape4::new(sx.batch, sx.height, sx.width, sk.batch)?;
        let op = (ix.is_some() || ik.is_some() || ib.is_some()).then(|| Op::Conv2d {
            x: ix,
            k: ik,
            b: ib,
            x_val: x.shared_values(),
            k_val: k.shared_values(),
            x_shape: sx,
            k_shape: sk,
        });
        Ok(self.output(out_shape, values, op))
    }

    /// 2x2 stride-2 max pooling; height and width must be even.
    pub fn maxpool2x2(&mut self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if !s.height.is_multiple_of(2) || !s.width.is_multiple_of(2) {
            return Err(shape_err!("maxpool2x2 needs even spatial extents, got {s}"));
        }
        let ix = self.operand(x)?;
        let (values, argmax) = kernels::maxpool2x2_forward(x.values(), s);
        let out_shape = Shape4::new(s.batch, s.height / 2, s.width / 2, s.channels)?;
        let op = ix.map(|i| Op::MaxPool {
            x: i,
            x_val: x.shared_values(),
            argmax,
            in_shape: s,
        });
        Ok(self.output(out_shape, values, op))
    }

    /// Sum of all elements as a `(1,1,1,1)` scalar.
    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        let ix = self.operand(x)?;
        let total = x.values().iter().sum();
        let op = ix.map(|i| Op::Sum {
            x: i,
            in_shape: x.shape(),
        });
        Ok(self.output(Shape4::scalar(), vec![total], op))
    }

    /// Mean categorical cross-entropy of `logits (N,1,1,K)` against integer
    /// labels, via the max-shifted log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let s = logits.shape();
        if s.height != 1 || s.width != 1 {
            return Err(shape_err!("logits must be (N,1,1,K), got {s}"));
        }
        if labels.len() != s.batch {
            return Err(shape_err!("{} labels for a batch of {}", labels.len(), s.batch));
        }
        let k = s.channels;
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Value(format!("label {bad} out of range for {k} classes")));
        }
        let il = self.operand(logits)?;
        let (probs, loss) = softmax_rows(logits.values(), k, labels);
        let op = il.map(|i| Op::SoftmaxCe {
            logits: i,
            probs,
            labels: labels.to_vec(),
            classes: k,
        });
        Ok(self.output(Shape4::scalar(), vec![loss], op))
    }

    /// Reverse sweep from a scalar `loss`. Every tracked leaf gets an entry,
    /// zero-filled when the loss does not depend on it.
    pub fn backward(&self, loss: &Tensor) -> Result<GradientMap> {
        if loss.shape().numel() != 1 {
            return Err(shape_err!("loss must be scalar, got {}", loss.shape()));
        }
        let root = self
            .operand(loss)?
            .ok_or_else(|| Error::Graph("loss is not tracked on any tape".into()))?;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![1.0]);

        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            self.propagate(&node.op, &g, &mut grads);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match node.op {
                Op::Leaf => Some(Tensor::from_parts(
                    node.shape,
                    g.unwrap_or_else(|| vec![0.0; node.shape.numel()]),
                )),
                _ => None,
            })
            .collect();
        Ok(GradientMap { tape: self.id, grads })
    }

    /// Distinct op kinds recorded so far, in [`OpKind::ALL`] order, leaves
    /// excluded.
    pub fn recorded_ops(&self) -> Vec<OpKind> {
        OpKind::ALL
            .into_iter()
            .filter(|k| *k != OpKind::Leaf && self.nodes.iter().any(|n| n.op.kind() == *k))
            .collect()
    }

    /// Distance of the recorded forward pass from the nearest
    /// non-differentiable point: the smallest `|x|` fed to a ReLU and the
    /// smallest gap between the winner and runner-up of a max-pool window.
    /// Windows tied at exactly zero are skipped: those are dead ReLU outputs
    /// and stay zero while the ReLU margin holds.
    /// Finite differences are only meaningful when this exceeds the
    /// perturbation's effect on those inputs.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x_val, .. } => {
                    margin = x_val.iter().fold(margin, |m, v| m.min(v.abs()));
                }
                Op::MaxPool {
                    x_val, argmax, in_shape, ..
                } => {
                    let s = *in_shape;
                    let c = s.channels;
                    let mut out = 0;
                    for b in 0..s.batch {
                        for i in 0..s.height / 2 {
                            for j in 0..s.width / 2 {
                                for ch in 0..c {
                                    let best = argmax[out];
                                    out += 1;
                                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                        let idx = s.offset(b, 2 * i + di, 2 * j + dj, ch);
                                        if idx != best && !(x_val[best] == 0.0 && x_val[idx] == 0.0) {
                                            margin = margin.min(x_val[best] - x_val[idx]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    fn propagate(&self, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                for t in [a, b].into_iter().flatten() {
                    add_into(slot(grads, *t, g.len()), g);
                }
            }
            Op::Mul {
                a,
                b,
                a_val,
                b_val,
                a_shape,
                broadcast,
            } => {
                if !broadcast {
                    if let Some(a) = a {
                        let dst = slot(grads, *a, g.len());
                        for ((d, gi), bi) in dst.iter_mut().zip(g).zip(b_val.iter()) {
                            *d += gi * bi;
                        }
                    }
                    if let Some(b) = b {
                        let dst = slot(grads, *b, g.len());
                        for ((d, gi), ai) in dst.iter_mut().zip(g).zip(a_val.iter()) {
                            *d += gi * ai;
                        }
                    }
                    return;
                }
                let (hw, c) = (a_shape.spatial(), a_shape.channels);
                if let Some(a) = a {
                    let dst = slot(grads, *a, g.len());
                    for n in 0..a_shape.batch {
                        let gate = &b_val[n * c..(n + 1) * c];
                        for p in 0..hw {
                            let base = (n * hw + p) * c;
                            for ch in 0..c {
                                dst[base + ch] += g[base + ch] * gate[ch];
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    let dst = slot(grads, *b, a_shape.batch * c);
                    for n in 0..a_shape.batch {
                        for p in 0..hw {
                            let base = (n * hw + p) * c;
                            for ch in 0..c {
                                dst[n * c + ch] += g[base + ch] * a_val[base + ch];
                            }
                        }
                    }
                }
            }
            Op::MeanSpatial { x, in_shape } => {
                let (hw, c) = (in_shape.spatial(), in_shape.channels);
                let scale = 1.0 / hw as f64;
                let dst = slot(grads, *x, in_shape.numel());
                for n in 0..in_shape.batch {
                    let gn = &g[n * c..(n + 1) * c];
                    for p in 0..hw {
                        let base = (n * hw + p) * c;
                        for (d, gv) in dst[base..base + c].iter_mut().zip(gn) {
                            *d += gv * scale;
                        }
                    }
                }
            }
            Op::Dense {
                x,
                w,
                b,
                x_val,
                w_val,
                n,
                din,
                dout,
            } => {
                let (n, din, dout) = (*n, *din, *dout);
                if let Some(x) = x {
                    let dst = slot(grads, *x, n * din);
                    for i in 0..n {
                        let row = &mut dst[i * din..(i + 1) * din];
                        for e in 0..dout {
                            let ge = g[i * dout + e];
                            for (d, wv) in row.iter_mut().zip(&w_val[e * din..(e + 1) * din]) {
                                *d += ge * wv;
                            }
                        }
                    }
                }
                if let Some(w) = w {
                    let dst = slot(grads, *w, dout * din);
                    for i in 0..n {
                        let xi = &x_val[i * din..(i + 1) * din];
                        for e in 0..dout {
                            let ge = g[i * dout + e];
                            for (d, xv) in dst[e * din..(e + 1) * din].iter_mut().zip(xi) {
                                *d += ge * xv;
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    let dst = slot(grads, *b, dout);
                    for i in 0..n {
                        add_into(dst, &g[i * dout..(i + 1) * dout]);
                    }
                }
            }
            Op::Relu { x, x_val } => {
                let dst = slot(grads, *x, g.len());
                for ((d, gv), xv) in dst.iter_mut().zip(g).zip(x_val.iter()) {
                    if *xv > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Sigmoid { x, out } => {
                let dst = slot(grads, *x, g.len());
                for ((d, gv), s) in dst.iter_mut().zip(g).zip(out.iter()) {
                    *d += gv * s * (1.0 - s);
                }
            }
            Op::Conv2d {
                x,
                k,
                b,
                x_val,
                k_val,
                x_shape,
                k_shape,
            } => {
                let cg = kernels::conv2d_backward(
                    g,
                    x_val,
                    *x_shape,
                    k_val,
                    *k_shape,
                    (x.is_some(), k.is_some(), b.is_some()),
                );
                for (target, part) in [(x, cg.x), (k, cg.k), (b, cg.bias)] {
                    if let (Some(t), Some(part)) = (target, part) {
                        add_into(slot(grads, *t, part.len()), &part);
                    }
                }
            }
            Op::MaxPool {
                x, argmax, in_shape, ..
            } => {
                let dst = slot(grads, *x, in_shape.numel());
                for (gv, &src) in g.iter().zip(argmax) {
                    dst[src] += gv;
                }
            }
            Op::Sum { x, in_shape } => {
                let dst = slot(grads, *x, in_shape.numel());
                for d in dst.iter_mut() {
                    *d += g[0];
                }
            }
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
                classes,
            } => {
                let k = *classes;
                let scale = g[0] / labels.len() as f64;
                let dst = slot(grads, *logits, probs.len());
                for (i, &label) in labels.iter().enumerate() {
                    for c in 0..k {
                        let onehot = if c == label { 1.0 } else { 0.0 };
                        dst[i * k + c] += scale * (probs[i * k + c] - onehot);
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], index: usize, len: usize) -> &mut Vec<f64> {
    grads[index].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Row-wise softmax of `(N, K)` logits plus the mean negative
/// log-likelihood of `labels`.
pub(crate) fn softmax_rows(logits: &[f64], k: usize, labels: &[usize]) -> (Vec<f64>, f64) {
    let mut probs = Vec::with_capacity(logits.len());
    let mut total = 0.0;
    for (row, &label) in logits.chunks_exact(k).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[label];
        probs.extend(row.iter().map(|z| (z - lse).exp()));
    }
    (probs, total / labels.len() as f64)
}

/// Gradients of the tracked leaves of one tape.
#[derive(Debug, Clone)]
pub struct GradientMap {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    /// Gradient for a tracked leaf; `None` for untracked tensors, interior
    /// nodes, or tensors from another tape.
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        let id = t.node()?;
        if id.tape != self.tape {
            return None;
        }
        self.grads.get(id.index)?.as_ref()
    }

    /// Leaf gradients in node order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }

    pub fn bit_eq(&self, other: &GradientMap) -> bool {
        self.grads.len() == other.grads.len()
            && self.grads.iter().zip(&other.grads).all(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => a.bit_eq(b),
                (None, None) => true,
                _ => false,
            })
    }
}
