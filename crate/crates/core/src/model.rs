//! Convolutional backbone, optional attention block, and dense head.
//!
//! Layer order: `blocks` of 3x3 same-padded conv + ReLU (each optionally
//! followed by 2x2 max pooling), the attention block after block
//! `fab_after_block` (the last one by default), spatial mean, a hidden
//! dense layer with ReLU, and the output dense layer producing logits.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{fab_forward, FabActivations, FabParams, DEFAULT_RATIO};
use crate::autodiff::Tape;
use crate::error::{shape_err, Error, Result};
use crate::init::{glorot_uniform, he_uniform};
use crate::tensor::{Shape4, Tensor};

pub const KERNEL_SIZE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    pub pool: bool,
}

impl ConvBlockSpec {
    pub fn new(out_channels: usize, pool: bool) -> Self {
        ConvBlockSpec { out_channels, pool }
    }
}

impl fmt::Display for ConvBlockSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.pool {
            write!(f, "{}:pool", self.out_channels)
        } else {
            write!(f, "{}", self.out_channels)
        }
    }
}

impl FromStr for ConvBlockSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (channels, pool) = match s.split_once(':') {
            Some((c, "pool")) => (c, true),
            Some((_, other)) => {
                return Err(Error::Config(format!("unknown block suffix {other:?} in {s:?}")))
            }
            None => (s, false),
        };
        let out_channels = channels
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad block channel count in {s:?}")))?;
        Ok(ConvBlockSpec { out_channels, pool })
    }
}

/// Formats blocks as the comma list `16:pool,32:pool,64`.
pub fn format_blocks(blocks: &[ConvBlockSpec]) -> String {
    blocks.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn parse_blocks(s: &str) -> Result<Vec<ConvBlockSpec>> {
    s.split(',').map(str::parse).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// (height, width) of input images.
    pub input_size: (usize, usize),
    pub in_channels: usize,
    pub blocks: Vec<ConvBlockSpec>,
    pub use_fab: bool,
    pub fab_ratio: usize,
    /// Index of the block the attention block follows; `None` means the last.
    pub fab_after_block: Option<usize>,
    pub head_hidden: usize,
    pub num_classes: usize,
    pub freeze_backbone: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: (32, 32),
            in_channels: 3,
            blocks: vec![
                ConvBlockSpec::new(16, true),
                ConvBlockSpec::new(32, true),
                ConvBlockSpec::new(64, true),
            ],
            use_fab: true,
            fab_ratio: DEFAULT_RATIO,
            fab_after_block: None,
            head_hidden: 64,
            num_classes: 5,
            freeze_backbone: false,
        }
    }
}

impl ModelConfig {
    /// Spatial size and channel count after each block.
    pub fn block_outputs(&self) -> Result<Vec<(usize, usize, usize)>> {
        let (mut h, mut w) = self.input_size;
        if h == 0 || w == 0 {
            return Err(Error::Config("input size must be at least 1x1".into()));
        }
        let mut out = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 {
                return Err(Error::Config(format!("block {i} has zero channels")));
            }
            if b.pool {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Config(format!(
                        "block {i} pools an odd {h}x{w} feature map"
                    )));
                }
                h /= 2;
                w /= 2;
                if h == 0 || w == 0 {
                    return Err(Error::Config(format!("feature map vanishes after block {i}")));
                }
            }
            out.push((h, w, b.out_channels));
        }
        Ok(out)
    }

    /// Final feature map `(H, W, C)` before the head.
    pub fn feature_map(&self) -> Result<(usize, usize, usize)> {
        self.block_outputs()?
            .last()
            .copied()
            .ok_or_else(|| Error::Config("at least one conv block is required".into()))
    }

    pub fn fab_block(&self) -> usize {
        self.fab_after_block
            .unwrap_or_else(|| self.blocks.len().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        let outputs = self.block_outputs()?;
        if outputs.is_empty() {
            return Err(Error::Config("at least one conv block is required".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.head_hidden == 0 {
            return Err(Error::Config("head_hidden must be >= 1".into()));
        }
        if self.use_fab {
            let at = self.fab_block();
            let (_, _, c) = *outputs.get(at).ok_or_else(|| {
                Error::Config(format!("fab_after_block {at} is past the last block"))
            })?;
            if self.fab_ratio == 0 || c % self.fab_ratio != 0 {
                return Err(Error::Config(format!(
                    "fab_ratio {} must divide the {c} channels of block {at}",
                    self.fab_ratio
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Attention,
    Head,
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
}

#[derive(Debug, Clone)]
struct Layout {
    conv: Vec<(usize, usize)>,
    fab: Option<[usize; 4]>,
    head: [usize; 4],
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    class_names: Vec<String>,
    params: Vec<Parameter>,
    layout: Layout,
}

/// Output of a forward pass through [`Model::forward_with`].
pub struct ForwardPass {
    pub logits: Tensor,
    pub attention: Option<FabActivations>,
}

pub const FAB_PARAM_NAMES: [&str; 4] = ["fab.W1", "fab.b1", "fab.W2", "fab.b2"];

impl Model {
    /// Deterministic initialization from `seed`: He-uniform conv and hidden
    /// dense weights, Glorot-uniform output weights, zero biases. The
    /// attention block draws from a separate stream, so models that differ
    /// only in `use_fab` share every other initial value.
    pub fn build(config: ModelConfig, class_names: Vec<String>, seed: u64) -> Result<Model> {
        config.validate()?;
        if class_names.len() != config.num_classes {
            return Err(Error::Config(format!(
                "{} class names for {} classes",
                class_names.len(),
                config.num_classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fab_rng = ChaCha8Rng::seed_from_u64(seed);
        fab_rng.set_stream(1);

        let outputs = config.block_outputs()?;
        let mut params = Vec::new();
        let mut conv = Vec::new();
        let mut fab = None;
        let mut cin = config.in_channels;
        for (i, block) in config.blocks.iter().enumerate() {
            let cout = block.out_channels;
            let fan_in = KERNEL_SIZE * KERNEL_SIZE * cin;
            let kshape = Shape4::new(cout, KERNEL_SIZE, KERNEL_SIZE, cin)?;
            let k = he_uniform(&mut rng, fan_in, kshape.numel());
            conv.push((params.len(), params.len() + 1));
            params.push(Parameter {
                name: format!("conv{i}.kernel"),
                value: Tensor::from_parts(kshape, k),
                group: ParamGroup::Backbone,
            });
            params.push(Parameter {
                name: format!("conv{i}.bias"),
                value: Tensor::zeros(Shape4::new(1, 1, 1, cout)?),
                group: ParamGroup::Backbone,
            });
            cin = cout;
            if config.use_fab && i == config.fab_block() {
                let p = FabParams::init(outputs[i].2, config.fab_ratio, &mut fab_rng)?;
                let base = params.len();
                for (name, value) in FAB_PARAM_NAMES.iter().zip([p.w1, p.b1, p.w2, p.b2]) {
                    params.push(Parameter {
                        name: name.to_string(),
                        value,
                        group: ParamGroup::Attention,
                    });
                }
                fab = Some([base, base + 1, base + 2, base + 3]);
            }
        }

        let (hidden, classes) = (config.head_hidden, config.num_classes);
        let w_hidden = he_uniform(&mut rng, cin, hidden * cin);
        let w_out = glorot_uniform(&mut rng, hidden, classes, classes * hidden);
        let base = params.len();
        let head = [
            ("head.hidden.weight", Tensor::from_parts(Shape4::new(1, 1, hidden, cin)?, w_hidden)),
            ("head.hidden.bias", Tensor::zeros(Shape4::new(1, 1, 1, hidden)?)),
            ("head.out.weight", Tensor::from_parts(Shape4::new(1, 1, classes, hidden)?, w_out)),
            ("head.out.bias", Tensor::zeros(Shape4::new(1, 1, 1, classes)?)),
        ];
        for (name, value) in head {
            params.push(Parameter {
                name: name.into(),
                value,
                group: ParamGroup::Head,
            });
        }

        Ok(Model {
            config,
            class_names,
            params,
            layout: Layout {
                conv,
                fab,
                head: [base, base + 1, base + 2, base + 3],
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn is_trainable(&self, p: &Parameter) -> bool {
        !(self.config.freeze_backbone && p.group == ParamGroup::Backbone)
    }

    /// Parameters the optimizer updates: everything except the backbone
    /// when it is frozen.
    pub fn trainable_parameters(&self) -> Vec<&Parameter> {
        self.params.iter().filter(|p| self.is_trainable(p)).collect()
    }

    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| self.is_trainable(&self.params[i]))
            .collect()
    }

    pub fn set_freeze_backbone(&mut self, freeze: bool) {
        self.config.freeze_backbone = freeze;
    }

    /// Replaces the value of parameter `index`; the shape must not change.
    pub fn set_parameter(&mut self, index: usize, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(index)
            .ok_or_else(|| Error::Config(format!("no parameter at index {index}")))?;
        if slot.value.shape() != value.shape() {
            return Err(shape_err!(
                "{} has shape {}, got {}",
                slot.name,
                slot.value.shape(),
                value.shape()
            ));
        }
        slot.value = value.detach();
        Ok(())
    }

    /// Copies the backbone weights of `source`, which must have the same
    /// block layout. The attention block and head are left untouched.
    pub fn load_backbone_from(&mut self, source: &Model) -> Result<()> {
        if source.config.blocks != self.config.blocks
            || source.config.in_channels != self.config.in_channels
        {
            return Err(Error::Config(format!(
                "backbone mismatch: source blocks [{}], target blocks [{}]",
                format_blocks(&source.config.blocks),
                format_blocks(&self.config.blocks)
            )));
        }
        for (dst, src) in self.layout.conv.iter().zip(&source.layout.conv) {
            self.params[dst.0].value = source.params[src.0].value.detach();
            self.params[dst.1].value = source.params[src.1].value.detach();
        }
        Ok(())
    }

    /// Puts the parameters on `tape`; trainable ones become tracked leaves
    /// when `track` is set, the rest are used as constants.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|p| {
                if track && self.is_trainable(p) {
                    tape.leaf(&p.value)
                } else {
                    p.value.detach()
                }
            })
            .collect()
    }

    /// Forward pass using `bound` (from [`Model::bind`]) as parameter values.
    pub fn forward_with(&self, tape: &mut Tape, x: &Tensor, bound: &[Tensor]) -> Result<ForwardPass> {
        let s = x.shape();
        let (h, w) = self.config.input_size;
        if (s.height, s.width, s.channels) != (h, w, self.config.in_channels) {
            return Err(shape_err!(
                "model expects (N, {h}, {w}, {}) input, got {s}",
                self.config.in_channels
            ));
        }
        if bound.len() != self.params.len() {
            return Err(shape_err!(
                "{} bound parameters for a model with {}",
                bound.len(),
                self.params.len()
            ));
        }
        let mut features = x.clone();
        let mut attention = None;
        for (i, (block, &(k, b))) in self.config.blocks.iter().zip(&self.layout.conv).enumerate() {
            let z = tape.conv2d(&features, &bound[k], &bound[b])?;
            features = tape.relu(&z)?;
            if block.pool {
                features = tape.maxpool2x2(&features)?;
            }
            if let (Some(idx), true) = (self.layout.fab, i == self.config.fab_block()) {
                let p = FabParams::from_tensors(
                    bound[idx[0]].clone(),
                    bound[idx[1]].clone(),
                    bound[idx[2]].clone(),
                    bound[idx[3]].clone(),
                    self.config.fab_ratio,
                )?;
                let acts = fab_forward(tape, &features, &p)?;
                features = acts.out.clone();
                attention = Some(acts);
            }
        }
        let pooled = tape.mean_spatial(&features)?;
        let [wh, bh, wo, bo] = self.layout.head;
        let hidden = tape.dense(&pooled, &bound[wh], &bound[bh])?;
        let hidden = tape.relu(&hidden)?;
        let logits = tape.dense(&hidden, &bound[wo], &bound[bo])?;
        Ok(ForwardPass { logits, attention })
    }

    /// Inference-only logits `(N, 1, 1, num_classes)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        Ok(self.forward_with(&mut tape, x, &bound)?.logits)
    }

    /// Assembles a model from saved parts, checking every parameter against
    /// the layout `config` implies.
    pub(crate) fn from_parts(
        config: ModelConfig,
        class_names: Vec<String>,
        values: Vec<(String, Tensor)>,
    ) -> Result<Model> {
        let mut model = Model::build(config, class_names, 0)
            .map_err(|e| Error::Format(format!("invalid stored config: {e}")))?;
        if values.len() != model.params.len() {
            return Err(Error::Format(format!(
                "{} stored parameters, config implies {}",
                values.len(),
                model.params.len()
            )));
        }
        for (slot, (name, value)) in model.params.iter_mut().zip(values) {
            if slot.name != name || slot.value.shape() != value.shape() {
                return Err(Error::Format(format!(
                    "stored parameter {name} {} does not match expected {} {}",
                    value.shape(),
                    slot.name,
                    slot.value.shape()
                )));
            }
            slot.value = value;
        }
        Ok(model)
    }
}
