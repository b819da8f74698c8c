//! The three networks: STGCN, STGCN-LSTM and the ConvNeXt-LSTM hybrid.
//!
//! A [`Model`] owns its configuration, parameters and normalized
//! adjacency. Every model maps one sample tensor to two logits:
//!
//! | kind          | input                                   |
//! |---------------|-----------------------------------------|
//! | `stgcn`       | landmarks `[frames, V, 2]`              |
//! | `stgcn_lstm`  | landmarks `[frames, V, 2]`              |
//! | `hybrid`      | features `[frames, D]` or images `[frames, 3, S, S]` |

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Conv2dSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::FacialGraph;
use crate::layers::{
    convlstm_sequence, graph_convolution_frames, Bound, ConvLstm, Linear, LstmVariant,
    ParamBuilder, ParamId, ParamStore, SequenceLstm, TemporalConv,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;
pub const DEFAULT_FRAMES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModelKind {
    Stgcn,
    #[default]
    StgcnLstm,
    Hybrid,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Stgcn => "stgcn",
            ModelKind::StgcnLstm => "stgcn_lstm",
            ModelKind::Hybrid => "hybrid",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stgcn" => Ok(ModelKind::Stgcn),
            "stgcn_lstm" | "stgcn-lstm" => Ok(ModelKind::StgcnLstm),
            "hybrid" => Ok(ModelKind::Hybrid),
            other => Err(Error::Config(format!(
                "unknown model kind `{other}` (expected stgcn|stgcn_lstm|hybrid)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backbone {
    ToyConvnext,
    #[default]
    PrecomputedFeatures,
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::ToyConvnext => "toy_convnext",
            Backbone::PrecomputedFeatures => "precomputed_features",
        })
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy_convnext" => Ok(Backbone::ToyConvnext),
            "precomputed_features" => Ok(Backbone::PrecomputedFeatures),
            other => Err(Error::Config(format!(
                "unknown backbone `{other}` (expected toy_convnext|precomputed_features)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StgcnBlockConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub temporal_kernel: usize,
    pub use_gate: bool,
}

impl StgcnBlockConfig {
    pub fn new(c_in: usize, c_out: usize) -> Self {
        Self {
            c_in,
            c_out,
            temporal_kernel: 9,
            use_gate: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 {
            return Err(Error::Config(format!(
                "block widths must be positive, got {}->{}",
                self.c_in, self.c_out
            )));
        }
        crate::layers::same_padding(self.temporal_kernel).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvNextConfig {
    pub stage_channels: [usize; 4],
    pub stage_blocks: [usize; 4],
    pub image_size: usize,
    pub expansion: usize,
}

impl Default for ConvNextConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl ConvNextConfig {
    pub fn tiny() -> Self {
        Self {
            stage_channels: [96, 192, 384, 768],
            stage_blocks: [3, 3, 9, 3],
            image_size: 224,
            expansion: 4,
        }
    }

    pub fn toy() -> Self {
        Self {
            stage_channels: [8, 16, 32, 64],
            stage_blocks: [1, 1, 1, 1],
            image_size: 32,
            expansion: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of 32",
                self.image_size
            )));
        }
        if self.stage_channels.contains(&0) || self.expansion == 0 {
            return Err(Error::Config("convnext widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub blocks: Vec<StgcnBlockConfig>,
    pub lstm_hidden: usize,
    pub lstm_variant: LstmVariant,
    pub num_classes: usize,
    pub backbone: Backbone,
    pub convnext: ConvNextConfig,
    /// Per-frame feature length for the precomputed-features backbone.
    pub feature_dim: usize,
    pub frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::StgcnLstm,
            blocks: vec![
                StgcnBlockConfig::new(2, 32),
                StgcnBlockConfig::new(32, 64),
                StgcnBlockConfig::new(64, 64),
            ],
            lstm_hidden: 64,
            lstm_variant: LstmVariant::Stacked,
            num_classes: 2,
            backbone: Backbone::PrecomputedFeatures,
            convnext: ConvNextConfig::toy(),
            feature_dim: 16,
            frames: DEFAULT_FRAMES,
        }
    }
}

impl ModelConfig {
    pub fn with_kind(kind: ModelKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    /// Replaces the block plan with a chain of widths starting at 2.
    pub fn with_widths(mut self, widths: &[usize]) -> Self {
        self.blocks = widths
            .windows(2)
            .map(|w| StgcnBlockConfig::new(w[0], w[1]))
            .collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes != 2 {
            return Err(Error::Config(format!(
                "num_classes must be 2, got {}",
                self.num_classes
            )));
        }
        if self.frames == 0 || self.lstm_hidden == 0 {
            return Err(Error::Config("frames and lstm_hidden must be positive".into()));
        }
        match self.kind {
            ModelKind::Stgcn | ModelKind::StgcnLstm => {
                let first = self
                    .blocks
                    .first()
                    .ok_or_else(|| Error::Config("at least one STGCN block is required".into()))?;
                if first.c_in != 2 {
                    return Err(Error::Config(format!(
                        "first block must take 2 input channels, got {}",
                        first.c_in
                    )));
                }
                for (i, pair) in self.blocks.windows(2).enumerate() {
                    if pair[0].c_out != pair[1].c_in {
                        return Err(Error::Config(format!(
                            "block {} outputs {} channels but block {} expects {}",
                            i,
                            pair[0].c_out,
                            i + 1,
                            pair[1].c_in
                        )));
                    }
                }
                self.blocks.iter().try_for_each(StgcnBlockConfig::validate)
            }
            ModelKind::Hybrid => match self.backbone {
                Backbone::ToyConvnext => self.convnext.validate(),
                Backbone::PrecomputedFeatures if self.feature_dim == 0 => {
                    Err(Error::Config("feature_dim must be positive".into()))
                }
                Backbone::PrecomputedFeatures => Ok(()),
            },
        }
    }

    /// Shape of one input sample for a graph with `num_nodes` nodes.
    pub fn input_shape(&self, num_nodes: usize) -> Vec<usize> {
        match (self.kind, self.backbone) {
            (ModelKind::Hybrid, Backbone::PrecomputedFeatures) => vec![self.frames, self.feature_dim],
            (ModelKind::Hybrid, Backbone::ToyConvnext) => {
                let s = self.convnext.image_size;
                vec![self.frames, 3, s, s]
            }
            _ => vec![self.frames, num_nodes, 2],
        }
    }

    /// Flat `key=value` pairs, the inverse of [`ModelConfig::from_pairs`].
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let join = |xs: &[usize]| xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let widths: Vec<usize> = self
            .blocks
            .first()
            .map(|b| b.c_in)
            .into_iter()
            .chain(self.blocks.iter().map(|b| b.c_out))
            .collect();
        let kernels: Vec<usize> = self.blocks.iter().map(|b| b.temporal_kernel).collect();
        let gates: Vec<String> = self.blocks.iter().map(|b| b.use_gate.to_string()).collect();
        vec![
            ("kind".into(), self.kind.to_string()),
            ("widths".into(), join(&widths)),
            ("temporal_kernels".into(), join(&kernels)),
            ("use_gate".into(), gates.join(",")),
            ("lstm_hidden".into(), self.lstm_hidden.to_string()),
            ("lstm_variant".into(), self.lstm_variant.to_string()),
            ("num_classes".into(), self.num_classes.to_string()),
            ("backbone".into(), self.backbone.to_string()),
            ("convnext_channels".into(), join(&self.convnext.stage_channels)),
            ("convnext_blocks".into(), join(&self.convnext.stage_blocks)),
            ("image_size".into(), self.convnext.image_size.to_string()),
            ("expansion".into(), self.convnext.expansion.to_string()),
            ("feature_dim".into(), self.feature_dim.to_string()),
            ("frames".into(), self.frames.to_string()),
        ]
    }

    /// Applies one `key=value` setting. Returns `Ok(false)` for keys that
    /// do not belong to the model configuration.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = |what: &str| Error::Config(format!("invalid {key} `{value}`: {what}"));
        let list = |v: &str| -> Result<Vec<usize>> {
            v.split(',')
                .map(|s| s.trim().parse::<usize>().map_err(|e| bad(&e.to_string())))
                .collect()
        };
        let four = |v: &str| -> Result<[usize; 4]> {
            list(v)?
                .try_into()
                .map_err(|_| bad("expected four comma-separated values"))
        };
        let num = |v: &str| v.trim().parse::<usize>().map_err(|e| bad(&e.to_string()));
        match key {
            "kind" => self.kind = value.parse()?,
            "widths" => {
                let w = list(value)?;
                if w.len() < 2 {
                    return Err(bad("need at least two widths"));
                }
                let old = self.blocks.clone();
                *self = self.clone().with_widths(&w);
                for (b, o) in self.blocks.iter_mut().zip(old) {
                    b.temporal_kernel = o.temporal_kernel;
                    b.use_gate = o.use_gate;
                }
            }
            "temporal_kernel" | "temporal_kernels" => {
                let ks = list(value)?;
                for (i, b) in self.blocks.iter_mut().enumerate() {
                    b.temporal_kernel = if ks.len() == 1 { ks[0] } else { *ks.get(i).ok_or_else(|| bad("one kernel per block"))? };
                }
            }
            "use_gate" => {
                let gs = value
                    .split(',')
                    .map(|s| s.trim().parse::<bool>().map_err(|e| bad(&e.to_string())))
                    .collect::<Result<Vec<_>>>()?;
                for (i, b) in self.blocks.iter_mut().enumerate() {
                    b.use_gate = if gs.len() == 1 { gs[0] } else { *gs.get(i).ok_or_else(|| bad("one flag per block"))? };
                }
            }
            "lstm_hidden" => self.lstm_hidden = num(value)?,
            "lstm_variant" => self.lstm_variant = value.parse()?,
            "num_classes" => self.num_classes = num(value)?,
            "backbone" => self.backbone = value.parse()?,
            "convnext_channels" => self.convnext.stage_channels = four(value)?,
            "convnext_blocks" => self.convnext.stage_blocks = four(value)?,
            "image_size" => self.convnext.image_size = num(value)?,
            "expansion" => self.convnext.expansion = num(value)?,
            "feature_dim" => self.feature_dim = num(value)?,
            "frames" => self.frames = num(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            if !cfg.apply(k, v)? {
                return Err(Error::Config(format!("unknown model key `{k}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---- shared pieces -----------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, c: usize) -> Self {
        Self {
            gamma: b.constant("gamma", &[c], 1.0),
            beta: b.constant("beta", &[c], 0.0),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.get(self.gamma), p.get(self.beta), T::of(LN_EPS))
    }
}

/// Applies a dense layer to the last axis of `[.., C]`.
fn pointwise<T: Scalar>(tape: &mut Tape<T>, layer: &Linear, p: &Bound, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let c = *shape.last().expect("rank >= 1");
    let rows = shape.iter().product::<usize>() / c;
    let flat = tape.reshape(x, &[rows, c])?;
    let y = layer.forward(tape, p, flat)?;
    let mut out = shape;
    *out.last_mut().unwrap() = layer.out_dim;
    tape.reshape(y, &out)
}

/// Layer norm over the channel axis of `[C, H, W]`.
fn channel_norm<T: Scalar>(tape: &mut Tape<T>, ln: &LayerNormParams, p: &Bound, x: Var) -> Result<Var> {
    let last = tape.permute(x, &[1, 2, 0])?;
    let y = ln.forward(tape, p, last)?;
    tape.permute(y, &[2, 0, 1])
}

// ---- STGCN ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct StgcnBlock {
    pub cfg: StgcnBlockConfig,
    pub gcn: ParamId,
    pub tc: TemporalConv,
    pub convlstm: ConvLstm,
    pub gate: Option<Linear>,
    pub residual: Linear,
    pub proj: Linear,
    pub norm: LayerNormParams,
}

impl StgcnBlock {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: StgcnBlockConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.c_out;
        Ok(Self {
            cfg,
            gcn: b.scope("gcn", |b| b.fan_in("weight", &[cfg.c_in, c], cfg.c_in)),
            tc: b.scope("tc", |b| TemporalConv::new(b, c, c, cfg.temporal_kernel))?,
            convlstm: b.scope("convlstm", |b| ConvLstm::new(b, c, c)),
            gate: cfg.use_gate.then(|| b.scope("gate", |b| Linear::new(b, c, c))),
            residual: b.scope("residual", |b| Linear::new(b, cfg.c_in, c)),
            proj: b.scope("proj", |b| Linear::new(b, 2 * c, c)),
            norm: b.scope("norm", |b| LayerNormParams::new(b, c)),
        })
    }

    pub fn num_scalars(cfg: &StgcnBlockConfig) -> usize {
        let (ci, c) = (cfg.c_in, cfg.c_out);
        ci * c
            + TemporalConv::num_scalars(c, c, cfg.temporal_kernel)
            + crate::layers::LstmParams::num_scalars(c, c)
            + if cfg.use_gate { Linear::num_scalars(c, c) } else { 0 }
            + Linear::num_scalars(ci, c)
            + Linear::num_scalars(2 * c, c)
            + 2 * c
    }

    /// `[T, V, C_in]` to `[T, V, C_out]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, a_hat: Var, x: Var) -> Result<Var> {
        let sx = tape.shape(x).to_vec();
        let v = tape.shape(a_hat)[0];
        if sx.len() != 3 || sx[1] != v || sx[2] != self.cfg.c_in {
            return Err(Error::shape(
                "stgcn_block",
                format!(
                    "input {sx:?} does not match a {v}-node graph with {} channels",
                    self.cfg.c_in
                ),
            ));
        }
        let g = graph_convolution_frames(tape, a_hat, x, p.get(self.gcn))?;
        let g = tape.gelu(g);
        let tc = self.tc.forward(tape, p, g)?;
        let lstm = convlstm_sequence(tape, &self.convlstm, p, a_hat, tc)?;
        let path = match &self.gate {
            Some(gate) => {
                let logits = pointwise(tape, gate, p, tc)?;
                let s = tape.sigmoid(logits);
                tape.mul(s, lstm)?
            }
            None => lstm,
        };
        let res = pointwise(tape, &self.residual, p, x)?;
        let both = tape.concat(&[path, res], 2)?;
        let y = pointwise(tape, &self.proj, p, both)?;
        self.norm.forward(tape, p, y)
    }
}

// ---- ConvNeXt ------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ConvNextBlock {
    pub channels: usize,
    pub dw_kernel: ParamId,
    pub dw_bias: ParamId,
    pub norm: LayerNormParams,
    pub expand: Linear,
    pub contract: Linear,
}

impl ConvNextBlock {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, c: usize, expansion: usize) -> Self {
        Self {
            channels: c,
            dw_kernel: b.fan_in("dw_kernel", &[c, 1, 7, 7], 49),
            dw_bias: b.constant("dw_bias", &[c], 0.0),
            norm: b.scope("norm", |b| LayerNormParams::new(b, c)),
            expand: b.scope("expand", |b| Linear::new(b, c, expansion * c)),
            contract: b.scope("contract", |b| Linear::new(b, expansion * c, c)),
        }
    }

    /// `[C, H, W]` to `[C, H, W]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let c = self.channels;
        let spec = Conv2dSpec {
            stride: 1,
            pad: 3,
            groups: c,
        };
        let y = tape.conv2d(x, p.get(self.dw_kernel), spec)?;
        let y = tape.add_bias(y, p.get(self.dw_bias), 0)?;
        let y = tape.permute(y, &[1, 2, 0])?;
        let y = self.norm.forward(tape, p, y)?;
        let y = pointwise(tape, &self.expand, p, y)?;
        let y = tape.gelu(y);
        let y = pointwise(tape, &self.contract, p, y)?;
        let y = tape.permute(y, &[2, 0, 1])?;
        tape.add(x, y)
    }
}

#[derive(Debug, Clone)]
struct Downsample {
    norm: LayerNormParams,
    kernel: ParamId,
    bias: ParamId,
}

/// Resolutions, widths and block count observed during one backbone pass.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BackboneTrace {
    pub stage_resolutions: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub blocks_executed: usize,
}

#[derive(Debug, Clone)]
pub struct ConvNext {
    pub cfg: ConvNextConfig,
    stem_kernel: ParamId,
    stem_bias: ParamId,
    stem_norm: LayerNormParams,
    stages: Vec<Vec<ConvNextBlock>>,
    downsamples: Vec<Downsample>,
}

impl ConvNext {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &ConvNextConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.stage_channels;
        let (stem_kernel, stem_bias, stem_norm) = b.scope("stem", |b| {
            (
                b.fan_in("kernel", &[ch[0], 3, 4, 4], 48),
                b.constant("bias", &[ch[0]], 0.0),
                b.scope("norm", |b| LayerNormParams::new(b, ch[0])),
            )
        });
        let mut stages = Vec::new();
        let mut downsamples = Vec::new();
        for s in 0..4 {
            if s > 0 {
                downsamples.push(b.scope(&format!("down{s}"), |b| Downsample {
                    norm: b.scope("norm", |b| LayerNormParams::new(b, ch[s - 1])),
                    kernel: b.fan_in("kernel", &[ch[s], ch[s - 1], 2, 2], 4 * ch[s - 1]),
                    bias: b.constant("bias", &[ch[s]], 0.0),
                }));
            }
            let blocks = b.scope(&format!("stage{s}"), |b| {
                (0..cfg.stage_blocks[s])
                    .map(|i| b.scope(&format!("block{i}"), |b| ConvNextBlock::new(b, ch[s], cfg.expansion)))
                    .collect()
            });
            stages.push(blocks);
        }
        Ok(Self {
            cfg: cfg.clone(),
            stem_kernel,
            stem_bias,
            stem_norm,
            stages,
            downsamples,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.cfg.stage_channels[3]
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, p, image)?.0)
    }

    /// `[3, S, S]` to a feature vector `[C4]`.
    pub fn forward_traced<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        image: Var,
    ) -> Result<(Var, BackboneTrace)> {
        let s = self.cfg.image_size;
        let si = tape.shape(image).to_vec();
        if si.len() != 3 || si[0] != 3 || !si[1].is_multiple_of(32) || !si[2].is_multiple_of(32) {
            return Err(Error::shape(
                "convnext",
                format!("image {si:?} must be [3, S, S] with S a multiple of 32"),
            ));
        }
        if si[1] != s || si[2] != s {
            return Err(Error::shape(
                "convnext",
                format!("image {si:?} does not match configured size {s}"),
            ));
        }
        let mut trace = BackboneTrace::default();
        let stem = Conv2dSpec {
            stride: 4,
            ..Conv2dSpec::default()
        };
        let mut x = tape.conv2d(image, p.get(self.stem_kernel), stem)?;
        x = tape.add_bias(x, p.get(self.stem_bias), 0)?;
        x = channel_norm(tape, &self.stem_norm, p, x)?;
        for (stage, blocks) in self.stages.iter().enumerate() {
            if stage > 0 {
                let d = &self.downsamples[stage - 1];
                x = channel_norm(tape, &d.norm, p, x)?;
                let spec = Conv2dSpec {
                    stride: 2,
                    ..Conv2dSpec::default()
                };
                x = tape.conv2d(x, p.get(d.kernel), spec)?;
                x = tape.add_bias(x, p.get(d.bias), 0)?;
            }
            for block in blocks {
                x = block.forward(tape, p, x)?;
                trace.blocks_executed += 1;
            }
            let sh = tape.shape(x);
            trace.stage_channels.push(sh[0]);
            trace.stage_resolutions.push(sh[1]);
        }
        let c = tape.shape(x)[0];
        let hw = tape.shape(x)[1] * tape.shape(x)[2];
        let flat = tape.reshape(x, &[c, hw])?;
        let pooled = tape.mean_axis(flat, 1)?;
        Ok((pooled, trace))
    }
}

// ---- full models ----------------------------------------------------------------

#[derive(Debug, Clone)]
enum Net {
    Stgcn {
        blocks: Vec<StgcnBlock>,
        head: Linear,
    },
    StgcnLstm {
        blocks: Vec<StgcnBlock>,
        lstm: SequenceLstm,
        head: Linear,
    },
    Hybrid {
        backbone: Option<ConvNext>,
        lstm: SequenceLstm,
        head: Linear,
    },
}

/// A configured network with its parameters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    adjacency: Tensor<T>,
    net: Net,
}

fn build_blocks<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Result<Vec<StgcnBlock>> {
    cfg.blocks
        .iter()
        .enumerate()
        .map(|(i, bc)| b.scope(&format!("block{i}"), |b| StgcnBlock::new(b, *bc)))
        .collect()
}

impl<T: Scalar> Model<T> {
    /// Builds a model with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, graph: &FacialGraph, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut params, &mut rng);
        let ncls = config.num_classes;
        let net = match config.kind {
            ModelKind::Stgcn => {
                let blocks = build_blocks(&mut b, &config)?;
                let c = blocks.last().unwrap().cfg.c_out;
                let head = b.scope("head", |b| Linear::new(b, c, ncls));
                Net::Stgcn { blocks, head }
            }
            ModelKind::StgcnLstm => {
                let blocks = build_blocks(&mut b, &config)?;
                let c = blocks.last().unwrap().cfg.c_out;
                let lstm = b.scope("lstm", |b| SequenceLstm::new(b, config.lstm_variant, c, config.lstm_hidden));
                let head = b.scope("head", |b| Linear::new(b, lstm.output_dim(), ncls));
                Net::StgcnLstm { blocks, lstm, head }
            }
            ModelKind::Hybrid => {
                let (backbone, d) = match config.backbone {
                    Backbone::ToyConvnext => {
                        let cn = b.scope("backbone", |b| ConvNext::new(b, &config.convnext))?;
                        let d = cn.output_dim();
                        (Some(cn), d)
                    }
                    Backbone::PrecomputedFeatures => (None, config.feature_dim),
                };
                let lstm = b.scope("lstm", |b| SequenceLstm::new(b, config.lstm_variant, d, config.lstm_hidden));
                let head = b.scope("head", |b| Linear::new(b, lstm.output_dim(), ncls));
                Net::Hybrid { backbone, lstm, head }
            }
        };
        Ok(Self {
            config,
            params,
            adjacency: graph.adjacency(),
            net,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.shape()[0]
    }

    /// Swaps the graph the model mixes over.
    pub fn set_graph(&mut self, graph: &FacialGraph) {
        self.adjacency = graph.adjacency();
    }

    pub fn input_shape(&self) -> Vec<usize> {
        self.config.input_shape(self.num_nodes())
    }

    /// Logits `[2]` of one sample.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let a_hat = tape.leaf(&self.adjacency);
        self.forward_with(tape, p, a_hat, x)
    }

    /// Logits `[B, 2]` of a batch, sharing one adjacency node.
    pub fn forward_batch(&self, tape: &mut Tape<T>, p: &Bound, xs: &[Var]) -> Result<Var> {
        let a_hat = tape.leaf(&self.adjacency);
        let logits = xs
            .iter()
            .map(|&x| self.forward_with(tape, p, a_hat, x))
            .collect::<Result<Vec<_>>>()?;
        tape.stack(&logits)
    }

    fn forward_with(&self, tape: &mut Tape<T>, p: &Bound, a_hat: Var, x: Var) -> Result<Var> {
        let expect = self.input_shape();
        if tape.shape(x) != expect.as_slice() {
            return Err(Error::shape(
                "model_forward",
                format!(
                    "{} expects input {:?}, got {:?}",
                    self.config.kind,
                    expect,
                    tape.shape(x)
                ),
            ));
        }
        match &self.net {
            Net::Stgcn { blocks, head } => {
                let mut h = x;
                for b in blocks {
                    h = b.forward(tape, p, a_hat, h)?;
                }
                let s = tape.shape(h).to_vec();
                let flat = tape.reshape(h, &[s[0] * s[1], s[2]])?;
                let pooled = tape.mean_axis(flat, 0)?;
                head.forward(tape, p, pooled)
            }
            Net::StgcnLstm { blocks, lstm, head } => {
                let mut h = x;
                for b in blocks {
                    h = b.forward(tape, p, a_hat, h)?;
                }
                let per_frame = tape.mean_axis(h, 1)?;
                let feat = lstm.forward(tape, p, per_frame)?;
                head.forward(tape, p, feat)
            }
            Net::Hybrid { backbone, lstm, head } => {
                let seq = match backbone {
                    Some(cn) => {
                        let feats = (0..self.config.frames)
                            .map(|t| {
                                let frame = tape.select(x, t)?;
                                cn.forward(tape, p, frame)
                            })
                            .collect::<Result<Vec<_>>>()?;
                        tape.stack(&feats)?
                    }
                    None => x,
                };
                let feat = lstm.forward(tape, p, seq)?;
                head.forward(tape, p, feat)
            }
        }
    }

    /// Logits of one sample without recording gradients for later use.
    pub fn logits(&self, input: &Tensor<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let x = tape.leaf(input);
        let out = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(out).to_vec())
    }

    /// Hidden ConvNeXt trace of the hybrid backbone on one image.
    pub fn backbone_trace(&self, image: &Tensor<T>) -> Result<Option<BackboneTrace>> {
        match &self.net {
            Net::Hybrid {
                backbone: Some(cn), ..
            } => {
                let mut tape = Tape::new();
                let p = self.params.bind(&mut tape);
                let x = tape.leaf(image);
                Ok(Some(cn.forward_traced(&mut tape, &p, x)?.1))
            }
            _ => Ok(None),
        }
    }
}
