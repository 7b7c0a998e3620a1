//! Pervasively conditioned causal TCN mask estimator and the training-only
//! classification heads.
//!
//! Layout of one block (all convolutions causal, all channel-time maps `[C × T]`):
//!
//! ```text
//! u = x ⊙ c                                   conditioning site
//! h = cgLN(PReLU(conv1x1(u)))                 bottleneck → hidden
//! h = cgLN(PReLU(depthwise_conv(h, 2^i)))
//! x' = u + conv1x1_res(h)                     next block input
//! skip += conv1x1_skip(h)
//! ```
//!
//! `mask = sigmoid(conv1x1(PReLU(Σ skip)))`.

use std::fmt;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::condition::{COMPOSITE_PREFIX, EMBED_DIM, HINT_PREFIX, ORACLE_PREFIX};
use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor::ops::{self, BinaryOp, LEAKY_SLOPE, PRELU_INIT};
use crate::tensor::{Backend, Tensor};

/// Every parameter of the classification heads lives under this prefix.
pub const HEAD_PREFIX: &str = "head.";
pub const SPECTRAL_CHANNELS: usize = 258;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Pctcn,
    Ecatse,
    Icatse,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Pctcn => "pctcn",
            Variant::Ecatse => "ecatse",
            Variant::Icatse => "icatse",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pctcn" => Ok(Variant::Pctcn),
            "ecatse" => Ok(Variant::Ecatse),
            "icatse" => Ok(Variant::Icatse),
            other => Err(Error::usage(format!("unknown model variant `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub channels: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub pool: usize,
    pub fc_hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            channels: 64,
            blocks: 4,
            kernel: 3,
            pool: 4,
            fc_hidden: 256,
        }
    }
}

impl HeadConfig {
    /// Fewest frames the pooling cascade accepts.
    pub fn min_frames(&self) -> usize {
        self.pool.pow(self.blocks as u32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeparatorConfig {
    pub variant: Variant,
    pub n_classes: usize,
    pub n_stacks: usize,
    pub blocks_per_stack: usize,
    pub bottleneck_channels: usize,
    pub hidden_channels: usize,
    pub depthwise_kernel: usize,
    pub heads: HeadConfig,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        SeparatorConfig {
            variant: Variant::Pctcn,
            n_classes: crate::condition::DEFAULT_CLASS_COUNT,
            n_stacks: 3,
            blocks_per_stack: 6,
            bottleneck_channels: EMBED_DIM,
            hidden_channels: 256,
            depthwise_kernel: 3,
            heads: HeadConfig::default(),
        }
    }
}

impl SeparatorConfig {
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.bottleneck_channels != EMBED_DIM {
            return Err(Error::usage(format!(
                "bottleneck width must equal the {EMBED_DIM}-dim embedding, got {}",
                self.bottleneck_channels
            )));
        }
        if self.n_stacks == 0 || self.blocks_per_stack == 0 || self.hidden_channels == 0 {
            return Err(Error::usage("separator needs at least one stack, block and hidden channel"));
        }
        if self.depthwise_kernel == 0 || self.n_classes == 0 {
            return Err(Error::usage("depthwise kernel and class count must be positive"));
        }
        let h = &self.heads;
        if self.variant == Variant::Icatse && (h.channels == 0 || h.blocks == 0 || h.kernel == 0 || h.pool == 0 || h.fc_hidden == 0) {
            return Err(Error::usage("icatse heads need positive dimensions"));
        }
        Ok(())
    }

    /// Dilation of block `i` within a stack.
    pub fn dilation(&self, block: usize) -> usize {
        1 << block
    }

    /// Frames of past context seen by one output frame (including itself).
    pub fn receptive_field(&self) -> usize {
        let per_stack: usize = (0..self.blocks_per_stack)
            .map(|i| (self.depthwise_kernel - 1) * self.dilation(i))
            .sum();
        1 + self.n_stacks * per_stack
    }
}

pub fn count_conditioning_sites(config: &SeparatorConfig) -> usize {
    config.n_stacks * config.blocks_per_stack
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `[-bound, bound]`, with `bound = 1/sqrt(fan_in)`.
    FanIn(usize),
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn affine(out: &mut Vec<ParamSpec>, prefix: &str, weight_shape: Vec<usize>) {
    let fan_in = weight_shape[1..].iter().product();
    let bias_len = weight_shape[0];
    out.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: weight_shape,
        init: Init::FanIn(fan_in),
    });
    out.push(ParamSpec {
        name: format!("{prefix}.bias"),
        shape: vec![bias_len],
        init: Init::FanIn(fan_in),
    });
}

fn constant(out: &mut Vec<ParamSpec>, name: String, len: usize, value: f64) {
    out.push(ParamSpec {
        name,
        shape: vec![len],
        init: Init::Constant(value),
    });
}

pub fn block_prefix(stack: usize, block: usize) -> String {
    format!("tcn.{stack}.{block}")
}

/// Every parameter of a model, in a fixed order. The name set is determined
/// by the configuration (including its variant) alone.
pub fn parameter_layout(config: &SeparatorConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let (bn, hid, n) = (config.bottleneck_channels, config.hidden_channels, config.n_classes);
    affine(&mut out, HINT_PREFIX, vec![EMBED_DIM, n]);
    if config.variant == Variant::Ecatse {
        affine(&mut out, ORACLE_PREFIX, vec![EMBED_DIM, n]);
        affine(&mut out, COMPOSITE_PREFIX, vec![EMBED_DIM, 2 * EMBED_DIM]);
    }
    affine(&mut out, "encoder", vec![bn, SPECTRAL_CHANNELS, 1]);
    for s in 0..config.n_stacks {
        for b in 0..config.blocks_per_stack {
            let p = block_prefix(s, b);
            affine(&mut out, &format!("{p}.conv_in"), vec![hid, bn, 1]);
            constant(&mut out, format!("{p}.prelu_in"), 1, PRELU_INIT);
            constant(&mut out, format!("{p}.norm_in.gain"), hid, 1.0);
            constant(&mut out, format!("{p}.norm_in.bias"), hid, 0.0);
            affine(&mut out, &format!("{p}.depthwise"), vec![hid, 1, config.depthwise_kernel]);
            constant(&mut out, format!("{p}.prelu_dw"), 1, PRELU_INIT);
            constant(&mut out, format!("{p}.norm_dw.gain"), hid, 1.0);
            constant(&mut out, format!("{p}.norm_dw.bias"), hid, 0.0);
            affine(&mut out, &format!("{p}.residual"), vec![bn, hid, 1]);
            affine(&mut out, &format!("{p}.skip"), vec![bn, hid, 1]);
        }
    }
    constant(&mut out, "mask.prelu".into(), 1, PRELU_INIT);
    affine(&mut out, "mask", vec![SPECTRAL_CHANNELS, bn, 1]);
    if config.variant == Variant::Icatse {
        let h = &config.heads;
        for s in 0..config.n_stacks {
            for i in 0..h.blocks {
                let c_in = if i == 0 { bn } else { h.channels };
                affine(&mut out, &format!("{HEAD_PREFIX}{s}.conv{i}"), vec![h.channels, c_in, h.kernel]);
            }
        }
        affine(&mut out, &format!("{HEAD_PREFIX}fc1"), vec![h.fc_hidden, config.n_stacks * h.channels]);
        affine(&mut out, &format!("{HEAD_PREFIX}fc2"), vec![n, h.fc_hidden]);
    }
    out
}

/// Parameter count; `with_heads = false` counts what survives at inference.
pub fn count_parameters(config: &SeparatorConfig, with_heads: bool) -> usize {
    parameter_layout(config)
        .iter()
        .filter(|p| with_heads || !p.name.starts_with(HEAD_PREFIX))
        .map(|p| p.shape.iter().product::<usize>())
        .sum()
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seeded initialization. Each parameter draws from its own stream keyed by
/// name, so shared parameters start identical across variants.
pub fn init_params(config: &SeparatorConfig, seed: u64) -> Result<Params> {
    config.validate()?;
    let mut params = Params::new();
    for spec in parameter_layout(config) {
        let n: usize = spec.shape.iter().product();
        let data = match spec.init {
            Init::Constant(v) => vec![v; n],
            Init::FanIn(fan_in) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(fnv1a(&spec.name));
                let bound = 1.0 / (fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        params.insert(spec.name, Tensor::new(spec.shape, data)?);
    }
    Ok(params)
}

/// Checks that `params` holds exactly the names and shapes `config` implies.
/// With `allow_missing_heads`, absent head parameters are tolerated.
pub fn check_params(config: &SeparatorConfig, params: &Params, allow_missing_heads: bool) -> Result<()> {
    let layout = parameter_layout(config);
    for spec in &layout {
        match params.get(&spec.name) {
            Ok(t) if t.shape() == spec.shape.as_slice() => {}
            Ok(t) => {
                return Err(Error::data(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )))
            }
            Err(_) if allow_missing_heads && spec.name.starts_with(HEAD_PREFIX) => {}
            Err(_) => return Err(Error::data(format!("missing parameter `{}`", spec.name))),
        }
    }
    for name in params.names() {
        if !layout.iter().any(|s| s.name == name) {
            return Err(Error::data(format!("unexpected parameter `{name}`")));
        }
    }
    Ok(())
}

pub struct SeparatorOutput<V> {
    pub mask: V,
    /// Bottleneck activations leaving each stack (after its last residual addition).
    pub stack_outputs: Vec<V>,
}

fn conv<B: Backend>(b: &mut B, x: &B::Value, prefix: &str, dilation: usize, groups: usize) -> Result<B::Value> {
    let w = b.param(&format!("{prefix}.weight"))?;
    let bias = b.param(&format!("{prefix}.bias"))?;
    b.conv1d(x, &w, &bias, dilation, groups)
}

fn norm<B: Backend>(b: &mut B, x: &B::Value, prefix: &str) -> Result<B::Value> {
    let g = b.param(&format!("{prefix}.gain"))?;
    let bias = b.param(&format!("{prefix}.bias"))?;
    b.cgln(x, &g, &bias)
}

/// Mask estimation for a `[258 × N]` spectral block under a 128-dim embedding.
pub fn forward<B: Backend>(b: &mut B, config: &SeparatorConfig, spec: &B::Value, cond: &B::Value) -> Result<SeparatorOutput<B::Value>> {
    let shape = b.tensor(spec).shape().to_vec();
    if shape.len() != 2 || shape[0] != SPECTRAL_CHANNELS {
        return Err(Error::dim(format!("separator input must be [{SPECTRAL_CHANNELS} × N], got {shape:?}")));
    }
    if b.tensor(cond).shape() != [config.bottleneck_channels] {
        return Err(Error::dim(format!(
            "conditioning embedding must have {} entries, got {:?}",
            config.bottleneck_channels,
            b.tensor(cond).shape()
        )));
    }
    let hid = config.hidden_channels;
    let mut x = conv(b, spec, "encoder", 1, 1)?;
    let mut skip_sum: Option<B::Value> = None;
    let mut stack_outputs = Vec::with_capacity(config.n_stacks);
    for s in 0..config.n_stacks {
        for blk in 0..config.blocks_per_stack {
            let p = block_prefix(s, blk);
            let u = b.mul(cond, &x)?;
            let h = conv(b, &u, &format!("{p}.conv_in"), 1, 1)?;
            let slope = b.param(&format!("{p}.prelu_in"))?;
            let h = b.prelu(&h, &slope)?;
            let h = norm(b, &h, &format!("{p}.norm_in"))?;
            let h = conv(b, &h, &format!("{p}.depthwise"), config.dilation(blk), hid)?;
            let slope = b.param(&format!("{p}.prelu_dw"))?;
            let h = b.prelu(&h, &slope)?;
            let h = norm(b, &h, &format!("{p}.norm_dw"))?;
            let r = conv(b, &h, &format!("{p}.residual"), 1, 1)?;
            let sk = conv(b, &h, &format!("{p}.skip"), 1, 1)?;
            x = b.add(&u, &r)?;
            skip_sum = Some(match skip_sum {
                None => sk,
                Some(acc) => b.add(&acc, &sk)?,
            });
        }
        stack_outputs.push(x.clone());
    }
    let skip_sum = skip_sum.expect("at least one block");
    let slope = b.param("mask.prelu")?;
    let z = b.prelu(&skip_sum, &slope)?;
    let z = conv(b, &z, "mask", 1, 1)?;
    let mask = b.sigmoid(&z);
    Ok(SeparatorOutput { mask, stack_outputs })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

/// Classification heads over the stack outputs; returns per-class presence
/// probabilities. Heads exist only while training the icatse variant.
pub fn heads_forward<B: Backend>(b: &mut B, config: &SeparatorConfig, stack_outputs: &[B::Value], mode: Mode) -> Result<B::Value> {
    if mode == Mode::Inference {
        return Err(Error::usage("classification heads are training-only"));
    }
    if config.variant != Variant::Icatse {
        return Err(Error::usage(format!("{} has no classification heads", config.variant)));
    }
    if stack_outputs.len() != config.n_stacks {
        return Err(Error::dim(format!(
            "expected {} stack outputs, got {}",
            config.n_stacks,
            stack_outputs.len()
        )));
    }
    let h = &config.heads;
    let mut pooled = Vec::with_capacity(config.n_stacks);
    for (s, z) in stack_outputs.iter().enumerate() {
        let mut z = z.clone();
        for i in 0..h.blocks {
            z = conv(b, &z, &format!("{HEAD_PREFIX}{s}.conv{i}"), 1, 1)?;
            z = b.leaky_relu(&z, LEAKY_SLOPE);
            z = b.maxpool(&z, h.pool)?;
        }
        pooled.push(b.mean_time(&z)?);
    }
    let joined = b.concat(&pooled, 0)?;
    let w1 = b.param(&format!("{HEAD_PREFIX}fc1.weight"))?;
    let b1 = b.param(&format!("{HEAD_PREFIX}fc1.bias"))?;
    let z = b.linear(&joined, &w1, &b1)?;
    let z = b.leaky_relu(&z, LEAKY_SLOPE);
    let w2 = b.param(&format!("{HEAD_PREFIX}fc2.weight"))?;
    let b2 = b.param(&format!("{HEAD_PREFIX}fc2.bias"))?;
    let z = b.linear(&z, &w2, &b2)?;
    Ok(b.sigmoid(&z))
}

/// Elementwise product of a spectral block and a mask of identical shape.
pub fn apply_mask(spec: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if spec.shape() != mask.shape() {
        return Err(Error::dim(format!(
            "mask shape {:?} differs from spectrum {:?}",
            mask.shape(),
            spec.shape()
        )));
    }
    ops::elementwise(spec, mask, BinaryOp::Mul)
}
