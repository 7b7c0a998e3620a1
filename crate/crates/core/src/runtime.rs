//! Frame-synchronous streaming inference.
//!
//! Each [`StreamState::push`] takes one 64-sample hop and returns one hop of
//! output delayed by exactly one synthesis window (128 samples). Per hop the
//! engine analyzes one frame, advances every layer by one frame using carried
//! state (depthwise-conv history rings, cumulative-norm running sums), applies
//! the mask and overlap-adds the synthesized segment.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::filterbank::Filterbank;
use crate::model::Model;
use crate::separator::{block_prefix, SeparatorConfig, SPECTRAL_CHANNELS};
use crate::tensor::gemm::dot;
use crate::tensor::ops::{sigmoid, CumulativeStats, CGLN_EPS};

struct Dense {
    weight: Vec<f64>,
    bias: Vec<f64>,
    cols: usize,
}

impl Dense {
    fn load(model: &Model, prefix: &str) -> Result<Self> {
        let w = model.params().get(&format!("{prefix}.weight"))?;
        let b = model.params().get(&format!("{prefix}.bias"))?;
        Ok(Dense {
            cols: w.shape()[1..].iter().product(),
            weight: w.data().to_vec(),
            bias: b.data().to_vec(),
        })
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for ((o, row), b) in out.iter_mut().zip(self.weight.chunks_exact(self.cols)).zip(&self.bias) {
            *o = b + dot(row, x);
        }
    }
}

struct Norm {
    gain: Vec<f64>,
    bias: Vec<f64>,
}

impl Norm {
    fn load(model: &Model, prefix: &str) -> Result<Self> {
        Ok(Norm {
            gain: model.params().get(&format!("{prefix}.gain"))?.data().to_vec(),
            bias: model.params().get(&format!("{prefix}.bias"))?.data().to_vec(),
        })
    }

    fn apply(&self, stats: &mut CumulativeStats, x: &mut [f64]) {
        let (mean, inv_std) = stats.push_frame(x.iter().copied(), CGLN_EPS);
        for ((v, g), b) in x.iter_mut().zip(&self.gain).zip(&self.bias) {
            *v = g * (*v - mean) * inv_std + b;
        }
    }
}

struct Block {
    conv_in: Dense,
    prelu_in: f64,
    norm_in: Norm,
    /// `[hidden × K]`
    depthwise: Vec<f64>,
    depthwise_bias: Vec<f64>,
    dilation: usize,
    prelu_dw: f64,
    norm_dw: Norm,
    residual: Dense,
    skip: Dense,
}

fn prelu(x: &mut [f64], a: f64) {
    for v in x {
        if *v < 0.0 {
            *v *= a;
        }
    }
}

fn scalar(model: &Model, name: &str) -> Result<f64> {
    model.params().get(name)?.item()
}

/// Read-only per-frame view of a model's weights. Shareable across streams.
pub struct FrozenModel {
    model: Model,
    encoder: Dense,
    blocks: Vec<Block>,
    mask_prelu: f64,
    mask: Dense,
}

impl FrozenModel {
    /// Freezes `model` for streaming; classification heads are dropped.
    pub fn new(mut model: Model) -> Result<Arc<Self>> {
        model.strip_heads();
        let config = *model.config();
        let mut blocks = Vec::new();
        for s in 0..config.n_stacks {
            for b in 0..config.blocks_per_stack {
                let p = block_prefix(s, b);
                let dw = Dense::load(&model, &format!("{p}.depthwise"))?;
                blocks.push(Block {
                    conv_in: Dense::load(&model, &format!("{p}.conv_in"))?,
                    prelu_in: scalar(&model, &format!("{p}.prelu_in"))?,
                    norm_in: Norm::load(&model, &format!("{p}.norm_in"))?,
                    depthwise: dw.weight,
                    depthwise_bias: dw.bias,
                    dilation: config.dilation(b),
                    prelu_dw: scalar(&model, &format!("{p}.prelu_dw"))?,
                    norm_dw: Norm::load(&model, &format!("{p}.norm_dw"))?,
                    residual: Dense::load(&model, &format!("{p}.residual"))?,
                    skip: Dense::load(&model, &format!("{p}.skip"))?,
                });
            }
        }
        Ok(Arc::new(FrozenModel {
            encoder: Dense::load(&model, "encoder")?,
            mask_prelu: scalar(&model, "mask.prelu")?,
            mask: Dense::load(&model, "mask")?,
            blocks,
            model,
        }))
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &SeparatorConfig {
        self.model.config()
    }
}

struct BlockState {
    /// Last `(K-1)·dilation` depthwise inputs, `[span × hidden]`, oldest overwritten first.
    ring: Vec<f64>,
    span: usize,
    pos: usize,
    stats_in: CumulativeStats,
    stats_dw: CumulativeStats,
}

/// Scratch vectors reused every frame.
struct Scratch {
    column: Vec<f64>,
    x: Vec<f64>,
    u: Vec<f64>,
    h: Vec<f64>,
    h2: Vec<f64>,
    r: Vec<f64>,
    skip_sum: Vec<f64>,
    sk: Vec<f64>,
    z: Vec<f64>,
    segment: Vec<f64>,
}

pub struct StreamState {
    weights: Arc<FrozenModel>,
    filterbank: Arc<Filterbank>,
    embedding: Vec<f64>,
    blocks: Vec<BlockState>,
    /// Most recent window of input samples.
    window: Vec<f64>,
    /// Overlap-add accumulator spanning three hops; the first is emitted next.
    ola: Vec<f64>,
    hops: u64,
    frames: u64,
    closed: bool,
    scratch: Scratch,
}

/// Opens a stream. The oracle vector is required for ecatse and rejected otherwise.
pub fn open_stream(weights: Arc<FrozenModel>, hint: &[f64], oracle: Option<&[f64]>) -> Result<StreamState> {
    let embedding = weights.model.embedding(hint, oracle)?;
    let filterbank = weights.model.filterbank().clone();
    let cfg = *weights.config();
    let (kernel, stride) = (filterbank.config().kernel, filterbank.config().stride);
    let hid = cfg.hidden_channels;
    let bn = cfg.bottleneck_channels;
    let blocks = weights
        .blocks
        .iter()
        .map(|b| {
            let span = (cfg.depthwise_kernel - 1) * b.dilation;
            BlockState {
                ring: vec![0.0; span * hid],
                span,
                pos: 0,
                stats_in: CumulativeStats::default(),
                stats_dw: CumulativeStats::default(),
            }
        })
        .collect();
    Ok(StreamState {
        embedding,
        blocks,
        window: vec![0.0; kernel],
        ola: vec![0.0; kernel + stride],
        hops: 0,
        frames: 0,
        closed: false,
        scratch: Scratch {
            column: vec![0.0; SPECTRAL_CHANNELS],
            x: vec![0.0; bn],
            u: vec![0.0; bn],
            h: vec![0.0; hid],
            h2: vec![0.0; hid],
            r: vec![0.0; bn],
            skip_sum: vec![0.0; bn],
            sk: vec![0.0; bn],
            z: vec![0.0; SPECTRAL_CHANNELS],
            segment: vec![0.0; kernel],
        },
        filterbank,
        weights,
    })
}

impl StreamState {
    pub fn hop(&self) -> usize {
        self.filterbank.config().stride
    }

    /// Output delay in samples.
    pub fn latency_samples(&self) -> usize {
        self.filterbank.config().kernel
    }

    pub fn frames_processed(&self) -> u64 {
        self.frames
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Number of `f64` values of carried state. Independent of stream length.
    pub fn state_len(&self) -> usize {
        let blocks: usize = self.blocks.iter().map(|b| b.ring.len() + 2 * 3).sum();
        blocks + self.window.len() + self.ola.len() + self.embedding.len()
    }

    /// Consumes one hop of input and returns one hop of output.
    pub fn push(&mut self, samples: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.hop()];
        self.push_into(samples, &mut out)?;
        Ok(out)
    }

    pub fn push_into(&mut self, samples: &[f64], out: &mut [f64]) -> Result<()> {
        if self.closed {
            return Err(Error::usage("stream already flushed"));
        }
        let hop = self.hop();
        if samples.len() != hop || out.len() != hop {
            return Err(Error::usage(format!(
                "push takes exactly {hop} samples, got {}",
                samples.len()
            )));
        }
        let kernel = self.window.len();
        self.window.copy_within(hop.., 0);
        self.window[kernel - hop..].copy_from_slice(samples);
        self.hops += 1;
        // the window is full from the second hop on
        if self.hops * hop as u64 >= kernel as u64 {
            self.process_frame();
            for (o, s) in self.ola[hop..].iter_mut().zip(&self.scratch.segment) {
                *o += s;
            }
        }
        out.copy_from_slice(&self.ola[..hop]);
        self.ola.copy_within(hop.., 0);
        let n = self.ola.len();
        self.ola[n - hop..].fill(0.0);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite output at frame {}", self.frames)));
        }
        Ok(())
    }

    /// Emits the remaining overlap-add tail and closes the stream.
    pub fn flush(&mut self) -> Result<Vec<f64>> {
        if self.closed {
            return Err(Error::usage("stream already flushed"));
        }
        self.closed = true;
        Ok(self.ola[..self.latency_samples()].to_vec())
    }

    fn process_frame(&mut self) {
        let w = &*self.weights;
        let sc = &mut self.scratch;
        self.filterbank.analyze_frame(&self.window, &mut sc.column);
        w.encoder.apply(&sc.column, &mut sc.x);
        sc.skip_sum.fill(0.0);
        for (blk, st) in w.blocks.iter().zip(self.blocks.iter_mut()) {
            for ((u, c), x) in sc.u.iter_mut().zip(&self.embedding).zip(&sc.x) {
                *u = c * x;
            }
            blk.conv_in.apply(&sc.u, &mut sc.h);
            prelu(&mut sc.h, blk.prelu_in);
            blk.norm_in.apply(&mut st.stats_in, &mut sc.h);

            let hid = sc.h.len();
            let k = blk.depthwise.len() / hid;
            for ch in 0..hid {
                let taps = &blk.depthwise[ch * k..(ch + 1) * k];
                let mut acc = blk.depthwise_bias[ch];
                for (j, wj) in taps.iter().enumerate() {
                    let back = (k - 1 - j) * blk.dilation;
                    let v = if back == 0 {
                        sc.h[ch]
                    } else {
                        let slot = (st.pos + st.span - back) % st.span;
                        st.ring[slot * hid + ch]
                    };
                    acc += wj * v;
                }
                sc.h2[ch] = acc;
            }
            if st.span > 0 {
                st.ring[st.pos * hid..(st.pos + 1) * hid].copy_from_slice(&sc.h);
                st.pos = (st.pos + 1) % st.span;
            }
            prelu(&mut sc.h2, blk.prelu_dw);
            blk.norm_dw.apply(&mut st.stats_dw, &mut sc.h2);

            blk.residual.apply(&sc.h2, &mut sc.r);
            blk.skip.apply(&sc.h2, &mut sc.sk);
            for ((x, u), r) in sc.x.iter_mut().zip(&sc.u).zip(&sc.r) {
                *x = u + r;
            }
            for (a, s) in sc.skip_sum.iter_mut().zip(&sc.sk) {
                *a += s;
            }
        }
        prelu(&mut sc.skip_sum, w.mask_prelu);
        w.mask.apply(&sc.skip_sum, &mut sc.z);
        for (c, z) in sc.column.iter_mut().zip(&sc.z) {
            *c *= sigmoid(*z);
        }
        self.filterbank.synthesize_frame(&sc.column, &mut sc.segment);
        self.frames += 1;
    }
}

/// Streams a whole clip hop by hop. The input is zero-padded to a multiple
/// of the hop; the result drops the warm-up and has the input's length.
pub fn stream_clip(state: &mut StreamState, input: &[f64]) -> Result<Vec<f64>> {
    let hop = state.hop();
    let mut padded = input.to_vec();
    padded.resize(input.len().div_ceil(hop) * hop, 0.0);
    let mut out = Vec::with_capacity(padded.len() + state.latency_samples());
    for chunk in padded.chunks(hop) {
        out.extend(state.push(chunk)?);
    }
    out.extend(state.flush()?);
    out.drain(..state.latency_samples());
    out.truncate(input.len());
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub audio_seconds: f64,
    pub wall_seconds: f64,
    /// Audio seconds processed per wall-clock second.
    pub real_time_factor: f64,
    pub hops: usize,
    pub hop_p50_us: f64,
    pub hop_p99_us: f64,
    pub hop_max_us: f64,
    /// FNV-1a over the bit patterns of every output sample.
    pub output_digest: u64,
}

/// Pushes `seconds` of seeded noise through an open stream and times each hop.
pub fn benchmark(state: &mut StreamState, seconds: f64, seed: u64) -> Result<BenchReport> {
    if !(seconds > 0.0 && seconds.is_finite()) {
        return Err(Error::usage(format!("benchmark duration must be positive, got {seconds}")));
    }
    let hop = state.hop();
    let rate = state.filterbank.config().sample_rate as f64;
    let hops = ((seconds * rate) as usize).div_ceil(hop).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut input = vec![0.0; hop];
    let mut out = vec![0.0; hop];
    let mut times = Vec::with_capacity(hops);
    let mut digest: u64 = 0xcbf2_9ce4_8422_2325;
    let start = Instant::now();
    for _ in 0..hops {
        input.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        let t0 = Instant::now();
        state.push_into(&input, &mut out)?;
        times.push(t0.elapsed().as_secs_f64() * 1e6);
        for v in &out {
            for b in v.to_bits().to_le_bytes() {
                digest = (digest ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    let wall = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    times.sort_by(f64::total_cmp);
    let pct = |p: f64| times[((times.len() - 1) as f64 * p).round() as usize];
    let audio = (hops * hop) as f64 / rate;
    Ok(BenchReport {
        audio_seconds: audio,
        wall_seconds: wall,
        real_time_factor: audio / wall,
        hops,
        hop_p50_us: pct(0.5),
        hop_p99_us: pct(0.99),
        hop_max_us: times[times.len() - 1],
        output_digest: digest,
    })
}
