//! STFT analysis/synthesis front end.
//!
//! Frames are `kernel` samples long, advance by `stride`, are weighted by a
//! square-root Hann window and zero-padded to an `n_filters`-point DFT. The
//! one-sided spectrum is stacked as `[re_0 .. re_{B-1}, im_0 .. im_{B-1}]`
//! along the channel axis. Synthesis applies the same window to the first
//! `kernel` samples of each inverse DFT and overlap-adds them, so an output
//! sample never depends on input more than `kernel` samples ahead of it.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::gemm::{dot, gemm_acc, Layout};
use crate::tensor::Tensor;

/// Stacked real/imaginary STFT channels over frames, `[2·B × N]`.
pub type SpectralFrameBlock = Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterbankConfig {
    /// DFT size.
    pub n_filters: usize,
    /// Window length in samples.
    pub kernel: usize,
    /// Hop in samples.
    pub stride: usize,
    pub sample_rate: u32,
}

impl Default for FilterbankConfig {
    fn default() -> Self {
        FilterbankConfig {
            n_filters: 256,
            kernel: 128,
            stride: 64,
            sample_rate: 16_000,
        }
    }
}

impl FilterbankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > self.kernel || self.kernel > self.n_filters {
            return Err(Error::usage(format!(
                "filterbank needs 0 < stride <= kernel <= n_filters, got {}/{}/{}",
                self.stride, self.kernel, self.n_filters
            )));
        }
        if self.n_filters % 2 != 0 || self.sample_rate == 0 {
            return Err(Error::usage("filterbank needs an even DFT size and a nonzero rate"));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.n_filters / 2 + 1
    }

    pub fn channels(&self) -> usize {
        2 * self.bins()
    }

    /// Delay inherent to the synthesis window, in milliseconds.
    pub fn algorithmic_latency_ms(&self) -> f64 {
        algorithmic_latency(self)
    }
}

pub fn algorithmic_latency(config: &FilterbankConfig) -> f64 {
    config.kernel as f64 / config.sample_rate as f64 * 1000.0
}

/// Precomputed analysis and synthesis bases.
#[derive(Clone, Debug)]
pub struct Filterbank {
    config: FilterbankConfig,
    window: Vec<f64>,
    /// `[channels × kernel]`, window folded in.
    analysis: Vec<f64>,
    /// `[kernel × channels]`, window and inverse-DFT scaling folded in.
    synthesis: Vec<f64>,
}

impl Default for Filterbank {
    fn default() -> Self {
        Filterbank::new(FilterbankConfig::default()).expect("default geometry is valid")
    }
}

impl Filterbank {
    pub fn new(config: FilterbankConfig) -> Result<Self> {
        config.validate()?;
        let (nfft, kernel, bins) = (config.n_filters, config.kernel, config.bins());
        let channels = config.channels();
        let window: Vec<f64> = (0..kernel)
            .map(|n| (0.5 * (1.0 - (2.0 * PI * n as f64 / kernel as f64).cos())).sqrt())
            .collect();
        let mut analysis = vec![0.0; channels * kernel];
        let mut synthesis = vec![0.0; kernel * channels];
        for k in 0..bins {
            // one-sided spectrum: interior bins stand for their conjugate twin too
            let weight = if k == 0 || k == bins - 1 { 1.0 } else { 2.0 };
            for n in 0..kernel {
                // reduce the phase index exactly before converting to radians
                let phase = 2.0 * PI * ((k * n) % nfft) as f64 / nfft as f64;
                let (s, c) = phase.sin_cos();
                analysis[k * kernel + n] = window[n] * c;
                analysis[(bins + k) * kernel + n] = -window[n] * s;
                synthesis[n * channels + k] = window[n] * weight * c / nfft as f64;
                synthesis[n * channels + bins + k] = -window[n] * weight * s / nfft as f64;
            }
        }
        Ok(Filterbank {
            config,
            window,
            analysis,
            synthesis,
        })
    }

    pub fn config(&self) -> &FilterbankConfig {
        &self.config
    }

    pub fn channels(&self) -> usize {
        self.config.channels()
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Number of complete frames in `len` samples (zero when shorter than a window).
    pub fn frames_for(&self, len: usize) -> usize {
        if len < self.config.kernel {
            0
        } else {
            1 + (len - self.config.kernel) / self.config.stride
        }
    }

    /// Waveform length produced by synthesizing `frames` frames.
    pub fn output_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.config.stride + self.config.kernel
        }
    }

    pub fn analyze(&self, samples: &[f64]) -> Result<SpectralFrameBlock> {
        let kernel = self.config.kernel;
        if samples.len() < kernel {
            return Err(Error::dim(format!(
                "analysis needs at least {kernel} samples, got {}",
                samples.len()
            )));
        }
        let frames = self.frames_for(samples.len());
        let channels = self.channels();
        let mut out = vec![0.0; channels * frames];
        // frame matrix [kernel × N] is a strided view of the waveform itself
        gemm_acc(
            channels,
            kernel,
            frames,
            &self.analysis,
            Layout::row_major(0, kernel),
            samples,
            Layout::new(0, 1, self.config.stride),
            &mut out,
            Layout::row_major(0, frames),
        );
        Tensor::new(vec![channels, frames], out)
    }

    pub fn synthesize(&self, block: &SpectralFrameBlock) -> Result<Tensor> {
        let (channels, frames) = block.dims2()?;
        if channels != self.channels() {
            return Err(Error::dim(format!(
                "synthesis expects {} channels, got {channels}",
                self.channels()
            )));
        }
        let kernel = self.config.kernel;
        let mut segments = vec![0.0; kernel * frames];
        gemm_acc(
            kernel,
            channels,
            frames,
            &self.synthesis,
            Layout::row_major(0, channels),
            block.data(),
            Layout::row_major(0, frames),
            &mut segments,
            Layout::row_major(0, frames),
        );
        let mut out = vec![0.0; self.output_len(frames)];
        for t in 0..frames {
            let base = t * self.config.stride;
            for n in 0..kernel {
                out[base + n] += segments[n * frames + t];
            }
        }
        Ok(Tensor::from_vec(out))
    }

    /// Transpose of [`Filterbank::synthesize`]: maps a waveform gradient back
    /// onto the `[channels × frames]` block.
    pub fn synthesize_adjoint(&self, grad: &[f64], frames: usize) -> Vec<f64> {
        let channels = self.channels();
        let kernel = self.config.kernel;
        let mut out = vec![0.0; channels * frames];
        gemm_acc(
            channels,
            kernel,
            frames,
            &self.synthesis,
            Layout::new(0, 1, channels),
            grad,
            Layout::new(0, 1, self.config.stride),
            &mut out,
            Layout::row_major(0, frames),
        );
        out
    }

    /// Spectrum of one `kernel`-sample segment, as a `channels`-long column.
    pub fn analyze_frame(&self, segment: &[f64], out: &mut [f64]) {
        let kernel = self.config.kernel;
        debug_assert_eq!(segment.len(), kernel);
        for (c, o) in out.iter_mut().enumerate() {
            *o = dot(&self.analysis[c * kernel..(c + 1) * kernel], segment);
        }
    }

    /// Windowed time segment of one spectral column.
    pub fn synthesize_frame(&self, column: &[f64], out: &mut [f64]) {
        let channels = self.channels();
        debug_assert_eq!(column.len(), channels);
        for (n, o) in out.iter_mut().enumerate() {
            *o = dot(&self.synthesis[n * channels..(n + 1) * channels], column);
        }
    }
}
