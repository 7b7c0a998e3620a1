//! Class-coded synthetic sources and background noise.
//!
//! Class `k` uses recipe `k % 5` with variant `k / 5`, so neighbouring class
//! indices differ in recipe and classes sharing a recipe differ in pitch,
//! band, sweep or rate.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: f64 = 16_000.0;
/// Number of distinct background variants.
pub const N_BACKGROUNDS: u32 = 8;
/// RMS of every generated background.
pub const BACKGROUND_RMS: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recipe {
    Harmonic,
    Chirp,
    AmNoise,
    BandNoise,
    Clicks,
}

impl Recipe {
    pub fn of_class(class_id: usize) -> (Recipe, usize) {
        let recipe = match class_id % 5 {
            0 => Recipe::Harmonic,
            1 => Recipe::Chirp,
            2 => Recipe::AmNoise,
            3 => Recipe::BandNoise,
            _ => Recipe::Clicks,
        };
        (recipe, class_id / 5)
    }

    pub fn label(self) -> &'static str {
        match self {
            Recipe::Harmonic => "tone",
            Recipe::Chirp => "chirp",
            Recipe::AmNoise => "amnoise",
            Recipe::BandNoise => "band",
            Recipe::Clicks => "clicks",
        }
    }
}

/// Human-readable name of a synthetic class.
pub fn class_label(class_id: usize) -> String {
    let (r, v) = Recipe::of_class(class_id);
    format!("{}-{v}", r.label())
}

fn rng_for(class_id: usize, seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class_id as u64 + 1);
    rng
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn normalize(mut x: Vec<f64>, target: f64) -> Vec<f64> {
    let r = rms(&x);
    if r > 0.0 {
        let k = target / r;
        x.iter_mut().for_each(|v| *v *= k);
    }
    x
}

/// Two-pole band-pass (constant 0 dB peak gain).
struct BandPass {
    b0: f64,
    b2: f64,
    a1: f64,
    a2: f64,
    x1: f64,
    x2: f64,
    y1: f64,
    y2: f64,
}

impl BandPass {
    fn new(center: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * center / SAMPLE_RATE;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        BandPass {
            b0: alpha / a0,
            b2: -alpha / a0,
            a1: -2.0 * w0.cos() / a0,
            a2: (1.0 - alpha) / a0,
            x1: 0.0,
            x2: 0.0,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.b2 * self.x2 - self.a1 * self.y1 - self.a2 * self.y2;
        self.x2 = self.x1;
        self.x1 = x;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn harmonic(n: usize, v: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let f0 = 130.0 * 1.19f64.powi(v as i32) * (1.0 + rng.gen_range(-0.01..0.01));
    let rolloff = 1.0 + 0.3 * (v % 3) as f64;
    let partials: Vec<(f64, f64, f64)> = (1..=6)
        .filter(|&p| p as f64 * f0 < 7_500.0)
        .map(|p| (p as f64 * f0, (p as f64).powf(-rolloff), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let vib_rate = 4.0 + rng.gen_range(0.0..2.0);
    (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE;
            let vib = 1.0 + 0.004 * (2.0 * PI * vib_rate * t).sin();
            partials.iter().map(|&(f, a, ph)| a * (2.0 * PI * f * vib * t + ph).sin()).sum()
        })
        .collect()
}

fn chirp(n: usize, v: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let lo = 300.0 * 1.25f64.powi(v as i32);
    let hi = (lo * 4.0).min(7_000.0);
    let period = 0.3 + 0.07 * v as f64;
    let exponential = v % 2 == 0;
    let mut phase = rng.gen_range(0.0..2.0 * PI);
    let start = rng.gen_range(0.0..period);
    (0..n)
        .map(|i| {
            let frac = ((i as f64 / SAMPLE_RATE + start) / period).fract();
            let f = if exponential {
                lo * (hi / lo).powf(frac)
            } else {
                lo + (hi - lo) * frac
            };
            phase = (phase + 2.0 * PI * f / SAMPLE_RATE) % (2.0 * PI);
            phase.sin()
        })
        .collect()
}

fn am_noise(n: usize, v: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let rate = 2.5 + 1.7 * v as f64;
    let ph = rng.gen_range(0.0..2.0 * PI);
    (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE;
            let env = 0.55 + 0.45 * (2.0 * PI * rate * t + ph).sin();
            let w: f64 = rng.sample(StandardNormal);
            env * w
        })
        .collect()
}

fn band_noise(n: usize, v: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let center = (400.0 * 1.4f64.powi(v as i32)).min(6_500.0);
    let mut f1 = BandPass::new(center, 2.0);
    let mut f2 = BandPass::new(center, 2.0);
    (0..n)
        .map(|_| {
            let w: f64 = rng.sample(StandardNormal);
            f2.step(f1.step(w))
        })
        .collect()
}

fn clicks(n: usize, v: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let rate = 3.0 + 2.5 * v as f64;
    let freq = (1_500.0 + 450.0 * v as f64).min(7_000.0);
    let tau = 0.004 * SAMPLE_RATE;
    let mut out = vec![0.0; n];
    let mut pos = rng.gen_range(0.0..SAMPLE_RATE / rate);
    while (pos as usize) < n {
        let start = pos as usize;
        let amp = rng.gen_range(0.7..1.0);
        let len = ((6.0 * tau) as usize).min(n - start);
        for k in 0..len {
            let t = k as f64;
            out[start + k] += amp * (-t / tau).exp() * (2.0 * PI * freq * t / SAMPLE_RATE).sin();
        }
        pos += SAMPLE_RATE / rate * rng.gen_range(0.9..1.1);
    }
    out
}

/// `n` samples of class `class_id`, RMS-normalized to 1. Deterministic per
/// `(class_id, seed)`.
pub fn synth_samples(class_id: usize, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(class_id, seed);
    let (recipe, v) = Recipe::of_class(class_id);
    let raw = match recipe {
        Recipe::Harmonic => harmonic(n, v, &mut rng),
        Recipe::Chirp => chirp(n, v, &mut rng),
        Recipe::AmNoise => am_noise(n, v, &mut rng),
        Recipe::BandNoise => band_noise(n, v, &mut rng),
        Recipe::Clicks => clicks(n, v, &mut rng),
    };
    normalize(raw, 1.0)
}

/// `duration_s` seconds of class `class_id` out of `n_classes`.
pub fn synth_source(class_id: usize, n_classes: usize, duration_s: f64, seed: u64) -> Result<Vec<f64>> {
    if class_id >= n_classes {
        return Err(Error::usage(format!("class {class_id} out of range for {n_classes} classes")));
    }
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::usage(format!("source duration must be positive, got {duration_s}")));
    }
    Ok(synth_samples(class_id, (duration_s * SAMPLE_RATE).round() as usize, seed))
}

/// Pink-ish noise: white noise through a pinking filter, then a one-pole
/// low-pass whose cutoff depends on `bg_id`, with slow level wander.
pub fn synth_background(bg_id: u32, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let cutoff = 500.0 * 1.5f64.powi(bg_id as i32);
    let a = (-2.0 * PI * cutoff / SAMPLE_RATE).exp();
    let wander = 0.1 + 0.05 * bg_id as f64;
    let wph = rng.gen_range(0.0..2.0 * PI);
    let mut p = [0.0f64; 3];
    let mut lp = 0.0;
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            let w: f64 = rng.sample(StandardNormal);
            p[0] = 0.99765 * p[0] + w * 0.0990460;
            p[1] = 0.96300 * p[1] + w * 0.2965164;
            p[2] = 0.57000 * p[2] + w * 1.0526913;
            let pink = p[0] + p[1] + p[2] + w * 0.1848;
            lp = a * lp + (1.0 - a) * pink;
            let t = i as f64 / SAMPLE_RATE;
            lp * (1.0 + 0.3 * (2.0 * PI * wander * t + wph).sin())
        })
        .collect();
    normalize(raw, BACKGROUND_RMS)
}
