//! Acceptance suite. Every criterion runs as its own test, prints one
//! `[PASS]`/`[FAIL]` line on stderr and fails the test when it does not hold.
//! Criteria run one at a time so their wall-clock budgets are meaningful.

mod common;

use std::collections::BTreeSet;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Mutex;
use std::time::Instant;

use catse::condition::multi_hot;
use catse::filterbank::{algorithmic_latency, Filterbank, FilterbankConfig};
use catse::model::{Extractor, Model};
use catse::objectives::{loss_classification, loss_combined, loss_combined_node, si_sdr, LossWeights};
use catse::runtime::{open_stream, stream_clip, FrozenModel};
use catse::scenegen::{draw_targets, synthetic_vocabulary, Dataset, SceneSpec, SourcePool, TargetMode};
use catse::separator::{count_conditioning_sites, count_parameters, SeparatorConfig, Variant, HEAD_PREFIX};
use catse::tensor::Graph;
use catse::tensor::Tensor;
use catse::trainer::{mean_si_snri, score_scenes, train, OracleSource, TrainConfig};
use catse::weights::{decode_weights, encode_weights, load_weights, save_weights, LoadPurpose, ModelWeights};
use common::{model_error, op_error, operator_cases, random_signal, FD_TOLERANCE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

type Outcome = Result<String, String>;

/// Writes straight to the process stderr so the line survives output capture.
fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn criterion(n: u32, title: &str, budget_s: Option<f64>, body: impl FnOnce() -> Outcome) {
    let _serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    let outcome = match (outcome, budget_s) {
        (Ok(detail), Some(b)) if secs > b => Err(format!("{detail}; took {secs:.1}s, budget {b:.0}s")),
        (o, _) => o,
    };
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    report(&format!("[{tag}] criterion {n}: {title}: {detail} ({secs:.1}s)"));
    if let Err(d) = outcome {
        panic!("criterion {n} failed: {d}");
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_hint(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let k = rng.gen_range(1..=3.min(n));
    let picked: BTreeSet<usize> = std::iter::repeat_with(|| rng.gen_range(0..n)).take(k).collect();
    multi_hot(n, &picked.into_iter().collect::<Vec<_>>())
}

fn oracle_for(variant: Variant, n: usize, rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
    (variant == Variant::Ecatse).then(|| random_hint(n, rng))
}

const VARIANTS: [Variant; 3] = [Variant::Pctcn, Variant::Ecatse, Variant::Icatse];

const C1_TRIALS: usize = 100;
const C1_GUARD: usize = 128;

#[test]
fn c01_causality() {
    criterion(1, "causality", Some(120.0), || {
        let mut rng = ChaCha8Rng::seed_from_u64(0xc1);
        let mut changed_after = 0;
        for trial in 0..C1_TRIALS {
            let variant = VARIANTS[trial % 3];
            let config = SeparatorConfig::default().with_variant(variant);
            let model = Model::init(config, 1000 + trial as u64).map_err(|e| e.to_string())?;
            let len = rng.gen_range(3_200..=16_000);
            let x = random_signal(len, &mut rng);
            let t = rng.gen_range(0..len - C1_GUARD);
            let hint = random_hint(config.n_classes, &mut rng);
            let oracle = oracle_for(variant, config.n_classes, &mut rng);
            let mut perturbed = x.clone();
            for v in &mut perturbed[t + C1_GUARD..] {
                *v = rng.gen_range(-10.0..10.0);
            }
            let a = model.extract(&x, &hint, oracle.as_deref()).map_err(|e| e.to_string())?;
            let b = model.extract(&perturbed, &hint, oracle.as_deref()).map_err(|e| e.to_string())?;
            if let Some(i) = (0..t).find(|&i| a[i].to_bits() != b[i].to_bits()) {
                return Err(format!("trial {trial} ({variant}): output {i} < t={t} changed"));
            }
            if a[t + C1_GUARD..] != b[t + C1_GUARD..] {
                changed_after += 1;
            }
        }
        ensure(changed_after == C1_TRIALS, || format!("perturbation was invisible in {} trials", C1_TRIALS - changed_after))?;
        Ok(format!("{C1_TRIALS} trials, outputs before t bit-identical"))
    });
}

const C2_CLIPS: usize = 20;
const C2_TOLERANCE: f64 = 1e-6;

#[test]
fn c02_streaming_matches_offline() {
    criterion(2, "streaming equals offline", Some(300.0), || {
        let spec = SceneSpec::default();
        let vocab = synthetic_vocabulary(catse::condition::DEFAULT_CLASS_COUNT).map_err(|e| e.to_string())?;
        let data = Dataset::generate(0xc2, C2_CLIPS, vocab, spec, SourcePool::Synthetic).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0xc2);
        let mut worst: f64 = 0.0;
        for (v, variant) in VARIANTS.into_iter().enumerate() {
            let model = Model::init(SeparatorConfig::default().with_variant(variant), 200 + v as u64).map_err(|e| e.to_string())?;
            let frozen = FrozenModel::new(model.clone()).map_err(|e| e.to_string())?;
            for i in 0..C2_CLIPS {
                let scene = data.scene(i).map_err(|e| e.to_string())?;
                let draw = draw_targets(&scene, TargetMode::Multi, &mut rng).map_err(|e| e.to_string())?;
                let oracle = (variant == Variant::Ecatse).then(|| scene.present.clone());
                let offline = model.extract(&scene.mixture, &draw.hint, oracle.as_deref()).map_err(|e| e.to_string())?;
                let mut state = open_stream(frozen.clone(), &draw.hint, oracle.as_deref()).map_err(|e| e.to_string())?;
                let streamed = stream_clip(&mut state, &scene.mixture).map_err(|e| e.to_string())?;
                ensure(streamed.len() == offline.len(), || format!("length {} vs {}", streamed.len(), offline.len()))?;
                let diff = streamed.iter().zip(&offline).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                worst = worst.max(diff);
                ensure(diff < C2_TOLERANCE, || format!("{variant} clip {i}: max abs difference {diff:e}"))?;
            }
        }
        Ok(format!("{} clips x 3 variants, max abs difference {worst:.2e} < {C2_TOLERANCE:e}", C2_CLIPS))
    });
}

#[test]
fn c03_gradients() {
    criterion(3, "finite-difference gradients", Some(300.0), || {
        let mut worst: (f64, String) = (0.0, String::new());
        let cases = operator_cases();
        let n_ops = cases.len();
        for (name, inputs, op) in cases {
            let err = op_error(&inputs, op.as_ref());
            if err > worst.0 {
                worst = (err, name.to_string());
            }
        }
        for (variant, lambda, label) in [
            (Variant::Pctcn, 0.5, "end-to-end L_s (pctcn)"),
            (Variant::Ecatse, 0.5, "end-to-end L_s (ecatse)"),
            (Variant::Icatse, 0.5, "end-to-end L_sc (icatse, 0.5)"),
            (Variant::Icatse, 2.0, "end-to-end L_sc (icatse, 2.0)"),
        ] {
            let (err, peak) = model_error(variant, lambda);
            ensure(peak > 1e-6, || format!("{label}: all sampled gradients vanish"))?;
            if err > worst.0 {
                worst = (err, label.to_string());
            }
        }
        ensure(worst.0 < FD_TOLERANCE, || format!("{}: relative error {:e}", worst.1, worst.0))?;
        Ok(format!("{n_ops} operators + 4 end-to-end losses, worst {:.1e} ({}) < {FD_TOLERANCE:e}", worst.0, worst.1))
    });
}

const C4_TOLERANCE: f64 = 1e-6;

#[test]
fn c04_filterbank() {
    criterion(4, "filterbank round trip and latency", None, || {
        let fb = Filterbank::default();
        let kernel = fb.config().kernel;
        let mut rng = ChaCha8Rng::seed_from_u64(0xc4);
        let mut worst: f64 = 0.0;
        for len in [1_000, 16_000, 16_037] {
            let x = random_signal(len, &mut rng);
            let y = fb.synthesize(&fb.analyze(&x).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?.into_data();
            let interior = kernel..y.len() - kernel;
            let err: f64 = interior.clone().map(|i| (y[i] - x[i]).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = interior.map(|i| x[i] * x[i]).sum::<f64>().sqrt();
            worst = worst.max(err / norm);
        }
        ensure(worst < C4_TOLERANCE, || format!("interior relative error {worst:e}"))?;
        let latency = algorithmic_latency(&FilterbankConfig::default());
        ensure(latency == 8.0, || format!("latency {latency} ms"))?;
        Ok(format!("interior relative error {worst:.1e} < {C4_TOLERANCE:e}, latency {latency} ms"))
    });
}

#[test]
fn c05_architecture_counts() {
    criterion(5, "architecture counts", None, || {
        let base = SeparatorConfig::default();
        let sites = count_conditioning_sites(&base);
        ensure(sites == 18, || format!("{sites} conditioning sites"))?;
        // independent count: distinct conditioned blocks in an initialized model
        let model = Model::init(base.with_variant(Variant::Icatse), 5).map_err(|e| e.to_string())?;
        let blocks: BTreeSet<String> = model
            .params()
            .names()
            .filter(|n| n.starts_with("tcn."))
            .map(|n| n.split('.').take(3).collect::<Vec<_>>().join("."))
            .collect();
        ensure(blocks.len() == sites, || format!("{} blocks carry parameters", blocks.len()))?;

        let icatse = count_parameters(&base.with_variant(Variant::Icatse), false);
        let pctcn = count_parameters(&base.with_variant(Variant::Pctcn), false);
        ensure(icatse == pctcn, || format!("icatse {icatse} vs pctcn {pctcn}"))?;
        let mut stripped = model;
        let removed = stripped.strip_heads();
        ensure(removed > 0, || "icatse model has no heads".into())?;
        let pctcn_model = Model::init(base, 5).map_err(|e| e.to_string())?;
        let (a, b) = (stripped.params().numel(), pctcn_model.params().numel());
        ensure(a == b, || format!("stripped icatse holds {a} parameters, pctcn {b}"))?;
        ensure(!stripped.params().names().any(|n| n.starts_with(HEAD_PREFIX)), || "heads survived".into())?;
        Ok(format!("{sites} conditioning sites, {pctcn} parameters in both pctcn and stripped icatse"))
    });
}

#[test]
fn c06_loss_values() {
    criterion(6, "loss unit values", None, || {
        let bce = loss_classification(&[0.5], &[1.0]).map_err(|e| e.to_string())?;
        ensure((bce - 0.6931).abs() <= 1e-4, || format!("BCE {bce}"))?;
        let sdr = si_sdr(&[1.0, 1.0, -1.0, -1.0], &[1.0, 0.0, -1.0, 0.0]).map_err(|e| e.to_string())?;
        ensure(sdr.abs() <= 1e-6, || format!("SI-SDR {sdr}"))?;
        for (ls, lc, lambda) in [(-3.25, 0.75, 0.5), (-12.0, 0.6931, 0.0), (4.5, 1.25, 2.0)] {
            let w = LossWeights::new(lambda).map_err(|e| e.to_string())?;
            let expected = ls + lambda * lc;
            let plain = loss_combined(ls, lc, w);
            let mut g = Graph::new();
            let (a, b) = (g.leaf(Tensor::scalar(ls), false), g.leaf(Tensor::scalar(lc), false));
            let node = loss_combined_node(&mut g, a, b, w).map_err(|e| e.to_string())?;
            let graph = g.value(node).item().map_err(|e| e.to_string())?;
            ensure(plain == expected && graph == expected, || format!("L_sc({ls}, {lc}, {lambda}) = {plain} / {graph}, expected {expected}"))?;
        }
        Ok(format!("BCE {bce:.6}, SI-SDR {sdr:.2e} dB, L_sc exact"))
    });
}

const C7_THRESHOLD_DB: f64 = 5.0;
const C7_EPOCHS: usize = 20;

#[test]
fn c07_overfit() {
    criterion(7, "overfit 8 scenes (pctcn)", None, || {
        let spec = SceneSpec {
            min_fg_classes: 2,
            max_fg_classes: 2,
            ..Default::default()
        };
        let vocab = synthetic_vocabulary(2).map_err(|e| e.to_string())?;
        let data = Dataset::generate(7, 8, vocab, spec, SourcePool::Synthetic).map_err(|e| e.to_string())?;
        let mut config = TrainConfig::new(Variant::Pctcn, 2);
        config.epochs = C7_EPOCHS;
        config.batch_size = 1;
        config.seed = 1;
        config.target_mode = TargetMode::Single;
        let before = mean_si_snri(&Model::init(config.model, config.seed).map_err(|e| e.to_string())?, &data, TargetMode::Single, 0)
            .map_err(|e| e.to_string())?;
        let outcome = train(&config, &data, None, |r| {
            report(&format!("  criterion 7: epoch {} loss {:.2} ({:.0}s)", r.epoch, r.loss_sep, r.seconds));
            Ok(())
        })
        .map_err(|e| e.to_string())?;
        let after = mean_si_snri(&outcome.model, &data, TargetMode::Single, 0).map_err(|e| e.to_string())?;
        ensure(after >= C7_THRESHOLD_DB, || format!("training SI-SNRi {after:.2} dB (untrained {before:.2})"))?;
        Ok(format!("training SI-SNRi {before:.2} -> {after:.2} dB >= {C7_THRESHOLD_DB} after {C7_EPOCHS} epochs"))
    });
}

const C8_TRAIN_SCENES: usize = 512;
const C8_TEST_SCENES: usize = 128;
const C8_CLASSES: usize = 8;
const C8_EPOCHS: usize = 6;
const C8_SLACK_DB: f64 = 0.3;
/// Margins smaller than this many standard errors of the paired per-scene
/// difference are treated as noise.
const C8_NOISE_SE: f64 = 2.0;

struct VariantScore {
    avg: f64,
    per_count: [f64; 3],
    /// Per (target count, scene) SI-SNRi, in a fixed order.
    items: Vec<f64>,
}

fn score(model: &Model, data: &Dataset, oracle: OracleSource) -> Result<VariantScore, String> {
    let mut per_count = [0.0; 3];
    let mut items = Vec::new();
    for n in 1..=3 {
        let s = score_scenes(model, data, n, 0xe7, oracle).map_err(|e| e.to_string())?;
        per_count[n - 1] = s.iter().map(|s| s.si_snri_db).sum::<f64>() / s.len() as f64;
        items.extend(s.iter().map(|s| s.si_snri_db));
    }
    Ok(VariantScore {
        avg: per_count.iter().sum::<f64>() / 3.0,
        per_count,
        items,
    })
}

fn paired_standard_error(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

#[test]
fn c08_context_ordering() {
    criterion(8, "context ordering", None, || {
        let vocab = synthetic_vocabulary(C8_CLASSES).map_err(|e| e.to_string())?;
        let spec = SceneSpec::default();
        let train_set = Dataset::generate(0x8a, C8_TRAIN_SCENES, vocab.clone(), spec, SourcePool::Synthetic).map_err(|e| e.to_string())?;
        let test_set = Dataset::generate(0x8b, C8_TEST_SCENES, vocab, spec, SourcePool::Synthetic).map_err(|e| e.to_string())?;
        let mut scores = Vec::new();
        let mut corrupted = None;
        for variant in [Variant::Pctcn, Variant::Icatse, Variant::Ecatse] {
            let mut config = TrainConfig::new(variant, C8_CLASSES);
            config.epochs = C8_EPOCHS;
            config.seed = 8;
            let outcome = train(&config, &train_set, None, |r| {
                report(&format!(
                    "  criterion 8: {variant} epoch {} L_s {:.2}{} ({:.0}s)",
                    r.epoch,
                    r.loss_sep,
                    r.loss_cls.map(|c| format!(" L_c {c:.3}")).unwrap_or_default(),
                    r.seconds
                ));
                Ok(())
            })
            .map_err(|e| e.to_string())?;
            let s = score(&outcome.model, &test_set, OracleSource::True)?;
            report(&format!(
                "  criterion 8: {variant} test SI-SNRi 1/2/3 targets {:.2} / {:.2} / {:.2}, avg {:.2} dB",
                s.per_count[0], s.per_count[1], s.per_count[2], s.avg
            ));
            if variant == Variant::Ecatse {
                corrupted = Some(score(&outcome.model, &test_set, OracleSource::Random(0x0bad))?.avg);
            }
            scores.push(s);
        }
        let (pctcn, icatse, ecatse) = (&scores[0], &scores[1], &scores[2]);
        let margin_i = icatse.avg - pctcn.avg;
        let se_i = paired_standard_error(&icatse.items, &pctcn.items);
        let within_noise = margin_i.abs() < C8_NOISE_SE * se_i;
        let summary = format!(
            "ecatse {:.2} (random oracle {:.2}), icatse {:.2}, pctcn {:.2} dB; icatse-pctcn {margin_i:+.2} dB (se {se_i:.2}{})",
            ecatse.avg,
            corrupted.unwrap_or(f64::NAN),
            icatse.avg,
            pctcn.avg,
            if within_noise { ", within noise" } else { "" }
        );
        ensure(ecatse.avg >= pctcn.avg, || format!("ecatse below pctcn: {summary}"))?;
        if !within_noise {
            ensure(ecatse.avg >= icatse.avg, || format!("ecatse below icatse: {summary}"))?;
            ensure(icatse.avg >= pctcn.avg - C8_SLACK_DB, || format!("icatse below pctcn - {C8_SLACK_DB} dB: {summary}"))?;
        }
        Ok(summary)
    });
}

const C9_SCENES: usize = 1000;
const C9_SNR_TOLERANCE_DB: f64 = 0.1;

#[test]
fn c09_scene_generator() {
    criterion(9, "scene generator", None, || {
        let vocab = synthetic_vocabulary(C8_CLASSES).map_err(|e| e.to_string())?;
        let data = Dataset::generate(0xc9, C9_SCENES, vocab, SceneSpec::default(), SourcePool::Synthetic).map_err(|e| e.to_string())?;
        let mut worst: f64 = 0.0;
        let mut stems = 0;
        for i in 0..data.len() {
            let scene = data.scene(i).map_err(|e| e.to_string())?;
            for (slot, stem) in scene.stems.iter().enumerate() {
                let active = stem.offset..stem.offset + stem.len;
                let ps: f64 = scene_energy(&stem.samples[active.clone()]);
                let pb: f64 = scene_energy(&scene.background[active]);
                let measured = 10.0 * (ps / pb).log10();
                let err = (measured - scene.record.snrs_db[slot]).abs();
                worst = worst.max(err);
                ensure(err <= C9_SNR_TOLERANCE_DB, || format!("scene {i} stem {slot}: SNR off by {err:.3} dB"))?;
                stems += 1;
            }
            let mut sum = scene.background.clone();
            for stem in &scene.stems {
                for (m, s) in sum.iter_mut().zip(&stem.samples) {
                    *m += s;
                }
            }
            let exact = sum.iter().zip(&scene.mixture).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(exact, || format!("scene {i}: background + stems differs from the mixture"))?;
        }
        Ok(format!("{stems} stems over {C9_SCENES} scenes, worst SNR error {worst:.1e} dB, mixtures exact"))
    });
}

fn scene_energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

#[test]
fn c10_checkpoint_format() {
    criterion(10, "checkpoint format", None, || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let vocab = synthetic_vocabulary(catse::condition::DEFAULT_CLASS_COUNT).map_err(|e| e.to_string())?;
        let model = Model::init(SeparatorConfig::default().with_variant(Variant::Icatse), 10).map_err(|e| e.to_string())?;
        let first = dir.path().join("a.catse");
        let second = dir.path().join("b.catse");
        save_weights(&ModelWeights::from_model(&model, &vocab).map_err(|e| e.to_string())?, &first).map_err(|e| e.to_string())?;
        let loaded = load_weights(&first, LoadPurpose::Training).map_err(|e| e.to_string())?;
        save_weights(&loaded, &second).map_err(|e| e.to_string())?;
        let (a, b) = (std::fs::read(&first).map_err(|e| e.to_string())?, std::fs::read(&second).map_err(|e| e.to_string())?);
        ensure(a == b, || "save/load/save changed the bytes".into())?;

        let full = loaded.to_model().map_err(|e| e.to_string())?;
        let inference = load_weights(&first, LoadPurpose::Inference).map_err(|e| e.to_string())?.to_model().map_err(|e| e.to_string())?;
        let mut stripped = loaded.clone();
        stripped.params.remove_prefixed(HEAD_PREFIX);
        let headless = decode_weights(&encode_weights(&stripped).map_err(|e| e.to_string())?, LoadPurpose::Inference)
            .map_err(|e| e.to_string())?
            .to_model()
            .map_err(|e| e.to_string())?;
        ensure(full.has_heads() && !inference.has_heads() && !headless.has_heads(), || "unexpected head presence".into())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0xca);
        let x = random_signal(16_000, &mut rng);
        let hint = multi_hot(vocab.len(), &[3]);
        let y = full.extract(&x, &hint, None).map_err(|e| e.to_string())?;
        for (label, m) in [("inference load", &inference), ("head-free file", &headless)] {
            let z = m.extract(&x, &hint, None).map_err(|e| e.to_string())?;
            let same = y.iter().zip(&z).all(|(p, q)| p.to_bits() == q.to_bits());
            ensure(same, || format!("{label}: output differs"))?;
        }
        Ok(format!("{} bytes reproduced exactly, head-free outputs bit-identical", a.len()))
    });
}
