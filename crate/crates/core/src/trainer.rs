//! Training loop, optimizer and evaluation.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::condition::conditioning;
use crate::error::{Error, Result};
use crate::model::{Extractor, Model};
use crate::objectives::{
    loss_classification_node, loss_combined_node, loss_separation_node, si_sdr, snr, LossWeights,
};
use crate::params::Params;
use crate::scenegen::{draw_n_targets, draw_targets, Dataset, MixtureExample, TargetDraw, TargetMode};
use crate::separator::{self, heads_forward, Mode, SeparatorConfig, Variant};
use crate::tensor::{Backend, Tape};

/// Hidden width used for desk-scale training.
pub const DESK_HIDDEN_CHANNELS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: SeparatorConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the classification loss; only the icatse variant uses it.
    pub lambda_cls: f64,
    pub target_mode: TargetMode,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn new(variant: Variant, n_classes: usize) -> Self {
        TrainConfig {
            model: SeparatorConfig {
                variant,
                n_classes,
                hidden_channels: DESK_HIDDEN_CHANNELS,
                ..Default::default()
            },
            epochs: 10,
            batch_size: 4,
            learning_rate: 1e-3,
            lambda_cls: LossWeights::default().lambda_cls,
            target_mode: TargetMode::Multi,
            seed: 0,
            adam: AdamConfig::default(),
            grad_clip: Some(5.0),
        }
    }

    pub fn variant(&self) -> Variant {
        self.model.variant
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        LossWeights::new(self.lambda_cls)?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::usage("epochs and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::usage(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::usage(format!("gradient clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Adaptive moment estimation.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    lr: f64,
    m: Params,
    v: Params,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, lr: f64) -> Self {
        Adam {
            config,
            lr,
            m: Params::new(),
            v: Params::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) -> Result<()> {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name)?;
            if !self.m.contains(name) {
                self.m.insert(name.clone(), crate::tensor::Tensor::zeros(g.shape()));
                self.v.insert(name.clone(), crate::tensor::Tensor::zeros(g.shape()));
            }
            let m = self.m.get_mut(name)?.data_mut();
            let v = self.v.get_mut(name)?.data_mut();
            for (((p, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Hint and (for ecatse) oracle fed to the model for one training example.
/// The oracle is always the set of classes present in the mixture.
pub fn training_context(variant: Variant, scene: &MixtureExample, draw: &TargetDraw) -> (Vec<f64>, Option<Vec<f64>>) {
    let oracle = (variant == Variant::Ecatse).then(|| scene.present.clone());
    (draw.hint.clone(), oracle)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ExampleLoss {
    pub separation: f64,
    /// Classification loss; zero for variants without heads.
    pub classification: f64,
    pub total: f64,
}

/// Loss and parameter gradients for one example.
pub fn example_gradients(model: &Model, scene: &MixtureExample, draw: &TargetDraw, weights: LossWeights) -> Result<(ExampleLoss, Params)> {
    let cfg = *model.config();
    let fb = model.filterbank().clone();
    let (hint, oracle) = training_context(cfg.variant, scene, draw);
    model.check_context(&hint, oracle.as_deref())?;
    let mut tape = Tape::new(model.params());
    let cond = conditioning(&mut tape, cfg.variant, &hint, oracle.as_deref())?;
    let spec = tape.constant(fb.analyze(&scene.mixture)?);
    let out = separator::forward(&mut tape, &cfg, &spec, &cond)?;
    let masked = tape.mul(&spec, &out.mask)?;
    let wave = tape.graph.synthesize(masked, fb.clone())?;
    let len = tape.graph.value(wave).numel();
    let ls = loss_separation_node(&mut tape.graph, wave, &draw.reference[..len])?;
    let mut loss = ExampleLoss {
        separation: tape.graph.value(ls).item()?,
        ..Default::default()
    };
    let total = if cfg.variant == Variant::Icatse {
        let probs = heads_forward(&mut tape, &cfg, &out.stack_outputs, Mode::Training)?;
        let lc = loss_classification_node(&mut tape.graph, probs, &scene.present)?;
        loss.classification = tape.graph.value(lc).item()?;
        loss_combined_node(&mut tape.graph, ls, lc, weights)?
    } else {
        ls
    };
    loss.total = tape.graph.value(total).item()?;
    tape.graph.backward(total)?;
    Ok((loss, tape.gradients()))
}

fn global_norm(grads: &Params) -> f64 {
    grads
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    /// Mean separation loss (negative SI-SDR, dB) over the epoch.
    pub loss_sep: f64,
    /// Mean classification loss; icatse only.
    pub loss_cls: Option<f64>,
    pub val_si_snri_db: Option<f64>,
    pub seconds: f64,
}

pub struct Trainer {
    config: TrainConfig,
    model: Model,
    adam: Adam,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::init(config.model, config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Trainer {
            adam: Adam::new(config.adam, config.learning_rate),
            config,
            model,
            rng,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// One optimizer step on the mean gradient of `batch`.
    pub fn step(&mut self, batch: &[(&MixtureExample, &TargetDraw)]) -> Result<ExampleLoss> {
        if batch.is_empty() {
            return Err(Error::usage("empty batch"));
        }
        let weights = LossWeights::new(self.config.lambda_cls)?;
        let mut sum: Option<Params> = None;
        let mut mean = ExampleLoss::default();
        for (scene, draw) in batch {
            let (loss, grads) = example_gradients(&self.model, scene, draw, weights)?;
            if !(loss.total.is_finite() && loss.separation.is_finite() && loss.classification.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite loss after {} steps on scene {} (targets {:?}): L_s={} L_c={} total={}",
                    self.adam.steps(),
                    scene.record.scene_id,
                    draw.classes,
                    loss.separation,
                    loss.classification,
                    loss.total
                )));
            }
            mean.separation += loss.separation;
            mean.classification += loss.classification;
            mean.total += loss.total;
            match &mut sum {
                None => sum = Some(grads),
                Some(acc) => {
                    for (name, g) in grads.iter() {
                        for (a, v) in acc.get_mut(name)?.data_mut().iter_mut().zip(g.data()) {
                            *a += v;
                        }
                    }
                }
            }
        }
        let n = batch.len() as f64;
        let mut grads = sum.expect("non-empty batch");
        let norm = global_norm(&grads) / n;
        if !norm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient norm after {} steps (batch of {} starting at scene {})",
                self.adam.steps(),
                batch.len(),
                batch[0].0.record.scene_id
            )));
        }
        let scale = match self.config.grad_clip {
            Some(c) if norm > c => c / (norm * n),
            _ => 1.0 / n,
        };
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        self.adam.step(self.model.params_mut(), &grads)?;
        mean.separation /= n;
        mean.classification /= n;
        mean.total /= n;
        Ok(mean)
    }

    /// One pass over `data` in a seeded random order.
    pub fn epoch(&mut self, data: &Dataset, epoch: usize) -> Result<EpochRecord> {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        for i in (1..order.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let (mut ls, mut lc, mut count) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            let mut items = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let scene = data.scene(i)?;
                let draw = draw_targets(&scene, self.config.target_mode, &mut self.rng)?;
                items.push((scene, draw));
            }
            let batch: Vec<(&MixtureExample, &TargetDraw)> = items.iter().map(|(s, d)| (s, d)).collect();
            let loss = self.step(&batch)?;
            ls += loss.separation * chunk.len() as f64;
            lc += loss.classification * chunk.len() as f64;
            count += chunk.len();
        }
        let icatse = self.config.variant() == Variant::Icatse;
        Ok(EpochRecord {
            epoch,
            steps: self.adam.steps(),
            loss_sep: ls / count as f64,
            loss_cls: icatse.then(|| lc / count as f64),
            val_si_snri_db: None,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    pub fn into_model(self) -> Model {
        self.model
    }
}

pub struct TrainOutcome {
    /// Weights of the best epoch (by validation SI-SNRi, else the last epoch).
    pub model: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

/// Full training run. `on_epoch` sees every record as soon as it is complete.
pub fn train(config: &TrainConfig, data: &Dataset, validation: Option<&Dataset>, mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    if data.vocab.len() != config.model.n_classes {
        return Err(Error::data(format!(
            "dataset has {} classes, model expects {}",
            data.vocab.len(),
            config.model.n_classes
        )));
    }
    let mut trainer = Trainer::new(*config)?;
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    for epoch in 1..=config.epochs {
        let mut record = trainer.epoch(data, epoch)?;
        if let Some(val) = validation {
            let score = mean_si_snri(trainer.model(), val, config.target_mode, config.seed)?;
            record.val_si_snri_db = Some(score);
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, epoch, trainer.model().clone()));
            }
        }
        on_epoch(&record)?;
        log.push(record);
    }
    let (best_epoch, model) = match best {
        Some((_, e, m)) => (e, m),
        None => (config.epochs, trainer.into_model()),
    };
    Ok(TrainOutcome { model, best_epoch, log })
}

/// Oracle vector used at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleSource {
    /// The classes actually present.
    True,
    /// A random non-empty multi-hot vector drawn from this seed.
    Random(u64),
}

fn eval_rng(seed: u64, scene: usize, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((scene as u64) << 8 | tag);
    rng
}

fn oracle_for(extractor: &dyn Extractor, scene: &MixtureExample, index: usize, source: OracleSource) -> Option<Vec<f64>> {
    if !extractor.wants_oracle() {
        return None;
    }
    Some(match source {
        OracleSource::True => scene.present.clone(),
        OracleSource::Random(seed) => {
            let mut rng = eval_rng(seed, index, 0xff);
            let n = scene.present.len();
            let mut o: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            if o.iter().all(|&v| v == 0.0) {
                o[rng.gen_range(0..n)] = 1.0;
            }
            o
        }
    })
}

/// Per-scene metrics for one target count.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneScore {
    pub scene: usize,
    pub si_snri_db: f64,
    pub snr_db: f64,
}

/// Scores every scene with at least `n_targets` present classes.
pub fn score_scenes(extractor: &dyn Extractor, data: &Dataset, n_targets: usize, seed: u64, oracle: OracleSource) -> Result<Vec<SceneScore>> {
    let mut out = Vec::new();
    for i in 0..data.len() {
        let scene = data.scene(i)?;
        if scene.stems.len() < n_targets {
            continue;
        }
        let draw = draw_n_targets(&scene, n_targets, &mut eval_rng(seed, i, n_targets as u64))?;
        let o = oracle_for(extractor, &scene, i, oracle);
        let est = extractor.extract(&scene.mixture, &draw.hint, o.as_deref())?;
        out.push(SceneScore {
            scene: i,
            si_snri_db: si_sdr(&est, &draw.reference)? - si_sdr(&scene.mixture, &draw.reference)?,
            snr_db: snr(&est, &draw.reference)?,
        });
    }
    Ok(out)
}

/// Mean SI-SNRi with targets drawn per `mode` (used for model selection).
pub fn mean_si_snri(extractor: &dyn Extractor, data: &Dataset, mode: TargetMode, seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::data("evaluation set is empty"));
    }
    let mut total = 0.0;
    for i in 0..data.len() {
        let scene = data.scene(i)?;
        let draw = draw_targets(&scene, mode, &mut eval_rng(seed, i, 0x10))?;
        let o = oracle_for(extractor, &scene, i, OracleSource::True);
        let est = extractor.extract(&scene.mixture, &draw.hint, o.as_deref())?;
        total += si_sdr(&est, &draw.reference)? - si_sdr(&scene.mixture, &draw.reference)?;
    }
    Ok(total / data.len() as f64)
}

/// One line of the metric report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    /// `"1"`, `"2"`, `"3"` or `"avg"`.
    pub n_targets: String,
    pub si_snri_db: f64,
    pub snr_db: f64,
    pub scenes: usize,
}

/// Mean SI-SNRi and SNR for each requested target count, plus their average
/// when more than one count is requested.
pub fn evaluate(extractor: &dyn Extractor, name: &str, data: &Dataset, targets: &[usize], seed: u64, oracle: OracleSource) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for &n in targets {
        if !(1..=3).contains(&n) {
            return Err(Error::usage(format!("target count must be 1, 2 or 3, got {n}")));
        }
        let scores = score_scenes(extractor, data, n, seed, oracle)?;
        if scores.is_empty() {
            return Err(Error::data(format!("no scene has {n} or more foreground classes")));
        }
        let k = scores.len() as f64;
        rows.push(MetricRow {
            model: name.to_string(),
            n_targets: n.to_string(),
            si_snri_db: scores.iter().map(|s| s.si_snri_db).sum::<f64>() / k,
            snr_db: scores.iter().map(|s| s.snr_db).sum::<f64>() / k,
            scenes: scores.len(),
        });
    }
    if rows.len() > 1 {
        let k = rows.len() as f64;
        rows.push(MetricRow {
            model: name.to_string(),
            n_targets: "avg".into(),
            si_snri_db: rows.iter().map(|r| r.si_snri_db).sum::<f64>() / k,
            snr_db: rows.iter().map(|r| r.snr_db).sum::<f64>() / k,
            scenes: rows.iter().map(|r| r.scenes).sum(),
        });
    }
    Ok(rows)
}

/// Renders rows as a fixed-width table: one line per model and metric, one
/// column per target count.
pub fn format_table(rows: &[MetricRow]) -> String {
    let mut columns: Vec<&str> = Vec::new();
    let mut models: Vec<&str> = Vec::new();
    for r in rows {
        if !columns.contains(&r.n_targets.as_str()) {
            columns.push(&r.n_targets);
        }
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    let header = |c: &str| match c {
        "1" => "1 target".to_string(),
        "avg" => "Avg.".to_string(),
        n => format!("{n} targets"),
    };
    let mut out = format!("{:<12} {:<12}", "model", "metric");
    for c in &columns {
        out.push_str(&format!(" {:>10}", header(c)));
    }
    out.push('\n');
    for m in &models {
        for (metric, pick) in [("SI-SNRi (dB)", true), ("SNR (dB)", false)] {
            out.push_str(&format!("{m:<12} {metric:<12}"));
            for c in &columns {
                match rows.iter().find(|r| r.model == *m && r.n_targets == *c) {
                    Some(r) => out.push_str(&format!(" {:>10.2}", if pick { r.si_snri_db } else { r.snr_db })),
                    None => out.push_str(&format!(" {:>10}", "-")),
                }
            }
            out.push('\n');
        }
    }
    out
}
