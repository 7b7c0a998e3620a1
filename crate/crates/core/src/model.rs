//! A separator bound to its weights, and offline (whole-clip) extraction.

use std::sync::Arc;

use crate::condition::conditioning;
use crate::error::{Error, Result};
use crate::filterbank::Filterbank;
use crate::params::Params;
use crate::separator::{self, apply_mask, SeparatorConfig, Variant, HEAD_PREFIX};
use crate::tensor::{Backend, Eval, Tensor};

/// Anything that turns a mixture plus a class context into an estimate of
/// the target, sample-aligned with the mixture.
pub trait Extractor {
    fn extract(&self, mixture: &[f64], hint: &[f64], oracle: Option<&[f64]>) -> Result<Vec<f64>>;

    /// Whether [`Extractor::extract`] expects the oracle context vector.
    fn wants_oracle(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: SeparatorConfig,
    params: Params,
    filterbank: Arc<Filterbank>,
}

impl Model {
    /// Freshly initialized model.
    pub fn init(config: SeparatorConfig, seed: u64) -> Result<Self> {
        let params = separator::init_params(&config, seed)?;
        Ok(Model {
            config,
            params,
            filterbank: Arc::new(Filterbank::default()),
        })
    }

    /// Binds existing parameters. Head parameters may be absent.
    pub fn from_params(config: SeparatorConfig, params: Params) -> Result<Self> {
        config.validate()?;
        separator::check_params(&config, &params, true)?;
        Ok(Model {
            config,
            params,
            filterbank: Arc::new(Filterbank::default()),
        })
    }

    pub fn config(&self) -> &SeparatorConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn into_params(self) -> Params {
        self.params
    }

    pub fn filterbank(&self) -> &Arc<Filterbank> {
        &self.filterbank
    }

    /// Drops the training-only classification heads; returns how many arrays went.
    pub fn strip_heads(&mut self) -> usize {
        self.params.remove_prefixed(HEAD_PREFIX)
    }

    pub fn has_heads(&self) -> bool {
        self.params.names().any(|n| n.starts_with(HEAD_PREFIX))
    }

    /// Validates the hint/oracle pair against the variant.
    pub fn check_context(&self, hint: &[f64], oracle: Option<&[f64]>) -> Result<()> {
        let n = self.config.n_classes;
        if hint.len() != n {
            return Err(Error::dim(format!("hint has {} entries, model has {n} classes", hint.len())));
        }
        match (self.config.variant, oracle) {
            (Variant::Ecatse, None) => Err(Error::usage("ecatse needs an oracle context vector")),
            (Variant::Ecatse, Some(o)) if o.len() != n => Err(Error::dim(format!(
                "oracle has {} entries, model has {n} classes",
                o.len()
            ))),
            (Variant::Ecatse, Some(_)) => Ok(()),
            (v, Some(_)) => Err(Error::usage(format!("{v} does not take an oracle context"))),
            (_, None) => Ok(()),
        }
    }

    /// The 128-dim conditioning embedding for a context.
    pub fn embedding(&self, hint: &[f64], oracle: Option<&[f64]>) -> Result<Vec<f64>> {
        self.check_context(hint, oracle)?;
        let mut e = Eval::new(&self.params);
        Ok(conditioning(&mut e, self.config.variant, hint, oracle)?.data().to_vec())
    }

    /// Time-frequency mask for a whole clip.
    pub fn mask(&self, mixture: &[f64], hint: &[f64], oracle: Option<&[f64]>) -> Result<Tensor> {
        let spec = self.filterbank.analyze(mixture)?;
        self.mask_of(spec, hint, oracle)
    }

    fn mask_of(&self, spec: Tensor, hint: &[f64], oracle: Option<&[f64]>) -> Result<Tensor> {
        self.check_context(hint, oracle)?;
        let mut e = Eval::new(&self.params);
        let cond = conditioning(&mut e, self.config.variant, hint, oracle)?;
        let spec = e.constant(spec);
        let out = separator::forward(&mut e, &self.config, &spec, &cond)?;
        Ok((*out.mask).clone())
    }
}

impl Extractor for Model {
    fn extract(&self, mixture: &[f64], hint: &[f64], oracle: Option<&[f64]>) -> Result<Vec<f64>> {
        let spec = self.filterbank.analyze(mixture)?;
        let mask = self.mask_of(spec.clone(), hint, oracle)?;
        let masked = apply_mask(&spec, &mask)?;
        let y = self.filterbank.synthesize(&masked)?;
        crate::tensor::ensure_finite(&y, "extracted waveform")?;
        let mut y = y.into_data();
        y.resize(mixture.len(), 0.0);
        Ok(y)
    }

    fn wants_oracle(&self) -> bool {
        self.config.variant == Variant::Ecatse
    }
}

/// Analysis followed by synthesis with a unit mask: the mixture itself, up to
/// the incomplete frame at the end of the clip.
#[derive(Clone, Debug, Default)]
pub struct PassThrough {
    filterbank: Filterbank,
}

impl Extractor for PassThrough {
    fn extract(&self, mixture: &[f64], _hint: &[f64], _oracle: Option<&[f64]>) -> Result<Vec<f64>> {
        let spec = self.filterbank.analyze(mixture)?;
        let mut y = self.filterbank.synthesize(&spec)?.into_data();
        y.resize(mixture.len(), 0.0);
        Ok(y)
    }
}
