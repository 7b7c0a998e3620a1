//! Checkpoint files.
//!
//! ```text
//! magic      8 bytes  "CATSEW1\0"
//! meta_len   u32 LE
//! meta       meta_len bytes of JSON (format version, variant, configs, vocabulary)
//! count      u32 LE
//! count × record:
//!   name_len u32 LE, name (UTF-8), rank u32 LE, rank × dim u32 LE,
//!   product(dims) × f32 LE
//! ```
//!
//! Records are written in lexicographic name order, so saving a loaded file
//! reproduces it byte for byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::condition::ClassVocabulary;
use crate::error::{Error, Result};
use crate::filterbank::FilterbankConfig;
use crate::fsutil::write_atomic;
use crate::model::Model;
use crate::params::Params;
use crate::separator::{check_params, SeparatorConfig, Variant, HEAD_PREFIX};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CATSEW1\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsMeta {
    pub format_version: u32,
    pub variant: Variant,
    pub config: SeparatorConfig,
    pub filterbank: FilterbankConfig,
    pub vocabulary: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub meta: WeightsMeta,
    pub params: Params,
}

/// What a checkpoint is loaded for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadPurpose {
    /// Every parameter, heads included, must be present.
    Training,
    /// Head parameters are skipped.
    Inference,
}

impl ModelWeights {
    pub fn from_model(model: &Model, vocab: &ClassVocabulary) -> Result<Self> {
        if vocab.len() != model.config().n_classes {
            return Err(Error::usage(format!(
                "vocabulary has {} classes, model has {}",
                vocab.len(),
                model.config().n_classes
            )));
        }
        Ok(ModelWeights {
            meta: WeightsMeta {
                format_version: FORMAT_VERSION,
                variant: model.variant(),
                config: *model.config(),
                filterbank: *model.filterbank().config(),
                vocabulary: vocab.names().to_vec(),
            },
            params: model.params().clone(),
        })
    }

    pub fn to_model(&self) -> Result<Model> {
        Model::from_params(self.meta.config, self.params.clone())
    }

    pub fn vocabulary(&self) -> Result<ClassVocabulary> {
        ClassVocabulary::new(self.meta.vocabulary.clone())
    }
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::usage(format!("{what} {n} does not fit the checkpoint format")))
}

pub fn encode_weights(w: &ModelWeights) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&w.meta)?;
    let mut out = Vec::with_capacity(16 + meta.len() + 4 * w.params.numel() + 64 * w.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&u32_of(meta.len(), "metadata length")?.to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&u32_of(w.params.len(), "record count")?.to_le_bytes());
    for (name, t) in w.params.iter() {
        out.extend_from_slice(&u32_of(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_of(t.rank(), "rank")?.to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt(format!(
                "truncated while reading {what} at byte {} ({} bytes total)",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_weights(bytes: &[u8], purpose: LoadPurpose) -> Result<ModelWeights> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Corrupt("bad magic bytes (not a checkpoint)".into()));
    }
    let meta_len = r.u32("metadata length")?;
    let meta: WeightsMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::Corrupt(format!("unreadable metadata: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Corrupt(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            meta.format_version
        )));
    }
    if meta.config.variant != meta.variant {
        return Err(Error::Corrupt("variant tag disagrees with the configuration".into()));
    }
    if meta.vocabulary.len() != meta.config.n_classes {
        return Err(Error::Corrupt("vocabulary size disagrees with the class count".into()));
    }
    if meta.filterbank != FilterbankConfig::default() {
        return Err(Error::data("checkpoint uses an unsupported filterbank geometry"));
    }
    meta.config.validate()?;
    let count = r.u32("record count")?;
    let mut params = Params::new();
    for _ in 0..count {
        let name_len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Corrupt("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u32("dimension")).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Corrupt(format!("absurd shape {shape:?} for `{name}`")))?;
        let raw = r.take(n, "values")?;
        if purpose == LoadPurpose::Inference && name.starts_with(HEAD_PREFIX) {
            continue;
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if params.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Corrupt(format!("duplicate parameter `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    check_params(&meta.config, &params, purpose == LoadPurpose::Inference)?;
    if purpose == LoadPurpose::Training && meta.variant == Variant::Icatse && !params.names().any(|n| n.starts_with(HEAD_PREFIX)) {
        return Err(Error::data("icatse checkpoint has no classification heads"));
    }
    Ok(ModelWeights { meta, params })
}

pub fn save_weights(w: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_weights(w)?)
}

pub fn load_weights(path: impl AsRef<Path>, purpose: LoadPurpose) -> Result<ModelWeights> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes, purpose).map_err(|e| match e {
        Error::Corrupt(m) => Error::Corrupt(format!("{}: {m}", path.display())),
        other => other,
    })
}
