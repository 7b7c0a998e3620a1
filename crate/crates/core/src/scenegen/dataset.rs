//! Datasets on disk and user-supplied source corpora.
//!
//! ```text
//! <dir>/dataset.json                    vocabulary, scene spec, seed
//! <dir>/manifest.jsonl                  one SceneRecord per line
//! <dir>/scenes/<id>/mixture.wav
//! <dir>/scenes/<id>/stem_<class>.wav
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{draw_scene, render_scene, scene_id, scene_seed, MixtureExample, SceneRecord, SceneSpec, SourcePool, Stem};
use crate::condition::{multi_hot, ClassVocabulary};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::wav::{read_wav, write_wav, SampleFormat};

pub const DATASET_FILE: &str = "dataset.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
const FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub format: u32,
    pub seed: u64,
    pub n_scenes: usize,
    pub vocabulary: Vec<String>,
    /// Template for every scene; each scene replaces the seed with its own.
    pub scene_spec: SceneSpec,
    /// Root of the ingested corpus, when sources were not synthetic.
    pub corpus: Option<String>,
}

/// Where scene audio comes from when a scene is requested.
#[derive(Clone, Debug)]
pub enum SceneStore {
    /// Re-rendered from the record on demand.
    Render(Arc<SourcePool>),
    Disk(PathBuf),
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub info: DatasetInfo,
    pub vocab: ClassVocabulary,
    pub records: Vec<SceneRecord>,
    store: SceneStore,
}

impl Dataset {
    /// Draws `n_scenes` scenes; audio is rendered lazily.
    pub fn generate(seed: u64, n_scenes: usize, vocab: ClassVocabulary, template: SceneSpec, pool: SourcePool) -> Result<Self> {
        template.validate(&vocab)?;
        let corpus = match &pool {
            SourcePool::Synthetic => None,
            SourcePool::Corpus(c) => Some(c.root.display().to_string()),
        };
        let records = (0..n_scenes)
            .map(|i| draw_scene(&template.with_seed(scene_seed(seed, i)), &vocab, &pool, &scene_id(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            info: DatasetInfo {
                format: FORMAT,
                seed,
                n_scenes,
                vocabulary: vocab.names().to_vec(),
                scene_spec: template.with_seed(seed),
                corpus,
            },
            vocab,
            records,
            store: SceneStore::Render(Arc::new(pool)),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn store(&self) -> &SceneStore {
        &self.store
    }

    pub fn scene(&self, index: usize) -> Result<MixtureExample> {
        let record = self
            .records
            .get(index)
            .ok_or_else(|| Error::usage(format!("scene {index} out of range ({} scenes)", self.len())))?;
        let spec = self.info.scene_spec.with_seed(record.seed);
        match &self.store {
            SceneStore::Render(pool) => render_scene(record, &spec, &self.vocab, pool),
            SceneStore::Disk(dir) => read_scene(dir, record, &spec, &self.vocab),
        }
    }

    /// The scenes at `indices`, sharing this dataset's store.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let records: Vec<SceneRecord> = indices.iter().map(|&i| self.records[i].clone()).collect();
        Dataset {
            info: DatasetInfo {
                n_scenes: records.len(),
                ..self.info.clone()
            },
            vocab: self.vocab.clone(),
            records,
            store: self.store.clone(),
        }
    }
}

fn scene_dir(root: &Path, record: &SceneRecord) -> PathBuf {
    root.join("scenes").join(&record.scene_id)
}

fn read_scene(root: &Path, record: &SceneRecord, spec: &SceneSpec, vocab: &ClassVocabulary) -> Result<MixtureExample> {
    let dir = scene_dir(root, record);
    let mixture = read_wav(dir.join("mixture.wav"))?;
    if mixture.len() != spec.scene_samples() {
        return Err(Error::data(format!(
            "{}: expected {} samples, found {}",
            dir.join("mixture.wav").display(),
            spec.scene_samples(),
            mixture.len()
        )));
    }
    let mut background = mixture.clone();
    let mut stems = Vec::with_capacity(record.classes.len());
    for (slot, name) in record.classes.iter().enumerate() {
        let class = vocab
            .index_of(name)
            .ok_or_else(|| Error::data(format!("scene {} uses unknown class `{name}`", record.scene_id)))?;
        let path = dir.join(format!("stem_{name}.wav"));
        let samples = read_wav(&path)?;
        if samples.len() != mixture.len() {
            return Err(Error::data(format!("{}: stem length differs from the mixture", path.display())));
        }
        for (b, s) in background.iter_mut().zip(&samples) {
            *b -= s;
        }
        let rate = spec.sample_rate as f64;
        stems.push(Stem {
            class,
            offset: (record.offsets_s[slot] * rate).round() as usize,
            len: (record.durations_s[slot] * rate).round() as usize,
            samples,
        });
    }
    let present = multi_hot(vocab.len(), &stems.iter().map(|s| s.class).collect::<Vec<_>>());
    Ok(MixtureExample {
        record: record.clone(),
        mixture,
        background,
        stems,
        present,
    })
}

/// Renders every scene and writes the dataset. Each file is written atomically;
/// `dataset.json` goes last, so its presence marks a complete dataset.
pub fn write_dataset(dir: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    let mut manifest = String::new();
    for (i, record) in dataset.records.iter().enumerate() {
        let scene = dataset.scene(i)?;
        let sdir = scene_dir(dir, record);
        write_wav(sdir.join("mixture.wav"), &scene.mixture, SampleFormat::Float32)?;
        for stem in &scene.stems {
            let name = dataset.vocab.names()[stem.class].as_str();
            write_wav(sdir.join(format!("stem_{name}.wav")), &stem.samples, SampleFormat::Float32)?;
        }
        manifest.push_str(&serde_json::to_string(record)?);
        manifest.push('\n');
    }
    write_atomic(dir.join(MANIFEST_FILE), manifest.as_bytes())?;
    let mut info = serde_json::to_vec_pretty(&dataset.info)?;
    info.push(b'\n');
    write_atomic(dir.join(DATASET_FILE), &info)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let info_path = dir.join(DATASET_FILE);
    let text = fs::read_to_string(&info_path).map_err(|e| Error::io(&info_path, e))?;
    let info: DatasetInfo = serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("{}: {e}", info_path.display())))?;
    if info.format != FORMAT {
        return Err(Error::data(format!("{}: unsupported dataset format {}", info_path.display(), info.format)));
    }
    let vocab = ClassVocabulary::new(info.vocabulary.clone())?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str::<SceneRecord>(l)
                .map_err(|e| Error::data(format!("{} line {}: {e}", manifest_path.display(), n + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    if records.len() != info.n_scenes {
        return Err(Error::data(format!(
            "{} lists {} scenes, dataset.json says {}",
            manifest_path.display(),
            records.len(),
            info.n_scenes
        )));
    }
    Ok(Dataset {
        info,
        vocab,
        records,
        store: SceneStore::Disk(dir.to_path_buf()),
    })
}

/// Clips grouped by class: one sub-directory per class, WAV files inside.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub vocab: ClassVocabulary,
    clips: Vec<Vec<Vec<f64>>>,
}

impl Corpus {
    pub fn clips(&self, class: usize) -> &[Vec<f64>] {
        self.clips.get(class).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn n_clips(&self) -> usize {
        self.clips.iter().map(Vec::len).sum()
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

/// Reads a directory-per-class corpus. Classes are the sub-directory names
/// in sorted order; every WAV must be mono 16 kHz.
pub fn ingest_corpus(root: impl AsRef<Path>) -> Result<Corpus> {
    let root = root.as_ref();
    let mut names = Vec::new();
    let mut clips = Vec::new();
    for class_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let wavs: Vec<PathBuf> = sorted_entries(&class_dir)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
            .collect();
        if wavs.is_empty() {
            return Err(Error::data(format!("{}: class directory holds no WAV files", class_dir.display())));
        }
        let audio = wavs.iter().map(read_wav).collect::<Result<Vec<_>>>()?;
        if let Some((p, _)) = wavs.iter().zip(&audio).find(|(_, a)| a.is_empty()) {
            return Err(Error::data(format!("{}: empty clip", p.display())));
        }
        names.push(class_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        clips.push(audio);
    }
    if names.is_empty() {
        return Err(Error::data(format!("{}: empty source pool (no class directories)", root.display())));
    }
    Ok(Corpus {
        root: root.to_path_buf(),
        vocab: ClassVocabulary::new(names)?,
        clips,
    })
}
