//! On-disk datasets, checkpoints and reports: a JSON manifest plus flat
//! little-endian blobs (`f32` values, `i32` labels).

use std::fs;
use std::path::{Path, PathBuf};

use numcore::{ParamSet, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::baselines::{NwgmDictionary, NwgmHead, VanillaModel, NWGM_HEAD};
use crate::error::{io_err, LabError, Result};
use crate::iern::{sub_seed, Architecture, ClassifierRoute, IernModel, BACKBONE, CLASSIFIER, COMPONENTS};
use crate::runner::{Method, Trained, TrainedModel};
use crate::synth::{ConfoundedDataset, Sample, SplitTag, SyntheticSpec};

pub const DATASET_FORMAT: u32 = 1;
pub const CHECKPOINT_FORMAT: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
const DATA_BLOB: &str = "data.bin";
const DICTIONARY: &str = "nwgm_dictionary";
const ENTRIES: &str = "entries";

fn format_err(path: &Path, reason: impl Into<String>) -> LabError {
    LabError::Format { path: path.display().to_string(), reason: reason.into() }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| format_err(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

fn push_f32(buf: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn push_i32(buf: &mut Vec<u8>, values: impl Iterator<Item = usize>) -> Result<()> {
    for v in values {
        let v = i32::try_from(v).map_err(|_| LabError::Contract(format!("label {v} does not fit in i32")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Reads little-endian 4-byte words from a blob in order.
struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn words(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at + 4 * n;
        let out = self
            .bytes
            .get(self.at..end)
            .ok_or_else(|| format_err(self.path, format!("blob ends at byte {} before {end}", self.bytes.len())))?;
        self.at = end;
        Ok(out)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.words(n)?.chunks_exact(4).map(|w| f32::from_le_bytes(w.try_into().unwrap()) as f64).collect())
    }

    fn labels(&mut self, n: usize, bound: usize, what: &str) -> Result<Vec<usize>> {
        let path = self.path;
        self.words(n)?
            .chunks_exact(4)
            .map(|w| {
                let v = i32::from_le_bytes(w.try_into().unwrap());
                usize::try_from(v)
                    .ok()
                    .filter(|&v| v < bound)
                    .ok_or_else(|| format_err(path, format!("{what} label {v} outside 0..{bound}")))
            })
            .collect()
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(format_err(self.path, format!("{} trailing bytes", self.bytes.len() - self.at)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSeeds {
    pub pattern: u64,
    pub noise: u64,
}

/// Dataset manifest. The blob holds every sample's pixels in sample order,
/// then the `y_e`, `y_c` and `source` label arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub split: SplitTag,
    pub n_samples: usize,
    pub sample_shape: Vec<usize>,
    pub counts: Vec<Vec<usize>>,
    pub n_sources: usize,
    pub seeds: DatasetSeeds,
    pub spec: SyntheticSpec,
    pub blob: String,
}

/// Writes `data` into directory `dir` (created if missing).
pub fn save_dataset(dir: &Path, data: &ConfoundedDataset) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let sample_shape = data.samples.first().map_or_else(
        || vec![data.spec.image.height, data.spec.image.width, data.spec.image.channels],
        |s| s.x.shape().to_vec(),
    );
    if data.samples.iter().any(|s| s.x.shape() != sample_shape.as_slice()) {
        return Err(LabError::Contract("samples differ in shape".into()));
    }
    let mut buf = Vec::with_capacity(data.len() * (sample_shape.iter().product::<usize>() + 3) * 4);
    for s in &data.samples {
        push_f32(&mut buf, s.x.data());
    }
    push_i32(&mut buf, data.samples.iter().map(|s| s.y_e))?;
    push_i32(&mut buf, data.samples.iter().map(|s| s.y_c))?;
    push_i32(&mut buf, data.samples.iter().map(|s| s.source))?;
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT,
        split: data.split,
        n_samples: data.len(),
        sample_shape,
        counts: data.counts(),
        n_sources: data.samples.iter().map(|s| s.source + 1).max().unwrap_or(1),
        seeds: DatasetSeeds { pattern: data.spec.pattern_seed, noise: data.spec.noise_seed },
        spec: data.spec.clone(),
        blob: DATA_BLOB.into(),
    };
    let blob = dir.join(DATA_BLOB);
    fs::write(&blob, &buf).map_err(io_err(&blob))?;
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<ConfoundedDataset> {
    let mpath = dir.join(MANIFEST);
    let m: DatasetManifest = read_json(&mpath)?;
    if m.format_version != DATASET_FORMAT {
        return Err(format_err(&mpath, format!("format {} (expected {DATASET_FORMAT})", m.format_version)));
    }
    m.spec.validate().map_err(|e| format_err(&mpath, e.to_string()))?;
    let bpath = dir.join(&m.blob);
    let bytes = fs::read(&bpath).map_err(io_err(&bpath))?;
    let mut cur = Cursor { bytes: &bytes, at: 0, path: &bpath };
    let per = m.sample_shape.iter().product::<usize>();
    let mut xs = Vec::with_capacity(m.n_samples);
    for _ in 0..m.n_samples {
        xs.push(Tensor::new(m.sample_shape.clone(), cur.f32s(per)?)?);
    }
    let y_e = cur.labels(m.n_samples, m.spec.n_emotions, "emotion")?;
    let y_c = cur.labels(m.n_samples, m.spec.n_confounders, "confounder")?;
    let source = cur.labels(m.n_samples, m.n_sources.max(1), "source")?;
    cur.finish()?;
    let samples = xs
        .into_iter()
        .zip(y_e)
        .zip(y_c)
        .zip(source)
        .map(|(((x, y_e), y_c), source)| Sample { x, y_e, y_c, source })
        .collect();
    let data = ConfoundedDataset::from_samples(samples, &m.spec, m.split);
    if data.counts() != m.counts || m.spec.cooccurrence != m.counts {
        return Err(format_err(&mpath, "cell counts disagree with the stored labels"));
    }
    Ok(data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// One parameter set: its parameters then its buffers, in listed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetEntry {
    pub component: String,
    pub file: String,
    pub params: Vec<TensorEntry>,
    pub buffers: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub method: Method,
    pub architecture: Architecture,
    pub seed: u64,
    pub step: u64,
    pub sets: Vec<SetEntry>,
}

fn dictionary_set(d: &NwgmDictionary) -> Result<ParamSet> {
    let mut ps = ParamSet::new();
    ps.insert(ENTRIES, d.entries.clone())?;
    Ok(ps)
}

fn model_sets(model: &TrainedModel) -> Result<Vec<(String, ParamSet)>> {
    let iern = |m: &IernModel| -> Vec<(String, ParamSet)> {
        COMPONENTS
            .iter()
            .map(|c| (c.to_string(), numcore::Parameterized::param_set(m, c).unwrap().clone()))
            .collect()
    };
    Ok(match model {
        TrainedModel::Vanilla(m) => {
            vec![(BACKBONE.into(), m.backbone.params.clone()), (CLASSIFIER.into(), m.classifier.params.clone())]
        }
        TrainedModel::Iern { model, .. } => iern(model),
        TrainedModel::Nwgm { trunk, head, dictionary } => {
            let mut sets = iern(trunk);
            sets.push((NWGM_HEAD.into(), head.params.clone()));
            sets.push((DICTIONARY.into(), dictionary_set(dictionary)?));
            sets
        }
    })
}

fn entries<'a>(it: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Vec<TensorEntry> {
    it.map(|(n, t)| TensorEntry { name: n.to_owned(), shape: t.shape().to_vec() }).collect()
}

/// Writes `trained` (built from `arch` and `seed`) into directory `dir`.
pub fn save_checkpoint(dir: &Path, trained: &Trained, arch: &Architecture, seed: u64) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut sets = Vec::new();
    for (component, ps) in model_sets(&trained.model)? {
        let file = format!("{component}.bin");
        let mut buf = Vec::with_capacity(ps.num_values() * 4);
        for (_, p) in ps.iter() {
            push_f32(&mut buf, p.value.data());
        }
        for (_, b) in ps.buffers() {
            push_f32(&mut buf, b.data());
        }
        let path = dir.join(&file);
        fs::write(&path, &buf).map_err(io_err(&path))?;
        sets.push(SetEntry {
            component,
            file,
            params: entries(ps.iter().map(|(n, p)| (n, &p.value))),
            buffers: entries(ps.buffers()),
        });
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT,
        method: trained.method,
        architecture: arch.clone(),
        seed,
        step: trained.steps,
        sets,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: TrainedModel,
}

fn fill_set(dir: &Path, entry: &SetEntry, target: &mut ParamSet) -> Result<()> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let mut cur = Cursor { bytes: &bytes, at: 0, path: &path };
    let expected = entries(target.iter().map(|(n, p)| (n, &p.value)));
    let expected_buffers = entries(target.buffers());
    if expected != entry.params || expected_buffers != entry.buffers {
        return Err(LabError::Compatibility(format!(
            "component {} in {} does not match its architecture",
            entry.component,
            dir.display()
        )));
    }
    for e in &entry.params {
        let n = e.shape.iter().product();
        *target.get_mut(&e.name)? = Tensor::new(e.shape.clone(), cur.f32s(n)?)?;
    }
    for e in &entry.buffers {
        let n = e.shape.iter().product();
        *target.buffer_mut(&e.name)? = Tensor::new(e.shape.clone(), cur.f32s(n)?)?;
    }
    cur.finish()
}

fn read_tensor(dir: &Path, entry: &SetEntry, name: &str) -> Result<Tensor> {
    let e = entry
        .params
        .iter()
        .find(|p| p.name == name)
        .ok_or_else(|| format_err(dir, format!("{} has no {name}", entry.component)))?;
    let mut ps = ParamSet::new();
    ps.insert(name, Tensor::zeros(&e.shape))?;
    fill_set(dir, entry, &mut ps)?;
    Ok(ps.get(name)?.clone())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST);
    let m: CheckpointManifest = read_json(&mpath)?;
    if m.format_version != CHECKPOINT_FORMAT {
        return Err(format_err(&mpath, format!("format {} (expected {CHECKPOINT_FORMAT})", m.format_version)));
    }
    let set = |name: &str| -> Result<&SetEntry> {
        m.sets.iter().find(|s| s.component == name).ok_or_else(|| format_err(&mpath, format!("missing component {name}")))
    };
    let load_trunk = || -> Result<IernModel> {
        let mut model = IernModel::new(m.architecture.clone(), m.seed)?;
        for c in COMPONENTS {
            let target = numcore::Parameterized::param_set_mut(&mut model, c).unwrap();
            fill_set(dir, set(c)?, target)?;
        }
        Ok(model)
    };
    let model = match m.method {
        Method::Baseline | Method::Resample => {
            let mut v = VanillaModel::new(&m.architecture, m.seed)?;
            fill_set(dir, set(BACKBONE)?, &mut v.backbone.params)?;
            fill_set(dir, set(CLASSIFIER)?, &mut v.classifier.params)?;
            TrainedModel::Vanilla(v)
        }
        Method::Disentangle | Method::Iern => {
            let route = if m.method == Method::Iern { ClassifierRoute::Intervened } else { ClassifierRoute::Direct };
            TrainedModel::Iern { model: load_trunk()?, route }
        }
        Method::Nwgm => {
            let trunk = load_trunk()?;
            let dictionary = NwgmDictionary { entries: read_tensor(dir, set(DICTIONARY)?, ENTRIES)? };
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(m.seed, NWGM_HEAD));
            let mut head = NwgmHead::new(dictionary.dim(), m.architecture.n_emotions, &mut rng)?;
            fill_set(dir, set(NWGM_HEAD)?, &mut head.params)?;
            TrainedModel::Nwgm { trunk, head, dictionary }
        }
    };
    Ok(Checkpoint { manifest: m, model })
}

/// Paths of the standard files inside a run directory.
pub fn run_paths(out: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (out.join("checkpoint"), out.join("train_log.jsonl"), out.join("report.json"))
}
