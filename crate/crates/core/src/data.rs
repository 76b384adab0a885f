//! Labeled embedding datasets: on-disk bundles and planted-signal synthetic
//! generation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::EmbeddingFile;
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split `{other}`"))),
        }
    }
}

/// Frozen pre-projection encoding of one image: `T×D_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbeddingSequence {
    tokens: Tensor,
}

impl ImageEmbeddingSequence {
    pub fn new(tokens: Tensor) -> Result<Self> {
        let (t, _) = tokens.dims2()?;
        if t == 0 {
            return Err(Error::EmptyInput("image embedding with zero tokens".into()));
        }
        tokens.ensure_finite("image embedding")?;
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub id: String,
    pub embedding: ImageEmbeddingSequence,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub classes: Vec<String>,
    pub examples: Vec<LabeledExample>,
    pub tokens: usize,
    pub dim: usize,
    /// Per-class prototype vectors in the embedding space (`K×D_in`), when
    /// the bundle carries them.
    pub prototypes: Option<Tensor>,
}

impl LabeledDataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Checks the structural invariants every consumer relies on.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.classes {
            if !seen.insert(c.as_str()) {
                return Err(Error::Label(format!("duplicate class name `{c}`")));
            }
        }
        let mut ids = HashSet::new();
        for ex in &self.examples {
            if ex.label >= self.classes.len() {
                return Err(Error::Label(format!(
                    "example `{}` has label {} but only {} classes",
                    ex.id,
                    ex.label,
                    self.classes.len()
                )));
            }
            if !ids.insert(ex.id.as_str()) {
                return Err(Error::Data(format!("duplicate example id `{}`", ex.id)));
            }
            if ex.embedding.num_tokens() != self.tokens || ex.embedding.dim() != self.dim {
                return Err(Error::shape(
                    "dataset example",
                    &[self.tokens, self.dim],
                    ex.embedding.tokens().shape(),
                ));
            }
        }
        if let Some(p) = &self.prototypes {
            if p.shape() != [self.classes.len(), self.dim] {
                return Err(Error::shape("prototypes", &[self.classes.len(), self.dim], p.shape()));
            }
        }
        Ok(())
    }

    /// Examples of one split, in dataset order.
    pub fn split_view(&self, split: Split) -> Result<Vec<&LabeledExample>> {
        let out: Vec<_> = self.examples.iter().filter(|e| e.split == split).collect();
        if out.is_empty() {
            return Err(Error::EmptySplit(split.to_string()));
        }
        Ok(out)
    }

    pub fn count(&self, split: Split) -> usize {
        self.examples.iter().filter(|e| e.split == split).count()
    }
}

/// File locations of one dataset bundle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetFiles {
    pub embeddings: PathBuf,
    pub labels: PathBuf,
    /// One class name per line; defines class order. Without it the sorted
    /// set of labels is used.
    #[serde(default)]
    pub classes: Option<PathBuf>,
    /// Prototype embeddings (`T = 1`, `N = K`) with a CSV whose `id` column
    /// holds class names.
    #[serde(default)]
    pub prototypes: Option<(PathBuf, PathBuf)>,
}

impl DatasetFiles {
    /// Conventional file names for a bundle called `name` inside `dir`.
    pub fn in_dir(dir: &Path, name: &str) -> Self {
        Self {
            embeddings: dir.join(format!("{name}.mmeb")),
            labels: dir.join(format!("{name}.labels.csv")),
            classes: Some(dir.join(format!("{name}.classes.txt"))),
            prototypes: Some((
                dir.join(format!("{name}.protos.mmeb")),
                dir.join(format!("{name}.protos.csv")),
            )),
        }
    }

    /// Drops optional entries whose files do not exist.
    pub fn existing(mut self) -> Self {
        if self.classes.as_ref().is_some_and(|p| !p.exists()) {
            self.classes = None;
        }
        if self.prototypes.as_ref().is_some_and(|(a, b)| !a.exists() || !b.exists()) {
            self.prototypes = None;
        }
        self
    }
}

#[derive(Debug, Deserialize)]
struct LabelRow {
    id: String,
    label: String,
    #[serde(default)]
    split: Option<String>,
    #[serde(default)]
    index: Option<usize>,
}

fn read_label_rows(path: &Path) -> Result<Vec<LabelRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for rec in reader.deserialize() {
        let row: LabelRow = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        rows.push(row);
    }
    Ok(rows)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn tokens_of(file: &EmbeddingFile, i: usize) -> Result<Tensor> {
    let values = file.example(i).iter().map(|&v| v as f64).collect();
    Tensor::new(vec![file.tokens, file.dim], values)
}

/// Loads a dataset bundle. Rows without a split are assigned by a seeded
/// stratified 80/20 split.
pub fn load_dataset(files: &DatasetFiles, split_seed: u64) -> Result<LabeledDataset> {
    let emb = EmbeddingFile::read(&files.embeddings)?;
    if emb.tokens == 0 {
        return Err(Error::Format {
            offset: 12,
            detail: "T must be at least 1".into(),
        });
    }
    let rows = read_label_rows(&files.labels)?;

    let classes = match &files.classes {
        Some(p) => read_lines(p)?,
        None => {
            let set: std::collections::BTreeSet<_> = rows.iter().map(|r| r.label.clone()).collect();
            set.into_iter().collect()
        }
    };
    let class_index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();

    // map each row to an embedding index, positional unless `index` is given
    let mut unknown = Vec::new();
    for (pos, row) in rows.iter().enumerate() {
        let idx = row.index.unwrap_or(pos);
        if idx >= emb.n {
            unknown.push(row.id.clone());
        }
    }
    if !unknown.is_empty() {
        return Err(Error::Reference { ids: unknown });
    }
    if rows.len() != emb.n {
        return Err(Error::Data(format!(
            "labels file has {} rows but embedding file has {} examples",
            rows.len(),
            emb.n
        )));
    }

    let mut examples = Vec::with_capacity(rows.len());
    let mut missing_split = Vec::new();
    for (pos, row) in rows.iter().enumerate() {
        let label = *class_index
            .get(row.label.as_str())
            .ok_or_else(|| Error::Label(format!("label `{}` of `{}` is not a known class", row.label, row.id)))?;
        let split = match row.split.as_deref().map(str::trim) {
            Some(s) if !s.is_empty() => s.parse()?,
            _ => {
                missing_split.push(pos);
                Split::Train
            }
        };
        examples.push(LabeledExample {
            id: row.id.clone(),
            embedding: ImageEmbeddingSequence::new(tokens_of(&emb, row.index.unwrap_or(pos))?)?,
            label,
            split,
        });
    }
    if !missing_split.is_empty() {
        assign_stratified_split(&mut examples, &missing_split, split_seed, 0.8);
    }

    let prototypes = match &files.prototypes {
        Some((pe, pc)) => Some(load_prototypes(pe, pc, &classes)?),
        None => None,
    };

    let name = files
        .embeddings
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ds = LabeledDataset {
        name,
        classes,
        examples,
        tokens: emb.tokens,
        dim: emb.dim,
        prototypes,
    };
    ds.validate()?;
    Ok(ds)
}

/// Within each class, a seeded shuffle of `positions` sends the first
/// `ceil(frac·n)` to train and the rest to test.
fn assign_stratified_split(examples: &mut [LabeledExample], positions: &[usize], seed: u64, frac: f64) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &p in positions {
        by_class.entry(examples[p].label).or_default().push(p);
    }
    let root = RngState::new(seed).derive_str("stratified-split");
    for (class, mut members) in by_class {
        root.derive(class as u64).generator().shuffle(&mut members);
        let n_train = (frac * members.len() as f64).ceil() as usize;
        for (rank, p) in members.into_iter().enumerate() {
            examples[p].split = if rank < n_train { Split::Train } else { Split::Test };
        }
    }
}

/// Reads prototype vectors and orders their rows to match `classes`.
pub fn load_prototypes(embeddings: &Path, labels: &Path, classes: &[String]) -> Result<Tensor> {
    let emb = EmbeddingFile::read(embeddings)?;
    if emb.tokens != 1 {
        return Err(Error::Format {
            offset: 12,
            detail: format!("prototype file must have T = 1, found {}", emb.tokens),
        });
    }
    let rows = read_label_rows(labels)?;
    if rows.len() != emb.n {
        return Err(Error::Data(format!(
            "prototype CSV has {} rows but file has {}",
            rows.len(),
            emb.n
        )));
    }
    let by_name: HashMap<&str, usize> = rows.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let mut data = Vec::with_capacity(classes.len() * emb.dim);
    let mut missing = Vec::new();
    for c in classes {
        match by_name.get(c.as_str()) {
            Some(&i) => data.extend(emb.example(i).iter().map(|&v| v as f64)),
            None => missing.push(c.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Reference { ids: missing });
    }
    Tensor::new(vec![classes.len(), emb.dim], data)
}

fn write_labels_csv(path: &Path, rows: impl Iterator<Item = (String, String, String)>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let map = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["id", "label", "split"]).map_err(map)?;
    for (id, label, split) in rows {
        w.write_record([id, label, split]).map_err(map)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `ds` in bundle form. Values are stored as f32.
pub fn save_dataset(ds: &LabeledDataset, files: &DatasetFiles) -> Result<()> {
    let mut values = Vec::with_capacity(ds.examples.len() * ds.tokens * ds.dim);
    for ex in &ds.examples {
        values.extend(ex.embedding.tokens().data().iter().map(|&v| v as f32));
    }
    EmbeddingFile {
        n: ds.examples.len(),
        tokens: ds.tokens,
        dim: ds.dim,
        values,
    }
    .write(&files.embeddings)?;
    write_labels_csv(
        &files.labels,
        ds.examples
            .iter()
            .map(|e| (e.id.clone(), ds.classes[e.label].clone(), e.split.to_string())),
    )?;
    if let Some(p) = &files.classes {
        let mut text = ds.classes.join("\n");
        text.push('\n');
        std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    if let (Some((pe, pc)), Some(protos)) = (&files.prototypes, &ds.prototypes) {
        EmbeddingFile {
            n: ds.classes.len(),
            tokens: 1,
            dim: ds.dim,
            values: protos.data().iter().map(|&v| v as f32).collect(),
        }
        .write(pe)?;
        write_labels_csv(
            pc,
            ds.classes.iter().map(|c| (c.clone(), c.clone(), String::new())),
        )?;
    }
    Ok(())
}

/// Parameters of a planted-signal dataset: class `c` has tokens
/// `μ_c + N(0, σ²)` with `μ_c ~ mean_scale · N(0, I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub tokens: usize,
    pub dim: usize,
    pub mean_scale: f64,
    pub noise_std: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 5,
            tokens: 4,
            dim: 32,
            mean_scale: 1.0,
            noise_std: 4.0,
            train_per_class: 300,
            test_per_class: 40,
            seed: 17,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Parameter("synthetic data needs at least 2 classes".into()));
        }
        if self.tokens == 0 || self.dim == 0 {
            return Err(Error::Parameter("tokens and dim must be at least 1".into()));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::Parameter(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if !self.mean_scale.is_finite() {
            return Err(Error::Parameter("mean_scale must be finite".into()));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.classes).map(|c| format!("class{c}")).collect()
    }
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let root = RngState::new(spec.seed);
    let mut mean_rng = root.derive_str("class-means").generator();
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..spec.dim).map(|_| round_f32(spec.mean_scale * mean_rng.normal())).collect())
        .collect();

    let mut examples = Vec::new();
    for (split, per_class) in [(Split::Train, spec.train_per_class), (Split::Test, spec.test_per_class)] {
        let mut noise = root.derive_str(&format!("noise-{split}")).generator();
        for i in 0..per_class {
            for (c, mean) in means.iter().enumerate() {
                let mut data = Vec::with_capacity(spec.tokens * spec.dim);
                for _ in 0..spec.tokens {
                    for &m in mean {
                        let eps = if spec.noise_std > 0.0 { spec.noise_std * noise.normal() } else { 0.0 };
                        data.push(round_f32(m + eps));
                    }
                }
                examples.push(LabeledExample {
                    id: format!("{split}-{c}-{i}"),
                    embedding: ImageEmbeddingSequence::new(Tensor::new(vec![spec.tokens, spec.dim], data)?)?,
                    label: c,
                    split,
                });
            }
        }
    }
    let prototypes = Tensor::new(vec![spec.classes, spec.dim], means.concat())?;
    Ok(LabeledDataset {
        name: "synthetic".into(),
        classes: spec.class_names(),
        examples,
        tokens: spec.tokens,
        dim: spec.dim,
        prototypes: Some(prototypes),
    })
}
