//! The full study as a staged pipeline: zero-shot baselines, the Original
//! model, both fine-tuning regimes, one probe per setting, then the report.
//!
//! Every stage persists its outputs under the run directory so later
//! stages (probes and the report in particular) can be rerun alone.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_module, save_module};
use crate::data::{generate_synthetic, load_dataset, save_dataset, DatasetFiles, LabeledDataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::finetune::{evaluate_mllm, finetune_observed, FinetuneConfig, MllmEvaluation, Regime, Task, TrainLog};
use crate::lm::{LmConfig, LmParams};
use crate::metrics::ClassificationResult;
use crate::optim::Module;
use crate::probe::{extract_post_projection, probe_richness, train_probe, ProbeConfig, Provenance};
use crate::projection::{ProjectionDims, ProjectionParams};
use crate::report::{emit_report, RichnessReport, Setting, SettingScores};
use crate::rng::RngState;
use crate::zeroshot::{evaluate_cosine, random_uniform_baseline, LabelPrototypes, RandomBaseline};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Zeroshot,
    Original,
    FtProj,
    FtE2e,
    Probe,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Zeroshot,
        Stage::Original,
        Stage::FtProj,
        Stage::FtE2e,
        Stage::Probe,
        Stage::Report,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Zeroshot => "zeroshot",
            Stage::Original => "original",
            Stage::FtProj => "ft-proj",
            Stage::FtE2e => "ft-e2e",
            Stage::Probe => "probe",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Parses `all` or a comma-separated stage list.
pub fn parse_stages(s: &str) -> Result<Vec<Stage>> {
    if s.trim() == "all" {
        return Ok(Stage::ALL.to_vec());
    }
    let mut stages = s.split(',').map(Stage::from_str).collect::<Result<Vec<_>>>()?;
    stages.sort();
    stages.dedup();
    Ok(stages)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Files(DatasetFiles),
}

/// LM shape; the vocabulary size follows from the task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmDims {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl Default for LmDims {
    fn default() -> Self {
        let c = LmConfig::desk_scale(1);
        Self {
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            max_len: c.max_len,
        }
    }
}

impl LmDims {
    pub fn with_vocab(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_len: self.max_len,
        }
    }
}

/// Generic pre-training that turns the initialized model into the Original
/// one: end-to-end training on a planted domain whose class means are
/// unrelated to the task's, labeled with the task's class names. The model
/// learns the answer format and to read image tokens, but not the task's
/// image-to-label mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarmupConfig {
    pub enabled: bool,
    pub data_seed: u64,
    pub mean_scale: f64,
    pub noise_std: f64,
    pub per_class: usize,
    pub train: FinetuneConfig,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            data_seed: 1_000_003,
            mean_scale: 1.0,
            noise_std: 3.0,
            per_class: 100,
            train: FinetuneConfig {
                regime: Regime::EndToEnd,
                epochs: 8,
                lr: 2e-3,
                ..FinetuneConfig::default()
            },
        }
    }
}

impl WarmupConfig {
    /// The generic domain, shaped like `target` and carrying its class names.
    pub fn dataset(&self, target: &LabeledDataset) -> Result<LabeledDataset> {
        let mut ds = generate_synthetic(&SyntheticSpec {
            classes: target.num_classes(),
            tokens: target.tokens,
            dim: target.dim,
            mean_scale: self.mean_scale,
            noise_std: self.noise_std,
            train_per_class: self.per_class,
            test_per_class: 0,
            seed: self.data_seed,
        })?;
        ds.name = "warmup".into();
        ds.classes = target.classes.clone();
        ds.prototypes = None;
        Ok(ds)
    }
}

/// Everything needed to rerun the study. The `regime` fields of the two
/// fine-tuning configs are forced to match their slot; their `seed` fields,
/// like the probe's, are salts mixed with each run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub task: String,
    pub data: DataSource,
    /// Seed for the stratified split when label rows carry none.
    pub split_seed: u64,
    pub projection: ProjectionDims,
    pub lm: LmDims,
    pub warmup: WarmupConfig,
    pub ft_proj: FinetuneConfig,
    pub ft_e2e: FinetuneConfig,
    pub probe: ProbeConfig,
    pub seeds: Vec<u64>,
    pub max_new_tokens: usize,
    pub baseline_trials: usize,
    /// Directory with `original-proj` / `original-lm` checkpoints to use
    /// instead of a fresh initialization.
    pub init_from: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub stages: Vec<Stage>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let tuned = |regime| FinetuneConfig {
            regime,
            epochs: 8,
            lr: 1e-3,
            batch_size: 8,
            seed: 0,
            shuffle_class_order: true,
        };
        Self {
            task: "planted patterns".into(),
            data: DataSource::Synthetic(SyntheticSpec::default()),
            split_seed: 0,
            projection: ProjectionDims::default(),
            lm: LmDims::default(),
            warmup: WarmupConfig::default(),
            ft_proj: tuned(Regime::ProjOnly),
            ft_e2e: tuned(Regime::EndToEnd),
            probe: ProbeConfig {
                lr: 1e-3,
                ..ProbeConfig::default()
            },
            seeds: vec![0],
            max_new_tokens: crate::finetune::DEFAULT_MAX_NEW_TOKENS,
            baseline_trials: 1000,
            init_from: None,
            out_dir: PathBuf::from("runs/default"),
            stages: Stage::ALL.to_vec(),
        }
    }
}

/// Fields that do not influence any result and are left out of the
/// fingerprint.
#[derive(Serialize)]
struct Fingerprinted<'a> {
    task: &'a str,
    data: &'a DataSource,
    split_seed: u64,
    projection: &'a ProjectionDims,
    lm: &'a LmDims,
    warmup: &'a WarmupConfig,
    ft_proj: &'a FinetuneConfig,
    ft_e2e: &'a FinetuneConfig,
    probe: &'a ProbeConfig,
    seeds: &'a [u64],
    max_new_tokens: usize,
    baseline_trials: usize,
    init_from: &'a Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses a config file. Keys it leaves out, including keys inside
    /// tables it does mention, keep the values of [`ExperimentConfig::default`].
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let to_config = |e: &dyn fmt::Display| Error::Config(e.to_string());
        let user: toml::Table = toml::from_str(text).map_err(|e| to_config(&e))?;
        let mut merged = toml::Table::try_from(Self::default()).map_err(|e| to_config(&e))?;
        if let Some(toml::Value::Table(data)) = user.get("data") {
            if data.get("source") != merged["data"].get("source") {
                merged.remove("data");
            }
        }
        merge_tables(&mut merged, user);
        let mut cfg: Self = merged.try_into().map_err(|e| to_config(&e))?;
        cfg.normalize();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Forces each fine-tuning slot to its regime and sorts the stages.
    pub fn normalize(&mut self) {
        self.warmup.train.regime = Regime::EndToEnd;
        self.ft_proj.regime = Regime::ProjOnly;
        self.ft_e2e.regime = Regime::EndToEnd;
        self.stages.sort();
        self.stages.dedup();
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut uniq = self.seeds.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.ft_proj.regime != Regime::ProjOnly || self.ft_e2e.regime != Regime::EndToEnd {
            return Err(Error::Config("fine-tuning slots must keep their regimes".into()));
        }
        self.warmup.train.validate()?;
        if self.warmup.enabled && self.warmup.per_class == 0 {
            return Err(Error::Config("warmup.per_class must be at least 1".into()));
        }
        self.ft_proj.validate()?;
        self.ft_e2e.validate()?;
        self.probe.validate()?;
        if self.baseline_trials == 0 {
            return Err(Error::Config("baseline_trials must be at least 1".into()));
        }
        if self.task.trim().is_empty() {
            return Err(Error::Config("task name is empty".into()));
        }
        match &self.data {
            DataSource::Synthetic(spec) => {
                spec.validate()?;
                if spec.dim != self.projection.d_in {
                    return Err(Error::Config(format!(
                        "synthetic dim {} differs from projection d_in {}",
                        spec.dim, self.projection.d_in
                    )));
                }
            }
            DataSource::Files(files) => {
                let mut paths = vec![&files.embeddings, &files.labels];
                paths.extend(files.classes.as_ref());
                if let Some((a, b)) = &files.prototypes {
                    paths.extend([a, b]);
                }
                for p in paths {
                    if !p.exists() {
                        return Err(Error::Config(format!("{} does not exist", p.display())));
                    }
                }
            }
        }
        if let Some(dir) = &self.init_from {
            if !dir.is_dir() {
                return Err(Error::Config(format!("{} is not a directory", dir.display())));
            }
        }
        Ok(())
    }

    /// sha256 over the canonical (sorted-key, compact) JSON form of every
    /// result-relevant field.
    pub fn fingerprint(&self) -> Result<String> {
        let view = Fingerprinted {
            task: &self.task,
            data: &self.data,
            split_seed: self.split_seed,
            projection: &self.projection,
            lm: &self.lm,
            warmup: &self.warmup,
            ft_proj: &self.ft_proj,
            ft_e2e: &self.ft_e2e,
            probe: &self.probe,
            seeds: &self.seeds,
            max_new_tokens: self.max_new_tokens,
            baseline_trials: self.baseline_trials,
            init_from: &self.init_from,
        };
        let canonical = serde_json::to_value(&view)?.to_string();
        Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

pub fn load_source(cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    match &cfg.data {
        DataSource::Synthetic(spec) => generate_synthetic(spec),
        DataSource::Files(files) => load_dataset(files, cfg.split_seed),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotSummary {
    /// Absent when the dataset has no label prototypes.
    pub cosine: Option<ClassificationResult>,
    pub random: RandomBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHashes {
    pub proj: String,
    pub lm: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub setting: Setting,
    pub param_count: usize,
    pub provenance: Provenance,
    pub result: ClassificationResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub out_dir: PathBuf,
    pub report: Option<RichnessReport>,
    pub scores: Option<Vec<SettingScores>>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Paths inside one seed's directory.
struct SeedDir(PathBuf);

impl SeedDir {
    fn checkpoints(&self) -> PathBuf {
        self.0.join("checkpoints")
    }
    fn hashes(&self, s: Setting) -> PathBuf {
        self.checkpoints().join(format!("{}.hashes.json", s.slug()))
    }
    fn eval(&self, s: Setting) -> PathBuf {
        self.0.join("eval").join(format!("{}.json", s.slug()))
    }
    fn log(&self, s: Setting, ext: &str) -> PathBuf {
        self.0.join("logs").join(format!("{}.{ext}", s.slug()))
    }
    fn features(&self) -> PathBuf {
        self.0.join("features")
    }
    fn probe(&self, s: Setting) -> PathBuf {
        self.0.join("probes").join(format!("{}.json", s.slug()))
    }
    fn zeroshot(&self) -> PathBuf {
        self.0.join("zeroshot.json")
    }
}

struct SeedRun<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    root: RngState,
    dir: SeedDir,
    ds: &'a LabeledDataset,
    task: &'a Task,
}

impl SeedRun<'_> {
    fn lm_config(&self) -> LmConfig {
        self.cfg.lm.with_vocab(self.task.vocab.len())
    }

    fn blank_models(&self) -> Result<(ProjectionParams, LmParams)> {
        Ok((
            ProjectionParams::init(self.cfg.projection, self.root.derive_str("init-proj"))?,
            LmParams::init(self.lm_config(), self.root.derive_str("init-lm"))?,
        ))
    }

    fn save_models(&self, s: Setting, proj: &ProjectionParams, lm: &LmParams) -> Result<()> {
        let dir = self.dir.checkpoints();
        save_module(proj, &dir, &format!("{}-proj", s.slug()))?;
        save_module(lm, &dir, &format!("{}-lm", s.slug()))?;
        write_json(
            &self.dir.hashes(s),
            &ModelHashes {
                proj: proj.param_hash(),
                lm: lm.param_hash(),
            },
        )
    }

    fn load_models(&self, dir: &Path, s: Setting) -> Result<(ProjectionParams, LmParams)> {
        let (mut proj, mut lm) = self.blank_models()?;
        load_module(&mut proj, dir, &format!("{}-proj", s.slug()))?;
        load_module(&mut lm, dir, &format!("{}-lm", s.slug()))?;
        Ok((proj, lm))
    }

    /// Original checkpoint from this run, verified against its recorded
    /// hashes.
    fn original(&self) -> Result<(ProjectionParams, LmParams)> {
        let (proj, lm) = self.load_models(&self.dir.checkpoints(), Setting::Original)?;
        let want: ModelHashes = read_json(&self.dir.hashes(Setting::Original))?;
        if proj.param_hash() != want.proj || lm.param_hash() != want.lm {
            return Err(Error::Contract("Original checkpoint does not match its recorded hashes".into()));
        }
        Ok((proj, lm))
    }

    fn eval_seed(&self) -> u64 {
        self.root.derive_str("eval").seed
    }

    fn evaluate(&self, s: Setting, proj: &ProjectionParams, lm: &LmParams) -> Result<MllmEvaluation> {
        let eval = evaluate_mllm(
            proj,
            lm,
            self.ds,
            self.task,
            Split::Test,
            self.eval_seed(),
            self.cfg.max_new_tokens,
        )?;
        write_json(&self.dir.eval(s), &eval)?;
        Ok(eval)
    }

    fn zeroshot(&self) -> Result<()> {
        let cosine = match &self.ds.prototypes {
            Some(m) => Some(evaluate_cosine(self.ds, &LabelPrototypes::new(m.clone())?, Split::Test)?),
            None => None,
        };
        let random = random_uniform_baseline(
            self.ds,
            self.root.derive_str("random-baseline").seed,
            self.cfg.baseline_trials,
        )?;
        write_json(&self.dir.zeroshot(), &ZeroShotSummary { cosine, random })
    }

    fn original_stage(&self) -> Result<()> {
        let (proj, lm) = match &self.cfg.init_from {
            Some(dir) => self.load_models(dir, Setting::Original)?,
            None if self.cfg.warmup.enabled => self.warmup()?,
            None => self.blank_models()?,
        };
        self.save_models(Setting::Original, &proj, &lm)?;
        self.evaluate(Setting::Original, &proj, &lm)?;
        Ok(())
    }

    fn warmup(&self) -> Result<(ProjectionParams, LmParams)> {
        let (proj, lm) = self.blank_models()?;
        let w = &self.cfg.warmup;
        let data = w.dataset(self.ds)?;
        let cfg = FinetuneConfig {
            seed: self.root.derive_str("warmup").derive(w.train.seed).seed,
            ..w.train.clone()
        };
        let jsonl = self.dir.0.join("logs").join("warmup.jsonl");
        let (proj, lm, log) = self.train_logged(&proj, &lm, &data, &cfg, &jsonl)?;
        write_json(&jsonl.with_file_name("warmup.summary.json"), &LogSummary::from(&log))?;
        Ok((proj, lm))
    }

    fn train_logged(
        &self,
        proj: &ProjectionParams,
        lm: &LmParams,
        data: &LabeledDataset,
        cfg: &FinetuneConfig,
        jsonl: &Path,
    ) -> Result<(ProjectionParams, LmParams, TrainLog)> {
        std::fs::create_dir_all(jsonl.parent().unwrap()).map_err(|e| Error::io(jsonl, e))?;
        let mut sink = std::fs::File::create(jsonl).map_err(|e| Error::io(jsonl, e))?;
        finetune_observed(proj, lm, data, self.task, cfg, |rec| {
            let line = serde_json::to_string(rec)?;
            writeln!(sink, "{line}").map_err(|e| Error::io(jsonl, e))
        })
    }

    fn finetune_stage(&self, s: Setting) -> Result<()> {
        let (base_cfg, salt) = match s {
            Setting::FtProj => (&self.cfg.ft_proj, "ft-proj"),
            Setting::FtE2e => (&self.cfg.ft_e2e, "ft-e2e"),
            Setting::Original => unreachable!("Original is not fine-tuned"),
        };
        let cfg = FinetuneConfig {
            seed: self.root.derive_str(salt).derive(base_cfg.seed).seed,
            ..base_cfg.clone()
        };
        let (proj0, lm0) = self.original()?;
        let (proj, lm, log) = self.train_logged(&proj0, &lm0, self.ds, &cfg, &self.dir.log(s, "jsonl"))?;
        check_branch(&log, &proj0, &lm0, cfg.regime)?;
        write_json(&self.dir.log(s, "summary.json"), &LogSummary::from(&log))?;
        self.save_models(s, &proj, &lm)?;
        self.evaluate(s, &proj, &lm)?;
        Ok(())
    }

    fn probe_stage(&self) -> Result<()> {
        let cfg = ProbeConfig {
            seed: self.root.derive_str("probe").derive(self.cfg.probe.seed).seed,
            ..self.cfg.probe.clone()
        };
        let features_dir = self.dir.features();
        std::fs::create_dir_all(&features_dir).map_err(|e| Error::io(&features_dir, e))?;
        for s in Setting::ALL {
            let (proj, _) = self.load_models(&self.dir.checkpoints(), s)?;
            let extracted = extract_post_projection(&proj, self.ds)?;
            // The probe sees the features exactly as persisted (f32), so a
            // probe-only rerun from disk gives the same result.
            let files = features_files(&features_dir, s);
            save_dataset(&extracted, &files)?;
            let features = load_dataset(&files, self.cfg.split_seed)?;
            let model = train_probe(&features, &cfg, s.as_str())?;
            let result = probe_richness(&model, &features, Split::Test)?;
            save_module(&model, &self.dir.0.join("probes"), s.slug())?;
            write_json(
                &self.dir.probe(s),
                &ProbeSummary {
                    setting: s,
                    param_count: model.num_params(),
                    provenance: model.provenance.clone(),
                    result,
                },
            )?;
        }
        Ok(())
    }
}

fn features_files(dir: &Path, s: Setting) -> DatasetFiles {
    DatasetFiles {
        classes: Some(dir.join(format!("{}.classes.txt", s.slug()))),
        prototypes: None,
        ..DatasetFiles::in_dir(dir, s.slug())
    }
}

/// Train log without the per-step records (those go to the JSONL file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogSummary {
    pub steps: usize,
    pub epoch_mean_loss: Vec<f64>,
    pub wall_seconds: f64,
    pub lm_hash_before: String,
    pub lm_hash_after: String,
    pub proj_hash_before: String,
    pub proj_hash_after: String,
}

impl From<&TrainLog> for LogSummary {
    fn from(log: &TrainLog) -> Self {
        Self {
            steps: log.steps.len(),
            epoch_mean_loss: log.epoch_mean_loss.clone(),
            wall_seconds: log.wall_seconds,
            lm_hash_before: log.lm_hash_before.clone(),
            lm_hash_after: log.lm_hash_after.clone(),
            proj_hash_before: log.proj_hash_before.clone(),
            proj_hash_after: log.proj_hash_after.clone(),
        }
    }
}

fn check_branch(log: &TrainLog, proj0: &ProjectionParams, lm0: &LmParams, regime: Regime) -> Result<()> {
    if log.proj_hash_before != proj0.param_hash() || log.lm_hash_before != lm0.param_hash() {
        return Err(Error::Contract("fine-tuning did not start from the Original checkpoint".into()));
    }
    if regime == Regime::ProjOnly && log.lm_hash_after != log.lm_hash_before {
        return Err(Error::Contract("projection-only fine-tuning changed the LM".into()));
    }
    Ok(())
}

fn in_stage<T>(stage: Stage, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: stage.as_str().into(),
        source: Box::new(e),
    })
}

/// Collects per-seed scores from the persisted evaluation and probe files.
pub fn collect_scores(out_dir: &Path, seeds: &[u64]) -> Result<Vec<SettingScores>> {
    let mut scores: Vec<SettingScores> = Setting::ALL
        .iter()
        .map(|&setting| SettingScores {
            setting,
            probe_f1: Vec::new(),
            mllm_f1: Vec::new(),
            mllm_acc: Vec::new(),
        })
        .collect();
    for &seed in seeds {
        let dir = SeedDir(seed_dir(out_dir, seed));
        let mut counts = Vec::new();
        for entry in &mut scores {
            let eval: MllmEvaluation = read_json(&dir.eval(entry.setting))?;
            let probe: ProbeSummary = read_json(&dir.probe(entry.setting))?;
            counts.push(probe.param_count);
            entry.probe_f1.push(probe.result.macro_f1);
            entry.mllm_f1.push(eval.result.macro_f1);
            entry.mllm_acc.push(eval.result.accuracy);
        }
        if counts.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::Contract(format!("probe parameter counts differ across settings: {counts:?}")));
        }
    }
    Ok(scores)
}

pub fn seed_dir(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("seed-{seed}"))
}

/// Builds and writes the report from persisted artifacts only.
pub fn report_stage(cfg: &ExperimentConfig) -> Result<(RichnessReport, Vec<SettingScores>)> {
    let scores = collect_scores(&cfg.out_dir, &cfg.seeds)?;
    let report = RichnessReport::build(&cfg.task, &cfg.seeds, &scores, &cfg.fingerprint()?)?;
    emit_report(&report, Some(&scores), &cfg.out_dir)?;
    write_json(&cfg.out_dir.join("scores.json"), &scores)?;
    Ok((report, scores))
}

/// Runs the configured stages in order. Failures are reported as
/// [`Error::Stage`] naming the stage; artifacts written so far stay on disk.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let mut cfg = cfg.clone();
    cfg.normalize();
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let resolved = out.join("config.resolved.toml");
    std::fs::write(&resolved, cfg.to_toml()?).map_err(|e| Error::io(&resolved, e))?;
    let fp = out.join("fingerprint.txt");
    std::fs::write(&fp, format!("{}\n", cfg.fingerprint()?)).map_err(|e| Error::io(&fp, e))?;

    let model_stages: Vec<Stage> = cfg.stages.iter().copied().filter(|&s| s != Stage::Report).collect();
    if !model_stages.is_empty() {
        let ds = in_stage(model_stages[0], load_source(&cfg))?;
        if ds.dim != cfg.projection.d_in {
            return in_stage(
                model_stages[0],
                Err(Error::Config(format!(
                    "embedding dim {} differs from projection d_in {}",
                    ds.dim, cfg.projection.d_in
                ))),
            );
        }
        let task = in_stage(model_stages[0], Task::new(&cfg.task, &ds.classes))?;
        let vocab_path = out.join("vocab.txt");
        task.vocab.write(&vocab_path)?;
        for &seed in &cfg.seeds {
            let run = SeedRun {
                cfg: &cfg,
                seed,
                root: RngState::new(seed),
                dir: SeedDir(seed_dir(&out, seed)),
                ds: &ds,
                task: &task,
            };
            debug_assert_eq!(run.root.seed, run.seed);
            for &stage in &model_stages {
                let r = match stage {
                    Stage::Zeroshot => run.zeroshot(),
                    Stage::Original => run.original_stage(),
                    Stage::FtProj => run.finetune_stage(Setting::FtProj),
                    Stage::FtE2e => run.finetune_stage(Setting::FtE2e),
                    Stage::Probe => run.probe_stage(),
                    Stage::Report => unreachable!(),
                };
                in_stage(stage, r)?;
            }
        }
    }

    if cfg.stages.contains(&Stage::Report) {
        let (report, scores) = in_stage(Stage::Report, report_stage(&cfg))?;
        return Ok(ExperimentOutcome {
            out_dir: out,
            report: Some(report),
            scores: Some(scores),
        });
    }
    Ok(ExperimentOutcome {
        out_dir: out,
        report: None,
        scores: None,
    })
}
