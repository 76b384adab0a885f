//! Probe sanity on planted features, and architecture parity.

use std::path::Path;

use mmprobe::data::{generate_synthetic, LabeledDataset, Split, SyntheticSpec};
use mmprobe::experiment::{seed_dir, ProbeSummary};
use mmprobe::optim::Module;
use mmprobe::probe::{probe_richness, train_probe, ProbeArchitecture, ProbeConfig, ProbeModel, IMAGE_ONLY_HIDDEN};
use mmprobe::report::Setting;
use mmprobe::rng::RngState;
use mmprobe::zeroshot::random_baseline_for;

use super::{ensure, lib, Outcome};

pub const BASELINE_TRIALS: usize = 10_000;
pub const PRESET_PARAMS: usize = 13_715_791;

/// The default planted layout with less noise, so the pooled classes are
/// close to perfectly separable.
pub fn easy_spec() -> SyntheticSpec {
    SyntheticSpec {
        noise_std: 1.0,
        ..SyntheticSpec::default()
    }
}

pub fn shuffled_labels(ds: &LabeledDataset, seed: u64) -> LabeledDataset {
    let mut out = ds.clone();
    let mut labels: Vec<usize> = out.examples.iter().map(|e| e.label).collect();
    RngState::new(seed).derive_str("label-shuffle").generator().shuffle(&mut labels);
    for (e, l) in out.examples.iter_mut().zip(labels) {
        e.label = l;
    }
    out
}

pub fn planted_f1() -> Result<f64, String> {
    let ds = lib(generate_synthetic(&easy_spec()))?;
    let model = lib(train_probe(&ds, &ProbeConfig::default(), "planted"))?;
    Ok(lib(probe_richness(&model, &ds, Split::Test))?.macro_f1)
}

/// `(probe macro-F1, baseline mean, baseline std)` on shuffled labels.
pub fn shuffled_vs_baseline() -> Result<(f64, f64, f64), String> {
    let ds = shuffled_labels(&lib(generate_synthetic(&easy_spec()))?, 0);
    let model = lib(train_probe(&ds, &ProbeConfig::default(), "shuffled"))?;
    let f1 = lib(probe_richness(&model, &ds, Split::Test))?.macro_f1;
    let gold: Vec<usize> = lib(ds.split_view(Split::Test))?.iter().map(|e| e.label).collect();
    let base = lib(random_baseline_for(&gold, ds.num_classes(), 0, BASELINE_TRIALS))?;
    Ok((f1, base.macro_f1_mean, base.macro_f1_std))
}

pub fn sanity() -> Outcome {
    let f1 = planted_f1()?;
    ensure(f1 >= 0.95, || format!("planted probe macro-F1 {f1:.4} < 0.95"))?;
    let (s, mean, std) = shuffled_vs_baseline()?;
    let z = (s - mean).abs() / std;
    ensure(z <= 3.0, || format!("shuffled macro-F1 {s:.4} is {z:.2}σ from baseline {mean:.4}±{std:.4}"))?;
    Ok(format!("planted {f1:.4}; shuffled {s:.4} vs baseline {mean:.4}±{std:.4} ({z:.2}σ)"))
}

/// Σ(in·out + out) over the reference ladder, written out by hand.
pub fn preset_oracle() -> usize {
    let widths = [1024, 2000, 3600, 1024, 600, 256, 23];
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

pub fn preset_count() -> Result<usize, String> {
    let arch = ProbeArchitecture::new(1024, &IMAGE_ONLY_HIDDEN, 23);
    let model = ProbeModel::init(arch.clone(), RngState::new(0));
    ensure(model.num_params() == arch.param_count(), || {
        format!("model holds {} params, architecture says {}", model.num_params(), arch.param_count())
    })?;
    Ok(model.num_params())
}

/// Parameter counts of the per-setting probes persisted by a run.
pub fn run_counts(out: &Path, seed: u64) -> Result<Vec<usize>, String> {
    let dir = seed_dir(out, seed).join("probes");
    Setting::ALL
        .iter()
        .map(|s| {
            let path = dir.join(format!("{}.json", s.slug()));
            let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            let summary: ProbeSummary = serde_json::from_str(&text).map_err(|e| e.to_string())?;
            Ok(summary.param_count)
        })
        .collect()
}

pub fn parity(out: &Path, seed: u64) -> Outcome {
    let counts = run_counts(out, seed)?;
    ensure(counts.windows(2).all(|w| w[0] == w[1]), || format!("per-setting counts differ: {counts:?}"))?;
    let oracle = preset_oracle();
    ensure(oracle == PRESET_PARAMS, || format!("hand sum {oracle} != {PRESET_PARAMS}"))?;
    let preset = preset_count()?;
    ensure(preset == PRESET_PARAMS, || format!("preset reports {preset}, want {PRESET_PARAMS}"))?;
    Ok(format!("three probes with {} params each; preset {preset}", counts[0]))
}
