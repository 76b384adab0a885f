//! Whole-study runs through `run_experiment`.

use std::path::Path;
use std::time::Instant;

use mmprobe::data::SyntheticSpec;
use mmprobe::experiment::{run_experiment, DataSource, ExperimentConfig, LmDims, Stage};
use mmprobe::projection::ProjectionDims;
use mmprobe::report::{RichnessReport, Setting};

use super::{ensure, lib, Outcome};

pub const BUDGET_SECS: f64 = 300.0;

/// A few-second study: tiny model, little data, one epoch everywhere.
pub fn tiny_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        data: DataSource::Synthetic(SyntheticSpec {
            train_per_class: 12,
            test_per_class: 6,
            ..SyntheticSpec::default()
        }),
        projection: ProjectionDims {
            d_in: 32,
            d_hidden: 16,
            d_lm: 16,
        },
        lm: LmDims {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_len: 64,
        },
        baseline_trials: 50,
        out_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    cfg.warmup.per_class = 6;
    cfg.warmup.train.epochs = 1;
    cfg.ft_proj.epochs = 1;
    cfg.ft_e2e.epochs = 1;
    cfg.probe.max_epochs = 20;
    cfg
}

pub fn row(report: &RichnessReport, s: Setting) -> Result<&mmprobe::report::ReportRow, String> {
    report.rows.iter().find(|r| r.setting == s).ok_or_else(|| format!("report has no {s} row"))
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

/// The default study: timing and the three MLLM-score conditions.
pub fn desk_scale(out: &Path) -> Outcome {
    let cfg = ExperimentConfig {
        out_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    let started = Instant::now();
    let outcome = lib(run_experiment(&cfg))?;
    let secs = started.elapsed().as_secs_f64();
    let report = outcome.report.ok_or("no report produced")?;
    let orig = row(&report, Setting::Original)?.mllm_f1;
    let proj = row(&report, Setting::FtProj)?.mllm_f1;
    let e2e = row(&report, Setting::FtE2e)?.mllm_f1;
    let detail = format!("Original {orig:.4}, FT-Proj {proj:.4}, FT-E2E {e2e:.4} in {secs:.0}s");
    ensure(secs < BUDGET_SECS, || format!("{detail}: over the {BUDGET_SECS}s budget"))?;
    ensure(orig < 0.5, || format!("{detail}: Original not below 0.5"))?;
    ensure(e2e >= 0.8, || format!("{detail}: FT-E2E below 0.8"))?;
    ensure(proj > orig, || format!("{detail}: FT-Proj not above Original"))?;
    Ok(detail)
}

pub const REPORT_FILES: [&str; 2] = ["report.json", "report.txt"];

/// Two runs of one config into separate directories, then a report-only
/// rerun of the first.
pub fn determinism(a: &Path, b: &Path) -> Outcome {
    lib(run_experiment(&tiny_config(a)))?;
    lib(run_experiment(&tiny_config(b)))?;
    let first: Vec<Vec<u8>> = REPORT_FILES.iter().map(|f| read(&a.join(f))).collect::<Result<_, _>>()?;
    for (f, bytes) in REPORT_FILES.iter().zip(&first) {
        ensure(read(&b.join(f))? == *bytes, || format!("{f} differs between runs"))?;
    }
    let mut rerun = tiny_config(a);
    rerun.stages = vec![Stage::Report];
    lib(run_experiment(&rerun))?;
    for (f, bytes) in REPORT_FILES.iter().zip(&first) {
        ensure(read(&a.join(f))? == *bytes, || format!("{f} changed on report-only rerun"))?;
    }
    Ok("repeated runs and a report-only rerun give byte-identical reports".into())
}
