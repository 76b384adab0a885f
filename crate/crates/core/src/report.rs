//! Richness report: probe F1 and MLLM F1/accuracy per fine-tuning setting,
//! with percent deltas against the `Original` row.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{format_percent, mean_std, percent_change};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setting {
    #[serde(rename = "Original")]
    Original,
    #[serde(rename = "FT-Proj")]
    FtProj,
    #[serde(rename = "FT-E2E")]
    FtE2e,
}

impl Setting {
    pub const ALL: [Setting; 3] = [Setting::Original, Setting::FtProj, Setting::FtE2e];

    pub fn as_str(&self) -> &'static str {
        match self {
            Setting::Original => "Original",
            Setting::FtProj => "FT-Proj",
            Setting::FtE2e => "FT-E2E",
        }
    }

    /// Lowercase form used in file names.
    pub fn slug(&self) -> &'static str {
        match self {
            Setting::Original => "original",
            Setting::FtProj => "ft-proj",
            Setting::FtE2e => "ft-e2e",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Setting::ALL
            .into_iter()
            .find(|x| x.as_str().eq_ignore_ascii_case(s) || x.slug() == s)
            .ok_or_else(|| Error::Config(format!("unknown setting `{s}`")))
    }
}

/// Scores of one setting, one entry per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingScores {
    pub setting: Setting,
    pub probe_f1: Vec<f64>,
    pub mllm_f1: Vec<f64>,
    pub mllm_acc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub setting: Setting,
    pub probe_f1: f64,
    pub mllm_f1: f64,
    pub mllm_acc: f64,
    pub delta_probe_pct: Option<f64>,
    pub delta_mllm_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RichnessReport {
    pub task: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
    pub config_fingerprint: String,
}

/// `None` without an Original row, or when the Original score is 0 and the
/// relative change is undefined.
fn delta(original: Option<f64>, new: f64) -> Result<Option<f64>> {
    match original.map(|o| percent_change(o, new)) {
        Some(Ok(d)) => Ok(Some(d)),
        Some(Err(Error::UndefinedDelta)) | None => Ok(None),
        Some(Err(e)) => Err(e),
    }
}

impl RichnessReport {
    /// Rows are ordered Original, FT-Proj, FT-E2E; seed-wise means are used.
    pub fn build(task: &str, seeds: &[u64], scores: &[SettingScores], fingerprint: &str) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Parameter("report needs at least one setting".into()));
        }
        let mut sorted = scores.to_vec();
        sorted.sort_by_key(|s| s.setting);
        if sorted.windows(2).any(|w| w[0].setting == w[1].setting) {
            return Err(Error::Parameter("duplicate setting in report".into()));
        }
        let mean = |v: &[f64]| mean_std(v).0;
        let original = sorted.iter().find(|s| s.setting == Setting::Original);
        let (orig_probe, orig_mllm) = match original {
            Some(o) => (Some(mean(&o.probe_f1)), Some(mean(&o.mllm_f1))),
            None => (None, None),
        };
        let mut rows = Vec::with_capacity(sorted.len());
        for s in &sorted {
            let (probe_f1, mllm_f1, mllm_acc) = (mean(&s.probe_f1), mean(&s.mllm_f1), mean(&s.mllm_acc));
            let is_orig = s.setting == Setting::Original;
            rows.push(ReportRow {
                setting: s.setting,
                probe_f1,
                mllm_f1,
                mllm_acc,
                delta_probe_pct: if is_orig { None } else { delta(orig_probe, probe_f1)? },
                delta_mllm_pct: if is_orig { None } else { delta(orig_mllm, mllm_f1)? },
            });
        }
        Ok(Self {
            task: task.to_string(),
            seeds: seeds.to_vec(),
            rows,
            config_fingerprint: fingerprint.to_string(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Aligned plain-text rendering; `scores` (optional) adds seed σ.
    pub fn to_table(&self, scores: Option<&[SettingScores]>) -> String {
        let cell = |value: f64, d: Option<f64>, std: Option<f64>| {
            let mut c = format!("{value:.4}");
            if let Some(s) = std {
                let _ = write!(c, " ±{s:.4}");
            }
            match d {
                Some(d) => {
                    let _ = write!(c, " ({})", format_percent(d));
                }
                None => c.push_str(" (------)"),
            }
            c
        };
        let std_of = |setting: Setting, pick: fn(&SettingScores) -> &Vec<f64>| {
            scores
                .and_then(|s| s.iter().find(|x| x.setting == setting))
                .filter(|x| pick(x).len() > 1)
                .map(|x| mean_std(pick(x)).1)
        };
        let header = ["Setting", "Post-proj probe F1", "MLLM F1", "MLLM Acc"];
        let mut table: Vec<[String; 4]> = vec![header.map(String::from)];
        for r in &self.rows {
            table.push([
                r.setting.to_string(),
                cell(r.probe_f1, r.delta_probe_pct, std_of(r.setting, |x| &x.probe_f1)),
                cell(r.mllm_f1, r.delta_mllm_pct, std_of(r.setting, |x| &x.mllm_f1)),
                format!("{:.4}", r.mllm_acc),
            ]);
        }
        let widths: Vec<usize> = (0..4)
            .map(|c| table.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
            .collect();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut out = format!(
            "task: {}\nseeds: {}\nconfig: {}\n\n",
            self.task,
            seeds.join(", "),
            self.config_fingerprint
        );
        for row in &table {
            let line: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

/// Writes `report.json` and `report.txt` into `dir`; returns the JSON path.
pub fn emit_report(report: &RichnessReport, scores: Option<&[SettingScores]>, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join("report.json");
    std::fs::write(&json, report.to_json()?).map_err(|e| Error::io(&json, e))?;
    let txt = dir.join("report.txt");
    std::fs::write(&txt, report.to_table(scores)).map_err(|e| Error::io(&txt, e))?;
    Ok(json)
}
