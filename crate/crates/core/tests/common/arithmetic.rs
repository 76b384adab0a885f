//! Relative-change column of a reference richness table, recomputed from
//! its own four-decimal F1 columns.

use mmprobe::metrics::percent_change;

use super::{lib, Outcome};

pub const TOL_PP: f64 = 0.005;

/// `(task, setting, original F1, new F1, printed change in %)`.
pub const DELTAS: [(&str, &str, &str, f64, f64, f64); 16] = [
    ("Agriculture", "FT-Proj", "probe", 0.5701, 0.4134, -27.49),
    ("Agriculture", "FT-E2E", "probe", 0.5701, 0.5346, -6.22),
    ("Agriculture", "FT-Proj", "mllm", 0.1064, 0.2221, 108.74),
    ("Agriculture", "FT-E2E", "mllm", 0.1064, 0.5984, 462.41),
    ("Textures", "FT-Proj", "probe", 0.6401, 0.4736, -26.01),
    ("Textures", "FT-E2E", "probe", 0.6401, 0.6212, -2.95),
    ("Textures", "FT-Proj", "mllm", 0.1882, 0.4505, 139.37),
    ("Textures", "FT-E2E", "mllm", 0.1882, 0.7446, 295.64),
    ("Dermatology", "FT-Proj", "probe", 0.3105, 0.2182, -29.72),
    ("Dermatology", "FT-E2E", "probe", 0.3105, 0.2525, -18.67),
    ("Dermatology", "FT-Proj", "mllm", 0.0658, 0.2932, 345.59),
    ("Dermatology", "FT-E2E", "mllm", 0.0658, 0.4947, 651.82),
    ("Humanitarian", "FT-Proj", "probe", 0.7498, 0.6025, -19.64),
    ("Humanitarian", "FT-E2E", "probe", 0.7498, 0.7238, -3.46),
    ("Humanitarian", "FT-Proj", "mllm", 0.5169, 0.6227, 20.47),
    ("Humanitarian", "FT-E2E", "mllm", 0.5169, 0.7950, 53.80),
];

pub struct Mismatch {
    pub row: usize,
    pub computed: f64,
    pub printed: f64,
}

pub fn mismatches() -> Result<Vec<Mismatch>, String> {
    let mut out = Vec::new();
    for (row, &(_, _, _, original, new, printed)) in DELTAS.iter().enumerate() {
        let computed = lib(percent_change(original, new))?;
        if (computed - printed).abs() > TOL_PP {
            out.push(Mismatch { row, computed, printed });
        }
    }
    Ok(out)
}

pub fn criterion() -> Outcome {
    let bad = mismatches()?;
    if bad.is_empty() {
        return Ok(format!("all {} deltas within ±{TOL_PP} pp", DELTAS.len()));
    }
    let listed: Vec<String> = bad
        .iter()
        .map(|m| {
            let (task, setting, column, ..) = DELTAS[m.row];
            format!("{task} {setting} {column}: {:.4} vs printed {:.2}", m.computed, m.printed)
        })
        .collect();
    Err(format!(
        "{}/{} deltas within ±{TOL_PP} pp; off: {}",
        DELTAS.len() - bad.len(),
        DELTAS.len(),
        listed.join("; ")
    ))
}
