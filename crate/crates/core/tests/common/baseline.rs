//! Uniform random guessing.

use mmprobe::zeroshot::random_baseline_for;

use super::{ensure, lib, Outcome};

pub const TRIALS: usize = 1000;
pub const LONG_RUN: usize = 100_000;

pub fn balanced_gold(k: usize, per_class: usize) -> Vec<usize> {
    (0..k * per_class).map(|i| i % k).collect()
}

pub fn criterion() -> Outcome {
    let gold = balanced_gold(4, 25);
    let short = lib(random_baseline_for(&gold, 4, 0, TRIALS))?;
    ensure(short.expected_accuracy == 0.25, || {
        format!("expected accuracy {} for K=4", short.expected_accuracy)
    })?;
    let long = lib(random_baseline_for(&gold, 4, 1, LONG_RUN))?;
    let gap = (short.macro_f1_mean - long.macro_f1_mean).abs();
    let bound = 3.0 / (TRIALS as f64).sqrt();
    ensure(gap <= bound, || format!("macro-F1 mean {:.4} is {gap:.4} from long run {:.4}", short.macro_f1_mean, long.macro_f1_mean))?;
    Ok(format!(
        "K=4 expected accuracy 0.25; {TRIALS}-trial macro-F1 {:.4} vs {LONG_RUN}-trial {:.4} (gap {gap:.4} <= {bound:.4})",
        short.macro_f1_mean, long.macro_f1_mean
    ))
}
