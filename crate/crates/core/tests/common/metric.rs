//! Macro-F1 against a plain recount.

use mmprobe::metrics::{classification_metrics, Prediction};
use mmprobe::rng::RngState;

use super::{ensure, lib, Outcome};

pub const INSTANCES: u64 = 1000;
const TOL: f64 = 1e-12;

pub struct Recount {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_f1: f64,
    pub accuracy: f64,
}

/// Counts TP/FP/FN for each class by scanning the pairs directly.
pub fn recount(gold: &[usize], pred: &[Prediction], k: usize) -> Recount {
    let (mut precision, mut recall, mut f1) = (vec![], vec![], vec![]);
    for c in 0..k {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for (g, p) in gold.iter().zip(pred) {
            let said_c = *p == Prediction::Class(c);
            match (*g == c, said_c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => {}
            }
        }
        let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        precision.push(div(tp, tp + fp));
        recall.push(div(tp, tp + fn_));
        f1.push(div(2 * tp, 2 * tp + fp + fn_));
    }
    let correct = gold.iter().zip(pred).filter(|(g, p)| **p == Prediction::Class(**g)).count();
    Recount {
        macro_f1: f1.iter().sum::<f64>() / k as f64,
        accuracy: correct as f64 / gold.len() as f64,
        precision,
        recall,
        f1,
    }
}

pub fn hand_case() -> Result<f64, String> {
    let (a, b) = (0, 1);
    let gold = [a, a, b];
    let pred = [Prediction::Class(a), Prediction::Class(b), Prediction::Class(b)];
    Ok(lib(classification_metrics(&gold, &pred, 2))?.macro_f1)
}

pub fn random_instances() -> Result<f64, String> {
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let mut g = RngState::new(i).derive_str("metric-instance").generator();
        let k = 1 + g.below(8);
        let n = 1 + g.below(80);
        let gold: Vec<usize> = (0..n).map(|_| g.below(k)).collect();
        let pred: Vec<Prediction> = (0..n)
            .map(|_| {
                if g.below(10) == 0 {
                    Prediction::NoMatch
                } else {
                    Prediction::Class(g.below(k))
                }
            })
            .collect();
        let got = lib(classification_metrics(&gold, &pred, k))?;
        let want = recount(&gold, &pred, k);
        let mut diffs = vec![(got.macro_f1 - want.macro_f1).abs(), (got.accuracy - want.accuracy).abs()];
        for (c, m) in got.per_class.iter().enumerate() {
            diffs.push((m.precision - want.precision[c]).abs());
            diffs.push((m.recall - want.recall[c]).abs());
            diffs.push((m.f1 - want.f1[c]).abs());
        }
        let d = diffs.into_iter().fold(0.0, f64::max);
        worst = worst.max(d);
        ensure(d <= TOL, || format!("instance {i} (k={k}, n={n}) differs by {d:e}"))?;
    }
    Ok(worst)
}

pub fn criterion() -> Outcome {
    let worst = random_instances()?;
    let hand = hand_case()?;
    ensure((hand - 2.0 / 3.0).abs() <= TOL, || format!("hand case gave {hand}, want 2/3"))?;
    Ok(format!("{INSTANCES} instances, max diff {worst:.1e}; hand case {hand:.6}"))
}
