//! Competition metrics: classification accuracy and maneuver-detection
//! precision/recall/F1 built from the tp/fp/fpp/mp taxonomy.
//!
//! For a (prediction, target) pair:
//!
//! * `tp`  target is a maneuver and the prediction matches it
//! * `fp`  target is a maneuver, prediction is a different maneuver
//! * `fpp` target is straight (ST), prediction is a maneuver
//! * `mp`  target is a maneuver, prediction is straight
//!
//! ST/ST pairs are counted in none of the four. Then
//! `P = tp / (tp + fp + fpp)`, `R = tp / (tp + fp + mp)`, `F1 = 2PR / (P + R)`,
//! with every `0/0` taken as 0.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ManeuverLabel, NUM_CLASSES};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{preds} predictions for {targets} targets")]
    LengthMismatch { preds: usize, targets: usize },
    #[error("no samples to evaluate")]
    Empty,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn check(preds: &[ManeuverLabel], targets: &[ManeuverLabel]) -> Result<()> {
    if preds.len() != targets.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            targets: targets.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Fraction of exact label matches.
pub fn accuracy(preds: &[ManeuverLabel], targets: &[ManeuverLabel]) -> Result<f64> {
    check(preds, targets)?;
    let hits = preds.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(ratio(hits, preds.len()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub tp: usize,
    pub fp: usize,
    pub fpp: usize,
    pub mp: usize,
}

pub fn maneuver_counts(preds: &[ManeuverLabel], targets: &[ManeuverLabel]) -> MetricCounts {
    let mut c = MetricCounts::default();
    for (&p, &t) in preds.iter().zip(targets) {
        match (t.is_straight(), p.is_straight()) {
            (true, true) => {}
            (true, false) => c.fpp += 1,
            (false, true) => c.mp += 1,
            (false, false) if p == t => c.tp += 1,
            (false, false) => c.fp += 1,
        }
    }
    c
}

/// `(precision, recall, f1)` from maneuver counts.
pub fn maneuver_prf(c: &MetricCounts) -> (f64, f64, f64) {
    let p = ratio(c.tp, c.tp + c.fp + c.fpp);
    let r = ratio(c.tp, c.tp + c.fp + c.mp);
    (p, r, harmonic(p, r))
}

/// 6x6 confusion counts, rows = target, columns = prediction.
pub type Confusion = [[usize; NUM_CLASSES]; NUM_CLASSES];

pub fn confusion_matrix(preds: &[ManeuverLabel], targets: &[ManeuverLabel]) -> Confusion {
    let mut m = [[0; NUM_CLASSES]; NUM_CLASSES];
    for (p, t) in preds.iter().zip(targets) {
        m[t.code()][p.code()] += 1;
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    /// Recall of the class; `None` when the class never occurs as a target.
    pub acc: Option<f64>,
    /// One-vs-rest F1.
    pub f1: f64,
    pub support: usize,
}

/// Per-class accuracy (diagonal over row sum) and one-vs-rest F1.
pub fn per_class_report(
    preds: &[ManeuverLabel],
    targets: &[ManeuverLabel],
) -> Result<([ClassScore; NUM_CLASSES], Confusion)> {
    check(preds, targets)?;
    let m = confusion_matrix(preds, targets);
    let mut out = [ClassScore {
        acc: None,
        f1: 0.0,
        support: 0,
    }; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        let row: usize = m[c].iter().sum();
        let col: usize = m.iter().map(|r| r[c]).sum();
        let tp = m[c][c];
        let precision = ratio(tp, col);
        let recall = ratio(tp, row);
        out[c] = ClassScore {
            acc: (row > 0).then(|| recall),
            f1: harmonic(precision, recall),
            support: row,
        };
    }
    Ok((out, m))
}

/// Everything reported for one method on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean one-vs-rest F1 over classes present in targets or predictions.
    pub macro_f1: f64,
    pub counts: MetricCounts,
    pub per_class: [ClassScore; NUM_CLASSES],
    pub confusion: Confusion,
}

impl EvalReport {
    pub fn compute(preds: &[ManeuverLabel], targets: &[ManeuverLabel]) -> Result<Self> {
        let accuracy = accuracy(preds, targets)?;
        let counts = maneuver_counts(preds, targets);
        let (precision, recall, f1) = maneuver_prf(&counts);
        let (per_class, confusion) = per_class_report(preds, targets)?;
        let present: Vec<usize> = (0..NUM_CLASSES)
            .filter(|&c| per_class[c].support > 0 || confusion.iter().any(|r| r[c] > 0))
            .collect();
        let macro_f1 = present.iter().map(|&c| per_class[c].f1).sum::<f64>() / present.len() as f64;
        Ok(Self {
            accuracy,
            precision,
            recall,
            f1,
            macro_f1,
            counts,
            per_class,
            confusion,
        })
    }

    /// Structured-text report; scores as percentages with two decimals.
    pub fn to_text(&self) -> String {
        let pct = |v: f64| format!("{:.2}", 100.0 * v);
        let mut s = String::new();
        let _ = writeln!(s, "accuracy = {}", pct(self.accuracy));
        let _ = writeln!(s, "precision = {}", pct(self.precision));
        let _ = writeln!(s, "recall = {}", pct(self.recall));
        let _ = writeln!(s, "f1 = {}", pct(self.f1));
        let _ = writeln!(s, "macro_f1 = {}", pct(self.macro_f1));
        s.push_str("confusion = [\n");
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "    [{}],", cells.join(", "));
        }
        s.push_str("]\n\n[counts]\n");
        let c = &self.counts;
        let _ = writeln!(s, "tp = {}\nfp = {}\nfpp = {}\nmp = {}", c.tp, c.fp, c.fpp, c.mp);
        for l in ManeuverLabel::ALL {
            let cs = &self.per_class[l.code()];
            let _ = writeln!(s, "\n[per_class.{}]", l.as_str());
            match cs.acc {
                Some(a) => {
                    let _ = writeln!(s, "acc = {}", pct(a));
                }
                None => s.push_str("acc = \"undefined\"\n"),
            }
            let _ = writeln!(s, "f1 = {}", pct(cs.f1));
            let _ = writeln!(s, "support = {}", cs.support);
        }
        s
    }

    /// `method,task,acc,f1` with percentage scores.
    pub fn leaderboard_row(&self, method: &str, task: &str) -> String {
        format!(
            "{method},{task},{:.2},{:.2}",
            100.0 * self.accuracy,
            100.0 * self.f1
        )
    }
}

pub const LEADERBOARD_HEADER: &str = "method,task,acc,f1";
