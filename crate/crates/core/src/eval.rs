//! Pixel metrics under the clean and inflated protocols, the threshold
//! sweep and the inflation audit.
//!
//! All counts are pooled over every pixel passed in (micro-averaging).

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("unknown protocol {0:?}")]
    Protocol(String),
}

pub type EvalResult<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Protocol {
    /// Next-day target as given; unknown pixels excluded.
    Clean,
    /// Target is next-day fire OR previous-day fire; unknown pixels count
    /// as background.
    Inflated,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Clean => "clean",
            Protocol::Inflated => "inflated",
        }
    }

    /// Label a pixel is scored against, or `None` when it is excluded.
    pub fn effective_target(self, prev_fire: bool, target: i8) -> Option<bool> {
        match self {
            Protocol::Clean => (target >= 0).then_some(target == 1),
            Protocol::Inflated => Some(target == 1 || prev_fire),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = EvalError;

    fn from_str(s: &str) -> EvalResult<Self> {
        match s.to_ascii_lowercase().as_str() {
            "clean" => Ok(Protocol::Clean),
            "inflated" => Ok(Protocol::Inflated),
            _ => Err(EvalError::Protocol(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }

    fn add(&mut self, pred: bool, truth: bool) {
        match (pred, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

/// Precision, recall and F1, each 0 when its denominator is 0.
pub fn prf1(c: &Confusion) -> (f64, f64, f64) {
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    (
        ratio(c.tp, c.tp + c.fp),
        ratio(c.tp, c.tp + c.fn_),
        ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    )
}

fn check_lengths(probs: usize, prev: usize, target: usize) -> EvalResult<()> {
    if prev != probs {
        return Err(EvalError::Length {
            what: "prev_mask",
            expected: probs,
            got: prev,
        });
    }
    if target != probs {
        return Err(EvalError::Length {
            what: "target",
            expected: probs,
            got: target,
        });
    }
    Ok(())
}

/// Confusion counts with prediction `prob >= threshold`.
pub fn confusion(
    probs: &[f32],
    prev: &[bool],
    target: &[i8],
    protocol: Protocol,
    threshold: f64,
) -> EvalResult<Confusion> {
    check_lengths(probs.len(), prev.len(), target.len())?;
    let mut c = Confusion::default();
    for ((&p, &pv), &t) in probs.iter().zip(prev).zip(target) {
        if let Some(truth) = protocol.effective_target(pv, t) {
            c.add(f64::from(p) >= threshold, truth);
        }
    }
    Ok(c)
}

/// Rank-based average precision. Scores are ranked descending with ties in
/// input order. `None` when there is no positive.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / n_pos as f64)
}

/// AUC-PR over the pixels a protocol includes.
pub fn auc_pr(probs: &[f32], prev: &[bool], target: &[i8], protocol: Protocol) -> EvalResult<Option<f64>> {
    check_lengths(probs.len(), prev.len(), target.len())?;
    let mut scores = Vec::with_capacity(probs.len());
    let mut labels = Vec::with_capacity(probs.len());
    for ((&p, &pv), &t) in probs.iter().zip(prev).zip(target) {
        if let Some(truth) = protocol.effective_target(pv, t) {
            scores.push(f64::from(p));
            labels.push(truth);
        }
    }
    Ok(average_precision(&scores, &labels))
}

pub const N_THRESHOLDS: usize = 19;

/// `0.05, 0.10, ..., 0.95`, computed as `i / 20`.
pub fn sweep_thresholds() -> [f64; N_THRESHOLDS] {
    std::array::from_fn(|i| (i + 1) as f64 / 20.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub threshold: f64,
    pub confusion: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub rows: Vec<SweepRow>,
    /// Index of the best row: highest F1, lowest threshold among ties.
    pub best: usize,
}

impl Sweep {
    pub fn best_row(&self) -> &SweepRow {
        &self.rows[self.best]
    }
}

pub fn threshold_sweep(probs: &[f32], prev: &[bool], target: &[i8], protocol: Protocol) -> EvalResult<Sweep> {
    check_lengths(probs.len(), prev.len(), target.len())?;
    let th = sweep_thresholds();
    let mut counts = [Confusion::default(); N_THRESHOLDS];
    for ((&p, &pv), &t) in probs.iter().zip(prev).zip(target) {
        if let Some(truth) = protocol.effective_target(pv, t) {
            let p = f64::from(p);
            for (c, &thr) in counts.iter_mut().zip(&th) {
                c.add(p >= thr, truth);
            }
        }
    }
    let rows: Vec<SweepRow> = th
        .iter()
        .zip(counts)
        .map(|(&threshold, confusion)| {
            let (precision, recall, f1) = prf1(&confusion);
            SweepRow {
                threshold,
                confusion,
                precision,
                recall,
                f1,
            }
        })
        .collect();
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.f1 > rows[best].f1 {
            best = i;
        }
    }
    Ok(Sweep { rows, best })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub threshold: f64,
    pub confusion: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when the protocol leaves no positive pixel.
    pub auc_pr: Option<f64>,
}

impl MetricsReport {
    fn from_row(row: &SweepRow, protocol: Protocol, auc_pr: Option<f64>) -> Self {
        Self {
            protocol,
            threshold: row.threshold,
            confusion: row.confusion,
            precision: row.precision,
            recall: row.recall,
            f1: row.f1,
            auc_pr,
        }
    }

    /// Metrics at a fixed threshold.
    pub fn at_threshold(
        probs: &[f32],
        prev: &[bool],
        target: &[i8],
        protocol: Protocol,
        threshold: f64,
    ) -> EvalResult<Self> {
        let c = confusion(probs, prev, target, protocol, threshold)?;
        let (precision, recall, f1) = prf1(&c);
        let row = SweepRow {
            threshold,
            confusion: c,
            precision,
            recall,
            f1,
        };
        Ok(Self::from_row(&row, protocol, auc_pr(probs, prev, target, protocol)?))
    }
}

/// Sweep thresholds, report the best one together with AUC-PR.
pub fn evaluate(
    probs: &[f32],
    prev: &[bool],
    target: &[i8],
    protocol: Protocol,
) -> EvalResult<(MetricsReport, Sweep)> {
    let sweep = threshold_sweep(probs, prev, target, protocol)?;
    let ap = auc_pr(probs, prev, target, protocol)?;
    Ok((MetricsReport::from_row(sweep.best_row(), protocol, ap), sweep))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub model: String,
    pub clean: MetricsReport,
    pub inflated: MetricsReport,
    /// `(inflated - clean) / clean * 100`; `None` when clean F1 is 0.
    pub inflation_pct: Option<f64>,
}

/// Evaluate the same predictions under both protocols, each with its own
/// swept threshold.
pub fn inflation_audit(model: &str, probs: &[f32], prev: &[bool], target: &[i8]) -> EvalResult<AuditRow> {
    let (clean, _) = evaluate(probs, prev, target, Protocol::Clean)?;
    let (inflated, _) = evaluate(probs, prev, target, Protocol::Inflated)?;
    Ok(AuditRow {
        model: model.to_string(),
        inflation_pct: inflation_pct(clean.f1, inflated.f1),
        clean,
        inflated,
    })
}

pub fn inflation_pct(clean_f1: f64, inflated_f1: f64) -> Option<f64> {
    (clean_f1 != 0.0).then(|| (inflated_f1 - clean_f1) / clean_f1 * 100.0)
}
