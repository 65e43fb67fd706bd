//! Segment extraction, segmental F1 at IoU thresholds, sample accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.10, 0.25, 0.50];

/// A maximal run of one label over `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub label: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn iou(&self, other: &Segment) -> f64 {
        let inter = self.end.min(other.end).saturating_sub(self.start.max(other.start));
        let union = self.end.max(other.end) - self.start.min(other.start);
        inter as f64 / union as f64
    }
}

pub fn extract_segments(labels: &[usize]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for (t, &l) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(s) if s.label == l => s.end = t + 1,
            _ => out.push(Segment {
                label: l,
                start: t,
                end: t + 1,
            }),
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Entry {
    pub tau: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl F1Entry {
    pub fn from_counts(tau: f64, tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        let denom = tp as f64 + 0.5 * (fp + fn_) as f64;
        let f1 = if denom > 0.0 {
            tp as f64 / denom
        } else {
            1.0
        };
        F1Entry {
            tau,
            tp,
            fp,
            fn_,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1,
        }
    }
}

/// Per-threshold scores for one (prediction, ground truth) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub entries: Vec<F1Entry>,
    pub accuracy: f64,
}

impl F1Report {
    pub fn f1(&self, tau: f64) -> Option<f64> {
        self.entries.iter().find(|e| (e.tau - tau).abs() < 1e-12).map(|e| e.f1)
    }
}

fn check_lengths(pred: &[usize], gt: &[usize]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Data(format!(
            "prediction has {} samples but ground truth has {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Greedy matching in prediction order: each predicted segment takes the
/// unmatched same-class ground-truth segment of highest IoU (earliest start
/// on ties) and counts as a true positive when that IoU is at least `tau`.
pub fn f1_at_tau(pred: &[usize], gt: &[usize], tau: f64) -> Result<F1Entry> {
    check_lengths(pred, gt)?;
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Domain {
            op: "f1_at_tau",
            detail: format!("IoU threshold {tau} outside (0, 1]"),
        });
    }
    let ps = extract_segments(pred);
    let gs = extract_segments(gt);
    Ok(f1_segments(&ps, &gs, tau))
}

/// [`f1_at_tau`] on explicit segment lists, which need not be maximal runs.
pub fn f1_segments(pred: &[Segment], gt: &[Segment], tau: f64) -> F1Entry {
    let (tp, fp) = greedy_match(pred, gt, tau);
    F1Entry::from_counts(tau, tp, fp, gt.len() - tp)
}

fn greedy_match(ps: &[Segment], gs: &[Segment], tau: f64) -> (usize, usize) {
    let mut used = vec![false; gs.len()];
    let (mut tp, mut fp) = (0, 0);
    for p in ps {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gs.iter().enumerate() {
            if used[j] || g.label != p.label {
                continue;
            }
            let iou = p.iou(g);
            // segments are in start order, so strict > keeps the earliest on ties
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, iou)) if iou >= tau => {
                used[j] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
    }
    (tp, fp)
}

pub fn sample_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    check_lengths(pred, gt)?;
    if gt.is_empty() {
        return Ok(1.0);
    }
    let hits = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / gt.len() as f64)
}

pub fn evaluate_pair(pred: &[usize], gt: &[usize], thresholds: &[f64]) -> Result<F1Report> {
    let entries = thresholds
        .iter()
        .map(|&tau| f1_at_tau(pred, gt, tau))
        .collect::<Result<_>>()?;
    Ok(F1Report {
        entries,
        accuracy: sample_accuracy(pred, gt)?,
    })
}

/// One row of a per-trial metric table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: String,
    pub tau: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

pub fn trial_rows(trial: &str, report: &F1Report) -> Vec<TrialRow> {
    report
        .entries
        .iter()
        .map(|e| TrialRow {
            trial: trial.to_string(),
            tau: e.tau,
            tp: e.tp,
            fp: e.fp,
            fn_: e.fn_,
            precision: e.precision,
            recall: e.recall,
            f1: e.f1,
            accuracy: report.accuracy,
        })
        .collect()
}

/// Mean F1 per threshold and mean accuracy over trials.
pub fn mean_report(reports: &[F1Report]) -> Option<F1Report> {
    let first = reports.first()?;
    let n = reports.len() as f64;
    let entries = first
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let mean = |f: fn(&F1Entry) -> f64| reports.iter().map(|r| f(&r.entries[i])).sum::<f64>() / n;
            F1Entry {
                tau: e.tau,
                tp: reports.iter().map(|r| r.entries[i].tp).sum(),
                fp: reports.iter().map(|r| r.entries[i].fp).sum(),
                fn_: reports.iter().map(|r| r.entries[i].fn_).sum(),
                precision: mean(|e| e.precision),
                recall: mean(|e| e.recall),
                f1: mean(|e| e.f1),
            }
        })
        .collect();
    Some(F1Report {
        entries,
        accuracy: reports.iter().map(|r| r.accuracy).sum::<f64>() / n,
    })
}

pub fn rows_to_csv(rows: &[TrialRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
