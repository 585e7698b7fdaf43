//! Evaluation analytics: accuracy, Brier score, calibration, class balance,
//! confusion matrices and uncertainty histograms, each with a CSV writer.

use std::collections::HashSet;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndmath::{argmax, Matrix, PROB_SUM_TOL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagError {
    #[error("{0} needs at least one sample")]
    Empty(&'static str),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("label {label} at position {index} is outside 0..{n_classes}")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        n_classes: usize,
    },
    #[error("row {row} is not a probability vector")]
    InvalidProbability { row: usize },
    #[error("invalid bin edges: {0}")]
    BadEdges(String),
    #[error("n_bins must be at least 1")]
    ZeroBins,
    #[error("probe index {index} was acquired during the run")]
    ProbeOverlap { index: usize },
    #[error("scoring failed: {0}")]
    Scoring(String),
}

fn same_len(a: usize, b: usize) -> Result<(), DiagError> {
    if a != b {
        return Err(DiagError::LengthMismatch { left: a, right: b });
    }
    Ok(())
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, DiagError> {
    same_len(predictions.len(), labels.len())?;
    if labels.is_empty() {
        return Err(DiagError::Empty("accuracy"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

fn check_prob_rows(probs: &Matrix, labels: &[usize]) -> Result<(), DiagError> {
    same_len(probs.rows(), labels.len())?;
    let c = probs.cols();
    for (row, p) in probs.iter_rows().enumerate() {
        let sum: f64 = p.iter().sum();
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) || (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(DiagError::InvalidProbability { row });
        }
    }
    for (index, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(DiagError::LabelOutOfRange {
                index,
                label,
                n_classes: c,
            });
        }
    }
    Ok(())
}

/// Mean over samples of the squared distance between the predictive
/// distribution and the one-hot label, summed over classes.
pub fn brier(probs: &Matrix, labels: &[usize]) -> Result<f64, DiagError> {
    check_prob_rows(probs, labels)?;
    if labels.is_empty() {
        return Err(DiagError::Empty("brier"));
    }
    let total: f64 = probs
        .iter_rows()
        .zip(labels)
        .map(|(p, &y)| {
            p.iter()
                .enumerate()
                .map(|(c, &v)| {
                    let d = v - if c == y { 1.0 } else { 0.0 };
                    d * d
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub midpoint: f64,
    pub expected: f64,
    pub observed: f64,
    pub count: usize,
}

/// Non-empty confidence bins plus the count-weighted squared gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub bins: Vec<CalibrationBin>,
    pub mse: f64,
}

/// Calibration from raw (confidence, correct) pairs.
pub fn calibration_from_confidences(
    confidences: &[f64],
    correct: &[bool],
    n_bins: usize,
) -> Result<CalibrationCurve, DiagError> {
    same_len(confidences.len(), correct.len())?;
    if n_bins == 0 {
        return Err(DiagError::ZeroBins);
    }
    let mut conf_sum = vec![0.0; n_bins];
    let mut hits = vec![0usize; n_bins];
    let mut counts = vec![0usize; n_bins];
    for (&q, &ok) in confidences.iter().zip(correct) {
        let b = ((q * n_bins as f64).floor() as usize).min(n_bins - 1);
        conf_sum[b] += q;
        hits[b] += usize::from(ok);
        counts[b] += 1;
    }
    let width = 1.0 / n_bins as f64;
    let mut bins = Vec::new();
    let mut sq = 0.0;
    for b in 0..n_bins {
        if counts[b] == 0 {
            continue;
        }
        let n = counts[b] as f64;
        let expected = conf_sum[b] / n;
        let observed = hits[b] as f64 / n;
        sq += n * (expected - observed).powi(2);
        bins.push(CalibrationBin {
            midpoint: (b as f64 + 0.5) * width,
            expected,
            observed,
            count: counts[b],
        });
    }
    let mse = if confidences.is_empty() {
        0.0
    } else {
        sq / confidences.len() as f64
    };
    Ok(CalibrationCurve { bins, mse })
}

/// Bins the top-class confidence of each row into `n_bins` equal-width bins.
pub fn calibration_curve(
    probs: &Matrix,
    labels: &[usize],
    n_bins: usize,
) -> Result<CalibrationCurve, DiagError> {
    check_prob_rows(probs, labels)?;
    let mut conf = Vec::with_capacity(labels.len());
    let mut correct = Vec::with_capacity(labels.len());
    for (p, &y) in probs.iter_rows().zip(labels) {
        let top = argmax(p);
        conf.push(p[top]);
        correct.push(top == y);
    }
    calibration_from_confidences(&conf, &correct, n_bins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassHistogram {
    pub counts: Vec<usize>,
    /// KL divergence of the empirical class distribution from uniform.
    pub kl_from_uniform: f64,
    /// Largest count over smallest count, the latter clamped to at least 1.
    pub max_min_ratio: f64,
}

pub fn class_histogram(labels: &[usize], n_classes: usize) -> Result<ClassHistogram, DiagError> {
    let mut counts = vec![0usize; n_classes];
    for (index, &label) in labels.iter().enumerate() {
        if label >= n_classes {
            return Err(DiagError::LabelOutOfRange {
                index,
                label,
                n_classes,
            });
        }
        counts[label] += 1;
    }
    Ok(histogram_from_counts(counts))
}

pub fn histogram_from_counts(counts: Vec<usize>) -> ClassHistogram {
    let total: usize = counts.iter().sum();
    let c = counts.len() as f64;
    let kl_from_uniform = if total == 0 {
        0.0
    } else {
        counts
            .iter()
            .filter(|&&n| n > 0)
            .map(|&n| {
                let p = n as f64 / total as f64;
                // n*C/total is exactly 1 for uniform counts, so KL is exactly 0 there
                p * (n as f64 * c / total as f64).ln()
            })
            .sum::<f64>()
            .max(0.0)
    };
    let max = counts.iter().copied().max().unwrap_or(0);
    let min = counts.iter().copied().min().unwrap_or(0).max(1);
    ClassHistogram {
        counts,
        kl_from_uniform,
        max_min_ratio: max as f64 / min as f64,
    }
}

/// `C x C` counts indexed `[true][predicted]`.
pub fn confusion_matrix(
    predictions: &[usize],
    labels: &[usize],
    n_classes: usize,
) -> Result<Vec<Vec<usize>>, DiagError> {
    same_len(predictions.len(), labels.len())?;
    let mut m = vec![vec![0usize; n_classes]; n_classes];
    for (index, (&p, &y)) in predictions.iter().zip(labels).enumerate() {
        for label in [p, y] {
            if label >= n_classes {
                return Err(DiagError::LabelOutOfRange {
                    index,
                    label,
                    n_classes,
                });
            }
        }
        m[y][p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Accuracy within each bin; `None` for empty bins or when no labels were given.
    pub per_bin_accuracy: Vec<Option<f64>>,
    /// Scores that fell outside the edges and were placed in the nearest end bin.
    pub out_of_range: usize,
}

impl UncertaintyHistogram {
    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn midpoint(&self, bin: usize) -> f64 {
        0.5 * (self.bin_edges[bin] + self.bin_edges[bin + 1])
    }

    /// Rank correlation between bin midpoint and bin accuracy over bins
    /// holding at least `min_count` samples.
    pub fn accuracy_trend(&self, min_count: usize) -> Option<f64> {
        let (mids, accs): (Vec<f64>, Vec<f64>) = (0..self.n_bins())
            .filter(|&b| self.counts[b] >= min_count)
            .filter_map(|b| self.per_bin_accuracy[b].map(|a| (self.midpoint(b), a)))
            .unzip();
        spearman(&mids, &accs)
    }
}

/// `n_bins + 1` equally spaced edges over `[lo, hi]`. A degenerate range is
/// widened to unit width so every value still lands in the first bin.
pub fn equal_width_edges(lo: f64, hi: f64, n_bins: usize) -> Result<Vec<f64>, DiagError> {
    if n_bins == 0 {
        return Err(DiagError::ZeroBins);
    }
    if !lo.is_finite() || !hi.is_finite() || hi < lo {
        return Err(DiagError::BadEdges(format!("range [{lo}, {hi}]")));
    }
    let hi = if hi > lo { hi } else { lo + 1.0 };
    let width = (hi - lo) / n_bins as f64;
    let mut edges: Vec<f64> = (0..n_bins).map(|i| lo + i as f64 * width).collect();
    edges.push(hi);
    Ok(edges)
}

/// Counts `scores` into the bins delimited by strictly increasing `edges`
/// (last bin closed on the right). With `(predictions, labels)` supplied the
/// per-bin accuracy is filled in.
pub fn uncertainty_histogram(
    scores: &[f64],
    edges: &[f64],
    outcomes: Option<(&[usize], &[usize])>,
) -> Result<UncertaintyHistogram, DiagError> {
    if edges.len() < 2 {
        return Err(DiagError::BadEdges("need at least two edges".into()));
    }
    if edges.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
        return Err(DiagError::BadEdges("edges must be strictly increasing".into()));
    }
    if let Some((p, y)) = outcomes {
        same_len(p.len(), y.len())?;
        same_len(scores.len(), y.len())?;
    }
    let n_bins = edges.len() - 1;
    let mut counts = vec![0usize; n_bins];
    let mut hits = vec![0usize; n_bins];
    let mut out_of_range = 0;
    for (i, &s) in scores.iter().enumerate() {
        let bin = if s < edges[0] {
            out_of_range += 1;
            0
        } else if s > edges[n_bins] || s.is_nan() {
            out_of_range += 1;
            n_bins - 1
        } else {
            edges.partition_point(|&e| e <= s).saturating_sub(1).min(n_bins - 1)
        };
        counts[bin] += 1;
        if let Some((p, y)) = outcomes {
            hits[bin] += usize::from(p[i] == y[i]);
        }
    }
    let per_bin_accuracy = (0..n_bins)
        .map(|b| match outcomes {
            Some(_) if counts[b] > 0 => Some(hits[b] as f64 / counts[b] as f64),
            _ => None,
        })
        .collect();
    Ok(UncertaintyHistogram {
        bin_edges: edges.to_vec(),
        counts,
        per_bin_accuracy,
        out_of_range,
    })
}

/// Seen and unseen probe histograms over shared edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub seen: UncertaintyHistogram,
    pub unseen: UncertaintyHistogram,
    pub seen_mean: f64,
    pub unseen_mean: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Scores both probes with the same `score_fn` and histograms them over
/// `n_bins` equal-width bins spanning the joint range. `seen_indices` and
/// `acquired` must live in the same index space; any overlap is an error.
pub fn ood_report<F>(
    mut score_fn: F,
    seen: &Matrix,
    seen_indices: &[usize],
    unseen: &Matrix,
    acquired: &[usize],
    n_bins: usize,
) -> Result<OodReport, DiagError>
where
    F: FnMut(&Matrix) -> Result<Vec<f64>, DiagError>,
{
    same_len(seen.rows(), seen_indices.len())?;
    let acquired: HashSet<usize> = acquired.iter().copied().collect();
    if let Some(&index) = seen_indices.iter().find(|i| acquired.contains(i)) {
        return Err(DiagError::ProbeOverlap { index });
    }
    let seen_scores = score_fn(seen)?;
    let unseen_scores = score_fn(unseen)?;
    same_len(seen_scores.len(), seen.rows())?;
    same_len(unseen_scores.len(), unseen.rows())?;
    if seen_scores.is_empty() || unseen_scores.is_empty() {
        return Err(DiagError::Empty("ood_report"));
    }
    let all = seen_scores.iter().chain(&unseen_scores);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let edges = equal_width_edges(lo, hi, n_bins)?;
    Ok(OodReport {
        seen: uncertainty_histogram(&seen_scores, &edges, None)?,
        unseen: uncertainty_histogram(&unseen_scores, &edges, None)?,
        seen_mean: mean(&seen_scores),
        unseen_mean: mean(&unseen_scores),
    })
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` with fewer than two points or a constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

pub fn write_calibration_csv<W: Write>(mut out: W, curve: &CalibrationCurve) -> io::Result<()> {
    writeln!(out, "midpoint,expected,observed,count")?;
    for b in &curve.bins {
        writeln!(out, "{},{},{},{}", b.midpoint, b.expected, b.observed, b.count)?;
    }
    Ok(())
}

pub fn write_class_histogram_csv<W: Write>(mut out: W, hist: &ClassHistogram) -> io::Result<()> {
    writeln!(out, "class,count")?;
    for (c, n) in hist.counts.iter().enumerate() {
        writeln!(out, "{c},{n}")?;
    }
    Ok(())
}

pub fn write_confusion_csv<W: Write>(mut out: W, matrix: &[Vec<usize>]) -> io::Result<()> {
    let header: Vec<String> = (0..matrix.len()).map(|c| format!("pred_{c}")).collect();
    writeln!(out, "true,{}", header.join(","))?;
    for (y, row) in matrix.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(usize::to_string).collect();
        writeln!(out, "{y},{}", cells.join(","))?;
    }
    Ok(())
}

/// One row per bin: `bin_lo,bin_hi,count,accuracy` (accuracy blank when undefined).
pub fn write_uncertainty_csv<W: Write>(mut out: W, hist: &UncertaintyHistogram) -> io::Result<()> {
    writeln!(out, "bin_lo,bin_hi,count,accuracy")?;
    for b in 0..hist.n_bins() {
        let acc = hist.per_bin_accuracy[b].map_or(String::new(), |a| a.to_string());
        writeln!(
            out,
            "{},{},{},{}",
            hist.bin_edges[b],
            hist.bin_edges[b + 1],
            hist.counts[b],
            acc
        )?;
    }
    Ok(())
}

/// Seen and unseen counts side by side over the shared edges.
pub fn write_ood_csv<W: Write>(mut out: W, report: &OodReport) -> io::Result<()> {
    writeln!(out, "bin_lo,bin_hi,seen_count,unseen_count")?;
    for b in 0..report.seen.n_bins() {
        writeln!(
            out,
            "{},{},{},{}",
            report.seen.bin_edges[b],
            report.seen.bin_edges[b + 1],
            report.seen.counts[b],
            report.unseen.counts[b]
        )?;
    }
    Ok(())
}
