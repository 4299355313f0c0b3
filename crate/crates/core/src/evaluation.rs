//! Recording-level decisions by voting over sequential windows, prefix
//! (early) decisions, metrics and multi-run aggregation.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::datamodel::VideoRecord;
use crate::error::{Error, Result};
use crate::fusion::Prediction;
use crate::model::Model;
use crate::windowing::{cut_window, enumerate_eval_windows, window_presence_ratio, Window};

/// How recordings are cut and filtered at evaluation time.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub window_seconds: f64,
    pub presence_threshold: f64,
    pub gate_modality: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoteResult {
    pub record_id: String,
    pub true_label: u8,
    pub window_predictions: Vec<Prediction>,
    pub final_label: u8,
    /// Window counts for class 0 and class 1.
    pub vote_counts: [usize; 2],
    /// Vote over the first `k + 1` windows at index `k`.
    pub prefix_labels: Vec<u8>,
    /// No window passed the filters and a fallback window was used.
    pub fallback: bool,
}

/// Majority vote over hard labels. Ties go to the class with the larger
/// summed probability over all windows, then to class 1.
pub fn vote(predictions: &[Prediction]) -> Result<u8> {
    if predictions.is_empty() {
        return Err(Error::EmptyVote);
    }
    let ones = predictions.iter().filter(|p| p.label == 1).count();
    let zeros = predictions.len() - ones;
    if ones != zeros {
        return Ok(u8::from(ones > zeros));
    }
    let (s0, s1) = predictions
        .iter()
        .fold((0.0, 0.0), |(a, b), p| (a + p.probabilities[0], b + p.probabilities[1]));
    Ok(u8::from(s1 >= s0))
}

/// Labels of the votes over every prefix, computed incrementally.
fn prefix_votes(predictions: &[Prediction]) -> Vec<u8> {
    let (mut counts, mut sums) = ([0usize; 2], [0.0f64; 2]);
    predictions
        .iter()
        .map(|p| {
            counts[p.label as usize] += 1;
            sums[0] += p.probabilities[0];
            sums[1] += p.probabilities[1];
            if counts[0] != counts[1] {
                u8::from(counts[1] > counts[0])
            } else {
                u8::from(sums[1] >= sums[0])
            }
        })
        .collect()
}

impl VoteResult {
    pub fn from_predictions(record_id: impl Into<String>, true_label: u8, predictions: Vec<Prediction>, fallback: bool) -> Result<Self> {
        let final_label = vote(&predictions)?;
        let ones = predictions.iter().filter(|p| p.label == 1).count();
        let prefix_labels = prefix_votes(&predictions);
        debug_assert_eq!(prefix_labels.last(), Some(&final_label));
        Ok(Self {
            record_id: record_id.into(),
            true_label,
            vote_counts: [predictions.len() - ones, ones],
            window_predictions: predictions,
            final_label,
            prefix_labels,
            fallback,
        })
    }

    pub fn n_windows(&self) -> usize {
        self.window_predictions.len()
    }
}

/// Vote over the first `n_prime` windows.
pub fn prefix_decision(result: &VoteResult, n_prime: usize) -> Result<u8> {
    if n_prime == 0 || n_prime > result.n_windows() {
        return Err(Error::Contract(format!(
            "prefix {n_prime} outside 1..={} for record {}",
            result.n_windows(),
            result.record_id
        )));
    }
    Ok(result.prefix_labels[n_prime - 1])
}

/// Windows that pass the gate filter, or the fallback window.
pub fn select_eval_windows(record: &VideoRecord, cfg: &EvalConfig) -> Result<(Vec<Window>, bool)> {
    let windows = match enumerate_eval_windows(record, cfg.window_seconds) {
        Ok(w) => w,
        Err(Error::TooShort { .. }) => {
            let span = record.span_seconds();
            log::warn!(
                "record {} spans {span:.2}s, shorter than one {}s window; evaluating it whole",
                record.id,
                cfg.window_seconds
            );
            let whole = cut_window(record, 0.0, span)?;
            if whole.present_frames() == 0 {
                return Err(Error::Data(format!("record {} has no present frame", record.id)));
            }
            return Ok((vec![whole], true));
        }
        Err(e) => return Err(e),
    };
    let gate_ratio = |w: &Window| -> Result<f64> {
        match &cfg.gate_modality {
            Some(g) => window_presence_ratio(w, g),
            None => Ok(1.0),
        }
    };
    let mut kept = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    for (i, w) in windows.iter().enumerate() {
        if w.present_frames() == 0 {
            continue;
        }
        let ratio = gate_ratio(w)?;
        if best.is_none_or(|(r, _)| ratio > r) {
            best = Some((ratio, i));
        }
        if ratio >= cfg.presence_threshold {
            kept.push(w.clone());
        }
    }
    if !kept.is_empty() {
        return Ok((kept, false));
    }
    let Some((ratio, i)) = best else {
        return Err(Error::Data(format!("record {} has no present frame in any window", record.id)));
    };
    log::warn!(
        "record {}: no window reaches presence {}; using window {i} (ratio {ratio:.3})",
        record.id,
        cfg.presence_threshold
    );
    Ok((vec![windows[i].clone()], true))
}

pub fn predict_record(record: &VideoRecord, model: &Model, cfg: &EvalConfig) -> Result<VoteResult> {
    let (windows, fallback) = select_eval_windows(record, cfg)?;
    let predictions = windows.iter().map(|w| model.predict_window(w)).collect::<Result<Vec<_>>>()?;
    VoteResult::from_predictions(&record.id, record.label, predictions, fallback)
}

/// Evaluates records in parallel; results keep the input order.
pub fn evaluate_records(records: &[VideoRecord], model: &Model, cfg: &EvalConfig) -> Result<Vec<VoteResult>> {
    records.par_iter().map(|r| predict_record(r, model, cfg)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// Number of true labels per class.
    pub support: [usize; 2],
    /// Fraction of correctly classified windows, when known.
    pub window_accuracy: Option<f64>,
}

impl Metrics {
    pub fn named_values(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("accuracy", self.accuracy),
        ];
        if let Some(w) = self.window_accuracy {
            out.push(("window_accuracy", w));
        }
        out
    }
}

/// Binary metrics for the positive class 1. Empty denominators give 0.
pub fn compute_metrics(predicted: &[u8], truth: &[u8]) -> Result<Metrics> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
    let mut support = [0usize; 2];
    for (&p, &t) in predicted.iter().zip(truth) {
        support[t as usize] += 1;
        match (p, t) {
            (1, 1) => tp += 1,
            (1, _) => fp += 1,
            (_, 1) => fn_ += 1,
            _ => {}
        }
        if p == t {
            correct += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Metrics {
        precision,
        recall,
        f1,
        accuracy: ratio(correct, predicted.len()),
        support,
        window_accuracy: None,
    })
}

/// Metrics of final decisions (or of prefix decisions when `n_prime` is
/// set; records with fewer windows use all of theirs), with window accuracy.
pub fn summarize(results: &[VoteResult], n_prime: Option<usize>) -> Result<Metrics> {
    let predicted: Vec<u8> = results
        .iter()
        .map(|r| match n_prime {
            Some(k) => r.prefix_labels[k.clamp(1, r.n_windows()) - 1],
            None => r.final_label,
        })
        .collect();
    let truth: Vec<u8> = results.iter().map(|r| r.true_label).collect();
    let mut metrics = compute_metrics(&predicted, &truth)?;
    let (mut right, mut total) = (0usize, 0usize);
    for r in results {
        right += r.window_predictions.iter().filter(|p| p.label == r.true_label).count();
        total += r.n_windows();
    }
    metrics.window_accuracy = (total > 0).then(|| right as f64 / total as f64);
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub name: String,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub std: f64,
}

pub fn mean_and_sample_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Aggregation(format!("need at least 2 runs, got {}", values.len())));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

pub fn aggregate_runs(runs: &[Metrics]) -> Result<Vec<MetricSummary>> {
    if runs.len() < 2 {
        return Err(Error::Aggregation(format!("need at least 2 runs, got {}", runs.len())));
    }
    let names = runs[0].named_values();
    names
        .iter()
        .enumerate()
        .map(|(i, (name, _))| {
            let values = runs
                .iter()
                .map(|m| {
                    m.named_values()
                        .get(i)
                        .filter(|(n, _)| n == name)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| Error::Aggregation(format!("run lacks metric {name}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let (mean, std) = mean_and_sample_std(&values)?;
            Ok(MetricSummary { name: name.to_string(), mean, std })
        })
        .collect()
}

/// Single-run metrics in the summary shape, with zero spread.
pub fn single_run_summary(metrics: &Metrics) -> Vec<MetricSummary> {
    metrics
        .named_values()
        .into_iter()
        .map(|(name, mean)| MetricSummary { name: name.to_string(), mean, std: 0.0 })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn predictions_text(results: &[VoteResult]) -> String {
    let mut out = String::from("record_id\ttrue_label\tfinal_label\tn_windows\tvote_pos\tvote_neg\n");
    for r in results {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.record_id,
            r.true_label,
            r.final_label,
            r.n_windows(),
            r.vote_counts[1],
            r.vote_counts[0]
        );
    }
    out
}

pub fn window_predictions_text(results: &[VoteResult]) -> String {
    let mut out = String::from("record_id\twindow_index\tstart_s\tp0\tp1\tlabel\n");
    for r in results {
        for (i, p) in r.window_predictions.iter().enumerate() {
            let _ = writeln!(
                out,
                "{}\t{i}\t{}\t{:.6}\t{:.6}\t{}",
                r.record_id, p.window_start, p.probabilities[0], p.probabilities[1], p.label
            );
        }
    }
    out
}

pub fn metrics_text(summary: &[MetricSummary]) -> String {
    let mut out = String::from("metric\tmean\tstd\n");
    for m in summary {
        let _ = writeln!(out, "{}\t{}\t{}", m.name, m.mean, m.std);
    }
    out
}

pub fn write_predictions(results: &[VoteResult], path: &Path) -> Result<()> {
    write_text(path, &predictions_text(results))
}

pub fn write_window_predictions(results: &[VoteResult], path: &Path) -> Result<()> {
    write_text(path, &window_predictions_text(results))
}

pub fn write_metrics(summary: &[MetricSummary], path: &Path) -> Result<()> {
    write_text(path, &metrics_text(summary))
}

/// Reads back a metrics file written by [`write_metrics`].
pub fn parse_metrics(text: &str) -> Result<Vec<MetricSummary>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split('\t').collect();
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Parse { line: i + 1, message: format!("{s:?}: {e}") })
        };
        if fields.len() != 3 {
            return Err(Error::Parse { line: i + 1, message: format!("expected 3 fields, got {}", fields.len()) });
        }
        out.push(MetricSummary { name: fields[0].to_string(), mean: parse(fields[1])?, std: parse(fields[2])? });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pred(label: u8, own_prob: f64) -> Prediction {
        let p1 = if label == 1 { own_prob } else { 1.0 - own_prob };
        Prediction { logits: [0.0, 0.0], probabilities: [1.0 - p1, p1], label, window_start: 0.0 }
    }

    #[test]
    fn majority_examples() {
        assert_eq!(vote(&[pred(1, 0.9), pred(1, 0.8), pred(0, 0.7)]).unwrap(), 1);
        assert_eq!(vote(&[pred(1, 0.9), pred(0, 0.6), pred(1, 0.6)]).unwrap(), 1);
        assert_eq!(vote(&[pred(0, 0.55)]).unwrap(), 0);
        assert!(matches!(vote(&[]), Err(Error::EmptyVote)));
    }

    #[test]
    fn tie_uses_summed_probability_then_class_one() {
        // 0.9 + 0.4 for class 1 against 0.1 + 0.6 for class 0.
        assert_eq!(vote(&[pred(1, 0.9), pred(0, 0.6)]).unwrap(), 1);
        assert_eq!(vote(&[pred(1, 0.6), pred(0, 0.9)]).unwrap(), 0);
        assert_eq!(vote(&[pred(1, 0.7), pred(0, 0.7)]).unwrap(), 1);
    }

    #[test]
    fn prefix_step_through() {
        let preds = vec![pred(0, 0.8), pred(0, 0.8), pred(1, 0.6), pred(1, 0.9), pred(1, 0.9)];
        let r = VoteResult::from_predictions("r", 1, preds, false).unwrap();
        // At n' = 4 the labels tie 2:2; class 0 sums 0.8+0.8+0.4+0.1 = 2.1
        // against 0.2+0.2+0.6+0.9 = 1.9.
        assert_eq!(r.prefix_labels, vec![0, 0, 0, 0, 1]);
        assert_eq!(prefix_decision(&r, 5).unwrap(), r.final_label);
        assert_eq!(prefix_decision(&r, 1).unwrap(), 0);
        assert!(matches!(prefix_decision(&r, 0), Err(Error::Contract(_))));
        assert!(matches!(prefix_decision(&r, 6), Err(Error::Contract(_))));
        assert_eq!(r.vote_counts, [2, 3]);
    }

    #[test]
    fn metric_examples() {
        let m = compute_metrics(&[1, 0, 1, 0], &[1, 0, 1, 0]).unwrap();
        assert_eq!((m.f1, m.accuracy), (1.0, 1.0));
        let m = compute_metrics(&[1, 1, 0], &[1, 0, 0]).unwrap();
        assert_eq!((m.precision, m.recall), (0.5, 1.0));
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        let m = compute_metrics(&[0, 0], &[0, 0]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (0.0, 0.0, 0.0, 1.0));
        assert_eq!(m.support, [2, 0]);
        assert!(matches!(compute_metrics(&[0], &[0, 1]), Err(Error::Contract(_))));
    }

    #[test]
    fn aggregation_examples() {
        let (mean, std) = mean_and_sample_std(&[0.6, 0.8]).unwrap();
        assert!((mean - 0.7).abs() < 1e-15);
        assert!((std - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_and_sample_std(&[0.5, 0.5, 0.5]).unwrap().1, 0.0);
        let m = compute_metrics(&[1], &[1]).unwrap();
        assert!(matches!(aggregate_runs(std::slice::from_ref(&m)), Err(Error::Aggregation(_))));
        let agg = aggregate_runs(&[m.clone(), m]).unwrap();
        assert!(agg.iter().all(|s| s.std == 0.0));
    }

    #[test]
    fn metrics_file_round_trips() {
        let summary = vec![MetricSummary { name: "f1".into(), mean: 0.7, std: 0.1414213562373095 }];
        assert_eq!(parse_metrics(&metrics_text(&summary)).unwrap(), summary);
    }

    proptest! {
        #[test]
        fn vote_is_order_free(labels in proptest::collection::vec((0u8..2, 0.5f64..1.0), 1..12), seed in any::<u64>()) {
            let preds: Vec<Prediction> = labels.iter().map(|&(l, p)| pred(l, p)).collect();
            let mut shuffled = preds.clone();
            let k = (seed as usize) % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            prop_assert_eq!(vote(&preds).unwrap(), vote(&shuffled).unwrap());
        }
    }
}
