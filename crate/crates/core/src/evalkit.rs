//! Weighted F1, per-class reports, annotator comparison and chart data.
//!
//! Undefined ratios follow the 0/0 → 0 convention: a class that is never
//! predicted has precision 0, a class with no gold examples has recall 0, and
//! F1 is 0 whenever precision + recall is 0. Classes with zero support carry
//! zero weight in the weighted average.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::annotator::{label_overlap, PseudoLabeledCorpus};
use crate::corpus::{Conversation, Dataset, LabelSpace, Sentiment, SplitTag};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::tensor::Matrix;

fn check_inputs(preds: &[usize], golds: &[usize], n_classes: usize) -> Result<()> {
    if preds.len() != golds.len() {
        return Err(Error::LengthMismatch { left: preds.len(), right: golds.len() });
    }
    if preds.is_empty() {
        return Err(Error::Precondition("metrics need at least one sample".into()));
    }
    if let Some(bad) = preds.iter().chain(golds).find(|&&c| c >= n_classes) {
        return Err(Error::Domain(format!("class id {bad} outside [0, {n_classes})")));
    }
    Ok(())
}

/// `matrix[gold][pred]` counts.
pub fn confusion_matrix(preds: &[usize], golds: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    check_inputs(preds, golds, n_classes)?;
    let mut m = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &g) in preds.iter().zip(golds) {
        m[g][p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn per_class(confusion: &[Vec<usize>]) -> Vec<(f64, f64, f64, usize)> {
    let n = confusion.len();
    (0..n)
        .map(|c| {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            let p = ratio(tp, predicted);
            let r = ratio(tp, support);
            let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            (p, r, f1, support)
        })
        .collect()
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(preds: &[usize], golds: &[usize], n_classes: usize) -> Result<f64> {
    let confusion = confusion_matrix(preds, golds, n_classes)?;
    let total = preds.len() as f64;
    Ok(per_class(&confusion).iter().map(|&(_, _, f1, support)| support as f64 / total * f1).sum())
}

pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::LengthMismatch { left: preds.len(), right: golds.len() });
    }
    if preds.is_empty() {
        return Err(Error::Precondition("metrics need at least one sample".into()));
    }
    Ok(preds.iter().zip(golds).filter(|(p, g)| p == g).count() as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub samples: usize,
    pub classes: Vec<ClassMetrics>,
    /// Rows are gold classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    pub split: Option<SplitTag>,
    pub stage: Option<String>,
}

impl EvalReport {
    pub fn from_predictions(preds: &[usize], golds: &[usize], label_space: LabelSpace) -> Result<Self> {
        let confusion = confusion_matrix(preds, golds, label_space.len())?;
        let total = preds.len() as f64;
        let stats = per_class(&confusion);
        let weighted_f1 = stats.iter().map(|&(_, _, f1, s)| s as f64 / total * f1).sum();
        let classes = stats
            .iter()
            .zip(label_space.classes())
            .map(|(&(precision, recall, f1, support), name)| ClassMetrics {
                class: (*name).to_string(),
                precision,
                recall,
                f1,
                support,
            })
            .collect();
        Ok(Self {
            weighted_f1,
            accuracy: accuracy(preds, golds)?,
            samples: preds.len(),
            classes,
            confusion,
            split: None,
            stage: None,
        })
    }

    pub fn with_tags(mut self, split: Option<SplitTag>, stage: impl Into<String>) -> Self {
        self.split = split;
        self.stage = Some(stage.into());
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per class plus a trailing `weighted` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,precision,recall,f1,support\n");
        for c in &self.classes {
            let _ = writeln!(out, "{},{:.6},{:.6},{:.6},{}", c.class, c.precision, c.recall, c.f1, c.support);
        }
        let _ = writeln!(out, "weighted,,,{:.6},{}", self.weighted_f1, self.samples);
        out
    }
}

/// Anything that scores every utterance of a conversation.
pub trait UtteranceClassifier: Sync {
    fn n_classes(&self) -> usize;

    /// `K x n_classes` logits, one row per utterance.
    fn conversation_logits(&self, conversation: &Conversation) -> Result<Matrix>;
}

/// Argmax predictions (ties to the lowest class id) and gold labels, flattened
/// in dataset order.
pub fn predict_dataset<M: UtteranceClassifier + ?Sized>(
    model: &M,
    dataset: &Dataset,
    exec: Execution,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if model.n_classes() != dataset.label_space.len() {
        return Err(Error::Config(format!(
            "model predicts {} classes but {} has {}",
            model.n_classes(),
            dataset.label_space.name(),
            dataset.label_space.len()
        )));
    }
    let per_conv = par::map(exec, &dataset.conversations, |c| model.conversation_logits(c));
    let mut preds = Vec::with_capacity(dataset.num_utterances());
    let mut golds = Vec::with_capacity(dataset.num_utterances());
    for (conv, logits) in dataset.conversations.iter().zip(per_conv) {
        let logits = logits?;
        if logits.rows() != conv.len() {
            return Err(Error::Shape(format!(
                "{} logit rows for a conversation of {} utterances",
                logits.rows(),
                conv.len()
            )));
        }
        preds.extend((0..logits.rows()).map(|r| logits.argmax_row(r)));
        golds.extend(conv.labels());
    }
    Ok((preds, golds))
}

pub fn evaluate<M: UtteranceClassifier + ?Sized>(model: &M, dataset: &Dataset, exec: Execution) -> Result<EvalReport> {
    if dataset.num_utterances() == 0 {
        return Err(Error::Precondition("cannot evaluate on an empty dataset".into()));
    }
    let (preds, golds) = predict_dataset(model, dataset, exec)?;
    let mut report = EvalReport::from_predictions(&preds, &golds, dataset.label_space)?;
    report.split = dataset.split;
    Ok(report)
}

/// Published overlap figures for the three annotator families, shown next to
/// locally measured values for orientation only.
pub const REFERENCE_OVERLAPS: [(&str, f64); 3] =
    [("gpt-3.5-turbo", 0.5298), ("llama-3-8b-chat", 0.5091), ("mixtral-8x7b-instruct", 0.4498)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorRow {
    pub backend: String,
    pub overlap: f64,
    pub labeled: usize,
    pub failed: usize,
}

/// Agreement of each pseudo-labeled corpus with the oracle sentiments, sorted
/// by descending overlap (stable for ties). Overlap is measured over the
/// transcripts each backend managed to label.
pub fn compare_annotators(
    corpora: &[PseudoLabeledCorpus],
    oracle: &BTreeMap<String, Sentiment>,
) -> Result<Vec<AnnotatorRow>> {
    let oracle_ids: BTreeSet<&str> = oracle.keys().map(String::as_str).collect();
    let mut rows = Vec::with_capacity(corpora.len());
    for corpus in corpora {
        let ids: BTreeSet<&str> = corpus
            .records
            .iter()
            .map(|r| r.id.as_str())
            .chain(corpus.failed_ids.iter().map(String::as_str))
            .collect();
        if ids != oracle_ids {
            let stray: Vec<&str> = ids.symmetric_difference(&oracle_ids).take(5).copied().collect();
            return Err(Error::Integrity(format!(
                "backend {} covers a different transcript set than the oracle (e.g. {})",
                corpus.backend,
                stray.join(", ")
            )));
        }
        let (pred, gold): (Vec<Sentiment>, Vec<Sentiment>) =
            corpus.records.iter().map(|r| (r.sentiment, oracle[&r.id])).unzip();
        let overlap = if pred.is_empty() { 0.0 } else { label_overlap(&pred, &gold)? };
        rows.push(AnnotatorRow {
            backend: corpus.backend.clone(),
            overlap,
            labeled: corpus.records.len(),
            failed: corpus.failed_ids.len(),
        });
    }
    rows.sort_by(|a, b| b.overlap.total_cmp(&a.overlap));
    Ok(rows)
}

/// Grouped bar-chart data: `group,arm,value` rows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BarChart {
    pub title: String,
    pub bars: Vec<(String, String, f64)>,
}

impl BarChart {
    pub fn new(title: impl Into<String>) -> Self {
        Self { title: title.into(), bars: Vec::new() }
    }

    pub fn push(&mut self, group: impl Into<String>, arm: impl Into<String>, value: f64) {
        self.bars.push((group.into(), arm.into(), value));
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,arm,value\n");
        for (g, a, v) in &self.bars {
            let _ = writeln!(out, "{g},{a},{v:.6}");
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_csv(title: &str, text: &str) -> Result<Self> {
        let mut chart = BarChart::new(title);
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Parse { line: i + 1, message: "expected group,arm,value".into() });
            }
            let v = parts[2]
                .parse::<f64>()
                .map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
            chart.push(parts[0], parts[1], v);
        }
        Ok(chart)
    }

    /// Horizontal text bars scaled to `width` characters for values in [0, 1].
    pub fn render(&self, width: usize) -> String {
        let label_w = self.bars.iter().map(|(g, a, _)| g.len() + a.len() + 3).max().unwrap_or(0);
        let mut out = format!("{}\n", self.title);
        for (g, a, v) in &self.bars {
            let n = (v.clamp(0.0, 1.0) * width as f64).round() as usize;
            let label = format!("{g} / {a}");
            let _ = writeln!(out, "{label:<label_w$} |{} {v:.4}", "#".repeat(n));
        }
        out
    }
}
