//! Example-based and label-based precision, recall, and F scores.

use crate::error::{Error, Result};

/// Length-L binary label vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiHot(Vec<u8>);

impl MultiHot {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::data("multi-hot entries must be 0 or 1"));
        }
        Ok(MultiHot(bits))
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        MultiHot(bits.iter().map(|&b| b as u8).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i] == 1
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn count_positive(&self) -> usize {
        self.0.iter().filter(|&&b| b == 1).count()
    }

    /// Targets as floats for the loss.
    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| b as f64).collect()
    }
}

/// Per-example true positives, false positives, false negatives.
pub fn example_counts(pred: &MultiHot, gt: &MultiHot) -> Result<(usize, usize, usize)> {
    if pred.len() != gt.len() {
        return Err(Error::contract(format!(
            "prediction has {} labels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut tp = 0;
    let mut fp = 0;
    let mut fnn = 0;
    for (p, g) in pred.bits().iter().zip(gt.bits()) {
        match (p, g) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fnn += 1,
            _ => {}
        }
    }
    Ok((tp, fp, fnn))
}

/// `(1 + b^2) p r / (b^2 p + r)`, with 0 when precision and recall are
/// both 0.
pub fn f_beta(p: f64, r: f64, beta: f64) -> f64 {
    let denom = beta * beta * p + r;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + beta * beta) * p * r / denom
    }
}

/// Example-based precision and recall.
///
/// Degenerate conventions: an empty prediction scores precision 1 against
/// an empty ground truth and 0 otherwise; recall mirrors that with the
/// roles swapped.
pub fn example_pr(pred: &MultiHot, gt: &MultiHot) -> Result<(f64, f64)> {
    let (tp, fp, fnn) = example_counts(pred, gt)?;
    let p = if tp + fp == 0 {
        if gt.count_positive() == 0 { 1.0 } else { 0.0 }
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fnn == 0 {
        if pred.count_positive() == 0 { 1.0 } else { 0.0 }
    } else {
        tp as f64 / (tp + fnn) as f64
    };
    Ok((p, r))
}

/// Dataset-wide counts of one label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LabelCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl LabelCounts {
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            if self.tp + self.fn_ == 0 { 1.0 } else { 0.0 }
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            if self.fp == 0 { 1.0 } else { 0.0 }
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    fn occurs(&self) -> bool {
        self.tp + self.fn_ > 0
    }
}

/// All reported means plus the per-label count table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub mean_f1: f64,
    pub mean_f2: f64,
    pub mean_pe: f64,
    pub mean_re: f64,
    pub mean_pl: f64,
    pub mean_rl: f64,
    pub per_label: Vec<LabelCounts>,
    pub examples: usize,
}

/// Evaluate a prediction list against ground truth.
///
/// Example-based means average the per-example values; label-based means
/// average precision/recall computed from dataset-wide counts, over the
/// labels that occur in the ground truth at least once.
pub fn dataset_metrics(preds: &[MultiHot], gts: &[MultiHot]) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::contract("metrics need at least one example"));
    }
    if preds.len() != gts.len() {
        return Err(Error::contract(format!(
            "{} predictions against {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let l_count = gts[0].len();
    let mut per_label = vec![LabelCounts::default(); l_count];
    let (mut sum_f1, mut sum_f2, mut sum_p, mut sum_r) = (0.0, 0.0, 0.0, 0.0);
    for (pred, gt) in preds.iter().zip(gts) {
        if pred.len() != l_count || gt.len() != l_count {
            return Err(Error::contract("all examples must share one label count"));
        }
        let (p, r) = example_pr(pred, gt)?;
        sum_p += p;
        sum_r += r;
        sum_f1 += f_beta(p, r, 1.0);
        sum_f2 += f_beta(p, r, 2.0);
        for i in 0..l_count {
            match (pred.get(i), gt.get(i)) {
                (true, true) => per_label[i].tp += 1,
                (true, false) => per_label[i].fp += 1,
                (false, true) => per_label[i].fn_ += 1,
                _ => {}
            }
        }
    }
    let n = preds.len() as f64;
    let occurring: Vec<&LabelCounts> = per_label.iter().filter(|c| c.occurs()).collect();
    let ln = occurring.len() as f64;
    let (mean_pl, mean_rl) = if occurring.is_empty() {
        (0.0, 0.0)
    } else {
        (
            occurring.iter().map(|c| c.precision()).sum::<f64>() / ln,
            occurring.iter().map(|c| c.recall()).sum::<f64>() / ln,
        )
    };
    Ok(MetricsReport {
        mean_f1: sum_f1 / n,
        mean_f2: sum_f2 / n,
        mean_pe: sum_p / n,
        mean_re: sum_r / n,
        mean_pl,
        mean_rl,
        per_label,
        examples: preds.len(),
    })
}

impl MetricsReport {
    /// Plain-text report: the six means at four decimals plus the
    /// per-label table.
    pub fn render(&self, label_names: &[String]) -> String {
        let mut out = String::new();
        out.push_str(&format!("examples: {}\n", self.examples));
        out.push_str(&format!("mean_f1: {:.4}\n", self.mean_f1));
        out.push_str(&format!("mean_f2: {:.4}\n", self.mean_f2));
        out.push_str(&format!("mean_pe: {:.4}\n", self.mean_pe));
        out.push_str(&format!("mean_re: {:.4}\n", self.mean_re));
        out.push_str(&format!("mean_pl: {:.4}\n", self.mean_pl));
        out.push_str(&format!("mean_rl: {:.4}\n", self.mean_rl));
        out.push('\n');
        out.push_str("label,tp,fp,fn,p_l,r_l\n");
        for (i, c) in self.per_label.iter().enumerate() {
            let name = label_names
                .get(i)
                .cloned()
                .unwrap_or_else(|| format!("label{i}"));
            out.push_str(&format!(
                "{name},{},{},{},{:.4},{:.4}\n",
                c.tp,
                c.fp,
                c.fn_,
                c.precision(),
                c.recall()
            ));
        }
        out
    }
}
