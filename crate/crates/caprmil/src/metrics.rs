//! Slide-level evaluation: ROC AUC (binary and macro one-vs-rest), adaptive
//! expected calibration error, Cohen's kappa (plain and quadratic-weighted),
//! and balanced accuracy.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{forward, ModelState};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::train::BagSource;

/// Equal-mass bin count for the calibration error (the common setting of
/// the adaptive-binning formulation).
pub const ACE_BINS: usize = 15;

/// Probability that a random positive outranks a random negative, ties
/// counted half (Mann–Whitney). Labels must be 0/1 with both classes
/// present.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::metric(format!(
            "binary AUC got label {bad}; use the macro variant for multiclass"
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::metric("non-finite score"));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::metric(
            "AUC undefined: only one class present in labels",
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Average ranks across tie groups, then the rank-sum formulation.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0; // ranks are 1-based
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_pos_f = n_pos as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// Macro one-vs-rest AUC over softmax probabilities (`probs` is row-major
/// `[n, C]`). Classes absent from `labels` are skipped; at least two must be
/// present.
pub fn roc_auc_macro(probs: &[f64], n_classes: usize, labels: &[usize]) -> Result<f64> {
    if n_classes == 0 || probs.len() != labels.len() * n_classes {
        return Err(Error::shape(format!(
            "probs length {} does not match {} samples x {} classes",
            probs.len(),
            labels.len(),
            n_classes
        )));
    }
    let mut total = 0.0;
    let mut counted = 0;
    for c in 0..n_classes {
        let present = labels.iter().filter(|&&y| y == c).count();
        if present == 0 || present == labels.len() {
            continue;
        }
        let scores: Vec<f64> = (0..labels.len()).map(|i| probs[i * n_classes + c]).collect();
        let ovr: Vec<usize> = labels.iter().map(|&y| usize::from(y == c)).collect();
        total += roc_auc(&scores, &ovr)?;
        counted += 1;
    }
    if counted < 2 {
        return Err(Error::metric(
            "macro AUC undefined: fewer than two classes present",
        ));
    }
    Ok(total / counted as f64)
}

/// Adaptive (equal-mass) expected calibration error: sort by confidence,
/// split into `n_bins` equal-count bins with the remainder spread over the
/// leading bins, then average |bin accuracy − bin mean confidence|.
pub fn adaptive_ece(
    confidences: &[f64],
    predictions: &[usize],
    labels: &[usize],
    n_bins: usize,
) -> Result<f64> {
    let n = confidences.len();
    if predictions.len() != n || labels.len() != n {
        return Err(Error::shape(format!(
            "lengths differ: {n} confidences, {} predictions, {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if n_bins == 0 {
        return Err(Error::config("n_bins must be at least 1"));
    }
    if n_bins > n {
        return Err(Error::config(format!(
            "n_bins ({n_bins}) exceeds sample count ({n})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| {
        confidences[a]
            .partial_cmp(&confidences[b])
            .expect("finite confidence")
            .then(a.cmp(&b))
    });

    let base = n / n_bins;
    let remainder = n % n_bins;
    let mut total = 0.0;
    let mut start = 0;
    for bin in 0..n_bins {
        let size = base + usize::from(bin < remainder);
        let members = &order[start..start + size];
        start += size;
        let acc = members
            .iter()
            .filter(|&&i| predictions[i] == labels[i])
            .count() as f64
            / size as f64;
        let conf = members.iter().map(|&i| confidences[i]).sum::<f64>() / size as f64;
        total += (acc - conf).abs();
    }
    Ok(total / n_bins as f64)
}

/// Weighting scheme for Cohen's kappa.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KappaWeighting {
    /// All disagreements weigh equally.
    Unweighted,
    /// Squared-distance weights `(i−j)²/(C−1)²` (the ordinal-grading
    /// convention).
    Quadratic,
}

/// κ = 1 − (Σ w·O)/(Σ w·E): observed vs chance-expected weighted confusion
/// mass.
pub fn cohen_kappa(preds: &[usize], labels: &[usize], weighting: KappaWeighting) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} preds vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::metric("kappa undefined on empty input"));
    }
    let c = preds
        .iter()
        .chain(labels)
        .max()
        .map(|&m| m + 1)
        .unwrap_or(1);
    let n = preds.len() as f64;
    let mut observed = vec![0.0f64; c * c]; // rows = labels, cols = preds
    let mut label_marginal = vec![0.0f64; c];
    let mut pred_marginal = vec![0.0f64; c];
    for (&p, &y) in preds.iter().zip(labels) {
        observed[y * c + p] += 1.0;
        label_marginal[y] += 1.0;
        pred_marginal[p] += 1.0;
    }
    let weight = |i: usize, j: usize| -> f64 {
        match weighting {
            KappaWeighting::Unweighted => f64::from(i != j),
            KappaWeighting::Quadratic => {
                if c == 1 {
                    0.0
                } else {
                    let d = i as f64 - j as f64;
                    d * d / ((c - 1) as f64 * (c - 1) as f64)
                }
            }
        }
    };
    let mut weighted_observed = 0.0;
    let mut weighted_expected = 0.0;
    for i in 0..c {
        for j in 0..c {
            let w = weight(i, j);
            weighted_observed += w * observed[i * c + j];
            weighted_expected += w * label_marginal[i] * pred_marginal[j] / n;
        }
    }
    if weighted_expected == 0.0 {
        return Err(Error::metric(
            "kappa undefined: no chance-level disagreement mass (single class)",
        ));
    }
    Ok(1.0 - weighted_observed / weighted_expected)
}

/// Mean per-class recall over the classes present in `labels`.
pub fn balanced_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} preds vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::metric("balanced accuracy undefined on empty input"));
    }
    let c = labels.iter().max().unwrap() + 1;
    let mut hits = vec![0usize; c];
    let mut counts = vec![0usize; c];
    for (&p, &y) in preds.iter().zip(labels) {
        counts[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let mut total = 0.0;
    let mut present = 0;
    for (h, n) in hits.iter().zip(&counts) {
        if *n > 0 {
            total += *h as f64 / *n as f64;
            present += 1;
        }
    }
    Ok(total / present as f64)
}

/// Aggregate scores for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub auc: f64,
    pub ace: f64,
    pub kappa: f64,
    pub qw_kappa: f64,
    pub balanced_accuracy: f64,
    pub per_class_counts: Vec<usize>,
    pub n_samples: usize,
}

impl EvalResult {
    /// Single-line machine-readable record with fixed key order.
    pub fn machine_line(&self) -> String {
        let counts = self
            .per_class_counts
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("/");
        format!(
            "auc={:.6} ace={:.6} kappa={:.6} qw_kappa={:.6} balanced_accuracy={:.6} n_samples={} class_counts={}",
            self.auc, self.ace, self.kappa, self.qw_kappa, self.balanced_accuracy, self.n_samples, counts
        )
    }

    /// Small human-readable table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let rows = [
            ("AUC", self.auc),
            ("ACE", self.ace),
            ("kappa", self.kappa),
            ("qw kappa", self.qw_kappa),
            ("balanced acc", self.balanced_accuracy),
        ];
        for (name, v) in rows {
            let _ = writeln!(out, "{name:<14} {v:.4}");
        }
        let _ = writeln!(out, "{:<14} {}", "samples", self.n_samples);
        let _ = write!(out, "{:<14} {:?}", "class counts", self.per_class_counts);
        out
    }
}

/// Eval-mode forward over every bag in the split, then every metric at once.
/// AUC uses the positive-class probability for binary problems and macro
/// one-vs-rest otherwise. Calibration uses [`ACE_BINS`] equal-mass bins,
/// falling back to one bin per sample on splits smaller than that so tiny
/// datasets still evaluate.
pub fn evaluate<T: Scalar, S: BagSource<T> + ?Sized>(
    model: &ModelState<T>,
    split: &S,
) -> Result<EvalResult> {
    let n = split.len();
    if n == 0 {
        return Err(Error::config("cannot evaluate an empty split"));
    }
    let c = model.config.n_classes;
    let mut rng = Rng::stream(0, 0); // eval mode ignores it
    let mut probs = Vec::with_capacity(n * c);
    let mut preds = Vec::with_capacity(n);
    let mut confidences = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for idx in 0..n {
        let bag = split.get(idx)?;
        let (logits, _) = forward(model, &bag.features, &mut rng, false, false)?;
        let row: Vec<f64> = logits.data().iter().map(|v| v.to_f64()).collect();
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let p: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let (pred, &conf) = p
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite prob"))
            .expect("nonempty probs");
        probs.extend_from_slice(&p);
        preds.push(pred);
        confidences.push(conf);
        labels.push(bag.label);
    }

    let auc = if c == 2 {
        let pos_scores: Vec<f64> = (0..n).map(|i| probs[i * c + 1]).collect();
        roc_auc(&pos_scores, &labels)?
    } else {
        roc_auc_macro(&probs, c, &labels)?
    };
    let ace = adaptive_ece(&confidences, &preds, &labels, ACE_BINS.min(n))?;
    let kappa = cohen_kappa(&preds, &labels, KappaWeighting::Unweighted)?;
    let qw_kappa = cohen_kappa(&preds, &labels, KappaWeighting::Quadratic)?;
    let bal = balanced_accuracy(&preds, &labels)?;
    let mut per_class_counts = vec![0usize; c];
    for &y in &labels {
        if y < c {
            per_class_counts[y] += 1;
        }
    }
    Ok(EvalResult {
        auc,
        ace,
        kappa,
        qw_kappa,
        balanced_accuracy: bal,
        per_class_counts,
        n_samples: n,
    })
}
