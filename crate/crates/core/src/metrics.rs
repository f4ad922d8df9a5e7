//! Calibration, selective-classification and detection metrics.
//!
//! Conventions:
//! - Sample order doubles as the id order for every tie-break.
//! - For detection, positives are the events to detect (errors or OOD
//!   inputs) and larger scores must mean "more likely positive".

use std::collections::BTreeMap;

use serde::Serialize;

use crate::classifier::{argmax, entropy, log_sum_exp, softmax};
use crate::difficulty::DifficultyScores;
use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 15;

fn check_shape(probs: &[f64], labels: &[usize], num_classes: usize) -> Result<usize> {
    if num_classes == 0 || probs.len() != labels.len() * num_classes {
        return Err(Error::Validation(format!(
            "{} probabilities do not match {} labels × {num_classes} classes",
            probs.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Validation("no samples to evaluate".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::ClassIndex { index: y, num_classes });
    }
    Ok(labels.len())
}

fn correct_flags(probs: &[f64], labels: &[usize], num_classes: usize) -> Vec<bool> {
    probs
        .chunks_exact(num_classes)
        .zip(labels)
        .map(|(row, &y)| argmax(row) == y)
        .collect()
}

pub fn accuracy(probs: &[f64], labels: &[usize], num_classes: usize) -> Result<f64> {
    let n = check_shape(probs, labels, num_classes)?;
    let hits = correct_flags(probs, labels, num_classes).iter().filter(|&&c| c).count();
    Ok(hits as f64 / n as f64)
}

/// Mean negative log-likelihood of the true class.
pub fn nll(probs: &[f64], labels: &[usize], num_classes: usize) -> Result<f64> {
    let n = check_shape(probs, labels, num_classes)?;
    let total: f64 = probs
        .chunks_exact(num_classes)
        .zip(labels)
        .map(|(row, &y)| -row[y].max(f64::MIN_POSITIVE).ln())
        .sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinStat {
    pub confidence: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub ece: f64,
    pub bins: Vec<BinStat>,
}

/// Sizes of `bins` contiguous groups over `n` items, larger groups first.
pub fn equal_mass_sizes(n: usize, bins: usize) -> Vec<usize> {
    let (base, extra) = (n / bins, n % bins);
    (0..bins).map(|b| base + usize::from(b < extra)).collect()
}

/// Equal-mass expected calibration error of the top-1 prediction.
pub fn ece(probs: &[f64], labels: &[usize], num_classes: usize, bins: usize) -> Result<Calibration> {
    let n = check_shape(probs, labels, num_classes)?;
    if bins == 0 || n < bins {
        return Err(Error::Validation(format!(
            "equal-mass ECE needs at least as many samples as bins ({n} < {bins})"
        )));
    }
    let conf: Vec<f64> = probs
        .chunks_exact(num_classes)
        .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let correct = correct_flags(probs, labels, num_classes);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| conf[a].total_cmp(&conf[b]).then(a.cmp(&b)));

    let mut start = 0;
    let mut ece = 0.0;
    let mut stats = Vec::with_capacity(bins);
    for size in equal_mass_sizes(n, bins) {
        let members = &order[start..start + size];
        start += size;
        let c = members.iter().map(|&i| conf[i]).sum::<f64>() / size as f64;
        let a = members.iter().filter(|&&i| correct[i]).count() as f64 / size as f64;
        ece += size as f64 / n as f64 * (a - c).abs();
        stats.push(BinStat {
            confidence: c,
            accuracy: a,
            count: size,
        });
    }
    Ok(Calibration { ece, bins: stats })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetectionMetrics {
    pub auroc: f64,
    pub aupr: f64,
    pub fpr_at_95_tpr: f64,
}

/// AUROC, AUPR and FPR at 95% TPR for detecting `positives` with `scores`.
pub fn detection_metrics(scores: &[f64], positives: &[bool]) -> Result<DetectionMetrics> {
    if scores.len() != positives.len() {
        return Err(Error::Validation(format!(
            "{} scores for {} labels",
            scores.len(),
            positives.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Validation(format!("score {i} is NaN")));
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Validation(
            "detection metrics need at least one positive and one negative".into(),
        ));
    }

    // descending by score; tied scores form one threshold group
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    // Mann-Whitney U with mid-ranks, counted from the top: each positive
    // earns the negatives below it plus half of those tied with it.
    let mut u = 0.0;
    let mut aupr = 0.0;
    let mut fpr95 = None;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut g = 0;
    while g < order.len() {
        let mut end = g;
        while end < order.len() && scores[order[end]] == scores[order[g]] {
            end += 1;
        }
        let group_pos = order[g..end].iter().filter(|&&i| positives[i]).count();
        let group_neg = (end - g) - group_pos;
        let neg_below = n_neg - fp - group_neg;
        u += group_pos as f64 * (neg_below as f64 + 0.5 * group_neg as f64);

        let prev_tp = tp;
        tp += group_pos;
        fp += group_neg;
        if tp > prev_tp {
            let precision = tp as f64 / (tp + fp) as f64;
            aupr += (tp - prev_tp) as f64 / n_pos as f64 * precision;
        }
        if fpr95.is_none() && tp * 100 >= 95 * n_pos {
            fpr95 = Some(fp as f64 / n_neg as f64);
        }
        g = end;
    }
    Ok(DetectionMetrics {
        auroc: u / (n_pos as f64 * n_neg as f64),
        aupr,
        fpr_at_95_tpr: fpr95.expect("full threshold sweep reaches TPR 1"),
    })
}

/// Uncertainty scores oriented so that larger means more uncertain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UncertaintyScores {
    pub msp_negated: Vec<f64>,
    pub entropy: Vec<f64>,
    pub maxlogit_negated: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyKind {
    Msp,
    Entropy,
    MaxLogit,
}

impl UncertaintyKind {
    pub const ALL: [UncertaintyKind; 3] = [UncertaintyKind::Msp, UncertaintyKind::Entropy, UncertaintyKind::MaxLogit];

    pub fn name(self) -> &'static str {
        match self {
            UncertaintyKind::Msp => "msp",
            UncertaintyKind::Entropy => "entropy",
            UncertaintyKind::MaxLogit => "maxlogit",
        }
    }
}

impl std::str::FromStr for UncertaintyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        UncertaintyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown uncertainty score {s:?}")))
    }
}

impl UncertaintyScores {
    pub fn get(&self, kind: UncertaintyKind) -> &[f64] {
        match kind {
            UncertaintyKind::Msp => &self.msp_negated,
            UncertaintyKind::Entropy => &self.entropy,
            UncertaintyKind::MaxLogit => &self.maxlogit_negated,
        }
    }
}

pub fn uncertainty_scores(logits: &[f64], num_classes: usize) -> Result<UncertaintyScores> {
    if num_classes == 0 || !logits.len().is_multiple_of(num_classes) {
        return Err(Error::Validation("logit buffer does not match class count".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite logit".into()));
    }
    let mut out = UncertaintyScores {
        msp_negated: Vec::new(),
        entropy: Vec::new(),
        maxlogit_negated: Vec::new(),
    };
    for z in logits.chunks_exact(num_classes) {
        let p = softmax(z);
        let max_logit = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // ln p_max = max − lse keeps the saturated case exact
        out.msp_negated.push(-(max_logit - log_sum_exp(z)).exp());
        out.entropy.push(entropy(&p, num_classes)?[0]);
        out.maxlogit_negated.push(-max_logit);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskCoveragePoint {
    pub rejection_rate: f64,
    pub kept: usize,
    /// Accuracy on the retained samples; `None` when nothing is retained.
    pub accuracy: Option<f64>,
}

/// Rejection rates `0.00, 0.05, ..., 0.95`.
pub fn default_rejection_grid() -> Vec<f64> {
    (0..20).map(|i| i as f64 / 20.0).collect()
}

/// Accuracy after rejecting the `⌈rN⌉` most uncertain samples for each rate.
pub fn risk_coverage(
    probs: &[f64],
    labels: &[usize],
    num_classes: usize,
    uncertainty: &[f64],
    rates: &[f64],
) -> Result<Vec<RiskCoveragePoint>> {
    let n = check_shape(probs, labels, num_classes)?;
    if uncertainty.len() != n {
        return Err(Error::Validation(format!("{} uncertainty values for {n} samples", uncertainty.len())));
    }
    if let Some(r) = rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::Validation(format!("rejection rate {r} outside [0, 1]")));
    }
    let correct = correct_flags(probs, labels, num_classes);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| uncertainty[b].total_cmp(&uncertainty[a]).then(a.cmp(&b)));
    Ok(rates
        .iter()
        .map(|&r| {
            // tolerance absorbs grid values such as 3 × 0.05 landing above 0.15
            let reject = ((r * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n);
            let kept = &order[reject..];
            let accuracy = (!kept.is_empty())
                .then(|| kept.iter().filter(|&&i| correct[i]).count() as f64 / kept.len() as f64);
            RiskCoveragePoint {
                rejection_rate: r,
                kept: kept.len(),
                accuracy,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketError {
    /// 1-based rank of the hardest sample in the bucket.
    pub first_rank: usize,
    /// 1-based rank of the easiest sample in the bucket.
    pub last_rank: usize,
    pub count: usize,
    pub error_rate: f64,
}

/// Misclassification rate over consecutive buckets of samples ranked from
/// hardest to easiest. `predictions` and `labels` follow the order of
/// `scores`.
pub fn bucket_error(
    scores: &DifficultyScores,
    predictions: &[usize],
    labels: &[usize],
    bucket_size: usize,
) -> Result<Vec<BucketError>> {
    let n = scores.len();
    if bucket_size == 0 {
        return Err(Error::Validation("bucket size must be at least 1".into()));
    }
    if predictions.len() != n || labels.len() != n {
        return Err(Error::Validation(format!(
            "{} predictions and {} labels for {n} scores",
            predictions.len(),
            labels.len()
        )));
    }
    let rmd = scores.rmd();
    let ids = scores.ids();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| rmd[b].total_cmp(&rmd[a]).then(ids[a].cmp(&ids[b])));
    Ok(order
        .chunks(bucket_size)
        .enumerate()
        .map(|(b, members)| {
            let wrong = members.iter().filter(|&&i| predictions[i] != labels[i]).count();
            BucketError {
                first_rank: b * bucket_size + 1,
                last_rank: b * bucket_size + members.len(),
                count: members.len(),
                error_rate: wrong as f64 / members.len() as f64,
            }
        })
        .collect())
}

/// Everything reported for one model on one split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub num_samples: usize,
    pub accuracy: f64,
    pub ece: f64,
    pub nll: f64,
    pub bins: Vec<BinStat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection: Option<BTreeMap<String, DetectionMetrics>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub risk_coverage: Option<Vec<RiskCoveragePoint>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bucket_errors: Option<Vec<BucketError>>,
}

impl EvalReport {
    /// Accuracy, ECE (with `bins` equal-mass bins, capped at N) and NLL.
    pub fn basic(probs: &[f64], labels: &[usize], num_classes: usize, bins: usize) -> Result<Self> {
        let n = check_shape(probs, labels, num_classes)?;
        let cal = ece(probs, labels, num_classes, bins.min(n))?;
        Ok(Self {
            num_samples: n,
            accuracy: accuracy(probs, labels, num_classes)?,
            ece: cal.ece,
            nll: nll(probs, labels, num_classes)?,
            bins: cal.bins,
            detection: None,
            risk_coverage: None,
            bucket_errors: None,
        })
    }

    /// Flat `metric,value` rows.
    pub fn to_csv_rows(&self) -> String {
        let mut out = String::from("metric,value\n");
        let mut row = |k: String, v: f64| out.push_str(&format!("{k},{v}\n"));
        row("num_samples".into(), self.num_samples as f64);
        row("accuracy".into(), self.accuracy);
        row("ece".into(), self.ece);
        row("nll".into(), self.nll);
        if let Some(det) = &self.detection {
            for (name, m) in det {
                row(format!("{name}.auroc"), m.auroc);
                row(format!("{name}.aupr"), m.aupr);
                row(format!("{name}.fpr_at_95_tpr"), m.fpr_at_95_tpr);
            }
        }
        if let Some(rc) = &self.risk_coverage {
            for p in rc {
                if let Some(a) = p.accuracy {
                    row(format!("risk_coverage.{:.2}", p.rejection_rate), a);
                }
            }
        }
        if let Some(be) = &self.bucket_errors {
            for b in be {
                row(format!("bucket_error.{}-{}", b.first_rank, b.last_rank), b.error_rate);
            }
        }
        out
    }

    /// Reliability-diagram data: `bin,confidence,accuracy,count`.
    pub fn reliability_csv(&self) -> String {
        let mut out = String::from("bin,confidence,accuracy,count\n");
        for (b, s) in self.bins.iter().enumerate() {
            out.push_str(&format!("{b},{},{},{}\n", s.confidence, s.accuracy, s.count));
        }
        out
    }
}

pub fn risk_coverage_csv(points: &[RiskCoveragePoint]) -> String {
    let mut out = String::from("rejection_rate,kept,accuracy\n");
    for p in points {
        let acc = p.accuracy.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", p.rejection_rate, p.kept, acc));
    }
    out
}
