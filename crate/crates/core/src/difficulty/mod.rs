//! Per-sample difficulty scores and their normalized weights.
//!
//! The primary score is the relative Mahalanobis distance
//! `RMD = d²_class − d²_agnostic`: large when a sample is atypical for its own
//! class yet generic overall. Scores become weights in `(0, 1)` through
//!
//! ```text
//! s_i = exp(RMD_i / T) / (max_j exp(RMD_j / T) + c)
//! ```
//!
//! evaluated in log space so no exponential can overflow.

pub mod kmeans;

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::embedding_store::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::gaussian::GaussianBank;

pub use kmeans::{kmeans_difficulty, KMeansParams};

pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_OFFSET: f64 = 1e-3;

/// Largest `f64` strictly below one.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerTag {
    Rmd,
    Md,
    Kmeans,
    Imported,
}

impl std::fmt::Display for ScorerTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScorerTag::Rmd => "rmd",
            ScorerTag::Md => "md",
            ScorerTag::Kmeans => "kmeans",
            ScorerTag::Imported => "imported",
        })
    }
}

/// How raw difficulty values are produced by [`score_dataset`].
#[derive(Debug, Clone, Copy)]
pub enum ScoreMethod<'a> {
    /// Relative Mahalanobis distance.
    Rmd(&'a GaussianBank),
    /// Class-conditional squared Mahalanobis distance only.
    Md(&'a GaussianBank),
    /// Squared distance to the nearest k-means centroid (labels ignored).
    KMeans(KMeansParams),
}

impl ScoreMethod<'_> {
    pub fn tag(&self) -> ScorerTag {
        match self {
            ScoreMethod::Rmd(_) => ScorerTag::Rmd,
            ScoreMethod::Md(_) => ScorerTag::Md,
            ScoreMethod::KMeans(_) => ScorerTag::Kmeans,
        }
    }
}

/// Raw scores and weights keyed by sample id, frozen once computed.
#[derive(Debug, Clone, PartialEq)]
pub struct DifficultyScores {
    ids: Vec<u64>,
    rmd: Vec<f64>,
    weight: Vec<f64>,
    scorer: ScorerTag,
    temperature: f64,
    offset: f64,
}

impl DifficultyScores {
    /// Build from raw scores, deriving the weights.
    pub fn from_raw(
        ids: Vec<u64>,
        rmd: Vec<f64>,
        scorer: ScorerTag,
        temperature: f64,
        offset: f64,
    ) -> Result<Self> {
        if ids.len() != rmd.len() {
            return Err(Error::Validation(format!(
                "{} ids but {} scores",
                ids.len(),
                rmd.len()
            )));
        }
        let weight = normalize_weights(&rmd, temperature, offset)?;
        Ok(Self {
            ids,
            rmd,
            weight,
            scorer,
            temperature,
            offset,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn rmd(&self) -> &[f64] {
        &self.rmd
    }

    pub fn weights(&self) -> &[f64] {
        &self.weight
    }

    pub fn scorer(&self) -> ScorerTag {
        self.scorer
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    fn index_by_id(&self) -> HashMap<u64, usize> {
        self.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect()
    }

    /// Weights reordered to follow `ids`; every id must be present.
    pub fn weights_for(&self, ids: &[u64]) -> Result<Vec<f64>> {
        let index = self.index_by_id();
        ids.iter()
            .map(|id| {
                index
                    .get(id)
                    .map(|&i| self.weight[i])
                    .ok_or_else(|| Error::Validation(format!("no score for sample id {id}")))
            })
            .collect()
    }

    /// Raw scores reordered to follow `ids`; every id must be present.
    pub fn rmd_for(&self, ids: &[u64]) -> Result<Vec<f64>> {
        let index = self.index_by_id();
        ids.iter()
            .map(|id| {
                index
                    .get(id)
                    .map(|&i| self.rmd[i])
                    .ok_or_else(|| Error::Validation(format!("no score for sample id {id}")))
            })
            .collect()
    }

    /// `id,rmd,weight` with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,rmd,weight\n");
        for i in 0..self.len() {
            writeln!(out, "{},{:.16e},{:.16e}", self.ids[i], self.rmd[i], self.weight[i]).unwrap();
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// `d²_class(feature, label) − d²_agnostic(feature)`; larger means harder.
pub fn rmd_score(bank: &GaussianBank, feature: &[f64], label: usize) -> Result<f64> {
    Ok(bank.mahalanobis_class(feature, label)? - bank.mahalanobis_agnostic(feature)?)
}

fn check_params(temperature: f64, offset: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Validation(format!("temperature must be positive, got {temperature}")));
    }
    if !(offset > 0.0 && offset.is_finite()) {
        return Err(Error::Validation(format!("offset c must be positive, got {offset}")));
    }
    Ok(())
}

/// `ln(1 + eˣ)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Map raw scores to weights in `(0, 1)`.
///
/// Evaluates `exp((r_i − r_max)/T) / (1 + c·exp(−r_max/T))` as
/// `exp((r_i − r_max)/T − softplus(ln c − r_max/T))`. The maximum is taken
/// over the whole slice. Results are clamped into the open unit interval,
/// which only bites when the exact value is closer to 0 or 1 than `f64`
/// can resolve.
pub fn normalize_weights(rmd: &[f64], temperature: f64, offset: f64) -> Result<Vec<f64>> {
    check_params(temperature, offset)?;
    if rmd.is_empty() {
        return Err(Error::Validation("cannot normalize an empty score array".into()));
    }
    if let Some(i) = rmd.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("score {i} is not finite")));
    }
    let max = rmd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_denom = softplus(offset.ln() - max / temperature);
    Ok(rmd
        .iter()
        .map(|&r| ((r - max) / temperature - log_denom).exp().clamp(f64::MIN_POSITIVE, BELOW_ONE))
        .collect())
}

/// Score every sample of `ds` once; the result is fixed for training.
pub fn score_dataset(
    ds: &EmbeddingDataset,
    method: ScoreMethod<'_>,
    temperature: f64,
    offset: f64,
) -> Result<DifficultyScores> {
    check_params(temperature, offset)?;
    let raw = match method {
        ScoreMethod::Rmd(bank) | ScoreMethod::Md(bank) => {
            if ds.num_classes() > bank.num_classes() || ds.dim() != bank.dim() {
                return Err(Error::Validation(format!(
                    "dataset (K={}, D={}) is incompatible with bank (K={}, D={})",
                    ds.num_classes(),
                    ds.dim(),
                    bank.num_classes(),
                    bank.dim()
                )));
            }
            let md_only = matches!(method, ScoreMethod::Md(_));
            (0..ds.len())
                .into_par_iter()
                .map(|i| {
                    let f = ds.row_f64(i);
                    if md_only {
                        bank.mahalanobis_class(&f, ds.label(i))
                    } else {
                        rmd_score(bank, &f, ds.label(i))
                    }
                })
                .collect::<Result<Vec<_>>>()?
        }
        ScoreMethod::KMeans(params) => kmeans_difficulty(ds, &params)?,
    };
    DifficultyScores::from_raw(ds.ids().to_vec(), raw, method.tag(), temperature, offset)
}

/// Average raw scores per id across runs and recompute the weights.
///
/// Output follows the id order of the first run.
pub fn average_scores(runs: &[DifficultyScores]) -> Result<DifficultyScores> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Validation("no runs to average".into()))?;
    let mut sums = first.rmd.clone();
    for (r, run) in runs.iter().enumerate().skip(1) {
        if run.temperature != first.temperature || run.offset != first.offset {
            return Err(Error::Validation(format!(
                "run {r} uses (T={}, c={}) but run 0 uses (T={}, c={})",
                run.temperature, run.offset, first.temperature, first.offset
            )));
        }
        if run.len() != first.len() {
            return Err(Error::Validation(format!(
                "run {r} has {} ids, run 0 has {}",
                run.len(),
                first.len()
            )));
        }
        let aligned = run.rmd_for(&first.ids)?;
        for (s, v) in sums.iter_mut().zip(aligned) {
            *s += v;
        }
    }
    let n = runs.len() as f64;
    let mean = sums.into_iter().map(|s| s / n).collect();
    DifficultyScores::from_raw(
        first.ids.clone(),
        mean,
        first.scorer,
        first.temperature,
        first.offset,
    )
}

/// Parse `id,score[,...]` rows (an optional header is skipped) and align them
/// with the ids of `ds`.
pub fn parse_scores(
    text: &str,
    ds: &EmbeddingDataset,
    temperature: f64,
    offset: f64,
) -> Result<DifficultyScores> {
    let mut by_id = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let row = lineno + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let id_field = fields.next().unwrap_or("");
        let id = match id_field.parse::<u64>() {
            Ok(id) => id,
            Err(_) if row == 1 => continue,
            Err(e) => {
                return Err(Error::Parse {
                    row,
                    message: format!("bad id {id_field:?}: {e}"),
                })
            }
        };
        let score_field = fields.next().ok_or_else(|| Error::Parse {
            row,
            message: "missing score column".into(),
        })?;
        let score = score_field.parse::<f64>().map_err(|e| Error::Parse {
            row,
            message: format!("bad score {score_field:?}: {e}"),
        })?;
        if by_id.insert(id, score).is_some() {
            return Err(Error::Validation(format!("sample id {id} appears twice")));
        }
    }
    let mut rmd = Vec::with_capacity(ds.len());
    for &id in ds.ids() {
        match by_id.get(&id) {
            Some(&v) => rmd.push(v),
            None => return Err(Error::Validation(format!("scores file is missing sample id {id}"))),
        }
    }
    if by_id.len() != ds.len() {
        let known: HashSet<u64> = ds.ids().iter().copied().collect();
        let mut extra: Vec<u64> = by_id.keys().filter(|id| !known.contains(id)).copied().collect();
        extra.sort_unstable();
        return Err(Error::Validation(format!(
            "scores file has id {} not present in the dataset",
            extra[0]
        )));
    }
    DifficultyScores::from_raw(ds.ids().to_vec(), rmd, ScorerTag::Imported, temperature, offset)
}

/// Import externally computed difficulty values (e.g. per-sample training loss).
pub fn import_scores(
    path: impl AsRef<Path>,
    ds: &EmbeddingDataset,
    temperature: f64,
    offset: f64,
) -> Result<DifficultyScores> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores(&text, ds, temperature, offset)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassRanking {
    pub class: usize,
    /// Largest scores first.
    pub hardest: Vec<u64>,
    /// Smallest scores first.
    pub easiest: Vec<u64>,
}

/// Hardest and easiest `top_k` ids per class; ties broken by ascending id.
pub fn rank_report(
    scores: &DifficultyScores,
    ds: &EmbeddingDataset,
    top_k: usize,
) -> Result<Vec<ClassRanking>> {
    if top_k == 0 {
        return Err(Error::Validation("top_k must be at least 1".into()));
    }
    let rmd = scores.rmd_for(ds.ids())?;
    let mut per_class: Vec<Vec<(f64, u64)>> = vec![Vec::new(); ds.num_classes()];
    for i in 0..ds.len() {
        per_class[ds.label(i)].push((rmd[i], ds.ids()[i]));
    }
    Ok(per_class
        .into_iter()
        .enumerate()
        .map(|(class, mut members)| {
            members.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let hardest = members.iter().take(top_k).map(|m| m.1).collect();
            members.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let easiest = members.iter().take(top_k).map(|m| m.1).collect();
            ClassRanking {
                class,
                hardest,
                easiest,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const T: f64 = 0.7;
    const C: f64 = 1e-3;

    #[test]
    fn two_point_weights() {
        let s = normalize_weights(&[0.0, 0.7 * 2f64.ln()], T, C).unwrap();
        assert!((s[0] - 1.0 / 2.001).abs() < 1e-14);
        assert!((s[1] - 2.0 / 2.001).abs() < 1e-14);
    }

    #[test]
    fn single_sample_weight() {
        let r = -0.4;
        let s = normalize_weights(&[r], T, C).unwrap();
        assert!((s[0] - 1.0 / (1.0 + C * (-r / T).exp())).abs() < 1e-15);
        assert!(s[0] < 1.0);
    }

    #[test]
    fn large_scores_do_not_overflow() {
        let s = normalize_weights(&[1000.0, 999.0], T, C).unwrap();
        assert!(s.iter().all(|v| v.is_finite() && *v > 0.0 && *v < 1.0));
        assert!((s[1] / s[0] - (-1.0 / T).exp()).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(normalize_weights(&[f64::NAN], T, C).is_err());
        assert!(normalize_weights(&[1.0], 0.0, C).is_err());
        assert!(normalize_weights(&[1.0], T, 0.0).is_err());
        assert!(normalize_weights(&[], T, C).is_err());
    }

    fn ds4() -> EmbeddingDataset {
        EmbeddingDataset::new(
            vec![0.0, 1.0, 2.0, 3.0],
            1,
            vec![0, 0, 1, 1],
            vec![40, 10, 30, 20],
            2,
        )
        .unwrap()
    }

    #[test]
    fn averaging_two_runs() {
        let a = DifficultyScores::from_raw(vec![1, 2], vec![0.0, 2.0], ScorerTag::Rmd, T, C).unwrap();
        let b = DifficultyScores::from_raw(vec![2, 1], vec![0.0, 2.0], ScorerTag::Rmd, T, C).unwrap();
        let avg = average_scores(&[a.clone(), b]).unwrap();
        assert_eq!(avg.rmd(), &[1.0, 1.0]);
        assert_eq!(avg.weights()[0], avg.weights()[1]);
        assert_eq!(average_scores(&[a.clone(), a.clone()]).unwrap(), a);
    }

    #[test]
    fn averaging_rejects_mismatched_ids() {
        let a = DifficultyScores::from_raw(vec![1, 2], vec![0.0, 2.0], ScorerTag::Rmd, T, C).unwrap();
        let b = DifficultyScores::from_raw(vec![1, 3], vec![0.0, 2.0], ScorerTag::Rmd, T, C).unwrap();
        assert!(average_scores(&[a, b]).is_err());
    }

    #[test]
    fn import_round_trip_and_coverage() {
        let ds = ds4();
        let s = DifficultyScores::from_raw(ds.ids().to_vec(), vec![0.3, -1.25, 7.0, 1e-9], ScorerTag::Rmd, T, C)
            .unwrap();
        let back = parse_scores(&s.to_csv(), &ds, T, C).unwrap();
        assert_eq!(back.weights(), s.weights());
        assert_eq!(back.scorer(), ScorerTag::Imported);

        let err = parse_scores("40,1\n10,1\n30,1\n", &ds, T, C).unwrap_err();
        assert!(err.to_string().contains("missing sample id 20"), "{err}");
        let err = parse_scores("40,1\n10,1\n30,1\n20,1\n99,1\n", &ds, T, C).unwrap_err();
        assert!(err.to_string().contains("99"), "{err}");

        let uniform = parse_scores("id,score\n40,2\n10,2\n30,2\n20,2\n", &ds, T, C).unwrap();
        assert!(uniform.weights().windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn ranking_contract() {
        let ds = ds4();
        // class 0: ids 40, 10; class 1: ids 30, 20 (tied)
        let s = DifficultyScores::from_raw(ds.ids().to_vec(), vec![5.0, 1.0, 2.0, 2.0], ScorerTag::Rmd, T, C)
            .unwrap();
        let r = rank_report(&s, &ds, 2).unwrap();
        assert_eq!(r[0].hardest, vec![40, 10]);
        assert_eq!(r[0].easiest, vec![10, 40]);
        assert_eq!(r[1].hardest, vec![20, 30]);
        assert_eq!(r[1].easiest, vec![20, 30]);
        let r1 = rank_report(&s, &ds, 1).unwrap();
        assert_eq!(r1[1].hardest, vec![20]);
        assert!(rank_report(&s, &ds, 0).is_err());
    }
}
