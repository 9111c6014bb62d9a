//! Top-K ranking metrics and the per-user interest-shift indicator.
//!
//! NDCG uses the whole-prefix normalizer `sum_{k=1..K} 1/log2(1+k)` (a fixed
//! denominator per cutoff), not the truncated ideal-DCG variant, so a list
//! with one relevant item at rank 1 of K=2 scores 1/(1+0.63093), not 1.
//! Users with no ground-truth interactions are skipped when averaging.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Ranked candidate lists (training positives already excluded) with the
/// ground-truth positives of the evaluation range.
#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub ranked: Vec<Vec<u32>>,
    pub truth: Vec<BTreeSet<u32>>,
    pub cutoffs: Vec<usize>,
}

impl EvalRequest {
    pub fn validate(&self) -> Result<()> {
        if self.ranked.len() != self.truth.len() {
            return Err(Error::Shape(format!(
                "{} ranked lists vs {} truth sets",
                self.ranked.len(),
                self.truth.len()
            )));
        }
        if self.cutoffs.iter().any(|&k| k == 0) {
            return Err(Error::InvalidArgument("cutoffs must be >= 1".into()));
        }
        for (u, list) in self.ranked.iter().enumerate() {
            let unique: BTreeSet<u32> = list.iter().copied().collect();
            if unique.len() != list.len() {
                return Err(Error::InvalidArgument(format!(
                    "ranked list of user {u} contains duplicates"
                )));
            }
        }
        Ok(())
    }
}

/// Per-user values (None = skipped for empty ground truth) plus their mean.
#[derive(Debug, Clone)]
pub struct PerUserMetric {
    pub per_user: Vec<Option<f64>>,
    pub mean: f64,
}

fn mean_of(values: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Recall@K (`hits / |truth|`) and Precision@K (`hits / K`). Errors if every
/// user has empty ground truth.
pub fn recall_precision_at_k(
    request: &EvalRequest,
    k: usize,
) -> Result<(PerUserMetric, PerUserMetric)> {
    if k == 0 {
        return Err(Error::InvalidArgument("cutoff must be >= 1".into()));
    }
    let mut recall = Vec::with_capacity(request.ranked.len());
    let mut precision = Vec::with_capacity(request.ranked.len());
    for (list, truth) in request.ranked.iter().zip(&request.truth) {
        if truth.is_empty() {
            recall.push(None);
            precision.push(None);
            continue;
        }
        let hits = list.iter().take(k).filter(|i| truth.contains(i)).count() as f64;
        recall.push(Some(hits / truth.len() as f64));
        precision.push(Some(hits / k as f64));
    }
    if recall.iter().all(Option::is_none) {
        return Err(Error::InvalidArgument(
            "no user has ground-truth interactions in the evaluation range".into(),
        ));
    }
    Ok((
        PerUserMetric {
            mean: mean_of(&recall),
            per_user: recall,
        },
        PerUserMetric {
            mean: mean_of(&precision),
            per_user: precision,
        },
    ))
}

/// NDCG@K with the whole-prefix denominator.
pub fn ndcg_at_k(request: &EvalRequest, k: usize) -> Result<PerUserMetric> {
    if k == 0 {
        return Err(Error::InvalidArgument("cutoff must be >= 1".into()));
    }
    let denom: f64 = (1..=k).map(|r| 1.0 / ((1 + r) as f64).log2()).sum();
    let mut values = Vec::with_capacity(request.ranked.len());
    for (list, truth) in request.ranked.iter().zip(&request.truth) {
        if truth.is_empty() {
            values.push(None);
            continue;
        }
        let mut dcg = 0.0;
        for (idx, item) in list.iter().take(k).enumerate() {
            if truth.contains(item) {
                dcg += 1.0 / ((idx + 2) as f64).log2();
            }
        }
        values.push(Some(dcg / denom));
    }
    Ok(PerUserMetric {
        mean: mean_of(&values),
        per_user: values,
    })
}

/// AP@K per user (`(1/|truth|) sum_k rel_k * Prec(k)`) and the mean (MAP@K).
pub fn map_at_k(request: &EvalRequest, k: usize) -> Result<PerUserMetric> {
    if k == 0 {
        return Err(Error::InvalidArgument("cutoff must be >= 1".into()));
    }
    let mut values = Vec::with_capacity(request.ranked.len());
    for (list, truth) in request.ranked.iter().zip(&request.truth) {
        if truth.is_empty() {
            values.push(None);
            continue;
        }
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (idx, item) in list.iter().take(k).enumerate() {
            if truth.contains(item) {
                hits += 1;
                ap += hits as f64 / (idx + 1) as f64;
            }
        }
        values.push(Some(ap / truth.len() as f64));
    }
    Ok(PerUserMetric {
        mean: mean_of(&values),
        per_user: values,
    })
}

/// Per-user mean squared change of normalized category proportions between
/// two blocks: `ISS_u = (1/K) sum_k (a_uk - b_uk)^2`.
pub fn interest_shift_indicator(norm_t: &Matrix, norm_prev: &Matrix) -> Result<Vec<f64>> {
    if norm_t.rows() != norm_prev.rows() || norm_t.cols() != norm_prev.cols() {
        return Err(Error::Shape(format!(
            "indicator inputs have shapes {}x{} and {}x{}",
            norm_t.rows(),
            norm_t.cols(),
            norm_prev.rows(),
            norm_prev.cols()
        )));
    }
    let k = norm_t.cols() as f64;
    Ok((0..norm_t.rows())
        .map(|u| {
            norm_t
                .row(u)
                .iter()
                .zip(norm_prev.row(u))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / k
        })
        .collect())
}

/// L1-normalize histogram rows; all-zero rows become uniform, matching the
/// interest-shift convention.
pub fn normalize_rows(hist: &[Vec<f64>]) -> Matrix {
    let rows: Vec<Vec<f64>> = hist
        .iter()
        .map(|row| {
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                row.iter().map(|v| v / sum).collect()
            } else {
                vec![1.0 / row.len() as f64; row.len()]
            }
        })
        .collect();
    Matrix::from_rows(&rows)
}

/// Users in the top `fraction` of the indicator (at least one), highest
/// first; ties broken by ascending user id.
pub fn top_shift_cohort(iss: &[f64], fraction: f64) -> Vec<usize> {
    let n = iss.len();
    if n == 0 {
        return Vec::new();
    }
    let take = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| iss[b].total_cmp(&iss[a]).then(a.cmp(&b)));
    order.truncate(take);
    order
}
