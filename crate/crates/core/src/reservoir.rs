//! Per-user negative reservoir with interest-shift-driven sampling.
//!
//! Each user's reservoir holds their top-Q ranked negatives. A Dirichlet
//! prior over item categories is built from the user's interest shift between
//! consecutive blocks (losing interest in a category raises its prior mass),
//! the observed reservoir category counts act as multinomial evidence, and
//! the closed-form posterior mean weights each reservoir slot. Training
//! negatives are multinomial draws from those slot probabilities, so one item
//! can be drawn with multiplicity greater than one.

use rand::Rng;

use crate::backbone::RankingContext;
use crate::data::CategoryHistogram;
use crate::error::{Error, Result};
use crate::matrix::{softmax_in_place, Matrix};
use crate::seeds;

/// Reservoir hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct ReservoirConfig {
    /// Reservoir size per user (top-Q negatives).
    pub q: usize,
    /// Prior strength lambda.
    pub prior_strength: f64,
    /// Number of item categories.
    pub k: usize,
    /// Epochs between reservoir rebuilds.
    pub refresh_every: usize,
    /// Ablation switch: build the prior from softmax(+shift) instead of
    /// softmax(-shift).
    pub flip_prior_sign: bool,
}

impl Default for ReservoirConfig {
    fn default() -> Self {
        Self {
            q: 100,
            prior_strength: 1.0,
            k: 10,
            refresh_every: 2,
            flip_prior_sign: false,
        }
    }
}

impl ReservoirConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q < 1 {
            return Err(Error::InvalidArgument("reservoir size must be >= 1".into()));
        }
        if self.prior_strength <= 0.0 {
            return Err(Error::InvalidArgument(
                "prior strength must be positive".into(),
            ));
        }
        if self.k < 1 {
            return Err(Error::InvalidArgument("category count must be >= 1".into()));
        }
        if self.refresh_every < 1 {
            return Err(Error::InvalidArgument(
                "refresh interval must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-user reservoir contents and the derived sampling distribution.
#[derive(Debug, Clone)]
pub struct ReservoirState {
    /// Top-Q negative item ids per user, score-descending.
    pub items: Vec<Vec<u32>>,
    /// Dirichlet prior parameters, one row per user.
    pub alpha: Matrix,
    /// Posterior mean over categories, one row per user.
    pub theta_hat: Matrix,
    /// Reservoir category counts (n_users x k, flat).
    counts: Vec<u32>,
    /// Sampling probability over each user's reservoir slots.
    pub slot_probs: Vec<Vec<f64>>,
    pub k: usize,
}

impl ReservoirState {
    pub fn n_users(&self) -> usize {
        self.items.len()
    }

    pub fn counts_row(&self, u: usize) -> &[u32] {
        &self.counts[u * self.k..(u + 1) * self.k]
    }

    /// Debug dump: one line per user with prior, posterior mean, and items.
    pub fn dump(&self) -> String {
        let mut s = String::from("user\talpha\ttheta_hat\treservoir\n");
        for u in 0..self.n_users() {
            let fmt = |row: &[f64]| {
                row.iter()
                    .map(|v| format!("{v:.6}"))
                    .collect::<Vec<_>>()
                    .join(",")
            };
            let items = self.items[u]
                .iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(",");
            s.push_str(&format!(
                "{u}\t{}\t{}\t{}\n",
                fmt(self.alpha.row(u)),
                fmt(self.theta_hat.row(u)),
                items
            ));
        }
        s
    }
}

/// Multiset of negatives drawn for one user: parallel item/multiplicity
/// vectors whose multiplicities sum to the requested draw count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeDraw {
    pub items: Vec<u32>,
    pub multiplicities: Vec<u32>,
}

impl NegativeDraw {
    pub fn total(&self) -> u32 {
        self.multiplicities.iter().sum()
    }
}

/// Difference of L1-normalized histogram rows. A zero-sum row is treated as
/// the uniform distribution over the K categories, which keeps the shift
/// well-defined for users with no interactions in a block.
pub fn interest_shift(h_t: &[f64], h_prev: &[f64]) -> Result<Vec<f64>> {
    if h_t.len() != h_prev.len() {
        return Err(Error::Shape(format!(
            "histogram rows have lengths {} and {}",
            h_t.len(),
            h_prev.len()
        )));
    }
    let k = h_t.len();
    let norm = |row: &[f64]| -> Vec<f64> {
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            row.iter().map(|v| v / sum).collect()
        } else {
            vec![1.0 / k as f64; k]
        }
    };
    let a = norm(h_t);
    let b = norm(h_prev);
    Ok(a.iter().zip(&b).map(|(x, y)| x - y).collect())
}

/// Dirichlet prior from the interest shift: `alpha = lambda * Q * softmax(-shift)`.
/// Categories the user is abandoning (negative shift) receive more prior mass.
pub fn prior_alpha(shift: &[f64], lambda: f64, q: usize) -> Result<Vec<f64>> {
    if lambda <= 0.0 {
        return Err(Error::InvalidArgument(
            "prior strength must be positive".into(),
        ));
    }
    if q < 1 {
        return Err(Error::InvalidArgument("reservoir size must be >= 1".into()));
    }
    if shift.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite interest shift entry".into()));
    }
    let mut alpha: Vec<f64> = shift.iter().map(|v| -v).collect();
    softmax_in_place(&mut alpha);
    let scale = lambda * q as f64;
    for v in &mut alpha {
        *v *= scale;
    }
    Ok(alpha)
}

/// Mean of the Dirichlet posterior after observing category counts:
/// `theta_k = (alpha_k + c_k) / sum_j (alpha_j + c_j)`.
pub fn posterior_theta(alpha: &[f64], counts: &[u32]) -> Result<Vec<f64>> {
    if alpha.len() != counts.len() {
        return Err(Error::Shape(format!(
            "alpha has {} entries, counts {}",
            alpha.len(),
            counts.len()
        )));
    }
    if alpha.iter().any(|&a| a <= 0.0) {
        return Err(Error::InvalidArgument(
            "prior parameters must be strictly positive".into(),
        ));
    }
    let total: f64 = alpha
        .iter()
        .zip(counts)
        .map(|(a, &c)| a + c as f64)
        .sum();
    Ok(alpha
        .iter()
        .zip(counts)
        .map(|(a, &c)| (a + c as f64) / total)
        .collect())
}

/// Probability of each reservoir slot: the posterior mass of the slot item's
/// category, normalized over the reservoir.
pub fn sampling_probs(theta_hat: &[f64], reservoir_items: &[u32], g: &[u32]) -> Result<Vec<f64>> {
    if reservoir_items.is_empty() {
        return Err(Error::InvalidArgument("empty reservoir".into()));
    }
    let k = theta_hat.len();
    let mut weights = Vec::with_capacity(reservoir_items.len());
    for &item in reservoir_items {
        let cat = *g
            .get(item as usize)
            .ok_or_else(|| Error::InvalidArgument(format!("item {item} has no category")))?
            as usize;
        if cat >= k {
            return Err(Error::InvalidArgument(format!(
                "item {item} has category {cat}, expected < {k}"
            )));
        }
        weights.push(theta_hat[cat]);
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Numeric(
            "reservoir has zero total posterior mass".into(),
        ));
    }
    for w in &mut weights {
        *w /= total;
    }
    Ok(weights)
}

/// Rebuild the reservoir state for every user: tally reservoir category
/// counts, build the prior from the block-over-block interest shift, take the
/// posterior mean, and derive the slot sampling distribution. Users with an
/// empty reservoir get an empty slot row and are skipped at draw time.
pub fn update_reservoir(
    ranking: &RankingContext,
    hist_t: &CategoryHistogram,
    hist_prev: &CategoryHistogram,
    categories: &[u32],
    config: &ReservoirConfig,
) -> Result<ReservoirState> {
    config.validate()?;
    let n_users = ranking.top_negatives.len();
    let k = config.k;
    if hist_t.k != k || hist_prev.k != k {
        return Err(Error::Shape(format!(
            "histograms have {} / {} categories, config says {k}",
            hist_t.k, hist_prev.k
        )));
    }

    let mut items = Vec::with_capacity(n_users);
    let mut alpha = Matrix::zeros(n_users, k);
    let mut theta = Matrix::zeros(n_users, k);
    let mut counts = vec![0u32; n_users * k];
    let mut slot_probs = Vec::with_capacity(n_users);

    for u in 0..n_users {
        let reservoir: Vec<u32> = ranking.top_negatives[u].iter().map(|s| s.item).collect();
        let crow = &mut counts[u * k..(u + 1) * k];
        for &item in &reservoir {
            let cat = *categories
                .get(item as usize)
                .ok_or_else(|| Error::InvalidArgument(format!("item {item} has no category")))?
                as usize;
            if cat >= k {
                return Err(Error::InvalidArgument(format!(
                    "item {item} has category {cat}, expected < {k}"
                )));
            }
            crow[cat] += 1;
        }

        // Users that joined after block t-1 have rows only in the newer
        // histogram; missing rows count as no interactions (uniform fallback).
        let h_t = if u < hist_t.n_users {
            hist_t.row_f64(u)
        } else {
            vec![0.0; k]
        };
        let h_prev = if u < hist_prev.n_users {
            hist_prev.row_f64(u)
        } else {
            vec![0.0; k]
        };
        let mut shift = interest_shift(&h_t, &h_prev)?;
        if config.flip_prior_sign {
            for v in &mut shift {
                *v = -*v;
            }
        }
        let a = prior_alpha(&shift, config.prior_strength, config.q)?;
        let crow = &counts[u * k..(u + 1) * k];
        let th = posterior_theta(&a, crow)?;
        let probs = if reservoir.is_empty() {
            Vec::new()
        } else {
            sampling_probs(&th, &reservoir, categories)?
        };

        alpha.row_mut(u).copy_from_slice(&a);
        theta.row_mut(u).copy_from_slice(&th);
        slot_probs.push(probs);
        items.push(reservoir);
    }

    Ok(ReservoirState {
        items,
        alpha,
        theta_hat: theta,
        counts,
        slot_probs,
        k,
    })
}

/// Multinomial draw of `n` negatives (with replacement) from a user's
/// reservoir slot distribution. Deterministic given the seed. Errors on an
/// empty reservoir; the trainer treats that as a signal to fall back to
/// uniform negatives.
pub fn draw_negatives(
    state: &ReservoirState,
    user: u32,
    n: usize,
    rng_seed: u64,
) -> Result<NegativeDraw> {
    let u = user as usize;
    if u >= state.n_users() {
        return Err(Error::InvalidArgument(format!("user {user} out of range")));
    }
    let probs = &state.slot_probs[u];
    if probs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "user {user} has an empty reservoir"
        )));
    }
    let mut cumulative = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for &p in probs {
        acc += p;
        cumulative.push(acc);
    }
    let total = acc;

    let mut rng = seeds::rng(rng_seed, "reservoir-draw", &[u as u64]);
    let mut slot_counts = vec![0u32; probs.len()];
    for _ in 0..n {
        let x = rng.random::<f64>() * total;
        let slot = cumulative.partition_point(|&c| c <= x).min(probs.len() - 1);
        slot_counts[slot] += 1;
    }

    let mut items = Vec::new();
    let mut multiplicities = Vec::new();
    for (slot, &count) in slot_counts.iter().enumerate() {
        if count > 0 {
            items.push(state.items[u][slot]);
            multiplicities.push(count);
        }
    }
    Ok(NegativeDraw {
        items,
        multiplicities,
    })
}
