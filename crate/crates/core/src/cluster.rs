//! Item pseudo-categories from embedding-space clustering.
//!
//! Soft assignments use the kernel of the Student's t-distribution against
//! K centroids, targets are the squared-and-renormalized sharpening of those
//! assignments, and a KL self-training loss pulls assignments toward the
//! (frozen) targets. Centroids are seeded by K-means and afterwards updated
//! by the KL gradient. Hard categories come from the argmax of the target
//! row, softened memberships from a temperature softmax.

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::{softmax_in_place, sq_dist, Matrix};
use crate::seeds;

/// Centroids plus the current assignment/target matrices.
#[derive(Debug, Clone)]
pub struct ClusterState {
    pub centroids: Matrix,
    /// Degrees of freedom of the kernel.
    pub nu: f64,
    /// Membership softmax temperature.
    pub tau: f64,
    pub q_matrix: Matrix,
    pub p_matrix: Matrix,
}

impl ClusterState {
    /// K-means-seed centroids and compute initial assignments and targets.
    pub fn init(
        item_reps: &Matrix,
        k: usize,
        nu: f64,
        tau: f64,
        seed: u64,
        max_iters: usize,
    ) -> Result<Self> {
        let centroids = kmeans_init(item_reps, k, seed, max_iters)?;
        let q_matrix = soft_assign(item_reps, &centroids, nu)?;
        let p_matrix = sharpen(&q_matrix)?;
        Ok(Self {
            centroids,
            nu,
            tau,
            q_matrix,
            p_matrix,
        })
    }

    /// Recompute assignments against the current centroids and refresh the
    /// sharpened targets (done every reservoir refresh, not every step).
    pub fn refresh_targets(&mut self, item_reps: &Matrix) -> Result<()> {
        self.q_matrix = soft_assign(item_reps, &self.centroids, self.nu)?;
        self.p_matrix = sharpen(&self.q_matrix)?;
        Ok(())
    }

    /// Hard category of every item: argmax of the target row, ties to the
    /// smallest index.
    pub fn hard_assignments(&self) -> Vec<u32> {
        (0..self.p_matrix.rows())
            .map(|i| argmax(self.p_matrix.row(i)) as u32)
            .collect()
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding. Deterministic given `seed`;
/// clusters that empty out are re-seeded to the point farthest from its
/// assigned centroid.
pub fn kmeans_init(item_reps: &Matrix, k: usize, seed: u64, max_iters: usize) -> Result<Matrix> {
    let n = item_reps.rows();
    let d = item_reps.cols();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "k must lie in [1, {n}], got {k}"
        )));
    }
    let mut rng = seeds::rng(seed, "kmeans", &[k as u64]);

    // k-means++ seeding
    let mut centers: Vec<usize> = Vec::with_capacity(k);
    centers.push(rng.random_range(0..n));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(item_reps.row(i), item_reps.row(centers[0])))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            // all remaining points coincide with chosen centers
            (0..n).find(|i| !centers.contains(i)).unwrap_or(0)
        };
        centers.push(next);
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(item_reps.row(i), item_reps.row(next)));
        }
    }

    let mut centroids = Matrix::zeros(k, d);
    for (c, &idx) in centers.iter().enumerate() {
        centroids.row_mut(c).copy_from_slice(item_reps.row(idx));
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iters {
        // assignment step; ties go to the smallest centroid index
        let mut changed = false;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = sq_dist(item_reps.row(i), centroids.row(0));
            for c in 1..k {
                let dist = sq_dist(item_reps.row(i), centroids.row(c));
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        // update step
        let mut counts = vec![0usize; k];
        centroids.fill(0.0);
        for i in 0..n {
            counts[assign[i]] += 1;
            let row = centroids.row_mut(assign[i]);
            for (a, b) in row.iter_mut().zip(item_reps.row(i)) {
                *a += b;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for v in centroids.row_mut(c) {
                    *v *= inv;
                }
            } else {
                // re-seed to the globally farthest point
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(item_reps.row(a), centroids.row(assign[a]));
                        let db = sq_dist(item_reps.row(b), centroids.row(assign[b]));
                        da.total_cmp(&db)
                    })
                    .unwrap();
                centroids.row_mut(c).copy_from_slice(item_reps.row(far));
            }
        }
    }
    Ok(centroids)
}

/// Student's t-kernel soft assignments, each row normalized to a probability
/// vector: `q_ik ∝ (1 + ||h_i - mu_k||^2 / nu)^(-(nu+1)/2)`.
pub fn soft_assign(item_reps: &Matrix, centroids: &Matrix, nu: f64) -> Result<Matrix> {
    if nu <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "degrees of freedom must be positive, got {nu}"
        )));
    }
    if item_reps.cols() != centroids.cols() {
        return Err(Error::Shape(format!(
            "item reps have dim {}, centroids {}",
            item_reps.cols(),
            centroids.cols()
        )));
    }
    let n = item_reps.rows();
    let k = centroids.rows();
    let expo = -(nu + 1.0) / 2.0;
    let mut q = Matrix::zeros(n, k);
    for i in 0..n {
        let row = q.row_mut(i);
        let mut sum = 0.0;
        for c in 0..k {
            let dist = sq_dist(item_reps.row(i), centroids.row(c));
            let v = (1.0 + dist / nu).powf(expo);
            row[c] = v;
            sum += v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(q)
}

/// Sharpened targets: `p_ik ∝ q_ik^2 / f_k` with `f_k = sum_i q_ik`.
pub fn sharpen(q: &Matrix) -> Result<Matrix> {
    let n = q.rows();
    let k = q.cols();
    let mut freq = vec![0.0f64; k];
    for i in 0..n {
        for (c, v) in q.row(i).iter().enumerate() {
            freq[c] += v;
        }
    }
    if let Some(c) = freq.iter().position(|&f| f <= 0.0) {
        return Err(Error::Numeric(format!(
            "cluster {c} has zero total assignment mass (degenerate collapse)"
        )));
    }
    let mut p = Matrix::zeros(n, k);
    for i in 0..n {
        let qi = q.row(i);
        let row = p.row_mut(i);
        let mut sum = 0.0;
        for c in 0..k {
            let v = qi[c] * qi[c] / freq[c];
            row[c] = v;
            sum += v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(p)
}

/// `sum_ik p_ik ln(p_ik / q_ik)` with `0 ln 0 := 0`.
pub fn kl_divergence(p: &Matrix, q: &Matrix) -> Result<f64> {
    if p.rows() != q.rows() || p.cols() != q.cols() {
        return Err(Error::Shape("p and q shapes differ".into()));
    }
    let mut total = 0.0;
    for (i, (&pv, &qv)) in p.data().iter().zip(q.data()).enumerate() {
        if pv == 0.0 {
            continue;
        }
        if qv <= 0.0 {
            return Err(Error::Numeric(format!(
                "q is zero at flat index {i} where p is positive"
            )));
        }
        total += pv * (pv / qv).ln();
    }
    Ok(total)
}

/// KL self-training loss against frozen targets `p`: recomputes `q` from the
/// current representations and returns the divergence plus analytic
/// gradients w.r.t. the item representations and the centroids. Targets are
/// constants; only `q` is differentiated.
pub fn kl_loss(
    p: &Matrix,
    item_reps: &Matrix,
    centroids: &Matrix,
    nu: f64,
) -> Result<(f64, Matrix, Matrix)> {
    let q = soft_assign(item_reps, centroids, nu)?;
    if p.rows() != q.rows() || p.cols() != q.cols() {
        return Err(Error::Shape("target matrix does not match assignments".into()));
    }
    let value = kl_divergence(p, &q)?;

    let n = item_reps.rows();
    let k = centroids.rows();
    let d = item_reps.cols();
    let scale = (nu + 1.0) / nu;
    let mut d_reps = Matrix::zeros(n, d);
    let mut d_cent = Matrix::zeros(k, d);
    for i in 0..n {
        let hi = item_reps.row(i);
        for c in 0..k {
            let dist = sq_dist(hi, centroids.row(c));
            let coeff = scale * (p.get(i, c) - q.get(i, c)) / (1.0 + dist / nu);
            if coeff == 0.0 {
                continue;
            }
            let mu = centroids.row(c);
            let dr = d_reps.row_mut(i);
            for x in 0..d {
                dr[x] += coeff * (hi[x] - mu[x]);
            }
            let dc = d_cent.row_mut(c);
            for x in 0..d {
                dc[x] -= coeff * (hi[x] - mu[x]);
            }
        }
    }
    Ok((value, d_reps, d_cent))
}

/// Temperature-softened membership of one target row plus its hard category
/// (argmax, ties to the smallest index).
pub fn membership(p_row: &[f64], tau: f64) -> Result<(Vec<f64>, usize)> {
    if tau <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let mut c: Vec<f64> = p_row.iter().map(|v| v / tau).collect();
    softmax_in_place(&mut c);
    Ok((c, argmax(p_row)))
}
