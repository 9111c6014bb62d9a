//! Training objectives and their analytic gradients with respect to the node
//! representations: pairwise ranking (BPR), the multiplicity-weighted variant
//! fed by the reservoir, local-structure distillation, contrastive
//! distillation, and the weighted total.
//!
//! A triple with multiplicity N is accumulated as N repeated observations, so
//! multiplicity-N loss and gradients are bit-identical to a batch holding N
//! copies of the triple.

use std::collections::BTreeSet;

use rand::Rng;

use crate::backbone::NodeRepresentations;
use crate::data::InteractionGraph;
use crate::error::{Error, Result};
use crate::matrix::{dot, sigmoid, softplus, Matrix};
use crate::seeds;

/// Where a training negative came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeSource {
    Uniform,
    Reservoir,
}

/// One (user, positive, negative) observation.
#[derive(Debug, Clone, Copy)]
pub struct Triple {
    pub user: u32,
    pub pos_item: u32,
    pub neg_item: u32,
    pub multiplicity: u32,
    pub source: NegativeSource,
}

/// A batch of ranking triples in fixed order.
#[derive(Debug, Clone, Default)]
pub struct TripletBatch {
    pub triples: Vec<Triple>,
}

impl TripletBatch {
    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }
}

/// Weights combining the loss components.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda_kd: f64,
    pub beta: f64,
    pub lambda_theta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_kd: 0.0,
            beta: 0.0,
            lambda_theta: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_kd < 0.0 || self.beta < 0.0 || self.lambda_theta < 0.0 {
            return Err(Error::InvalidArgument(
                "loss weights must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Distillation flavor used for incremental blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillMode {
    None,
    Local,
    Contrastive,
}

#[derive(Debug, Clone, Copy)]
pub struct DistillConfig {
    pub mode: DistillMode,
    /// Contrastive temperature.
    pub temperature: f64,
    /// Sampled non-neighbors per user joining the contrastive denominator.
    pub n_negatives: usize,
    /// Seed for the per-user negative samples.
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            mode: DistillMode::None,
            temperature: 1.0,
            n_negatives: 5,
            seed: 0,
        }
    }
}

/// Gradients with respect to the final user/item representations.
#[derive(Debug, Clone)]
pub struct RepGrads {
    pub users: Matrix,
    pub items: Matrix,
}

impl RepGrads {
    pub fn zeros_like(reps: &NodeRepresentations) -> Self {
        Self {
            users: Matrix::zeros(reps.users.rows(), reps.users.cols()),
            items: Matrix::zeros(reps.items.rows(), reps.items.cols()),
        }
    }

    pub fn add_scaled(&mut self, other: &RepGrads, alpha: f64) {
        self.users.add_scaled(&other.users, alpha);
        self.items.add_scaled(&other.items, alpha);
    }
}

/// L2 penalty over the representation rows the batch touches (each distinct
/// row once), added to `loss` and `grads` in place.
fn l2_on_touched_rows(
    batch: &TripletBatch,
    reps: &NodeRepresentations,
    lambda: f64,
    grads: &mut RepGrads,
) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let mut users: BTreeSet<u32> = BTreeSet::new();
    let mut items: BTreeSet<u32> = BTreeSet::new();
    for t in &batch.triples {
        users.insert(t.user);
        items.insert(t.pos_item);
        items.insert(t.neg_item);
    }
    let mut reg = 0.0;
    for &u in &users {
        let row = reps.users.row(u as usize);
        reg += lambda * dot(row, row);
        let g = grads.users.row_mut(u as usize);
        for (gv, rv) in g.iter_mut().zip(row) {
            *gv += 2.0 * lambda * rv;
        }
    }
    for &i in &items {
        let row = reps.items.row(i as usize);
        reg += lambda * dot(row, row);
        let g = grads.items.row_mut(i as usize);
        for (gv, rv) in g.iter_mut().zip(row) {
            *gv += 2.0 * lambda * rv;
        }
    }
    reg
}

fn check_batch_ids(batch: &TripletBatch, reps: &NodeRepresentations) -> Result<()> {
    for t in &batch.triples {
        if t.user as usize >= reps.users.rows()
            || t.pos_item as usize >= reps.items.rows()
            || t.neg_item as usize >= reps.items.rows()
        {
            return Err(Error::InvalidArgument(format!(
                "triple ({}, {}, {}) outside representation tables",
                t.user, t.pos_item, t.neg_item
            )));
        }
    }
    Ok(())
}

/// Accumulate one pairwise observation: `softplus(-(y_ui - y_uj))` plus its
/// gradient contributions.
fn accumulate_pair(
    reps: &NodeRepresentations,
    t: &Triple,
    loss: &mut f64,
    grads: &mut RepGrads,
) {
    let u = t.user as usize;
    let i = t.pos_item as usize;
    let j = t.neg_item as usize;
    let urow = reps.users.row(u);
    let irow = reps.items.row(i);
    let jrow = reps.items.row(j);
    let gap = dot(urow, irow) - dot(urow, jrow);
    *loss += softplus(-gap);
    let coef = -sigmoid(-gap); // d/d(gap)
    let d = urow.len();
    let gu = grads.users.row_mut(u);
    for c in 0..d {
        gu[c] += coef * (irow[c] - jrow[c]);
    }
    let gi = grads.items.row_mut(i);
    for c in 0..d {
        gi[c] += coef * urow[c];
    }
    let gj = grads.items.row_mut(j);
    for c in 0..d {
        gj[c] -= coef * urow[c];
    }
}

/// Pairwise ranking loss over unit-multiplicity triples:
/// `sum -ln sigma(y_ui - y_uj) + lambda ||touched rows||^2`.
pub fn bpr_loss(
    batch: &TripletBatch,
    reps: &NodeRepresentations,
    lambda_theta: f64,
) -> Result<(f64, RepGrads)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty triplet batch".into()));
    }
    if batch.triples.iter().any(|t| t.multiplicity != 1) {
        return Err(Error::InvalidArgument(
            "bpr_loss expects unit multiplicities; use weighted_bpr_loss".into(),
        ));
    }
    check_batch_ids(batch, reps)?;
    let mut loss = 0.0;
    let mut grads = RepGrads::zeros_like(reps);
    for t in &batch.triples {
        accumulate_pair(reps, t, &mut loss, &mut grads);
    }
    loss += l2_on_touched_rows(batch, reps, lambda_theta, &mut grads);
    Ok((loss, grads))
}

/// Multiplicity-weighted ranking loss: a triple with multiplicity N counts as
/// N independent observations (`sum -N ln sigma(y_ui - y_uj)`), realized as N
/// repeated accumulations so it is bit-identical to duplicating the triple.
pub fn weighted_bpr_loss(
    batch: &TripletBatch,
    reps: &NodeRepresentations,
    lambda_theta: f64,
) -> Result<(f64, RepGrads)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty triplet batch".into()));
    }
    if batch.triples.iter().any(|t| t.multiplicity < 1) {
        return Err(Error::InvalidArgument("multiplicities must be >= 1".into()));
    }
    check_batch_ids(batch, reps)?;
    let mut loss = 0.0;
    let mut grads = RepGrads::zeros_like(reps);
    for t in &batch.triples {
        for _ in 0..t.multiplicity {
            accumulate_pair(reps, t, &mut loss, &mut grads);
        }
    }
    loss += l2_on_touched_rows(batch, reps, lambda_theta, &mut grads);
    Ok((loss, grads))
}

/// Mean of a set of item (or user) rows taken over an adjacency list.
fn neighborhood_mean(rows: &Matrix, nbrs: &[u32]) -> Vec<f64> {
    let d = rows.cols();
    let mut out = vec![0.0; d];
    for &n in nbrs {
        for (o, v) in out.iter_mut().zip(rows.row(n as usize)) {
            *o += v;
        }
    }
    let inv = 1.0 / nbrs.len() as f64;
    for o in &mut out {
        *o *= inv;
    }
    out
}

/// One side of the local-structure distillation: mean over nodes with a
/// non-empty previous-block neighborhood of the squared difference between
/// teacher and student (node . neighborhood-mean) dot products. Gradients go
/// into the student side only.
fn kd_local_side(
    teacher_nodes: &Matrix,
    teacher_nbrs: &Matrix,
    student_nodes: &Matrix,
    student_nbrs: &Matrix,
    adjacency: &[Vec<u32>],
    d_nodes: &mut Matrix,
    d_nbrs: &mut Matrix,
) -> f64 {
    let active: Vec<usize> = (0..adjacency.len())
        .filter(|&v| !adjacency[v].is_empty())
        .collect();
    if active.is_empty() {
        return 0.0;
    }
    let inv_n = 1.0 / active.len() as f64;
    let d = student_nodes.cols();
    let mut loss = 0.0;
    for &v in &active {
        let nbrs = &adjacency[v];
        let c_teacher = neighborhood_mean(teacher_nbrs, nbrs);
        let c_student = neighborhood_mean(student_nbrs, nbrs);
        let t_dot = dot(teacher_nodes.row(v), &c_teacher);
        let s_dot = dot(student_nodes.row(v), &c_student);
        let diff = t_dot - s_dot;
        loss += diff * diff * inv_n;

        let coef = -2.0 * diff * inv_n; // d(loss)/d(s_dot) scaled into grads
        let gnode = d_nodes.row_mut(v);
        for c in 0..d {
            gnode[c] += coef * c_student[c];
        }
        let w = coef / nbrs.len() as f64;
        let node_row: Vec<f64> = student_nodes.row(v).to_vec();
        for &n in nbrs {
            let g = d_nbrs.row_mut(n as usize);
            for c in 0..d {
                g[c] += w * node_row[c];
            }
        }
    }
    loss
}

/// Local-structure distillation over the previous block's graph: user side
/// plus item side. The teacher is a constant; gradients flow only to the
/// student representations. Nodes with no previous-block neighbors are
/// skipped.
pub fn kd_local(
    teacher: &NodeRepresentations,
    student: &NodeRepresentations,
    graph_prev: &InteractionGraph,
) -> Result<(f64, RepGrads)> {
    if teacher.users.rows() < graph_prev.n_users
        || teacher.items.rows() < graph_prev.n_items
        || student.users.rows() < graph_prev.n_users
        || student.items.rows() < graph_prev.n_items
    {
        return Err(Error::Shape(
            "representations do not cover the previous block's universe".into(),
        ));
    }
    let mut grads = RepGrads::zeros_like(student);
    let user_loss = kd_local_side(
        &teacher.users,
        &teacher.items,
        &student.users,
        &student.items,
        &graph_prev.user_adj,
        &mut grads.users,
        &mut grads.items,
    );
    let item_loss = kd_local_side(
        &teacher.items,
        &teacher.users,
        &student.items,
        &student.users,
        &graph_prev.item_adj,
        &mut grads.items,
        &mut grads.users,
    );
    Ok((user_loss + item_loss, grads))
}

/// Contrastive distillation: the item-side local term plus, per user with
/// previous-block neighbors, the mean over those neighbors i of
/// `-log softmax(h_u^t . h_i^{t-1} / tau)` against a denominator set D of the
/// neighbors plus sampled non-neighbors. Teacher vectors are constants.
pub fn kd_contrastive(
    teacher: &NodeRepresentations,
    student: &NodeRepresentations,
    graph_prev: &InteractionGraph,
    cfg: &DistillConfig,
) -> Result<(f64, RepGrads)> {
    if cfg.temperature <= 0.0 {
        return Err(Error::InvalidArgument(
            "contrastive temperature must be positive".into(),
        ));
    }
    if teacher.users.rows() < graph_prev.n_users
        || teacher.items.rows() < graph_prev.n_items
        || student.users.rows() < graph_prev.n_users
        || student.items.rows() < graph_prev.n_items
    {
        return Err(Error::Shape(
            "representations do not cover the previous block's universe".into(),
        ));
    }
    let tau = cfg.temperature;
    let mut grads = RepGrads::zeros_like(student);

    // item-side local-structure term
    let item_loss = kd_local_side(
        &teacher.items,
        &teacher.users,
        &student.items,
        &student.users,
        &graph_prev.item_adj,
        &mut grads.items,
        &mut grads.users,
    );

    let active: Vec<usize> = (0..graph_prev.n_users)
        .filter(|&u| !graph_prev.user_adj[u].is_empty())
        .collect();
    let mut contrast_loss = 0.0;
    if !active.is_empty() {
        let inv_users = 1.0 / active.len() as f64;
        let d = student.users.cols();
        for &u in &active {
            let positives: BTreeSet<u32> = graph_prev.user_adj[u].iter().copied().collect();
            let mut denom: Vec<u32> = positives.iter().copied().collect();
            // uniform non-neighbor negatives from the previous item universe
            let pool: Vec<u32> = (0..graph_prev.n_items as u32)
                .filter(|i| !positives.contains(i))
                .collect();
            if !pool.is_empty() && cfg.n_negatives > 0 {
                let mut rng = seeds::rng(cfg.seed, "contrastive-negatives", &[u as u64]);
                for _ in 0..cfg.n_negatives {
                    denom.push(pool[rng.random_range(0..pool.len())]);
                }
            }
            if denom.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "user {u} has an empty contrastive denominator set"
                )));
            }

            let urow = student.users.row(u);
            let logits: Vec<f64> = denom
                .iter()
                .map(|&i| dot(urow, teacher.items.row(i as usize)) / tau)
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
            let lse = max + sum_exp.ln();

            let inv_pos = 1.0 / positives.len() as f64;
            let mut term = 0.0;
            for &i in &positives {
                let s = dot(urow, teacher.items.row(i as usize)) / tau;
                term += (lse - s) * inv_pos;
            }
            contrast_loss += term * inv_users;

            // gradient w.r.t. the student user row
            let gu = grads.users.row_mut(u);
            for (&i, &l) in denom.iter().zip(&logits) {
                let p = (l - max).exp() / sum_exp;
                let trow = teacher.items.row(i as usize);
                let w = inv_users * p / tau;
                for c in 0..d {
                    gu[c] += w * trow[c];
                }
            }
            for &i in &positives {
                let trow = teacher.items.row(i as usize);
                let w = inv_users * inv_pos / tau;
                for c in 0..d {
                    gu[c] -= w * trow[c];
                }
            }
        }
    }

    Ok((item_loss + contrast_loss, grads))
}

/// Component inputs for the total objective. Unweighted values; weights are
/// applied here.
pub struct LossComponents {
    /// Triplet loss over uniform negatives.
    pub base: (f64, RepGrads),
    /// Distillation loss (weighted by lambda_kd).
    pub distill: Option<(f64, RepGrads)>,
    /// Reservoir triplet loss (weight 1, same scale as base).
    pub reservoir: Option<(f64, RepGrads)>,
    /// Clustering KL loss (weighted by beta): value, d_item_reps, d_centroids.
    pub cluster: Option<(f64, Matrix, Matrix)>,
}

/// Weighted total and combined gradients.
#[derive(Debug)]
pub struct TotalLoss {
    pub value: f64,
    pub grads: RepGrads,
    pub centroid_grads: Option<Matrix>,
    /// Weighted contributions: base, distill, reservoir, cluster.
    pub parts: [f64; 4],
}

/// `total = base + lambda_kd * distill + reservoir + beta * cluster`;
/// gradients are the same weighted sums. Errors name a non-finite component.
pub fn total_loss(components: LossComponents, weights: &LossWeights) -> Result<TotalLoss> {
    weights.validate()?;
    let check = |name: &str, v: f64| -> Result<f64> {
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "{name} loss component is not finite ({v})"
            )));
        }
        Ok(v)
    };

    let (base_v, base_g) = components.base;
    check("base triplet", base_v)?;
    let mut grads = base_g;
    let mut parts = [base_v, 0.0, 0.0, 0.0];
    let mut value = base_v;

    if let Some((v, g)) = components.distill {
        check("distillation", v)?;
        let w = weights.lambda_kd;
        grads.add_scaled(&g, w);
        parts[1] = w * v;
        value += w * v;
    }
    if let Some((v, g)) = components.reservoir {
        check("reservoir triplet", v)?;
        grads.add_scaled(&g, 1.0);
        parts[2] = v;
        value += v;
    }
    let mut centroid_grads = None;
    if let Some((v, d_items, d_cents)) = components.cluster {
        check("clustering", v)?;
        let w = weights.beta;
        grads.items.add_scaled(&d_items, w);
        let mut cg = d_cents;
        for g in cg.data_mut() {
            *g *= w;
        }
        centroid_grads = Some(cg);
        parts[3] = w * v;
        value += w * v;
    }

    Ok(TotalLoss {
        value,
        grads,
        centroid_grads,
        parts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{
        backward, forward, forward_traced, init_embeddings, Activation, NodeRepresentations,
    };
    use crate::data::{build_block_graph, split_blocks, InteractionLog, SplitMode};
    use rand::Rng;

    fn reps(users: &[Vec<f64>], items: &[Vec<f64>]) -> NodeRepresentations {
        NodeRepresentations {
            users: Matrix::from_rows(users),
            items: Matrix::from_rows(items),
        }
    }

    fn triple(u: u32, i: u32, j: u32) -> Triple {
        Triple {
            user: u,
            pos_item: i,
            neg_item: j,
            multiplicity: 1,
            source: NegativeSource::Uniform,
        }
    }

    fn random_instance(
        rng: &mut impl Rng,
        n_users: usize,
        n_items: usize,
        d: usize,
    ) -> NodeRepresentations {
        let users: Vec<Vec<f64>> = (0..n_users)
            .map(|_| (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .collect();
        let items: Vec<Vec<f64>> = (0..n_items)
            .map(|_| (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .collect();
        reps(&users, &items)
    }

    fn random_batch(rng: &mut impl Rng, n_users: usize, n_items: usize, len: usize) -> TripletBatch {
        let triples = (0..len)
            .map(|_| {
                let i = rng.random_range(0..n_items as u32);
                let mut j = rng.random_range(0..n_items as u32);
                if n_items > 1 {
                    while j == i {
                        j = rng.random_range(0..n_items as u32);
                    }
                }
                Triple {
                    user: rng.random_range(0..n_users as u32),
                    pos_item: i,
                    neg_item: j,
                    multiplicity: 1,
                    source: NegativeSource::Uniform,
                }
            })
            .collect();
        TripletBatch { triples }
    }

    /// Norm-based relative error between analytic and numeric gradients.
    fn rep_grad_fd_error(
        loss_fn: &dyn Fn(&NodeRepresentations) -> f64,
        reps: &NodeRepresentations,
        grads: &RepGrads,
    ) -> f64 {
        let h = 1e-6;
        let mut reps = reps.clone();
        let mut num = Vec::new();
        let mut ana = Vec::new();
        for r in 0..reps.users.rows() {
            for c in 0..reps.users.cols() {
                let orig = reps.users.get(r, c);
                reps.users.set(r, c, orig + h);
                let up = loss_fn(&reps);
                reps.users.set(r, c, orig - h);
                let dn = loss_fn(&reps);
                reps.users.set(r, c, orig);
                num.push((up - dn) / (2.0 * h));
                ana.push(grads.users.get(r, c));
            }
        }
        for r in 0..reps.items.rows() {
            for c in 0..reps.items.cols() {
                let orig = reps.items.get(r, c);
                reps.items.set(r, c, orig + h);
                let up = loss_fn(&reps);
                reps.items.set(r, c, orig - h);
                let dn = loss_fn(&reps);
                reps.items.set(r, c, orig);
                num.push((up - dn) / (2.0 * h));
                ana.push(grads.items.get(r, c));
            }
        }
        let diff: f64 = num
            .iter()
            .zip(&ana)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = ana.iter().map(|v| v * v).sum::<f64>().sqrt();
        diff / norm.max(1e-12)
    }

    #[test]
    fn bpr_equal_scores_gives_ln2_per_triple() {
        let r = reps(
            &[vec![1.0, 0.0]],
            &[vec![0.0, 1.0], vec![0.0, 2.0]], // both score 0 against the user
        );
        let batch = TripletBatch {
            triples: vec![triple(0, 0, 1), triple(0, 1, 0)],
        };
        let (loss, _) = bpr_loss(&batch, &r, 0.0).unwrap();
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bpr_vanishes_at_large_gap_and_rejects_bad_batches() {
        let r = reps(&[vec![1.0]], &[vec![1e4], vec![-1e4]]);
        let batch = TripletBatch {
            triples: vec![triple(0, 0, 1)],
        };
        let (loss, _) = bpr_loss(&batch, &r, 0.0).unwrap();
        assert_eq!(loss, 0.0);

        assert!(bpr_loss(&TripletBatch::default(), &r, 0.0).is_err());
        let mut t = triple(0, 0, 1);
        t.multiplicity = 2;
        assert!(bpr_loss(&TripletBatch { triples: vec![t] }, &r, 0.0).is_err());
    }

    #[test]
    fn bpr_gradient_matches_finite_differences() {
        let mut rng = crate::seeds::rng(51, "bpr-fd", &[]);
        for trial in 0..20 {
            let n_users = rng.random_range(1..4usize);
            let n_items = rng.random_range(2..6usize);
            let d = rng.random_range(1..4usize);
            let r = random_instance(&mut rng, n_users, n_items, d);
            let len = rng.random_range(1..8usize);
            let batch = random_batch(&mut rng, n_users, n_items, len);
            let lambda = if trial % 2 == 0 { 0.0 } else { 0.05 };
            let (_, grads) = bpr_loss(&batch, &r, lambda).unwrap();
            let err = rep_grad_fd_error(
                &|r: &NodeRepresentations| bpr_loss(&batch, r, lambda).unwrap().0,
                &r,
                &grads,
            );
            assert!(err < 1e-5, "trial {trial}: rel err {err}");
        }
    }

    #[test]
    fn weighted_with_unit_multiplicities_is_bitwise_bpr() {
        let mut rng = crate::seeds::rng(52, "sane-eq", &[]);
        for _ in 0..10 {
            let r = random_instance(&mut rng, 3, 6, 3);
            let batch = random_batch(&mut rng, 3, 6, 12);
            let (a, ga) = bpr_loss(&batch, &r, 0.01).unwrap();
            let (b, gb) = weighted_bpr_loss(&batch, &r, 0.01).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
            for (x, y) in ga.users.data().iter().zip(gb.users.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            for (x, y) in ga.items.data().iter().zip(gb.items.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn weighted_triple_counts_n_observations() {
        let r = reps(&[vec![1.0, 0.0]], &[vec![0.0, 1.0], vec![0.0, 2.0]]);
        let mut t = triple(0, 0, 1);
        t.multiplicity = 3;
        let (loss, _) = weighted_bpr_loss(&TripletBatch { triples: vec![t] }, &r, 0.0).unwrap();
        assert!((loss - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);

        let mut bad = t;
        bad.multiplicity = 0;
        assert!(weighted_bpr_loss(&TripletBatch { triples: vec![bad] }, &r, 0.0).is_err());
    }

    #[test]
    fn multiplicity_equals_duplication_bitwise() {
        let mut rng = crate::seeds::rng(53, "dup-oracle", &[]);
        for _ in 0..10 {
            let r = random_instance(&mut rng, 3, 6, 3);
            let mut batch = random_batch(&mut rng, 3, 6, 6);
            for t in &mut batch.triples {
                t.multiplicity = rng.random_range(1..5);
            }
            let mut expanded = TripletBatch::default();
            for t in &batch.triples {
                for _ in 0..t.multiplicity {
                    let mut unit = *t;
                    unit.multiplicity = 1;
                    expanded.triples.push(unit);
                }
            }
            let (a, ga) = weighted_bpr_loss(&batch, &r, 0.02).unwrap();
            let (b, gb) = weighted_bpr_loss(&expanded, &r, 0.02).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
            for (x, y) in ga.users.data().iter().zip(gb.users.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn weighted_gradient_matches_finite_differences() {
        let mut rng = crate::seeds::rng(54, "sane-fd", &[]);
        for trial in 0..20 {
            let r = random_instance(&mut rng, 3, 6, 3);
            let mut batch = random_batch(&mut rng, 3, 6, 6);
            for t in &mut batch.triples {
                t.multiplicity = rng.random_range(1..4);
            }
            let (_, grads) = weighted_bpr_loss(&batch, &r, 0.03).unwrap();
            let err = rep_grad_fd_error(
                &|r: &NodeRepresentations| weighted_bpr_loss(&batch, r, 0.03).unwrap().0,
                &r,
                &grads,
            );
            assert!(err < 1e-5, "trial {trial}: rel err {err}");
        }
    }

    fn prev_graph() -> InteractionGraph {
        let raw = vec![(0, 0, 1), (0, 1, 2), (1, 1, 3), (1, 2, 4), (0, 0, 10)];
        let log = InteractionLog::from_events(raw).unwrap();
        let s = split_blocks(&log, 0.8, 1, 0.0, SplitMode::Standard).unwrap();
        build_block_graph(&log, &s, 0).unwrap()
    }

    #[test]
    fn kd_local_zero_when_student_equals_teacher() {
        let g = prev_graph();
        let mut rng = crate::seeds::rng(55, "kd-zero", &[]);
        let t = random_instance(&mut rng, g.n_users, g.n_items, 4);
        let (loss, grads) = kd_local(&t, &t.clone(), &g).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.users.data().iter().all(|&v| v == 0.0));
        assert!(grads.items.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kd_local_single_user_hand_case() {
        // one user, one item, teacher dot = 1, student dot = 0
        let raw = vec![(0, 0, 1), (0, 0, 2)];
        let log = InteractionLog::from_events(raw).unwrap();
        let s = split_blocks(&log, 0.5, 1, 0.0, SplitMode::Standard).unwrap();
        let g = build_block_graph(&log, &s, 0).unwrap();
        let teacher = reps(&[vec![1.0]], &[vec![1.0]]);
        let student = reps(&[vec![1.0]], &[vec![0.0]]);
        // user side: (1*1 - 1*0)^2 = 1; item side: (1*1 - 0*1)^2 = 1
        let (loss, _) = kd_local(&teacher, &student, &g).unwrap();
        assert!((loss - 2.0).abs() < 1e-12);
    }

    #[test]
    fn kd_local_gradient_matches_finite_differences() {
        let g = prev_graph();
        let mut rng = crate::seeds::rng(56, "kd-fd", &[]);
        for trial in 0..20 {
            let teacher = random_instance(&mut rng, g.n_users, g.n_items, 3);
            let student = random_instance(&mut rng, g.n_users, g.n_items, 3);
            let (_, grads) = kd_local(&teacher, &student, &g).unwrap();
            let err = rep_grad_fd_error(
                &|r: &NodeRepresentations| kd_local(&teacher, r, &g).unwrap().0,
                &student,
                &grads,
            );
            assert!(err < 1e-5, "trial {trial}: rel err {err}");
        }
    }

    #[test]
    fn kd_contrastive_positive_only_denominator_is_zero_for_single_neighbor() {
        // single user with a single neighbor and no sampled negatives: the
        // softmax is over one element, so the user term is exactly 0 and only
        // the item-side local term remains (0 with teacher == student).
        let raw = vec![(0, 0, 1), (0, 0, 2)];
        let log = InteractionLog::from_events(raw).unwrap();
        let s = split_blocks(&log, 0.5, 1, 0.0, SplitMode::Standard).unwrap();
        let g = build_block_graph(&log, &s, 0).unwrap();
        let t = reps(&[vec![0.7]], &[vec![-0.4]]);
        let cfg = DistillConfig {
            mode: DistillMode::Contrastive,
            temperature: 1.0,
            n_negatives: 0,
            seed: 5,
        };
        let (loss, grads) = kd_contrastive(&t, &t.clone(), &g, &cfg).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.users.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kd_contrastive_equal_logits_hand_case() {
        // one positive and one sampled negative with equal logits -> ln 2.
        // user 0's neighbor is item 0; item 1 is the only non-neighbor, so the
        // sampled negative is item 1 regardless of seed. Teacher item reps are
        // equal, so logits match.
        let g = InteractionGraph {
            user_adj: vec![vec![0]],
            item_adj: vec![vec![0], vec![]],
            n_users: 1,
            n_items: 2,
            block: 0,
        };
        let teacher = reps(&[vec![1.0]], &[vec![0.8], vec![0.8]]);
        let student = reps(&[vec![1.0]], &[vec![0.8], vec![0.8]]);
        let cfg = DistillConfig {
            mode: DistillMode::Contrastive,
            temperature: 1.0,
            n_negatives: 1,
            seed: 5,
        };
        let (loss, _) = kd_contrastive(&teacher, &student, &g, &cfg).unwrap();
        // item-side local term is 0 (teacher == student), user term = ln 2
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(kd_contrastive(
            &teacher,
            &student,
            &g,
            &DistillConfig {
                temperature: 0.0,
                ..cfg
            }
        )
        .is_err());
    }

    #[test]
    fn kd_contrastive_gradient_matches_finite_differences() {
        let g = prev_graph();
        let mut rng = crate::seeds::rng(57, "sgct-fd", &[]);
        for trial in 0..20u64 {
            let teacher = random_instance(&mut rng, g.n_users, g.n_items, 3);
            let student = random_instance(&mut rng, g.n_users, g.n_items, 3);
            let cfg = DistillConfig {
                mode: DistillMode::Contrastive,
                temperature: [0.5, 1.0, 2.0][trial as usize % 3],
                n_negatives: (trial % 3) as usize,
                seed: trial,
            };
            let (_, grads) = kd_contrastive(&teacher, &student, &g, &cfg).unwrap();
            let err = rep_grad_fd_error(
                &|r: &NodeRepresentations| kd_contrastive(&teacher, r, &g, &cfg).unwrap().0,
                &student,
                &grads,
            );
            assert!(err < 1e-5, "trial {trial}: rel err {err}");
        }
    }

    #[test]
    fn total_reduces_to_expected_combinations() {
        let mut rng = crate::seeds::rng(58, "total", &[]);
        let r = random_instance(&mut rng, 3, 6, 3);
        let batch = random_batch(&mut rng, 3, 6, 5);
        let base = bpr_loss(&batch, &r, 0.0).unwrap();
        let sane = weighted_bpr_loss(&batch, &r, 0.0).unwrap();

        // beta = 0, lambda_kd = 0 -> base + reservoir
        let total = total_loss(
            LossComponents {
                base: (base.0, base.1.clone()),
                distill: None,
                reservoir: Some((sane.0, sane.1.clone())),
                cluster: None,
            },
            &LossWeights {
                lambda_kd: 0.0,
                beta: 0.0,
                lambda_theta: 0.0,
            },
        )
        .unwrap();
        assert!((total.value - (base.0 + sane.0)).abs() < 1e-15);

        // every optional component off -> base only
        let only_base = total_loss(
            LossComponents {
                base: (base.0, base.1.clone()),
                distill: None,
                reservoir: None,
                cluster: None,
            },
            &LossWeights::default(),
        )
        .unwrap();
        assert_eq!(only_base.value, base.0);
    }

    #[test]
    fn total_is_the_weighted_sum_with_matching_gradients() {
        let mut rng = crate::seeds::rng(59, "total-sum", &[]);
        let r = random_instance(&mut rng, 3, 6, 3);
        let batch = random_batch(&mut rng, 3, 6, 5);
        let g = prev_graph();
        let base = bpr_loss(&batch, &r, 0.01).unwrap();
        let kd = kd_local(&r, &r, &g); // zero but well-formed
        let kd = kd.unwrap();
        let sane = weighted_bpr_loss(&batch, &r, 0.0).unwrap();
        let d_items = Matrix::zeros(r.items.rows(), r.items.cols());
        let d_cents = Matrix::zeros(2, r.items.cols());
        let kl_v = 0.37;
        let weights = LossWeights {
            lambda_kd: 0.7,
            beta: 2.5,
            lambda_theta: 0.01,
        };
        let total = total_loss(
            LossComponents {
                base: (base.0, base.1.clone()),
                distill: Some((kd.0, kd.1)),
                reservoir: Some((sane.0, sane.1.clone())),
                cluster: Some((kl_v, d_items, d_cents)),
            },
            &weights,
        )
        .unwrap();
        let hand = base.0 + 0.7 * kd.0 + sane.0 + 2.5 * kl_v;
        assert!((total.value - hand).abs() < 1e-12);
        assert!((total.parts.iter().sum::<f64>() - total.value).abs() < 1e-12);
        // gradient = base + sane here (kd and cluster grads are zero)
        for ((g, a), b) in total
            .grads
            .users
            .data()
            .iter()
            .zip(base.1.users.data())
            .zip(sane.1.users.data())
        {
            assert!((g - (a + b)).abs() < 1e-15);
        }
    }

    #[test]
    fn total_names_non_finite_components() {
        let mut rng = crate::seeds::rng(60, "total-nan", &[]);
        let r = random_instance(&mut rng, 2, 3, 2);
        let batch = random_batch(&mut rng, 2, 3, 2);
        let base = bpr_loss(&batch, &r, 0.0).unwrap();
        let err = total_loss(
            LossComponents {
                base: (f64::NAN, base.1.clone()),
                distill: None,
                reservoir: None,
                cluster: None,
            },
            &LossWeights::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("base triplet"), "{err}");

        let err = total_loss(
            LossComponents {
                base: (base.0, base.1.clone()),
                distill: None,
                reservoir: Some((f64::INFINITY, base.1.clone())),
                cluster: None,
            },
            &LossWeights::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("reservoir"), "{err}");
    }

    #[test]
    fn losses_are_finite_and_nonnegative_on_random_instances() {
        let mut rng = crate::seeds::rng(61, "nonneg", &[]);
        for _ in 0..30 {
            let r = random_instance(&mut rng, 3, 6, 3);
            let batch = random_batch(&mut rng, 3, 6, 8);
            let (a, _) = bpr_loss(&batch, &r, 0.01).unwrap();
            let (b, _) = weighted_bpr_loss(&batch, &r, 0.0).unwrap();
            assert!(a.is_finite() && a >= 0.0);
            assert!(b.is_finite() && b >= 0.0);
        }
    }

    #[test]
    fn gradients_flow_through_the_backbone_layers() {
        // finite differences on table entries and layer weights through
        // forward + bpr, validating the backward pass end to end.
        let raw = vec![(0, 0, 1), (0, 1, 2), (1, 1, 3), (1, 2, 4), (0, 2, 5)];
        let log = InteractionLog::from_events(raw).unwrap();
        let s = split_blocks(&log, 0.9, 1, 0.0, SplitMode::Standard).unwrap();
        let g = build_block_graph(&log, &s, 0).unwrap();
        let mut rng = crate::seeds::rng(62, "chain-fd", &[]);

        for trial in 0..6u64 {
            let n_layers = (trial % 3) as usize; // 0, 1, 2 layers
            let mut st = init_embeddings(
                g.n_users,
                g.n_items,
                3,
                n_layers,
                if trial % 2 == 0 {
                    Activation::Tanh
                } else {
                    Activation::Linear
                },
                0.0,
                trial + 10,
            )
            .unwrap();
            let batch = random_batch(&mut rng, g.n_users, g.n_items, 5);
            let lambda = 0.02;

            let loss_of = |st: &crate::backbone::EmbeddingState| -> f64 {
                let reps = forward(st, &g, n_layers).unwrap();
                bpr_loss(&batch, &reps, lambda).unwrap().0
            };

            let trace = forward_traced(&st, &g, n_layers, 0.0, 0).unwrap();
            let reps = trace.reps();
            let (_, rg) = bpr_loss(&batch, &reps, lambda).unwrap();
            let pg = backward(&st, &g, &trace, &rg.users, &rg.items);

            let h = 1e-6;
            let mut num = Vec::new();
            let mut ana = Vec::new();
            // tables
            for r in 0..st.user_table.rows() {
                for c in 0..st.user_table.cols() {
                    let orig = st.user_table.get(r, c);
                    st.user_table.set(r, c, orig + h);
                    let up = loss_of(&st);
                    st.user_table.set(r, c, orig - h);
                    let dn = loss_of(&st);
                    st.user_table.set(r, c, orig);
                    num.push((up - dn) / (2.0 * h));
                    ana.push(pg.user_table.get(r, c));
                }
            }
            for r in 0..st.item_table.rows() {
                for c in 0..st.item_table.cols() {
                    let orig = st.item_table.get(r, c);
                    st.item_table.set(r, c, orig + h);
                    let up = loss_of(&st);
                    st.item_table.set(r, c, orig - h);
                    let dn = loss_of(&st);
                    st.item_table.set(r, c, orig);
                    num.push((up - dn) / (2.0 * h));
                    ana.push(pg.item_table.get(r, c));
                }
            }
            // layer parameters
            for l in 0..n_layers {
                for r in 0..st.layers[l].weight.rows() {
                    for c in 0..st.layers[l].weight.cols() {
                        let orig = st.layers[l].weight.get(r, c);
                        st.layers[l].weight.set(r, c, orig + h);
                        let up = loss_of(&st);
                        st.layers[l].weight.set(r, c, orig - h);
                        let dn = loss_of(&st);
                        st.layers[l].weight.set(r, c, orig);
                        num.push((up - dn) / (2.0 * h));
                        ana.push(pg.layers[l].weight.get(r, c));
                    }
                }
                for b in 0..st.layers[l].bias.len() {
                    let orig = st.layers[l].bias[b];
                    st.layers[l].bias[b] = orig + h;
                    let up = loss_of(&st);
                    st.layers[l].bias[b] = orig - h;
                    let dn = loss_of(&st);
                    st.layers[l].bias[b] = orig;
                    num.push((up - dn) / (2.0 * h));
                    ana.push(pg.layers[l].bias[b]);
                }
            }
            let diff: f64 = num
                .iter()
                .zip(&ana)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let norm: f64 = ana.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(
                diff / norm.max(1e-12) < 1e-5,
                "trial {trial} ({n_layers} layers): rel err {}",
                diff / norm.max(1e-12)
            );
        }
    }
}
