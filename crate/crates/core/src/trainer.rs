//! Block-wise training: plain pairwise ranking on the base block, then the
//! incremental loop with dual-source negatives (uniform + reservoir),
//! optional distillation against the frozen previous-block teacher, optional
//! clustering loss, reservoir refresh every f epochs, and early stopping on
//! validation Recall@20.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::Rng;

use crate::backbone::{
    backward, forward, forward_traced, init_embeddings, rank_top_negatives, Activation,
    EmbeddingState, NodeRepresentations, ParamGrads,
};
use crate::cluster::ClusterState;
use crate::data::{
    build_block_graph, category_histogram, universe_through, BlockSchedule, InteractionGraph,
    InteractionLog,
};
use crate::error::{Error, Result};
use crate::losses::{
    bpr_loss, kd_contrastive, kd_local, total_loss, weighted_bpr_loss, DistillConfig,
    DistillMode, LossComponents, LossWeights, NegativeSource, RepGrads, TotalLoss, Triple,
    TripletBatch,
};
use crate::matrix::Matrix;
use crate::metrics::{recall_precision_at_k, EvalRequest};
use crate::optim::{Adam, AdamConfig};
use crate::reservoir::{draw_negatives, update_reservoir, ReservoirConfig, ReservoirState};
use crate::seeds;

/// Backbone shape and regularization.
#[derive(Debug, Clone, Copy)]
pub struct ModelConfig {
    pub dim: usize,
    pub n_layers: usize,
    pub activation: Activation,
    pub l2_reg: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            n_layers: 2,
            activation: Activation::Tanh,
            l2_reg: 1e-5,
        }
    }
}

/// Optimization and sampling hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Uniform negatives per positive (N1).
    pub n_uniform: usize,
    /// Reservoir negatives per positive (N2).
    pub n_reservoir: usize,
    pub min_epochs_base: usize,
    pub max_epochs_base: usize,
    pub min_epochs_inc: usize,
    pub max_epochs_inc: usize,
    pub patience: usize,
    /// Epochs between reservoir (and membership) refreshes.
    pub refresh_every: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            n_uniform: 5,
            n_reservoir: 5,
            min_epochs_base: 10,
            max_epochs_base: 50,
            min_epochs_inc: 3,
            max_epochs_inc: 15,
            patience: 2,
            refresh_every: 2,
            dropout: 0.2,
            seed: 42,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if self.n_uniform + self.n_reservoir < 1 {
            return Err(Error::InvalidArgument(
                "need at least one negative per positive".into(),
            ));
        }
        if self.patience < 1 {
            return Err(Error::InvalidArgument("patience must be >= 1".into()));
        }
        if self.refresh_every < 1 {
            return Err(Error::InvalidArgument(
                "refresh interval must be >= 1".into(),
            ));
        }
        if self.min_epochs_base < 1
            || self.min_epochs_inc < 1
            || self.max_epochs_base < self.min_epochs_base
            || self.max_epochs_inc < self.min_epochs_inc
        {
            return Err(Error::InvalidArgument(
                "epoch bounds must satisfy 1 <= min <= max".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument("dropout must lie in [0,1)".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument(
                "learning rate must be positive".into(),
            ));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// One line of the per-epoch training log. Loss fields are the weighted
/// per-epoch sums, so `loss_total` equals their sum.
#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub epoch: usize,
    pub loss_base: f64,
    pub loss_distill: f64,
    pub loss_reservoir: f64,
    pub loss_cluster: f64,
    pub loss_total: f64,
    pub val_recall20: Option<f64>,
    pub refreshed: bool,
    pub duration_secs: f64,
}

impl TrainRecord {
    pub fn tsv_header() -> &'static str {
        "epoch\tloss_base\tloss_distill\tloss_reservoir\tloss_cluster\tloss_total\tval_recall20\trefreshed\tduration_secs"
    }

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{}\t{}\t{:.3}",
            self.epoch,
            self.loss_base,
            self.loss_distill,
            self.loss_reservoir,
            self.loss_cluster,
            self.loss_total,
            self.val_recall20
                .map_or_else(|| "-".to_string(), |v| format!("{v:.6}")),
            self.refreshed,
            self.duration_secs
        )
    }
}

/// Where item categories come from during an incremental block.
#[derive(Debug, Clone)]
pub enum CategoriesMode {
    /// Dataset-provided per-item categories (dense item id -> category).
    Provided(Vec<u32>),
    /// Cluster the item representations into pseudo-categories.
    Cluster(ClusterParams),
}

#[derive(Debug, Clone, Copy)]
pub struct ClusterParams {
    pub k: usize,
    pub nu: f64,
    pub tau: f64,
    pub kmeans_iters: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            k: 10,
            nu: 1.0,
            tau: 1.0,
            kmeans_iters: 50,
        }
    }
}

/// Options for one incremental block.
#[derive(Debug, Clone)]
pub struct IncrementalOptions {
    pub weights: LossWeights,
    pub distill: DistillConfig,
    pub reservoir: ReservoirConfig,
    pub categories: CategoriesMode,
}

/// Per-user, per-category tallies of drawn negatives, split by source.
#[derive(Debug, Clone)]
pub struct NegStats {
    uniform: Vec<u64>,
    reservoir: Vec<u64>,
    pub k: usize,
    pub n_users: usize,
}

impl NegStats {
    fn new(n_users: usize, k: usize) -> Self {
        Self {
            uniform: vec![0; n_users * k],
            reservoir: vec![0; n_users * k],
            k,
            n_users,
        }
    }

    pub fn uniform_row(&self, u: usize) -> &[u64] {
        &self.uniform[u * self.k..(u + 1) * self.k]
    }

    pub fn reservoir_row(&self, u: usize) -> &[u64] {
        &self.reservoir[u * self.k..(u + 1) * self.k]
    }

    fn tally(&mut self, source: NegativeSource, user: u32, cat: u32, count: u64) {
        let idx = user as usize * self.k + cat as usize;
        match source {
            NegativeSource::Uniform => self.uniform[idx] += count,
            NegativeSource::Reservoir => self.reservoir[idx] += count,
        }
    }

    pub fn merge(&mut self, other: &NegStats) {
        assert_eq!(self.k, other.k);
        assert_eq!(self.n_users, other.n_users);
        for (a, b) in self.uniform.iter_mut().zip(&other.uniform) {
            *a += b;
        }
        for (a, b) in self.reservoir.iter_mut().zip(&other.reservoir) {
            *a += b;
        }
    }
}

/// Result of one incremental block.
pub struct IncrementalOutcome {
    pub state: EmbeddingState,
    pub reservoir: Option<ReservoirState>,
    pub records: Vec<TrainRecord>,
    pub neg_stats: NegStats,
    pub cluster: Option<ClusterState>,
}

/// Per-user current-block positive sets.
pub fn positives_from_graph(graph: &InteractionGraph) -> Vec<BTreeSet<u32>> {
    graph
        .user_adj
        .iter()
        .map(|items| items.iter().copied().collect())
        .collect()
}

/// Union of training positives over blocks 0..=t, sized to the cumulative
/// user universe of block t.
pub fn cumulative_positives(
    log: &InteractionLog,
    schedule: &BlockSchedule,
    t: usize,
) -> Vec<BTreeSet<u32>> {
    let (n_users, _) = universe_through(log, schedule, t);
    let mut sets = vec![BTreeSet::new(); n_users];
    for b in 0..=t {
        for e in &log.events[schedule.blocks[b].train.clone()] {
            if (e.user as usize) < n_users {
                sets[e.user as usize].insert(e.item);
            }
        }
    }
    sets
}

/// Ground-truth positives of an evaluation range, for users inside the
/// ranked universe.
pub fn ground_truth(
    log: &InteractionLog,
    range: std::ops::Range<usize>,
    n_users: usize,
) -> Vec<BTreeSet<u32>> {
    let mut truth = vec![BTreeSet::new(); n_users];
    for e in &log.events[range] {
        if (e.user as usize) < n_users {
            truth[e.user as usize].insert(e.item);
        }
    }
    truth
}

/// Ground truth restricted to the candidate space actually ranked: held-out
/// items the user has not already consumed in training. Repeat interactions
/// are excluded from candidates, so they cannot count as misses either.
pub fn held_out_truth(
    log: &InteractionLog,
    range: std::ops::Range<usize>,
    exclude: &[BTreeSet<u32>],
) -> Vec<BTreeSet<u32>> {
    let mut truth = ground_truth(log, range, exclude.len());
    for (t, ex) in truth.iter_mut().zip(exclude) {
        t.retain(|i| !ex.contains(i));
    }
    truth
}

/// Rejection-sample `n_per_positive` items outside each pair's user positive
/// set, in pair order. Deterministic given the seed.
pub fn uniform_negatives(
    pairs: &[(u32, u32)],
    positives: &[BTreeSet<u32>],
    n_items: usize,
    n_per_positive: usize,
    seed: u64,
) -> Result<TripletBatch> {
    let mut rng = seeds::rng(seed, "uniform-negatives", &[]);
    let mut triples = Vec::with_capacity(pairs.len() * n_per_positive);
    for &(u, i) in pairs {
        let pos = positives.get(u as usize).ok_or_else(|| {
            Error::InvalidArgument(format!("user {u} has no positive set"))
        })?;
        if pos.len() >= n_items {
            return Err(Error::InvalidArgument(format!(
                "user {u} interacts with every item; cannot sample negatives"
            )));
        }
        for _ in 0..n_per_positive {
            let j = loop {
                let cand = rng.random_range(0..n_items as u32);
                if !pos.contains(&cand) {
                    break cand;
                }
            };
            triples.push(Triple {
                user: u,
                pos_item: i,
                neg_item: j,
                multiplicity: 1,
                source: NegativeSource::Uniform,
            });
        }
    }
    Ok(TripletBatch { triples })
}

/// Ranked lists for evaluation: every item except the exclusions, one list
/// per user, longest cutoff deep.
pub fn build_eval_request(
    reps: &NodeRepresentations,
    exclude: &[BTreeSet<u32>],
    truth: Vec<BTreeSet<u32>>,
    cutoffs: Vec<usize>,
) -> Result<EvalRequest> {
    let max_k = cutoffs.iter().copied().max().unwrap_or(20);
    let ctx = rank_top_negatives(reps, exclude, max_k)?;
    let ranked = ctx
        .top_negatives
        .into_iter()
        .map(|l| l.into_iter().map(|s| s.item).collect())
        .collect();
    let request = EvalRequest {
        ranked,
        truth,
        cutoffs,
    };
    request.validate()?;
    Ok(request)
}

/// Mean validation Recall@20 for block `t`, or None when the block has no
/// validation range or no user has ground truth in it.
pub fn validation_recall20(
    state: &EmbeddingState,
    model: &ModelConfig,
    graph: &InteractionGraph,
    log: &InteractionLog,
    schedule: &BlockSchedule,
    t: usize,
) -> Result<Option<f64>> {
    let Some(val) = schedule.blocks[t].val.clone() else {
        return Ok(None);
    };
    let reps = forward(state, graph, model.n_layers)?;
    let exclude = cumulative_positives(log, schedule, t);
    let truth = held_out_truth(log, val, &exclude);
    if truth.iter().all(BTreeSet::is_empty) {
        return Ok(None);
    }
    let request = build_eval_request(&reps, &exclude, truth, vec![20])?;
    let (recall, _) = recall_precision_at_k(&request, 20)?;
    Ok(Some(recall.mean))
}

/// Early-stopping bookkeeping around a best-state snapshot.
struct EarlyStopper {
    best_metric: f64,
    best_state: Option<EmbeddingState>,
    bad_epochs: usize,
    min_epochs: usize,
    patience: usize,
    active: bool,
}

impl EarlyStopper {
    fn new(min_epochs: usize, patience: usize) -> Self {
        Self {
            best_metric: f64::NEG_INFINITY,
            best_state: None,
            bad_epochs: 0,
            min_epochs,
            patience,
            active: false,
        }
    }

    /// Feed this epoch's validation metric; returns true when training should
    /// stop. Without a metric, early stopping stays inactive.
    fn observe(&mut self, epoch: usize, metric: Option<f64>, state: &EmbeddingState) -> bool {
        let Some(m) = metric else {
            return false;
        };
        self.active = true;
        if m > self.best_metric {
            self.best_metric = m;
            self.best_state = Some(state.clone());
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        epoch + 1 >= self.min_epochs && self.bad_epochs >= self.patience
    }

    fn into_best(self, fallback: EmbeddingState) -> EmbeddingState {
        if self.active {
            self.best_state.unwrap_or(fallback)
        } else {
            fallback
        }
    }
}

fn shuffled_batches(
    n_edges: usize,
    batch_size: usize,
    seed: u64,
    block: usize,
    epoch: usize,
) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n_edges).collect();
    let mut rng = seeds::rng(seed, "epoch-shuffle", &[block as u64, epoch as u64]);
    for i in (1..idx.len()).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn zero_grads(reps: &NodeRepresentations) -> RepGrads {
    RepGrads::zeros_like(reps)
}

/// Train the base block with pairwise ranking only (no distillation,
/// reservoir, or clustering terms), uniform negatives, early stopping on
/// validation Recall@20.
pub fn train_base_block(
    log: &InteractionLog,
    schedule: &BlockSchedule,
    model: &ModelConfig,
    cfg: &TrainerConfig,
) -> Result<(EmbeddingState, Vec<TrainRecord>)> {
    cfg.validate()?;
    let graph = build_block_graph(log, schedule, 0)?;
    let mut state = init_embeddings(
        graph.n_users,
        graph.n_items,
        model.dim,
        model.n_layers,
        model.activation,
        model.l2_reg,
        cfg.seed,
    )?;
    let positives = positives_from_graph(&graph);
    let edges = graph.edges();
    let n_negatives = cfg.n_uniform + cfg.n_reservoir; // base block draws all uniformly

    let mut optimizer = StateOptimizer::new(cfg.adam(), &state);
    let mut stopper = EarlyStopper::new(cfg.min_epochs_base, cfg.patience);
    let mut records = Vec::new();

    for epoch in 0..cfg.max_epochs_base {
        let started = Instant::now();
        let mut epoch_loss = 0.0;
        for (step, batch_idx) in shuffled_batches(edges.len(), cfg.batch_size, cfg.seed, 0, epoch)
            .into_iter()
            .enumerate()
        {
            let pairs: Vec<(u32, u32)> = batch_idx.iter().map(|&i| edges[i]).collect();
            let trace = forward_traced(
                &state,
                &graph,
                model.n_layers,
                cfg.dropout,
                seeds::derive(cfg.seed, "dropout", &[0, epoch as u64, step as u64]),
            )?;
            let reps = trace.reps();
            let batch = uniform_negatives(
                &pairs,
                &positives,
                graph.n_items,
                n_negatives,
                seeds::derive(cfg.seed, "uniform", &[0, epoch as u64, step as u64]),
            )?;
            let (loss, rep_grads) = bpr_loss(&batch, &reps, model.l2_reg)?;
            let grads = backward(&state, &graph, &trace, &rep_grads.users, &rep_grads.items);
            optimizer.step(&mut state, &grads);
            epoch_loss += loss;
        }

        let val = validation_recall20(&state, model, &graph, log, schedule, 0)?;
        records.push(TrainRecord {
            epoch,
            loss_base: epoch_loss,
            loss_distill: 0.0,
            loss_reservoir: 0.0,
            loss_cluster: 0.0,
            loss_total: epoch_loss,
            val_recall20: val,
            refreshed: false,
            duration_secs: started.elapsed().as_secs_f64(),
        });
        if stopper.observe(epoch, val, &state) {
            break;
        }
    }

    Ok((stopper.into_best(state), records))
}

/// Per-tensor Adam over a whole embedding state.
struct StateOptimizer {
    user: Adam,
    item: Adam,
    layer_weights: Vec<Adam>,
    layer_biases: Vec<Adam>,
}

impl StateOptimizer {
    fn new(cfg: AdamConfig, state: &EmbeddingState) -> Self {
        Self {
            user: Adam::new(cfg, state.user_table.data().len()),
            item: Adam::new(cfg, state.item_table.data().len()),
            layer_weights: state
                .layers
                .iter()
                .map(|l| Adam::new(cfg, l.weight.data().len()))
                .collect(),
            layer_biases: state
                .layers
                .iter()
                .map(|l| Adam::new(cfg, l.bias.len()))
                .collect(),
        }
    }

    fn step(&mut self, state: &mut EmbeddingState, grads: &ParamGrads) {
        self.user
            .step_matrix(&mut state.user_table, &grads.user_table);
        self.item
            .step_matrix(&mut state.item_table, &grads.item_table);
        for (i, layer) in state.layers.iter_mut().enumerate() {
            self.layer_weights[i].step_matrix(&mut layer.weight, &grads.layers[i].weight);
            self.layer_biases[i].step(&mut layer.bias, &grads.layers[i].bias);
        }
    }
}

/// Context for one incremental training step's loss.
pub struct StepContext<'a> {
    pub teacher_reps: Option<&'a NodeRepresentations>,
    pub graph_prev: Option<&'a InteractionGraph>,
    pub distill: DistillConfig,
    /// Frozen cluster targets, centroids, and kernel dof for the KL term.
    pub cluster: Option<(&'a Matrix, &'a Matrix, f64)>,
    pub weights: LossWeights,
}

/// The incremental objective on one batch: base triplet on uniform negatives
/// + weighted distillation + reservoir triplet + weighted clustering KL.
/// With an empty reservoir batch, no distillation, and beta = 0 this equals
/// the base-block loss on the same batch.
pub fn incremental_step_loss(
    reps: &NodeRepresentations,
    uniform_batch: &TripletBatch,
    reservoir_batch: &TripletBatch,
    ctx: &StepContext,
) -> Result<TotalLoss> {
    let base = if uniform_batch.is_empty() {
        (0.0, zero_grads(reps))
    } else {
        bpr_loss(uniform_batch, reps, ctx.weights.lambda_theta)?
    };
    let distill = match ctx.distill.mode {
        DistillMode::None => None,
        DistillMode::Local => {
            let (t, g) = (
                ctx.teacher_reps.ok_or_else(|| {
                    Error::InvalidArgument("local distillation needs teacher representations".into())
                })?,
                ctx.graph_prev.ok_or_else(|| {
                    Error::InvalidArgument("local distillation needs the previous graph".into())
                })?,
            );
            Some(kd_local(t, reps, g)?)
        }
        DistillMode::Contrastive => {
            let (t, g) = (
                ctx.teacher_reps.ok_or_else(|| {
                    Error::InvalidArgument(
                        "contrastive distillation needs teacher representations".into(),
                    )
                })?,
                ctx.graph_prev.ok_or_else(|| {
                    Error::InvalidArgument("contrastive distillation needs the previous graph".into())
                })?,
            );
            Some(kd_contrastive(t, reps, g, &ctx.distill)?)
        }
    };
    let reservoir = if reservoir_batch.is_empty() {
        None
    } else {
        Some(weighted_bpr_loss(reservoir_batch, reps, 0.0)?)
    };
    let cluster = match (&ctx.cluster, ctx.weights.beta > 0.0) {
        (Some((p, centroids, nu)), true) => {
            Some(crate::cluster::kl_loss(p, &reps.items, centroids, *nu)?)
        }
        _ => None,
    };
    total_loss(
        LossComponents {
            base,
            distill,
            reservoir,
            cluster,
        },
        &ctx.weights,
    )
}

/// Train one incremental block against a frozen teacher snapshot.
pub fn train_incremental_block(
    state: EmbeddingState,
    teacher: &EmbeddingState,
    log: &InteractionLog,
    schedule: &BlockSchedule,
    t: usize,
    model: &ModelConfig,
    cfg: &TrainerConfig,
    opts: &IncrementalOptions,
) -> Result<IncrementalOutcome> {
    cfg.validate()?;
    opts.weights.validate()?;
    opts.reservoir.validate()?;
    if t == 0 {
        return Err(Error::InvalidArgument(
            "block 0 is the base block; use train_base_block".into(),
        ));
    }
    if t >= schedule.n_blocks() {
        return Err(Error::InvalidArgument(format!(
            "block index {t} out of range ({} blocks)",
            schedule.n_blocks()
        )));
    }

    let graph = build_block_graph(log, schedule, t)?;
    let graph_prev = build_block_graph(log, schedule, t - 1)?;
    if teacher.n_users() < graph_prev.n_users || teacher.n_items() < graph_prev.n_items {
        return Err(Error::InvalidArgument(
            "teacher snapshot does not cover the previous block's universe".into(),
        ));
    }

    let mut state = state;
    state.extend_to(
        graph.n_users,
        graph.n_items,
        seeds::derive(cfg.seed, "new-nodes", &[t as u64]),
    );

    let teacher_reps = forward(teacher, &graph_prev, model.n_layers)?;

    let k = opts.reservoir.k;
    let mut cluster_state: Option<ClusterState> = None;
    let mut categories: Vec<u32> = match &opts.categories {
        CategoriesMode::Provided(map) => {
            if map.len() < graph.n_items {
                return Err(Error::InvalidArgument(format!(
                    "category map covers {} items, universe has {}",
                    map.len(),
                    graph.n_items
                )));
            }
            if map.iter().any(|&c| c as usize >= k) {
                return Err(Error::InvalidArgument(format!(
                    "provided categories exceed configured k = {k}"
                )));
            }
            map.clone()
        }
        CategoriesMode::Cluster(params) => {
            if params.k != k {
                return Err(Error::InvalidArgument(
                    "cluster k must match the reservoir category count".into(),
                ));
            }
            let reps = forward(&state, &graph, model.n_layers)?;
            let cs = ClusterState::init(
                &reps.items,
                params.k,
                params.nu,
                params.tau,
                seeds::derive(cfg.seed, "kmeans", &[t as u64]),
                params.kmeans_iters,
            )?;
            let cats = cs.hard_assignments();
            cluster_state = Some(cs);
            cats
        }
    };

    let positives = positives_from_graph(&graph);
    let edges = graph.edges();
    let mut optimizer = StateOptimizer::new(cfg.adam(), &state);
    let mut centroid_optimizer = cluster_state
        .as_ref()
        .map(|cs| Adam::new(cfg.adam(), cs.centroids.data().len()));
    let mut stopper = EarlyStopper::new(cfg.min_epochs_inc, cfg.patience);
    let mut records = Vec::new();
    let mut neg_stats = NegStats::new(graph.n_users, k);
    let mut reservoir_state: Option<ReservoirState> = None;

    for epoch in 0..cfg.max_epochs_inc {
        let started = Instant::now();

        // Refresh memberships and rebuild the reservoir every f epochs.
        let refreshed = cfg.n_reservoir > 0 && epoch % cfg.refresh_every == 0;
        if refreshed {
            let eval_reps = forward(&state, &graph, model.n_layers)?;
            if let Some(cs) = cluster_state.as_mut() {
                cs.refresh_targets(&eval_reps.items)?;
                categories = cs.hard_assignments();
            }
            let hist_t = category_histogram(&graph, &categories, k)?;
            let hist_prev = category_histogram(&graph_prev, &categories, k)?;
            let ranking = rank_top_negatives(&eval_reps, &positives, opts.reservoir.q)?;
            reservoir_state = Some(update_reservoir(
                &ranking,
                &hist_t,
                &hist_prev,
                &categories,
                &opts.reservoir,
            )?);
        } else if cluster_state.is_some() && opts.weights.beta > 0.0 && epoch == 0 {
            // beta > 0 without a reservoir still needs fresh targets once
            let eval_reps = forward(&state, &graph, model.n_layers)?;
            if let Some(cs) = cluster_state.as_mut() {
                cs.refresh_targets(&eval_reps.items)?;
                categories = cs.hard_assignments();
            }
        }

        let mut part_sums = [0.0f64; 4];
        let mut total_sum = 0.0;
        for (step, batch_idx) in shuffled_batches(edges.len(), cfg.batch_size, cfg.seed, t, epoch)
            .into_iter()
            .enumerate()
        {
            let pairs: Vec<(u32, u32)> = batch_idx.iter().map(|&i| edges[i]).collect();
            let trace = forward_traced(
                &state,
                &graph,
                model.n_layers,
                cfg.dropout,
                seeds::derive(cfg.seed, "dropout", &[t as u64, epoch as u64, step as u64]),
            )?;
            let reps = trace.reps();

            let uniform_batch = if cfg.n_uniform > 0 {
                uniform_negatives(
                    &pairs,
                    &positives,
                    graph.n_items,
                    cfg.n_uniform,
                    seeds::derive(cfg.seed, "uniform", &[t as u64, epoch as u64, step as u64]),
                )?
            } else {
                TripletBatch::default()
            };

            let mut reservoir_batch = TripletBatch::default();
            if cfg.n_reservoir > 0 {
                let res = reservoir_state
                    .as_ref()
                    .expect("reservoir is rebuilt at epoch 0");
                for (pair_idx, &(u, i)) in pairs.iter().enumerate() {
                    let draw_seed = seeds::derive(
                        cfg.seed,
                        "draw",
                        &[t as u64, epoch as u64, step as u64, pair_idx as u64],
                    );
                    match draw_negatives(res, u, cfg.n_reservoir, draw_seed) {
                        Ok(draw) => {
                            for (item, mult) in draw.items.iter().zip(&draw.multiplicities) {
                                reservoir_batch.triples.push(Triple {
                                    user: u,
                                    pos_item: i,
                                    neg_item: *item,
                                    multiplicity: *mult,
                                    source: NegativeSource::Reservoir,
                                });
                            }
                        }
                        Err(_) => {
                            // empty reservoir: fall back to uniform negatives
                            let fallback = uniform_negatives(
                                &[(u, i)],
                                &positives,
                                graph.n_items,
                                cfg.n_reservoir,
                                draw_seed,
                            )?;
                            for mut triple in fallback.triples {
                                triple.source = NegativeSource::Reservoir;
                                reservoir_batch.triples.push(triple);
                            }
                        }
                    }
                }
            }

            for tr in uniform_batch
                .triples
                .iter()
                .chain(reservoir_batch.triples.iter())
            {
                neg_stats.tally(
                    tr.source,
                    tr.user,
                    categories[tr.neg_item as usize],
                    u64::from(tr.multiplicity),
                );
            }

            let ctx = StepContext {
                teacher_reps: Some(&teacher_reps),
                graph_prev: Some(&graph_prev),
                distill: opts.distill,
                cluster: cluster_state
                    .as_ref()
                    .map(|cs| (&cs.p_matrix, &cs.centroids, cs.nu)),
                weights: opts.weights,
            };
            let total = incremental_step_loss(&reps, &uniform_batch, &reservoir_batch, &ctx)?;

            let grads = backward(&state, &graph, &trace, &total.grads.users, &total.grads.items);
            optimizer.step(&mut state, &grads);
            if let (Some(cg), Some(cs), Some(copt)) = (
                total.centroid_grads.as_ref(),
                cluster_state.as_mut(),
                centroid_optimizer.as_mut(),
            ) {
                copt.step_matrix(&mut cs.centroids, cg);
            }

            for (acc, part) in part_sums.iter_mut().zip(&total.parts) {
                *acc += part;
            }
            total_sum += total.value;
        }

        let val = validation_recall20(&state, model, &graph, log, schedule, t)?;
        records.push(TrainRecord {
            epoch,
            loss_base: part_sums[0],
            loss_distill: part_sums[1],
            loss_reservoir: part_sums[2],
            loss_cluster: part_sums[3],
            loss_total: total_sum,
            val_recall20: val,
            refreshed,
            duration_secs: started.elapsed().as_secs_f64(),
        });
        if stopper.observe(epoch, val, &state) {
            break;
        }
    }

    Ok(IncrementalOutcome {
        state: stopper.into_best(state),
        reservoir: reservoir_state,
        records,
        neg_stats,
        cluster: cluster_state,
    })
}
