//! Embedding backbone: learnable user/item tables propagated through a small
//! mean-aggregation graph network, pair scoring, and top-Q negative ranking.
//!
//! Each layer aggregates the opposite side's previous representations by
//! neighborhood mean (zero vector for isolated nodes) and combines with the
//! node's own previous representation through a shared affine map followed by
//! an activation. With zero layers the backbone degenerates to plain matrix
//! factorization, which is the fastest mode for tests.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::InteractionGraph;
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Linear,
}

/// One combine layer: `h' = act(W [h_self ; h_agg] + b)`.
/// The weight is shared between the user and item sides.
#[derive(Debug, Clone)]
pub struct CombineLayer {
    /// d x 2d
    pub weight: Matrix,
    /// d
    pub bias: Vec<f64>,
}

/// Learnable parameters: embedding tables plus per-layer combine weights.
#[derive(Debug, Clone)]
pub struct EmbeddingState {
    pub user_table: Matrix,
    pub item_table: Matrix,
    pub layers: Vec<CombineLayer>,
    pub dim: usize,
    pub activation: Activation,
    /// L2 regularization strength applied by the triplet losses.
    pub l2_reg: f64,
}

impl EmbeddingState {
    pub fn n_users(&self) -> usize {
        self.user_table.rows()
    }

    pub fn n_items(&self) -> usize {
        self.item_table.rows()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// FNV-1a over the bit patterns of every parameter; used to assert that
    /// teacher snapshots stay frozen.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for &v in self.user_table.data() {
            eat(v);
        }
        for &v in self.item_table.data() {
            eat(v);
        }
        for l in &self.layers {
            for &v in l.weight.data() {
                eat(v);
            }
            for &v in &l.bias {
                eat(v);
            }
        }
        h
    }

    /// Append freshly initialized rows so the tables cover a grown universe.
    /// Existing rows are untouched.
    pub fn extend_to(&mut self, n_users: usize, n_items: usize, seed: u64) {
        let d = self.dim;
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).unwrap();
        if n_users > self.n_users() {
            let first = self.user_table.grow_rows(n_users - self.user_table.rows());
            let mut rng = seeds::rng(seed, "extend-users", &[first as u64]);
            for r in first..n_users {
                for v in self.user_table.row_mut(r) {
                    *v = normal.sample(&mut rng);
                }
            }
        }
        if n_items > self.n_items() {
            let first = self.item_table.grow_rows(n_items - self.item_table.rows());
            let mut rng = seeds::rng(seed, "extend-items", &[first as u64]);
            for r in first..n_items {
                for v in self.item_table.row_mut(r) {
                    *v = normal.sample(&mut rng);
                }
            }
        }
    }
}

/// Final-layer outputs for every node.
#[derive(Debug, Clone)]
pub struct NodeRepresentations {
    pub users: Matrix,
    pub items: Matrix,
}

/// Create tables with entries drawn i.i.d. from N(0, 1/d), so row norms
/// concentrate near 1. Layer weights use the same scale over fan-in 2d.
pub fn init_embeddings(
    n_users: usize,
    n_items: usize,
    d: usize,
    n_layers: usize,
    activation: Activation,
    l2_reg: f64,
    seed: u64,
) -> Result<EmbeddingState> {
    if n_users == 0 || n_items == 0 {
        return Err(Error::InvalidArgument(
            "embedding tables need at least one user and one item".into(),
        ));
    }
    if d == 0 {
        return Err(Error::InvalidArgument("embedding dim must be >= 1".into()));
    }
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).unwrap();
    let mut rng = seeds::rng(seed, "init-embeddings", &[]);
    let mut user_table = Matrix::zeros(n_users, d);
    for v in user_table.data_mut() {
        *v = normal.sample(&mut rng);
    }
    let mut item_table = Matrix::zeros(n_items, d);
    for v in item_table.data_mut() {
        *v = normal.sample(&mut rng);
    }
    let w_normal = Normal::new(0.0, 1.0 / (2.0 * d as f64).sqrt()).unwrap();
    let layers = (0..n_layers)
        .map(|_| {
            let mut weight = Matrix::zeros(d, 2 * d);
            for v in weight.data_mut() {
                *v = w_normal.sample(&mut rng);
            }
            CombineLayer {
                weight,
                bias: vec![0.0; d],
            }
        })
        .collect();
    Ok(EmbeddingState {
        user_table,
        item_table,
        layers,
        dim: d,
        activation,
        l2_reg,
    })
}

/// Cached intermediates of one forward pass, enough to backpropagate.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// h^(0) .. h^(L) for users; h^(k) is post-activation, post-dropout.
    h_users: Vec<Matrix>,
    h_items: Vec<Matrix>,
    /// Pre-dropout activations per layer (1-indexed layer k stored at k-1).
    act_users: Vec<Matrix>,
    act_items: Vec<Matrix>,
    /// Aggregated neighborhood inputs per layer.
    agg_users: Vec<Matrix>,
    agg_items: Vec<Matrix>,
    /// Inverted-dropout masks (already divided by keep prob); empty when
    /// dropout is off.
    mask_users: Vec<Option<Matrix>>,
    mask_items: Vec<Option<Matrix>>,
}

impl ForwardTrace {
    pub fn reps(&self) -> NodeRepresentations {
        NodeRepresentations {
            users: self.h_users.last().unwrap().clone(),
            items: self.h_items.last().unwrap().clone(),
        }
    }
}

/// Gradients with respect to every parameter of an [`EmbeddingState`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub user_table: Matrix,
    pub item_table: Matrix,
    pub layers: Vec<CombineLayer>,
}

impl ParamGrads {
    pub fn zeros_like(state: &EmbeddingState) -> Self {
        Self {
            user_table: Matrix::zeros(state.n_users(), state.dim),
            item_table: Matrix::zeros(state.n_items(), state.dim),
            layers: state
                .layers
                .iter()
                .map(|l| CombineLayer {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }
}

fn mean_aggregate(out: &mut Matrix, adj: &[Vec<u32>], source: &Matrix) {
    let d = out.cols();
    for (v, nbrs) in adj.iter().enumerate() {
        let row = out.row_mut(v);
        row.fill(0.0);
        if nbrs.is_empty() {
            continue;
        }
        for &n in nbrs {
            let src = source.row(n as usize);
            for c in 0..d {
                row[c] += src[c];
            }
        }
        let inv = 1.0 / nbrs.len() as f64;
        for c in 0..d {
            row[c] *= inv;
        }
    }
}

fn apply_combine(
    layer: &CombineLayer,
    activation: Activation,
    h_prev: &Matrix,
    agg: &Matrix,
) -> Matrix {
    let n = h_prev.rows();
    let d = h_prev.cols();
    let mut out = Matrix::zeros(n, d);
    for v in 0..n {
        let hs = h_prev.row(v);
        let ha = agg.row(v);
        let row = out.row_mut(v);
        for o in 0..d {
            let w = layer.weight.row(o);
            let mut z = layer.bias[o];
            z += dot(&w[..d], hs);
            z += dot(&w[d..], ha);
            row[o] = match activation {
                Activation::Tanh => z.tanh(),
                Activation::Linear => z,
            };
        }
    }
    out
}

/// Propagate the tables through `n_layers` of mean aggregation + combine.
/// With `dropout > 0` an inverted-dropout mask (seeded) is applied to each
/// layer's output; pass `dropout = 0` for evaluation.
pub fn forward_traced(
    state: &EmbeddingState,
    graph: &InteractionGraph,
    n_layers: usize,
    dropout: f64,
    dropout_seed: u64,
) -> Result<ForwardTrace> {
    if graph.n_users > state.n_users() || graph.n_items > state.n_items() {
        return Err(Error::Shape(format!(
            "graph universe ({} users, {} items) exceeds embedding tables ({}, {})",
            graph.n_users,
            graph.n_items,
            state.n_users(),
            state.n_items()
        )));
    }
    if n_layers > state.n_layers() {
        return Err(Error::InvalidArgument(format!(
            "requested {n_layers} layers but state has {}",
            state.n_layers()
        )));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(Error::InvalidArgument(format!(
            "dropout must lie in [0,1), got {dropout}"
        )));
    }

    let mut trace = ForwardTrace {
        h_users: vec![state.user_table.clone()],
        h_items: vec![state.item_table.clone()],
        act_users: Vec::new(),
        act_items: Vec::new(),
        agg_users: Vec::new(),
        agg_items: Vec::new(),
        mask_users: Vec::new(),
        mask_items: Vec::new(),
    };

    for k in 0..n_layers {
        let layer = &state.layers[k];
        let hu = &trace.h_users[k];
        let hi = &trace.h_items[k];
        let mut agg_u = Matrix::zeros(hu.rows(), hu.cols());
        let mut agg_i = Matrix::zeros(hi.rows(), hi.cols());
        // users aggregate item reps; items aggregate user reps
        mean_aggregate(&mut agg_u, &graph.user_adj, hi);
        mean_aggregate(&mut agg_i, &graph.item_adj, hu);

        let act_u = apply_combine(layer, state.activation, hu, &agg_u);
        let act_i = apply_combine(layer, state.activation, hi, &agg_i);

        let (next_u, mask_u) = apply_dropout(&act_u, dropout, dropout_seed, 2 * k as u64);
        let (next_i, mask_i) = apply_dropout(&act_i, dropout, dropout_seed, 2 * k as u64 + 1);

        trace.agg_users.push(agg_u);
        trace.agg_items.push(agg_i);
        trace.act_users.push(act_u);
        trace.act_items.push(act_i);
        trace.mask_users.push(mask_u);
        trace.mask_items.push(mask_i);
        trace.h_users.push(next_u);
        trace.h_items.push(next_i);
    }
    Ok(trace)
}

fn apply_dropout(act: &Matrix, rate: f64, seed: u64, stream: u64) -> (Matrix, Option<Matrix>) {
    if rate == 0.0 {
        return (act.clone(), None);
    }
    let keep = 1.0 - rate;
    let mut rng = seeds::rng(seed, "dropout", &[stream]);
    let mut mask = Matrix::zeros(act.rows(), act.cols());
    for v in mask.data_mut() {
        *v = if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        };
    }
    let mut out = act.clone();
    for (o, m) in out.data_mut().iter_mut().zip(mask.data()) {
        *o *= m;
    }
    (out, Some(mask))
}

/// Evaluation-mode forward pass: deterministic, no dropout.
pub fn forward(
    state: &EmbeddingState,
    graph: &InteractionGraph,
    n_layers: usize,
) -> Result<NodeRepresentations> {
    Ok(forward_traced(state, graph, n_layers, 0.0, 0)?.reps())
}

/// Backpropagate gradients w.r.t. the final representations down to every
/// parameter. `d_users`/`d_items` must match the table shapes.
pub fn backward(
    state: &EmbeddingState,
    graph: &InteractionGraph,
    trace: &ForwardTrace,
    d_users: &Matrix,
    d_items: &Matrix,
) -> ParamGrads {
    let d = state.dim;
    let n_layers = trace.act_users.len();
    let mut grads = ParamGrads::zeros_like(state);

    let mut g_u = d_users.clone();
    let mut g_i = d_items.clone();

    for k in (0..n_layers).rev() {
        let layer = &state.layers[k];

        // through dropout
        if let Some(mask) = &trace.mask_users[k] {
            for (g, m) in g_u.data_mut().iter_mut().zip(mask.data()) {
                *g *= m;
            }
        }
        if let Some(mask) = &trace.mask_items[k] {
            for (g, m) in g_i.data_mut().iter_mut().zip(mask.data()) {
                *g *= m;
            }
        }

        // through activation: dz = g * act'(z); tanh' = 1 - act^2
        let mut dz_u = g_u;
        let mut dz_i = g_i;
        if state.activation == Activation::Tanh {
            for (g, a) in dz_u.data_mut().iter_mut().zip(trace.act_users[k].data()) {
                *g *= 1.0 - a * a;
            }
            for (g, a) in dz_i.data_mut().iter_mut().zip(trace.act_items[k].data()) {
                *g *= 1.0 - a * a;
            }
        }

        let hu_prev = &trace.h_users[k];
        let hi_prev = &trace.h_items[k];
        let mut next_gu = Matrix::zeros(hu_prev.rows(), d);
        let mut next_gi = Matrix::zeros(hi_prev.rows(), d);
        let mut d_agg_u = Matrix::zeros(hu_prev.rows(), d);
        let mut d_agg_i = Matrix::zeros(hi_prev.rows(), d);

        let gl = &mut grads.layers[k];
        backprop_combine(
            layer, &dz_u, hu_prev, &trace.agg_users[k], gl, &mut next_gu, &mut d_agg_u,
        );
        backprop_combine(
            layer, &dz_i, hi_prev, &trace.agg_items[k], gl, &mut next_gi, &mut d_agg_i,
        );

        // distribute aggregation gradients to the opposite side
        for (v, nbrs) in graph.user_adj.iter().enumerate() {
            if nbrs.is_empty() {
                continue;
            }
            let inv = 1.0 / nbrs.len() as f64;
            let ga = d_agg_u.row(v);
            for &n in nbrs {
                let row = next_gi.row_mut(n as usize);
                for c in 0..d {
                    row[c] += ga[c] * inv;
                }
            }
        }
        for (v, nbrs) in graph.item_adj.iter().enumerate() {
            if nbrs.is_empty() {
                continue;
            }
            let inv = 1.0 / nbrs.len() as f64;
            let ga = d_agg_i.row(v);
            for &n in nbrs {
                let row = next_gu.row_mut(n as usize);
                for c in 0..d {
                    row[c] += ga[c] * inv;
                }
            }
        }

        g_u = next_gu;
        g_i = next_gi;
    }

    grads.user_table = g_u;
    grads.item_table = g_i;
    grads
}

fn backprop_combine(
    layer: &CombineLayer,
    dz: &Matrix,
    h_prev: &Matrix,
    agg: &Matrix,
    grads: &mut CombineLayer,
    d_h_prev: &mut Matrix,
    d_agg: &mut Matrix,
) {
    let n = dz.rows();
    let d = dz.cols();
    for v in 0..n {
        let dzv = dz.row(v);
        let hs = h_prev.row(v);
        let ha = agg.row(v);
        for o in 0..d {
            let g = dzv[o];
            if g == 0.0 {
                continue;
            }
            grads.bias[o] += g;
            let wrow = layer.weight.row(o);
            let grow = grads.weight.row_mut(o);
            for c in 0..d {
                grow[c] += g * hs[c];
                grow[d + c] += g * ha[c];
            }
            let dhp = d_h_prev.row_mut(v);
            for c in 0..d {
                dhp[c] += g * wrow[c];
            }
            let dag = d_agg.row_mut(v);
            for c in 0..d {
                dag[c] += g * wrow[d + c];
            }
        }
    }
}

/// Relevance estimate: dot product of the final user and item representations.
pub fn score(reps: &NodeRepresentations, user: u32, item: u32) -> Result<f64> {
    if user as usize >= reps.users.rows() || item as usize >= reps.items.rows() {
        return Err(Error::InvalidArgument(format!(
            "score({user}, {item}) out of range ({} users, {} items)",
            reps.users.rows(),
            reps.items.rows()
        )));
    }
    Ok(dot(reps.users.row(user as usize), reps.items.row(item as usize)))
}

/// An item with its model score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredItem {
    pub item: u32,
    pub score: f64,
}

/// Per-user positive sets for the current block plus each user's top-Q
/// negative list, scores non-increasing, ties broken by ascending item id.
#[derive(Debug, Clone)]
pub struct RankingContext {
    pub positives: Vec<BTreeSet<u32>>,
    pub top_negatives: Vec<Vec<ScoredItem>>,
}

fn rank_cmp(a: &ScoredItem, b: &ScoredItem) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.item.cmp(&b.item))
}

/// For each user, select the Q highest-scoring items outside that user's
/// current-block positive set. Partial selection keeps the per-user cost at
/// O(|I|) on average; only the selected prefix is sorted.
pub fn rank_top_negatives(
    reps: &NodeRepresentations,
    positives: &[BTreeSet<u32>],
    q: usize,
) -> Result<RankingContext> {
    if q == 0 {
        return Err(Error::InvalidArgument("reservoir size must be >= 1".into()));
    }
    if positives.len() > reps.users.rows() {
        return Err(Error::Shape(format!(
            "{} positive sets for {} user rows",
            positives.len(),
            reps.users.rows()
        )));
    }
    let n_items = reps.items.rows();
    let mut lists = Vec::with_capacity(positives.len());
    for (u, pos) in positives.iter().enumerate() {
        let urow = reps.users.row(u);
        let mut cands: Vec<ScoredItem> = (0..n_items as u32)
            .filter(|i| !pos.contains(i))
            .map(|i| ScoredItem {
                item: i,
                score: dot(urow, reps.items.row(i as usize)),
            })
            .collect();
        if cands.len() > q {
            cands.select_nth_unstable_by(q - 1, rank_cmp);
            cands.truncate(q);
        }
        cands.sort_unstable_by(rank_cmp);
        lists.push(cands);
    }
    Ok(RankingContext {
        positives: positives.to_vec(),
        top_negatives: lists,
    })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"IRC1";

/// Binary checkpoint. Layout (little-endian):
/// magic "IRC1", version u32, n_users u64, n_items u64, dim u64, n_layers u64,
/// activation u8 (0 = linear, 1 = tanh), l2_reg f64, then f32 row-major user
/// table, item table, and per layer the weight (d x 2d) and bias (d).
pub fn save_checkpoint(state: &EmbeddingState, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(state.n_users() as u64).to_le_bytes());
    buf.extend_from_slice(&(state.n_items() as u64).to_le_bytes());
    buf.extend_from_slice(&(state.dim as u64).to_le_bytes());
    buf.extend_from_slice(&(state.n_layers() as u64).to_le_bytes());
    buf.push(match state.activation {
        Activation::Linear => 0,
        Activation::Tanh => 1,
    });
    buf.extend_from_slice(&state.l2_reg.to_le_bytes());
    let mut put = |m: &Matrix| {
        for &v in m.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    };
    put(&state.user_table);
    put(&state.item_table);
    for l in &state.layers {
        for &v in l.weight.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &v in &l.bias {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<EmbeddingState> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != 1 {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let read_u64 = |pos: &mut usize| -> Result<u64> {
        Ok(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()))
    };
    let n_users = read_u64(&mut pos)? as usize;
    let n_items = read_u64(&mut pos)? as usize;
    let dim = read_u64(&mut pos)? as usize;
    let n_layers = read_u64(&mut pos)? as usize;
    let activation = match take(&mut pos, 1)?[0] {
        0 => Activation::Linear,
        1 => Activation::Tanh,
        x => return Err(Error::Checkpoint(format!("unknown activation tag {x}"))),
    };
    let l2_reg = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let read_mat = |pos: &mut usize, rows: usize, cols: usize| -> Result<Matrix> {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data_mut() {
            *v = f32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as f64;
        }
        Ok(m)
    };
    let user_table = read_mat(&mut pos, n_users, dim)?;
    let item_table = read_mat(&mut pos, n_items, dim)?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let weight = read_mat(&mut pos, dim, 2 * dim)?;
        let mut bias = vec![0.0; dim];
        for v in &mut bias {
            *v = f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as f64;
        }
        layers.push(CombineLayer { weight, bias });
    }
    if pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(EmbeddingState {
        user_table,
        item_table,
        layers,
        dim,
        activation,
        l2_reg,
    })
}
