//! End-to-end run orchestration: ingest, split, base training, the
//! incremental loop, per-block evaluation, and deterministic output files.
//!
//! Output directory layout:
//!   schedule.txt        block summary (index, ranges, sizes)
//!   users.tsv/items.tsv dense id -> raw id maps
//!   train_block{t}.tsv  per-epoch training log
//!   metrics.tsv         block \t cutoff \t metric \t value
//!   summary.txt         seed, config digest, per-block averages
//!   state_block{t}.bin  embedding checkpoint (optional)
//!   clusters_block{t}.tsv  item pseudo-categories (clustering mode)
//!   reservoir_block{t}.txt reservoir debug dump (optional)

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use crate::backbone::{forward, load_checkpoint, save_checkpoint, EmbeddingState};
use crate::config::{parse_config, RunConfig};
use crate::data::{
    build_block_graph, ingest_interactions, split_blocks, universe_through, BlockSchedule,
    InteractionLog, SplitMode,
};
use crate::error::{Error, Result};
use crate::metrics::{map_at_k, ndcg_at_k, recall_precision_at_k};
use crate::trainer::{
    build_eval_request, cumulative_positives, held_out_truth, train_base_block,
    train_incremental_block, CategoriesMode, IncrementalOptions, TrainRecord,
};

/// One metric value at one cutoff for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub block: usize,
    pub cutoff: usize,
    pub metric: &'static str,
    pub value: f64,
}

impl MetricRow {
    fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.6}",
            self.block, self.cutoff, self.metric, self.value
        )
    }
}

/// In-memory result of a full run (everything also lands in files).
#[derive(Debug)]
pub struct RunReport {
    pub seed: u64,
    pub config_digest: String,
    pub rows: Vec<MetricRow>,
    pub blocks_evaluated: Vec<usize>,
}

impl RunReport {
    /// Mean of a metric at a cutoff over the evaluated incremental blocks.
    pub fn incremental_mean(&self, metric: &str, cutoff: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.block > 0 && r.metric == metric && r.cutoff == cutoff)
            .map(|r| r.value)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

/// Read a two-column `raw_item <tab> category` map and translate it into the
/// log's dense item space. Every item in the log must be covered.
pub fn read_categories(path: &Path, log: &InteractionLog) -> Result<Vec<u32>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut by_raw = std::collections::HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let (Some(raw), Some(cat)) = (fields.next(), fields.next()) else {
            return Err(Error::Config(format!(
                "categories line {}: expected 'item category'",
                idx + 1
            )));
        };
        let cat: u32 = cat.parse().map_err(|_| {
            Error::Config(format!("categories line {}: bad category {cat:?}", idx + 1))
        })?;
        by_raw.insert(raw.to_string(), cat);
    }
    let mut out = vec![0u32; log.n_items];
    for (dense, label) in log.item_labels.iter().enumerate() {
        out[dense] = *by_raw.get(label).ok_or_else(|| {
            Error::Config(format!("item {label} has no category in {}", path.display()))
        })?;
    }
    Ok(out)
}

/// Which held-out range of a block to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalRange {
    Validation,
    Test,
}

/// Rank all items (minus cumulative training positives) for block `t` and
/// score the chosen held-out range at every cutoff.
pub fn evaluate_block(
    state: &EmbeddingState,
    model: &crate::trainer::ModelConfig,
    log: &InteractionLog,
    schedule: &BlockSchedule,
    t: usize,
    cutoffs: &[usize],
    range: EvalRange,
) -> Result<Vec<MetricRow>> {
    let ranges = &schedule.blocks[t];
    let eval_range = match range {
        EvalRange::Validation => ranges.val.clone(),
        EvalRange::Test => ranges.test.clone(),
    };
    let Some(eval_range) = eval_range else {
        return Ok(Vec::new());
    };
    let graph = build_block_graph(log, schedule, t)?;
    let reps = forward(state, &graph, model.n_layers)?;
    let exclude = cumulative_positives(log, schedule, t);
    let truth = held_out_truth(log, eval_range, &exclude);
    if truth.iter().all(BTreeSet::is_empty) {
        return Ok(Vec::new());
    }
    let request = build_eval_request(&reps, &exclude, truth, cutoffs.to_vec())?;
    let mut rows = Vec::new();
    for &k in cutoffs {
        let (recall, precision) = recall_precision_at_k(&request, k)?;
        let ndcg = ndcg_at_k(&request, k)?;
        let map = map_at_k(&request, k)?;
        rows.push(MetricRow {
            block: t,
            cutoff: k,
            metric: "recall",
            value: recall.mean,
        });
        rows.push(MetricRow {
            block: t,
            cutoff: k,
            metric: "precision",
            value: precision.mean,
        });
        rows.push(MetricRow {
            block: t,
            cutoff: k,
            metric: "map",
            value: map.mean,
        });
        rows.push(MetricRow {
            block: t,
            cutoff: k,
            metric: "ndcg",
            value: ndcg.mean,
        });
    }
    Ok(rows)
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(content.as_bytes())?;
    Ok(())
}

fn write_records(path: &Path, records: &[TrainRecord]) -> Result<()> {
    let mut s = String::from(TrainRecord::tsv_header());
    s.push('\n');
    for r in records {
        s.push_str(&r.to_tsv());
        s.push('\n');
    }
    write_text(path, &s)
}

fn write_reindex_maps(dir: &Path, log: &InteractionLog) -> Result<()> {
    let mut users = String::from("dense\traw\n");
    for (dense, raw) in log.user_labels.iter().enumerate() {
        users.push_str(&format!("{dense}\t{raw}\n"));
    }
    write_text(&dir.join("users.tsv"), &users)?;
    let mut items = String::from("dense\traw\n");
    for (dense, raw) in log.item_labels.iter().enumerate() {
        items.push_str(&format!("{dense}\t{raw}\n"));
    }
    write_text(&dir.join("items.tsv"), &items)
}

fn summary_text(cfg: &RunConfig, rows: &[MetricRow], blocks: &[usize]) -> String {
    let mut s = String::new();
    s.push_str(&format!("seed\t{}\n", cfg.trainer.seed));
    s.push_str(&format!("config_digest\t{}\n", cfg.digest));
    s.push_str(&format!(
        "cutoffs\t{}\n",
        cfg.cutoffs
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",")
    ));
    s.push_str(&format!(
        "blocks_evaluated\t{}\n",
        blocks
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",")
    ));
    s.push_str("\nblock\tmetric\tmean_over_cutoffs\n");
    for &b in blocks {
        for metric in ["recall", "precision", "map", "ndcg"] {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.block == b && r.metric == metric)
                .map(|r| r.value)
                .collect();
            if !vals.is_empty() {
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                s.push_str(&format!("{b}\t{metric}\t{mean:.6}\n"));
            }
        }
    }
    // headline: average over incremental blocks at the largest cutoff
    if let Some(&k) = cfg.cutoffs.iter().max() {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.block > 0 && r.metric == "recall" && r.cutoff == k)
            .map(|r| r.value)
            .collect();
        if !vals.is_empty() {
            s.push_str(&format!(
                "\nincremental_mean_recall@{k}\t{:.6}\n",
                vals.iter().sum::<f64>() / vals.len() as f64
            ));
        }
    }
    s
}

/// Execute a full run from a configuration file. Every artifact lands in
/// `output.dir`; the returned report mirrors `metrics.tsv`.
pub fn run_experiment(config_path: &Path) -> Result<RunReport> {
    let cfg = parse_config(config_path)?;
    run_from_config(&cfg)
}

/// Execute a full run from a parsed configuration.
pub fn run_from_config(cfg: &RunConfig) -> Result<RunReport> {
    cfg.trainer.validate()?;
    let text = std::fs::read_to_string(&cfg.events_path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", cfg.events_path.display())))?;
    let log = ingest_interactions(text.as_bytes(), cfg.delimiter)?;
    let schedule = split_blocks(
        &log,
        cfg.base_fraction,
        cfg.n_incremental,
        cfg.val_fraction,
        cfg.split_mode,
    )?;

    let categories = match &cfg.categories_path {
        Some(path) => Some(read_categories(path, &log)?),
        None => None,
    };

    std::fs::create_dir_all(&cfg.output_dir)?;
    write_text(&cfg.output_dir.join("schedule.txt"), &schedule.summary())?;
    write_reindex_maps(&cfg.output_dir, &log)?;

    let eval_range = match cfg.split_mode {
        SplitMode::Standard => EvalRange::Validation,
        SplitMode::Tuning => EvalRange::Test,
    };

    // base block
    let (mut state, records) = train_base_block(&log, &schedule, &cfg.model, &cfg.trainer)?;
    write_records(&cfg.output_dir.join("train_block0.tsv"), &records)?;
    if cfg.write_checkpoints {
        save_checkpoint(&state, &cfg.output_dir.join("state_block0.bin"))?;
    }
    let mut rows = Vec::new();
    let mut blocks_evaluated = Vec::new();
    let base_rows = evaluate_block(
        &state,
        &cfg.model,
        &log,
        &schedule,
        0,
        &cfg.cutoffs,
        eval_range,
    )?;
    if !base_rows.is_empty() {
        blocks_evaluated.push(0);
    }
    rows.extend(base_rows);

    // incremental blocks; in tuning mode the last block only supplies
    // validation/test data and is never trained
    let last_trainable = match cfg.split_mode {
        SplitMode::Standard => schedule.n_blocks() - 1,
        SplitMode::Tuning => schedule.n_blocks().saturating_sub(2),
    };
    for t in 1..=last_trainable {
        let teacher = state.clone();
        let mut reservoir = cfg.reservoir;
        let categories_mode = match &categories {
            Some(map) => {
                let k = map.iter().copied().max().unwrap_or(0) as usize + 1;
                reservoir.k = k;
                CategoriesMode::Provided(map.clone())
            }
            None => CategoriesMode::Cluster(cfg.cluster),
        };
        let opts = IncrementalOptions {
            weights: cfg.weights,
            distill: cfg.distill,
            reservoir,
            categories: categories_mode,
        };
        let outcome = train_incremental_block(
            state,
            &teacher,
            &log,
            &schedule,
            t,
            &cfg.model,
            &cfg.trainer,
            &opts,
        )?;
        state = outcome.state;
        write_records(
            &cfg.output_dir.join(format!("train_block{t}.tsv")),
            &outcome.records,
        )?;
        if cfg.write_checkpoints {
            save_checkpoint(&state, &cfg.output_dir.join(format!("state_block{t}.bin")))?;
        }
        if cfg.dump_reservoir {
            if let Some(res) = &outcome.reservoir {
                write_text(
                    &cfg.output_dir.join(format!("reservoir_block{t}.txt")),
                    &res.dump(),
                )?;
            }
        }
        if let Some(cs) = &outcome.cluster {
            let cats = cs.hard_assignments();
            let mut s = String::from("item\tcategory\n");
            for (i, c) in cats.iter().enumerate() {
                s.push_str(&format!("{i}\t{c}\n"));
            }
            write_text(&cfg.output_dir.join(format!("clusters_block{t}.tsv")), &s)?;
        }

        let block_rows = evaluate_block(
            &state,
            &cfg.model,
            &log,
            &schedule,
            t,
            &cfg.cutoffs,
            eval_range,
        )?;
        if !block_rows.is_empty() {
            blocks_evaluated.push(t);
        }
        rows.extend(block_rows);
    }

    let mut metrics = String::from("block\tcutoff\tmetric\tvalue\n");
    for r in &rows {
        metrics.push_str(&r.to_tsv());
        metrics.push('\n');
    }
    write_text(&cfg.output_dir.join("metrics.tsv"), &metrics)?;
    write_text(
        &cfg.output_dir.join("summary.txt"),
        &summary_text(cfg, &rows, &blocks_evaluated),
    )?;

    Ok(RunReport {
        seed: cfg.trainer.seed,
        config_digest: cfg.digest.clone(),
        rows,
        blocks_evaluated,
    })
}

/// Evaluate a saved checkpoint on one block's held-out range.
pub fn evaluate_checkpoint(
    cfg: &RunConfig,
    checkpoint: &Path,
    block: usize,
    range: EvalRange,
) -> Result<Vec<MetricRow>> {
    let text = std::fs::read_to_string(&cfg.events_path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", cfg.events_path.display())))?;
    let log = ingest_interactions(text.as_bytes(), cfg.delimiter)?;
    let schedule = split_blocks(
        &log,
        cfg.base_fraction,
        cfg.n_incremental,
        cfg.val_fraction,
        cfg.split_mode,
    )?;
    if block >= schedule.n_blocks() {
        return Err(Error::InvalidArgument(format!(
            "block {block} out of range ({} blocks)",
            schedule.n_blocks()
        )));
    }
    let state = load_checkpoint(checkpoint)?;
    let (n_users, n_items) = universe_through(&log, &schedule, block);
    if state.n_users() < n_users || state.n_items() < n_items {
        return Err(Error::Checkpoint(format!(
            "checkpoint covers {}x{} nodes but block {block} needs {}x{}",
            state.n_users(),
            state.n_items(),
            n_users,
            n_items
        )));
    }
    evaluate_block(
        &state,
        &cfg.model,
        &log,
        &schedule,
        block,
        &cfg.cutoffs,
        range,
    )
}

/// Render metric rows as the canonical TSV (with header).
pub fn rows_to_tsv(rows: &[MetricRow]) -> String {
    let mut s = String::from("block\tcutoff\tmetric\tvalue\n");
    for r in rows {
        s.push_str(&r.to_tsv());
        s.push('\n');
    }
    s
}
