//! Synthetic interaction generator with planted interest drift.
//!
//! Items are partitioned into categories; each user samples items from a
//! personal category distribution concentrated on a dominant category. A
//! chosen fraction of users flips their dominant category at a given block,
//! which plants a measurable interest shift for the drift experiments.

use rand::Rng;

use crate::data::{InteractionEvent, InteractionLog};
use crate::error::{Error, Result};
use crate::seeds;

#[derive(Debug, Clone, Copy)]
pub struct SynthParams {
    pub n_users: usize,
    pub n_items: usize,
    /// Number of planted categories.
    pub k_true: usize,
    /// Fraction of users whose dominant category flips.
    pub drift_fraction: f64,
    /// Block index at which drifting users flip.
    pub flip_block: usize,
    pub n_blocks: usize,
    pub events_per_user_block: usize,
    /// Probability mass on the dominant category (rest spread uniformly).
    pub dominant_mass: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_items: 300,
            k_true: 4,
            drift_fraction: 0.3,
            flip_block: 2,
            n_blocks: 4,
            events_per_user_block: 20,
            dominant_mass: 0.8,
            seed: 7,
        }
    }
}

/// Generated log plus the planted ground truth, all in the log's dense id
/// space.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub log: InteractionLog,
    /// Dense item id -> planted category.
    pub categories: Vec<u32>,
    /// Dense user id -> whether this user drifts.
    pub drifted: Vec<bool>,
    /// Dense user id -> dominant category before the flip.
    pub old_dominant: Vec<u32>,
    /// Dense user id -> dominant category from the flip block onward (equals
    /// `old_dominant` for non-drifting users).
    pub new_dominant: Vec<u32>,
}

fn category_of(item: usize, n_items: usize, k: usize) -> u32 {
    (item * k / n_items) as u32
}

/// Generate a drift dataset. Events are written block by block with strictly
/// increasing timestamps, each block shuffled internally, so an equal-fraction
/// chronological split reproduces the generator blocks exactly.
pub fn synth_drift_dataset(params: &SynthParams) -> Result<SynthDataset> {
    let p = params;
    if p.k_true < 2 {
        return Err(Error::InvalidArgument("need at least two categories".into()));
    }
    if p.k_true > p.n_items {
        return Err(Error::InvalidArgument(
            "more categories than items".into(),
        ));
    }
    if !(0.0..=1.0).contains(&p.drift_fraction) {
        return Err(Error::InvalidArgument(
            "drift fraction must lie in [0,1]".into(),
        ));
    }
    if p.n_blocks < 2 || p.flip_block == 0 || p.flip_block >= p.n_blocks {
        return Err(Error::InvalidArgument(
            "flip block must lie inside (0, n_blocks)".into(),
        ));
    }
    if p.n_users == 0 || p.events_per_user_block == 0 {
        return Err(Error::InvalidArgument("empty generator".into()));
    }
    if !(0.0 < p.dominant_mass && p.dominant_mass < 1.0) {
        return Err(Error::InvalidArgument(
            "dominant mass must lie in (0,1)".into(),
        ));
    }

    // items of each category (contiguous, near-equal ranges)
    let mut by_category: Vec<Vec<u32>> = vec![Vec::new(); p.k_true];
    for item in 0..p.n_items {
        by_category[category_of(item, p.n_items, p.k_true) as usize].push(item as u32);
    }
    if by_category.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument(
            "an item category would be empty".into(),
        ));
    }

    let mut rng = seeds::rng(p.seed, "synth", &[]);
    let n_drift = (p.n_users as f64 * p.drift_fraction).round() as usize;
    // shuffle user ids to pick who drifts
    let mut order: Vec<usize> = (0..p.n_users).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut drifted_raw = vec![false; p.n_users];
    for &u in order.iter().take(n_drift) {
        drifted_raw[u] = true;
    }
    let old_dominant_raw: Vec<u32> = (0..p.n_users)
        .map(|_| rng.random_range(0..p.k_true as u32))
        .collect();
    let new_dominant_raw: Vec<u32> = (0..p.n_users)
        .map(|u| {
            if drifted_raw[u] {
                let offset = rng.random_range(1..p.k_true as u32);
                (old_dominant_raw[u] + offset) % p.k_true as u32
            } else {
                old_dominant_raw[u]
            }
        })
        .collect();

    let other_mass = (1.0 - p.dominant_mass) / (p.k_true - 1) as f64;
    let block_len = p.n_users * p.events_per_user_block;
    let mut raw_events: Vec<(u64, u64, i64)> = Vec::with_capacity(block_len * p.n_blocks);
    for block in 0..p.n_blocks {
        let mut block_events: Vec<(u64, u64)> = Vec::with_capacity(block_len);
        for user in 0..p.n_users {
            let dominant = if block >= p.flip_block {
                new_dominant_raw[user]
            } else {
                old_dominant_raw[user]
            } as usize;
            for _ in 0..p.events_per_user_block {
                let cat = if rng.random::<f64>() < p.dominant_mass {
                    dominant
                } else {
                    // uniform over the remaining categories via other_mass
                    let mut pick = rng.random_range(0..p.k_true - 1);
                    if pick >= dominant {
                        pick += 1;
                    }
                    debug_assert!(other_mass > 0.0);
                    pick
                };
                let pool = &by_category[cat];
                let item = pool[rng.random_range(0..pool.len())];
                block_events.push((user as u64, u64::from(item)));
            }
        }
        // interleave users within the block
        for i in (1..block_events.len()).rev() {
            let j = rng.random_range(0..=i);
            block_events.swap(i, j);
        }
        for (offset, (u, i)) in block_events.into_iter().enumerate() {
            let ts = (block * block_len + offset) as i64;
            raw_events.push((u, i, ts));
        }
    }

    let log = InteractionLog::from_events(raw_events)?;

    // translate planted metadata into the log's dense id space
    let mut categories = vec![0u32; log.n_items];
    for (dense, label) in log.item_labels.iter().enumerate() {
        let raw: usize = label.parse().expect("synthetic item labels are numeric");
        categories[dense] = category_of(raw, p.n_items, p.k_true);
    }
    let mut drifted = vec![false; log.n_users];
    let mut old_dominant = vec![0u32; log.n_users];
    let mut new_dominant = vec![0u32; log.n_users];
    for (dense, label) in log.user_labels.iter().enumerate() {
        let raw: usize = label.parse().expect("synthetic user labels are numeric");
        drifted[dense] = drifted_raw[raw];
        old_dominant[dense] = old_dominant_raw[raw];
        new_dominant[dense] = new_dominant_raw[raw];
    }

    Ok(SynthDataset {
        log,
        categories,
        drifted,
        old_dominant,
        new_dominant,
    })
}

/// Write the dataset as a delimited event file plus a two-column category map
/// (raw ids, matching what `ingest_interactions` will re-index).
pub fn write_dataset(
    ds: &SynthDataset,
    events_path: &std::path::Path,
    categories_path: &std::path::Path,
    delimiter: char,
) -> Result<()> {
    use std::io::Write;
    let mut ev = std::io::BufWriter::new(std::fs::File::create(events_path)?);
    for e in &ds.log.events {
        writeln!(
            ev,
            "{}{}{}{}{}",
            ds.log.user_labels[e.user as usize],
            delimiter,
            ds.log.item_labels[e.item as usize],
            delimiter,
            e.timestamp
        )?;
    }
    let mut cats = std::io::BufWriter::new(std::fs::File::create(categories_path)?);
    for (dense, cat) in ds.categories.iter().enumerate() {
        writeln!(cats, "{}\t{}", ds.log.item_labels[dense], cat)?;
    }
    Ok(())
}

/// Convenience: events of one generator block (all blocks have equal length).
pub fn block_events<'a>(
    ds: &'a SynthDataset,
    params: &SynthParams,
    block: usize,
) -> &'a [InteractionEvent] {
    let len = params.n_users * params.events_per_user_block;
    &ds.log.events[block * len..(block + 1) * len]
}
