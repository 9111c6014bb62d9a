//! Flat key-value run configuration.
//!
//! Format: one `key = value` pair per line; `#` starts a comment; blank lines
//! are ignored. Unknown keys are rejected by name. The SHA-256 digest of the
//! raw file content is carried into run summaries so outputs can be traced
//! back to an exact configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::backbone::Activation;
use crate::data::SplitMode;
use crate::error::{Error, Result};
use crate::losses::{DistillConfig, DistillMode, LossWeights};
use crate::reservoir::ReservoirConfig;
use crate::trainer::{ClusterParams, ModelConfig, TrainerConfig};

/// Everything a `train` run needs.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub events_path: PathBuf,
    pub delimiter: char,
    /// Per-item category file; None switches to clustered pseudo-categories.
    pub categories_path: Option<PathBuf>,
    pub split_mode: SplitMode,
    pub base_fraction: f64,
    pub n_incremental: usize,
    pub val_fraction: f64,
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub reservoir: ReservoirConfig,
    pub cluster: ClusterParams,
    pub distill: DistillConfig,
    pub weights: LossWeights,
    pub cutoffs: Vec<usize>,
    pub output_dir: PathBuf,
    pub write_checkpoints: bool,
    pub dump_reservoir: bool,
    /// SHA-256 of the raw configuration bytes, hex-encoded.
    pub digest: String,
}

struct KeyValues {
    entries: BTreeMap<String, (String, usize)>,
    used: std::collections::BTreeSet<String>,
}

impl KeyValues {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'key = value', got {:?}",
                    idx + 1,
                    line
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if entries.insert(key.clone(), (value, idx + 1)).is_some() {
                return Err(Error::Config(format!(
                    "line {}: duplicate key '{key}'",
                    idx + 1
                )));
            }
        }
        Ok(Self {
            entries,
            used: Default::default(),
        })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.used.insert(key.to_string());
        self.entries.get(key).map(|(v, _)| v.clone())
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("key '{key}': cannot parse value {v:?}"))),
        }
    }

    fn required(&mut self, key: &str) -> Result<String> {
        self.take(key)
            .ok_or_else(|| Error::Config(format!("missing required key '{key}'")))
    }

    fn reject_unknown(&self) -> Result<()> {
        let mut unknown: Vec<(usize, &String)> = self
            .entries
            .iter()
            .filter(|(k, _)| !self.used.contains(*k))
            .map(|(k, (_, line))| (*line, k))
            .collect();
        unknown.sort();
        if let Some((line, key)) = unknown.first() {
            return Err(Error::Config(format!(
                "unknown key '{key}' at line {line}"
            )));
        }
        Ok(())
    }
}

/// Parse a configuration from its raw text (digest is computed over `text`).
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut kv = KeyValues::parse(text)?;

    let events_path = PathBuf::from(kv.required("data.events")?);
    let delimiter_raw = kv.take("data.delimiter").unwrap_or_else(|| ",".into());
    let delimiter = match delimiter_raw.as_str() {
        "\\t" | "tab" => '\t',
        s => {
            let mut chars = s.chars();
            let first = chars.next().ok_or_else(|| {
                Error::Config("key 'data.delimiter': empty delimiter".into())
            })?;
            if chars.next().is_some() {
                return Err(Error::Config(
                    "key 'data.delimiter': must be a single character (or \\t)".into(),
                ));
            }
            first
        }
    };
    let categories_path = match kv.take("data.categories") {
        None => None,
        Some(v) if v == "none" => None,
        Some(v) => Some(PathBuf::from(v)),
    };

    let split_mode = match kv.take("split.mode").as_deref().unwrap_or("standard") {
        "standard" => SplitMode::Standard,
        "tuning" => SplitMode::Tuning,
        other => {
            return Err(Error::Config(format!(
                "key 'split.mode': expected standard|tuning, got {other:?}"
            )))
        }
    };
    let base_fraction = kv.parsed("split.base_fraction", 0.6)?;
    let n_incremental = kv.parsed("split.n_incremental", 4usize)?;
    let val_fraction = kv.parsed("split.val_fraction", 0.05)?;

    let activation = match kv.take("model.activation").as_deref().unwrap_or("tanh") {
        "tanh" => Activation::Tanh,
        "linear" => Activation::Linear,
        other => {
            return Err(Error::Config(format!(
                "key 'model.activation': expected tanh|linear, got {other:?}"
            )))
        }
    };
    let model = ModelConfig {
        dim: kv.parsed("model.dim", 128usize)?,
        n_layers: kv.parsed("model.layers", 2usize)?,
        activation,
        l2_reg: kv.parsed("model.l2", 1e-5)?,
    };

    let trainer = TrainerConfig {
        batch_size: kv.parsed("train.batch_size", 64usize)?,
        learning_rate: kv.parsed("train.learning_rate", 5e-4)?,
        beta1: kv.parsed("train.beta1", 0.9)?,
        beta2: kv.parsed("train.beta2", 0.999)?,
        epsilon: kv.parsed("train.epsilon", 1e-8)?,
        n_uniform: kv.parsed("train.n_uniform", 5usize)?,
        n_reservoir: kv.parsed("train.n_reservoir", 5usize)?,
        min_epochs_base: kv.parsed("train.min_epochs_base", 10usize)?,
        max_epochs_base: kv.parsed("train.max_epochs_base", 50usize)?,
        min_epochs_inc: kv.parsed("train.min_epochs_inc", 3usize)?,
        max_epochs_inc: kv.parsed("train.max_epochs_inc", 15usize)?,
        patience: kv.parsed("train.patience", 2usize)?,
        refresh_every: kv.parsed("train.refresh_every", 2usize)?,
        dropout: kv.parsed("train.dropout", 0.2)?,
        seed: kv.parsed("train.seed", 42u64)?,
    };

    let cluster = ClusterParams {
        k: kv.parsed("cluster.k", 10usize)?,
        nu: kv.parsed("cluster.nu", 1.0)?,
        tau: kv.parsed("cluster.tau", 1.0)?,
        kmeans_iters: kv.parsed("cluster.kmeans_iters", 50usize)?,
    };

    let reservoir = ReservoirConfig {
        q: kv.parsed("reservoir.size", 100usize)?,
        prior_strength: kv.parsed("reservoir.prior_strength", 1.0)?,
        k: cluster.k,
        refresh_every: trainer.refresh_every,
        flip_prior_sign: kv.parsed("reservoir.flip_prior_sign", false)?,
    };

    let distill_mode = match kv.take("distill.mode").as_deref().unwrap_or("none") {
        "none" => DistillMode::None,
        "local" => DistillMode::Local,
        "contrastive" => DistillMode::Contrastive,
        other => {
            return Err(Error::Config(format!(
                "key 'distill.mode': expected none|local|contrastive, got {other:?}"
            )))
        }
    };
    let distill = DistillConfig {
        mode: distill_mode,
        temperature: kv.parsed("distill.temperature", 1.0)?,
        n_negatives: kv.parsed("distill.negatives", 5usize)?,
        seed: trainer.seed,
    };

    let weights = LossWeights {
        lambda_kd: kv.parsed("loss.lambda_kd", 0.0)?,
        beta: kv.parsed("loss.beta", 0.0)?,
        lambda_theta: model.l2_reg,
    };

    let cutoffs_raw = kv.take("eval.cutoffs").unwrap_or_else(|| "5,10,15,20".into());
    let cutoffs: Vec<usize> = cutoffs_raw
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("key 'eval.cutoffs': bad cutoff {s:?}")))
        })
        .collect::<Result<_>>()?;
    if cutoffs.is_empty() || cutoffs.iter().any(|&k| k == 0) {
        return Err(Error::Config(
            "key 'eval.cutoffs': cutoffs must be positive".into(),
        ));
    }

    let output_dir = PathBuf::from(kv.required("output.dir")?);
    let write_checkpoints = kv.parsed("output.checkpoints", true)?;
    let dump_reservoir = kv.parsed("output.reservoir_dump", false)?;

    kv.reject_unknown()?;

    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let digest = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect::<String>();

    Ok(RunConfig {
        events_path,
        delimiter,
        categories_path,
        split_mode,
        base_fraction,
        n_incremental,
        val_fraction,
        model,
        trainer,
        reservoir,
        cluster,
        distill,
        weights,
        cutoffs,
        output_dir,
        write_checkpoints,
        dump_reservoir,
        digest,
    })
}

/// Parse a configuration file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "data.events = events.csv\noutput.dir = out\n";

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = parse_config_str(MINIMAL).unwrap();
        assert_eq!(cfg.delimiter, ',');
        assert_eq!(cfg.trainer.batch_size, 64);
        assert_eq!(cfg.trainer.learning_rate, 5e-4);
        assert_eq!(cfg.reservoir.q, 100);
        assert_eq!(cfg.cluster.k, 10);
        assert_eq!(cfg.cutoffs, vec![5, 10, 15, 20]);
        assert!(cfg.categories_path.is_none());
        assert_eq!(cfg.trainer.patience, 2);
        assert_eq!(cfg.trainer.min_epochs_inc, 3);
        assert_eq!(cfg.trainer.max_epochs_inc, 15);
        assert_eq!(cfg.trainer.dropout, 0.2);
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let text = format!("{MINIMAL}bogus.key = 3\n");
        let err = parse_config_str(&text).unwrap_err();
        assert!(err.to_string().contains("bogus.key"), "{err}");
    }

    #[test]
    fn bad_values_name_the_key() {
        let text = format!("{MINIMAL}train.batch_size = lots\n");
        let err = parse_config_str(&text).unwrap_err();
        assert!(err.to_string().contains("train.batch_size"), "{err}");

        let text = format!("{MINIMAL}split.mode = sideways\n");
        let err = parse_config_str(&text).unwrap_err();
        assert!(err.to_string().contains("split.mode"), "{err}");
    }

    #[test]
    fn missing_required_keys_error() {
        assert!(parse_config_str("output.dir = out\n").is_err());
        assert!(parse_config_str("data.events = e.csv\n").is_err());
    }

    #[test]
    fn duplicate_keys_error() {
        let text = format!("{MINIMAL}train.seed = 1\ntrain.seed = 2\n");
        assert!(parse_config_str(&text).is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = parse_config_str(MINIMAL).unwrap();
        let b = parse_config_str(MINIMAL).unwrap();
        assert_eq!(a.digest, b.digest);
        let c = parse_config_str(&format!("{MINIMAL}train.seed = 7\n")).unwrap();
        assert_ne!(a.digest, c.digest);
        assert_eq!(a.digest.len(), 64);
    }

    #[test]
    fn comments_and_options_parse() {
        let text = "\
# run configuration
data.events = ev.csv
data.delimiter = \\t
data.categories = cats.tsv
split.mode = tuning
model.activation = linear
distill.mode = contrastive
reservoir.flip_prior_sign = true
eval.cutoffs = 10, 20
output.dir = out
";
        let cfg = parse_config_str(text).unwrap();
        assert_eq!(cfg.delimiter, '\t');
        assert_eq!(cfg.split_mode, SplitMode::Tuning);
        assert_eq!(cfg.model.activation, Activation::Linear);
        assert_eq!(cfg.distill.mode, DistillMode::Contrastive);
        assert!(cfg.reservoir.flip_prior_sign);
        assert_eq!(cfg.cutoffs, vec![10, 20]);
        assert!(cfg.categories_path.is_some());
    }
}
