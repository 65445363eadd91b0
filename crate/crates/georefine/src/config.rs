//! Training configuration: a flat `key = value` text format with `#`
//! comments, strict about unknown or repeated keys so typos fail loudly.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::GridProbs;
use crate::loss::LossWeights;
use crate::model::ModelDims;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub probs: GridProbs,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub iterations: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub dims: ModelDims,
    pub dataset: PathBuf,
    /// Checkpoint cadence in iterations; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            probs: GridProbs::default_mix(),
            learning_rate: 1e-3,
            weight_decay: 1e-6,
            clip_norm: 35.0,
            iterations: 2000,
            seed: 0,
            weights: LossWeights::default(),
            dims: ModelDims::desk(),
            dataset: PathBuf::new(),
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        let mut seen: HashSet<String> = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Config(format!("config line {}: {msg}", i + 1));
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| bad("expected `key = value`"))?;
            if !seen.insert(key.to_string()) {
                return Err(bad(&format!("key {key} given twice")));
            }
            let float = || -> Result<f64> {
                value.parse::<f64>().map_err(|_| bad(&format!("{key}: bad number {value:?}")))
            };
            let count = || -> Result<usize> {
                value.parse::<usize>().map_err(|_| bad(&format!("{key}: bad count {value:?}")))
            };
            match key {
                "rho1" => cfg.probs.rho[0] = float()?,
                "rho2" => cfg.probs.rho[1] = float()?,
                "rho3" => cfg.probs.rho[2] = float()?,
                "rho4" => cfg.probs.rho[3] = float()?,
                "learning_rate" => cfg.learning_rate = float()?,
                "weight_decay" => cfg.weight_decay = float()?,
                "clip_norm" => cfg.clip_norm = float()?,
                "iterations" => cfg.iterations = count()?,
                "seed" => {
                    cfg.seed = value
                        .parse::<u64>()
                        .map_err(|_| bad(&format!("seed: bad value {value:?}")))?;
                }
                "lambda_grad" => cfg.weights.grad = float()?,
                "lambda_mse" => cfg.weights.mse = float()?,
                "lambda_depth" => cfg.weights.depth = float()?,
                "lambda_normal" => cfg.weights.normal = float()?,
                "blocks" => cfg.dims.blocks = count()?,
                "width" => cfg.dims.width = count()?,
                "heads" => cfg.dims.heads = count()?,
                "cell" => cfg.dims.cell = count()?,
                "dataset" => cfg.dataset = PathBuf::from(value),
                "checkpoint_every" => cfg.checkpoint_every = count()?,
                _ => return Err(bad(&format!("unknown key {key:?}"))),
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.probs.rho.iter().sum();
        for &p in &self.probs.rho {
            if !(p.is_finite() && p >= 0.0) {
                return Err(Error::Config(format!("grid probability {p} must be >= 0")));
            }
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("grid probabilities sum to {sum}, not 1")));
        }
        for (name, v, min_ok) in [
            ("learning_rate", self.learning_rate, false),
            ("weight_decay", self.weight_decay, true),
            ("clip_norm", self.clip_norm, false),
        ] {
            if !v.is_finite() || v < 0.0 || (!min_ok && v == 0.0) {
                return Err(Error::Config(format!("{name} = {v} out of range")));
            }
        }
        self.weights.validate()?;
        let d = &self.dims;
        if d.blocks == 0 || d.cell == 0 || d.width == 0 || d.heads == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if d.width % d.heads != 0 || (d.width / d.heads) % 4 != 0 {
            return Err(Error::Config(format!(
                "width {} must split into heads {} with a head dimension divisible by 4",
                d.width, d.heads
            )));
        }
        if self.dataset.as_os_str().is_empty() {
            return Err(Error::Config("dataset path is required".into()));
        }
        Ok(())
    }

    /// Echo of the effective configuration; parses back to an equal value.
    pub fn to_text(&self) -> String {
        let r = &self.probs.rho;
        let w = &self.weights;
        let d = &self.dims;
        format!(
            "rho1 = {}\nrho2 = {}\nrho3 = {}\nrho4 = {}\n\
             learning_rate = {}\nweight_decay = {}\nclip_norm = {}\n\
             iterations = {}\nseed = {}\n\
             lambda_grad = {}\nlambda_mse = {}\nlambda_depth = {}\nlambda_normal = {}\n\
             blocks = {}\nwidth = {}\nheads = {}\ncell = {}\n\
             dataset = {}\ncheckpoint_every = {}\n",
            r[0], r[1], r[2], r[3],
            self.learning_rate, self.weight_decay, self.clip_norm,
            self.iterations, self.seed,
            w.grad, w.mse, w.depth, w.normal,
            d.blocks, d.width, d.heads, d.cell,
            self.dataset.display(), self.checkpoint_every,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_the_text_form() {
        let mut cfg = TrainConfig::default();
        cfg.dataset = PathBuf::from("data/manifest.tsv");
        let reparsed = TrainConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, reparsed);
        cfg.validate().unwrap();
    }

    #[test]
    fn overrides_comments_and_blank_lines_parse() {
        let cfg = TrainConfig::parse(
            "# training run\nlearning_rate = 0.01   # bumped\n\niterations = 10\nrho1 = 0.4\nrho4 = 0.1\ndataset = d.tsv\n",
        )
        .unwrap();
        assert_eq!(cfg.learning_rate, 0.01);
        assert_eq!(cfg.iterations, 10);
        assert_eq!(cfg.probs.rho, [0.4, 0.2, 0.3, 0.1]);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_repeated_and_malformed_keys_are_rejected() {
        for text in [
            "learning_rte = 0.1\n",
            "seed = 1\nseed = 2\n",
            "just words\n",
            "iterations = soon\n",
        ] {
            let err = TrainConfig::parse(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text:?} -> {err}");
            assert!(err.to_string().contains("line 1") || err.to_string().contains("line 2"));
        }
    }

    #[test]
    fn validation_catches_bad_values() {
        let base = "dataset = d.tsv\n";
        for extra in [
            "learning_rate = 0\n",
            "clip_norm = -1\n",
            "rho1 = 0.5\n",          // probabilities no longer sum to 1
            "width = 60\n",          // head dim 15 not divisible by 4
            "lambda_depth = -0.5\n",
        ] {
            let cfg = TrainConfig::parse(&format!("{base}{extra}")).unwrap();
            assert!(cfg.validate().is_err(), "{extra:?} should fail validation");
        }
        assert!(TrainConfig::parse(base).unwrap().validate().is_ok());
    }
}
