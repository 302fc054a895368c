//! Run configuration: plain-text `key = value` files with `#` comments.
//! Unknown keys are errors so sweep typos surface immediately.

use std::path::Path;

use thiserror::Error;

use crate::adam::AdamConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("i/o error reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the scale-selector regularizer.
    pub alpha: f64,
    /// Weight of the scale-classification loss.
    pub beta: f64,
    /// Weight of the scale-discrepancy loss.
    pub gamma: f64,
    /// Power-normalization slope.
    pub sigma: f64,
    /// Fraction of the feature mean subtracted before pooling.
    pub beta_shift: f64,
    /// Square resolutions, finest first; consecutive entries halve.
    pub scales: Vec<usize>,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub episodes: usize,
    pub eval_episodes: usize,
    pub seed: u64,
    /// Score all scale pairs instead of only matching scales.
    pub crossref: bool,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub ss_enabled: bool,
    pub sd_enabled: bool,
    pub dd_enabled: bool,
    pub checkpoint_interval: usize,
    /// Stop gradients from the self-supervised heads into the encoder.
    pub detach_heads: bool,
    /// Weight diagonal losses 1/s per term instead of averaging.
    pub same_scale_per_term: bool,
    /// Aggregate prediction scores over the full scale grid (needs crossref).
    pub eval_full_grid: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1e-3,
            beta: 0.1,
            gamma: 0.1,
            sigma: -5.0,
            beta_shift: 0.5,
            scales: vec![64, 32, 16],
            ways: 5,
            shots: 1,
            queries: 15,
            episodes: 1000,
            eval_episodes: 300,
            seed: 0,
            crossref: false,
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            ss_enabled: true,
            sd_enabled: true,
            dd_enabled: true,
            checkpoint_interval: 500,
            detach_heads: false,
            same_scale_per_term: false,
            eval_full_grid: false,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, b1: self.adam_beta1, b2: self.adam_beta2, eps: self.adam_eps }
    }

    pub fn scale_count(&self) -> usize {
        self.scales.len()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |d: String| Err(ConfigError::Invalid(d));
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return bad("loss weights must be nonnegative".into());
        }
        if self.scales.is_empty() {
            return bad("scales must be nonempty".into());
        }
        for pair in self.scales.windows(2) {
            if pair[0] != 2 * pair[1] {
                return bad(format!("scale chain must halve: {} then {}", pair[0], pair[1]));
            }
        }
        if self.scales.iter().any(|&s| s < 16 || s % 4 != 0) {
            return bad("every scale must be >= 16 and divisible by 4".into());
        }
        if self.ways < 2 {
            return bad(format!("ways must be at least 2, got {}", self.ways));
        }
        if self.shots == 0 || self.queries == 0 {
            return bad("shots and queries must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.beta_shift) {
            return bad(format!("beta_shift must lie in [0, 1], got {}", self.beta_shift));
        }
        if self.episodes == 0 {
            return bad("episodes must be positive".into());
        }
        if self.eval_full_grid && !self.crossref {
            return bad("eval_full_grid requires crossref".into());
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = TrainConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| ConfigError::Parse {
                line,
                detail: format!("expected `key = value`, got `{body}`"),
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |detail: String| ConfigError::Parse { line, detail };
            let f = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("bad number `{v}`")));
            let u = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("bad integer `{v}`")));
            let b = |v: &str| match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(bad(format!("bad flag `{v}`"))),
            };
            match key {
                "alpha" => cfg.alpha = f(value)?,
                "beta" => cfg.beta = f(value)?,
                "gamma" => cfg.gamma = f(value)?,
                "sigma" => cfg.sigma = f(value)?,
                "beta_shift" => cfg.beta_shift = f(value)?,
                "scales" => {
                    cfg.scales = value
                        .split(',')
                        .map(|v| u(v.trim()))
                        .collect::<Result<Vec<_>, _>>()?;
                }
                "ways" => cfg.ways = u(value)?,
                "shots" => cfg.shots = u(value)?,
                "queries" => cfg.queries = u(value)?,
                "episodes" => cfg.episodes = u(value)?,
                "eval_episodes" => cfg.eval_episodes = u(value)?,
                "seed" => {
                    cfg.seed =
                        value.parse::<u64>().map_err(|_| bad(format!("bad seed `{value}`")))?
                }
                "crossref" => cfg.crossref = b(value)?,
                "lr" => cfg.lr = f(value)?,
                "adam_beta1" => cfg.adam_beta1 = f(value)?,
                "adam_beta2" => cfg.adam_beta2 = f(value)?,
                "adam_eps" => cfg.adam_eps = f(value)?,
                "ss_enabled" => cfg.ss_enabled = b(value)?,
                "sd_enabled" => cfg.sd_enabled = b(value)?,
                "dd_enabled" => cfg.dd_enabled = b(value)?,
                "checkpoint_interval" => cfg.checkpoint_interval = u(value)?,
                "detach_heads" => cfg.detach_heads = b(value)?,
                "same_scale_per_term" => cfg.same_scale_per_term = b(value)?,
                "eval_full_grid" => cfg.eval_full_grid = b(value)?,
                other => return Err(ConfigError::UnknownKey(other.to_string())),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_comments_and_scale_lists() {
        let cfg = TrainConfig::parse(
            "# sweep point\nalpha = 0.01\nscales = 32,16\nways = 3\ncrossref = true\nseed = 9\n",
        )
        .unwrap();
        assert_eq!(cfg.alpha, 0.01);
        assert_eq!(cfg.scales, vec![32, 16]);
        assert_eq!(cfg.ways, 3);
        assert!(cfg.crossref);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.beta, 0.1, "untouched keys keep defaults");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = TrainConfig::parse("alhpa = 0.01\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(k) if k == "alhpa"));
    }

    #[test]
    fn broken_scale_chains_are_rejected() {
        assert!(TrainConfig::parse("scales = 64,24\n").is_err());
        assert!(TrainConfig::parse("scales = 64,32,16\n").is_ok());
        assert!(TrainConfig::parse("scales = 8,4\n").is_err());
    }

    #[test]
    fn negative_weights_and_tiny_ways_are_rejected() {
        assert!(TrainConfig::parse("alpha = -1\n").is_err());
        assert!(TrainConfig::parse("ways = 1\n").is_err());
        assert!(TrainConfig::parse("beta_shift = 1.2\n").is_err());
    }

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
    }
}
