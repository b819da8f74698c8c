//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::models::ModelConfig;
use crate::training::OptimizerConfig;

pub const SEED_ENV: &str = "PAINLARKS_SEED";

/// Everything a command needs: model, optimizer, data and output locations.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    /// Landmark CSV or feature-clip file.
    pub data: Option<PathBuf>,
    /// Held-out set for model selection; carved from `data` when absent.
    pub val_data: Option<PathBuf>,
    pub val_fraction: f64,
    /// Replaces the canonical facial graph.
    pub edges: Option<PathBuf>,
    /// Connector edges added to the graph.
    pub extra_edges: Option<PathBuf>,
    pub normalize: bool,
    pub smote: bool,
    pub smote_k: usize,
    /// Random crop and rotation of rendered frames (toy ConvNeXt backbone).
    pub augment: bool,
    pub target_val_accuracy: Option<f64>,
    pub k: usize,
    pub jobs: usize,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    /// Train in single precision.
    pub f32: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            optimizer: OptimizerConfig::for_kind(model.kind),
            model,
            data: None,
            val_data: None,
            val_fraction: 0.1,
            edges: None,
            extra_edges: None,
            normalize: true,
            smote: true,
            smote_k: 5,
            augment: true,
            target_val_accuracy: None,
            k: 5,
            jobs: 1,
            seed: None,
            out_dir: PathBuf::from("painlarks-out"),
            f32: false,
        }
    }
}

fn parse_num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("invalid {key} `{value}`: {e}")))
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Applies one setting; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "kind" {
            let kind = value.parse()?;
            if kind != self.model.kind {
                self.optimizer.batch_size = OptimizerConfig::for_kind(kind).batch_size;
            }
        }
        if self.model.apply(key, value)? {
            return Ok(());
        }
        let o = &mut self.optimizer;
        match key {
            "lr0" => o.lr0 = parse_num(key, value)?,
            "beta1" => o.beta1 = parse_num(key, value)?,
            "beta2" => o.beta2 = parse_num(key, value)?,
            "eps" => o.eps = parse_num(key, value)?,
            "decay_rate" => o.decay_rate = parse_num(key, value)?,
            "decay_steps" => o.decay_steps = parse_num(key, value)?,
            "epochs" => o.epochs = parse_num(key, value)?,
            "batch_size" => o.batch_size = parse_num(key, value)?,
            "data" => self.data = optional_path(value),
            "val_data" => self.val_data = optional_path(value),
            "val_fraction" => self.val_fraction = parse_num(key, value)?,
            "edges" => self.edges = optional_path(value),
            "extra_edges" => self.extra_edges = optional_path(value),
            "normalize" => self.normalize = parse_num(key, value)?,
            "smote" => self.smote = parse_num(key, value)?,
            "smote_k" => self.smote_k = parse_num(key, value)?,
            "augment" => self.augment = parse_num(key, value)?,
            "target_val_accuracy" => {
                self.target_val_accuracy = match value {
                    "" | "none" => None,
                    v => Some(parse_num(key, v)?),
                }
            }
            "k" => self.k = parse_num(key, value)?,
            "jobs" => self.jobs = parse_num(key, value)?,
            "seed" => self.seed = Some(parse_num(key, value)?),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "precision" => {
                self.f32 = match value {
                    "f32" => true,
                    "f64" => false,
                    _ => return Err(Error::Config(format!("invalid precision `{value}`: expected f32 or f64"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected `key = value`, got `{line}`",
                    origin.display(),
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}:{}: {m}", origin.display(), lineno + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        Ok(())
    }

    /// `--seed` flag, then the config file, then `PAINLARKS_SEED`, then 0.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = flag.or(self.seed) {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|e| Error::Config(format!("invalid {SEED_ENV} `{v}`: {e}"))),
            Err(_) => Ok(0),
        }
    }

    /// Serialized form; parsing it back yields an equal configuration.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let o = &self.optimizer;
        let mut out = String::from("# painlarks run configuration\n");
        for (k, v) in self.model.to_pairs() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        let rest = [
            ("lr0", o.lr0.to_string()),
            ("beta1", o.beta1.to_string()),
            ("beta2", o.beta2.to_string()),
            ("eps", o.eps.to_string()),
            ("decay_rate", o.decay_rate.to_string()),
            ("decay_steps", o.decay_steps.to_string()),
            ("epochs", o.epochs.to_string()),
            ("batch_size", o.batch_size.to_string()),
            ("data", path(&self.data)),
            ("val_data", path(&self.val_data)),
            ("val_fraction", self.val_fraction.to_string()),
            ("edges", path(&self.edges)),
            ("extra_edges", path(&self.extra_edges)),
            ("normalize", self.normalize.to_string()),
            ("smote", self.smote.to_string()),
            ("smote_k", self.smote_k.to_string()),
            ("augment", self.augment.to_string()),
            (
                "target_val_accuracy",
                self.target_val_accuracy.map_or("none".into(), |v| v.to_string()),
            ),
            ("k", self.k.to_string()),
            ("jobs", self.jobs.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("precision", if self.f32 { "f32" } else { "f64" }.to_string()),
        ];
        for (k, v) in rest {
            out.push_str(&format!("{k} = {v}\n"));
        }
        if let Some(s) = self.seed {
            out.push_str(&format!("seed = {s}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelKind;

    #[test]
    fn parses_comments_and_values() {
        let text = "# run\nkind = stgcn  # baseline\nwidths=2,4,4\nlr0 = 0.01\n\nepochs = 3\nseed = 9\n";
        let cfg = RunConfig::parse(text, Path::new("c.cfg")).unwrap();
        assert_eq!(cfg.model.kind, ModelKind::Stgcn);
        assert_eq!(cfg.model.blocks.len(), 2);
        assert_eq!(cfg.optimizer.lr0, 0.01);
        assert_eq!(cfg.optimizer.epochs, 3);
        assert_eq!(cfg.seed, Some(9));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("learnig_rate = 0.1\n", Path::new("c.cfg")).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        let msg = err.to_string();
        assert!(msg.contains("learnig_rate") && msg.contains("c.cfg:1"), "{msg}");
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("kind", "hybrid").unwrap();
        cfg.set("lstm_variant", "bi").unwrap();
        cfg.set("data", "clips.csv").unwrap();
        cfg.set("target_val_accuracy", "0.95").unwrap();
        cfg.set("precision", "f32").unwrap();
        cfg.seed = Some(4);
        let back = RunConfig::parse(&cfg.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.optimizer.batch_size, 8);
    }

    #[test]
    fn seed_precedence() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.resolve_seed(Some(3)).unwrap(), 3);
        cfg.seed = Some(5);
        assert_eq!(cfg.resolve_seed(Some(3)).unwrap(), 3);
        assert_eq!(cfg.resolve_seed(None).unwrap(), 5);
    }

    #[test]
    fn malformed_line_reports_position() {
        let err = RunConfig::parse("kind = stgcn\nepochs\n", Path::new("c.cfg")).unwrap_err();
        assert!(err.to_string().contains("c.cfg:2"));
        let err = RunConfig::parse("epochs = many\n", Path::new("c.cfg")).unwrap_err();
        assert!(err.to_string().contains("epochs"));
    }
}
