//! Flat key-value run configuration with dotted keys, e.g. `model.depth = 4`.
//! CLI flags override file values; serialization emits a canonical ordering.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ugnn_core::model::{Aggregation, ModelConfig, Variant};
use ugnn_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Gwd,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "ce",
            LossKind::Gwd => "gwd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ce" | "cross_entropy" => Ok(LossKind::CrossEntropy),
            "gwd" => Ok(LossKind::Gwd),
            other => Err(Error::Config(format!(
                "unknown loss {other:?}; expected ce or gwd"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub image_size: usize,
    pub train_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub cost_matrix: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            image_size: 256,
            train_manifest: None,
            eval_manifest: None,
            optim: OptimConfig::default(),
            epochs: 10,
            batch_size: 4,
            seed: 0,
            loss: LossKind::CrossEntropy,
            cost_matrix: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, Some(path))
    }

    pub fn parse(text: &str, path: Option<&Path>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.unwrap_or(Path::new("<config>")).to_path_buf(),
                line: idx + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            cfg.set(key, value).map_err(|e| err(e.to_string()))?;
        }
        Ok(cfg)
    }

    /// Applies one dotted key. Unknown keys are configuration errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value {value:?} for {what}"));
        match key {
            "model.variant" => self.model.variant = Variant::parse(value)?,
            "model.in_channels" => {
                self.model.in_channels = value.parse().map_err(|_| bad(key))?
            }
            "model.num_classes" => {
                self.model.num_classes = value.parse().map_err(|_| bad(key))?
            }
            "model.depth" => self.model.depth = value.parse().map_err(|_| bad(key))?,
            "model.base_channels" => {
                self.model.base_channels = value.parse().map_err(|_| bad(key))?
            }
            "model.k" => self.model.bottleneck.k = value.parse().map_err(|_| bad(key))?,
            "model.gnn_layers" => {
                self.model.bottleneck.num_gnn_layers = value.parse().map_err(|_| bad(key))?
            }
            "model.d_pe" => self.model.bottleneck.d_pe = value.parse().map_err(|_| bad(key))?,
            "model.learnable_warp" => {
                self.model.bottleneck.learnable_warp = value.parse().map_err(|_| bad(key))?
            }
            "model.aggregation" => {
                self.model.bottleneck.aggregation = Aggregation::parse(value)?
            }
            "data.image_size" => self.image_size = value.parse().map_err(|_| bad(key))?,
            "data.train_manifest" => self.train_manifest = Some(PathBuf::from(value)),
            "data.eval_manifest" => self.eval_manifest = Some(PathBuf::from(value)),
            "optim.lr" => self.optim.lr = value.parse().map_err(|_| bad(key))?,
            "optim.beta1" => self.optim.beta1 = value.parse().map_err(|_| bad(key))?,
            "optim.beta2" => self.optim.beta2 = value.parse().map_err(|_| bad(key))?,
            "optim.eps" => self.optim.eps = value.parse().map_err(|_| bad(key))?,
            "train.epochs" => self.epochs = value.parse().map_err(|_| bad(key))?,
            "train.batch_size" => self.batch_size = value.parse().map_err(|_| bad(key))?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "loss.kind" => self.loss = LossKind::parse(value)?,
            "loss.cost_matrix" => self.cost_matrix = Some(PathBuf::from(value)),
            "out.dir" => self.out_dir = PathBuf::from(value),
            other => {
                return Err(Error::Config(format!("unknown configuration key {other:?}")))
            }
        }
        Ok(())
    }

    /// Canonical text form; `parse(serialize(c))` equals `c`.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model.variant = {}", self.model.variant.as_str());
        let _ = writeln!(s, "model.in_channels = {}", self.model.in_channels);
        let _ = writeln!(s, "model.num_classes = {}", self.model.num_classes);
        let _ = writeln!(s, "model.depth = {}", self.model.depth);
        let _ = writeln!(s, "model.base_channels = {}", self.model.base_channels);
        let _ = writeln!(s, "model.k = {}", self.model.bottleneck.k);
        let _ = writeln!(s, "model.gnn_layers = {}", self.model.bottleneck.num_gnn_layers);
        let _ = writeln!(s, "model.d_pe = {}", self.model.bottleneck.d_pe);
        let _ = writeln!(s, "model.learnable_warp = {}", self.model.bottleneck.learnable_warp);
        let _ = writeln!(s, "model.aggregation = {}", self.model.bottleneck.aggregation.as_str());
        let _ = writeln!(s, "data.image_size = {}", self.image_size);
        if let Some(p) = &self.train_manifest {
            let _ = writeln!(s, "data.train_manifest = {}", p.display());
        }
        if let Some(p) = &self.eval_manifest {
            let _ = writeln!(s, "data.eval_manifest = {}", p.display());
        }
        let _ = writeln!(s, "optim.lr = {}", self.optim.lr);
        let _ = writeln!(s, "optim.beta1 = {}", self.optim.beta1);
        let _ = writeln!(s, "optim.beta2 = {}", self.optim.beta2);
        let _ = writeln!(s, "optim.eps = {}", self.optim.eps);
        let _ = writeln!(s, "train.epochs = {}", self.epochs);
        let _ = writeln!(s, "train.batch_size = {}", self.batch_size);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "loss.kind = {}", self.loss.as_str());
        if let Some(p) = &self.cost_matrix {
            let _ = writeln!(s, "loss.cost_matrix = {}", p.display());
        }
        let _ = writeln!(s, "out.dir = {}", self.out_dir.display());
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.image_size == 0 {
            return Err(Error::Config("data.image_size must be positive".into()));
        }
        self.model.check_spatial(self.image_size, self.image_size)?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be positive".into()));
        }
        if self.optim.lr < 0.0 || self.optim.beta1 <= 0.0 || self.optim.beta2 <= 0.0 || self.optim.eps <= 0.0 {
            return Err(Error::Config("optimizer constants must be positive (lr may be zero)".into()));
        }
        if self.loss == LossKind::Gwd && self.cost_matrix.is_none() {
            return Err(Error::Config(
                "loss.kind = gwd requires loss.cost_matrix pointing at a cost-matrix file".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_stable() {
        let mut cfg = RunConfig::default();
        cfg.model.depth = 3;
        cfg.model.variant = Variant::UnetBaseline;
        cfg.train_manifest = Some(PathBuf::from("data/train.tsv"));
        cfg.loss = LossKind::Gwd;
        cfg.cost_matrix = Some(PathBuf::from("costs.txt"));
        let text = cfg.serialize();
        let parsed = RunConfig::parse(&text, None).unwrap();
        assert_eq!(cfg, parsed);
        assert_eq!(text, parsed.serialize());
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let err = RunConfig::parse("model.depth = 4\nmodel.depht = 3\n", None).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = RunConfig::parse("# comment\n\nmodel.depth = 2\n", None).unwrap();
        assert_eq!(cfg.model.depth, 2);
    }

    #[test]
    fn gwd_requires_cost_matrix() {
        let mut cfg = RunConfig::default();
        cfg.loss = LossKind::Gwd;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn image_size_must_divide() {
        let mut cfg = RunConfig::default();
        cfg.image_size = 100; // not divisible by 2^4
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
