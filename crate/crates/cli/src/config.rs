//! Flat `section.key = value` experiment configuration.
//!
//! Lines are `key = value` with `#` comments; unknown keys are rejected so
//! typos fail loudly. Every validation error names the offending key.

use std::collections::BTreeMap;
use std::path::PathBuf;

use miai_core::model::Arch;
use miai_core::rng::fnv1a;
use miai_core::trainer::Family;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetKind {
    LinearGaussian,
    BitSplit,
    Idx,
}

impl DatasetKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetKind::LinearGaussian => "linear_gaussian",
            DatasetKind::BitSplit => "bitsplit",
            DatasetKind::Idx => "idx",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetBlock {
    pub kind: DatasetKind,
    pub seed: u64,
    pub samples: usize,
    // linear_gaussian
    pub latent_dim: usize,
    pub modality_dims: Vec<usize>,
    pub noise_std: Vec<f64>,
    pub loading_scale: f64,
    // bitsplit
    pub shared_bits: usize,
    pub private_bits: Vec<usize>,
    // idx
    pub image_path: Option<PathBuf>,
    pub label_path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct ModelBlock {
    pub family: Family,
    pub arch: Arch,
    pub t_steps: usize,
    pub betas: Option<Vec<f64>>,
    pub omega: Option<Vec<f64>>,
    pub pi: Option<Vec<f64>>,
    pub oracle_decoder: bool,
}

#[derive(Debug, Clone)]
pub struct TrainBlock {
    pub lr: f64,
    pub gamma: f64,
    pub batch: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalBlock {
    pub samples: usize,
    pub curve_t_max: usize,
    pub probe_ridge: f64,
    /// Cap on held-out items per metric; 0 means all.
    pub items: usize,
    pub gap_depths: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct OutputBlock {
    pub dir: PathBuf,
    pub experiment: String,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dataset: DatasetBlock,
    pub model: ModelBlock,
    pub train: TrainBlock,
    pub eval: EvalBlock,
    pub output: OutputBlock,
    /// Canonical text the digest is computed over.
    canonical: String,
}

fn parse_lines(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!("line {}: expected `key = value`, got `{}`", ln + 1, raw))
        })?;
        let key = k.trim().to_string();
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(CliError::Config(format!("duplicate key {}", key)));
        }
    }
    Ok(out)
}

struct Fields {
    kv: BTreeMap<String, String>,
    used: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl Fields {
    fn get(&self, key: &str) -> Option<&String> {
        let v = self.kv.get(key);
        if v.is_some() {
            self.used.borrow_mut().insert(key.to_string());
        }
        v
    }

    fn require(&self, key: &str) -> Result<&String> {
        self.get(key)
            .ok_or_else(|| CliError::Config(format!("missing required key {}", key)))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                CliError::Config(format!("key {}: cannot parse value `{}`", key, v))
            }),
        }
    }

    fn parse_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    fn parse_list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim().parse::<T>().map_err(|_| {
                        CliError::Config(format!("key {}: cannot parse element `{}`", key, p))
                    })
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    fn reject_unknown(&self) -> Result<()> {
        let used = self.used.borrow();
        for key in self.kv.keys() {
            if !used.contains(key) {
                return Err(CliError::Config(format!("unknown key {}", key)));
            }
        }
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let fields = Fields {
            kv: parse_lines(text)?,
            used: Default::default(),
        };
        let cfg = Self::from_fields(&fields)?;
        fields.reject_unknown()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {}", path.display(), e)))?;
        Self::parse(&text)
    }

    fn from_fields(f: &Fields) -> Result<Self> {
        let kind = match f.require("dataset.kind")?.as_str() {
            "linear_gaussian" => DatasetKind::LinearGaussian,
            "bitsplit" => DatasetKind::BitSplit,
            "idx" => DatasetKind::Idx,
            other => {
                return Err(CliError::Config(format!(
                    "key dataset.kind: unknown kind `{}` (linear_gaussian | bitsplit | idx)",
                    other
                )))
            }
        };
        let seed: u64 = f.parse_or("dataset.seed", 0)?;

        let samples_raw: i64 = f.parse_or("dataset.samples", 1000)?;
        if samples_raw <= 0 {
            return Err(CliError::Config(format!(
                "key dataset.samples: must be positive, got {}",
                samples_raw
            )));
        }
        let dataset = DatasetBlock {
            kind: kind.clone(),
            seed,
            samples: samples_raw as usize,
            latent_dim: f.parse_or("dataset.latent_dim", 8)?,
            modality_dims: f.parse_list("dataset.modality_dims")?.unwrap_or_default(),
            noise_std: f.parse_list("dataset.noise_std")?.unwrap_or_default(),
            loading_scale: f.parse_or("dataset.loading_scale", 1.0)?,
            shared_bits: f.parse_or("dataset.shared_bits", 0)?,
            private_bits: f.parse_list("dataset.private_bits")?.unwrap_or_default(),
            image_path: f.get("dataset.image_path").map(PathBuf::from),
            label_path: f.get("dataset.label_path").map(PathBuf::from),
        };
        match dataset.kind {
            DatasetKind::LinearGaussian => {
                if dataset.modality_dims.is_empty() {
                    return Err(CliError::Config(
                        "key dataset.modality_dims: required for linear_gaussian".into(),
                    ));
                }
                if dataset.noise_std.len() != dataset.modality_dims.len() {
                    return Err(CliError::Config(
                        "key dataset.noise_std: one entry per modality required".into(),
                    ));
                }
            }
            DatasetKind::BitSplit => {
                if dataset.private_bits.is_empty() {
                    return Err(CliError::Config(
                        "key dataset.private_bits: required for bitsplit".into(),
                    ));
                }
                let total: usize = dataset.shared_bits + dataset.private_bits.iter().sum::<usize>();
                if total > 20 {
                    return Err(CliError::Config(format!(
                        "key dataset.private_bits: bit budget exceeded ({} > 20)",
                        total
                    )));
                }
            }
            DatasetKind::Idx => {
                if dataset.image_path.is_none() || dataset.label_path.is_none() {
                    return Err(CliError::Config(
                        "key dataset.image_path / dataset.label_path: required for idx".into(),
                    ));
                }
            }
        }

        let family = Family::parse(f.require("model.family")?)
            .map_err(|e| CliError::Config(format!("key model.family: {}", e)))?;
        let arch = Arch {
            latent_dim: f.parse_or("model.latent_dim", 16)?,
            hidden: f.parse_or("model.hidden", 256)?,
            refiner_hidden: f.parse_or("model.refiner_hidden", 128)?,
            linear_decoder: false,
        };
        if family != Family::Proposed {
            if f.kv.contains_key("model.steps") {
                return Err(CliError::Config(
                    "key model.steps: only valid for the proposed family".into(),
                ));
            }
            if f.kv.contains_key("model.refiner_hidden") {
                return Err(CliError::Config(
                    "key model.refiner_hidden: only valid for the proposed family".into(),
                ));
            }
        }
        if family != Family::Mixture && f.kv.contains_key("model.omega") {
            return Err(CliError::Config(
                "key model.omega: only valid for the mixture family".into(),
            ));
        }
        if family != Family::Alignment && f.kv.contains_key("model.pi") {
            return Err(CliError::Config(
                "key model.pi: only valid for the alignment family".into(),
            ));
        }
        let t_steps: usize = f.parse_or("model.steps", 8)?;
        if family == Family::Proposed && t_steps == 0 {
            return Err(CliError::Config("key model.steps: must be >= 1".into()));
        }
        let betas = match f.get("model.beta").map(|s| s.as_str()) {
            None | Some("auto") => None,
            Some(_) => f.parse_list::<f64>("model.beta")?,
        };
        let omega = match f.get("model.omega").map(|s| s.as_str()) {
            None | Some("uniform") => None,
            Some(_) => f.parse_list::<f64>("model.omega")?,
        };
        let pi = match f.get("model.pi").map(|s| s.as_str()) {
            None | Some("uniform") => None,
            Some(_) => f.parse_list::<f64>("model.pi")?,
        };
        let oracle_decoder = f.parse_or("model.oracle_decoder", false)?;
        if oracle_decoder && dataset.kind != DatasetKind::LinearGaussian {
            return Err(CliError::Config(
                "key model.oracle_decoder: only valid for linear_gaussian datasets".into(),
            ));
        }
        let model = ModelBlock {
            family,
            arch,
            t_steps,
            betas,
            omega,
            pi,
            oracle_decoder,
        };

        let clip_norm = match f.get("train.clip_norm").map(|s| s.as_str()) {
            None => Some(10.0),
            Some("none") => None,
            Some(v) => Some(v.parse::<f64>().map_err(|_| {
                CliError::Config(format!("key train.clip_norm: cannot parse `{}`", v))
            })?),
        };
        let train = TrainBlock {
            lr: f.parse_or("train.lr", 0.0002)?,
            gamma: f.parse_or("train.gamma", 0.98)?,
            batch: f.parse_or("train.batch", 64)?,
            epochs_stage1: f.parse_or("train.epochs_stage1", 20)?,
            epochs_stage2: f.parse_or("train.epochs_stage2", 20)?,
            clip_norm,
        };
        if train.lr <= 0.0 {
            return Err(CliError::Config("key train.lr: must be positive".into()));
        }
        if train.batch == 0 {
            return Err(CliError::Config("key train.batch: must be positive".into()));
        }
        if train.epochs_stage1 == 0 {
            return Err(CliError::Config("key train.epochs_stage1: must be >= 1".into()));
        }

        let eval = EvalBlock {
            samples: f.parse_or("eval.samples", 16)?,
            curve_t_max: f.parse_or("eval.curve_t_max", 8)?,
            probe_ridge: f.parse_or("eval.probe_ridge", 1e-3)?,
            items: f.parse_or("eval.items", 0)?,
            gap_depths: f
                .parse_list("eval.gap_depths")?
                .unwrap_or_else(|| vec![1, 2, 4, 8]),
        };
        if eval.samples == 0 {
            return Err(CliError::Config("key eval.samples: must be >= 1".into()));
        }

        let dir = PathBuf::from(
            f.get("output.dir")
                .cloned()
                .unwrap_or_else(|| "out".to_string()),
        );
        let experiment = f
            .get("output.experiment")
            .cloned()
            .unwrap_or_else(|| format!("{}-{}", kind.as_str(), seed));
        let output = OutputBlock { dir, experiment };

        // Canonical text: sorted key = value lines of everything present.
        // Output-location keys are excluded so the digest identifies the
        // experiment itself, not where its files land.
        let canonical = f
            .kv
            .iter()
            .filter(|(k, _)| !k.starts_with("output."))
            .map(|(k, v)| format!("{} = {}", k, v))
            .collect::<Vec<_>>()
            .join("\n");

        Ok(ExperimentConfig {
            dataset,
            model,
            train,
            eval,
            output,
            canonical,
        })
    }

    /// Override the root seed (CLI `--seed`).
    pub fn override_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.canonical = format!("{}\n!seed-override = {}", self.canonical, seed);
    }

    /// Override the output directory (CLI `--out`).
    pub fn override_out(&mut self, dir: PathBuf) {
        self.output.dir = dir;
    }

    pub fn seed(&self) -> u64 {
        self.dataset.seed
    }

    pub fn digest(&self) -> u64 {
        fnv1a(self.canonical.as_bytes())
    }

    pub fn to_train_config(&self) -> miai_core::trainer::TrainConfig {
        miai_core::trainer::TrainConfig {
            family: self.model.family,
            arch: self.model.arch.clone(),
            lr: self.train.lr,
            gamma: self.train.gamma,
            batch: self.train.batch,
            epochs_stage1: self.train.epochs_stage1,
            epochs_stage2: self.train.epochs_stage2,
            clip_norm: self.train.clip_norm,
            t_steps: self.model.t_steps,
            subset_weights: self.model.omega.clone(),
            pi: self.model.pi.clone(),
            betas: self.model.betas.clone(),
            oracle_decoder: self.model.oracle_decoder,
            seed: self.seed(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "
dataset.kind = bitsplit
dataset.seed = 7
dataset.samples = 500
dataset.shared_bits = 2
dataset.private_bits = 1,3
model.family = proposed
model.latent_dim = 4
model.hidden = 16
model.steps = 4
train.epochs_stage1 = 2
output.dir = out/test
";

    #[test]
    fn parses_and_digests_deterministically() {
        let a = ExperimentConfig::parse(BASE).unwrap();
        let b = ExperimentConfig::parse(BASE).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.seed(), 7);
        assert_eq!(a.model.t_steps, 4);
        assert_eq!(a.output.experiment, "bitsplit-7");
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = format!("{}\nmodel.stepz = 3\n", BASE);
        match ExperimentConfig::parse(&text) {
            Err(CliError::Config(msg)) => assert!(msg.contains("model.stepz"), "{}", msg),
            other => panic!("expected config error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn rejects_negative_samples_naming_the_key() {
        let text = BASE.replace("dataset.samples = 500", "dataset.samples = -5");
        match ExperimentConfig::parse(&text) {
            Err(CliError::Config(msg)) => assert!(msg.contains("dataset.samples"), "{}", msg),
            other => panic!("expected config error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn rejects_bit_budget_overflow() {
        let text = BASE.replace("dataset.private_bits = 1,3", "dataset.private_bits = 10,9");
        match ExperimentConfig::parse(&text) {
            Err(CliError::Config(msg)) => assert!(msg.contains("bit budget"), "{}", msg),
            other => panic!("expected config error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn family_specific_keys_are_enforced() {
        let text = BASE.replace("model.family = proposed", "model.family = mixture");
        match ExperimentConfig::parse(&text) {
            Err(CliError::Config(msg)) => assert!(msg.contains("model.steps"), "{}", msg),
            other => panic!("expected config error, got {:?}", other.map(|_| ())),
        }
        let text2 = format!("{}\nmodel.pi = 0.5,0.5\n", BASE);
        assert!(matches!(
            ExperimentConfig::parse(&text2),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn seed_override_changes_digest() {
        let mut a = ExperimentConfig::parse(BASE).unwrap();
        let d0 = a.digest();
        a.override_seed(99);
        assert_eq!(a.seed(), 99);
        assert_ne!(a.digest(), d0);
    }
}
