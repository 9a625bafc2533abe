//! Line-oriented "key = value" run configuration.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synth::DatasetSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    // data oracle
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub frontal_fraction: f64,
    pub observation_dim: usize,
    pub pose_dim: usize,
    pub noise_sigma: f64,
    pub occlusion_strength: f64,
    pub data_seed: u64,
    // model dims
    pub hidden_dim: usize,
    pub feature_dim: usize,
    // stage 1
    pub stage1_epochs: usize,
    pub batch: usize,
    pub stage1_lr: f64,
    pub momentum: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    // stage 2
    pub stage2_epochs: usize,
    pub stage2_batch: usize,
    pub stage2_lr: f64,
    pub lambda: f64,
    // shared
    pub seed: u64,
    pub arcface_s: f64,
    pub arcface_m: f64,
    // evaluation
    pub eval_identities: usize,
    pub eval_samples_per_identity: usize,
    pub n_pairs: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            num_identities: 200,
            samples_per_identity: 6,
            frontal_fraction: 0.5,
            observation_dim: 96,
            pose_dim: 16,
            noise_sigma: 0.05,
            occlusion_strength: 0.3,
            data_seed: 42,
            hidden_dim: 128,
            feature_dim: 64,
            stage1_epochs: 20,
            batch: 256,
            stage1_lr: 0.1,
            momentum: 0.9,
            decay_epochs: vec![10, 13, 16, 18],
            decay_factor: 0.1,
            stage2_epochs: 50,
            stage2_batch: 16,
            stage2_lr: 0.001,
            lambda: 4.0,
            seed: 42,
            arcface_s: 4.0,
            arcface_m: 0.3,
            eval_identities: 40,
            eval_samples_per_identity: 16,
            n_pairs: 1200,
        }
    }
}

impl Config {
    /// Spec for the training dataset.
    pub fn train_spec(&self) -> DatasetSpec {
        DatasetSpec {
            num_identities: self.num_identities,
            samples_per_identity: self.samples_per_identity,
            frontal_fraction: self.frontal_fraction,
            observation_dim: self.observation_dim,
            pose_dim: self.pose_dim,
            noise_sigma: self.noise_sigma,
            occlusion_strength: self.occlusion_strength,
            seed: self.data_seed,
            world_seed: self.data_seed,
        }
    }

    /// Spec for the held-out evaluation identities: fresh sampling seed,
    /// same world seed so observations come from the same model.
    pub fn eval_spec(&self) -> DatasetSpec {
        DatasetSpec {
            num_identities: self.eval_identities,
            samples_per_identity: self.eval_samples_per_identity,
            seed: crate::rng::mix(self.data_seed, 0xE7A1),
            world_seed: self.data_seed,
            ..self.train_spec()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_spec().validate()?;
        if self.hidden_dim == 0 || self.feature_dim == 0 {
            return Err(Error::Config("model dims must be positive".into()));
        }
        if self.stage1_epochs == 0 || self.stage2_epochs == 0 || self.batch == 0 || self.stage2_batch == 0 {
            return Err(Error::Config("epochs and batch must be positive".into()));
        }
        if self.stage1_lr <= 0.0 || self.stage2_lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0,1)".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config("decay_factor must be in (0,1]".into()));
        }
        if !self.decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("decay_epochs must be strictly increasing".into()));
        }
        if self.decay_epochs.last().is_some_and(|&e| e >= self.stage1_epochs) {
            return Err(Error::Config("decay_epochs must lie below stage1_epochs".into()));
        }
        if self.arcface_s <= 0.0 {
            return Err(Error::Config("arcface_s must be positive".into()));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.arcface_m) {
            return Err(Error::Config("arcface_m must be in [0, pi/2)".into()));
        }
        if self.eval_identities < 2 || self.eval_samples_per_identity == 0 {
            return Err(Error::Config("eval set needs >= 2 identities".into()));
        }
        if self.n_pairs < 10 {
            return Err(Error::Config("n_pairs must be >= 10".into()));
        }
        Ok(())
    }

    /// Canonical dump; parsing it back yields an identical config.
    pub fn dump(&self) -> String {
        let decay: Vec<String> = self.decay_epochs.iter().map(|e| e.to_string()).collect();
        let fields: Vec<(&str, String)> = vec![
            ("num_identities", self.num_identities.to_string()),
            ("samples_per_identity", self.samples_per_identity.to_string()),
            ("frontal_fraction", self.frontal_fraction.to_string()),
            ("observation_dim", self.observation_dim.to_string()),
            ("pose_dim", self.pose_dim.to_string()),
            ("noise_sigma", self.noise_sigma.to_string()),
            ("occlusion_strength", self.occlusion_strength.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("feature_dim", self.feature_dim.to_string()),
            ("stage1_epochs", self.stage1_epochs.to_string()),
            ("batch", self.batch.to_string()),
            ("stage1_lr", self.stage1_lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("decay_epochs", decay.join(",")),
            ("decay_factor", self.decay_factor.to_string()),
            ("stage2_epochs", self.stage2_epochs.to_string()),
            ("stage2_batch", self.stage2_batch.to_string()),
            ("stage2_lr", self.stage2_lr.to_string()),
            ("lambda", self.lambda.to_string()),
            ("seed", self.seed.to_string()),
            ("arcface_s", self.arcface_s.to_string()),
            ("arcface_m", self.arcface_m.to_string()),
            ("eval_identities", self.eval_identities.to_string()),
            ("eval_samples_per_identity", self.eval_samples_per_identity.to_string()),
            ("n_pairs", self.n_pairs.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in fields {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.dump().as_bytes());
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Parse configuration text over the defaults. Unknown keys and
    /// out-of-range values are rejected with the offending line number.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = lineno + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {lineno}: expected 'key = value', got '{raw}'"))
            })?;
            let key = key.trim();
            let value = value.trim();
            macro_rules! num {
                ($ty:ty) => {
                    value.parse::<$ty>().map_err(|_| {
                        Error::Config(format!("line {lineno}: bad value '{value}' for {key}"))
                    })?
                };
            }
            match key {
                "num_identities" => cfg.num_identities = num!(usize),
                "samples_per_identity" => cfg.samples_per_identity = num!(usize),
                "frontal_fraction" => cfg.frontal_fraction = num!(f64),
                "observation_dim" => cfg.observation_dim = num!(usize),
                "pose_dim" => cfg.pose_dim = num!(usize),
                "noise_sigma" => cfg.noise_sigma = num!(f64),
                "occlusion_strength" => cfg.occlusion_strength = num!(f64),
                "data_seed" => cfg.data_seed = num!(u64),
                "hidden_dim" => cfg.hidden_dim = num!(usize),
                "feature_dim" => cfg.feature_dim = num!(usize),
                "stage1_epochs" => cfg.stage1_epochs = num!(usize),
                "batch" => cfg.batch = num!(usize),
                "stage1_lr" => cfg.stage1_lr = num!(f64),
                "momentum" => cfg.momentum = num!(f64),
                "decay_epochs" => {
                    let mut epochs = Vec::new();
                    for part in value.split(',') {
                        let part = part.trim();
                        if part.is_empty() {
                            continue;
                        }
                        epochs.push(part.parse::<usize>().map_err(|_| {
                            Error::Config(format!("line {lineno}: bad decay epoch '{part}'"))
                        })?);
                    }
                    cfg.decay_epochs = epochs;
                }
                "decay_factor" => cfg.decay_factor = num!(f64),
                "stage2_epochs" => cfg.stage2_epochs = num!(usize),
                "stage2_batch" => cfg.stage2_batch = num!(usize),
                "stage2_lr" => cfg.stage2_lr = num!(f64),
                "lambda" => cfg.lambda = num!(f64),
                "seed" => {
                    cfg.seed = num!(u64);
                }
                "arcface_s" => cfg.arcface_s = num!(f64),
                "arcface_m" => cfg.arcface_m = num!(f64),
                "eval_identities" => cfg.eval_identities = num!(usize),
                "eval_samples_per_identity" => cfg.eval_samples_per_identity = num!(usize),
                "n_pairs" => cfg.n_pairs = num!(usize),
                other => {
                    return Err(Error::Config(format!("line {lineno}: unknown key '{other}'")));
                }
            }
        }
        cfg.validate().map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("range error: {msg}")),
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn parse_file(path: &std::path::Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Dependency(format!("cannot read config {}: {e}", path.display()))
        })?;
        Config::parse(&text)
    }
}
