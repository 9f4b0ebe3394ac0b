use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::losses::{AdvMode, LossWeights, Objective};

/// Default hyper-parameter family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Synthetic pairs: higher learning rate, weaker regularization, no input noise.
    Synthetic,
    Real,
}

impl Profile {
    pub fn name(&self) -> &'static str {
        match self {
            Profile::Synthetic => "synthetic",
            Profile::Real => "real",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Profile::Synthetic),
            "real" => Ok(Profile::Real),
            _ => Err(Error::Config(format!("profile must be `synthetic` or `real`, got `{s}`"))),
        }
    }
}

/// Everything a training run depends on besides the data itself.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub profile: Profile,
    pub objective: Objective,
    pub lr_main: f64,
    pub lr_disc: f64,
    pub weights: LossWeights,
    /// Square patch side; 0 trains on whole images.
    pub patch_size: usize,
    /// Smallest accepted valid fraction of the input mask inside a patch.
    pub valid_fraction_threshold: f64,
    pub epochs: usize,
    pub seed: u64,
    pub unet_features: Vec<usize>,
    pub encoder_features: Vec<usize>,
    /// Generator minimizes `-log D(fake)` instead of `log(1 - D(fake))`.
    pub non_saturating: bool,
    /// Half-width of the uniform input noise as a fraction of the intensity range.
    pub noise: f64,
    /// Largest small rotation of the equivariance transforms, degrees.
    pub transform_max_angle_deg: f64,
    /// Use only the first `train_limit` training pairs; 0 uses all.
    pub train_limit: usize,
    /// Dataset directory holding a manifest.
    pub data: Option<PathBuf>,
}

/// Keys accepted in config files and overrides, in snapshot order.
pub const CONFIG_KEYS: [&str; 22] = [
    "profile",
    "objective",
    "lr_main",
    "lr_disc",
    "w_sim",
    "w_com",
    "w_adv",
    "w_reg",
    "rig_affinity",
    "rig_orthogonality",
    "rig_properness",
    "patch_size",
    "valid_fraction_threshold",
    "epochs",
    "seed",
    "unet_features",
    "encoder_features",
    "non_saturating",
    "noise",
    "transform_max_angle_deg",
    "train_limit",
    "data",
];

impl TrainConfig {
    /// Defaults of `profile` for `objective`.
    pub fn defaults(profile: Profile, objective: Objective) -> Self {
        let (lr_main, weights, noise) = match profile {
            Profile::Synthetic => (2e-4, LossWeights::synthetic(), 0.0),
            Profile::Real => (1e-4, LossWeights::default(), 0.01),
        };
        let valid_fraction_threshold = if objective.adversarial == Some(AdvMode::DefUncondAdv) { 1.0 } else { 0.4 };
        TrainConfig {
            profile,
            objective,
            lr_main,
            lr_disc: 4e-4,
            weights,
            patch_size: 0,
            valid_fraction_threshold,
            epochs: 10,
            seed: 0,
            unet_features: vec![8, 16, 32, 32],
            encoder_features: vec![8, 16, 32, 32],
            non_saturating: false,
            noise,
            transform_max_angle_deg: 15.0,
            train_limit: 0,
            data: None,
        }
    }

    /// Builds a config from `key = value` pairs; later pairs win. Profile and
    /// objective defaults are applied first, so order never matters otherwise.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        for (k, _) in pairs {
            if !CONFIG_KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
        }
        let last = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let profile = last("profile").map(Profile::parse).transpose()?.unwrap_or(Profile::Synthetic);
        let objective: Objective = last("objective")
            .unwrap_or("EqSim+Com")
            .parse()
            .map_err(|e: Error| Error::Config(format!("objective: {e}")))?;
        let mut cfg = TrainConfig::defaults(profile, objective);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a flat `key = value` file; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("`{key}` expects {what}, got `{value}`"));
        let float = || value.parse::<f64>().map_err(|_| bad("a number"));
        let uint = || value.parse::<usize>().map_err(|_| bad("a non-negative integer"));
        let list = || -> Result<Vec<usize>> {
            value
                .split(',')
                .map(|s| s.trim().parse::<usize>().map_err(|_| bad("a comma-separated list of integers")))
                .collect()
        };
        match key {
            "profile" | "objective" => {}
            "lr_main" => self.lr_main = float()?,
            "lr_disc" => self.lr_disc = float()?,
            "w_sim" => self.weights.sim = float()?,
            "w_com" => self.weights.com = float()?,
            "w_adv" => self.weights.adv = float()?,
            "w_reg" => self.weights.reg = float()?,
            "rig_affinity" => self.weights.rigidity.affinity = float()?,
            "rig_orthogonality" => self.weights.rigidity.orthogonality = float()?,
            "rig_properness" => self.weights.rigidity.properness = float()?,
            "patch_size" => self.patch_size = uint()?,
            "valid_fraction_threshold" => self.valid_fraction_threshold = float()?,
            "epochs" => self.epochs = uint()?,
            "seed" => self.seed = value.parse().map_err(|_| bad("an unsigned integer"))?,
            "unet_features" => self.unet_features = list()?,
            "encoder_features" => self.encoder_features = list()?,
            "non_saturating" => self.non_saturating = value.parse().map_err(|_| bad("true or false"))?,
            "noise" => self.noise = float()?,
            "transform_max_angle_deg" => self.transform_max_angle_deg = float()?,
            "train_limit" => self.train_limit = uint()?,
            "data" => self.data = if value.is_empty() { None } else { Some(PathBuf::from(value)) },
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr_main > 0.0 && self.lr_disc > 0.0) {
            return bad(format!("learning rates must be positive: {} {}", self.lr_main, self.lr_disc));
        }
        self.weights.validate()?;
        if !(0.0..=1.0).contains(&self.valid_fraction_threshold) {
            return bad(format!("valid_fraction_threshold {} outside [0, 1]", self.valid_fraction_threshold));
        }
        if self.unet_features.is_empty() || self.encoder_features.is_empty() {
            return bad("feature lists must not be empty".into());
        }
        if self.unet_features.contains(&0) || self.encoder_features.contains(&0) {
            return bad("feature counts must be positive".into());
        }
        if !(0.0..1.0).contains(&self.noise) {
            return bad(format!("noise {} outside [0, 1)", self.noise));
        }
        if !(0.0..=180.0).contains(&self.transform_max_angle_deg) {
            return bad(format!("transform_max_angle_deg {} outside [0, 180]", self.transform_max_angle_deg));
        }
        Ok(())
    }

    /// Fully resolved `key = value` text that [`TrainConfig::parse`] maps back to `self`.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let w = &self.weights;
        let mut out = String::new();
        let mut line = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("writing to a string");
        line("profile", self.profile.name().into());
        line("objective", self.objective.to_string());
        line("lr_main", format!("{:?}", self.lr_main));
        line("lr_disc", format!("{:?}", self.lr_disc));
        line("w_sim", format!("{:?}", w.sim));
        line("w_com", format!("{:?}", w.com));
        line("w_adv", format!("{:?}", w.adv));
        line("w_reg", format!("{:?}", w.reg));
        line("rig_affinity", format!("{:?}", w.rigidity.affinity));
        line("rig_orthogonality", format!("{:?}", w.rigidity.orthogonality));
        line("rig_properness", format!("{:?}", w.rigidity.properness));
        line("patch_size", self.patch_size.to_string());
        line("valid_fraction_threshold", format!("{:?}", self.valid_fraction_threshold));
        line("epochs", self.epochs.to_string());
        line("seed", self.seed.to_string());
        line("unet_features", list(&self.unet_features));
        line("encoder_features", list(&self.encoder_features));
        line("non_saturating", self.non_saturating.to_string());
        line("noise", format!("{:?}", self.noise));
        line("transform_max_angle_deg", format!("{:?}", self.transform_max_angle_deg));
        line("train_limit", self.train_limit.to_string());
        line("data", self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        out
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::from_pairs(&[]).expect("built-in defaults are valid")
    }
}

/// Splits `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Parses one `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
