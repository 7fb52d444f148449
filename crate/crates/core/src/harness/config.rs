//! Experiment configuration as a flat `key = value` text file.
//!
//! Blank lines and lines starting with `#` are ignored. Every key of
//! [`KEYS`] may appear at most once; unknown keys are rejected. The same keys
//! are accepted as command-line flags, which override the file.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attack::{AttackConfig, Mode};
use crate::error::{io_err, Error, Result};
use crate::oracle::DefenseSpec;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "LEBA_OUT_DIR";

pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Simba,
    SimbaPlus,
    SimbaPp,
    LebaTrain,
    LebaTest,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Simba,
        Variant::SimbaPlus,
        Variant::SimbaPp,
        Variant::LebaTrain,
        Variant::LebaTest,
    ];

    pub fn needs_surrogate(self) -> bool {
        self != Variant::Simba
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Simba => "simba",
            Variant::SimbaPlus => "simba_plus",
            Variant::SimbaPp => "simba_pp",
            Variant::LebaTrain => "leba_train",
            Variant::LebaTest => "leba_test",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Directory holding `{split}-images-idx3-ubyte` / `{split}-labels-idx1-ubyte`.
    pub data_dir: PathBuf,
    pub split: String,
    /// Dataset index where the search for attack images starts.
    pub skip: usize,
    /// Attack-set size (correctly classified images only).
    pub n_images: usize,
    pub classes: usize,
    pub victim: PathBuf,
    pub surrogate: Option<PathBuf>,
    pub variant: Variant,
    pub attack: AttackConfig,
    pub defense: DefenseSpec,
    /// Query a remote oracle at `host:port` instead of the local victim.
    pub remote: Option<String>,
    pub repeats: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub save_images: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            split: "test".into(),
            skip: 0,
            n_images: 200,
            classes: 10,
            victim: PathBuf::from("models/victim.w"),
            surrogate: Some(PathBuf::from("models/surrogate.w")),
            variant: Variant::LebaTrain,
            attack: desk_attack(),
            defense: DefenseSpec::None,
            remote: None,
            repeats: 1,
            seed: 0,
            out_dir: default_out_dir(),
            save_images: false,
        }
    }
}

/// Attack settings of the desk benchmark: library defaults with a short
/// transfer step (`0.1·ζ/n_T`) and a faster surrogate learning rate.
pub fn desk_attack() -> AttackConfig {
    let base = AttackConfig::default();
    AttackConfig {
        epsilon_t: Some(0.1 * base.zeta / base.n_t as f64),
        hoga_lr: 0.1,
        ..base
    }
}

/// Every recognised key, in file order.
pub const KEYS: &[&str] = &[
    "data_dir",
    "split",
    "skip",
    "n_images",
    "classes",
    "victim",
    "surrogate",
    "variant",
    "defense",
    "remote",
    "repeats",
    "seed",
    "out_dir",
    "save_images",
    "epsilon",
    "zeta",
    "n_q",
    "n_t",
    "mu",
    "epsilon_t",
    "kernel_size",
    "kernel_sigma",
    "buffer_size",
    "lambda",
    "gamma0",
    "max_queries",
    "hoga_lr",
    "adaptive_gamma",
    "objective",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{v}` for `{key}`"))),
    }
}

fn optional(v: &str) -> Option<&str> {
    (!matches!(v, "" | "none" | "auto")).then_some(v)
}

impl ExperimentConfig {
    /// Set one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let a = &mut self.attack;
        match key.trim() {
            "data_dir" => self.data_dir = v.into(),
            "split" => self.split = v.into(),
            "skip" => self.skip = parse(key, v)?,
            "n_images" => self.n_images = parse(key, v)?,
            "classes" => self.classes = parse(key, v)?,
            "victim" => self.victim = v.into(),
            "surrogate" => self.surrogate = optional(v).map(PathBuf::from),
            "variant" => self.variant = v.parse()?,
            "defense" => self.defense = v.parse()?,
            "remote" => self.remote = optional(v).map(String::from),
            "repeats" => self.repeats = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "out_dir" => self.out_dir = v.into(),
            "save_images" => self.save_images = parse_bool(key, v)?,
            "epsilon" => a.epsilon = parse(key, v)?,
            "zeta" => a.zeta = parse(key, v)?,
            "n_q" => a.n_q = optional(v).map(|s| parse(key, s)).transpose()?,
            "n_t" => a.n_t = parse(key, v)?,
            "mu" => a.mu = parse(key, v)?,
            "epsilon_t" => a.epsilon_t = optional(v).map(|s| parse(key, s)).transpose()?,
            "kernel_size" => a.kernel.0 = parse(key, v)?,
            "kernel_sigma" => a.kernel.1 = parse(key, v)?,
            "buffer_size" => a.buffer_size = parse(key, v)?,
            "lambda" => a.lambda = parse(key, v)?,
            "gamma0" => a.gamma0 = parse(key, v)?,
            "max_queries" => a.max_queries = parse(key, v)?,
            "hoga_lr" => a.hoga_lr = parse(key, v)?,
            "adaptive_gamma" => a.adaptive_gamma = parse_bool(key, v)?,
            "objective" => a.objective = v.parse()?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Apply every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            if !seen.insert(k.trim().to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{}`", n + 1, k.trim())));
            }
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Look up a key's current value in text form.
    pub fn get(&self, key: &str) -> Option<String> {
        let a = &self.attack;
        let opt = |o: Option<String>| o.unwrap_or_else(|| "none".into());
        Some(match key {
            "data_dir" => self.data_dir.display().to_string(),
            "split" => self.split.clone(),
            "skip" => self.skip.to_string(),
            "n_images" => self.n_images.to_string(),
            "classes" => self.classes.to_string(),
            "victim" => self.victim.display().to_string(),
            "surrogate" => opt(self.surrogate.as_ref().map(|p| p.display().to_string())),
            "variant" => self.variant.to_string(),
            "defense" => self.defense.to_string(),
            "remote" => opt(self.remote.clone()),
            "repeats" => self.repeats.to_string(),
            "seed" => self.seed.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "save_images" => self.save_images.to_string(),
            "epsilon" => a.epsilon.to_string(),
            "zeta" => a.zeta.to_string(),
            "n_q" => opt(a.n_q.map(|v| v.to_string())),
            "n_t" => a.n_t.to_string(),
            "mu" => a.mu.to_string(),
            "epsilon_t" => a.epsilon_t.map_or_else(|| "auto".into(), |v| v.to_string()),
            "kernel_size" => a.kernel.0.to_string(),
            "kernel_sigma" => a.kernel.1.to_string(),
            "buffer_size" => a.buffer_size.to_string(),
            "lambda" => a.lambda.to_string(),
            "gamma0" => a.gamma0.to_string(),
            "max_queries" => a.max_queries.to_string(),
            "hoga_lr" => a.hoga_lr.to_string(),
            "adaptive_gamma" => a.adaptive_gamma.to_string(),
            "objective" => a.objective.to_string(),
            _ => return None,
        })
    }

    /// The whole config in file form; parsing it back gives `self`.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("every key has a value")))
            .collect()
    }

    /// The attack settings for this variant (LeBA mode follows the variant).
    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            mode: if self.variant == Variant::LebaTest { Mode::Test } else { Mode::Train },
            ..self.attack.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.variant.needs_surrogate() && self.surrogate.is_none() {
            return Err(Error::Config(format!("variant {} needs a surrogate", self.variant)));
        }
        if self.remote.is_some() && self.defense != DefenseSpec::None {
            return Err(Error::Config("defenses are configured on the oracle server, not with `remote`".into()));
        }
        self.defense.validate()?;
        self.attack.validate()
    }
}
