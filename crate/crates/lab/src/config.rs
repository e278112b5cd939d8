//! Sweep configuration: flat `key = value` files, environment overrides and
//! the resolved-config echo.
//!
//! Resolution order is defaults (desk or paper mode), then the config file,
//! then `ICL_PE_<KEY>` environment variables, then command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use icl_pe::datagen::InputDist;
use icl_pe::model::{Activation, PeMode};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {msg}")]
    Value { key: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub const ENV_PREFIX: &str = "ICL_PE_";

/// Context lengths of the reference table.
pub const TABLE_T: [usize; 10] = [6, 7, 8, 9, 10, 12, 15, 20, 25, 30];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub d: usize,
    pub d_m: usize,
    pub t_list: Vec<usize>,
    /// Attack budgets; the clean evaluation always runs, so 0 is implied.
    pub eps_list: Vec<f64>,
    pub pe_modes: Vec<PeMode>,
    pub seeds: Vec<u64>,
    pub n_train: usize,
    pub n_val: usize,
    pub epochs: usize,
    pub lr: f64,
    pub attack_k: usize,
    /// PGD step is `attack_alpha_ratio · ε`.
    pub attack_alpha_ratio: f64,
    pub freeze_query: bool,
    pub dist: InputDist,
    pub activation: Activation,
    pub pe_init_scale: f64,
    pub eval_seed: u64,
    /// Multiplier on the empirical input-Lipschitz estimate.
    pub lx_safety: f64,
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// Defaults sized for a single workstation.
    pub fn desk() -> Self {
        Self {
            d: 5,
            d_m: 256,
            t_list: TABLE_T.to_vec(),
            eps_list: vec![0.05, 0.2, 0.3],
            pe_modes: PeMode::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            n_train: 309,
            n_val: 2000,
            epochs: 1500,
            lr: 4e-5,
            attack_k: 40,
            attack_alpha_ratio: 0.1,
            freeze_query: false,
            dist: InputDist::Gaussian,
            activation: Activation::Relu,
            pe_init_scale: 1.0,
            eval_seed: 0,
            lx_safety: 2.0,
            output_dir: PathBuf::from("runs"),
        }
    }

    /// The full-size published setup.
    pub fn paper() -> Self {
        Self {
            d_m: 1024,
            n_val: 9991,
            epochs: 3000,
            lr: 1e-5,
            pe_init_scale: 25.0,
            seeds: (0..6).collect(),
            ..Self::desk()
        }
    }

    pub fn base(paper_mode: bool) -> Self {
        if paper_mode {
            Self::paper()
        } else {
            Self::desk()
        }
    }

    pub const KEYS: [&'static str; 20] = [
        "d",
        "d_m",
        "t_list",
        "eps_list",
        "pe_modes",
        "seeds",
        "n_train",
        "n_val",
        "epochs",
        "lr",
        "attack_k",
        "attack_alpha_ratio",
        "freeze_query",
        "dist",
        "activation",
        "pe_init_scale",
        "eval_seed",
        "lx_safety",
        "output_dir",
        "paper_mode",
    ];

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let bad = |msg: String| ConfigError::Value { key: key.to_string(), msg };
        match key {
            "d" => self.d = parse_one(v).map_err(bad)?,
            "d_m" => self.d_m = parse_one(v).map_err(bad)?,
            "t_list" => self.t_list = parse_list(v).map_err(bad)?,
            "eps_list" => self.eps_list = parse_list(v).map_err(bad)?,
            "pe_modes" => {
                self.pe_modes = split_list(v)
                    .map(|s| PeMode::parse(s).map_err(|e| bad(e.to_string())))
                    .collect::<Result<_, _>>()?
            }
            "seeds" => self.seeds = parse_list(v).map_err(bad)?,
            "n_train" => self.n_train = parse_one(v).map_err(bad)?,
            "n_val" => self.n_val = parse_one(v).map_err(bad)?,
            "epochs" => self.epochs = parse_one(v).map_err(bad)?,
            "lr" => self.lr = parse_one(v).map_err(bad)?,
            "attack_k" => self.attack_k = parse_one(v).map_err(bad)?,
            "attack_alpha_ratio" => self.attack_alpha_ratio = parse_one(v).map_err(bad)?,
            "freeze_query" => self.freeze_query = parse_one(v).map_err(bad)?,
            "dist" => self.dist = InputDist::parse(v).map_err(|e| bad(e.to_string()))?,
            "activation" => self.activation = Activation::parse(v).map_err(|e| bad(e.to_string()))?,
            "pe_init_scale" => self.pe_init_scale = parse_one(v).map_err(bad)?,
            "eval_seed" => self.eval_seed = parse_one(v).map_err(bad)?,
            "lx_safety" => self.lx_safety = parse_one(v).map_err(bad)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            // only meaningful before the base is chosen; see `resolve`
            "paper_mode" => {
                parse_one::<bool>(v).map_err(bad)?;
            }
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Resolved `key = value` text, one key per line in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").expect("writing to a string");
        }
        s
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let join = |v: Vec<String>| v.join(",");
        vec![
            ("d", self.d.to_string()),
            ("d_m", self.d_m.to_string()),
            ("t_list", join(self.t_list.iter().map(|t| t.to_string()).collect())),
            ("eps_list", join(self.eps_list.iter().map(|e| e.to_string()).collect())),
            ("pe_modes", join(self.pe_modes.iter().map(|m| m.name().to_string()).collect())),
            ("seeds", join(self.seeds.iter().map(|s| s.to_string()).collect())),
            ("n_train", self.n_train.to_string()),
            ("n_val", self.n_val.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("attack_k", self.attack_k.to_string()),
            ("attack_alpha_ratio", self.attack_alpha_ratio.to_string()),
            ("freeze_query", self.freeze_query.to_string()),
            ("dist", self.dist.name().to_string()),
            ("activation", self.activation.name().to_string()),
            ("pe_init_scale", self.pe_init_scale.to_string()),
            ("eval_seed", self.eval_seed.to_string()),
            ("lx_safety", self.lx_safety.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
        ]
    }

    /// Hash of everything that affects results (the output directory does
    /// not), as 16 hex digits.
    pub fn content_hash(&self) -> String {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (k, v) in self.entries() {
            if k != "output_dir" {
                (k, v).hash(&mut h);
            }
        }
        format!("{:016x}", h.finish())
    }

    /// Hard errors; soft problems come back from [`RunConfig::warnings`].
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.t_list.is_empty() || self.eps_list.is_empty() || self.pe_modes.is_empty() || self.seeds.is_empty() {
            return invalid("t_list, eps_list, pe_modes and seeds must be non-empty");
        }
        if self.d == 0 || self.d_m == 0 || self.n_train == 0 || self.n_val == 0 {
            return invalid("d, d_m, n_train and n_val must be positive");
        }
        if self.t_list.contains(&0) {
            return invalid("context lengths must be positive");
        }
        if self.eps_list.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
            return invalid("attack budgets must be finite and non-negative");
        }
        if !(self.lr > 0.0) || !(self.attack_alpha_ratio > 0.0) || !(self.lx_safety > 0.0) {
            return invalid("lr, attack_alpha_ratio and lx_safety must be positive");
        }
        if !self.pe_init_scale.is_finite() {
            return invalid("pe_init_scale must be finite");
        }
        Ok(())
    }

    /// Budgets at or beyond `√t − √d`, where the amplification factor is
    /// undefined.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        for &t in &self.t_list {
            let limit = (t as f64).sqrt() - (self.d as f64).sqrt();
            for eps in self.budgets().into_iter().filter(|e| *e > 0.0) {
                if eps >= limit {
                    out.push(format!("eps={eps} at t={t} is not below √t − √d = {limit:.4}"));
                }
            }
        }
        out
    }

    /// Attack budgets with the clean budget first and duplicates removed.
    pub fn budgets(&self) -> Vec<f64> {
        let mut out = vec![0.0];
        for &e in &self.eps_list {
            if !out.contains(&e) {
                out.push(e);
            }
        }
        out
    }
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn parse_one<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("{v:?}: {e}"))
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    split_list(v).map(parse_one).collect()
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped; a
/// later key overrides an earlier one.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
        };
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
        }
        out.insert(k.to_ascii_lowercase(), v.trim().to_string());
    }
    Ok(out)
}

/// Reads a config file into key/value pairs.
pub fn read_kv_file(path: &Path) -> Result<BTreeMap<String, String>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse_kv(&text)
}

/// Builds a config from file pairs and an environment lookup.
///
/// `paper_mode` may come from the caller, the file or the environment; any
/// of them switches the base defaults.
pub fn resolve(
    file: &BTreeMap<String, String>,
    env: impl Fn(&str) -> Option<String>,
    paper_mode_flag: bool,
) -> Result<RunConfig, ConfigError> {
    let env_value = |k: &str| env(&format!("{ENV_PREFIX}{}", k.to_ascii_uppercase()));
    let mut paper = paper_mode_flag;
    for src in [file.get("paper_mode").cloned(), env_value("paper_mode")].into_iter().flatten() {
        paper |= parse_one::<bool>(&src).map_err(|msg| ConfigError::Value { key: "paper_mode".into(), msg })?;
    }
    let mut config = RunConfig::base(paper);
    for (k, v) in file {
        config.set(k, v)?;
    }
    for k in RunConfig::KEYS {
        if let Some(v) = env_value(k) {
            config.set(k, &v)?;
        }
    }
    config.validate()?;
    Ok(config)
}

/// [`resolve`] against the process environment.
pub fn load(path: Option<&Path>, paper_mode: bool) -> Result<RunConfig, ConfigError> {
    let file = match path {
        Some(p) => read_kv_file(p)?,
        None => BTreeMap::new(),
    };
    resolve(&file, |k| std::env::var(k).ok(), paper_mode)
}
