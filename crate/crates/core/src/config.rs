//! Run configuration: a flat dotted-key text format (`ous.delta_l=64`),
//! environment overrides with the `METER_` prefix, and the defaults used
//! throughout (window size 64, historical ratio 0.2, learning rate 1e-2 with
//! 0.96 decay, 70% explained variance for the latent size).

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MeterError, Result};
use crate::nn::training::TrainSettings;

/// How the concept-uncertainty threshold μ_e is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MuEPolicy {
    /// Largest concept uncertainty observed over the training pool.
    MaxTrainUncertainty,
    Fixed(f64),
}

/// How the update trigger level μ_o is derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MuOPolicy {
    /// μ_o = fraction × ΔL × μ_e: trigger when the average excess-uncertainty
    /// mass per window slot reaches the given fraction of the gate level.
    WindowFraction(f64),
    Absolute(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeterConfig {
    pub seed: u64,
    /// Leading fraction of the dataset used as the historical training split.
    pub h_r: f64,
    /// Explained-variance target that sizes the autoencoder latent dim.
    pub explained_variance: f64,
    /// Encoder hidden widths; empty means one hidden layer halfway between
    /// the feature and latent dims.
    pub scd_hidden: Vec<usize>,
    pub iec_hidden: usize,
    /// Hypernetwork embedding dim d_e.
    pub embed_dim: usize,
    /// Fraction of training errors pseudo-labeled anomalous.
    pub mu_p: f64,
    pub mu_e: MuEPolicy,
    pub mu_o: MuOPolicy,
    /// Sliding window length ΔL.
    pub delta_l: usize,
    /// Maximum steps between updates before a time-based trigger.
    pub t_max: usize,
    pub finetune_epochs: usize,
    /// Learning rate for window fine-tunes; gentler than initial training so
    /// a 64-instance window cannot wreck the global fit.
    pub finetune_lr: f64,
    pub train: TrainSettings,
    pub use_iec: bool,
    pub use_dsd: bool,
    pub use_ous: bool,
    /// Inject ground-truth labels into pseudo-labeling when present.
    pub use_pl: bool,
    /// Let hypernetwork training also update the static detector.
    pub joint_static: bool,
}

impl Default for MeterConfig {
    fn default() -> Self {
        MeterConfig {
            seed: 0,
            h_r: 0.2,
            explained_variance: 0.70,
            scd_hidden: Vec::new(),
            iec_hidden: 32,
            embed_dim: 16,
            mu_p: 0.1,
            mu_e: MuEPolicy::Fixed(0.01),
            mu_o: MuOPolicy::WindowFraction(0.1),
            delta_l: 64,
            t_max: 50 * 64,
            finetune_epochs: 50,
            finetune_lr: 5e-3,
            train: TrainSettings::default(),
            use_iec: true,
            use_dsd: true,
            use_ous: true,
            use_pl: false,
            joint_static: false,
        }
    }
}

impl MeterConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64| -> Result<()> {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(MeterError::Config(format!(
                    "{name} must lie in (0, 1), got {v}"
                )))
            }
        };
        frac("data.h_r", self.h_r)?;
        frac("iec.mu_p", self.mu_p)?;
        if !(self.explained_variance > 0.0 && self.explained_variance <= 1.0) {
            return Err(MeterError::Config(format!(
                "scd.explained must lie in (0, 1], got {}",
                self.explained_variance
            )));
        }
        if self.delta_l == 0 {
            return Err(MeterError::Config("ous.delta_l must be at least 1".into()));
        }
        if self.embed_dim == 0 || self.iec_hidden == 0 {
            return Err(MeterError::Config("widths must be at least 1".into()));
        }
        if let MuOPolicy::WindowFraction(f) = self.mu_o {
            if !(f > 0.0) {
                return Err(MeterError::Config(format!(
                    "ous.mu_o fraction must be positive, got {f}"
                )));
            }
        }
        if let MuEPolicy::Fixed(v) = self.mu_e {
            if !v.is_finite() {
                return Err(MeterError::Config("iec.mu_e must be finite".into()));
            }
        }
        Ok(())
    }

    /// Applies one `key=value` assignment in the dotted-key scheme.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| MeterError::Config(format!("invalid value for {what}: {value}"));
        let parse_f64 = |what: &str| value.trim().parse::<f64>().map_err(|_| bad(what));
        let parse_usize = |what: &str| value.trim().parse::<usize>().map_err(|_| bad(what));
        let parse_bool = |what: &str| match value.trim() {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(bad(what)),
        };
        match key.trim() {
            "seed" => self.seed = value.trim().parse().map_err(|_| bad("seed"))?,
            "data.h_r" => self.h_r = parse_f64("data.h_r")?,
            "scd.explained" => self.explained_variance = parse_f64("scd.explained")?,
            "scd.hidden" => {
                let v = value.trim();
                self.scd_hidden = if v.is_empty() || v == "auto" {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|s| s.trim().parse::<usize>().map_err(|_| bad("scd.hidden")))
                        .collect::<Result<Vec<_>>>()?
                };
            }
            "iec.hidden" => self.iec_hidden = parse_usize("iec.hidden")?,
            "iec.mu_p" => self.mu_p = parse_f64("iec.mu_p")?,
            "iec.mu_e" => {
                self.mu_e = if value.trim() == "auto" {
                    MuEPolicy::MaxTrainUncertainty
                } else {
                    MuEPolicy::Fixed(parse_f64("iec.mu_e")?)
                };
            }
            "dsd.d_e" => self.embed_dim = parse_usize("dsd.d_e")?,
            "dsd.joint_static" => self.joint_static = parse_bool("dsd.joint_static")?,
            "ous.delta_l" => self.delta_l = parse_usize("ous.delta_l")?,
            "ous.mu_o" => {
                let v = parse_f64("ous.mu_o")?;
                self.mu_o = match self.mu_o {
                    MuOPolicy::Absolute(_) => MuOPolicy::Absolute(v),
                    MuOPolicy::WindowFraction(_) => MuOPolicy::WindowFraction(v),
                };
            }
            "ous.mu_o_mode" => {
                let current = match self.mu_o {
                    MuOPolicy::WindowFraction(f) | MuOPolicy::Absolute(f) => f,
                };
                self.mu_o = match value.trim() {
                    "fraction" => MuOPolicy::WindowFraction(current),
                    "absolute" => MuOPolicy::Absolute(current),
                    _ => return Err(bad("ous.mu_o_mode")),
                };
            }
            "ous.t_max" => self.t_max = parse_usize("ous.t_max")?,
            "ous.finetune_epochs" => self.finetune_epochs = parse_usize("ous.finetune_epochs")?,
            "ous.finetune_lr" => self.finetune_lr = parse_f64("ous.finetune_lr")?,
            "train.epochs" => self.train.epochs = parse_usize("train.epochs")?,
            "train.lr" => self.train.lr = parse_f64("train.lr")?,
            "train.decay" => self.train.decay = parse_f64("train.decay")?,
            "train.batch" => self.train.batch = parse_usize("train.batch")?,
            "engine.use_iec" => self.use_iec = parse_bool("engine.use_iec")?,
            "engine.use_dsd" => self.use_dsd = parse_bool("engine.use_dsd")?,
            "engine.use_ous" => self.use_ous = parse_bool("engine.use_ous")?,
            "engine.use_pl" => self.use_pl = parse_bool("engine.use_pl")?,
            other => {
                return Err(MeterError::Config(format!("unknown config key: {other}")));
            }
        }
        Ok(())
    }

    /// Parses the dotted-key text format: `key=value` lines, `#` comments.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                MeterError::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = MeterConfig::default();
        let text = std::fs::read_to_string(path)?;
        cfg.apply_text(&text)?;
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Environment overrides: `METER_OUS_DELTA_L=128` maps to `ous.delta_l`.
    pub fn apply_env(&mut self) -> Result<()> {
        for key in CONFIG_KEYS {
            let env_key = format!("METER_{}", key.replace('.', "_").to_uppercase());
            if let Ok(value) = std::env::var(&env_key) {
                self.set(key, &value)?;
            }
        }
        Ok(())
    }

    /// Canonical text rendering: every key in a fixed order. Identical
    /// configurations render identically, so the text doubles as hash input.
    pub fn to_canonical_string(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        put("seed", self.seed.to_string());
        put("data.h_r", fmt_f64(self.h_r));
        put("scd.explained", fmt_f64(self.explained_variance));
        put(
            "scd.hidden",
            if self.scd_hidden.is_empty() {
                "auto".to_string()
            } else {
                self.scd_hidden
                    .iter()
                    .map(|w| w.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            },
        );
        put("iec.hidden", self.iec_hidden.to_string());
        put("iec.mu_p", fmt_f64(self.mu_p));
        put(
            "iec.mu_e",
            match self.mu_e {
                MuEPolicy::MaxTrainUncertainty => "auto".to_string(),
                MuEPolicy::Fixed(v) => fmt_f64(v),
            },
        );
        put("dsd.d_e", self.embed_dim.to_string());
        put("dsd.joint_static", self.joint_static.to_string());
        put("ous.delta_l", self.delta_l.to_string());
        let (mode, v) = match self.mu_o {
            MuOPolicy::WindowFraction(f) => ("fraction", f),
            MuOPolicy::Absolute(a) => ("absolute", a),
        };
        put("ous.mu_o", fmt_f64(v));
        put("ous.mu_o_mode", mode.to_string());
        put("ous.t_max", self.t_max.to_string());
        put("ous.finetune_epochs", self.finetune_epochs.to_string());
        put("ous.finetune_lr", fmt_f64(self.finetune_lr));
        put("train.epochs", self.train.epochs.to_string());
        put("train.lr", fmt_f64(self.train.lr));
        put("train.decay", fmt_f64(self.train.decay));
        put("train.batch", self.train.batch.to_string());
        put("engine.use_iec", self.use_iec.to_string());
        put("engine.use_dsd", self.use_dsd.to_string());
        put("engine.use_ous", self.use_ous.to_string());
        put("engine.use_pl", self.use_pl.to_string());
        out
    }
}

fn fmt_f64(v: f64) -> String {
    // shortest round-trip form
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}

pub const CONFIG_KEYS: &[&str] = &[
    "seed",
    "data.h_r",
    "scd.explained",
    "scd.hidden",
    "iec.hidden",
    "iec.mu_p",
    "iec.mu_e",
    "dsd.d_e",
    "dsd.joint_static",
    "ous.delta_l",
    "ous.mu_o",
    "ous.mu_o_mode",
    "ous.t_max",
    "ous.finetune_epochs",
    "ous.finetune_lr",
    "train.epochs",
    "train.lr",
    "train.decay",
    "train.batch",
    "engine.use_iec",
    "engine.use_dsd",
    "engine.use_ous",
    "engine.use_pl",
];

/// FNV-1a over the canonical config text; stable across runs and platforms.
pub fn config_hash(cfg: &MeterConfig) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in cfg.to_canonical_string().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_canonical_text() {
        let cfg = MeterConfig::default();
        let mut parsed = MeterConfig::default();
        parsed.apply_text(&cfg.to_canonical_string()).unwrap();
        assert_eq!(cfg, parsed);
        assert_eq!(config_hash(&cfg), config_hash(&parsed));
    }

    #[test]
    fn dotted_keys_and_comments_parse() {
        let mut cfg = MeterConfig::default();
        cfg.apply_text(
            "# comment\nous.delta_l=128\niec.mu_e=0.01  # gate\nengine.use_ous=false\nscd.hidden=20,10\n",
        )
        .unwrap();
        assert_eq!(cfg.delta_l, 128);
        assert_eq!(cfg.mu_e, MuEPolicy::Fixed(0.01));
        assert!(!cfg.use_ous);
        assert_eq!(cfg.scd_hidden, vec![20, 10]);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut cfg = MeterConfig::default();
        assert!(cfg.set("nope.key", "1").is_err());
        assert!(cfg.set("ous.delta_l", "not-a-number").is_err());
        assert!(cfg.apply_text("just a line").is_err());
    }

    #[test]
    fn validation_catches_out_of_range_fractions() {
        let mut cfg = MeterConfig::default();
        cfg.h_r = 1.5;
        assert!(cfg.validate().is_err());
        cfg.h_r = 0.2;
        cfg.mu_p = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn env_override_applies() {
        let mut cfg = MeterConfig::default();
        std::env::set_var("METER_OUS_DELTA_L", "96");
        cfg.apply_env().unwrap();
        std::env::remove_var("METER_OUS_DELTA_L");
        assert_eq!(cfg.delta_l, 96);
    }
}
