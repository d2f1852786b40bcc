//! Training configuration: validated hyperparameters with noise-rate
//! keyed defaults, TOML loading, and a content hash guarding resume.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelDims;
use crate::objective::ObjectiveConfig;
use crate::regularizers::WarmupSchedule;

/// Label-corruption family.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    None,
    Sym,
    Asym,
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseKind::None => "none",
            NoiseKind::Sym => "sym",
            NoiseKind::Asym => "asym",
        })
    }
}

/// Hyperparameters keyed by noise rate: heavier noise gets a stronger
/// diversity term, weaker prediction-consistency weight, and a longer
/// warm-up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateKeyedDefaults {
    pub lambda_ce: f64,
    pub lambda_im: f64,
    pub lambda_elr: f64,
    pub m_elr: f64,
    pub lambda_f: f64,
    pub m_f: f64,
    pub warmup_end: usize,
}

/// λ_ce 1.0/1.1, λ_IM linear 0.02→0.2 over rates 0.2→0.6, λ_ELR
/// 0.12/0.1, m_ELR 0.92/0.9, λ_f 0.08/0.1, m_f 0.9, warm-up end
/// 25/30/35.
pub fn rate_keyed_defaults(rate: f64) -> RateKeyedDefaults {
    let high = rate > 0.4;
    let lambda_im = 0.02 + 0.18 * ((rate - 0.2) / 0.4).clamp(0.0, 1.0);
    RateKeyedDefaults {
        lambda_ce: if high { 1.1 } else { 1.0 },
        lambda_im,
        lambda_elr: if high { 0.1 } else { 0.12 },
        m_elr: if high { 0.9 } else { 0.92 },
        lambda_f: if high { 0.1 } else { 0.08 },
        m_f: 0.9,
        warmup_end: if rate <= 0.3 {
            25
        } else if rate <= 0.5 {
            30
        } else {
            35
        },
    }
}

/// Full run configuration. Fields omitted from a TOML file fall back
/// to the defaults for the configured noise rate.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dims: ModelDims,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub noise_kind: NoiseKind,
    pub noise_rate: f64,
    /// Per-class plausible-confusion sets; None means the built-in
    /// sleep-stage adjacency.
    pub adjacency: Option<Vec<Vec<usize>>>,
    pub lambda_ce: f64,
    pub lambda_im: f64,
    pub lambda_rec: f64,
    pub lambda_ep: f64,
    pub lambda_seq: f64,
    pub lambda_elr: f64,
    pub m_elr: f64,
    pub lambda_f: f64,
    pub m_f: f64,
    pub warmup_start: usize,
    pub warmup_end: usize,
    pub fourier_log_variant: bool,
    pub seeds: Vec<u64>,
    pub target_domain: usize,
    pub sequences_per_domain: usize,
    pub generator_seed: u64,
    /// Ablation switches: zero out one regularizer family each.
    pub disable_elr: bool,
    pub disable_felr: bool,
    pub disable_cdr: bool,
    /// Pre-generated dataset; None means generate in memory.
    pub data_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let keyed = rate_keyed_defaults(0.0);
        TrainConfig {
            dims: ModelDims::desk_default(),
            epochs: 50,
            batch_size: 32,
            lr: 1.2e-3,
            weight_decay: 1e-4,
            dropout: 0.1,
            noise_kind: NoiseKind::None,
            noise_rate: 0.0,
            adjacency: None,
            lambda_ce: keyed.lambda_ce,
            lambda_im: keyed.lambda_im,
            lambda_rec: 0.5,
            lambda_ep: 0.5,
            lambda_seq: 0.5,
            lambda_elr: keyed.lambda_elr,
            m_elr: keyed.m_elr,
            lambda_f: keyed.lambda_f,
            m_f: keyed.m_f,
            warmup_start: 20,
            warmup_end: keyed.warmup_end,
            fourier_log_variant: false,
            seeds: vec![0, 1, 2, 3, 4],
            target_domain: 4,
            sequences_per_domain: 200,
            generator_seed: 7,
            disable_elr: false,
            disable_felr: false,
            disable_cdr: false,
            data_path: None,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    /// Default configuration for one noise setting, with every keyed
    /// hyperparameter resolved from the rate.
    pub fn for_noise(kind: NoiseKind, rate: f64) -> Self {
        let keyed = rate_keyed_defaults(rate);
        TrainConfig {
            noise_kind: kind,
            noise_rate: rate,
            lambda_ce: keyed.lambda_ce,
            lambda_im: keyed.lambda_im,
            lambda_elr: keyed.lambda_elr,
            m_elr: keyed.m_elr,
            lambda_f: keyed.lambda_f,
            m_f: keyed.m_f,
            warmup_end: keyed.warmup_end,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size {} too small for multi-domain batches",
                self.batch_size
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay {} must be ≥ 0", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        match self.noise_kind {
            NoiseKind::None => {
                if self.noise_rate != 0.0 {
                    return Err(Error::Config(format!(
                        "noise kind none with nonzero rate {}",
                        self.noise_rate
                    )));
                }
            }
            _ => {
                if !(0.0..1.0).contains(&self.noise_rate) {
                    return Err(Error::Config(format!(
                        "noise rate {} outside [0, 1)",
                        self.noise_rate
                    )));
                }
            }
        }
        for (name, v) in [
            ("lambda_ce", self.lambda_ce),
            ("lambda_im", self.lambda_im),
            ("lambda_rec", self.lambda_rec),
            ("lambda_ep", self.lambda_ep),
            ("lambda_seq", self.lambda_seq),
            ("lambda_elr", self.lambda_elr),
            ("lambda_f", self.lambda_f),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        for (name, m) in [("m_elr", self.m_elr), ("m_f", self.m_f)] {
            if !(m > 0.0 && m < 1.0) {
                return Err(Error::Config(format!("{name} {m} outside (0, 1)")));
            }
        }
        if self.warmup_start >= self.warmup_end {
            return Err(Error::Config(format!(
                "warm-up start {} must precede end {}",
                self.warmup_start, self.warmup_end
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed required".into()));
        }
        if self.sequences_per_domain < 10 {
            return Err(Error::Config(format!(
                "sequences_per_domain {} too small for a 90/10 split",
                self.sequences_per_domain
            )));
        }
        Ok(())
    }

    /// The loss-composition view of this config, with ablation switches
    /// applied (they zero λ_IM for the diversity term only; λ_ELR and
    /// λ_f are zeroed in the buffers, see `effective_lambda_elr`).
    pub fn objective(&self) -> Result<ObjectiveConfig> {
        let cfg = ObjectiveConfig {
            lambda_ce: self.lambda_ce,
            lambda_im: if self.disable_cdr { 0.0 } else { self.lambda_im },
            lambda_rec: self.lambda_rec,
            lambda_ep: self.lambda_ep,
            lambda_seq: self.lambda_seq,
            warmup: WarmupSchedule::new(self.warmup_start, self.warmup_end)?,
            fourier_log_variant: self.fourier_log_variant,
            fourier_log_epsilon: 1e-4,
            dropout: self.dropout,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn effective_lambda_elr(&self) -> f64 {
        if self.disable_elr {
            0.0
        } else {
            self.lambda_elr
        }
    }

    pub fn effective_lambda_f(&self) -> f64 {
        if self.disable_felr {
            0.0
        } else {
            self.lambda_f
        }
    }

    /// Parse a TOML file; missing fields fall back to defaults.
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config encode: {e}")))
    }

    /// SHA-256 of the canonical JSON encoding; identical configs hash
    /// identically regardless of their TOML formatting.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Field-level differences against another config, as "name: a vs b"
    /// lines. Empty when the configs match.
    pub fn diff(&self, other: &TrainConfig) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(other).expect("config serializes");
        let (a, b) = (a.as_object().unwrap(), b.as_object().unwrap());
        a.iter()
            .filter(|(k, va)| b.get(*k) != Some(va))
            .map(|(k, va)| format!("{k}: {va} vs {}", b[k]))
            .collect()
    }
}
