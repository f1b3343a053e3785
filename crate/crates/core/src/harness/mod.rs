//! Training/evaluation harness: hyperparameters, dataset I/O, synthetic
//! data, the training loop, metrics and sweeps.

pub mod data;
pub mod metrics;
pub mod synth;
pub mod sweep;
pub mod train;

use std::collections::BTreeSet;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SeerError};

/// Switches that rewire the forward pass. Zeroing, never reshaping: every
/// flag combination feeds the detector tensors of the same size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationFlag {
    /// Zero the enhanced text feature reaching the detector.
    NoText,
    /// Zero the enhanced image feature reaching the detector.
    NoImage,
    /// Zero the fused multimodal feature.
    NoMsem,
    /// Zero both aligned-space vectors and fix the similarity gate at 1.
    NoClip,
    /// Zero the caption embedding sequence.
    NoCaptions,
    /// Replace co-attention outputs with raw pooled embeddings.
    NoCa,
    /// Replace unimodal self-attention with the identity.
    NoSa,
    /// Drop the emotional-reasoning head: zero its feature, skip its loss.
    NoEerm,
    /// Feed image features to the caption-side experts.
    SeerI,
}

impl AblationFlag {
    pub const ALL: [AblationFlag; 9] = [
        AblationFlag::NoText,
        AblationFlag::NoImage,
        AblationFlag::NoMsem,
        AblationFlag::NoClip,
        AblationFlag::NoCaptions,
        AblationFlag::NoCa,
        AblationFlag::NoSa,
        AblationFlag::NoEerm,
        AblationFlag::SeerI,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::NoText => "no_text",
            Self::NoImage => "no_image",
            Self::NoMsem => "no_msem",
            Self::NoClip => "no_clip",
            Self::NoCaptions => "no_captions",
            Self::NoCa => "no_ca",
            Self::NoSa => "no_sa",
            Self::NoEerm => "no_eerm",
            Self::SeerI => "seer_i",
        }
    }
}

impl FromStr for AblationFlag {
    type Err = SeerError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|f| f.name() == s)
            .copied()
            .ok_or_else(|| {
                SeerError::Config(format!(
                    "unknown ablation flag {s:?}; expected one of {}",
                    Self::ALL.map(|f| f.name()).join(", ")
                ))
            })
    }
}

/// Complete run configuration. Field names double as the config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    /// Weight of text emotion versus caption emotion, in `[0, 1]`.
    pub lambda: f64,
    /// Prior probability that real news carries positive tone, in `(0, 1)`.
    pub alpha: f64,
    /// Prior probability that fake news carries positive tone, in `(0, 1)`.
    pub beta: f64,
    pub k_experts: usize,
    pub heads: usize,
    /// Model dim of every embedded sequence.
    pub d: usize,
    /// Dim of the aligned-space (contrastive) vectors.
    pub d_c: usize,
    /// Dim of the fused features fed to the detector.
    pub d_f: usize,
    /// Text sequence length after padding.
    pub m_len: usize,
    /// Caption sequence length after padding.
    pub z_len: usize,
    pub n_regions: usize,
    /// Width of the raw image-region feature rows.
    pub region_dim: usize,
    pub vocab_size: u32,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub ablation: BTreeSet<AblationFlag>,
    /// Map the similarity gate from `[-1, 1]` to `[0, 1]` before applying.
    pub rescale_theta: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda: 0.75,
            alpha: 0.45,
            beta: 0.3,
            k_experts: 2,
            heads: 4,
            d: 64,
            d_c: 32,
            d_f: 64,
            m_len: 32,
            z_len: 32,
            n_regions: 16,
            region_dim: 8,
            vocab_size: 512,
            lr: 1e-3,
            epochs: 30,
            batch_size: 16,
            seed: 7,
            ablation: BTreeSet::new(),
            rescale_theta: false,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(SeerError::Config(format!(
                "lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(SeerError::Config(format!(
                    "{name} must be in (0, 1), got {v}"
                )));
            }
        }
        if self.k_experts == 0 {
            return Err(SeerError::Config("k_experts must be positive".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(SeerError::Config(format!(
                "heads ({}) must divide d ({})",
                self.heads, self.d
            )));
        }
        if self.d % 2 != 0 {
            return Err(SeerError::Config(format!(
                "d must be even for the bidirectional recurrent experts, got {}",
                self.d
            )));
        }
        for (name, v) in [
            ("d", self.d),
            ("d_c", self.d_c),
            ("d_f", self.d_f),
            ("m_len", self.m_len),
            ("z_len", self.z_len),
            ("n_regions", self.n_regions),
            ("region_dim", self.region_dim),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(SeerError::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(SeerError::Config(
                "vocab_size must allow at least one non-pad token".into(),
            ));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(SeerError::Config(format!(
                "lr must be positive and finite, got {}",
                self.lr
            )));
        }
        Ok(())
    }

    pub fn has(&self, flag: AblationFlag) -> bool {
        self.ablation.contains(&flag)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let hp: HyperParams = serde_json::from_str(text)
            .map_err(|e| SeerError::Config(format!("config: {e}")))?;
        hp.validate()?;
        Ok(hp)
    }
}

/// Accuracy plus per-class precision/recall/F1, fake class first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub fake_precision: f64,
    pub fake_recall: f64,
    pub fake_f1: f64,
    pub real_precision: f64,
    pub real_recall: f64,
    pub real_f1: f64,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "accuracy,fake_precision,fake_recall,fake_f1,real_precision,real_recall,real_f1";

    pub fn to_csv(&self) -> String {
        format!(
            "{}\n{},{},{},{},{},{},{}\n",
            Self::CSV_HEADER,
            self.accuracy,
            self.fake_precision,
            self.fake_recall,
            self.fake_f1,
            self.real_precision,
            self.real_recall,
            self.real_f1
        )
    }
}
