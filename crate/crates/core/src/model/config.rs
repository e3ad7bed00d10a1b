use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frequency::BandFilterBank;
use crate::nn::AdamWConfig;
use crate::srm::{default_kernels, SrmKernel, SrmKernelSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticSource {
    /// Precomputed vectors looked up by record id; only the projection trains.
    EmbeddedTable,
    /// A small convolutional encoder trained jointly on the resized image.
    TinyEncoder,
}

/// Which branches feed the fusion MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    PfeHOnly,
    PfeLOnly,
    SfeOnly,
    PfeOnly,
    HPlusSfe,
    LPlusSfe,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::PfeHOnly,
        Ablation::PfeLOnly,
        Ablation::SfeOnly,
        Ablation::PfeOnly,
        Ablation::HPlusSfe,
        Ablation::LPlusSfe,
        Ablation::Full,
    ];

    pub fn uses_max(self) -> bool {
        matches!(self, Self::Full | Self::PfeHOnly | Self::PfeOnly | Self::HPlusSfe)
    }

    pub fn uses_min(self) -> bool {
        matches!(self, Self::Full | Self::PfeLOnly | Self::PfeOnly | Self::LPlusSfe)
    }

    pub fn uses_semantic(self) -> bool {
        matches!(self, Self::Full | Self::SfeOnly | Self::HPlusSfe | Self::LPlusSfe)
    }

    pub fn uses_patches(self) -> bool {
        self.uses_max() || self.uses_min()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::PfeHOnly => "pfe_h_only",
            Self::PfeLOnly => "pfe_l_only",
            Self::SfeOnly => "sfe_only",
            Self::PfeOnly => "pfe_only",
            Self::HPlusSfe => "h_plus_sfe",
            Self::LPlusSfe => "l_plus_sfe",
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown ablation variant {s:?}")))
    }
}

/// Model and training configuration. Serialized field names are the
/// configuration-file keys; omitted keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AideConfig {
    pub patch_n: usize,
    pub k_bands: usize,
    pub k_select: usize,
    pub patch_resize: usize,
    pub encoder_dim: usize,
    pub semantic_dim: usize,
    pub semantic_source: SemanticSource,
    pub semantic_input_size: usize,
    pub clamp_t: f64,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub augment_prob: f64,
    pub fusion_hidden: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub ablation: Ablation,
    /// Replaces the three default SRM kernels when present.
    pub srm_kernels: Option<Vec<SrmKernel>>,
}

impl Default for AideConfig {
    fn default() -> Self {
        Self {
            patch_n: 32,
            k_bands: 6,
            k_select: 2,
            patch_resize: 64,
            encoder_dim: 128,
            semantic_dim: 128,
            semantic_source: SemanticSource::TinyEncoder,
            semantic_input_size: 64,
            clamp_t: crate::srm::DEFAULT_CLAMP,
            seed: 0,
            lr: 1e-4,
            batch_size: 32,
            epochs: 5,
            augment_prob: 0.1,
            fusion_hidden: 128,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ablation: Ablation::Full,
            srm_kernels: None,
        }
    }
}

impl AideConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.k_select == 0 {
            return fail("k_select must be at least 1".into());
        }
        BandFilterBank::new(self.patch_n, self.k_bands).map_err(|e| Error::Config(e.to_string()))?;
        if self.patch_resize < crate::srm::KERNEL_SIZE {
            return fail(format!("patch_resize {} is smaller than the SRM kernel", self.patch_resize));
        }
        if self.semantic_input_size < 4 {
            return fail(format!("semantic_input_size {} is below 4", self.semantic_input_size));
        }
        if self.encoder_dim == 0 || self.semantic_dim == 0 || self.fusion_hidden == 0 {
            return fail("encoder_dim, semantic_dim and fusion_hidden must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.augment_prob) {
            return fail(format!("augment_prob {} outside [0, 1]", self.augment_prob));
        }
        self.adamw().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.srm_kernel_set()?;
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn srm_kernel_set(&self) -> Result<SrmKernelSet> {
        let kernels = self.srm_kernels.clone().unwrap_or_else(default_kernels);
        SrmKernelSet::new(kernels, self.clamp_t)
    }

    pub fn filter_bank(&self) -> Result<BandFilterBank> {
        BandFilterBank::new(self.patch_n, self.k_bands).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
