//! Pipeline settings. A `profile` key picks the base values (`reference` for the
//! full-scale settings, `desk` for single-core runs) and any other key in the
//! TOML file overrides one field.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::default_augment_angles;
use crate::dunnet::{NetConfig, TrainSchedule};
use crate::encoding::Posterior;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub profile: String,
    /// Side of the training samples; voting crops are resized to it.
    pub sample_side: usize,
    /// Shorter side hand-crafted features are computed at; 0 keeps the input size.
    pub work_side: usize,

    pub sift_step: usize,
    pub sift_scales: usize,
    pub gmm_components: usize,
    pub gmm_max_descriptors: usize,
    pub gmm_max_iter: usize,
    pub gmm_tol: f64,
    pub posterior: Posterior,

    pub color_step: usize,
    pub color_patch_sides: Vec<usize>,
    /// CSV color-name table; empty uses the built-in fallback.
    pub cn_table: String,
    pub dd_bins: usize,
    pub bow_centers: usize,
    pub bow_max_descriptors: usize,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
    pub rcc_codes: usize,
    pub rcc_grid: usize,
    pub rcc_sample_cap: usize,

    pub cnn_input_side: usize,
    pub cnn_channels: [usize; 6],
    pub cnn_fc1: usize,
    pub cnn_fc2: usize,
    pub cnn_lr0: f64,
    pub cnn_decay: f64,
    pub cnn_decay_step: usize,
    pub cnn_iters: usize,
    pub cnn_batch: usize,
    pub cnn_momentum: f64,
    pub augment_angles: Vec<f64>,
    pub augment_flip: bool,

    pub svm_c_grid: Vec<f64>,
    /// C used when the manifest has no validation rows.
    pub svm_c_fallback: f64,
    /// Per-feature weights for combined kernels; missing features weigh 1.
    pub kernel_weights: BTreeMap<String, f64>,
    /// Extra combined rows, e.g. `ifv_sift+rcc`.
    pub combinations: Vec<String>,
    pub date_row: String,

    pub lc_fractions: Vec<f64>,
    pub lc_repetitions: usize,
}

impl PipelineConfig {
    pub fn reference() -> Self {
        Self {
            profile: "reference".into(),
            sample_side: 400,
            work_side: 0,
            sift_step: 4,
            sift_scales: 5,
            gmm_components: 128,
            gmm_max_descriptors: 1_000_000,
            gmm_max_iter: 100,
            gmm_tol: 1e-6,
            posterior: Posterior::Weighted,
            color_step: 5,
            color_patch_sides: vec![12, 20],
            cn_table: String::new(),
            dd_bins: 8,
            bow_centers: 512,
            bow_max_descriptors: 500_000,
            kmeans_max_iter: 100,
            kmeans_tol: 1e-6,
            rcc_codes: 128,
            rcc_grid: 4,
            rcc_sample_cap: 200_000,
            cnn_input_side: 128,
            cnn_channels: [32, 32, 64, 64, 128, 128],
            cnn_fc1: 512,
            cnn_fc2: 256,
            cnn_lr0: 0.001,
            cnn_decay: 0.5,
            cnn_decay_step: 4000,
            cnn_iters: 50_000,
            cnn_batch: 32,
            cnn_momentum: 0.9,
            augment_angles: default_augment_angles(),
            augment_flip: true,
            svm_c_grid: crate::classification::DEFAULT_C_GRID.to_vec(),
            svm_c_fallback: 10.0,
            kernel_weights: BTreeMap::new(),
            combinations: vec!["ifv_sift+rcc".into(), "ifv_sift+rcc+dunnet".into()],
            date_row: "ifv_sift+rcc+dunnet".into(),
            lc_fractions: (1..10).map(|i| i as f64 / 10.0).collect(),
            lc_repetitions: 20,
        }
    }

    /// Downsized settings that run the synthetic corpus end to end on one core.
    pub fn desk() -> Self {
        Self {
            profile: "desk".into(),
            work_side: 160,
            sift_step: 6,
            sift_scales: 3,
            gmm_components: 16,
            gmm_max_descriptors: 20_000,
            gmm_max_iter: 50,
            color_step: 6,
            bow_centers: 64,
            bow_max_descriptors: 20_000,
            kmeans_max_iter: 50,
            rcc_codes: 32,
            rcc_sample_cap: 20_000,
            cnn_input_side: 32,
            cnn_channels: [8, 8, 16, 16, 32, 32],
            cnn_fc1: 64,
            cnn_fc2: 32,
            cnn_lr0: 0.01,
            cnn_decay_step: 500,
            cnn_iters: 1200,
            cnn_batch: 16,
            ..Self::reference()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "reference" => Ok(Self::reference()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected reference or desk)"))),
        }
    }

    /// Applies a TOML table on top of the profile it names (`reference` if absent).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Self::from_table(table, None)
    }

    /// Like [`from_toml_str`](Self::from_toml_str); `profile` wins over the file's own key.
    pub fn from_table(mut table: toml::Table, profile: Option<&str>) -> Result<Self> {
        let name = match (profile, table.remove("profile")) {
            (Some(p), _) => p.to_string(),
            (None, Some(toml::Value::String(p))) => p,
            (None, Some(other)) => return Err(Error::Config(format!("profile must be a string, got {other}"))),
            (None, None) => "reference".to_string(),
        };
        let base = Self::profile(&name)?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        for (key, value) in table {
            if !merged.contains_key(&key) {
                return Err(Error::Config(format!("unknown key `{key}`")));
            }
            merged.insert(key, value);
        }
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, profile: Option<&str>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Self::from_table(table, profile)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sample_side", self.sample_side),
            ("sift_step", self.sift_step),
            ("sift_scales", self.sift_scales),
            ("gmm_components", self.gmm_components),
            ("color_step", self.color_step),
            ("dd_bins", self.dd_bins),
            ("bow_centers", self.bow_centers),
            ("rcc_codes", self.rcc_codes),
            ("cnn_batch", self.cnn_batch),
            ("lc_repetitions", self.lc_repetitions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.rcc_grid < 2 {
            return Err(Error::Config("rcc_grid must be at least 2".into()));
        }
        if self.color_patch_sides.is_empty() || self.augment_angles.is_empty() {
            return Err(Error::Config("color_patch_sides and augment_angles must be nonempty".into()));
        }
        if self.svm_c_grid.is_empty() || self.svm_c_grid.iter().any(|&c| !(c > 0.0)) || !(self.svm_c_fallback > 0.0) {
            return Err(Error::Config("SVM C values must be positive".into()));
        }
        if self.lc_fractions.iter().any(|&f| !(f > 0.0 && f < 1.0)) {
            return Err(Error::Config("learning-curve fractions must lie in (0, 1)".into()));
        }
        if self.kernel_weights.values().any(|&w| !(w >= 0.0)) {
            return Err(Error::Config("kernel weights must be nonnegative".into()));
        }
        self.net_config(0).validate()
    }

    pub fn net_config(&self, seed: u64) -> NetConfig {
        NetConfig {
            input_side: self.cnn_input_side,
            conv_channels: self.cnn_channels,
            fc1: self.cnn_fc1,
            fc2: self.cnn_fc2,
            classes: crate::corpus::EraLabel::COUNT,
            seed,
        }
    }

    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            lr0: self.cnn_lr0,
            decay: self.cnn_decay,
            decay_step: self.cnn_decay_step,
            total_iters: self.cnn_iters,
            batch: self.cnn_batch,
            momentum: self.cnn_momentum,
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::reference()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_defaults() {
        let c = PipelineConfig::reference();
        assert_eq!((c.sift_step, c.sift_scales, c.color_step), (4, 5, 5));
        assert_eq!((c.gmm_components, c.bow_centers, c.rcc_codes), (128, 512, 128));
        assert_eq!(c.schedule(), TrainSchedule::default());
        assert_eq!(c.net_config(0), NetConfig::default());
        assert_eq!(c.augment_angles.len() * 2, 18);
        assert_eq!((c.lc_fractions.len(), c.lc_repetitions), (9, 20));
        assert_eq!(PipelineConfig::desk().net_config(0), NetConfig::desk());
    }

    #[test]
    fn overrides_and_errors() {
        let c = PipelineConfig::from_toml_str("profile = \"desk\"\nsift_step = 8\nsvm_c_grid = [1.0]\n").unwrap();
        assert_eq!(c.sift_step, 8);
        assert_eq!(c.gmm_components, 16);
        assert_eq!(c.svm_c_grid, vec![1.0]);
        let round = PipelineConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(round, c);
        assert!(matches!(PipelineConfig::from_toml_str("sift_stp = 3"), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::from_toml_str("sift_step = \"x\""), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::from_toml_str("profile = \"huge\""), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::from_toml_str("lc_fractions = [1.0]"), Err(Error::Config(_))));
        let forced = PipelineConfig::from_table("profile = \"reference\"".parse().unwrap(), Some("desk")).unwrap();
        assert_eq!(forced.profile, "desk");
    }
}
