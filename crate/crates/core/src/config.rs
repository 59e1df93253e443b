//! Hyperparameters, loadable from TOML. Every section has defaults, so a
//! config file only needs the keys it changes.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Inverse squared distance, normalized.
    InterpNN,
    /// Uniform over the neighbors found.
    #[serde(rename = "ew")]
    EqualWeight,
    /// Learned per-rank logits, softmax-normalized.
    #[serde(rename = "lw")]
    LearnedWeight,
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "interpnn" => Ok(Self::InterpNN),
            "ew" => Ok(Self::EqualWeight),
            "lw" => Ok(Self::LearnedWeight),
            _ => Err(Error::Config(format!("unknown weighting {s:?} (interpnn, ew, lw)"))),
        }
    }
}

impl std::fmt::Display for Weighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::InterpNN => "interpnn",
            Self::EqualWeight => "ew",
            Self::LearnedWeight => "lw",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaleConfig {
    pub scales: Vec<usize>,
    pub knn_k: usize,
    pub weighting: Weighting,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        Self {
            scales: vec![1, 4, 16],
            knn_k: 8,
            weighting: Weighting::InterpNN,
        }
    }
}

impl ScaleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales[0] < 1 {
            return Err(Error::Config("scales must be non-empty and start at >= 1".into()));
        }
        if self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("scales {:?} are not strictly increasing", self.scales)));
        }
        if self.knn_k < 1 {
            return Err(Error::Config("knn_k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Parses "1,4,16" (brackets and spaces tolerated).
pub fn parse_scales(s: &str) -> Result<Vec<usize>> {
    s.trim_matches(|c| c == '[' || c == ']' || c == '{' || c == '}')
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad scale {t:?} in {s:?}")))
        })
        .collect()
}

/// Architecture. Everything here shapes the parameter set, so it is hashed
/// into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub scale: ScaleConfig,
    /// F1.
    pub local_width: usize,
    /// F2.
    pub cell_width: usize,
    pub feature_transform: bool,
    pub transform_hidden: usize,
    pub attention: bool,
    pub attention_ff: usize,
    pub head_hidden: Vec<usize>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scale: ScaleConfig::default(),
            local_width: 64,
            cell_width: 128,
            feature_transform: true,
            transform_hidden: 32,
            attention: true,
            attention_ff: 512,
            head_hidden: vec![512, 256, 128, 64],
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Width of one per-scale query feature row.
    pub fn feature_width(&self) -> usize {
        3 + 3 + self.local_width + self.cell_width
    }

    pub fn head_input(&self) -> usize {
        self.scale.scales.len() * self.feature_width()
    }

    pub fn validate(&self) -> Result<()> {
        self.scale.validate()?;
        if self.local_width == 0 || self.cell_width == 0 || self.attention_ff == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.head_hidden.len() != 4 || self.head_hidden.contains(&0) {
            return Err(Error::Config("head_hidden must list four positive widths".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 || self.ln_eps <= 0.0 {
            return Err(Error::Config("bad normalization constants".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_mag: f64,
    pub lambda_sgn: f64,
    pub lambda_reg: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_mag: 5.0,
            lambda_sgn: 2.0,
            lambda_reg: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseLevel {
    No,
    Med,
    Max,
}

impl NoiseLevel {
    /// Normal-displacement standard deviation in normalized units.
    pub fn sigma(self) -> f64 {
        match self {
            Self::No => 0.0,
            Self::Med => 0.005,
            Self::Max => 0.015,
        }
    }
}

impl FromStr for NoiseLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "no" | "none" => Ok(Self::No),
            "med" => Ok(Self::Med),
            "max" => Ok(Self::Max),
            _ => Err(Error::Config(format!("unknown noise level {s:?} (no, med, max)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_shapes: usize,
    pub input_points: usize,
    /// Surface-band queries generated per shape.
    pub surface_queries: usize,
    /// Uniform-in-cube queries generated per shape.
    pub uniform_queries: usize,
    /// Queries drawn from the generated pool for each training step.
    pub queries_per_step: usize,
    pub offset_range: f64,
    pub noise: NoiseLevel,
    pub augment: bool,
    /// Samples of each shape per epoch. Every copy gets its own scan, so a
    /// small corpus can be trained at a larger corpus' epoch length.
    pub repeats: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_shapes: 50,
            input_points: 6000,
            surface_queries: 1000,
            uniform_queries: 1000,
            queries_per_step: 1000,
            offset_range: 0.02,
            noise: NoiseLevel::No,
            augment: true,
            repeats: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_halving_epochs: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Save a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 4,
            learning_rate: 7.5e-4,
            lr_halving_epochs: 100.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructionConfig {
    pub resolution: usize,
    /// Box-filter edge length in voxels.
    pub epsilon: usize,
    pub t_update: i64,
    /// Chebyshev dilation radius of the near-surface mask, in voxels.
    pub dilation: usize,
    /// Magnitude given to propagated voxels, in voxel widths.
    pub fill_voxels: f64,
    /// Voxels per evaluation chunk.
    pub chunk_size: usize,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            resolution: 128,
            epsilon: 5,
            t_update: 13,
            dilation: 3,
            fill_voxels: 2.0,
            chunk_size: 8192,
        }
    }
}

impl ReconstructionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(Error::Config("resolution must be >= 2".into()));
        }
        if self.epsilon < 3 || self.epsilon.is_multiple_of(2) {
            return Err(Error::Config("epsilon must be odd and >= 3".into()));
        }
        if self.t_update < 0 || self.t_update >= (self.epsilon as i64).pow(3) {
            return Err(Error::Config("t_update must lie in [0, epsilon^3)".into()));
        }
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Surface samples per mesh for the metrics.
    pub samples: usize,
    /// Marching-cubes resolution of reference meshes of synthetic shapes.
    pub reference_resolution: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            reference_resolution: 128,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub reconstruction: ReconstructionConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Parse {
                path: path.to_path_buf(),
                msg,
            },
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.reconstruction.validate()?;
        if self.train.batch_size == 0 || self.train.lr_halving_epochs <= 0.0 {
            return Err(Error::Config("batch_size and lr_halving_epochs must be positive".into()));
        }
        if self.data.input_points == 0 || self.data.num_shapes == 0 || self.data.repeats == 0 {
            return Err(Error::Config("data counts must be positive".into()));
        }
        if self.data.queries_per_step > self.data.surface_queries + self.data.uniform_queries {
            return Err(Error::Config("queries_per_step exceeds the generated query pool".into()));
        }
        Ok(())
    }
}
