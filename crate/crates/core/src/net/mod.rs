//! Receptive-field-regularized residual regressor and domain discriminator.

mod checkpoint;
pub mod layers;
mod model;
pub mod params;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, ModelCheckpoint, Provenance, Stage};
pub use model::{build_model, Discriminator, DiscriminatorCache, RfResNet, TrainForward};
pub use params::{Grads, ParamKind, ParamStore};
pub use tensor::Tensor;

use serde::{Deserialize, Serialize};

use crate::data::NUM_FEATURES;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    /// (frequency, time) kernel extent.
    pub kernel: [usize; 2],
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub blocks: usize,
    pub channels: usize,
    pub kernel: [usize; 2],
    /// Stride of the first convolution of the first block.
    pub stride: usize,
    /// Indices of blocks followed by a max-pool.
    #[serde(default)]
    pub pool_after: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfResNetConfig {
    /// Expected input shape (bands, frames).
    pub input_shape: [usize; 2],
    pub stem: ConvSpec,
    #[serde(default)]
    pub stem_pool: Option<PoolSpec>,
    pub stages: Vec<StageConfig>,
    pub pool: PoolSpec,
    pub outputs: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

/// Block counts of the three stages.
pub const STAGE_BLOCKS: [usize; 3] = [3, 1, 1];

impl Default for RfResNetConfig {
    fn default() -> Self {
        Self {
            input_shape: [149, 469],
            stem: ConvSpec {
                channels: 64,
                kernel: [3, 3],
                stride: 1,
            },
            stem_pool: None,
            stages: vec![
                StageConfig {
                    blocks: 3,
                    channels: 128,
                    kernel: [3, 3],
                    stride: 1,
                    pool_after: vec![0, 1],
                },
                StageConfig {
                    blocks: 1,
                    channels: 256,
                    kernel: [3, 3],
                    stride: 1,
                    pool_after: vec![],
                },
                StageConfig {
                    blocks: 1,
                    channels: 512,
                    kernel: [1, 1],
                    stride: 1,
                    pool_after: vec![],
                },
            ],
            pool: PoolSpec { kernel: 2, stride: 2 },
            outputs: NUM_FEATURES,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl RfResNetConfig {
    /// A small instance with the same block structure, for desk-scale runs
    /// and gradient checks.
    pub fn tiny(input_shape: [usize; 2], width: usize) -> Self {
        let mut c = Self::default();
        c.input_shape = input_shape;
        c.stem.channels = width;
        c.stages[0].channels = width;
        c.stages[1].channels = 2 * width;
        c.stages[2].channels = 2 * width;
        c
    }

    /// A conventional residual network with the same stage/block layout
    /// but full-size kernels, a strided 7x7 stem with pooling, strided
    /// downsampling and 3x3 kernels in the last stage. Used only as a
    /// receptive-field comparison.
    pub fn reference_resnet() -> Self {
        let mut c = Self::default();
        c.stem = ConvSpec {
            channels: 64,
            kernel: [7, 7],
            stride: 2,
        };
        c.stem_pool = Some(PoolSpec { kernel: 3, stride: 2 });
        c.stages[0].channels = 64;
        c.stages[0].pool_after.clear();
        c.stages[1].channels = 128;
        c.stages[1].stride = 2;
        c.stages[2].channels = 256;
        c.stages[2].kernel = [3, 3];
        c.stages[2].stride = 2;
        c
    }

    pub fn embedding_width(&self) -> usize {
        self.stages.last().map_or(self.stem.channels, |s| s.channels)
    }

    /// Structural checks that apply to any residual config.
    pub fn validate_structure(&self) -> Result<()> {
        let check_kernel = |k: [usize; 2], what: &str| {
            if k.iter().any(|&v| v == 0 || v % 2 == 0) {
                Err(Error::Config(format!("{what} kernel {k:?} must be odd and positive")))
            } else {
                Ok(())
            }
        };
        check_kernel(self.stem.kernel, "stem")?;
        if self.stem.channels == 0 || self.stem.stride == 0 {
            return Err(Error::Config("stem channels and stride must be positive".into()));
        }
        if self.pool.kernel == 0 || self.pool.stride == 0 {
            return Err(Error::Config("pool kernel and stride must be positive".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            check_kernel(s.kernel, &format!("stage {}", i + 1))?;
            if s.channels == 0 || s.stride == 0 || s.blocks == 0 {
                return Err(Error::Config(format!("stage {} needs positive blocks/channels/stride", i + 1)));
            }
            if let Some(&b) = s.pool_after.iter().find(|&&b| b >= s.blocks) {
                return Err(Error::Config(format!("stage {} pools after missing block {b}", i + 1)));
            }
        }
        if !(self.bn_eps > 0.0 && (0.0..=1.0).contains(&self.bn_momentum)) {
            return Err(Error::Config("bn_eps must be positive and bn_momentum in [0,1]".into()));
        }
        let (h, w) = self.spatial_output()?;
        if h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "input {:?} is too small for this network",
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Full validation, including the receptive-field-regularized layout:
    /// three stages with 3, 1 and 1 blocks, 1x1 kernels in the last stage
    /// and seven outputs.
    pub fn validate(&self) -> Result<()> {
        let blocks: Vec<usize> = self.stages.iter().map(|s| s.blocks).collect();
        if blocks != STAGE_BLOCKS {
            return Err(Error::Config(format!(
                "stage block counts must be {STAGE_BLOCKS:?}, got {blocks:?}"
            )));
        }
        if self.stages[2].kernel != [1, 1] {
            return Err(Error::Config(format!(
                "final stage must use 1x1 kernels, got {:?}",
                self.stages[2].kernel
            )));
        }
        if self.outputs != NUM_FEATURES {
            return Err(Error::Config(format!("output width must be {NUM_FEATURES}, got {}", self.outputs)));
        }
        self.validate_structure()
    }

    /// Spatial size after the last stage for `input_shape`.
    pub fn spatial_output(&self) -> Result<(usize, usize)> {
        let mut dims = (self.input_shape[0], self.input_shape[1]);
        let conv = |d: (usize, usize), k: [usize; 2], s: usize| {
            (
                (d.0 + 2 * (k[0] / 2) - k[0]) / s + 1,
                (d.1 + 2 * (k[1] / 2) - k[1]) / s + 1,
            )
        };
        let pool = |d: (usize, usize), p: PoolSpec| -> Result<(usize, usize)> {
            if d.0 < p.kernel || d.1 < p.kernel {
                return Err(Error::Config(format!("feature map {d:?} too small for {}x{} pooling", p.kernel, p.kernel)));
            }
            Ok(((d.0 - p.kernel) / p.stride + 1, (d.1 - p.kernel) / p.stride + 1))
        };
        if dims.0 == 0 || dims.1 == 0 {
            return Err(Error::Config("input shape must be positive".into()));
        }
        dims = conv(dims, self.stem.kernel, self.stem.stride);
        if let Some(p) = self.stem_pool {
            dims = pool(dims, p)?;
        }
        for s in &self.stages {
            for b in 0..s.blocks {
                let stride = if b == 0 { s.stride } else { 1 };
                dims = conv(dims, s.kernel, stride);
                dims = conv(dims, s.kernel, 1);
                if s.pool_after.contains(&b) {
                    dims = pool(dims, self.pool)?;
                }
            }
        }
        Ok(dims)
    }

    /// Main-path layers as (kernel, stride) pairs in order, for
    /// receptive-field composition.
    pub fn rf_layers(&self) -> Vec<([usize; 2], usize)> {
        let mut layers = vec![(self.stem.kernel, self.stem.stride)];
        if let Some(p) = self.stem_pool {
            layers.push(([p.kernel, p.kernel], p.stride));
        }
        for s in &self.stages {
            for b in 0..s.blocks {
                layers.push((s.kernel, if b == 0 { s.stride } else { 1 }));
                layers.push((s.kernel, 1));
                if s.pool_after.contains(&b) {
                    layers.push(([self.pool.kernel, self.pool.kernel], self.pool.stride));
                }
            }
        }
        layers
    }
}

/// Theoretical receptive field in input pixels along (frequency, time).
pub fn receptive_field(config: &RfResNetConfig) -> (usize, usize) {
    receptive_field_of(&config.rf_layers())
}

/// Compose `r <- r + (k - 1) * j`, `j <- j * s` over a layer stack.
pub fn receptive_field_of(layers: &[([usize; 2], usize)]) -> (usize, usize) {
    let mut r = [1usize, 1];
    let mut jump = 1usize;
    for &(k, s) in layers {
        for axis in 0..2 {
            r[axis] += (k[axis] - 1) * jump;
        }
        jump *= s;
    }
    (r[0], r[1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub input: usize,
    pub hidden: Vec<usize>,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            input: 512,
            hidden: vec![128],
        }
    }
}

impl DiscriminatorConfig {
    pub fn for_model(model: &RfResNetConfig) -> Self {
        Self {
            input: model.embedding_width(),
            hidden: vec![(model.embedding_width() / 4).max(4)],
        }
    }
}
