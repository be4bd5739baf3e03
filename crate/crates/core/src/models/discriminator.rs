use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::ops::{leaky_relu, sigmoid};
use crate::nn::{BatchNorm2d, Cbam, Conv2d, Ctx, ParamBuilder, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub stage_widths: [usize; 4],
    pub leaky_slope: f64,
    pub cbam_reduction: usize,
    pub cbam_spatial_kernel: usize,
    pub input_size: usize,
    pub width_scale: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            in_channels: 24,
            stage_widths: [64, 128, 256, 512],
            leaky_slope: 0.2,
            cbam_reduction: 16,
            cbam_spatial_kernel: 7,
            input_size: 64,
            width_scale: 1.0,
        }
    }
}

impl DiscriminatorConfig {
    pub fn with_width_scale(mut self, s: f64) -> Self {
        self.width_scale = s;
        self
    }

    pub fn scaled_widths(&self) -> [usize; 4] {
        self.stage_widths
            .map(|w| ((w as f64 * self.width_scale).round() as usize).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_size != 64 {
            return bad(format!("discriminator input_size must be 64, got {}", self.input_size));
        }
        if self.in_channels == 0 {
            return bad("discriminator in_channels must be positive".into());
        }
        if !(self.width_scale.is_finite() && self.width_scale > 0.0) {
            return bad(format!("width_scale must be positive, got {}", self.width_scale));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky_slope must lie in [0, 1), got {}", self.leaky_slope));
        }
        if let Some(w) = self.scaled_widths().into_iter().find(|&w| w < self.cbam_reduction) {
            return bad(format!("scaled stage width {w} is below cbam_reduction {}", self.cbam_reduction));
        }
        if self.cbam_spatial_kernel % 2 == 0 {
            return bad("cbam_spatial_kernel must be odd".into());
        }
        Ok(())
    }
}

/// Strided 4×4 convolution and a stride-1 3×3 convolution, each followed
/// by (batch norm), leaky ReLU and CBAM.
pub struct Stage {
    pub down: Conv2d,
    pub down_bn: Option<BatchNorm2d>,
    pub down_cbam: Cbam,
    pub conv: Conv2d,
    pub conv_bn: BatchNorm2d,
    pub conv_cbam: Cbam,
    slope: f64,
}

impl Stage {
    fn new(pb: &ParamBuilder, in_c: usize, out_c: usize, first: bool, cfg: &DiscriminatorConfig) -> Result<Self> {
        let (r, k) = (cfg.cbam_reduction, cfg.cbam_spatial_kernel);
        Ok(Self {
            down: Conv2d::new(&pb.pp("down"), in_c, out_c, 4, 2, 1)?,
            down_bn: if first {
                None
            } else {
                Some(BatchNorm2d::new(&pb.pp("down_bn"), out_c)?)
            },
            down_cbam: Cbam::new(&pb.pp("down_cbam"), out_c, r, k)?,
            conv: Conv2d::new(&pb.pp("conv"), out_c, out_c, 3, 1, 1)?,
            conv_bn: BatchNorm2d::new(&pb.pp("conv_bn"), out_c)?,
            conv_cbam: Cbam::new(&pb.pp("conv_cbam"), out_c, r, k)?,
            slope: cfg.leaky_slope,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let mut h = self.down.forward(x)?;
        if let Some(bn) = &self.down_bn {
            h = bn.forward(&h, ctx)?;
        }
        h = self.down_cbam.forward(&leaky_relu(&h, self.slope)?)?;
        let h = self.conv_bn.forward(&self.conv.forward(&h)?, ctx)?;
        self.conv_cbam.forward(&leaky_relu(&h, self.slope)?)
    }
}

/// Attention-augmented PatchGAN scoring `(input hour, target hour)` pairs.
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    pub store: ParamStore,
    pub stages: Vec<Stage>,
    pub head: Conv2d,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(dtype);
        let pb = store.builder(seed);
        let w = cfg.scaled_widths();
        let mut stages = Vec::with_capacity(4);
        let mut in_c = cfg.in_channels;
        for (k, &out_c) in w.iter().enumerate() {
            stages.push(Stage::new(&pb.pp(format!("stage{k}")), in_c, out_c, k == 0, &cfg)?);
            in_c = out_c;
        }
        let head = Conv2d::new(&pb.pp("head"), w[3], 1, 3, 1, 1)?;
        Ok(Self {
            cfg,
            store,
            stages,
            head,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn cbam_count(&self) -> usize {
        2 * self.stages.len()
    }

    /// Patch probabilities `(n, 4, 4)` for the channel-concatenated pair.
    pub fn forward(&self, x: &Tensor, y: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (n, cx, h, w) = x.dims4()?;
        let (ny, cy, hy, wy) = y.dims4()?;
        if (n, h, w) != (ny, hy, wy) || cx + cy != self.cfg.in_channels {
            return shape_err(format!(
                "discriminator pair {:?} + {:?} does not form {} channels",
                x.dims(),
                y.dims(),
                self.cfg.in_channels
            ));
        }
        if h != self.cfg.input_size || w != self.cfg.input_size {
            return shape_err(format!("discriminator expects {0}×{0} input, got {h}×{w}", self.cfg.input_size));
        }
        let mut hdn = Tensor::cat(&[x.to_dtype(self.dtype())?, y.to_dtype(self.dtype())?], 1)?;
        for stage in &self.stages {
            hdn = stage.forward(&hdn, ctx)?;
        }
        let logits = self.head.forward(&hdn)?;
        let (_, _, sh, sw) = logits.dims4()?;
        sigmoid(&logits.reshape((n, sh, sw))?)
    }
}

/// Receptive-field side length of a stack of `(kernel, stride)` convolutions.
pub fn receptive_field(layers: &[(usize, usize)]) -> usize {
    layers
        .iter()
        .rev()
        .fold(1, |rf, &(k, s)| (rf - 1) * s + k)
}

/// The discriminator's convolution stack as `(kernel, stride)` pairs.
pub fn conv_stack() -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for _ in 0..4 {
        v.push((4, 2));
        v.push((3, 1));
    }
    v.push((3, 1));
    v
}
