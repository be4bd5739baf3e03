use candle_core::{Tensor, D};

use super::layers::{BatchNorm2d, Conv2d, Depthwise3x3, Linear, Pointwise};
use super::ops::{dropout, relu, sigmoid, upsample2x};
use super::{Ctx, ParamBuilder};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub cbam_reduction: usize,
    pub cbam_spatial_kernel: usize,
}

impl BlockConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            cbam_reduction: 16,
            cbam_spatial_kernel: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("block channels must be at least 1".into()));
        }
        if self.cbam_reduction == 0 {
            return Err(Error::Config("cbam_reduction must be at least 1".into()));
        }
        if self.cbam_spatial_kernel % 2 == 0 {
            return Err(Error::Config("cbam_spatial_kernel must be odd".into()));
        }
        Ok(())
    }
}

/// Depthwise 3×3 followed by pointwise 1×1.
pub struct Dsc {
    pub depthwise: Depthwise3x3,
    pub pointwise: Pointwise,
}

impl Dsc {
    pub fn new(pb: &ParamBuilder, in_c: usize, out_c: usize) -> Result<Self> {
        if in_c == 0 || out_c == 0 {
            return Err(Error::Config("dsc channels must be at least 1".into()));
        }
        Ok(Self {
            depthwise: Depthwise3x3::new(&pb.pp("dw"), in_c)?,
            pointwise: Pointwise::new(&pb.pp("pw"), in_c, out_c)?,
        })
    }

    /// Convolution weights, biases excluded.
    pub fn weight_count(&self) -> usize {
        self.depthwise.weight.elem_count() + self.pointwise.weight.elem_count()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dims4()?.1;
        if c != self.pointwise.in_channels() {
            return shape_err(format!("dsc expects {} channels, got {c}", self.pointwise.in_channels()));
        }
        self.pointwise.forward(&self.depthwise.forward(x)?)
    }
}

/// Two DSC → batch norm → ReLU stages.
pub struct DoubleDsc {
    pub dsc1: Dsc,
    pub bn1: BatchNorm2d,
    pub dsc2: Dsc,
    pub bn2: BatchNorm2d,
}

impl DoubleDsc {
    pub fn new(pb: &ParamBuilder, in_c: usize, out_c: usize) -> Result<Self> {
        Ok(Self {
            dsc1: Dsc::new(&pb.pp("dsc1"), in_c, out_c)?,
            bn1: BatchNorm2d::new(&pb.pp("bn1"), out_c)?,
            dsc2: Dsc::new(&pb.pp("dsc2"), out_c, out_c)?,
            bn2: BatchNorm2d::new(&pb.pp("bn2"), out_c)?,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.dsc2.pointwise.out_channels()
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let h = relu(&self.bn1.forward(&self.dsc1.forward(x)?, ctx)?)?;
        relu(&self.bn2.forward(&self.dsc2.forward(&h)?, ctx)?)
    }
}

/// Attention gates of one CBAM pass: channel `(n, c, 1, 1)`, spatial `(n, 1, h, w)`.
pub struct CbamGates {
    pub channel: Tensor,
    pub spatial: Tensor,
}

/// Channel attention then spatial attention.
pub struct Cbam {
    pub fc1: Linear,
    pub fc2: Linear,
    pub spatial: Conv2d,
}

impl Cbam {
    pub fn new(pb: &ParamBuilder, channels: usize, reduction: usize, kernel: usize) -> Result<Self> {
        if reduction == 0 || channels < reduction {
            return Err(Error::Config(format!(
                "CBAM needs channels ({channels}) >= reduction ({reduction})"
            )));
        }
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("CBAM spatial kernel {kernel} must be odd")));
        }
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Linear::new(&pb.pp("fc1"), channels, hidden)?,
            fc2: Linear::new(&pb.pp("fc2"), hidden, channels)?,
            spatial: Conv2d::new(&pb.pp("spatial"), 2, 1, kernel, 1, kernel / 2)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.fc2.weight.dims()[0]
    }

    fn mlp(&self, v: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&relu(&self.fc1.forward(v)?)?)
    }

    pub fn forward_with_gates(&self, x: &Tensor) -> Result<(Tensor, CbamGates)> {
        let (n, c, _, _) = x.dims4()?;
        if c != self.channels() {
            return shape_err(format!("CBAM expects {} channels, got {c}", self.channels()));
        }
        let avg = x.mean(D::Minus1)?.mean(D::Minus1)?;
        let max = x.max(D::Minus1)?.max(D::Minus1)?;
        let gc = sigmoid(&(self.mlp(&avg)? + self.mlp(&max)?)?)?.reshape((n, c, 1, 1))?;
        let xc = x.broadcast_mul(&gc)?;
        let pooled = Tensor::cat(&[xc.mean_keepdim(1)?, xc.max_keepdim(1)?], 1)?;
        let gs = sigmoid(&self.spatial.forward(&pooled)?)?;
        let out = xc.broadcast_mul(&gs)?;
        Ok((out, CbamGates { channel: gc, spatial: gs }))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_gates(x)?.0)
    }
}

/// 2×2 max-pool then double DSC.
pub struct Down {
    pub conv: DoubleDsc,
}

impl Down {
    pub fn new(pb: &ParamBuilder, in_c: usize, out_c: usize) -> Result<Self> {
        Ok(Self {
            conv: DoubleDsc::new(pb, in_c, out_c)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(format!("max-pool needs even spatial size, got {h}×{w}"));
        }
        self.conv.forward(&super::ops::max_pool2(x)?, ctx)
    }
}

/// Bilinear ×2 upsample, optional dropout, concatenation with the skip, double DSC.
pub struct Up {
    pub conv: DoubleDsc,
    pub dropout_p: f64,
    in_channels: usize,
    skip_channels: usize,
}

impl Up {
    pub fn new(
        pb: &ParamBuilder,
        in_c: usize,
        skip_c: usize,
        out_c: usize,
        dropout_p: f64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::Config(format!("dropout probability {dropout_p} outside [0, 1)")));
        }
        Ok(Self {
            conv: DoubleDsc::new(pb, in_c + skip_c, out_c)?,
            dropout_p,
            in_channels: in_c,
            skip_channels: skip_c,
        })
    }

    pub fn concat_channels(&self) -> usize {
        self.in_channels + self.skip_channels
    }

    /// Concatenated `[skip, upsampled]` map that enters the double DSC.
    pub fn merge(&self, x: &Tensor, skip: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let (_, cx, h, w) = x.dims4()?;
        let (_, cs, hs, ws) = skip.dims4()?;
        if hs != 2 * h || ws != 2 * w {
            return shape_err(format!("skip {hs}×{ws} is not twice {h}×{w}"));
        }
        if cx != self.in_channels || cs != self.skip_channels {
            return shape_err(format!(
                "up block expects {}+{} channels, got {cx}+{cs}",
                self.skip_channels, self.in_channels
            ));
        }
        let mut up = upsample2x(x)?;
        if self.dropout_p > 0.0 {
            if let Some(rng) = ctx.rng() {
                up = dropout(&up, self.dropout_p, rng)?;
            }
        }
        Ok(Tensor::cat(&[skip, &up], 1)?)
    }

    pub fn forward(&self, x: &Tensor, skip: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let merged = self.merge(x, skip, ctx)?;
        self.conv.forward(&merged, ctx)
    }
}
