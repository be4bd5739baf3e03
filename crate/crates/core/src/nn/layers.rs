use candle_core::{DType, Tensor, Var};

use super::{kernels, BnMode, Ctx, ParamBuilder};
use crate::error::{shape_err, Result};

/// Dense 2-D convolution with bias.
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        pb: &ParamBuilder,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_c * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: pb.uniform("weight", &[out_c, in_c, kernel, kernel], bound)?,
            bias: pb.zeros("bias", &[out_c])?,
            stride,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dims4()?.1;
        if c != self.in_channels() {
            return shape_err(format!("conv expects {} channels, got {c}", self.in_channels()));
        }
        let k = self.weight.dims()[2];
        // im2col is wasteful for the few-channel spatial attention maps
        let y = if self.stride == 1 && k % 2 == 1 && self.padding == k / 2 && c * self.out_channels() <= 8 {
            kernels::same_conv(x, self.weight.as_tensor())?
        } else {
            x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?
        };
        let bias = self.bias.as_tensor();
        Ok(kernels::channel_affine(&y, &bias.ones_like()?, bias)?)
    }
}

/// Per-channel 3×3 convolution, padding 1, no bias.
pub struct Depthwise3x3 {
    pub weight: Var,
}

impl Depthwise3x3 {
    pub fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.uniform("weight", &[channels, 1, 3, 3], 1.0 / 3.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        super::ops::depthwise3x3(x, self.weight.as_tensor())
    }
}

/// 1×1 convolution computed as a channel matmul.
pub struct Pointwise {
    pub weight: Var,
    pub bias: Var,
}

impl Pointwise {
    pub fn new(pb: &ParamBuilder, in_c: usize, out_c: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.uniform("weight", &[out_c, in_c], 1.0 / (in_c as f64).sqrt())?,
            bias: pb.zeros("bias", &[out_c])?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.in_channels() {
            return shape_err(format!("pointwise expects {} channels, got {c}", self.in_channels()));
        }
        let out = self.out_channels();
        let y = self
            .weight
            .as_tensor()
            .broadcast_matmul(&x.reshape((n, c, h * w))?)?
            .broadcast_add(&self.bias.as_tensor().reshape((1, out, 1))?)?;
        Ok(y.reshape((n, out, h, w))?)
    }
}

pub struct BatchNorm2d {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        let dev = pb.device();
        Ok(Self {
            gamma: pb.ones("gamma", &[channels])?,
            beta: pb.zeros("beta", &[channels])?,
            running_mean: pb.buffer("running_mean", Tensor::zeros(channels, DType::F64, dev)?)?,
            running_var: pb.buffer("running_var", Tensor::ones(channels, DType::F64, dev)?)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.gamma.dims()[0] {
            return shape_err(format!("batch norm expects {} channels, got {c}", self.gamma.dims()[0]));
        }
        match ctx.bn {
            BnMode::Eval => {
                let inv = (self.running_var.as_tensor() + self.eps)?.sqrt()?.recip()?;
                let scale = (self.gamma.as_tensor() * inv)?;
                let shift = (self.beta.as_tensor() - (self.running_mean.as_tensor() * &scale)?)?;
                Ok(kernels::channel_affine(x, &scale, &shift)?)
            }
            BnMode::Train { update_stats } => {
                if update_stats {
                    let count = (n * h * w) as f64;
                    let (mean, var) = kernels::channel_mean_var(x)?;
                    let unbiased = if count > 1.0 { (var * (count / (count - 1.0)))? } else { var };
                    let m = self.momentum;
                    let dt = self.running_mean.dtype();
                    let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.to_dtype(dt)? * m)?)?;
                    let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased.to_dtype(dt)? * m)?)?;
                    self.running_mean.set(&rm)?;
                    self.running_var.set(&rv)?;
                }
                Ok(kernels::batch_norm_train(x, self.gamma.as_tensor(), self.beta.as_tensor(), self.eps)?)
            }
        }
    }
}

pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, in_f: usize, out_f: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.uniform("weight", &[out_f, in_f], 1.0 / (in_f as f64).sqrt())?,
            bias: pb.zeros("bias", &[out_f])?,
        })
    }

    /// `x` is `(n, in)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?.broadcast_add(self.bias.as_tensor())?)
    }
}
