//! Differentiable helpers missing from candle-core.

use candle_core::{DType, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};

/// Logistic function via `tanh`, which stays finite (and has finite
/// gradients) for arbitrarily large logits.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// ReLU whose derivative at exactly zero is zero, so an all-zero stream
/// sends no gradient back through it.
pub fn relu(x: &Tensor) -> Result<Tensor> {
    Ok(super::kernels::rectify_op(x, 0.0)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(super::kernels::rectify_op(x, slope)?)
}

/// Row-major `n_out × n_in` linear interpolation matrix with aligned corners.
pub fn interpolation_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_in * n_out];
    for o in 0..n_out {
        let pos = if n_out > 1 {
            o as f64 * (n_in as f64 - 1.0) / (n_out as f64 - 1.0)
        } else {
            0.0
        };
        let lo = (pos.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        let frac = pos - lo as f64;
        m[o * n_in + lo] += 1.0 - frac;
        if hi != lo {
            m[o * n_in + hi] += frac;
        }
    }
    m
}

/// Bilinear resize of an `(n, c, h, w)` tensor with aligned corners.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    x.dims4()?;
    Ok(super::kernels::resize(x, out_h, out_w)?)
}

/// 2×2 max pooling with stride 2.
pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    x.dims4()?;
    Ok(super::kernels::max_pool2(x)?)
}

pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    resize_bilinear(x, 2 * h, 2 * w)
}

/// Inverted dropout: zero with probability `p`, scale survivors by `1/(1-p)`.
pub fn dropout(x: &Tensor, p: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if p <= 0.0 {
        return Ok(x.clone());
    }
    if p >= 1.0 {
        return Ok(x.zeros_like()?);
    }
    let scale = 1.0 / (1.0 - p);
    let mask: Vec<f32> = (0..x.elem_count())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale as f32 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

fn dw_forward<T: Copy + Default + std::ops::Mul<Output = T> + std::ops::AddAssign>(
    x: &[T],
    k: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
) -> Vec<T> {
    let mut out = vec![T::default(); x.len()];
    let plane = h * w;
    for nc in 0..n * c {
        let taps = &k[(nc % c) * 9..(nc % c) * 9 + 9];
        let src = &x[nc * plane..(nc + 1) * plane];
        let dst = &mut out[nc * plane..(nc + 1) * plane];
        for a in 0..3 {
            for b in 0..3 {
                let tap = taps[a * 3 + b];
                // output column j reads input column j + b - 1
                let (j0, j1) = (usize::from(b == 0), if b == 2 { w - 1 } else { w });
                for i in 0..h {
                    let ii = i + a;
                    if ii == 0 || ii > h {
                        continue;
                    }
                    let row = &src[(ii - 1) * w..ii * w];
                    let out_row = &mut dst[i * w..(i + 1) * w];
                    for j in j0..j1 {
                        out_row[j] += tap * row[j + b - 1];
                    }
                }
            }
        }
    }
    out
}

fn dw_weight_grad<T: Copy + Default + std::ops::Mul<Output = T> + std::ops::AddAssign>(
    x: &[T],
    g: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
) -> Vec<T> {
    let mut out = vec![T::default(); c * 9];
    let plane = h * w;
    for nc in 0..n * c {
        let src = &x[nc * plane..(nc + 1) * plane];
        let grad = &g[nc * plane..(nc + 1) * plane];
        for a in 0..3 {
            for b in 0..3 {
                let (j0, j1) = (usize::from(b == 0), if b == 2 { w - 1 } else { w });
                let mut acc = T::default();
                for i in 0..h {
                    let ii = i + a;
                    if ii == 0 || ii > h {
                        continue;
                    }
                    let row = &src[(ii - 1) * w..ii * w];
                    let grow = &grad[i * w..(i + 1) * w];
                    for j in j0..j1 {
                        acc += grow[j] * row[j + b - 1];
                    }
                }
                out[(nc % c) * 9 + a * 3 + b] += acc;
            }
        }
    }
    out
}

fn contiguous_slice<'a, T: candle_core::WithDType>(
    s: &'a [T],
    l: &candle_core::Layout,
) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("depthwise kernel needs contiguous operands"),
    }
}

/// Depthwise 3×3 correlation with zero padding 1 as a custom op.
struct Depthwise3x3Op;

impl candle_core::CustomOp2 for Depthwise3x3Op {
    fn name(&self) -> &'static str {
        "depthwise3x3"
    }

    fn cpu_fwd(
        &self,
        s1: &candle_core::CpuStorage,
        l1: &candle_core::Layout,
        s2: &candle_core::CpuStorage,
        l2: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let dims = l1.shape().dims4()?;
        let out = match (s1, s2) {
            (S::F32(x), S::F32(k)) => S::F32(dw_forward(contiguous_slice(x, l1)?, contiguous_slice(k, l2)?, dims)),
            (S::F64(x), S::F64(k)) => S::F64(dw_forward(contiguous_slice(x, l1)?, contiguous_slice(k, l2)?, dims)),
            _ => candle_core::bail!("depthwise3x3 supports matching f32 or f64 operands"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        k: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let c = k.dims()[0];
        let rev = Tensor::new(&[8u32, 7, 6, 5, 4, 3, 2, 1, 0], k.device())?;
        let flipped = k.reshape((c, 9))?.index_select(&rev, 1)?.reshape((c, 1, 3, 3))?;
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2(&flipped.contiguous()?, Depthwise3x3Op)?;
        let gk = x.apply_op2_no_bwd(&grad, &DepthwiseWeightGradOp { channels: c })?;
        Ok((Some(gx), Some(gk)))
    }
}

struct DepthwiseWeightGradOp {
    channels: usize,
}

impl candle_core::CustomOp2 for DepthwiseWeightGradOp {
    fn name(&self) -> &'static str {
        "depthwise3x3-weight-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &candle_core::CpuStorage,
        l1: &candle_core::Layout,
        s2: &candle_core::CpuStorage,
        l2: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let dims = l1.shape().dims4()?;
        let out = match (s1, s2) {
            (S::F32(x), S::F32(g)) => S::F32(dw_weight_grad(contiguous_slice(x, l1)?, contiguous_slice(g, l2)?, dims)),
            (S::F64(x), S::F64(g)) => S::F64(dw_weight_grad(contiguous_slice(x, l1)?, contiguous_slice(g, l2)?, dims)),
            _ => candle_core::bail!("depthwise weight gradient supports matching f32 or f64 operands"),
        };
        Ok((out, (self.channels, 1, 3, 3).into()))
    }
}

/// 3×3 depthwise correlation with zero padding 1; `weight` is `(c, 1, 3, 3)`.
pub fn depthwise3x3(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    if weight.dims() != [c, 1, 3, 3] {
        return shape_err(format!("depthwise weight {:?} for {c} channels", weight.dims()));
    }
    if h == 0 || w == 0 {
        return shape_err("depthwise input has an empty spatial extent");
    }
    let weight = weight.to_dtype(x.dtype())?;
    Ok(x.contiguous()?.apply_op2(&weight.contiguous()?, Depthwise3x3Op)?)
}

/// Flattens a tensor to `f64` values.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
