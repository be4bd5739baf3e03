//! Fused CPU kernels with hand-written backward passes for the hottest
//! elementwise and normalization steps.

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor, WithDType};
use num_traits::Float;

type CResult<T> = candle_core::Result<T>;

fn slice<'a, T: WithDType>(s: &'a [T], l: &Layout) -> CResult<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => bail!("fused kernel needs contiguous operands"),
    }
}

/// `(n, c, inner)` view of an `(n, c, ...)` layout.
fn nci(l: &Layout) -> CResult<(usize, usize, usize)> {
    let d = l.shape().dims();
    if d.len() < 2 {
        bail!("expected at least (n, c) dimensions, got {d:?}");
    }
    Ok((d[0], d[1], d[2..].iter().product()))
}

macro_rules! dispatch1 {
    ($s:expr, $l:expr, |$x:ident| $body:expr) => {
        match $s {
            CpuStorage::F32(v) => {
                let $x = slice(v, $l)?;
                CpuStorage::F32($body)
            }
            CpuStorage::F64(v) => {
                let $x = slice(v, $l)?;
                CpuStorage::F64($body)
            }
            _ => bail!("fused kernels support f32 and f64"),
        }
    };
}

macro_rules! dispatch2 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(u), CpuStorage::F32(v)) => {
                let ($a, $b) = (slice(u, $l1)?, slice(v, $l2)?);
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(u), CpuStorage::F64(v)) => {
                let ($a, $b) = (slice(u, $l1)?, slice(v, $l2)?);
                CpuStorage::F64($body)
            }
            _ => bail!("fused kernels need matching f32 or f64 operands"),
        }
    };
}

macro_rules! dispatch3 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $s3:expr, $l3:expr, |$a:ident, $b:ident, $c:ident| $body:expr) => {
        match ($s1, $s2, $s3) {
            (CpuStorage::F32(u), CpuStorage::F32(v), CpuStorage::F32(w)) => {
                let ($a, $b, $c) = (slice(u, $l1)?, slice(v, $l2)?, slice(w, $l3)?);
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(u), CpuStorage::F64(v), CpuStorage::F64(w)) => {
                let ($a, $b, $c) = (slice(u, $l1)?, slice(v, $l2)?, slice(w, $l3)?);
                CpuStorage::F64($body)
            }
            _ => bail!("fused kernels need matching f32 or f64 operands"),
        }
    };
}

// ---------------------------------------------------------------- (leaky) ReLU

fn rectify<T: Float>(x: &[T], slope: f64) -> Vec<T> {
    let s = T::from(slope).expect("slope");
    x.iter().map(|&v| if v > T::zero() { v } else { v * s }).collect()
}

fn rectify_grad<T: Float>(g: &[T], x: &[T], slope: f64) -> Vec<T> {
    let s = T::from(slope).expect("slope");
    g.iter()
        .zip(x)
        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { gv * s })
        .collect()
}

/// `x` for `x > 0`, else `slope · x`; the derivative at exactly 0 is `slope`.
struct Rectify {
    slope: f64,
}

impl CustomOp1 for Rectify {
    fn name(&self) -> &'static str {
        "rectify"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let slope = self.slope;
        Ok((dispatch1!(s, l, |x| rectify(x, slope)), l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op2_no_bwd(arg, &RectifyGrad { slope: self.slope })?))
    }
}

struct RectifyGrad {
    slope: f64,
}

impl CustomOp2 for RectifyGrad {
    fn name(&self) -> &'static str {
        "rectify-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let slope = self.slope;
        Ok((dispatch2!(s1, l1, s2, l2, |g, x| rectify_grad(g, x, slope)), l1.shape().clone()))
    }
}

pub fn rectify_op(x: &Tensor, slope: f64) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Rectify { slope })
}

// ---------------------------------------------------------------- batch norm

/// Per-channel mean and biased variance, accumulated in f64.
fn channel_stats<T: Float>(x: &[T], (n, c, k): (usize, usize, usize)) -> (Vec<f64>, Vec<f64>) {
    let count = (n * k) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let row = &x[(b * c + ch) * k..(b * c + ch + 1) * k];
            mean[ch] += row.iter().map(|v| v.to_f64().unwrap_or(0.0)).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for b in 0..n {
        for ch in 0..c {
            let row = &x[(b * c + ch) * k..(b * c + ch + 1) * k];
            let m = mean[ch];
            var[ch] += row
                .iter()
                .map(|v| {
                    let d = v.to_f64().unwrap_or(0.0) - m;
                    d * d
                })
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

fn bn_forward<T: Float>(x: &[T], gamma: &[T], beta: &[T], dims: (usize, usize, usize), eps: f64) -> Vec<T> {
    let (n, c, k) = dims;
    let (mean, var) = channel_stats(x, dims);
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + eps).sqrt();
            let scale = T::from(gamma[ch].to_f64().unwrap_or(0.0) * inv).expect("finite");
            let shift = T::from(beta[ch].to_f64().unwrap_or(0.0) - mean[ch] * inv * gamma[ch].to_f64().unwrap_or(0.0))
                .expect("finite");
            let o = (b * c + ch) * k;
            for i in 0..k {
                out[o + i] = x[o + i] * scale + shift;
            }
        }
    }
    out
}

/// Returns `[Σ dy·x̂ per channel, Σ dy per channel]` as a `(2, c)` buffer.
fn bn_param_grad<T: Float>(x: &[T], g: &[T], dims: (usize, usize, usize), eps: f64) -> Vec<T> {
    let (n, c, k) = dims;
    let (mean, var) = channel_stats(x, dims);
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + eps).sqrt();
            let o = (b * c + ch) * k;
            for i in 0..k {
                let gv = g[o + i].to_f64().unwrap_or(0.0);
                let xh = (x[o + i].to_f64().unwrap_or(0.0) - mean[ch]) * inv;
                dgamma[ch] += gv * xh;
                dbeta[ch] += gv;
            }
        }
    }
    dgamma
        .into_iter()
        .chain(dbeta)
        .map(|v| T::from(v).expect("finite"))
        .collect()
}

fn bn_input_grad<T: Float>(x: &[T], g: &[T], gamma: &[T], dims: (usize, usize, usize), eps: f64) -> Vec<T> {
    let (n, c, k) = dims;
    let m = (n * k) as f64;
    let (mean, var) = channel_stats(x, dims);
    let pg = bn_param_grad(x, g, dims, eps);
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + eps).sqrt();
            let sum_gxh = pg[ch].to_f64().unwrap_or(0.0);
            let sum_g = pg[c + ch].to_f64().unwrap_or(0.0);
            let coef = gamma[ch].to_f64().unwrap_or(0.0) * inv / m;
            let o = (b * c + ch) * k;
            for i in 0..k {
                let xh = (x[o + i].to_f64().unwrap_or(0.0) - mean[ch]) * inv;
                let gv = g[o + i].to_f64().unwrap_or(0.0);
                out[o + i] = T::from(coef * (m * gv - sum_g - xh * sum_gxh)).expect("finite");
            }
        }
    }
    out
}

/// Batch-statistics normalization followed by the per-channel affine map.
struct BatchNormTrain {
    eps: f64,
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let dims = nci(l1)?;
        let eps = self.eps;
        Ok((
            dispatch3!(s1, l1, s2, l2, s3, l3, |x, g, b| bn_forward(x, g, b, dims, eps)),
            l1.shape().clone(),
        ))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let pg = x.apply_op2_no_bwd(&grad, &BnParamGrad { eps: self.eps })?;
        let dx = x.apply_op3_no_bwd(&grad, gamma, &BnInputGrad { eps: self.eps })?;
        Ok((Some(dx), Some(pg.get(0)?), Some(pg.get(1)?)))
    }
}

struct BnParamGrad {
    eps: f64,
}

impl CustomOp2 for BnParamGrad {
    fn name(&self) -> &'static str {
        "batch-norm-param-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let dims = nci(l1)?;
        let eps = self.eps;
        Ok((dispatch2!(s1, l1, s2, l2, |x, g| bn_param_grad(x, g, dims, eps)), (2, dims.1).into()))
    }
}

struct BnInputGrad {
    eps: f64,
}

impl CustomOp3 for BnInputGrad {
    fn name(&self) -> &'static str {
        "batch-norm-input-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let dims = nci(l1)?;
        let eps = self.eps;
        Ok((
            dispatch3!(s1, l1, s2, l2, s3, l3, |x, g, gm| bn_input_grad(x, g, gm, dims, eps)),
            l1.shape().clone(),
        ))
    }
}

fn stats_buffer<T: Float>(x: &[T], dims: (usize, usize, usize)) -> Vec<T> {
    let (m, v) = channel_stats(x, dims);
    m.into_iter().chain(v).map(|f| T::from(f).expect("finite")).collect()
}

struct ChannelStats;

impl CustomOp1 for ChannelStats {
    fn name(&self) -> &'static str {
        "channel-stats"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let dims = nci(l)?;
        let out = dispatch1!(s, l, |x| stats_buffer(x, dims));
        Ok((out, (2, dims.1).into()))
    }
}

/// Normalizes `(n, c, ...)` with batch statistics and applies `gamma`, `beta` (`(c,)` each).
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    x.contiguous()?
        .apply_op3(&gamma.contiguous()?, &beta.contiguous()?, BatchNormTrain { eps })
}

/// Detached per-channel `(mean, biased variance)`, each `(c,)`.
pub fn channel_mean_var(x: &Tensor) -> candle_core::Result<(Tensor, Tensor)> {
    let s = x.detach().contiguous()?.apply_op1_no_bwd(&ChannelStats)?;
    Ok((s.get(0)?, s.get(1)?))
}

// ---------------------------------------------------------------- channel affine

fn affine<T: Float>(x: &[T], a: &[T], b: &[T], (n, c, k): (usize, usize, usize)) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for nc in 0..n * c {
        let (av, bv) = (a[nc % c], b[nc % c]);
        for i in nc * k..(nc + 1) * k {
            out[i] = x[i] * av + bv;
        }
    }
    out
}

/// `[Σ g·x, Σ g]` per channel.
fn affine_param_grad<T: Float>(x: &[T], g: &[T], (n, c, k): (usize, usize, usize)) -> Vec<T> {
    let mut acc = vec![0.0f64; 2 * c];
    for nc in 0..n * c {
        let ch = nc % c;
        for i in nc * k..(nc + 1) * k {
            let gv = g[i].to_f64().unwrap_or(0.0);
            acc[ch] += gv * x[i].to_f64().unwrap_or(0.0);
            acc[c + ch] += gv;
        }
    }
    acc.into_iter().map(|v| T::from(v).expect("finite")).collect()
}

/// `x · a[c] + b[c]` over `(n, c, ...)`.
struct ChannelAffine;

impl CustomOp3 for ChannelAffine {
    fn name(&self) -> &'static str {
        "channel-affine"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let dims = nci(l1)?;
        Ok((dispatch3!(s1, l1, s2, l2, s3, l3, |x, a, b| affine(x, a, b, dims)), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        a: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dx = grad.apply_op3_no_bwd(a, &b.zeros_like()?, &ChannelAffine)?;
        let pg = x.apply_op2_no_bwd(&grad, &AffineParamGrad)?;
        Ok((Some(dx), Some(pg.get(0)?), Some(pg.get(1)?)))
    }
}

struct AffineParamGrad;

impl CustomOp2 for AffineParamGrad {
    fn name(&self) -> &'static str {
        "channel-affine-param-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let dims = nci(l1)?;
        Ok((dispatch2!(s1, l1, s2, l2, |x, g| affine_param_grad(x, g, dims)), (2, dims.1).into()))
    }
}

/// Per-channel `x · scale + shift`; `scale` and `shift` are `(c,)`.
pub fn channel_affine(x: &Tensor, scale: &Tensor, shift: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?
        .apply_op3(&scale.contiguous()?, &shift.contiguous()?, ChannelAffine)
}

// ---------------------------------------------------------------- bilinear resize

/// Per output index: `(lo, hi, frac)` with aligned corners.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let pos = if n_out > 1 {
                o as f64 * (n_in as f64 - 1.0) / (n_out as f64 - 1.0)
            } else {
                0.0
            };
            let lo = (pos.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

fn dims4(l: &Layout) -> CResult<(usize, usize, usize, usize)> {
    match *l.shape().dims() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref d => bail!("expected (n, c, h, w), got {d:?}"),
    }
}

fn resize_fwd<T: Float>(x: &[T], (n, c, h, w): (usize, usize, usize, usize), oh: usize, ow: usize) -> Vec<T> {
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for nc in 0..n * c {
        let src = &x[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = |y: usize, xx: usize| src[y * w + xx].to_f64().unwrap_or(0.0);
                let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                dst[oy * ow + ox] = T::from(top * (1.0 - fy) + bot * fy).expect("finite");
            }
        }
    }
    out
}

fn resize_bwd<T: Float>(g: &[T], (n, c, oh, ow): (usize, usize, usize, usize), h: usize, w: usize) -> Vec<T> {
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let mut out = vec![T::zero(); n * c * h * w];
    let mut acc = vec![0.0f64; h * w];
    for nc in 0..n * c {
        acc.iter_mut().for_each(|a| *a = 0.0);
        let src = &g[nc * oh * ow..(nc + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let gv = src[oy * ow + ox].to_f64().unwrap_or(0.0);
                acc[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                acc[y0 * w + x1] += gv * (1.0 - fy) * fx;
                acc[y1 * w + x0] += gv * fy * (1.0 - fx);
                acc[y1 * w + x1] += gv * fy * fx;
            }
        }
        for (o, a) in out[nc * h * w..(nc + 1) * h * w].iter_mut().zip(&acc) {
            *o = T::from(*a).expect("finite");
        }
    }
    out
}

struct Resize {
    out_h: usize,
    out_w: usize,
}

impl CustomOp1 for Resize {
    fn name(&self) -> &'static str {
        "bilinear-resize"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let d = dims4(l)?;
        let (oh, ow) = (self.out_h, self.out_w);
        Ok((dispatch1!(s, l, |x| resize_fwd(x, d, oh, ow)), (d.0, d.1, oh, ow).into()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let (_, _, h, w) = arg.dims4()?;
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&ResizeGrad { h, w })?))
    }
}

struct ResizeGrad {
    h: usize,
    w: usize,
}

impl CustomOp1 for ResizeGrad {
    fn name(&self) -> &'static str {
        "bilinear-resize-grad"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let d = dims4(l)?;
        let (h, w) = (self.h, self.w);
        Ok((dispatch1!(s, l, |g| resize_bwd(g, d, h, w)), (d.0, d.1, h, w).into()))
    }
}

pub fn resize(x: &Tensor, out_h: usize, out_w: usize) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Resize { out_h, out_w })
}

// ---------------------------------------------------------------- 2x2 max pool

fn pool_fwd<T: Float>(x: &[T], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for nc in 0..n * c {
        let p = &x[nc * h * w..(nc + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                out.push(p[i].max(p[i + 1]).max(p[i + w]).max(p[i + w + 1]));
            }
        }
    }
    out
}

/// Routes each pooled gradient to the first maximal element of its window.
fn pool_bwd<T: Float>(x: &[T], g: &[T], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::zero(); x.len()];
    for nc in 0..n * c {
        let base = nc * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let i = base + 2 * y * w + 2 * xx;
                let mut best = i;
                for j in [i + 1, i + w, i + w + 1] {
                    if x[j] > x[best] {
                        best = j;
                    }
                }
                out[best] = g[nc * oh * ow + y * ow + xx];
            }
        }
    }
    out
}

struct MaxPool2;

impl CustomOp1 for MaxPool2 {
    fn name(&self) -> &'static str {
        "max-pool-2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let d = dims4(l)?;
        Ok((dispatch1!(s, l, |x| pool_fwd(x, d)), (d.0, d.1, d.2 / 2, d.3 / 2).into()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &MaxPoolGrad)?))
    }
}

struct MaxPoolGrad;

impl CustomOp2 for MaxPoolGrad {
    fn name(&self) -> &'static str {
        "max-pool-2-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let d = dims4(l1)?;
        Ok((dispatch2!(s1, l1, s2, l2, |x, g| pool_bwd(x, g, d)), l1.shape().clone()))
    }
}

/// Non-overlapping 2x2 max pooling; odd trailing rows or columns are dropped.
pub fn max_pool2(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(MaxPool2)
}

// ---------------------------------------------------------------- small same-padded conv

/// Stride-1 convolution with odd square kernels and `k/2` zero padding,
/// computed directly. Intended for few-channel maps where im2col dominates.
fn sconv_fwd<T: Float>(x: &[T], wt: &[T], (n, c, h, w): (usize, usize, usize, usize), o: usize, k: usize) -> Vec<T> {
    let p = k / 2;
    let mut out = vec![0.0f64; n * o * h * w];
    for b in 0..n {
        for oc in 0..o {
            let dst = &mut out[(b * o + oc) * h * w..(b * o + oc + 1) * h * w];
            for ic in 0..c {
                let src = &x[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
                for i in 0..k {
                    for j in 0..k {
                        let wv = wt[((oc * c + ic) * k + i) * k + j].to_f64().unwrap_or(0.0);
                        let y_lo = p.saturating_sub(i);
                        let y_hi = (h + p).saturating_sub(i).min(h);
                        let x_lo = p.saturating_sub(j);
                        let x_hi = (w + p).saturating_sub(j).min(w);
                        for y in y_lo..y_hi {
                            let sy = y + i - p;
                            let drow = &mut dst[y * w..(y + 1) * w];
                            let srow = &src[sy * w..(sy + 1) * w];
                            for xx in x_lo..x_hi {
                                drow[xx] += wv * srow[xx + j - p].to_f64().unwrap_or(0.0);
                            }
                        }
                    }
                }
            }
        }
    }
    out.into_iter().map(|v| T::from(v).expect("finite")).collect()
}

fn sconv_input_grad<T: Float>(
    g: &[T],
    wt: &[T],
    (n, o, h, w): (usize, usize, usize, usize),
    c: usize,
    k: usize,
) -> Vec<T> {
    let p = k / 2;
    let mut out = vec![0.0f64; n * c * h * w];
    for b in 0..n {
        for ic in 0..c {
            let dst = &mut out[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
            for oc in 0..o {
                let src = &g[(b * o + oc) * h * w..(b * o + oc + 1) * h * w];
                for i in 0..k {
                    for j in 0..k {
                        let wv = wt[((oc * c + ic) * k + i) * k + j].to_f64().unwrap_or(0.0);
                        // output y reads input y + i - p, so input sy receives from y = sy + p - i
                        let y_lo = p.saturating_sub(i);
                        let y_hi = (h + p).saturating_sub(i).min(h);
                        let x_lo = p.saturating_sub(j);
                        let x_hi = (w + p).saturating_sub(j).min(w);
                        for y in y_lo..y_hi {
                            let sy = y + i - p;
                            let grow = &src[y * w..(y + 1) * w];
                            let drow = &mut dst[sy * w..(sy + 1) * w];
                            for xx in x_lo..x_hi {
                                drow[xx + j - p] += wv * grow[xx].to_f64().unwrap_or(0.0);
                            }
                        }
                    }
                }
            }
        }
    }
    out.into_iter().map(|v| T::from(v).expect("finite")).collect()
}

fn sconv_weight_grad<T: Float>(
    x: &[T],
    g: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    o: usize,
    k: usize,
) -> Vec<T> {
    let p = k / 2;
    let mut out = vec![0.0f64; o * c * k * k];
    for b in 0..n {
        for oc in 0..o {
            let grad = &g[(b * o + oc) * h * w..(b * o + oc + 1) * h * w];
            for ic in 0..c {
                let src = &x[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
                for i in 0..k {
                    for j in 0..k {
                        let y_lo = p.saturating_sub(i);
                        let y_hi = (h + p).saturating_sub(i).min(h);
                        let x_lo = p.saturating_sub(j);
                        let x_hi = (w + p).saturating_sub(j).min(w);
                        let mut acc = 0.0;
                        for y in y_lo..y_hi {
                            let sy = y + i - p;
                            let grow = &grad[y * w..(y + 1) * w];
                            let srow = &src[sy * w..(sy + 1) * w];
                            for xx in x_lo..x_hi {
                                acc += grow[xx].to_f64().unwrap_or(0.0) * srow[xx + j - p].to_f64().unwrap_or(0.0);
                            }
                        }
                        out[((oc * c + ic) * k + i) * k + j] += acc;
                    }
                }
            }
        }
    }
    out.into_iter().map(|v| T::from(v).expect("finite")).collect()
}

fn kernel_dims(l: &Layout) -> CResult<(usize, usize, usize)> {
    match *l.shape().dims() {
        [o, c, k, k2] if k == k2 && k % 2 == 1 => Ok((o, c, k)),
        ref d => bail!("expected an odd square kernel (o, c, k, k), got {d:?}"),
    }
}

struct SameConv;

impl CustomOp2 for SameConv {
    fn name(&self) -> &'static str {
        "same-conv"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let d = dims4(l1)?;
        let (o, c, k) = kernel_dims(l2)?;
        if c != d.1 {
            bail!("same-conv: kernel expects {c} input channels, got {}", d.1);
        }
        Ok((dispatch2!(s1, l1, s2, l2, |x, wt| sconv_fwd(x, wt, d, o, k)), (d.0, o, d.2, d.3).into()))
    }

    fn bwd(&self, x: &Tensor, wt: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dx = grad.apply_op2_no_bwd(wt, &SameConvInputGrad)?;
        let dw = x.apply_op2_no_bwd(&grad, &SameConvWeightGrad { k: wt.dims()[2] })?;
        Ok((Some(dx), Some(dw)))
    }
}

struct SameConvInputGrad;

impl CustomOp2 for SameConvInputGrad {
    fn name(&self) -> &'static str {
        "same-conv-input-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let d = dims4(l1)?;
        let (_, c, k) = kernel_dims(l2)?;
        Ok((dispatch2!(s1, l1, s2, l2, |g, wt| sconv_input_grad(g, wt, d, c, k)), (d.0, c, d.2, d.3).into()))
    }
}

struct SameConvWeightGrad {
    k: usize,
}

impl CustomOp2 for SameConvWeightGrad {
    fn name(&self) -> &'static str {
        "same-conv-weight-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let d = dims4(l1)?;
        let o = dims4(l2)?.1;
        let k = self.k;
        Ok((dispatch2!(s1, l1, s2, l2, |x, g| sconv_weight_grad(x, g, d, o, k)), (o, d.1, k, k).into()))
    }
}

/// Stride-1 convolution with `k/2` zero padding, without bias.
pub fn same_conv(x: &Tensor, weight: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(&weight.contiguous()?, SameConv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn reference_bn(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let c = x.dims()[1];
        let mean = x.mean_keepdim((0, 2, 3)).unwrap();
        let cen = x.broadcast_sub(&mean).unwrap();
        let var = cen.sqr().unwrap().mean_keepdim((0, 2, 3)).unwrap();
        cen.broadcast_div(&(var + eps).unwrap().sqrt().unwrap())
            .unwrap()
            .broadcast_mul(&gamma.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&beta.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
    }

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn batch_norm_matches_composite_forward_and_backward() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&(Tensor::randn(0.5f64, 2.0, (3, 4, 5, 6), &dev).unwrap())).unwrap();
        let g = Var::from_tensor(&Tensor::new(&[0.5f64, -1.0, 2.0, 1.5], &dev).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::new(&[0.1f64, 0.0, -0.3, 2.0], &dev).unwrap()).unwrap();
        let w = Tensor::randn(0f64, 1.0, (3, 4, 5, 6), &dev).unwrap();
        let fused = batch_norm_train(x.as_tensor(), g.as_tensor(), b.as_tensor(), 1e-5).unwrap();
        let reference = reference_bn(x.as_tensor(), g.as_tensor(), b.as_tensor(), 1e-5);
        assert!(max_abs(&fused, &reference) < 1e-10);
        let gf = (fused * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let gr = (reference * &w).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &g, &b] {
            let d = max_abs(gf.get(v).unwrap(), gr.get(v).unwrap());
            assert!(d < 1e-9, "gradient mismatch {d}");
        }
    }

    #[test]
    fn channel_stats_are_biased_moments() {
        let x = Tensor::new(&[1.0f32, 3.0, 10.0, 10.0], &Device::Cpu).unwrap().reshape((2, 2, 1)).unwrap();
        let (m, v) = channel_mean_var(&x).unwrap();
        assert_eq!(m.to_vec1::<f32>().unwrap(), vec![5.5, 6.5]);
        assert_eq!(v.to_vec1::<f32>().unwrap(), vec![20.25, 12.25]);
        assert_eq!(m.dtype(), DType::F32);
    }

    #[test]
    fn rectify_gradient_is_slope_at_and_below_zero() {
        let x = Var::from_tensor(&Tensor::new(&[-2.0f64, 0.0, 3.0], &Device::Cpu).unwrap()).unwrap();
        let y = rectify_op(x.as_tensor(), 0.2).unwrap();
        assert_eq!(y.to_vec1::<f64>().unwrap(), vec![-0.4, 0.0, 3.0]);
        let g = y.sum_all().unwrap().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().to_vec1::<f64>().unwrap(), vec![0.2, 0.2, 1.0]);
        let r = rectify_op(x.as_tensor(), 0.0).unwrap();
        let g = r.sum_all().unwrap().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().to_vec1::<f64>().unwrap(), vec![0.0, 0.0, 1.0]);
    }

    fn grads_of(f: impl Fn() -> Tensor, vars: &[&Var]) -> Vec<Tensor> {
        let gs = f().sum_all().unwrap().backward().unwrap();
        vars.iter().map(|v| gs.get(v).unwrap().clone()).collect()
    }

    #[test]
    fn channel_affine_matches_broadcast() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 4, 5), &dev).unwrap()).unwrap();
        let a = Var::from_tensor(&Tensor::new(&[0.5f64, -2.0, 3.0], &dev).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::new(&[1.0f64, 0.0, -1.0], &dev).unwrap()).unwrap();
        let w = Tensor::randn(0f64, 1.0, (2, 3, 4, 5), &dev).unwrap();
        let fused = || (channel_affine(x.as_tensor(), a.as_tensor(), b.as_tensor()).unwrap() * &w).unwrap();
        let reference = || {
            (x.as_tensor()
                .broadcast_mul(&a.as_tensor().reshape((1, 3, 1, 1)).unwrap())
                .unwrap()
                .broadcast_add(&b.as_tensor().reshape((1, 3, 1, 1)).unwrap())
                .unwrap()
                * &w)
                .unwrap()
        };
        assert!(max_abs(&fused(), &reference()) < 1e-12);
        for (f, r) in grads_of(fused, &[&x, &a, &b]).iter().zip(grads_of(reference, &[&x, &a, &b])) {
            assert!(max_abs(f, &r) < 1e-10);
        }
    }

    #[test]
    fn resize_matches_interpolation_matrices() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 2, 5, 7), &dev).unwrap()).unwrap();
        let w = Tensor::randn(0f64, 1.0, (2, 2, 9, 16), &dev).unwrap();
        let mat = |n_in: usize, n_out: usize| {
            Tensor::from_vec(crate::nn::ops::interpolation_matrix(n_in, n_out), (n_out, n_in), &dev).unwrap()
        };
        let fused = || (resize(x.as_tensor(), 9, 16).unwrap() * &w).unwrap();
        let reference = || {
            let rows = mat(5, 9).broadcast_matmul(x.as_tensor()).unwrap();
            (rows.broadcast_matmul(&mat(7, 16).t().unwrap()).unwrap() * &w).unwrap()
        };
        assert!(max_abs(&fused(), &reference()) < 1e-12);
        let gf = grads_of(fused, &[&x]);
        let gr = grads_of(reference, &[&x]);
        assert!(max_abs(&gf[0], &gr[0]) < 1e-12);
    }

    #[test]
    fn max_pool_routes_gradient_to_window_maximum() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 6, 8), &dev).unwrap()).unwrap();
        let w = Tensor::randn(0f64, 1.0, (2, 3, 3, 4), &dev).unwrap();
        let pooled = max_pool2(x.as_tensor()).unwrap();
        assert!(max_abs(&pooled, &x.as_tensor().max_pool2d(2).unwrap()) < 1e-15);
        let g = grads_of(|| (max_pool2(x.as_tensor()).unwrap() * &w).unwrap(), &[&x]).remove(0);
        // continuous random input: one maximum per window
        let up = pooled.upsample_nearest2d(6, 8).unwrap();
        let mask = x.as_tensor().eq(&up).unwrap().to_dtype(DType::F64).unwrap();
        let expected = (w.upsample_nearest2d(6, 8).unwrap() * mask).unwrap();
        assert!(max_abs(&g, &expected) < 1e-15);
    }

    #[test]
    fn same_conv_matches_builtin_conv() {
        let dev = Device::Cpu;
        for (c, o, k) in [(2usize, 1usize, 7usize), (3, 2, 3), (1, 1, 1)] {
            let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, c, 9, 6), &dev).unwrap()).unwrap();
            let kw = Var::from_tensor(&Tensor::randn(0f64, 1.0, (o, c, k, k), &dev).unwrap()).unwrap();
            let w = Tensor::randn(0f64, 1.0, (2, o, 9, 6), &dev).unwrap();
            let fused = || (same_conv(x.as_tensor(), kw.as_tensor()).unwrap() * &w).unwrap();
            let reference = || (x.as_tensor().conv2d(kw.as_tensor(), k / 2, 1, 1, 1).unwrap() * &w).unwrap();
            assert!(max_abs(&fused(), &reference()) < 1e-10);
            let gf = grads_of(fused, &[&x, &kw]);
            let gr = grads_of(reference, &[&x, &kw]);
            for (f, r) in gf.iter().zip(&gr) {
                assert!(max_abs(f, r) < 1e-10, "k={k}");
            }
        }
    }
}
