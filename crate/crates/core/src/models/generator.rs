use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{Cbam, Ctx, DoubleDsc, Down, ParamBuilder, ParamStore, Pointwise, Up};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub in_frames: usize,
    pub mask_channels: usize,
    pub out_frames: usize,
    pub encoder_widths: [usize; 5],
    pub decoder_widths: [usize; 4],
    pub dropout_p: f64,
    pub dual_encoder: bool,
    pub aleatoric_head: bool,
    pub width_scale: f64,
    pub cbam_reduction: usize,
    pub cbam_spatial_kernel: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            in_frames: 12,
            mask_channels: 25,
            out_frames: 12,
            encoder_widths: [64, 128, 256, 512, 512],
            decoder_widths: [256, 128, 64, 64],
            dropout_p: 0.5,
            dual_encoder: true,
            aleatoric_head: false,
            width_scale: 1.0,
            cbam_reduction: 16,
            cbam_spatial_kernel: 7,
        }
    }
}

fn scale(w: usize, s: f64) -> usize {
    ((w as f64 * s).round() as usize).max(1)
}

impl GeneratorConfig {
    pub fn gnet() -> Self {
        Self::default()
    }

    pub fn unet() -> Self {
        Self {
            dual_encoder: false,
            ..Self::default()
        }
    }

    pub fn with_width_scale(mut self, s: f64) -> Self {
        self.width_scale = s;
        self
    }

    pub fn scaled_encoder_widths(&self) -> [usize; 5] {
        self.encoder_widths.map(|w| scale(w, self.width_scale))
    }

    pub fn scaled_decoder_widths(&self) -> [usize; 4] {
        self.decoder_widths.map(|w| scale(w, self.width_scale))
    }

    /// Channels of the skip connection at each encoder level.
    pub fn skip_widths(&self) -> [usize; 5] {
        let k = if self.dual_encoder { 2 } else { 1 };
        self.scaled_encoder_widths().map(|w| k * w)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.out_frames != 12 {
            return bad(format!("out_frames must be 12, got {}", self.out_frames));
        }
        if self.in_frames == 0 || (self.dual_encoder && self.mask_channels == 0) {
            return bad("in_frames and mask_channels must be positive".into());
        }
        if !(self.width_scale.is_finite() && self.width_scale > 0.0) {
            return bad(format!("width_scale must be positive, got {}", self.width_scale));
        }
        if self.encoder_widths.contains(&0) || self.decoder_widths.contains(&0) {
            return bad("encoder_widths and decoder_widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p));
        }
        if let Some(w) = self
            .scaled_encoder_widths()
            .into_iter()
            .find(|&w| w < self.cbam_reduction)
        {
            return bad(format!(
                "scaled encoder width {w} is below cbam_reduction {}",
                self.cbam_reduction
            ));
        }
        if self.cbam_spatial_kernel % 2 == 0 {
            return bad("cbam_spatial_kernel must be odd".into());
        }
        Ok(())
    }
}

/// One five-level encoder; each level ends in a CBAM whose output is the skip.
pub struct Encoder {
    pub site_prefix: String,
    pub inc: DoubleDsc,
    pub downs: Vec<Down>,
    pub cbams: Vec<Cbam>,
}

impl Encoder {
    fn new(pb: &ParamBuilder, site_prefix: &str, in_c: usize, cfg: &GeneratorConfig) -> Result<Self> {
        let w = cfg.scaled_encoder_widths();
        let inc = DoubleDsc::new(&pb.pp("inc"), in_c, w[0])?;
        let downs = (1..5)
            .map(|l| Down::new(&pb.pp(format!("down{l}")), w[l - 1], w[l]))
            .collect::<Result<Vec<_>>>()?;
        let cbams = (0..5)
            .map(|l| Cbam::new(&pb.pp(format!("cbam{l}")), w[l], cfg.cbam_reduction, cfg.cbam_spatial_kernel))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            site_prefix: site_prefix.to_string(),
            inc,
            downs,
            cbams,
        })
    }

    /// CBAM outputs of all five levels, shallowest first.
    pub fn forward(&self, x: &Tensor, ctx: &mut Ctx) -> Result<Vec<Tensor>> {
        let mut skips = Vec::with_capacity(5);
        let mut h = self.inc.forward(x, ctx)?;
        for l in 0..5 {
            if l > 0 {
                h = self.downs[l - 1].forward(&h, ctx)?;
            }
            h = ctx.site(&format!("{}/d{l}/dsc", self.site_prefix), h)?;
            let a = self.cbams[l].forward(&h)?;
            skips.push(ctx.site(&format!("{}/d{l}/cbam", self.site_prefix), a)?);
        }
        Ok(skips)
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    /// `(n, 12, 64, 64)` in normalized units.
    pub y_hat: Tensor,
    /// Log variance, present only for the aleatoric variant.
    pub s: Option<Tensor>,
}

/// SmaAt-UNet (one encoder) or SmaAt-GNet (map and mask encoders).
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub store: ParamStore,
    pub map_encoder: Encoder,
    pub mask_encoder: Option<Encoder>,
    pub ups: Vec<Up>,
    pub head: Pointwise,
    pub s_head: Option<Pointwise>,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(dtype);
        let pb = store.builder(seed);
        let map_encoder = Encoder::new(&pb.pp("enc_map"), "enc_map", cfg.in_frames, &cfg)?;
        let mask_encoder = if cfg.dual_encoder {
            Some(Encoder::new(&pb.pp("enc_mask"), "enc_mask", cfg.mask_channels, &cfg)?)
        } else {
            None
        };
        let skips = cfg.skip_widths();
        let dec = cfg.scaled_decoder_widths();
        let mut ups = Vec::with_capacity(4);
        let mut below = skips[4];
        for (i, &out) in dec.iter().enumerate() {
            let level = 3 - i;
            let p = if i < 2 { cfg.dropout_p } else { 0.0 };
            ups.push(Up::new(&pb.pp(format!("dec/up{}", i + 1)), below, skips[level], out, p)?);
            below = out;
        }
        let head = Pointwise::new(&pb.pp("head"), dec[3], cfg.out_frames)?;
        let s_head = if cfg.aleatoric_head {
            Some(Pointwise::new(&pb.pp("head_s"), dec[3], cfg.out_frames)?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            store,
            map_encoder,
            mask_encoder,
            ups,
            head,
            s_head,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn is_dual(&self) -> bool {
        self.mask_encoder.is_some()
    }

    /// Registered activation sites in forward order.
    pub fn sites(&self) -> Vec<String> {
        let mut out = Vec::new();
        for enc in std::iter::once(&self.map_encoder).chain(self.mask_encoder.as_ref()) {
            for l in 0..5 {
                out.push(format!("{}/d{l}/dsc", enc.site_prefix));
                out.push(format!("{}/d{l}/cbam", enc.site_prefix));
            }
        }
        for l in (0..4).rev() {
            out.push(format!("dec/d{l}/dsc"));
        }
        out
    }

    fn check_input(&self, x: &Tensor, channels: usize, what: &str) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != channels {
            return shape_err(format!("{what} has {c} channels, expected {channels}"));
        }
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return shape_err(format!("{what} spatial size {h}×{w} must be a positive multiple of 16"));
        }
        Ok(())
    }

    /// `x` is `(n, 12, H, W)`; `m` is `(n, 25, H, W)` and required for the dual encoder.
    pub fn forward(&self, x: &Tensor, m: Option<&Tensor>, ctx: &mut Ctx) -> Result<Prediction> {
        self.check_input(x, self.cfg.in_frames, "input")?;
        let x = x.to_dtype(self.dtype())?;
        let mut skips = self.map_encoder.forward(&x, ctx)?;
        if let Some(enc) = &self.mask_encoder {
            let m = m.ok_or_else(|| Error::Argument("dual-encoder generator needs a mask stack".into()))?;
            self.check_input(m, self.cfg.mask_channels, "mask stack")?;
            if m.dims()[0] != x.dims()[0] || m.dims()[2..] != x.dims()[2..] {
                return shape_err(format!("mask stack {:?} does not match input {:?}", m.dims(), x.dims()));
            }
            let mask_skips = enc.forward(&m.to_dtype(self.dtype())?, ctx)?;
            skips = skips
                .iter()
                .zip(&mask_skips)
                .map(|(a, b)| Ok(Tensor::cat(&[a, b], 1)?))
                .collect::<Result<Vec<_>>>()?;
        }
        let mut h = skips[4].clone();
        for (i, up) in self.ups.iter().enumerate() {
            let level = 3 - i;
            h = up.forward(&h, &skips[level], ctx)?;
            h = ctx.site(&format!("dec/d{level}/dsc"), h)?;
        }
        let y_hat = self.head.forward(&h)?;
        let s = match &self.s_head {
            Some(head) => Some(head.forward(&h)?),
            None => None,
        };
        Ok(Prediction { y_hat, s })
    }
}

pub fn build_smaat_gnet(cfg: GeneratorConfig, seed: u64) -> Result<Generator> {
    if !cfg.dual_encoder {
        return Err(Error::Config("SmaAt-GNet requires dual_encoder = true".into()));
    }
    Generator::new(cfg, seed, DType::F32)
}

pub fn build_smaat_unet(cfg: GeneratorConfig, seed: u64) -> Result<Generator> {
    if cfg.dual_encoder {
        return Err(Error::Config("SmaAt-UNet requires dual_encoder = false".into()));
    }
    Generator::new(cfg, seed, DType::F32)
}

/// Repeats the last input frame for every lead time; `x` is `(n, 12, H, W)`.
pub fn persistence_predict(x: &Tensor) -> Result<Tensor> {
    let (n, t, h, w) = x.dims4()?;
    if t == 0 {
        return shape_err("persistence needs at least one input frame");
    }
    Ok(x.narrow(1, t - 1, 1)?.broadcast_as((n, 12, h, w))?.contiguous()?)
}
