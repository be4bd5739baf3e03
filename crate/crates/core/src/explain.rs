//! Grad-CAM heatmaps for the generator, with the forecast recast as a
//! segmentation of rainy pixels.
//!
//! The target scalar is the sum of predicted values over every pixel whose
//! accumulated, denormalized prediction exceeds the threshold; that rainy set
//! is held constant during differentiation.

use std::path::Path;

use candle_core::{Tensor, Var};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::masks::accumulate_hour;
use crate::models::Generator;
use crate::nn::ops::{relu, resize_bilinear};
use crate::nn::{ActivationHook, Ctx};
use crate::plot::{compose_grid, Panel};
use crate::train::{to_array4, Batch};
use crate::verify::binarize_hour;

/// Rain/no-rain threshold applied to the accumulated prediction, millimetres.
pub const DEFAULT_BINARIZE_MM: f64 = 0.5;

/// Replaces the activation at one site with a fresh leaf so its gradient is kept.
struct Capture {
    site: String,
    leaf: Option<Var>,
}

impl ActivationHook for Capture {
    fn visit(&mut self, site: &str, activation: Tensor) -> Result<Tensor> {
        if site != self.site {
            return Ok(activation);
        }
        let leaf = Var::from_tensor(&activation.detach())?;
        let t = leaf.as_tensor().clone();
        self.leaf = Some(leaf);
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCam {
    pub site: String,
    /// Spatial mean of `∂target/∂A_c` per channel.
    pub weights: Vec<f64>,
    /// `ReLU(Σ_c w_c A_c)` at the site's own resolution.
    pub raw: Array2<f32>,
    /// `raw` resized to the model grid and scaled so its maximum is 1.
    pub heatmap: Array2<f32>,
    /// No pixel was predicted rainy, so the heatmap is defined as zero.
    pub no_rain: bool,
}

/// Grad-CAM for any forward pass that reports `site` through the context hook.
/// `forward` must return predictions `(1, 12, h, w)`.
pub fn gradcam_with<F>(forward: F, site: &str, norm_max: f64, threshold_mm: f64, out_size: usize) -> Result<GradCam>
where
    F: FnOnce(&mut Ctx) -> Result<Tensor>,
{
    let mut hook = Capture {
        site: site.to_string(),
        leaf: None,
    };
    let y_hat = {
        let mut ctx = Ctx::eval().with_hook(&mut hook);
        forward(&mut ctx)?
    };
    let leaf = hook
        .leaf
        .ok_or_else(|| Error::Argument(format!("forward pass never reached site `{site}`")))?;
    let (n, _, h, w) = y_hat.dims4()?;
    if n != 1 {
        return Err(Error::Argument(format!("Grad-CAM explains one sample at a time, got {n}")));
    }
    let (_, c, ah, aw) = leaf.as_tensor().dims4()?;
    let pred = to_array4(&y_hat)?;
    let rainy = binarize_hour(pred.index_axis(Axis(0), 0), norm_max, threshold_mm)?;
    if !rainy.iter().any(|&r| r) {
        return Ok(GradCam {
            site: site.to_string(),
            weights: vec![0.0; c],
            raw: Array2::zeros((ah, aw)),
            heatmap: Array2::zeros((out_size, out_size)),
            no_rain: true,
        });
    }
    let mask: Vec<f32> = rainy.iter().map(|&r| f32::from(u8::from(r))).collect();
    let mask = Tensor::from_vec(mask, (1, 1, h, w), y_hat.device())?.to_dtype(y_hat.dtype())?;
    let target = y_hat.broadcast_mul(&mask)?.sum_all()?;
    let grads = target.backward()?;
    let a = leaf.as_tensor();
    let g = grads
        .get(a)
        .cloned()
        .unwrap_or(a.zeros_like()?);
    let weights = g.mean((2, 3))?; // (1, c)
    let cam = relu(&a.broadcast_mul(&weights.reshape((1, c, 1, 1))?)?.sum_keepdim(1)?)?;
    let up = resize_bilinear(&cam, out_size, out_size)?;
    let raw = to_array4(&cam)?.index_axis_move(Axis(0), 0).index_axis_move(Axis(0), 0);
    let mut heatmap = to_array4(&up)?.index_axis_move(Axis(0), 0).index_axis_move(Axis(0), 0);
    // interpolation of a non-negative map stays non-negative; clamp rounding residue
    heatmap.mapv_inplace(|v| v.max(0.0));
    let max = heatmap.iter().cloned().fold(0.0f32, f32::max);
    if max > 0.0 {
        heatmap.mapv_inplace(|v| v / max);
    }
    Ok(GradCam {
        site: site.to_string(),
        weights: weights.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1()?,
        raw,
        heatmap,
        no_rain: false,
    })
}

/// Grad-CAM of `g` at `site` for one input hour `x` `(1, 12, 64, 64)` and its mask stack.
pub fn gradcam(g: &Generator, x: &Tensor, m: &Tensor, site: &str, norm_max: f64, threshold_mm: f64) -> Result<GradCam> {
    if !g.sites().iter().any(|s| s == site) {
        return Err(Error::Argument(format!(
            "unknown activation site `{site}`; expected one of {}",
            g.sites().join(", ")
        )));
    }
    let out = x.dims4()?.2;
    gradcam_with(|ctx| Ok(g.forward(x, Some(m), ctx)?.y_hat), site, norm_max, threshold_mm, out)
}

/// Heatmaps for every registered site of one sample, plus the panels shown beside them.
#[derive(Clone, Debug)]
pub struct HeatmapGrid {
    pub cams: Vec<GradCam>,
    /// Accumulated input hour, target hour and predicted hour, millimetres.
    pub input_mm: Array2<f64>,
    pub target_mm: Array2<f64>,
    pub prediction_mm: Array2<f64>,
}

pub fn heatmap_grid(g: &Generator, sample: &Sample, norm_max: f64, threshold_mm: f64) -> Result<HeatmapGrid> {
    let b = Batch::from_samples(&[sample], g.dtype())?;
    let cams = g
        .sites()
        .iter()
        .map(|site| gradcam(g, &b.x, &b.m, site, norm_max, threshold_mm))
        .collect::<Result<Vec<_>>>()?;
    let pred = to_array4(&g.forward(&b.x, Some(&b.m), &mut Ctx::eval())?.y_hat)?;
    Ok(HeatmapGrid {
        cams,
        input_mm: accumulate_hour(sample.x.view(), norm_max)?,
        target_mm: accumulate_hour(sample.y.view(), norm_max)?,
        prediction_mm: accumulate_hour(pred.index_axis(Axis(0), 0), norm_max)?,
    })
}

impl HeatmapGrid {
    fn cam(&self, site: &str) -> Option<Panel> {
        self.cams.iter().find(|c| c.site == site).map(|c| Panel {
            map: c.heatmap.clone(),
            vmin: 0.0,
            vmax: 1.0,
        })
    }

    /// One row per depth. The first row holds input, target and prediction;
    /// then columns are map-encoder DSC, map-encoder CBAM, mask-encoder DSC,
    /// mask-encoder CBAM and decoder DSC.
    pub fn render(&self, scale: u32) -> Result<image::RgbImage> {
        let vmax = self
            .input_mm
            .iter()
            .chain(self.target_mm.iter())
            .chain(self.prediction_mm.iter())
            .cloned()
            .fold(0.0f64, f64::max)
            .max(1e-6) as f32;
        let rain = |a: &Array2<f64>| {
            Some(Panel {
                map: a.mapv(|v| v as f32),
                vmin: 0.0,
                vmax,
            })
        };
        let mut panels = vec![rain(&self.input_mm), rain(&self.target_mm), rain(&self.prediction_mm), None, None];
        for l in 0..5 {
            panels.push(self.cam(&format!("enc_map/d{l}/dsc")));
            panels.push(self.cam(&format!("enc_map/d{l}/cbam")));
            panels.push(self.cam(&format!("enc_mask/d{l}/dsc")));
            panels.push(self.cam(&format!("enc_mask/d{l}/cbam")));
            panels.push(self.cam(&format!("dec/d{l}/dsc")));
        }
        compose_grid(&panels, 5, scale, 4)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::plot::save_png(&self.render(2)?, path)
    }

    /// Raw heatmaps as JSON, one entry per site.
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.cams)?)?;
        Ok(())
    }
}
