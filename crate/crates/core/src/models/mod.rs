//! Generators, the patch discriminator, the persistence baseline and checkpoints.

pub mod checkpoint;
mod discriminator;
mod generator;

pub use discriminator::{conv_stack, receptive_field, Discriminator, DiscriminatorConfig, Stage};
pub use generator::{
    build_smaat_gnet, build_smaat_unet, persistence_predict, Encoder, Generator, GeneratorConfig,
    Prediction,
};

use candle_core::{DType, Tensor};

use crate::error::Result;
use crate::nn::Ctx;

/// Anything that maps an input hour (and mask stack) to a predicted hour.
pub trait Nowcaster {
    fn name(&self) -> String;
    /// Whether repeated stochastic passes can differ.
    fn is_stochastic(&self) -> bool;
    /// `x` is `(n, 12, H, W)`, `m` is `(n, 25, H, W)`; returns `(n, 12, H, W)`.
    fn predict(&self, x: &Tensor, m: &Tensor, ctx: &mut Ctx) -> Result<Tensor>;
    /// Element type expected for `x` and `m`.
    fn dtype(&self) -> DType {
        DType::F32
    }
}

impl Nowcaster for Generator {
    fn name(&self) -> String {
        if self.is_dual() { "SmaAt-GNet" } else { "SmaAt-UNet" }.to_string()
    }

    fn is_stochastic(&self) -> bool {
        self.cfg.dropout_p > 0.0
    }

    fn predict(&self, x: &Tensor, m: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        Ok(self.forward(x, Some(m), ctx)?.y_hat)
    }

    fn dtype(&self) -> DType {
        Generator::dtype(self)
    }
}

pub struct Persistence;

impl Nowcaster for Persistence {
    fn name(&self) -> String {
        "Persistence".into()
    }

    fn is_stochastic(&self) -> bool {
        false
    }

    fn predict(&self, x: &Tensor, _m: &Tensor, _ctx: &mut Ctx) -> Result<Tensor> {
        persistence_predict(x)
    }
}
