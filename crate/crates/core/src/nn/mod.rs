//! Network building blocks on top of candle tensors.
//!
//! Every forward pass takes a [`Ctx`] that decides how batch normalization
//! behaves, whether dropout is active (and which seeded stream it draws
//! from), and lets an [`ActivationHook`] observe or replace named
//! activations.

mod blocks;
mod kernels;
pub mod gradcheck;
mod layers;
pub mod ops;
mod params;

pub use blocks::{BlockConfig, Cbam, CbamGates, DoubleDsc, Down, Dsc, Up};
pub use layers::{BatchNorm2d, Conv2d, Depthwise3x3, Linear, Pointwise};
pub use params::{ParamBuilder, ParamKind, ParamStore};

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with running statistics.
    Eval,
    /// Normalize with batch statistics; optionally fold them into the running ones.
    Train { update_stats: bool },
}

/// Observes (and may replace) activations at registered sites.
pub trait ActivationHook {
    fn visit(&mut self, site: &str, activation: Tensor) -> Result<Tensor>;
}

pub struct Ctx<'a> {
    pub bn: BnMode,
    rng: Option<&'a mut ChaCha8Rng>,
    hook: Option<&'a mut dyn ActivationHook>,
}

impl<'a> Ctx<'a> {
    /// Deterministic inference: running statistics, dropout off.
    pub fn eval() -> Self {
        Self {
            bn: BnMode::Eval,
            rng: None,
            hook: None,
        }
    }

    /// Training: batch statistics (updated), dropout drawn from `rng`.
    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            bn: BnMode::Train { update_stats: true },
            rng: Some(rng),
            hook: None,
        }
    }

    /// Test-time dropout: running statistics, dropout drawn from `rng`.
    pub fn stochastic(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            bn: BnMode::Eval,
            rng: Some(rng),
            hook: None,
        }
    }

    pub fn with_bn(mut self, bn: BnMode) -> Self {
        self.bn = bn;
        self
    }

    pub fn with_hook(mut self, hook: &'a mut dyn ActivationHook) -> Self {
        self.hook = Some(hook);
        self
    }

    pub fn dropout_active(&self) -> bool {
        self.rng.is_some()
    }

    pub fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        self.rng.as_deref_mut()
    }

    /// Passes an activation through the hook, if any.
    pub fn site(&mut self, name: &str, activation: Tensor) -> Result<Tensor> {
        match self.hook.as_deref_mut() {
            Some(h) => h.visit(name, activation),
            None => Ok(activation),
        }
    }
}

/// Collects the names of all visited sites in order.
#[derive(Default)]
pub struct SiteRecorder {
    pub sites: Vec<(String, Vec<usize>)>,
}

impl ActivationHook for SiteRecorder {
    fn visit(&mut self, site: &str, activation: Tensor) -> Result<Tensor> {
        self.sites.push((site.to_string(), activation.dims().to_vec()));
        Ok(activation)
    }
}
