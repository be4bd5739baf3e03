//! Adversarial, regression and heteroscedastic objectives.
//!
//! All functions return scalar tensors so they can be backpropagated.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// How the generator's adversarial term is written.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialForm {
    /// Minimize `log(1 − D(x, G(x, m)))`.
    #[default]
    Saturating,
    /// Minimize `−log D(x, G(x, m))`.
    NonSaturating,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return shape_err(format!("{what}: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

fn non_empty(t: &Tensor, what: &str) -> Result<()> {
    if t.dims().first().copied().unwrap_or(0) == 0 || t.elem_count() == 0 {
        return Err(Error::Argument(format!("{what}: empty batch")));
    }
    Ok(())
}

fn clamped_log(p: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(p.clamp(eps, 1.0 - eps)?.log()?)
}

/// Mean over all patch scores of `log D(x, y) + log(1 − D(x, G(x, m)))`.
pub fn loss_cgan(real: &Tensor, fake: &Tensor, eps: f64) -> Result<Tensor> {
    non_empty(real, "loss_cgan")?;
    same_shape(real, fake, "loss_cgan")?;
    let one_minus_fake = fake.affine(-1.0, 1.0)?;
    let terms = (clamped_log(real, eps)? + clamped_log(&one_minus_fake, eps)?)?;
    Ok(terms.mean_all()?)
}

/// Generator's adversarial term alone (the `log D(x, y)` term is constant in G).
pub fn loss_adversarial(fake: &Tensor, eps: f64, form: AdversarialForm) -> Result<Tensor> {
    non_empty(fake, "adversarial loss")?;
    Ok(match form {
        AdversarialForm::Saturating => clamped_log(&fake.affine(-1.0, 1.0)?, eps)?.mean_all()?,
        AdversarialForm::NonSaturating => clamped_log(fake, eps)?.mean_all()?.neg()?,
    })
}

/// Mean squared error over batch and all per-sample elements.
pub fn loss_l2(y: &Tensor, y_hat: &Tensor) -> Result<Tensor> {
    non_empty(y, "loss_l2")?;
    same_shape(y, y_hat, "loss_l2")?;
    Ok((y - y_hat)?.sqr()?.mean_all()?)
}

/// Same formula as [`loss_l2`]; kept separate to mirror its evaluation role.
pub fn loss_mse(y: &Tensor, y_hat: &Tensor) -> Result<Tensor> {
    loss_l2(y, y_hat)
}

/// Adversarial term plus `lambda` times the L2 regularizer.
pub fn loss_generator_total(
    fake: &Tensor,
    y: &Tensor,
    y_hat: &Tensor,
    lambda: f64,
    eps: f64,
    form: AdversarialForm,
) -> Result<Tensor> {
    let adv = loss_adversarial(fake, eps, form)?;
    Ok((adv + (loss_l2(y, y_hat)? * lambda)?)?)
}

/// Mean of `½·exp(−s)·(y − ŷ)² + ½·s`.
pub fn loss_aleatoric(y: &Tensor, y_hat: &Tensor, s: &Tensor) -> Result<Tensor> {
    non_empty(y, "loss_aleatoric")?;
    same_shape(y, y_hat, "loss_aleatoric")?;
    same_shape(y, s, "loss_aleatoric log variance")?;
    let r2 = (y - y_hat)?.sqr()?;
    let terms = ((s.neg()?.exp()? * r2)? + s)?;
    Ok((terms.mean_all()? * 0.5)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::scalar;
    use candle_core::{DType, Device, Var};

    fn full(v: f64, shape: &[usize]) -> Tensor {
        Tensor::full(v, shape, &Device::Cpu).unwrap()
    }

    const EPS: f64 = 1e-7;

    #[test]
    fn cgan_fixtures() {
        let half = full(0.5, &[3, 4, 4]);
        let v = scalar(&loss_cgan(&half, &half, EPS).unwrap()).unwrap();
        assert!((v - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((v + 1.386_294_361_119_890_6).abs() < 1e-12);
        let opt = scalar(&loss_cgan(&full(1.0, &[2, 4, 4]), &full(0.0, &[2, 4, 4]), EPS).unwrap()).unwrap();
        assert!(opt <= 0.0 && opt > -1e-6);
        let empty = Tensor::zeros((0, 4, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(loss_cgan(&empty, &empty, EPS), Err(Error::Argument(_))));
        assert!(matches!(
            loss_cgan(&half, &full(0.5, &[2, 4, 4]), EPS),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn cgan_pair_swap_regression() {
        // real = 0.8, fake = 0.3: log 0.8 + log 0.7; swapped: log 0.3 + log 0.2
        let r = full(0.8, &[1, 4, 4]);
        let f = full(0.3, &[1, 4, 4]);
        let a = scalar(&loss_cgan(&r, &f, EPS).unwrap()).unwrap();
        let b = scalar(&loss_cgan(&f, &r, EPS).unwrap()).unwrap();
        assert!((a - (0.8f64.ln() + 0.7f64.ln())).abs() < 1e-12);
        assert!((b - (0.3f64.ln() + 0.2f64.ln())).abs() < 1e-12);
        assert!(a > b);
    }

    #[test]
    fn l2_and_mse_fixtures() {
        let y = Tensor::randn(0f64, 1.0, (2, 12, 8, 8), &Device::Cpu).unwrap();
        assert_eq!(scalar(&loss_l2(&y, &y).unwrap()).unwrap(), 0.0);
        let v = scalar(&loss_l2(&y, &(&y + 0.1).unwrap()).unwrap()).unwrap();
        assert!((v - 0.01).abs() < 1e-12);
        let z = Tensor::randn(0f64, 1.0, (2, 12, 8, 8), &Device::Cpu).unwrap();
        assert_eq!(
            scalar(&loss_l2(&y, &z).unwrap()).unwrap(),
            scalar(&loss_mse(&y, &z).unwrap()).unwrap()
        );
        // one differing element in a batch of one
        let kappa = 12 * 64 * 64;
        let mut d = vec![0f64; kappa];
        d[1234] = 0.3;
        let yh = Tensor::from_vec(d, (1, 12, 64, 64), &Device::Cpu).unwrap();
        let zero = yh.zeros_like().unwrap();
        let v = scalar(&loss_mse(&zero, &yh).unwrap()).unwrap();
        assert!((v - 0.09 / kappa as f64).abs() < 1e-18);
        assert!(matches!(loss_l2(&y, &full(0.0, &[2, 12, 8, 7])), Err(Error::Shape(_))));
    }

    #[test]
    fn generator_total_fixtures() {
        let fake = full(0.5, &[2, 4, 4]);
        let y = full(0.2, &[2, 12, 8, 8]);
        let v = scalar(&loss_generator_total(&fake, &y, &y, 1e6, EPS, AdversarialForm::Saturating).unwrap()).unwrap();
        assert!((v - 0.5f64.ln()).abs() < 1e-12);
        let yh = (&y + 0.001).unwrap();
        let adv = scalar(&loss_adversarial(&fake, EPS, AdversarialForm::Saturating).unwrap()).unwrap();
        let with = scalar(&loss_generator_total(&fake, &y, &yh, 1e6, EPS, AdversarialForm::Saturating).unwrap()).unwrap();
        assert!((with - adv - 1.0).abs() < 1e-6);
        let no_l2 = scalar(&loss_generator_total(&fake, &y, &yh, 0.0, EPS, AdversarialForm::Saturating).unwrap()).unwrap();
        assert_eq!(no_l2, adv);
        let ns = scalar(&loss_adversarial(&fake, EPS, AdversarialForm::NonSaturating).unwrap()).unwrap();
        assert!((ns - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn lambda_derivative_is_l2() {
        let fake = Tensor::rand(0.05f64, 0.95, (2, 4, 4), &Device::Cpu).unwrap();
        let y = Tensor::randn(0f64, 1.0, (2, 3, 4, 4), &Device::Cpu).unwrap();
        let yh = Tensor::randn(0f64, 1.0, (2, 3, 4, 4), &Device::Cpu).unwrap();
        let lam = Var::new(1e6f64, &Device::Cpu).unwrap();
        let adv = loss_adversarial(&fake, EPS, AdversarialForm::Saturating).unwrap();
        let total = (adv + loss_l2(&y, &yh).unwrap().broadcast_mul(lam.as_tensor()).unwrap()).unwrap();
        let g = total.backward().unwrap();
        let dl = scalar(g.get(lam.as_tensor()).unwrap()).unwrap();
        assert_eq!(dl, scalar(&loss_l2(&y, &yh).unwrap()).unwrap());
    }

    #[test]
    fn constant_discriminator_leaves_weighted_l2_gradient() {
        let y = Tensor::randn(0f64, 1.0, (2, 3, 4, 4), &Device::Cpu).unwrap();
        let yh = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 4, 4), &Device::Cpu).unwrap()).unwrap();
        let fake = full(0.5, &[2, 4, 4]);
        let total = loss_generator_total(&fake, &y, yh.as_tensor(), 1e6, EPS, AdversarialForm::Saturating).unwrap();
        let g1 = total.backward().unwrap().get(yh.as_tensor()).unwrap().clone();
        let l2 = (loss_l2(&y, yh.as_tensor()).unwrap() * 1e6).unwrap();
        let g2 = l2.backward().unwrap().get(yh.as_tensor()).unwrap().clone();
        let d = scalar(&(g1 - g2).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
        assert!(d < 1e-9);
    }

    #[test]
    fn aleatoric_fixtures() {
        let y = full(0.3, &[1, 12, 4, 4]);
        let s0 = full(0.0, &[1, 12, 4, 4]);
        assert_eq!(scalar(&loss_aleatoric(&y, &y, &s0).unwrap()).unwrap(), 0.0);
        let v = scalar(&loss_aleatoric(&y, &(&y + 1.0).unwrap(), &s0).unwrap()).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn aleatoric_minimizer_is_log_residual() {
        // golden-section search on the per-pixel objective
        for r2 in [0.01f64, 0.25, 1.0, 4.0] {
            let f = |s: f64| 0.5 * (-s).exp() * r2 + 0.5 * s;
            let (mut a, mut b) = (-20.0f64, 20.0f64);
            let phi = (5f64.sqrt() - 1.0) / 2.0;
            for _ in 0..200 {
                let c = b - phi * (b - a);
                let d = a + phi * (b - a);
                if f(c) < f(d) {
                    b = d;
                } else {
                    a = c;
                }
            }
            let s_star = 0.5 * (a + b);
            assert!((s_star - r2.ln()).abs() < 1e-6, "r2 {r2}: {s_star}");
        }
    }
}
