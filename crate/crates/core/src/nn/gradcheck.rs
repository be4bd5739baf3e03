//! Central finite-difference checks of backpropagated gradients.

use candle_core::{DType, Tensor, Var};

use super::ParamStore;
use crate::error::Result;

fn with_element(var: &Var, index: usize, value: f64) -> Result<()> {
    let t = var.as_tensor();
    let mut v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    v[index] = value;
    var.set(&Tensor::from_vec(v, t.shape(), t.device())?.to_dtype(t.dtype())?)?;
    Ok(())
}

fn element(var: &Var, index: usize) -> Result<f64> {
    Ok(var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[index])
}

/// `(f(θ+h) − f(θ−h)) / 2h` for one element of `var`; the element is restored afterwards.
pub fn central_difference<F>(f: &F, var: &Var, index: usize, h: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    let orig = element(var, index)?;
    with_element(var, index, orig + h)?;
    let plus = f()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    with_element(var, index, orig - h)?;
    let minus = f()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    with_element(var, index, orig)?;
    Ok((plus - minus) / (2.0 * h))
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    /// `|a − n| / max(|a|, |n|, floor)`; the floor keeps exact zeros comparable.
    pub fn relative_error(&self, floor: f64) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(floor);
        (self.analytic - self.numeric).abs() / scale
    }
}

/// Compares backprop against central differences on up to `per_var`
/// evenly spaced elements of every trainable variable in `store`.
pub fn compare_gradients<F>(store: &ParamStore, f: F, h: f64, per_var: usize) -> Result<Vec<GradCheck>>
where
    F: Fn() -> Result<Tensor>,
{
    let grads = f()?.backward()?;
    let mut out = Vec::new();
    for (name, var) in store.trainable() {
        let n = var.elem_count();
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?,
            None => vec![0.0; n],
        };
        let take = per_var.min(n).max(1);
        for k in 0..take {
            let index = k * n / take;
            out.push(GradCheck {
                name: name.clone(),
                index,
                analytic: analytic[index],
                numeric: central_difference(&f, &var, index, h)?,
            });
        }
    }
    Ok(out)
}

/// Test helper: panics with the worst offender when any relative error
/// (with denominators floored at `floor`) exceeds `tol`.
pub fn check_grads<F>(store: &ParamStore, f: F, h: f64, tol: f64, floor: f64, per_var: usize)
where
    F: Fn() -> Tensor,
{
    let checks = compare_gradients(store, || Ok(f()), h, per_var).expect("gradient evaluation");
    let worst = checks
        .iter()
        .max_by(|a, b| a.relative_error(floor).total_cmp(&b.relative_error(floor)))
        .expect("at least one parameter");
    assert!(
        worst.relative_error(floor) < tol,
        "gradient mismatch at {}[{}]: analytic {} vs numeric {}",
        worst.name,
        worst.index,
        worst.analytic,
        worst.numeric
    );
}
