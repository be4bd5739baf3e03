use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{Error, Result};

/// Stacked `(n, c, h, w)` tensors of a group of samples.
pub struct Batch {
    pub x: Tensor,
    pub m: Tensor,
    pub y: Tensor,
}

fn stack<T: Copy + candle_core::WithDType>(arrays: &[&ndarray::Array3<T>]) -> Result<Tensor> {
    let first = arrays
        .first()
        .ok_or_else(|| Error::Argument("cannot batch zero samples".into()))?;
    let (c, h, w) = first.dim();
    let mut data = Vec::with_capacity(arrays.len() * c * h * w);
    for a in arrays {
        if a.dim() != (c, h, w) {
            return Err(Error::Shape(format!("sample {:?} in a batch of {:?}", a.dim(), (c, h, w))));
        }
        data.extend(a.iter().copied());
    }
    Ok(Tensor::from_vec(data, (arrays.len(), c, h, w), &Device::Cpu)?)
}

impl Batch {
    pub fn from_samples(samples: &[&Sample], dtype: DType) -> Result<Self> {
        let xs: Vec<_> = samples.iter().map(|s| &s.x).collect();
        let ms: Vec<_> = samples.iter().map(|s| &s.m).collect();
        let ys: Vec<_> = samples.iter().map(|s| &s.y).collect();
        Ok(Self {
            x: stack(&xs)?.to_dtype(dtype)?,
            m: stack(&ms)?.to_dtype(dtype)?,
            y: stack(&ys)?.to_dtype(dtype)?,
        })
    }

    pub fn len(&self) -> usize {
        self.x.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sample indices grouped into batches, shuffled by `rng` when given.
pub fn batch_indices(n: usize, batch_size: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(rng) = rng {
        order.shuffle(rng);
    }
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Contiguous batches over `samples` in their stored order.
pub fn sequential_batches(samples: &[Sample], batch_size: usize, dtype: DType) -> impl Iterator<Item = Result<Batch>> + '_ {
    samples.chunks(batch_size.max(1)).map(move |chunk| {
        let refs: Vec<&Sample> = chunk.iter().collect();
        Batch::from_samples(&refs, dtype)
    })
}
/// Copies an `(n, c, h, w)` tensor of any float dtype into an f32 array.
pub fn to_array4(t: &Tensor) -> Result<ndarray::Array4<f32>> {
    let (n, c, h, w) = t.dims4()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(ndarray::Array4::from_shape_vec((n, c, h, w), v).expect("element count matches dims"))
}

