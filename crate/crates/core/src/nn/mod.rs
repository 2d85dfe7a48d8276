//! Small neural-network toolkit on top of `candle_core` tensors.
//!
//! Everything here is differentiable through candle's autograd; no layer relies
//! on an op without a backward implementation (transposed convolutions are
//! expressed in polyphase form for that reason).

mod layers;
mod optim;
mod params;

pub use layers::{
    attention, elu, BiLstm, Conv1d, LayerNorm, Linear, Lstm, PolyphaseUpsample, TransformerBlock,
};
pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use params::{Init, ParamStore, Scope};

use candle_core::{DType, Device, Tensor, D};
use ndarray::Array2;

use crate::error::Result;

pub const DEVICE: Device = Device::Cpu;

/// Flattens any tensor into `f64` values.
pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn from_array2(a: &Array2<f64>, dtype: DType) -> Result<Tensor> {
    let (r, c) = a.dim();
    let data: Vec<f64> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, (r, c), &DEVICE)?.to_dtype(dtype)?)
}

pub fn to_array2(t: &Tensor) -> Result<Array2<f64>> {
    let (r, c) = t.dims2()?;
    let v = to_vec_f64(t)?;
    Ok(Array2::from_shape_vec((r, c), v).expect("dims2 matches element count"))
}

pub fn from_f64(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, &DEVICE)?.to_dtype(dtype)?)
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}
