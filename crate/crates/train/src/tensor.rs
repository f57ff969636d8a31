//! Conversions between ndarray (f64 loss space) and candle tensors (f32 model space).

use candle_core::{DType, Device, Tensor};
use kdbench_core::{Error, Result};
use ndarray::{Array2, Array4, ArrayD, IxDyn};

pub trait BackendExt<T> {
    fn be(self) -> Result<T>;
}

impl<T> BackendExt<T> for candle_core::Result<T> {
    fn be(self) -> Result<T> {
        self.map_err(|e| Error::Backend(e.to_string()))
    }
}

pub fn images_to_tensor(x: &Array4<f32>, dev: &Device) -> Result<Tensor> {
    let shape = x.dim();
    let data: Vec<f32> = x.iter().copied().collect();
    Tensor::from_vec(data, (shape.0, shape.1, shape.2, shape.3), dev).be()
}

pub fn tensor_to_array2(t: &Tensor) -> Result<Array2<f64>> {
    let (n, k) = t.dims2().be()?;
    let v: Vec<f32> = t.to_dtype(DType::F32).be()?.flatten_all().be()?.to_vec1().be()?;
    Ok(Array2::from_shape_vec((n, k), v.into_iter().map(f64::from).collect()).expect("shape"))
}

pub fn tensor_to_arrayd(t: &Tensor) -> Result<ArrayD<f64>> {
    let dims = t.dims().to_vec();
    let v: Vec<f32> = t.to_dtype(DType::F32).be()?.flatten_all().be()?.to_vec1().be()?;
    Ok(ArrayD::from_shape_vec(IxDyn(&dims), v.into_iter().map(f64::from).collect()).expect("shape"))
}

pub fn array_to_tensor(a: &ArrayD<f64>, dev: &Device) -> Result<Tensor> {
    let dims = a.shape().to_vec();
    let v: Vec<f32> = a.iter().map(|&x| x as f32).collect();
    Tensor::from_vec(v, dims, dev).be()
}

pub fn array2_to_tensor(a: &Array2<f64>, dev: &Device) -> Result<Tensor> {
    let (n, k) = a.dim();
    let v: Vec<f32> = a.iter().map(|&x| x as f32).collect();
    Tensor::from_vec(v, (n, k), dev).be()
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(f64::from(t.to_dtype(DType::F32).be()?.to_scalar::<f32>().be()?))
}

/// Sum of all elements is finite (NaN and ±inf propagate through the sum).
pub fn all_finite(t: &Tensor) -> Result<bool> {
    Ok(scalar(&t.sum_all().be()?)?.is_finite())
}
