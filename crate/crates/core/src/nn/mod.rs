//! Tensor-level plumbing shared by every network module.

pub mod ops;
pub mod params;

pub use ops::{concat_channels, conv2d, conv_transpose2d, softmax_last_dim, straight_through};
pub use params::{Init, ParamBuilder, ParamStore};

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

/// Fails with a numeric error naming `what` if `t` contains a NaN or infinity.
pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let values = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{what} contains non-finite value {bad}")));
    }
    Ok(())
}

/// Reads a scalar tensor of any float dtype as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
