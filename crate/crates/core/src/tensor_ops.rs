//! Small differentiable tensor helpers shared across modules.

use candle_core::{DType, Device, Tensor, D};

use crate::error::Result;

/// Rowwise L2 normalization along the last dim. Rows with norm below `eps`
/// map to the zero vector.
pub fn l2_normalize_guarded(t: &Tensor, eps: f64) -> Result<Tensor> {
    let norm = t.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let eps_t = Tensor::full(eps, norm.shape(), norm.device())?.to_dtype(norm.dtype())?;
    let denom = norm.maximum(&eps_t)?;
    let mask = norm.gt(&eps_t)?.to_dtype(t.dtype())?;
    Ok(t.broadcast_div(&denom)?.broadcast_mul(&mask)?)
}

/// Rowwise L2 normalization; assumes nonzero rows (norm clamped at 1e-12).
pub fn l2_normalize(t: &Tensor) -> Result<Tensor> {
    let norm = t.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let eps = Tensor::full(1e-12, norm.shape(), norm.device())?.to_dtype(norm.dtype())?;
    Ok(t.broadcast_div(&norm.maximum(&eps)?)?)
}

/// Numerically stable softplus: log(1 + e^z) = max(z, 0) + log(1 + e^{-|z|}).
pub fn softplus(z: &Tensor) -> Result<Tensor> {
    let relu = z.relu()?;
    let nabs = z.abs()?.neg()?;
    Ok((relu + nabs.exp()?.affine(1.0, 1.0)?.log()?)?)
}

/// Bilinear interpolation matrix `[out_len, in_len]` (align_corners = false,
/// clamped at borders). Matches `imaging::PixelImage::resize`.
pub fn interp_matrix(in_len: usize, out_len: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let mut rows = vec![0f64; out_len * in_len];
    let s = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let f = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (in_len - 1) as f64);
        let i0 = f.floor() as usize;
        let i1 = (i0 + 1).min(in_len - 1);
        let w = f - i0 as f64;
        rows[o * in_len + i0] += 1.0 - w;
        rows[o * in_len + i1] += w;
    }
    Ok(Tensor::from_vec(rows, (out_len, in_len), dev)?.to_dtype(dtype)?)
}

/// Bilinear resize of `[.., H, W]` to `[.., out_h, out_w]` via interpolation
/// matrices; differentiable.
pub fn bilinear_resize(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let dims = t.dims();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    if h == out_h && w == out_w {
        return Ok(t.clone());
    }
    let rh = interp_matrix(h, out_h, t.dtype(), t.device())?;
    let rw_t = interp_matrix(w, out_w, t.dtype(), t.device())?.t()?;
    let tmp = rh.broadcast_matmul(t)?;
    Ok(tmp.broadcast_matmul(&rw_t)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn softplus_at_zero_is_ln2() {
        let z = Tensor::zeros((1,), DType::F64, &Device::Cpu).unwrap();
        let v = softplus(&z).unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn softplus_large_negative_goes_to_zero() {
        let z = Tensor::full(-60f64, (1,), &Device::Cpu).unwrap();
        let v = softplus(&z).unwrap().to_vec1::<f64>().unwrap()[0];
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn normalize_guard_zero_rows() {
        let t = Tensor::from_vec(vec![3f64, 4.0, 0.0, 0.0], (2, 2), &Device::Cpu).unwrap();
        let n = l2_normalize_guarded(&t, 1e-12).unwrap();
        let v = n.to_vec2::<f64>().unwrap();
        assert!((v[0][0] - 0.6).abs() < 1e-12 && (v[0][1] - 0.8).abs() < 1e-12);
        assert_eq!(v[1], vec![0.0, 0.0]);
    }

    #[test]
    fn interp_matrix_rows_sum_to_one() {
        let m = interp_matrix(7, 13, DType::F64, &Device::Cpu).unwrap();
        let sums = m.sum(1).unwrap().to_vec1::<f64>().unwrap();
        for s in sums {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_resize_constant_preserved() {
        let t = Tensor::full(0.37f32, (1, 2, 5, 5), &Device::Cpu).unwrap();
        let r = bilinear_resize(&t, 9, 3).unwrap();
        assert_eq!(r.dims(), &[1, 2, 9, 3]);
        let flat = r.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for v in flat {
            assert!((v - 0.37).abs() < 1e-6);
        }
    }
}
