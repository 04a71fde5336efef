//! Deterministic parameter initialization. The tensor backend's built-in
//! initializers are not seedable, so every parameter is overwritten from a
//! ChaCha stream after construction, by name, in sorted order.

use candle_core::Tensor;
use candle_nn::VarMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

fn trunc_normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            loop {
                // Box-Muller, resampled beyond 2 std
                let u1: f64 = rng.random_range(f64::EPSILON..1.0);
                let u2: f64 = rng.random_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                if z.abs() <= 2.0 {
                    return z * std;
                }
            }
        })
        .collect()
}

/// Fills every var in `varmap` deterministically from `seed`.
///
/// Rules, by variable name:
/// - layer-norm weights (`ln*/norm .weight`) -> 1, biases -> 0
/// - PNet grouped last layers (`*pnet.last.*`) -> 0 (zero-init identity)
/// - all other biases -> 0
/// - remaining weights / embeddings / codebook -> truncated normal, std 0.02
pub fn init_params(varmap: &VarMap, seed: u64) -> Result<()> {
    let data = varmap.data().lock().unwrap();
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in names {
        let var = &data[name];
        let shape = var.shape().clone();
        let n = shape.elem_count();
        let dtype = var.dtype();
        let dev = var.device().clone();

        let is_norm_param = {
            let segs: Vec<&str> = name.split('.').collect();
            segs.len() >= 2 && (segs[segs.len() - 2].starts_with("ln") || segs[segs.len() - 2] == "norm")
        };
        let values: Vec<f64> = if name.contains("pnet") && name.contains(".last.") {
            vec![0.0; n]
        } else if is_norm_param {
            if name.ends_with(".weight") {
                vec![1.0; n]
            } else {
                vec![0.0; n]
            }
        } else if name.ends_with(".bias") {
            vec![0.0; n]
        } else {
            trunc_normal(&mut rng, n, 0.02)
        };
        let t = Tensor::from_vec(values, shape, &dev)?.to_dtype(dtype)?;
        var.set(&t)?;
    }
    Ok(())
}
