//! Central finite-difference oracle for gradient verification.

use super::{backward, Scalar, Tensor, TensorError, TensorResult};

/// Compare the analytic gradient of `f` at `x` against central differences
/// over every coordinate; returns the worst relative error.
///
/// `f` must be pure and `x` a parameter tensor. Relative error uses
/// `|a - n| / max(|a|, |n|)` with an absolute fallback near zero.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> TensorResult<f64>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> TensorResult<Tensor<T>>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_diff_check_sampled(f, x, eps, &coords)
}

/// Same as [`finite_diff_check`] but only probes the listed coordinates —
/// for composite losses where bumping every parameter is too slow.
pub fn finite_diff_check_sampled<T, F>(
    f: F,
    x: &Tensor<T>,
    eps: f64,
    coords: &[usize],
) -> TensorResult<f64>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> TensorResult<Tensor<T>>,
{
    if !x.is_param() {
        return Err(TensorError::NotAParameter);
    }
    let loss = f(x)?;
    if loss.len() != 1 {
        return Err(TensorError::NonScalarLoss { len: loss.len() });
    }
    let gm = backward(&loss)?;
    let analytic: Vec<f64> = match gm.get(x) {
        Some(g) => g.data_f64(),
        None => vec![0.0; x.len()],
    };

    // Gradients below the central-difference resolution floor are compared
    // absolutely; cancellation noise makes their relative error meaningless.
    // The floor scales with |f| because the difference quotient's noise does.
    let floor = T::machine_eps().powf(1.0 / 3.0) * loss.item().to_f64().abs().max(1.0);

    let base = x.data().to_vec();
    let probe = |i: usize, eps: f64| -> TensorResult<f64> {
        let mut plus = base.clone();
        plus[i] = T::from_f64(plus[i].to_f64() + eps);
        let mut minus = base.clone();
        minus[i] = T::from_f64(minus[i].to_f64() - eps);
        let fp = f(&x.with_data(plus)?)?.item().to_f64();
        let fm = f(&x.with_data(minus)?)?.item().to_f64();
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        let scale = a.abs().max(numeric.abs());
        Ok(if scale < floor {
            (a - numeric).abs()
        } else {
            (a - numeric).abs() / scale
        })
    };

    let mut worst = 0.0f64;
    for &i in coords {
        if i >= base.len() {
            return Err(TensorError::IndexOutOfRange {
                index: i,
                bound: base.len(),
            });
        }
        let mut err = probe(i, eps)?;
        // Truncation-limited coordinates want a smaller step, noise-limited a
        // larger one; retry on a short ladder before trusting a bad reading.
        let good_enough = T::machine_eps().powf(1.0 / 3.0);
        if err > good_enough {
            for scale in [0.25, 4.0, 1.0 / 16.0, 1.0 / 64.0] {
                err = err.min(probe(i, eps * scale)?);
                if err <= good_enough {
                    break;
                }
            }
        }
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

/// Distance in representable `f32` values between two floats; 0 means equal.
pub fn ulp_distance_f32(a: f32, b: f32) -> u64 {
    if a == b {
        return 0;
    }
    if a.is_nan() || b.is_nan() {
        return u64::MAX;
    }
    let ord = |f: f32| -> i64 {
        let bits = f.to_bits();
        let mag = (bits & 0x7fff_ffff) as i64;
        if bits >> 31 == 1 {
            -mag
        } else {
            mag
        }
    };
    (ord(a) - ord(b)).unsigned_abs()
}
