//! Plain (untraced) numeric kernels. The autodiff tape reuses these for its
//! forward pass so traced and untraced code paths can never drift apart.

use crate::error::{KdError, Result};
use crate::numkit::tensor::Tensor;

/// Floor applied to probabilities before a log. Keeps losses finite when a
/// class probability underflows to zero.
pub const LOG_FLOOR: f64 = 1e-12;

/// Probability vectors fed to the KL divergence must sum to one within this.
pub const SIMPLEX_TOL: f64 = 1e-9;

pub(crate) const GELU_COEF: f64 = 0.044715;
// sqrt(2/pi)
pub(crate) const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

/// C = A (m x n) * B (n x p), row-major.
pub(crate) fn matmul_slices(a: &[f64], m: usize, n: usize, b: &[f64], p: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), n * p);
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let out_row = &mut out[i * p..(i + 1) * p];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b[k * p..(k + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_slices(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub(crate) fn softmax_rows_slices(x: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    if let Some(index) = x.iter().position(|v| !v.is_finite()) {
        return Err(KdError::NonFinite { op: "softmax_rows", index });
    }
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let out_row = &mut out[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in out_row.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in out_row.iter_mut() {
            *o /= sum;
        }
    }
    Ok(out)
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    let inner = GELU_SCALE * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    let inner = GELU_SCALE * (x + GELU_COEF * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_SCALE * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

/// Row-wise softmax of a rank-1 or rank-2 tensor. Rejects non-finite input
/// with the offending flat index.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    let (rows, cols) = m.dims2();
    let data = softmax_rows_slices(m.data(), rows, cols)?;
    Tensor::new(m.shape().to_vec(), data)
}

/// Softmax of `logits / temperature`. With `temperature == 1` this is
/// bit-for-bit identical to [`softmax_rows`].
pub fn temperature_softmax(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(KdError::invalid(
            "temperature_softmax",
            format!("temperature must be finite and positive, got {temperature}"),
        ));
    }
    let scaled: Vec<f64> = logits.data().iter().map(|v| v / temperature).collect();
    let (rows, cols) = logits.dims2();
    let data = softmax_rows_slices(&scaled, rows, cols)?;
    Tensor::new(logits.shape().to_vec(), data)
}

pub(crate) fn cross_entropy_slices(p: &[f64], label: usize) -> Result<f64> {
    if label >= p.len() {
        return Err(KdError::invalid(
            "cross_entropy",
            format!("label {label} out of range for {} classes", p.len()),
        ));
    }
    Ok(-p[label].max(LOG_FLOOR).ln())
}

pub(crate) fn kl_div_slices(p: &[f64], q: &[f64]) -> Result<f64> {
    for (name, v) in [("p", p), ("q", q)] {
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(KdError::invalid(
                "kl_div",
                format!("{name} sums to {sum}, expected 1 within {SIMPLEX_TOL}"),
            ));
        }
    }
    let mut total = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(KdError::invalid(
                "kl_div",
                format!("q[{i}] == 0 but p[{i}] == {pi} > 0"),
            ));
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total)
}

pub(crate) fn mse_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Negative log likelihood of `label` under a probability vector, with the
/// probability floored at [`LOG_FLOOR`] before the log.
pub fn cross_entropy(probs: &Tensor, label: usize) -> Result<f64> {
    cross_entropy_slices(probs.data(), label)
}

/// KL(p || q) = sum_i p_i * ln(p_i / q_i), with the convention that terms
/// where p_i == 0 contribute zero. Errors if either vector strays from the
/// probability simplex or if q assigns zero mass where p does not.
pub fn kl_div(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(KdError::shape(
            "kl_div",
            format!("{:?} vs {:?}", p.shape(), q.shape()),
        ));
    }
    kl_div_slices(p.data(), q.data())
}

/// Sum of squared differences (no mean reduction).
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(KdError::shape(
            "mse",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(mse_slices(a.data(), b.data()))
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(data: Vec<f64>) -> Tensor {
        let n = data.len();
        Tensor::new(vec![n], data).unwrap()
    }

    #[test]
    fn softmax_two_logits() {
        let out = softmax_rows(&t1(vec![1.0, 0.0])).unwrap();
        assert_eq!(out.data(), &[0.7310585786300049, 0.2689414213699951]);
    }

    #[test]
    fn softmax_shift_invariant_row() {
        let a = softmax_rows(&t1(vec![100.0, 99.0])).unwrap();
        let b = softmax_rows(&t1(vec![1.0, 0.0])).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_nan_with_index() {
        let err = softmax_rows(&t1(vec![0.0, f64::NAN, 1.0])).unwrap_err();
        assert!(err.to_string().contains("index 1"), "{err}");
    }

    #[test]
    fn temperature_one_matches_softmax_bitwise() {
        let logits = t1(vec![0.3, -1.2, 2.7, 0.0]);
        let plain = softmax_rows(&logits).unwrap();
        let tempered = temperature_softmax(&logits, 1.0).unwrap();
        assert_eq!(plain.data(), tempered.data());
    }

    #[test]
    fn temperature_two_flattens() {
        let out = temperature_softmax(&t1(vec![1.0, 0.0]), 2.0).unwrap();
        assert_eq!(out.data(), &[0.6224593312018546, 0.37754066879814546]);
    }

    #[test]
    fn temperature_must_be_positive() {
        assert!(temperature_softmax(&t1(vec![1.0]), 0.0).is_err());
        assert!(temperature_softmax(&t1(vec![1.0]), -2.0).is_err());
        assert!(temperature_softmax(&t1(vec![1.0]), f64::NAN).is_err());
    }

    #[test]
    fn cross_entropy_of_softmax() {
        // -ln(softmax([1,0])[1]) = ln(1 + e)
        let probs = softmax_rows(&t1(vec![1.0, 0.0])).unwrap();
        let ce = cross_entropy(&probs, 1).unwrap();
        assert!((ce - 1.3132616875182228).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_floors_zero_probability() {
        let ce = cross_entropy(&t1(vec![0.0, 1.0]), 0).unwrap();
        assert!((ce - -(LOG_FLOOR.ln())).abs() < 1e-9);
        assert!(ce.is_finite());
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        assert!(cross_entropy(&t1(vec![0.5, 0.5]), 2).is_err());
    }

    #[test]
    fn kl_known_value() {
        // KL([.5,.5] || [.9,.1]) = 0.5 ln(5/9) + 0.5 ln 5 = ln(5/3)
        let v = kl_div(&t1(vec![0.5, 0.5]), &t1(vec![0.9, 0.1])).unwrap();
        assert!((v - 0.5108256237659907).abs() < 1e-15);
    }

    #[test]
    fn kl_zero_p_terms_are_skipped() {
        let v = kl_div(&t1(vec![0.0, 1.0]), &t1(vec![0.5, 0.5])).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn kl_rejects_zero_q_with_mass_in_p() {
        let err = kl_div(&t1(vec![0.5, 0.5]), &t1(vec![1.0, 0.0])).unwrap_err();
        assert!(err.to_string().contains("q[1]"), "{err}");
    }

    #[test]
    fn kl_rejects_non_simplex() {
        assert!(kl_div(&t1(vec![0.7, 0.7]), &t1(vec![0.5, 0.5])).is_err());
        assert!(kl_div(&t1(vec![0.5, 0.5]), &t1(vec![0.2, 0.2])).is_err());
    }

    #[test]
    fn mse_is_sum_of_squares() {
        let v = mse(&t1(vec![0.3, -0.7]), &t1(vec![0.1, 0.1])).unwrap();
        assert!((v - 0.68).abs() < 1e-15);
    }

    #[test]
    fn mse_shape_mismatch() {
        let a = Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap();
        assert!(mse(&a, &t1(vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[5.0]), 0);
    }
}
