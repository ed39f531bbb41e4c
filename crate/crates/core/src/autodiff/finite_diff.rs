use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference Jacobian of `f` at `point`, shape `[out_len, in_len]`.
///
/// Column `i` is `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)`.
pub fn finite_diff_jacobian<F>(mut f: F, point: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    let n_in = point.len();
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(n_in);
    let mut n_out = None;
    for i in 0..n_in {
        let mut plus = point.data().to_vec();
        plus[i] += eps;
        let mut minus = point.data().to_vec();
        minus[i] -= eps;
        let fp = f(&Tensor::new(point.shape().to_vec(), plus)?)?;
        let fm = f(&Tensor::new(point.shape().to_vec(), minus)?)?;
        if fp.len() != fm.len() || n_out.is_some_and(|n| n != fp.len()) {
            return Err(Error::Invalid("function output length changed between evaluations".into()));
        }
        n_out = Some(fp.len());
        let col: Vec<f64> = fp.data().iter().zip(fm.data()).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("finite-difference evaluation".into()));
        }
        columns.push(col);
    }
    let n_out = n_out.unwrap_or(0);
    let mut jac = vec![0.0; n_out * n_in];
    for (i, col) in columns.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            jac[r * n_in + i] = *v;
        }
    }
    Tensor::new(vec![n_out, n_in], jac)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_gives_identity_matrix() {
        let x = Tensor::vector(vec![0.3, -1.0, 2.0]).unwrap();
        let j = finite_diff_jacobian(|t| Ok(t.clone()), &x, 1e-5).unwrap();
        assert_eq!(j.shape(), &[3, 3]);
        for r in 0..3 {
            for c in 0..3 {
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((j.data()[r * 3 + c] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn square_at_two() {
        let x = Tensor::scalar(2.0).unwrap();
        let j = finite_diff_jacobian(|t| Tensor::scalar(t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
        assert!((j.data()[0] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn linear_map_is_recovered() {
        let a = [[1.0, -2.0, 0.5], [3.0, 0.25, -1.0]];
        let x = Tensor::vector(vec![0.1, 0.2, 0.3]).unwrap();
        let j = finite_diff_jacobian(
            |t| {
                let d = t.data();
                Tensor::vector(a.iter().map(|row| row.iter().zip(d).map(|(p, q)| p * q).sum()).collect())
            },
            &x,
            1e-3,
        )
        .unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert!((j.data()[r * 3 + c] - a[r][c]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Tensor::scalar(1.0).unwrap();
        assert!(finite_diff_jacobian(|t| Ok(t.clone()), &x, 0.0).is_err());
        assert!(finite_diff_jacobian(|t| Ok(t.clone()), &x, -1.0).is_err());
    }
}
