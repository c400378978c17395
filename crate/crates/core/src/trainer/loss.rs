//! Symmetric InfoNCE over a batch of paired unit vectors.

use ndarray::Array2;

use crate::error::{Error, Result};

const UNIT_TOLERANCE: f64 = 1e-6;

fn check_inputs(v: &Array2<f64>, t: &Array2<f64>, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if v.nrows() == 0 {
        return Err(Error::invalid("contrastive batch is empty"));
    }
    if v.shape() != t.shape() {
        return Err(Error::invalid(format!(
            "video batch {:?} and text batch {:?} differ in shape",
            v.shape(),
            t.shape()
        )));
    }
    for (side, m) in [("video", v), ("text", t)] {
        for (i, row) in m.rows().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if (n - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::Validation(format!(
                    "{side} row {i} has norm {n}, expected unit length"
                )));
            }
        }
    }
    Ok(())
}

/// Row-wise softmax and log-sum-exp.
fn softmax_rows(s: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut p = s.clone();
    let mut lse = Vec::with_capacity(s.nrows());
    for mut row in p.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
        lse.push(max + sum.ln());
    }
    (p, lse)
}

/// Mean of the video-to-text and text-to-video cross-entropies over
/// `v t^T / tau`, with positives on the diagonal.
pub fn info_nce_loss(v: &Array2<f64>, t: &Array2<f64>, tau: f64) -> Result<f64> {
    Ok(info_nce_with_grad(v, t, tau)?.0)
}

/// Loss plus its gradients with respect to `v` and `t`.
pub(crate) fn info_nce_with_grad(
    v: &Array2<f64>,
    t: &Array2<f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_inputs(v, t, tau)?;
    let b = v.nrows();
    let s = v.dot(&t.t()) / tau;
    let (p_rows, lse_rows) = softmax_rows(&s);
    let st = s.t().to_owned();
    let (p_cols_t, lse_cols) = softmax_rows(&st);

    let mut v2t = 0.0;
    let mut t2v = 0.0;
    for i in 0..b {
        v2t += lse_rows[i] - s[[i, i]];
        t2v += lse_cols[i] - s[[i, i]];
    }
    let loss = 0.5 * (v2t + t2v) / b as f64;

    let mut ds = p_rows + p_cols_t.t();
    for i in 0..b {
        ds[[i, i]] -= 2.0;
    }
    ds *= 0.5 / b as f64;
    let dv = ds.dot(t) / tau;
    let dt = ds.t().dot(v) / tau;
    Ok((loss.max(0.0), dv, dt))
}

/// Normalizes every row to unit length.
#[cfg(test)]
pub(crate) fn normalize_rows(m: &mut Array2<f64>) -> Result<()> {
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroVector);
        }
        row /= n;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn unit_rows(raw: Vec<f64>, b: usize, d: usize) -> Array2<f64> {
        let mut m = Array2::from_shape_vec((b, d), raw).unwrap();
        normalize_rows(&mut m).unwrap();
        m
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let v = array![[0.6, 0.8]];
        assert_eq!(info_nce_loss(&v, &v, 0.05).unwrap(), 0.0);
    }

    #[test]
    fn two_orthogonal_pairs() {
        let v = array![[1.0, 0.0], [0.0, 1.0]];
        let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        let got = info_nce_loss(&v, &v, 1.0).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn rejects_unnormalized_rows() {
        let v = array![[1.0, 1.0]];
        assert!(matches!(info_nce_loss(&v, &v, 1.0), Err(Error::Validation(_))));
        assert!(info_nce_loss(&array![[1.0, 0.0]], &array![[1.0, 0.0]], 0.0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let v = unit_rows(vec![0.3, -0.2, 0.9, 0.5, 0.5, -0.1, -0.7, 0.2, 0.4], 3, 3);
        let t = unit_rows(vec![0.1, 0.8, -0.3, 0.6, -0.4, 0.2, 0.2, 0.2, 0.9], 3, 3);
        let (_, dv, dt) = info_nce_with_grad(&v, &t, 0.5).unwrap();
        // raw loss without the unit check so single coordinates can move
        let raw = |v: &Array2<f64>, t: &Array2<f64>| {
            let s = v.dot(&t.t()) / 0.5;
            let (_, lr) = softmax_rows(&s);
            let (_, lc) = softmax_rows(&s.t().to_owned());
            (0..3).map(|i| lr[i] + lc[i] - 2.0 * s[[i, i]]).sum::<f64>() / 6.0
        };
        let eps = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let (mut a, mut b) = (v.clone(), v.clone());
                a[[i, j]] += eps;
                b[[i, j]] -= eps;
                let fd = (raw(&a, &t) - raw(&b, &t)) / (2.0 * eps);
                assert!((fd - dv[[i, j]]).abs() < 1e-8);
                let (mut a, mut b) = (t.clone(), t.clone());
                a[[i, j]] += eps;
                b[[i, j]] -= eps;
                let fd = (raw(&v, &a) - raw(&v, &b)) / (2.0 * eps);
                assert!((fd - dt[[i, j]]).abs() < 1e-8);
            }
        }
    }

    proptest! {
        #[test]
        fn nonnegative_and_permutation_invariant(
            raw in prop::collection::vec(-1.0f64..1.0, 24),
            shift in 1usize..4,
        ) {
            let v = unit_rows(raw[..12].iter().map(|x| x + 1e-3).collect(), 4, 3);
            let t = unit_rows(raw[12..].iter().map(|x| x - 1e-3).collect(), 4, 3);
            let l = info_nce_loss(&v, &t, 0.1).unwrap();
            prop_assert!(l >= 0.0);
            let perm: Vec<usize> = (0..4).map(|i| (i + shift) % 4).collect();
            let pv = v.select(ndarray::Axis(0), &perm);
            let pt = t.select(ndarray::Axis(0), &perm);
            let lp = info_nce_loss(&pv, &pt, 0.1).unwrap();
            prop_assert!((l - lp).abs() < 1e-12);
        }
    }
}
