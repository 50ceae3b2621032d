use crate::error::{Error, Result};
use crate::numeric::{double_center, gram, Matrix};

fn check_pair(k: &Matrix, l: &Matrix) -> Result<usize> {
    if k.rows() != k.cols() || l.rows() != l.cols() {
        return Err(Error::Dimension(format!(
            "HSIC needs square kernels, got {:?} and {:?}",
            k.shape(),
            l.shape()
        )));
    }
    if k.rows() != l.rows() {
        return Err(Error::Dimension(format!(
            "HSIC kernel sizes differ: {} vs {}",
            k.rows(),
            l.rows()
        )));
    }
    Ok(k.rows())
}

/// Biased HSIC: `vec(K′)·vec(L′) / (b−1)²` on double-centered kernels.
pub fn hsic_biased(k: &Matrix, l: &Matrix) -> Result<f64> {
    let b = check_pair(k, l)?;
    if b < 2 {
        return Err(Error::DegenerateSize(format!(
            "biased HSIC needs b >= 2, got {b}"
        )));
    }
    let kc = double_center(k)?;
    let lc = if std::ptr::eq(k, l) {
        kc.clone()
    } else {
        double_center(l)?
    };
    let denom = ((b - 1) * (b - 1)) as f64;
    Ok(kc.frobenius_dot(&lc)? / denom)
}

/// Unbiased HSIC₁ estimator on kernels with zeroed diagonals.
///
/// `[tr(K̃L̃) + (1ᵀK̃1)(1ᵀL̃1)/((n−1)(n−2)) − 2/(n−2)·1ᵀK̃L̃1] / (n(n−3))`.
/// The value can be negative.
pub fn hsic_unbiased(k: &Matrix, l: &Matrix) -> Result<f64> {
    let n = check_pair(k, l)?;
    if n < 4 {
        return Err(Error::DegenerateSize(format!(
            "unbiased HSIC needs n >= 4, got {n}"
        )));
    }
    let off = |m: &Matrix, i: usize, j: usize| if i == j { 0.0 } else { m.get(i, j) };

    // tr(K̃L̃) = Σ_ij K̃_ij L̃_ji
    let mut trace = 0.0;
    for i in 0..n {
        for j in 0..n {
            trace += off(k, i, j) * off(l, j, i);
        }
    }
    // 1ᵀK̃L̃1 = Σ_j (Σ_i K̃_ij)(Σ_m L̃_jm)
    let mut k_col = vec![0.0; n];
    let mut l_row = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            k_col[j] += off(k, i, j);
            l_row[i] += off(l, i, j);
        }
    }
    let k_sum: f64 = k_col.iter().sum();
    let l_sum: f64 = l_row.iter().sum();
    let cross: f64 = k_col.iter().zip(&l_row).fold(0.0, |a, (x, y)| a + x * y);

    let nf = n as f64;
    let middle = k_sum * l_sum / ((nf - 1.0) * (nf - 2.0));
    let last = 2.0 / (nf - 2.0) * cross;
    Ok((trace + middle - last) / (nf * (nf - 3.0)))
}

/// The three HSIC₁ terms of one activation pair: `(xy, xx, yy)`.
pub(crate) fn unbiased_terms(x: &Matrix, y: &Matrix) -> Result<(f64, f64, f64)> {
    if x.rows() != y.rows() {
        return Err(Error::Dimension(format!(
            "activation row counts differ: {} vs {}",
            x.rows(),
            y.rows()
        )));
    }
    let k = gram(x)?;
    let l = gram(y)?;
    Ok((
        hsic_unbiased(&k, &l)?,
        hsic_unbiased(&k, &k)?,
        hsic_unbiased(&l, &l)?,
    ))
}
