//! Small dense linear-algebra helpers shared by the estimators.

/// Cholesky factorization (lower triangle, row-major) that reports the
/// first non-positive pivot: the index of the first column that is linearly
/// dependent on its predecessors.
pub(crate) fn cholesky_with_failure(a: &[f64], k: usize) -> Result<Vec<f64>, usize> {
    let mut l = vec![0.0f64; k * k];
    for j in 0..k {
        let mut d = a[j * k + j];
        for p in 0..j {
            d -= l[j * k + p] * l[j * k + p];
        }
        if d <= 1e-12 * a[j * k + j].abs().max(1e-300) {
            return Err(j);
        }
        let dj = d.sqrt();
        l[j * k + j] = dj;
        for i in (j + 1)..k {
            let mut s = a[i * k + j];
            for p in 0..j {
                s -= l[i * k + p] * l[j * k + p];
            }
            l[i * k + j] = s / dj;
        }
    }
    Ok(l)
}

pub(crate) fn chol_solve(l: &[f64], k: usize, b: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; k];
    for i in 0..k {
        let mut s = b[i];
        for p in 0..i {
            s -= l[i * k + p] * z[p];
        }
        z[i] = s / l[i * k + i];
    }
    let mut x = vec![0.0; k];
    for i in (0..k).rev() {
        let mut s = z[i];
        for p in (i + 1)..k {
            s -= l[p * k + i] * x[p];
        }
        x[i] = s / l[i * k + i];
    }
    x
}

pub(crate) fn chol_inverse(l: &[f64], k: usize) -> Vec<f64> {
    let mut inv = vec![0.0; k * k];
    for j in 0..k {
        let mut e = vec![0.0; k];
        e[j] = 1.0;
        let col = chol_solve(l, k, &e);
        for i in 0..k {
            inv[i * k + j] = col[i];
        }
    }
    inv
}
