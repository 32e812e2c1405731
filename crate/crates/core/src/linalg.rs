use nalgebra::{DMatrix, DVector};

pub(crate) fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(crate::PROB_EPS, 1.0 - crate::PROB_EPS)
}

/// `Xᵀ diag(w) X` without materializing the weighted copy.
pub(crate) fn weighted_gram(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = x.clone();
    for mut col in scaled.column_iter_mut() {
        col.component_mul_assign(w);
    }
    x.transpose() * scaled
}

/// `Aᵀ diag(w) B`.
pub(crate) fn weighted_gram_cross(a: &DMatrix<f64>, w: &DVector<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut scaled = b.clone();
    for mut col in scaled.column_iter_mut() {
        col.component_mul_assign(w);
    }
    a.transpose() * scaled
}

/// Solves a symmetric positive (semi)definite system, adding `ridge` to the
/// diagonal. Falls back to LU when Cholesky fails.
pub(crate) fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>, ridge: f64) -> Option<DVector<f64>> {
    let mut m = a.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += ridge;
    }
    if let Some(ch) = m.clone().cholesky() {
        return Some(ch.solve(b));
    }
    m.lu().solve(b)
}

pub(crate) fn inverse_spd(a: &DMatrix<f64>, ridge: f64) -> Option<DMatrix<f64>> {
    let mut m = a.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += ridge;
    }
    if let Some(ch) = m.clone().cholesky() {
        return Some(ch.inverse());
    }
    m.try_inverse()
}

pub(crate) fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Columns that are (numerically) linear combinations of earlier ones,
/// found by a pivot-free Gram-Schmidt pass over the normalized columns.
pub(crate) fn dependent_columns(m: &DMatrix<f64>, tol: f64) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut bad = Vec::new();
    for (j, col) in m.column_iter().enumerate() {
        let norm = col.norm();
        if norm == 0.0 {
            bad.push(j);
            continue;
        }
        let mut v: DVector<f64> = col.into_owned() / norm;
        for b in &basis {
            let proj = b.dot(&v);
            v.axpy(-proj, b, 1.0);
        }
        let r = v.norm();
        if r < tol {
            bad.push(j);
        } else {
            basis.push(v / r);
        }
    }
    bad
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub(crate) fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Linear-interpolated quantile (type 7).
pub(crate) fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}
