//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    // Row-major fill so the draw order matches how the matrices are serialized.
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

pub fn gaussian_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Thin QR with a non-negative R diagonal. Returns `(Q, R)` with `Q` having
/// orthonormal columns.
pub fn thin_qr(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let cols = m.ncols();
    if m.nrows() < cols {
        return Err(Error::Singular {
            context: "orthonormalization",
            rank: m.nrows(),
            required: cols,
        });
    }
    let qr = m.clone().qr();
    let mut q = qr.q();
    let mut r = qr.r();
    let scale = (0..cols).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    let mut rank = 0;
    for i in 0..cols {
        if r[(i, i)].abs() > 1e-12 * scale.max(f64::MIN_POSITIVE) {
            rank += 1;
        }
        if r[(i, i)] < 0.0 {
            q.column_mut(i).neg_mut();
            r.row_mut(i).neg_mut();
        }
    }
    if rank < cols || scale == 0.0 {
        return Err(Error::Singular {
            context: "orthonormalization",
            rank,
            required: cols,
        });
    }
    Ok((q, r))
}

pub fn orthonormalize(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    thin_qr(m).map(|(q, _)| q)
}

pub fn random_orthonormal<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> DMatrix<f64> {
    loop {
        let g = gaussian_matrix(rng, n, k);
        if let Ok(q) = orthonormalize(&g) {
            return q;
        }
    }
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetric eigendecomposition with eigenvalues in descending order.
pub fn sym_eig_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(m.nrows(), n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).clone_owned();
        // Deterministic sign: largest-magnitude entry positive.
        let imax = col.iamax();
        if col[imax] < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(dst, &col);
    }
    (values, vectors)
}

/// Full SVD `m = U diag(s) Vᵀ` with singular values descending.
/// `U` is `r × p`, `V` is `c × p` where `p = min(r, c)`.
pub struct SortedSvd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
}

pub fn svd_sorted(m: &DMatrix<f64>) -> SortedSvd {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let p = svd.singular_values.len();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut uu = DMatrix::zeros(u.nrows(), p);
    let mut vv = DMatrix::zeros(vt.ncols(), p);
    let mut s = DVector::zeros(p);
    for (dst, &src) in order.iter().enumerate() {
        let mut uc = u.column(src).clone_owned();
        let mut vc = vt.row(src).transpose();
        let imax = vc.iamax();
        if vc[imax] < 0.0 {
            uc.neg_mut();
            vc.neg_mut();
        }
        uu.set_column(dst, &uc);
        vv.set_column(dst, &vc);
        s[dst] = svd.singular_values[src];
    }
    SortedSvd { u: uu, s, v: vv }
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

pub fn nuclear_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().sum()
}

/// Solve `a x = b` for symmetric positive-definite `a`.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>, context: &'static str) -> Result<DMatrix<f64>> {
    match Cholesky::new(symmetrize(a)) {
        Some(ch) => Ok(ch.solve(b)),
        None => Err(Error::Singular {
            context,
            rank: numerical_rank(a, 1e-12),
            required: a.nrows(),
        }),
    }
}

pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// Moore–Penrose pseudoinverse with singular values below `rel_tol · σ_max` dropped.
pub fn pinv(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let svd = svd_sorted(m);
    let smax = svd.s.iter().copied().fold(0.0, f64::max);
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    for i in 0..svd.s.len() {
        let s = svd.s[i];
        if s > rel_tol * smax && s > 0.0 {
            out += svd.v.column(i) * svd.u.column(i).transpose() / s;
        }
    }
    out
}

/// Largest deviation of `mᵀm` from the identity.
pub fn orthonormality_defect(m: &DMatrix<f64>) -> f64 {
    let g = m.transpose() * m;
    let mut worst = 0.0f64;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

/// Column-stack a list of vectors.
pub fn hstack(cols: &[DVector<f64>]) -> DMatrix<f64> {
    if cols.is_empty() {
        return DMatrix::zeros(0, 0);
    }
    DMatrix::from_columns(cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn qr_gives_orthonormal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = gaussian_matrix(&mut rng, 7, 3);
        let (q, r) = thin_qr(&g).unwrap();
        assert!(orthonormality_defect(&q) < 1e-12);
        assert!((&q * &r - &g).abs().max() < 1e-12);
        for i in 0..3 {
            assert!(r[(i, i)] > 0.0);
        }
    }

    #[test]
    fn qr_rejects_rank_collapse() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(matches!(thin_qr(&m), Err(Error::Singular { .. })));
    }

    #[test]
    fn sorted_svd_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = gaussian_matrix(&mut rng, 3, 6);
        let svd = svd_sorted(&g);
        let rec = &svd.u * DMatrix::from_diagonal(&svd.s) * svd.v.transpose();
        assert!((rec - &g).abs().max() < 1e-12);
        assert!(svd.s[0] >= svd.s[1] && svd.s[1] >= svd.s[2]);
    }

    #[test]
    fn pinv_matches_min_norm_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = gaussian_matrix(&mut rng, 2, 5);
        let direct = b.transpose() * (&b * b.transpose()).try_inverse().unwrap();
        assert!((pinv(&b, 1e-12) - direct).abs().max() < 1e-10);
    }
}
