//! Schur-complement marginalization and the linearized prior it leaves
//! behind on the variables that stay in the window.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Eigenvalues below `max_eig * EIG_CLAMP` are treated as zero when
/// inverting the marginalized block or factoring the reduced system.
const EIG_CLAMP: f64 = 1e-10;

fn sym_pinv(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    let max_eig = eig.eigenvalues.amax();
    if !max_eig.is_finite() {
        return Err(Error::Marginalization("non-finite Hessian block".into()));
    }
    let thresh = max_eig.max(1.0) * EIG_CLAMP;
    let inv_vals =
        DVector::from_iterator(
            eig.eigenvalues.len(),
            eig.eigenvalues
                .iter()
                .map(|&l| if l > thresh { 1.0 / l } else { 0.0 }),
        );
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose())
}

/// Eliminates the first `drop_dim` rows/columns of the normal equations
/// `H δx = b`, returning the reduced `(H', b')` over the remaining
/// variables.
///
/// `H` must be symmetric with the dropped variables ordered first. The
/// marginalized block is inverted through a clamped eigendecomposition, so
/// rank-deficient blocks (gauge freedom, unconstrained landmarks) are
/// handled by projection rather than failure.
pub fn schur_marginalize(
    h: &DMatrix<f64>,
    b: &DVector<f64>,
    drop_dim: usize,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = h.nrows();
    if h.ncols() != n || b.len() != n {
        return Err(Error::Marginalization(format!(
            "shape mismatch: H is {}x{}, b is {}",
            h.nrows(),
            h.ncols(),
            b.len()
        )));
    }
    if drop_dim == 0 {
        return Ok((h.clone(), b.clone()));
    }
    if drop_dim >= n {
        return Err(Error::Marginalization(format!(
            "cannot drop {drop_dim} of {n} dimensions"
        )));
    }
    let keep = n - drop_dim;
    let h_mm = h.view((0, 0), (drop_dim, drop_dim)).into_owned();
    let h_mr = h.view((0, drop_dim), (drop_dim, keep)).into_owned();
    let h_rm = h.view((drop_dim, 0), (keep, drop_dim)).into_owned();
    let h_rr = h.view((drop_dim, drop_dim), (keep, keep)).into_owned();
    let b_m = b.rows(0, drop_dim).into_owned();
    let b_r = b.rows(drop_dim, keep).into_owned();

    let h_mm_inv = sym_pinv(&h_mm)?;
    let h_red = &h_rr - &h_rm * &h_mm_inv * &h_mr;
    let b_red = b_r - h_rm * h_mm_inv * b_m;
    // symmetrize against roundoff drift
    let h_red = (&h_red + h_red.transpose()) * 0.5;
    Ok((h_red, b_red))
}

/// Linearized prior left by marginalization: `r(x) = r0 + J0 (x ⊟ x0)`.
///
/// Built from the reduced normal equations so that `J0ᵀJ0 = H` and
/// `J0ᵀ r0 = −b`; minimizing `½‖r‖²` over the retained variables
/// reproduces the marginal cost up to a constant. `keys` identifies the
/// frames the retained tangent blocks belong to; the owner computes the
/// boxminus against its stored linearization states.
#[derive(Debug, Clone)]
pub struct PriorFactor {
    pub keys: Vec<u64>,
    pub j0: DMatrix<f64>,
    pub r0: DVector<f64>,
}

impl PriorFactor {
    /// Square-roots `(H, b)` through a clamped symmetric eigendecomposition.
    pub fn from_normal_equations(
        keys: Vec<u64>,
        h: &DMatrix<f64>,
        b: &DVector<f64>,
    ) -> Result<Self> {
        let n = h.nrows();
        if h.ncols() != n || b.len() != n {
            return Err(Error::Marginalization("prior shape mismatch".into()));
        }
        let eig = h.clone().symmetric_eigen();
        let max_eig = eig.eigenvalues.amax();
        if !max_eig.is_finite() {
            return Err(Error::Marginalization("non-finite prior Hessian".into()));
        }
        let thresh = max_eig.max(1.0) * EIG_CLAMP;
        let sqrt_vals = DVector::from_iterator(
            n,
            eig.eigenvalues
                .iter()
                .map(|&l| if l > thresh { l.sqrt() } else { 0.0 }),
        );
        let inv_sqrt_vals = DVector::from_iterator(
            n,
            sqrt_vals
                .iter()
                .map(|&s| if s > 0.0 { 1.0 / s } else { 0.0 }),
        );
        let vt = eig.eigenvectors.transpose();
        let j0 = DMatrix::from_diagonal(&sqrt_vals) * &vt;
        let r0 = DMatrix::from_diagonal(&inv_sqrt_vals) * vt * (-b);
        Ok(Self { keys, j0, r0 })
    }

    pub fn dim(&self) -> usize {
        self.j0.ncols()
    }

    /// Residual at tangent offset `dx = x ⊟ x0` from the linearization point.
    pub fn residual(&self, dx: &DVector<f64>) -> DVector<f64> {
        &self.r0 + &self.j0 * dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_mat_eq(a: &DMatrix<f64>, b: &DMatrix<f64>, eps: f64) {
        assert_eq!(a.shape(), b.shape());
        assert!((a - b).amax() < eps, "max diff {}", (a - b).amax());
    }

    #[test]
    fn block_diagonal_marginalization_is_a_no_op() {
        // no cross terms: dropping the first block leaves the rest untouched
        let mut h = DMatrix::zeros(5, 5);
        h.view_mut((0, 0), (2, 2))
            .copy_from(&DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]));
        h.view_mut((2, 2), (3, 3)).copy_from(&DMatrix::from_row_slice(
            3,
            3,
            &[2.0, 0.5, 0.0, 0.5, 2.0, 0.1, 0.0, 0.1, 1.5],
        ));
        let b = DVector::from_row_slice(&[1.0, -1.0, 0.5, 0.2, -0.3]);
        let (h_red, b_red) = schur_marginalize(&h, &b, 2).unwrap();
        assert_mat_eq(&h_red, &h.view((2, 2), (3, 3)).into_owned(), 1e-14);
        assert!((b_red - b.rows(2, 3)).amax() < 1e-14);
    }

    #[test]
    fn chain_marginalization_matches_full_solve() {
        // three scalar states, unit-information factors:
        //   prior x0 = 0.3, links x1 - x0 = 1, x2 - x1 = 1
        // full normal equations, then marginalize x0 and re-solve for x1, x2
        let j_prior = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let j_l01 = DMatrix::from_row_slice(1, 3, &[-1.0, 1.0, 0.0]);
        let j_l12 = DMatrix::from_row_slice(1, 3, &[0.0, -1.0, 1.0]);
        let h = j_prior.transpose() * &j_prior
            + j_l01.transpose() * &j_l01
            + j_l12.transpose() * &j_l12;
        let b = j_prior.transpose() * DVector::from_element(1, 0.3)
            + j_l01.transpose() * DVector::from_element(1, 1.0)
            + j_l12.transpose() * DVector::from_element(1, 1.0);

        let full: DVector<f64> = h.clone().cholesky().unwrap().solve(&b);
        assert!((full[0] - 0.3).abs() < 1e-12);
        assert!((full[1] - 1.3).abs() < 1e-12);
        assert!((full[2] - 2.3).abs() < 1e-12);

        let (h_red, b_red) = schur_marginalize(&h, &b, 1).unwrap();
        let reduced = h_red.clone().cholesky().unwrap().solve(&b_red);
        assert!((reduced[0] - full[1]).abs() < 1e-9);
        assert!((reduced[1] - full[2]).abs() < 1e-9);

        // the prior factor reproduces the reduced quadratic:
        // minimizing ½‖r0 + J0 dx‖² alone recovers the same solution
        let prior = PriorFactor::from_normal_equations(vec![1, 2], &h_red, &b_red).unwrap();
        assert_mat_eq(&(prior.j0.transpose() * &prior.j0), &h_red, 1e-9);
        assert!((prior.j0.transpose() * &prior.r0 + &b_red).amax() < 1e-9);
        let dx = (prior.j0.transpose() * &prior.j0)
            .cholesky()
            .unwrap()
            .solve(&(-(prior.j0.transpose() * &prior.r0)));
        assert!((dx[0] - full[1]).abs() < 1e-9);
        assert!((dx[1] - full[2]).abs() < 1e-9);
        assert_eq!(prior.dim(), 2);
        assert!(prior.residual(&dx).norm() < 1e-9);
    }

    #[test]
    fn rank_deficient_block_is_projected() {
        // marginalized variable with zero information contributes nothing
        let h = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 3.0]);
        let b = DVector::from_row_slice(&[0.0, 1.5]);
        let (h_red, b_red) = schur_marginalize(&h, &b, 1).unwrap();
        assert!((h_red[(0, 0)] - 3.0).abs() < 1e-12);
        assert!((b_red[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn dropping_everything_or_bad_shapes_fails() {
        let h = DMatrix::identity(3, 3);
        let b = DVector::zeros(3);
        assert!(matches!(
            schur_marginalize(&h, &b, 3),
            Err(Error::Marginalization(_))
        ));
        let b_bad = DVector::zeros(2);
        assert!(matches!(
            schur_marginalize(&h, &b_bad, 1),
            Err(Error::Marginalization(_))
        ));
    }
}
