//! Spin angular momentum matrices and their embedding into the
//! electron-nuclear product space.
//!
//! Basis convention everywhere in this crate: single-spin states are ordered
//! by descending projection (`m = s, s-1, ..., -s`). For the S=1, I=1 product
//! space the electron projection is the outer (slow) index, so index
//! `3 * e + n` holds `|mS, mI>` with `mS = 1 - e` and `mI = 1 - n`.

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

pub type Mat = Array2<C64>;

/// Dimension of a single spin-1 space.
pub const SPIN1_DIM: usize = 3;
/// Dimension of one `|mS, mI>` triplet manifold.
pub const PRODUCT_DIM: usize = SPIN1_DIM * SPIN1_DIM;

/// Projections of a spin-1 state in basis order.
pub const SPIN1_PROJECTIONS: [i8; 3] = [1, 0, -1];

/// Index of `|mS, mI>` in the 9-dimensional product basis.
pub fn product_index(ms: i8, mi: i8) -> usize {
    debug_assert!((-1..=1).contains(&ms) && (-1..=1).contains(&mi));
    3 * (1 - ms) as usize + (1 - mi) as usize
}

/// Inverse of [`product_index`].
pub fn product_label(index: usize) -> (i8, i8) {
    debug_assert!(index < PRODUCT_DIM);
    (1 - (index / 3) as i8, 1 - (index % 3) as i8)
}

#[derive(Clone, Debug)]
pub struct SpinOperatorSet {
    pub s: f64,
    pub sx: Mat,
    pub sy: Mat,
    pub sz: Mat,
}

impl SpinOperatorSet {
    pub fn dim(&self) -> usize {
        self.sz.nrows()
    }

    pub fn identity(&self) -> Mat {
        Array2::eye(self.dim())
    }

    /// sx^2 + sy^2 + sz^2
    pub fn casimir(&self) -> Mat {
        self.sx.dot(&self.sx) + self.sy.dot(&self.sy) + self.sz.dot(&self.sz)
    }
}

/// Angular momentum matrices for spin `s` (hbar = 1).
pub fn spin_matrices(s: f64) -> Result<SpinOperatorSet> {
    let twice = 2.0 * s;
    if !s.is_finite() || s < 0.0 || (twice - twice.round()).abs() > 1e-12 {
        return Err(Error::InvalidSpin(s));
    }
    let dim = twice.round() as usize + 1;
    let m = |k: usize| s - k as f64;

    let mut sz = Array2::<C64>::zeros((dim, dim));
    let mut raise = Array2::<C64>::zeros((dim, dim));
    for k in 0..dim {
        sz[[k, k]] = C64::new(m(k), 0.0);
        if k > 0 {
            // <m+1| S+ |m>, row k-1 holds projection m(k)+1
            let mk = m(k);
            raise[[k - 1, k]] = C64::new((s * (s + 1.0) - mk * (mk + 1.0)).sqrt(), 0.0);
        }
    }
    let lower = dagger(&raise.view());
    let sx = (&raise + &lower).mapv(|z| z * 0.5);
    let sy = (&raise - &lower).mapv(|z| z * C64::new(0.0, -0.5));
    Ok(SpinOperatorSet { s, sx, sy, sz })
}

/// Conjugate transpose.
pub fn dagger(a: &ArrayView2<C64>) -> Mat {
    a.t().mapv(|z| z.conj())
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &ArrayView2<C64>, b: &ArrayView2<C64>) -> Mat {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let mut out = Array2::<C64>::zeros((ar * br, ac * bc));
    for ((i, j), &x) in a.indexed_iter() {
        if x == C64::new(0.0, 0.0) {
            continue;
        }
        out.slice_mut(ndarray::s![i * br..(i + 1) * br, j * bc..(j + 1) * bc])
            .assign(&b.mapv(|y| x * y));
    }
    out
}

/// Largest elementwise modulus of `a - a^dagger`.
pub fn hermiticity_defect(a: &ArrayView2<C64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((a[[i, j]] - a[[j, i]].conj()).norm());
        }
    }
    worst
}

/// An operator on the 9-dimensional `|mS, mI>` space of one triplet manifold.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeOperator {
    pub matrix: Mat,
}

impl CompositeOperator {
    pub fn zeros() -> Self {
        Self {
            matrix: Array2::zeros((PRODUCT_DIM, PRODUCT_DIM)),
        }
    }

    pub fn view(&self) -> ArrayView2<'_, C64> {
        self.matrix.view()
    }
}

fn check_spin1(op: &Mat) -> Result<()> {
    for d in [op.nrows(), op.ncols()] {
        if d != SPIN1_DIM {
            return Err(Error::DimensionMismatch {
                expected: SPIN1_DIM,
                found: d,
            });
        }
    }
    Ok(())
}

/// Lift electron and/or nuclear operators into the product space.
///
/// A missing factor is replaced by the identity; with both missing the
/// result is the 9x9 identity.
pub fn embed(op_s: Option<&Mat>, op_i: Option<&Mat>) -> Result<CompositeOperator> {
    let id: Mat = Array2::eye(SPIN1_DIM);
    if let Some(a) = op_s {
        check_spin1(a)?;
    }
    if let Some(b) = op_i {
        check_spin1(b)?;
    }
    let a = op_s.unwrap_or(&id);
    let b = op_i.unwrap_or(&id);
    Ok(CompositeOperator {
        matrix: kron(&a.view(), &b.view()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray_linalg::{Eigh, UPLO};

    fn max_abs(a: &Mat) -> f64 {
        a.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    fn commutator(a: &Mat, b: &Mat) -> Mat {
        a.dot(b) - b.dot(a)
    }

    #[test]
    fn spin_one_sz_is_diagonal_descending() {
        let ops = spin_matrices(1.0).unwrap();
        for (k, m) in [1.0, 0.0, -1.0].iter().enumerate() {
            assert_eq!(ops.sz[[k, k]], C64::new(*m, 0.0));
        }
        assert_eq!(ops.dim(), 3);
    }

    #[test]
    fn spin_one_sx_ladder_elements() {
        // <m'|Sx|m> = sqrt(s(s+1) - m(m+1)) / 2 for m' = m+1
        let ops = spin_matrices(1.0).unwrap();
        let expected = (2.0_f64 - 0.0).sqrt() / 2.0;
        assert_abs_diff_eq!(ops.sx[[0, 1]].re, expected, epsilon = 1e-15);
        assert_abs_diff_eq!(ops.sx[[0, 1]].re, 1.0 / 2.0_f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(ops.sx[[1, 2]].re, expected, epsilon = 1e-15);
        assert_eq!(ops.sx[[0, 2]], C64::new(0.0, 0.0));
    }

    #[test]
    fn algebra_holds_for_supported_spins() {
        for s in [0.5, 1.0] {
            let ops = spin_matrices(s).unwrap();
            let i = C64::new(0.0, 1.0);
            let id = ops.identity();
            for (a, b, c) in [
                (&ops.sx, &ops.sy, &ops.sz),
                (&ops.sy, &ops.sz, &ops.sx),
                (&ops.sz, &ops.sx, &ops.sy),
            ] {
                let diff = commutator(a, b) - c.mapv(|z| z * i);
                assert!(max_abs(&diff) <= 1e-12, "s={s}");
            }
            for op in [&ops.sx, &ops.sy, &ops.sz] {
                assert!(hermiticity_defect(&op.view()) <= 1e-12);
            }
            let casimir = ops.casimir() - id.mapv(|z| z * s * (s + 1.0));
            assert!(max_abs(&casimir) <= 1e-12);
        }
    }

    #[test]
    fn rejects_bad_spin() {
        assert!(matches!(spin_matrices(-1.0), Err(Error::InvalidSpin(_))));
        assert!(matches!(spin_matrices(0.3), Err(Error::InvalidSpin(_))));
        assert!(spin_matrices(f64::NAN).is_err());
    }

    #[test]
    fn embed_places_factors_in_outer_and_inner_slots() {
        let ops = spin_matrices(1.0).unwrap();
        let sz = embed(Some(&ops.sz), None).unwrap();
        let iz = embed(None, Some(&ops.sz)).unwrap();
        let want_sz = [1., 1., 1., 0., 0., 0., -1., -1., -1.];
        let want_iz = [1., 0., -1., 1., 0., -1., 1., 0., -1.];
        for k in 0..9 {
            assert_eq!(sz.matrix[[k, k]].re, want_sz[k]);
            assert_eq!(iz.matrix[[k, k]].re, want_iz[k]);
        }
        let both = embed(Some(&ops.sz), Some(&ops.sz)).unwrap();
        assert_eq!(both.matrix.diag().sum(), C64::new(0.0, 0.0));
    }

    #[test]
    fn embed_labels_match_index_helpers() {
        let ops = spin_matrices(1.0).unwrap();
        let sz = embed(Some(&ops.sz), None).unwrap();
        let iz = embed(None, Some(&ops.sz)).unwrap();
        for k in 0..PRODUCT_DIM {
            let (ms, mi) = product_label(k);
            assert_eq!(product_index(ms, mi), k);
            assert_eq!(sz.matrix[[k, k]].re, ms as f64);
            assert_eq!(iz.matrix[[k, k]].re, mi as f64);
        }
    }

    #[test]
    fn embed_rejects_wrong_dimension() {
        let half = spin_matrices(0.5).unwrap();
        let err = embed(Some(&half.sx), None).unwrap_err();
        assert!(matches!(
            err,
            Error::DimensionMismatch {
                expected: 3,
                found: 2
            }
        ));
    }

    #[test]
    fn embedded_factors_commute_and_keep_spectra() {
        let ops = spin_matrices(1.0).unwrap();
        for a in [&ops.sx, &ops.sy, &ops.sz] {
            let ea = embed(Some(a), None).unwrap().matrix;
            for b in [&ops.sx, &ops.sy, &ops.sz] {
                let eb = embed(None, Some(b)).unwrap().matrix;
                assert!(max_abs(&commutator(&ea, &eb)) <= 1e-12);
            }
            assert!(hermiticity_defect(&ea.view()) <= 1e-12);
            let (vals, _) = ea.eigh(UPLO::Upper).unwrap();
            let (base, _) = a.eigh(UPLO::Upper).unwrap();
            for (k, v) in vals.iter().enumerate() {
                assert_abs_diff_eq!(*v, base[k / 3], epsilon = 1e-12);
            }
        }
    }
}
