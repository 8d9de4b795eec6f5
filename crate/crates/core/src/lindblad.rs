//! 21-level Lindblad model of the optically pumped NV center with its ¹⁴N
//! nucleus: collapse channels, Liouvillian assembly, steady state, time
//! propagation and nuclear polarization readout.
//!
//! State layout: indices 0-8 are ground `|g, mS, mI>`, 9-17 excited
//! `|e, mS, mI>` (both in [`crate::spin`] product order) and 18-20 the
//! singlet `|s, mI>` with `mI = +1, 0, -1`. Time is in microseconds, rates
//! in MHz (1/µs).

use std::f64::consts::PI;

use ndarray::{s, Array1, Array2, ArrayView2};
use ndarray_linalg::{Eigh, FactorizeInto, Inverse, ReciprocalConditionNum, Solve, UPLO};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::hamiltonian::{
    build_excited_hamiltonian, build_ground_hamiltonian, build_singlet_hamiltonian, Manifold,
    SystemParams,
};
use crate::spin::{hermiticity_defect, product_index, Mat, PRODUCT_DIM, SPIN1_PROJECTIONS};

pub const N_STATES: usize = 21;
pub const N_LIOUVILLE: usize = N_STATES * N_STATES;

const GROUND_OFFSET: usize = 0;
const EXCITED_OFFSET: usize = PRODUCT_DIM;
const SINGLET_OFFSET: usize = 2 * PRODUCT_DIM;

pub fn ground_index(ms: i8, mi: i8) -> usize {
    GROUND_OFFSET + product_index(ms, mi)
}

pub fn excited_index(ms: i8, mi: i8) -> usize {
    EXCITED_OFFSET + product_index(ms, mi)
}

pub fn singlet_index(mi: i8) -> usize {
    SINGLET_OFFSET + (1 - mi) as usize
}

fn triplet_index(manifold: Manifold, ms: i8, mi: i8) -> usize {
    match manifold {
        Manifold::Ground => ground_index(ms, mi),
        Manifold::Excited => excited_index(ms, mi),
    }
}

/// How the MHz values of the optical and intersystem-crossing rates are
/// turned into rates per µs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateUnits {
    /// The value is `Γ/2π`, in the same frequency unit as the Hamiltonian:
    /// the rate is `2π × value` per µs.
    #[default]
    Angular,
    /// The value is the rate itself, per µs.
    Ordinary,
}

impl RateUnits {
    pub fn per_microsecond(self, mhz: f64) -> f64 {
        match self {
            RateUnits::Angular => 2.0 * PI * mhz,
            RateUnits::Ordinary => mhz,
        }
    }
}

/// Optical, intersystem-crossing and relaxation constants.
///
/// Optical and ISC rates are in MHz, interpreted through `rate_units`; the
/// `t1_*`/`t2_*` time constants are in µs (`_e_`/`_n_`: electron/nuclear
/// spin, `_gs`/`_es`: ground/excited state) and always enter as `1/T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateSet {
    pub rate_units: RateUnits,
    pub gamma_fluor: f64,
    pub gamma_pump: f64,
    pub isc_e_pm1: f64,
    pub isc_e_0: f64,
    pub isc_g_0: f64,
    pub isc_g_pm1: f64,
    pub t1_e_gs: f64,
    pub t2_e_gs: f64,
    pub t1_n_gs: f64,
    pub t2_n_gs: f64,
    pub t1_e_es: f64,
    pub t2_e_es: f64,
    pub t1_n_es: f64,
    pub t2_n_es: f64,
}

impl Default for RateSet {
    fn default() -> Self {
        Self {
            rate_units: RateUnits::Angular,
            gamma_fluor: 66.0,
            gamma_pump: 5.0,
            isc_e_pm1: 50.0,
            isc_e_0: 2.5,
            isc_g_0: 1.0,
            isc_g_pm1: 1.0,
            t1_e_gs: 1.0e4, // 10 ms
            t2_e_gs: 100.0,
            t1_n_gs: 1.0e7, // 10 s
            t2_n_gs: 10.0,
            t1_e_es: 1.0e3,  // 1 ms
            t2_e_es: 1.0e-2, // 10 ns
            t1_n_es: 1.0e5,  // 100 ms
            t2_n_es: 1.0e3,  // 1 ms
        }
    }
}

impl RateSet {
    pub fn with_pump(mut self, gamma_pump: f64) -> Self {
        self.gamma_pump = gamma_pump;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("gamma_fluor", self.gamma_fluor),
            ("gamma_pump", self.gamma_pump),
            ("isc_e_pm1", self.isc_e_pm1),
            ("isc_e_0", self.isc_e_0),
            ("isc_g_0", self.isc_g_0),
            ("isc_g_pm1", self.isc_g_pm1),
            ("t1_e_gs", self.t1_e_gs),
            ("t2_e_gs", self.t2_e_gs),
            ("t1_n_gs", self.t1_n_gs),
            ("t2_n_gs", self.t2_n_gs),
            ("t1_e_es", self.t1_e_es),
            ("t2_e_es", self.t2_e_es),
            ("t1_n_es", self.t1_n_es),
            ("t2_n_es", self.t2_n_es),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(name, "must be finite and > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Channel {
    Pump,
    Fluorescence,
    /// excited triplet -> singlet
    IscExcited,
    /// singlet -> ground triplet
    IscGround,
    ElectronT1(Manifold),
    ElectronT2(Manifold),
    /// `None` is the singlet block.
    NuclearT1(Option<Manifold>),
    NuclearT2(Option<Manifold>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CollapseKind {
    /// `|to><from|`
    Jump { to: usize, from: usize },
    /// `|plus><plus| - |minus><minus|`
    Dephase { plus: usize, minus: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollapseOperator {
    /// MHz
    pub rate: f64,
    pub kind: CollapseKind,
    pub channel: Channel,
}

impl CollapseOperator {
    fn jump(rate: f64, to: usize, from: usize, channel: Channel) -> Self {
        Self {
            rate,
            kind: CollapseKind::Jump { to, from },
            channel,
        }
    }

    fn dephase(rate: f64, plus: usize, minus: usize, channel: Channel) -> Self {
        Self {
            rate,
            kind: CollapseKind::Dephase { plus, minus },
            channel,
        }
    }

    /// Dense 21x21 operator.
    pub fn matrix(&self) -> Mat {
        let mut m = Array2::zeros((N_STATES, N_STATES));
        match self.kind {
            CollapseKind::Jump { to, from } => m[[to, from]] = C64::new(1.0, 0.0),
            CollapseKind::Dephase { plus, minus } => {
                m[[plus, plus]] = C64::new(1.0, 0.0);
                m[[minus, minus]] = C64::new(-1.0, 0.0);
            }
        }
        m
    }
}

fn unordered_pairs() -> impl Iterator<Item = (i8, i8)> {
    [(1, 0), (1, -1), (0, -1)].into_iter()
}

fn ordered_pairs() -> impl Iterator<Item = (i8, i8)> {
    unordered_pairs().flat_map(|(a, b)| [(a, b), (b, a)])
}

/// Every jump and dephasing channel of the model, with rates per µs.
///
/// Optical and intersystem-crossing channels conserve `mI`. Longitudinal
/// relaxation is a jump at `1/(2 T1)` for each ordered pair of sublevels;
/// transverse relaxation is one `P_a - P_b` dephasing operator at
/// `1/(2 T2)` per unordered pair, which damps that coherence at `1/T2`.
pub fn collapse_operators(rates: &RateSet) -> Result<Vec<CollapseOperator>> {
    rates.validate()?;
    let mut ops = Vec::with_capacity(160);
    let rate = |mhz: f64| rates.rate_units.per_microsecond(mhz);

    for ms in SPIN1_PROJECTIONS {
        for mi in SPIN1_PROJECTIONS {
            let (g, e) = (ground_index(ms, mi), excited_index(ms, mi));
            ops.push(CollapseOperator::jump(
                rate(rates.gamma_pump),
                e,
                g,
                Channel::Pump,
            ));
            ops.push(CollapseOperator::jump(
                rate(rates.gamma_fluor),
                g,
                e,
                Channel::Fluorescence,
            ));
        }
    }

    for mi in SPIN1_PROJECTIONS {
        let sing = singlet_index(mi);
        for ms in SPIN1_PROJECTIONS {
            let (to_singlet, to_ground) = if ms == 0 {
                (rate(rates.isc_e_0), rate(rates.isc_g_0))
            } else {
                (rate(rates.isc_e_pm1), rate(rates.isc_g_pm1))
            };
            ops.push(CollapseOperator::jump(
                to_singlet,
                sing,
                excited_index(ms, mi),
                Channel::IscExcited,
            ));
            ops.push(CollapseOperator::jump(
                to_ground,
                ground_index(ms, mi),
                sing,
                Channel::IscGround,
            ));
        }
    }

    for (manifold, t1_e, t2_e, t1_n, t2_n) in [
        (
            Manifold::Ground,
            rates.t1_e_gs,
            rates.t2_e_gs,
            rates.t1_n_gs,
            rates.t2_n_gs,
        ),
        (
            Manifold::Excited,
            rates.t1_e_es,
            rates.t2_e_es,
            rates.t1_n_es,
            rates.t2_n_es,
        ),
    ] {
        let idx = |ms, mi| triplet_index(manifold, ms, mi);
        for fixed in SPIN1_PROJECTIONS {
            for (a, b) in ordered_pairs() {
                ops.push(CollapseOperator::jump(
                    0.5 / t1_e,
                    idx(b, fixed),
                    idx(a, fixed),
                    Channel::ElectronT1(manifold),
                ));
                ops.push(CollapseOperator::jump(
                    0.5 / t1_n,
                    idx(fixed, b),
                    idx(fixed, a),
                    Channel::NuclearT1(Some(manifold)),
                ));
            }
            for (a, b) in unordered_pairs() {
                ops.push(CollapseOperator::dephase(
                    0.5 / t2_e,
                    idx(a, fixed),
                    idx(b, fixed),
                    Channel::ElectronT2(manifold),
                ));
                ops.push(CollapseOperator::dephase(
                    0.5 / t2_n,
                    idx(fixed, a),
                    idx(fixed, b),
                    Channel::NuclearT2(Some(manifold)),
                ));
            }
        }
    }

    // singlet nuclear relaxation borrows the ground-state nuclear constants
    for (a, b) in ordered_pairs() {
        ops.push(CollapseOperator::jump(
            0.5 / rates.t1_n_gs,
            singlet_index(b),
            singlet_index(a),
            Channel::NuclearT1(None),
        ));
    }
    for (a, b) in unordered_pairs() {
        ops.push(CollapseOperator::dephase(
            0.5 / rates.t2_n_gs,
            singlet_index(a),
            singlet_index(b),
            Channel::NuclearT2(None),
        ));
    }
    Ok(ops)
}

/// Block-diagonal 21x21 Hamiltonian (ground, excited, singlet), MHz.
pub fn full_hamiltonian(params: &SystemParams) -> Result<Mat> {
    let mut h = Array2::zeros((N_STATES, N_STATES));
    let g = build_ground_hamiltonian(params)?;
    let e = build_excited_hamiltonian(params)?;
    let sng = build_singlet_hamiltonian(params)?;
    h.slice_mut(s![0..9, 0..9]).assign(&g.matrix);
    h.slice_mut(s![9..18, 9..18]).assign(&e.matrix);
    h.slice_mut(s![18..21, 18..21]).assign(&sng);
    Ok(h)
}

/// Generator acting on column-major `vec(ρ)`, with `ρ_ab` at `a + b n`.
#[derive(Clone, Debug)]
pub struct Superoperator {
    pub matrix: Mat,
    pub dim: usize,
}

impl Superoperator {
    #[inline]
    pub fn vec_index(&self, a: usize, b: usize) -> usize {
        a + b * self.dim
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius(&self.matrix.view())
    }

    /// `vec(dρ/dt)` for the given density matrix.
    pub fn apply(&self, rho: &Mat) -> Mat {
        let v = vectorize(rho);
        unvectorize(&self.matrix.dot(&v), self.dim)
    }

    /// `||M vec(ρ)||_2`
    pub fn residual(&self, rho: &Mat) -> f64 {
        frobenius(&self.apply(rho).view())
    }
}

pub(crate) fn frobenius(a: &ArrayView2<C64>) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Column-major vectorization.
pub fn vectorize(rho: &Mat) -> Array1<C64> {
    rho.t().iter().copied().collect()
}

pub fn unvectorize(v: &Array1<C64>, dim: usize) -> Mat {
    Array2::from_shape_fn((dim, dim), |(a, b)| v[a + b * dim])
}

/// Lindblad generator
/// `M = -2πi (I⊗H - Hᵀ⊗I) + Σ_k Γ_k [L̄_k⊗L_k - ½ (I⊗L_k†L_k + (L_k†L_k)ᵀ⊗I)]`
/// for column-major vectorization. `H` is in MHz, so the factor 2π turns
/// it into angular frequency per µs.
///
/// Jump and dephasing operators are single-entry or diagonal, which lets
/// the dissipator be written entry by entry without forming Kronecker
/// products.
pub fn liouvillian(h_full: &Mat, ops: &[CollapseOperator]) -> Result<Superoperator> {
    let n = h_full.nrows();
    if h_full.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: h_full.ncols(),
        });
    }
    for op in ops {
        let (p, q) = match op.kind {
            CollapseKind::Jump { to, from } => (to, from),
            CollapseKind::Dephase { plus, minus } => (plus, minus),
        };
        if p.max(q) >= n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: p.max(q) + 1,
            });
        }
    }

    let mut m = Array2::<C64>::zeros((n * n, n * n));
    let v = |a: usize, b: usize| a + b * n;
    let minus_i2pi = C64::new(0.0, -2.0 * PI);

    for a in 0..n {
        for c in 0..n {
            let hac = h_full[[a, c]];
            if hac == C64::new(0.0, 0.0) {
                continue;
            }
            for b in 0..n {
                // -i H_ac ρ_cb into (a, b) and +i ρ_ba H_ac into (b, c)
                m[[v(a, b), v(c, b)]] += minus_i2pi * hac;
                m[[v(b, c), v(b, a)]] -= minus_i2pi * hac;
            }
        }
    }

    // Diagonal loss terms accumulate in `decay[a] + decay[b]` per entry.
    let mut decay = vec![0.0_f64; n];
    let mut dephase_terms: Vec<(f64, usize, usize)> = Vec::new();
    for op in ops {
        match op.kind {
            CollapseKind::Jump { to, from } => {
                m[[v(to, to), v(from, from)]] += C64::new(op.rate, 0.0);
                decay[from] += 0.5 * op.rate;
            }
            CollapseKind::Dephase { plus, minus } => {
                decay[plus] += 0.5 * op.rate;
                decay[minus] += 0.5 * op.rate;
                dephase_terms.push((op.rate, plus, minus));
            }
        }
    }
    for a in 0..n {
        for b in 0..n {
            m[[v(a, b), v(a, b)]] -= C64::new(decay[a] + decay[b], 0.0);
        }
    }
    // L ρ L† for L = P_plus - P_minus keeps ρ_ab with sign l_a l_b
    for (rate, p, q) in dephase_terms {
        for (a, la) in [(p, 1.0), (q, -1.0)] {
            for (b, lb) in [(p, 1.0), (q, -1.0)] {
                m[[v(a, b), v(a, b)]] += C64::new(rate * la * lb, 0.0);
            }
        }
    }

    Ok(Superoperator { matrix: m, dim: n })
}

/// 21-state density matrix.
#[derive(Clone, Debug)]
pub struct DensityMatrix {
    pub matrix: Mat,
}

impl DensityMatrix {
    pub fn from_matrix(matrix: Mat) -> Self {
        Self { matrix }
    }

    /// Pure state `|k><k|` in a `dim`-level space.
    pub fn basis_state(dim: usize, k: usize) -> Self {
        let mut m = Array2::zeros((dim, dim));
        m[[k, k]] = C64::new(1.0, 0.0);
        Self { matrix: m }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> C64 {
        self.matrix.diag().sum()
    }

    pub fn population(&self, k: usize) -> f64 {
        self.matrix[[k, k]].re
    }

    pub fn ground_population(&self, ms: i8, mi: i8) -> f64 {
        self.population(ground_index(ms, mi))
    }

    /// Total population of the ground `mS = 0` sublevels.
    pub fn ground_ms0_population(&self) -> f64 {
        SPIN1_PROJECTIONS
            .iter()
            .map(|&mi| self.ground_population(0, mi))
            .sum()
    }

    /// Ground `mS = 0` populations ordered `mI = +1, 0, -1`.
    pub fn ground_ms0_populations(&self) -> [f64; 3] {
        SPIN1_PROJECTIONS.map(|mi| self.ground_population(0, mi))
    }

    pub fn hermiticity_defect(&self) -> f64 {
        hermiticity_defect(&self.matrix.view())
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        let herm = (&self.matrix + &self.matrix.t().mapv(|z| z.conj())).mapv(|z| z * 0.5);
        let (vals, _) = herm.eigh(UPLO::Upper)?;
        Ok(vals.iter().copied().fold(f64::INFINITY, f64::min))
    }

    pub fn frobenius_distance(&self, other: &DensityMatrix) -> f64 {
        frobenius(&(&self.matrix - &other.matrix).view())
    }

    /// Hermitian to 1e-10, unit trace to 1e-10, eigenvalues >= -1e-8.
    pub fn check_invariants(&self) -> Result<()> {
        let herm = self.hermiticity_defect();
        if herm > 1e-10 {
            return Err(Error::NotHermitian(herm));
        }
        let tr = self.trace();
        if (tr - C64::new(1.0, 0.0)).norm() > 1e-10 {
            return Err(invalid("trace", format!("trace {tr} differs from 1")));
        }
        let min = self.min_eigenvalue()?;
        if min < -1e-8 {
            return Err(invalid(
                "positivity",
                format!("eigenvalue {min:.3e} < -1e-8"),
            ));
        }
        Ok(())
    }
}

/// Diagnostics of a steady-state solve.
#[derive(Clone, Debug)]
pub struct SteadyState {
    pub rho: DensityMatrix,
    /// `||M vec(ρ)||_2`
    pub residual: f64,
    /// Frobenius norm of the generator.
    pub generator_norm: f64,
    /// Reciprocal condition number of the bordered system.
    pub rcond: f64,
}

/// Bordered systems with a reciprocal condition number below this are
/// treated as having a degenerate (multi-dimensional) null space.
const MIN_RCOND: f64 = 1e-15;
const RESIDUAL_RTOL: f64 = 1e-8;

/// Stationary state of the generator, normalized to unit trace.
///
/// The population equation of state 0 is linearly dependent on the others
/// (trace preservation), so it is replaced by `tr ρ = 1` and the resulting
/// square system is solved by LU.
pub fn steady_state(m: &Superoperator) -> Result<DensityMatrix> {
    steady_state_detailed(m).map(|s| s.rho)
}

pub fn steady_state_detailed(m: &Superoperator) -> Result<SteadyState> {
    let n = m.dim;
    let mut a = m.matrix.clone();
    a.row_mut(0).fill(C64::new(0.0, 0.0));
    for k in 0..n {
        a[[0, m.vec_index(k, k)]] = C64::new(1.0, 0.0);
    }
    let mut rhs = Array1::<C64>::zeros(n * n);
    rhs[0] = C64::new(1.0, 0.0);

    let lu = a
        .factorize_into()
        .map_err(|e| Error::DefectiveNullSpace(format!("bordered system is singular ({e})")))?;
    let rcond = lu.rcond()?;
    if !rcond.is_finite() || rcond < MIN_RCOND {
        return Err(Error::DefectiveNullSpace(format!(
            "bordered system is singular (rcond = {rcond:.3e}); stationary state is not unique"
        )));
    }
    let x = lu.solve(&rhs)?;
    if x.iter().any(|z| !z.is_finite()) {
        return Err(Error::DefectiveNullSpace("non-finite solution".into()));
    }

    let raw = unvectorize(&x, n);
    let mut rho = (&raw + &raw.t().mapv(|z| z.conj())).mapv(|z| z * 0.5);
    let tr = rho.diag().sum();
    if tr.norm() < 1e-12 {
        return Err(Error::DefectiveNullSpace("solution has zero trace".into()));
    }
    rho.mapv_inplace(|z| z / tr);

    let residual = m.residual(&rho);
    let generator_norm = m.frobenius_norm();
    if residual > RESIDUAL_RTOL * generator_norm {
        return Err(Error::DefectiveNullSpace(format!(
            "residual {residual:.3e} exceeds {RESIDUAL_RTOL:e} * ||M|| = {:.3e}",
            RESIDUAL_RTOL * generator_norm
        )));
    }
    Ok(SteadyState {
        rho: DensityMatrix::from_matrix(rho),
        residual,
        generator_norm,
        rcond,
    })
}

const PADE_ORDER: usize = 6;
const MAX_SCALED_NORM: f64 = 0.5;
const MAX_SQUARINGS: i32 = 1000;

/// `exp(M t) vec(ρ0)` by [6/6] Padé approximation with scaling and
/// squaring, `t` in µs.
///
/// After the Padé step and every squaring the propagator is projected back
/// onto trace-preserving maps (`vec(I)ᵀ E = vec(I)ᵀ`), which stops rounding
/// error from compounding along the stationary direction over many
/// squarings.
pub fn propagate(rho0: &DensityMatrix, m: &Superoperator, t: f64) -> Result<DensityMatrix> {
    let n = m.dim;
    if rho0.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: rho0.dim(),
        });
    }
    if !(t.is_finite() && t >= 0.0) {
        return Err(invalid("t", "propagation time must be finite and >= 0"));
    }
    if t == 0.0 {
        return Ok(rho0.clone());
    }

    let a = m.matrix.mapv(|z| z * t);
    let norm1 = (0..a.ncols())
        .map(|j| a.column(j).iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm1 > MAX_SCALED_NORM {
        (norm1 / MAX_SCALED_NORM).log2().ceil() as i32
    } else {
        0
    };
    if squarings > MAX_SQUARINGS {
        return Err(Error::Propagation(format!(
            "step size underflow: {squarings} squarings required"
        )));
    }
    let scaled = a.mapv(|z| z * 2f64.powi(-squarings));

    let dim = n * n;
    let id: Mat = Array2::eye(dim);
    let mut num = id.clone();
    let mut den = id;
    let mut power: Mat = Array2::eye(dim);
    let mut coef = 1.0;
    let p = PADE_ORDER as f64;
    for k in 1..=PADE_ORDER {
        let kf = k as f64;
        coef *= (p - kf + 1.0) / (kf * (2.0 * p - kf + 1.0));
        power = power.dot(&scaled);
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        num.scaled_add(C64::new(coef, 0.0), &power);
        den.scaled_add(C64::new(sign * coef, 0.0), &power);
    }
    let mut prop = den.inv()?.dot(&num);

    let diag_idx: Vec<usize> = (0..n).map(|k| k + k * n).collect();
    pin_trace(&mut prop, &diag_idx);
    for _ in 0..squarings {
        prop = prop.dot(&prop);
        pin_trace(&mut prop, &diag_idx);
    }
    if prop.iter().any(|z| !z.is_finite()) {
        return Err(Error::Propagation("propagator overflowed".into()));
    }

    let out = unvectorize(&prop.dot(&vectorize(&rho0.matrix)), n);
    let drift = (out.diag().sum() - rho0.trace()).norm();
    if drift > 1e-8 {
        return Err(Error::Propagation(format!("trace drift {drift:.3e}")));
    }
    Ok(DensityMatrix::from_matrix(out))
}

/// Adds a rank-one correction so that the trace functional is an exact left
/// fixed point of `prop`.
fn pin_trace(prop: &mut Mat, diag_idx: &[usize]) {
    let weight = 1.0 / diag_idx.len() as f64;
    let mut defect = Array1::<C64>::zeros(prop.ncols());
    for &c in diag_idx {
        defect[c] = C64::new(1.0, 0.0);
    }
    for &r in diag_idx {
        defect -= &prop.row(r);
    }
    for &r in diag_idx {
        prop.row_mut(r).scaled_add(C64::new(weight, 0.0), &defect);
    }
}

/// Nuclear polarization from the ground `mS = 0` populations:
/// `(ρ(0,+1) - ρ(0,-1)) / (ρ(0,+1) + ρ(0,0) + ρ(0,-1))`.
pub fn polarization_theory(rho: &DensityMatrix) -> Result<f64> {
    if rho.dim() != N_STATES {
        return Err(Error::DimensionMismatch {
            expected: N_STATES,
            found: rho.dim(),
        });
    }
    let [up, zero, down] = rho.ground_ms0_populations();
    let total = up + zero + down;
    if total <= 1e-12 {
        return Err(Error::EmptyGroundManifold);
    }
    Ok((up - down) / total)
}

/// Liouvillian of the full model at one parameter point.
pub fn model_liouvillian(params: &SystemParams, rates: &RateSet) -> Result<Superoperator> {
    let h = full_hamiltonian(params)?;
    let ops = collapse_operators(rates)?;
    liouvillian(&h, &ops)
}

/// Steady state of the full model at one parameter point.
pub fn solve_point(params: &SystemParams, rates: &RateSet) -> Result<SteadyState> {
    steady_state_detailed(&model_liouvillian(params, rates)?)
}
