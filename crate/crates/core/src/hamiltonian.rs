//! Spin Hamiltonians of the NV triplet manifolds and the shelving singlet,
//! their diagonalization, and level-anticrossing search.

use ndarray::{s, Array1};
use ndarray_linalg::{Eigh, UPLO};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::spin::{
    dagger, embed, hermiticity_defect, product_label, spin_matrices, CompositeOperator, Mat,
    SpinOperatorSet, PRODUCT_DIM,
};

/// Eigenvalues closer than this (MHz) are treated as degenerate.
const DEGENERACY_TOL: f64 = 1e-7;

/// Physical constants and control parameters of the spin system.
///
/// Energies in MHz, gyromagnetic ratios in MHz/G, field in G, angle in
/// degrees between the field and the NV symmetry axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemParams {
    pub d_ground: f64,
    pub d_excited: f64,
    pub gamma_e: f64,
    pub gamma_n: f64,
    pub q_quadrupole: f64,
    pub a_par_ground: f64,
    pub a_perp_ground: f64,
    pub a_par_excited: f64,
    pub a_perp_excited: f64,
    pub strain_ground: f64,
    pub strain_excited: f64,
    pub b_magnitude: f64,
    pub theta: f64,
}

impl Default for SystemParams {
    fn default() -> Self {
        Self {
            d_ground: 2870.0,
            d_excited: 1420.0,
            gamma_e: 2.8025,
            gamma_n: 3.077e-4,
            q_quadrupole: -4.96,
            a_par_ground: -2.16,
            a_perp_ground: -2.70,
            a_par_excited: -40.0,
            a_perp_excited: -23.0,
            strain_ground: 0.0,
            strain_excited: 0.0,
            b_magnitude: 0.0,
            theta: 0.0,
        }
    }
}

impl SystemParams {
    pub fn with_field(mut self, b_magnitude: f64, theta: f64) -> Self {
        self.b_magnitude = b_magnitude;
        self.theta = theta;
        self
    }

    /// Sets the ground-state transverse strain and the excited-state strain
    /// as `ratio` times that value.
    pub fn with_strain(mut self, strain_ground: f64, ratio: f64) -> Self {
        self.strain_ground = strain_ground;
        self.strain_excited = ratio * strain_ground;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("d_ground", self.d_ground),
            ("d_excited", self.d_excited),
            ("gamma_e", self.gamma_e),
            ("gamma_n", self.gamma_n),
            ("q_quadrupole", self.q_quadrupole),
            ("a_par_ground", self.a_par_ground),
            ("a_perp_ground", self.a_perp_ground),
            ("a_par_excited", self.a_par_excited),
            ("a_perp_excited", self.a_perp_excited),
            ("strain_ground", self.strain_ground),
            ("strain_excited", self.strain_excited),
            ("b_magnitude", self.b_magnitude),
            ("theta", self.theta),
        ];
        for (name, v) in all {
            if !v.is_finite() {
                return Err(invalid(name, "must be finite"));
            }
        }
        if self.b_magnitude < 0.0 {
            return Err(invalid("b_magnitude", "must be >= 0"));
        }
        if !(0.0..90.0).contains(&self.theta) {
            return Err(invalid("theta", "must satisfy 0 <= theta < 90 degrees"));
        }
        Ok(())
    }

    fn field_components(&self) -> (f64, f64) {
        let th = self.theta.to_radians();
        (self.b_magnitude * th.sin(), self.b_magnitude * th.cos())
    }

    fn triplet_constants(&self, manifold: Manifold) -> TripletConstants {
        match manifold {
            Manifold::Ground => TripletConstants {
                zfs: self.d_ground,
                a_par: self.a_par_ground,
                a_perp: self.a_perp_ground,
                strain: self.strain_ground,
            },
            Manifold::Excited => TripletConstants {
                zfs: self.d_excited,
                a_par: self.a_par_excited,
                a_perp: self.a_perp_excited,
                strain: self.strain_excited,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Manifold {
    Ground,
    Excited,
}

impl std::str::FromStr for Manifold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ground" => Ok(Manifold::Ground),
            "excited" => Ok(Manifold::Excited),
            other => Err(invalid(
                "manifold",
                format!("expected ground|excited, got `{other}`"),
            )),
        }
    }
}

struct TripletConstants {
    zfs: f64,
    a_par: f64,
    a_perp: f64,
    strain: f64,
}

fn spin_one() -> SpinOperatorSet {
    spin_matrices(1.0).expect("spin 1 is valid")
}

fn scaled(m: &Mat, k: f64) -> Mat {
    m.mapv(|z| z * k)
}

fn build_triplet(params: &SystemParams, manifold: Manifold) -> Result<CompositeOperator> {
    params.validate()?;
    let c = params.triplet_constants(manifold);
    let ops = spin_one();
    let (bx, bz) = params.field_components();

    let s_only = |a: &Mat| embed(Some(a), None).map(|o| o.matrix);
    let i_only = |b: &Mat| embed(None, Some(b)).map(|o| o.matrix);
    let both = |a: &Mat, b: &Mat| embed(Some(a), Some(b)).map(|o| o.matrix);

    let sz2 = ops.sz.dot(&ops.sz);
    let strain_op = ops.sx.dot(&ops.sz) + ops.sz.dot(&ops.sx);

    let mut h: Mat = scaled(&s_only(&sz2)?, c.zfs);
    h = h + scaled(&s_only(&ops.sx)?, params.gamma_e * bx);
    h = h + scaled(&s_only(&ops.sz)?, params.gamma_e * bz);
    h = h + scaled(&i_only(&sz2)?, params.q_quadrupole);
    h = h + scaled(&both(&ops.sz, &ops.sz)?, c.a_par);
    h = h + scaled(
        &(both(&ops.sx, &ops.sx)? + both(&ops.sy, &ops.sy)?),
        c.a_perp,
    );
    h = h - scaled(&i_only(&ops.sx)?, params.gamma_n * bx);
    h = h - scaled(&i_only(&ops.sz)?, params.gamma_n * bz);
    h = h + scaled(&s_only(&strain_op)?, c.strain);
    Ok(CompositeOperator { matrix: h })
}

/// Ground-state triplet Hamiltonian on `|mS, mI>`: zero-field splitting,
/// electron and nuclear Zeeman terms for `B = (B sinθ, 0, B cosθ)`,
/// quadrupole, axially symmetric hyperfine and transverse strain.
pub fn build_ground_hamiltonian(params: &SystemParams) -> Result<CompositeOperator> {
    build_triplet(params, Manifold::Ground)
}

/// Excited-state triplet Hamiltonian; same form as the ground state with the
/// excited-state splitting, hyperfine tensor and strain.
pub fn build_excited_hamiltonian(params: &SystemParams) -> Result<CompositeOperator> {
    build_triplet(params, Manifold::Excited)
}

pub fn build_manifold_hamiltonian(
    manifold: Manifold,
    params: &SystemParams,
) -> Result<CompositeOperator> {
    build_triplet(params, manifold)
}

/// Nuclear-only Hamiltonian of the shelving singlet: quadrupole plus nuclear
/// Zeeman on the three `|s, mI>` states.
pub fn build_singlet_hamiltonian(params: &SystemParams) -> Result<Mat> {
    params.validate()?;
    let ops = spin_one();
    let (bx, bz) = params.field_components();
    let iz2 = ops.sz.dot(&ops.sz);
    Ok(scaled(&iz2, params.q_quadrupole)
        - scaled(&ops.sx, params.gamma_n * bx)
        - scaled(&ops.sz, params.gamma_n * bz))
}

/// Dominant `|mS, mI>` component of an eigenvector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateLabel {
    pub ms: i8,
    pub mi: i8,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct EigenSystem {
    /// Ascending, MHz.
    pub energies: Array1<f64>,
    /// Columns are eigenvectors in the product basis.
    pub vectors: Mat,
    pub labels: Vec<StateLabel>,
}

impl EigenSystem {
    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    /// `|<basis|v_k>|^2` for every basis state.
    pub fn weights(&self, k: usize) -> Vec<f64> {
        self.vectors
            .column(k)
            .iter()
            .map(|z| z.norm_sqr())
            .collect()
    }

    /// V diag(E) V^dagger
    pub fn reconstruct(&self) -> Mat {
        let n = self.len();
        let mut scaled = self.vectors.clone();
        for k in 0..n {
            let e = self.energies[k];
            scaled.column_mut(k).mapv_inplace(|z| z * e);
        }
        scaled.dot(&self.vectors.t().mapv(|z| z.conj()))
    }
}

/// Diagonalize a Hermitian product-space Hamiltonian and label each
/// eigenvector by its largest-weight basis state. Weights equal to within
/// `1e-12` are ties, broken toward larger `|mI|` and then the lower basis
/// index.
pub fn eigensystem(h: &CompositeOperator) -> Result<EigenSystem> {
    let m = &h.matrix;
    if m.nrows() != PRODUCT_DIM || m.ncols() != PRODUCT_DIM {
        return Err(Error::DimensionMismatch {
            expected: PRODUCT_DIM,
            found: m.nrows().max(m.ncols()),
        });
    }
    let defect = hermiticity_defect(&m.view());
    if defect > 1e-9 {
        return Err(Error::NotHermitian(defect));
    }
    let (energies, mut vectors) = m.eigh(UPLO::Upper)?;
    resolve_degeneracies(&energies, &mut vectors)?;
    let labels = (0..PRODUCT_DIM)
        .map(|k| {
            let mut best = 0;
            let mut best_w = -1.0;
            for (b, z) in vectors.column(k).iter().enumerate() {
                let w = z.norm_sqr();
                let tied = (w - best_w).abs() <= 1e-12;
                let wider = product_label(b).1.abs() > product_label(best).1.abs();
                if (w > best_w && !tied) || (tied && wider) {
                    best = b;
                    best_w = w;
                }
            }
            let (ms, mi) = product_label(best);
            StateLabel {
                ms,
                mi,
                weight: best_w,
            }
        })
        .collect();
    Ok(EigenSystem {
        energies,
        vectors,
        labels,
    })
}

/// Rotate every degenerate eigenspace onto eigenstates of the electron `Sz`
/// so that labels do not depend on the solver's arbitrary choice of basis.
fn resolve_degeneracies(energies: &Array1<f64>, vectors: &mut Mat) -> Result<()> {
    let ops = spin_matrices(1.0)?;
    let sz = embed(Some(&ops.sz), None)?.matrix;
    let mut start = 0;
    while start < energies.len() {
        let mut end = start + 1;
        while end < energies.len() && energies[end] - energies[end - 1] < DEGENERACY_TOL {
            end += 1;
        }
        if end - start > 1 {
            let block = vectors.slice(s![.., start..end]).to_owned();
            let projected = dagger(&block.view()).dot(&sz).dot(&block);
            let (_, rotation) = projected.eigh(UPLO::Upper)?;
            vectors
                .slice_mut(s![.., start..end])
                .assign(&block.dot(&rotation));
        }
        start = end;
    }
    Ok(())
}

/// Smallest energy separation between an `mS = 0` level and its
/// anticrossing partner in `mS = -1`, i.e. the pairs
/// `|0, mI> / |-1, mI + 1>` that share `mS + mI` and are coupled by the
/// transverse hyperfine interaction. Pairs are identified through the
/// eigenvector labels. Returns `f64::INFINITY` when no partner pair is
/// labeled.
pub fn anticrossing_gap(system: &EigenSystem) -> f64 {
    let mut gap = f64::INFINITY;
    for (i, li) in system.labels.iter().enumerate() {
        if li.ms != 0 || li.mi == 1 {
            continue;
        }
        for (j, lj) in system.labels.iter().enumerate() {
            if lj.ms == -1 && lj.mi == li.mi + 1 {
                gap = gap.min((system.energies[i] - system.energies[j]).abs());
            }
        }
    }
    gap
}

/// Anticrossing gap of one manifold at the field stored in `params`.
pub fn manifold_gap(manifold: Manifold, params: &SystemParams) -> Result<f64> {
    let h = build_manifold_hamiltonian(manifold, params)?;
    Ok(anticrossing_gap(&eigensystem(&h)?))
}

const SCAN_STEP_G: f64 = 0.25;
const FIELD_TOL_G: f64 = 0.01;

/// Field in `search = (start, stop)` G where the `mS = 0` / `mS = -1`
/// anticrossing gap of the manifold is smallest.
///
/// A uniform scan picks the bracketing cell, then golden-section search
/// narrows it to 0.01 G.
pub fn find_anticrossing(
    manifold: Manifold,
    params: &SystemParams,
    search: (f64, f64),
) -> Result<f64> {
    let (start, stop) = search;
    if !(start.is_finite() && stop.is_finite()) || start < 0.0 || stop <= start {
        return Err(invalid(
            "search",
            format!("bad field range [{start}, {stop}]"),
        ));
    }
    let gap_at = |b: f64| -> Result<f64> {
        let mut p = params.clone();
        p.b_magnitude = b;
        manifold_gap(manifold, &p)
    };

    let n = ((stop - start) / SCAN_STEP_G).ceil().max(2.0) as usize;
    let step = (stop - start) / n as f64;
    let mut best = (0, f64::INFINITY);
    for k in 0..=n {
        let g = gap_at(start + k as f64 * step)?;
        if g < best.1 {
            best = (k, g);
        }
    }
    let (k, g) = best;
    if !g.is_finite() || k == 0 || k == n {
        return Err(Error::NoMinimumInRange { start, stop });
    }

    let inv_phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut lo = start + (k - 1) as f64 * step;
    let mut hi = start + (k + 1) as f64 * step;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = gap_at(x1)?;
    let mut f2 = gap_at(x2)?;
    while hi - lo > FIELD_TOL_G {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = gap_at(x1)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = gap_at(x2)?;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Default search windows bracketing the two anticrossings.
pub fn default_search_range(manifold: Manifold) -> (f64, f64) {
    match manifold {
        Manifold::Ground => (950.0, 1100.0),
        Manifold::Excited => (440.0, 580.0),
    }
}
