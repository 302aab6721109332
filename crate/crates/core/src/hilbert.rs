//! Operators and Liouvillians on atom ⊗ cavity (⊗ motion).
//!
//! Basis index: `(atom·N_c + n_c)·max(N_ph, 1) + n_ph`, atom 0 = |g⟩, 1 = |e⟩.
//! Density operators are vectorised by stacking columns, so that
//! `vec(A ρ B) = (Bᵀ ⊗ A) vec(ρ)`; nalgebra's column-major storage is exactly
//! that vector.

use std::ops::ControlFlow;

use nalgebra::{DMatrix, DVector, DVectorView, DVectorViewMut};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ode::{Dopri5, OdeError, Tolerances};
use crate::units::SystemParams;
use crate::C64;

pub const HERMITIAN_TOL: f64 = 1e-10;
pub const TRACE_TOL: f64 = 1e-10;
pub const POSITIVITY_TOL: f64 = 1e-8;
pub const RESIDUAL_TOL: f64 = 1e-10;
/// Relative LU pivot below which a steady-state system counts as degenerate.
pub const DEGENERACY_TOL: f64 = 1e-11;

const I: C64 = C64::new(0.0, 1.0);
const ONE: C64 = C64::new(1.0, 0.0);
const ZERO: C64 = C64::new(0.0, 0.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HilbertError {
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("layout mismatch: {0:?} vs {1:?}")]
    LayoutMismatch(SpaceLayout, SpaceLayout),
    #[error("steady state is not unique (relative pivot {pivot_ratio:e})")]
    DegenerateSteadyState { pivot_ratio: f64 },
    #[error("resolvent is singular at shift {shift}")]
    SingularResolvent { shift: C64 },
    #[error("linear solve residual {residual:e} exceeds tolerance")]
    Residual { residual: f64 },
    #[error("invalid density operator: {0}")]
    InvalidDensity(String),
    #[error("state drifted at t = {t}: {what}")]
    Drift { t: f64, what: String },
    #[error(transparent)]
    Ode(#[from] OdeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpaceLayout {
    pub cavity_dim: usize,
    /// 0 when the motion is not part of the space.
    pub motion_dim: usize,
}

impl SpaceLayout {
    pub fn new(cavity_dim: usize, motion_dim: usize) -> Result<Self, HilbertError> {
        if cavity_dim < 2 {
            return Err(HilbertError::InvalidLayout(format!("cavity_dim must be at least 2, got {cavity_dim}")));
        }
        if motion_dim == 1 {
            return Err(HilbertError::InvalidLayout("motion_dim must be 0 (absent) or at least 2".into()));
        }
        Ok(Self { cavity_dim, motion_dim })
    }

    pub fn internal(cavity_dim: usize) -> Result<Self, HilbertError> {
        Self::new(cavity_dim, 0)
    }

    pub fn has_motion(&self) -> bool {
        self.motion_dim > 0
    }

    fn motion_factor(&self) -> usize {
        self.motion_dim.max(1)
    }

    pub fn dim(&self) -> usize {
        2 * self.cavity_dim * self.motion_factor()
    }

    pub fn index(&self, atom: usize, photons: usize, phonons: usize) -> usize {
        (atom * self.cavity_dim + photons) * self.motion_factor() + phonons
    }

    /// The same layout with the motion factor removed.
    pub fn without_motion(&self) -> Self {
        Self { cavity_dim: self.cavity_dim, motion_dim: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorMatrix {
    pub layout: SpaceLayout,
    pub matrix: DMatrix<C64>,
}

impl OperatorMatrix {
    pub fn zeros(layout: SpaceLayout) -> Self {
        let d = layout.dim();
        Self { layout, matrix: DMatrix::zeros(d, d) }
    }

    pub fn identity(layout: SpaceLayout) -> Self {
        let d = layout.dim();
        Self { layout, matrix: DMatrix::identity(d, d) }
    }

    pub fn adjoint(&self) -> Self {
        Self { layout: self.layout, matrix: self.matrix.adjoint() }
    }

    pub fn hermiticity_error(&self) -> f64 {
        (&self.matrix - self.matrix.adjoint()).camax()
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermiticity_error() <= tol * self.matrix.camax().max(1.0)
    }

    pub fn get(&self, row: usize, col: usize) -> C64 {
        self.matrix[(row, col)]
    }
}

fn kron3(atom: &DMatrix<C64>, cavity: &DMatrix<C64>, motion: &DMatrix<C64>) -> DMatrix<C64> {
    atom.kronecker(cavity).kronecker(motion)
}

fn lowering(n: usize) -> DMatrix<C64> {
    let mut m = DMatrix::zeros(n, n);
    for k in 1..n {
        m[(k - 1, k)] = C64::new((k as f64).sqrt(), 0.0);
    }
    m
}

fn embed(layout: SpaceLayout, atom: Option<DMatrix<C64>>, cavity: Option<DMatrix<C64>>, motion: Option<DMatrix<C64>>) -> OperatorMatrix {
    let nm = layout.motion_factor();
    let a = atom.unwrap_or_else(|| DMatrix::identity(2, 2));
    let c = cavity.unwrap_or_else(|| DMatrix::identity(layout.cavity_dim, layout.cavity_dim));
    let m = motion.unwrap_or_else(|| DMatrix::identity(nm, nm));
    OperatorMatrix { layout, matrix: kron3(&a, &c, &m) }
}

/// σ = |g⟩⟨e|.
pub fn sigma(layout: SpaceLayout) -> OperatorMatrix {
    let mut s = DMatrix::zeros(2, 2);
    s[(0, 1)] = ONE;
    embed(layout, Some(s), None, None)
}

pub fn cavity_lowering(layout: SpaceLayout) -> OperatorMatrix {
    embed(layout, None, Some(lowering(layout.cavity_dim)), None)
}

/// Phonon annihilation operator; zero when motion is absent.
pub fn motion_lowering(layout: SpaceLayout) -> OperatorMatrix {
    if !layout.has_motion() {
        return OperatorMatrix::zeros(layout);
    }
    embed(layout, None, None, Some(lowering(layout.motion_dim)))
}

pub fn excited_projector(layout: SpaceLayout) -> OperatorMatrix {
    let s = sigma(layout);
    OperatorMatrix { layout, matrix: s.matrix.adjoint() * &s.matrix }
}

pub fn photon_number(layout: SpaceLayout) -> OperatorMatrix {
    let a = cavity_lowering(layout);
    OperatorMatrix { layout, matrix: a.matrix.adjoint() * &a.matrix }
}

pub fn phonon_number(layout: SpaceLayout) -> OperatorMatrix {
    let b = motion_lowering(layout);
    OperatorMatrix { layout, matrix: b.matrix.adjoint() * &b.matrix }
}

/// `b + b†`.
pub fn position(layout: SpaceLayout) -> OperatorMatrix {
    let b = motion_lowering(layout);
    OperatorMatrix { layout, matrix: &b.matrix + b.matrix.adjoint() }
}

/// `H₀ = −Δσ†σ − δc a†a + Ω(σ + σ†) + g(σ†a + a†σ)`, identity on the motion.
pub fn build_h0(p: &SystemParams, layout: SpaceLayout) -> OperatorMatrix {
    let s = sigma(layout).matrix;
    let a = cavity_lowering(layout).matrix;
    let sd = s.adjoint();
    let ad = a.adjoint();
    let h = (&sd * &s) * C64::from(-p.delta)
        + (&ad * &a) * C64::from(-p.delta_c)
        + (&s + &sd) * C64::from(p.omega)
        + (&sd * &a + &ad * &s) * C64::from(p.g);
    OperatorMatrix { layout, matrix: h }
}

/// Internal factor `V_L + V_c` of the mechanical coupling.
///
/// `V_L = iφ_LΩ(σ − σ†)`, `V_c = φ_c g(aσ† + a†σ)`. The phase of the laser
/// term is the one under which the resolvent trace reproduces the closed-form
/// amplitudes in [`crate::rates`].
pub fn build_v(p: &SystemParams, layout: SpaceLayout) -> OperatorMatrix {
    let s = sigma(layout).matrix;
    let a = cavity_lowering(layout).matrix;
    let sd = s.adjoint();
    let ad = a.adjoint();
    let v = (&s - &sd) * (I * p.phi_l * p.omega) + (&a * &sd + &ad * &s) * C64::from(p.phi_c * p.g);
    OperatorMatrix { layout, matrix: v }
}

/// Full Hamiltonian `H₀ + ν b†b + η V (b + b†)`.
pub fn build_h_full(p: &SystemParams, layout: SpaceLayout) -> OperatorMatrix {
    let h0 = build_h0(p, layout).matrix;
    let n = phonon_number(layout).matrix;
    let v = build_v(p, layout).matrix;
    let x = position(layout).matrix;
    OperatorMatrix { layout, matrix: h0 + n + (v * x) * C64::from(p.eta) }
}

/// Recoil rate `γαη²` multiplying the diffusion sandwich.
pub fn recoil_rate(p: &SystemParams) -> f64 {
    p.gamma * p.alpha * p.eta * p.eta
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperoperatorMatrix {
    pub layout: SpaceLayout,
    pub matrix: DMatrix<C64>,
}

fn left(a: &DMatrix<C64>) -> DMatrix<C64> {
    let d = a.nrows();
    DMatrix::<C64>::identity(d, d).kronecker(a)
}

fn right(b: &DMatrix<C64>) -> DMatrix<C64> {
    let d = b.nrows();
    b.transpose().kronecker(&DMatrix::<C64>::identity(d, d))
}

fn sandwich(a: &DMatrix<C64>) -> DMatrix<C64> {
    a.conjugate().kronecker(a)
}

fn hamiltonian_part(h: &DMatrix<C64>) -> DMatrix<C64> {
    (left(h) - right(h)) * -I
}

fn dissipator(c: &DMatrix<C64>, rate: f64) -> DMatrix<C64> {
    let cdc = c.adjoint() * c;
    (sandwich(c) - (left(&cdc) + right(&cdc)) * C64::from(0.5)) * C64::from(rate)
}

impl SuperoperatorMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `|Tr(L ρ)|` for the given density operator.
    pub fn trace_defect(&self, rho: &DensityOperator) -> f64 {
        let out = &self.matrix * DVector::from_column_slice(rho.matrix.as_slice());
        let d = self.layout.dim();
        (0..d).map(|i| out[i * d + i]).sum::<C64>().norm()
    }
}

/// `L₀I ρ = −i[H₀, ρ] + κ D[a]ρ + γ D[σ]ρ` on atom ⊗ cavity.
pub fn build_liouvillian_internal(p: &SystemParams, layout: SpaceLayout) -> SuperoperatorMatrix {
    let layout = layout.without_motion();
    let h = build_h0(p, layout).matrix;
    let a = cavity_lowering(layout).matrix;
    let s = sigma(layout).matrix;
    let m = hamiltonian_part(&h) + dissipator(&a, p.kappa) + dissipator(&s, p.gamma);
    SuperoperatorMatrix { layout, matrix: m }
}

/// Full Liouvillian with motion: `L₀ + ηL₁` and optionally the recoil
/// diffusion `γαη²[Xσρσ†X − ½{X², σρσ†}]`, `X = b + b†`.
pub fn build_liouvillian_full(p: &SystemParams, layout: SpaceLayout, include_recoil_diffusion: bool) -> Result<SuperoperatorMatrix, HilbertError> {
    if layout.motion_dim < 2 {
        return Err(HilbertError::InvalidLayout("full Liouvillian needs motion_dim >= 2".into()));
    }
    let h = build_h_full(p, layout).matrix;
    let a = cavity_lowering(layout).matrix;
    let s = sigma(layout).matrix;
    let mut m = hamiltonian_part(&h) + dissipator(&a, p.kappa) + dissipator(&s, p.gamma);
    if include_recoil_diffusion {
        let x = position(layout).matrix;
        let x2 = &x * &x;
        let jump = sandwich(&s);
        let recoil = sandwich(&(&x * &s)) - (left(&x2) * &jump + right(&x2) * &jump) * C64::from(0.5);
        m += recoil * C64::from(recoil_rate(p));
    }
    Ok(SuperoperatorMatrix { layout, matrix: m })
}

/// Anything that maps a column-major `d × d` density matrix to `L ρ`.
pub trait Generator: Sync {
    fn layout(&self) -> SpaceLayout;
    fn apply(&self, rho: &[C64], out: &mut [C64]);
}

impl Generator for SuperoperatorMatrix {
    fn layout(&self) -> SpaceLayout {
        self.layout
    }

    fn apply(&self, rho: &[C64], out: &mut [C64]) {
        let n = rho.len();
        let x = DVectorView::from_slice(rho, n);
        let mut y = DVectorViewMut::from_slice(out, n);
        y.gemv(ONE, &self.matrix, &x, ZERO);
    }
}

/// Sparse square matrix stored as `(row, col, value)` triplets.
#[derive(Debug, Clone, PartialEq)]
struct Sparse {
    n: usize,
    entries: Vec<(usize, usize, C64)>,
}

impl Sparse {
    fn from_dense(m: &DMatrix<C64>) -> Self {
        let mut entries = Vec::new();
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                let v = m[(i, j)];
                if v != ZERO {
                    entries.push((i, j, v));
                }
            }
        }
        Self { n: m.nrows(), entries }
    }

    /// `out += c · S x`.
    fn left_acc(&self, x: &[C64], out: &mut [C64], c: C64) {
        let n = self.n;
        for &(i, k, v) in &self.entries {
            let cv = c * v;
            for j in 0..n {
                out[j * n + i] += cv * x[j * n + k];
            }
        }
    }

    /// `out += c · x S`.
    fn right_acc(&self, x: &[C64], out: &mut [C64], c: C64) {
        let n = self.n;
        for &(k, j, v) in &self.entries {
            let cv = c * v;
            let (src, dst) = (&x[k * n..(k + 1) * n], &mut out[j * n..(j + 1) * n]);
            for (o, s) in dst.iter_mut().zip(src) {
                *o += cv * s;
            }
        }
    }
}

/// Matrix-form Lindblad generator. Never forms the `d² × d²` superoperator,
/// so it scales to layouts where the dense form does not fit in memory.
#[derive(Debug, Clone)]
pub struct LindbladGenerator {
    layout: SpaceLayout,
    h_eff: Sparse,
    h_eff_dag: Sparse,
    jumps: Vec<(Sparse, Sparse, f64)>,
    recoil: Option<(f64, Sparse, Sparse, Sparse)>,
}

impl LindbladGenerator {
    fn assemble(layout: SpaceLayout, h: DMatrix<C64>, p: &SystemParams, recoil: bool) -> Self {
        let a = cavity_lowering(layout).matrix;
        let s = sigma(layout).matrix;
        let decay = (a.adjoint() * &a) * C64::from(p.kappa) + (s.adjoint() * &s) * C64::from(p.gamma);
        let h_eff = h - decay * (I * 0.5);
        let jumps = [(a, p.kappa), (s.clone(), p.gamma)]
            .into_iter()
            .filter(|(_, r)| *r != 0.0)
            .map(|(c, r)| (Sparse::from_dense(&c), Sparse::from_dense(&c.adjoint()), r))
            .collect();
        let recoil = (recoil && recoil_rate(p) != 0.0).then(|| {
            let x = position(layout).matrix;
            let x2 = &x * &x;
            (recoil_rate(p), Sparse::from_dense(&s), Sparse::from_dense(&x), Sparse::from_dense(&x2))
        });
        Self {
            layout,
            h_eff_dag: Sparse::from_dense(&h_eff.adjoint()),
            h_eff: Sparse::from_dense(&h_eff),
            jumps,
            recoil,
        }
    }

    pub fn internal(p: &SystemParams, layout: SpaceLayout) -> Self {
        let layout = layout.without_motion();
        Self::assemble(layout, build_h0(p, layout).matrix, p, false)
    }

    pub fn full(p: &SystemParams, layout: SpaceLayout, include_recoil_diffusion: bool) -> Result<Self, HilbertError> {
        if layout.motion_dim < 2 {
            return Err(HilbertError::InvalidLayout("full Liouvillian needs motion_dim >= 2".into()));
        }
        Ok(Self::assemble(layout, build_h_full(p, layout).matrix, p, include_recoil_diffusion))
    }
}

impl Generator for LindbladGenerator {
    fn layout(&self) -> SpaceLayout {
        self.layout
    }

    fn apply(&self, rho: &[C64], out: &mut [C64]) {
        out.fill(ZERO);
        self.h_eff.left_acc(rho, out, -I);
        self.h_eff_dag.right_acc(rho, out, I);
        let mut tmp = vec![ZERO; rho.len()];
        for (c, cdag, rate) in &self.jumps {
            tmp.fill(ZERO);
            c.left_acc(rho, &mut tmp, ONE);
            cdag.right_acc(&tmp, out, C64::from(*rate));
        }
        if let Some((rate, s, x, x2)) = &self.recoil {
            // m = σρσ†
            let mut m = vec![ZERO; rho.len()];
            tmp.fill(ZERO);
            s.left_acc(rho, &mut tmp, ONE);
            let sdag = Sparse { n: s.n, entries: s.entries.iter().map(|&(i, j, v)| (j, i, v.conj())).collect() };
            sdag.right_acc(&tmp, &mut m, ONE);
            // X m X
            tmp.fill(ZERO);
            x.left_acc(&m, &mut tmp, ONE);
            x.right_acc(&tmp, out, C64::from(*rate));
            x2.left_acc(&m, out, C64::from(-0.5 * rate));
            x2.right_acc(&m, out, C64::from(-0.5 * rate));
        }
    }
}

/// Builds the dense superoperator by applying a generator to every basis
/// matrix. Only sensible for small layouts.
pub fn densify(gen: &dyn Generator) -> SuperoperatorMatrix {
    let layout = gen.layout();
    let n = layout.dim() * layout.dim();
    let mut m = DMatrix::zeros(n, n);
    let mut e = vec![ZERO; n];
    let mut col = vec![ZERO; n];
    for k in 0..n {
        e[k] = ONE;
        gen.apply(&e, &mut col);
        m.column_mut(k).copy_from_slice(&col);
        e[k] = ZERO;
    }
    SuperoperatorMatrix { layout, matrix: m }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityOperator {
    pub layout: SpaceLayout,
    pub matrix: DMatrix<C64>,
}

impl DensityOperator {
    /// Validated constructor.
    pub fn new(layout: SpaceLayout, matrix: DMatrix<C64>) -> Result<Self, HilbertError> {
        let rho = Self { layout, matrix };
        rho.validate()?;
        Ok(rho)
    }

    pub fn pure(layout: SpaceLayout, atom: usize, photons: usize, phonons: usize) -> Self {
        let d = layout.dim();
        let mut m = DMatrix::zeros(d, d);
        let k = layout.index(atom, photons, phonons);
        m[(k, k)] = ONE;
        Self { layout, matrix: m }
    }

    /// `ρ_internal ⊗ diag(p)` on a layout with motion.
    pub fn product_with_populations(internal: &DensityOperator, populations: &[f64], layout: SpaceLayout) -> Result<Self, HilbertError> {
        if internal.layout != layout.without_motion() {
            return Err(HilbertError::LayoutMismatch(internal.layout, layout.without_motion()));
        }
        if populations.len() != layout.motion_dim {
            return Err(HilbertError::InvalidDensity(format!(
                "{} motional populations for motion_dim {}",
                populations.len(),
                layout.motion_dim
            )));
        }
        let motion = DMatrix::from_diagonal(&DVector::from_iterator(populations.len(), populations.iter().map(|&p| C64::from(p))));
        Ok(Self { layout, matrix: internal.matrix.kronecker(&motion) })
    }

    pub fn trace(&self) -> C64 {
        self.matrix.trace()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let h = (&self.matrix + self.matrix.adjoint()) * C64::from(0.5);
        h.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn validate(&self) -> Result<(), HilbertError> {
        let d = self.layout.dim();
        if self.matrix.shape() != (d, d) {
            return Err(HilbertError::InvalidDensity(format!("shape {:?} for dimension {d}", self.matrix.shape())));
        }
        self.check_drift(HERMITIAN_TOL, TRACE_TOL)?;
        let lam = self.min_eigenvalue();
        if lam < -POSITIVITY_TOL {
            return Err(HilbertError::InvalidDensity(format!("negative eigenvalue {lam:e}")));
        }
        Ok(())
    }

    fn check_drift(&self, herm_tol: f64, trace_tol: f64) -> Result<(), HilbertError> {
        let herm = (&self.matrix - self.matrix.adjoint()).camax();
        if herm > herm_tol {
            return Err(HilbertError::InvalidDensity(format!("hermiticity defect {herm:e}")));
        }
        let tr = self.trace();
        if (tr - ONE).norm() > trace_tol {
            return Err(HilbertError::InvalidDensity(format!("trace {tr}")));
        }
        Ok(())
    }

    /// Reduced populations of the motional Fock states.
    pub fn motional_populations(&self) -> Vec<f64> {
        let nm = self.layout.motion_factor();
        let mut p = vec![0.0; nm];
        for (k, pk) in p.iter_mut().enumerate() {
            for atom in 0..2 {
                for c in 0..self.layout.cavity_dim {
                    let i = self.layout.index(atom, c, k);
                    *pk += self.matrix[(i, i)].re;
                }
            }
        }
        p
    }
}

/// `Tr(op ρ)`.
pub fn expectation(op: &OperatorMatrix, rho: &DensityOperator) -> Result<C64, HilbertError> {
    if op.layout != rho.layout {
        return Err(HilbertError::LayoutMismatch(op.layout, rho.layout));
    }
    Ok(trace_product(&op.matrix, rho.matrix.as_slice()))
}

/// `Tr(A X)` with `X` given column-major.
pub fn trace_product(a: &DMatrix<C64>, x: &[C64]) -> C64 {
    let d = a.nrows();
    let mut acc = ZERO;
    for j in 0..d {
        for i in 0..d {
            acc += a[(j, i)] * x[j * d + i];
        }
    }
    acc
}

/// Unique null vector of `L`, normalised to unit trace.
pub fn steady_state_solve(l: &SuperoperatorMatrix) -> Result<DensityOperator, HilbertError> {
    let d = l.layout.dim();
    let n = d * d;
    let mut m = l.matrix.clone();
    // the diagonal rows sum to zero for a trace-preserving L; swap one of
    // them for the normalisation condition
    for j in 0..n {
        m[(0, j)] = ZERO;
    }
    for i in 0..d {
        m[(0, i * d + i)] = ONE;
    }
    let lu = m.lu();
    let pivots = lu.u().diagonal().map(|z| z.norm());
    let ratio = pivots.min() / pivots.max();
    if !(ratio > DEGENERACY_TOL) {
        return Err(HilbertError::DegenerateSteadyState { pivot_ratio: ratio });
    }
    let mut rhs = DVector::zeros(n);
    rhs[0] = ONE;
    let x = lu.solve(&rhs).ok_or(HilbertError::DegenerateSteadyState { pivot_ratio: 0.0 })?;
    let rho = DMatrix::from_column_slice(d, d, x.as_slice());
    let rho = (&rho + rho.adjoint()) * C64::from(0.5);
    let rho = &rho / rho.trace();

    let residual = (&l.matrix * DVector::from_column_slice(rho.as_slice())).norm();
    let scale = l.matrix.camax().max(1.0);
    if residual > RESIDUAL_TOL * scale {
        return Err(HilbertError::Residual { residual });
    }
    DensityOperator::new(l.layout, rho)
}

/// Solves `(L + shift) x = rhs` for a vectorised operator.
pub fn resolvent_solve(l: &SuperoperatorMatrix, shift: C64, rhs: &[C64]) -> Result<Vec<C64>, HilbertError> {
    let n = l.dim();
    let mut m = l.matrix.clone();
    for k in 0..n {
        m[(k, k)] += shift;
    }
    let b = DVector::from_column_slice(rhs);
    let lu = m.clone().lu();
    let pivots = lu.u().diagonal().map(|z| z.norm());
    if !(pivots.min() > 1e-14 * pivots.max()) {
        return Err(HilbertError::SingularResolvent { shift });
    }
    let x = lu.solve(&b).ok_or(HilbertError::SingularResolvent { shift })?;
    let residual = (&m * &x - &b).norm();
    if residual > RESIDUAL_TOL * b.norm().max(f64::MIN_POSITIVE) {
        return Err(HilbertError::Residual { residual });
    }
    Ok(x.as_slice().to_vec())
}

/// Integrates `ρ̇ = Lρ` and calls `hook` at each requested time.
pub fn propagate<H>(gen: &dyn Generator, rho0: &DensityOperator, t_grid: &[f64], tol: Tolerances, mut hook: H) -> Result<(), HilbertError>
where
    H: FnMut(f64, &[C64]) -> Result<(), HilbertError>,
{
    if rho0.layout != gen.layout() {
        return Err(HilbertError::LayoutMismatch(rho0.layout, gen.layout()));
    }
    if t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(HilbertError::InvalidDensity("time grid must be increasing".into()));
    }
    let t0 = t_grid.first().copied().unwrap_or(0.0);
    let mut stepper = Dopri5::new(t0, rho0.matrix.as_slice().to_vec(), tol);
    let mut rhs = |_t: f64, y: &[C64], dy: &mut [C64]| gen.apply(y, dy);
    for &t in t_grid {
        let _ = stepper.advance_to(t, &mut rhs, |_, _| ControlFlow::Continue(()))?;
        hook(t, stepper.state())?;
    }
    Ok(())
}

/// Snapshots of `ρ(t)` on `t_grid`, each checked for hermiticity and trace.
pub fn evolve_density(gen: &dyn Generator, rho0: &DensityOperator, t_grid: &[f64], tol: Tolerances) -> Result<Vec<DensityOperator>, HilbertError> {
    rho0.validate()?;
    let d = rho0.layout.dim();
    let mut out = Vec::with_capacity(t_grid.len());
    propagate(gen, rho0, t_grid, tol, |t, y| {
        let rho = DensityOperator { layout: rho0.layout, matrix: DMatrix::from_column_slice(d, d, y) };
        rho.check_drift(1e-8, 1e-9).map_err(|e| HilbertError::Drift { t, what: e.to_string() })?;
        out.push(rho);
        Ok(())
    })?;
    Ok(out)
}
