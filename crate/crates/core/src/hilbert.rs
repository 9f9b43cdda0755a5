//! Truncated Fock spaces for `2N` cavity modes plus one two-level coupler
//! qubit, and the dense operator algebra used everywhere else.
//!
//! Basis enumeration is little-endian over modes with the qubit last:
//!
//! ```text
//! index = n_a1 + d n_a2 + ... + d^(N-1) n_aN
//!       + d^N n_b1 + ... + d^(2N-1) n_bN
//!       + d^(2N) q            (q = 0 for |g>, 1 for |e>)
//! ```
//!
//! Mode `a1` varies fastest and the qubit slowest. This order is part of the
//! public contract: CSV dumps and tests index states through it.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest Hilbert-space dimension accepted by [`build_space`].
pub const DEFAULT_DIMENSION_CAP: usize = 10_000;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CavitySet {
    A,
    B,
}

/// A cavity mode `a_j` or `b_j`. `pair` is zero-based; `Display` prints the
/// conventional one-based label (`a1`, `b2`, ...).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Mode {
    pub set: CavitySet,
    pub pair: usize,
}

impl Mode {
    pub fn a(pair: usize) -> Self {
        Mode { set: CavitySet::A, pair }
    }

    pub fn b(pair: usize) -> Self {
        Mode { set: CavitySet::B, pair }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.set {
            CavitySet::A => 'a',
            CavitySet::B => 'b',
        };
        write!(f, "{}{}", s, self.pair + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QubitLevel {
    #[serde(rename = "g")]
    Ground,
    #[serde(rename = "e")]
    Excited,
}

impl QubitLevel {
    fn index(self) -> usize {
        match self {
            QubitLevel::Ground => 0,
            QubitLevel::Excited => 1,
        }
    }
}

/// One tensor factor of the layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Factor {
    Mode(Mode),
    Qubit,
}

/// Normalization of the qubit `Sz` operator.
///
/// `Unhalved` is `|e><e| - |g><g|`; `Halved` is half of that.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SzConvention {
    #[default]
    Unhalved,
    Halved,
}

impl std::str::FromStr for SzConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unhalved" => Ok(SzConvention::Unhalved),
            "halved" => Ok(SzConvention::Halved),
            other => Err(Error::invalid(format!("unknown Sz convention `{other}`"))),
        }
    }
}

/// Shape of the truncated Hilbert space: `N` pairs of cavities, Fock cutoff
/// `d` per mode, and the coupler qubit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SystemLayout {
    n_pairs: usize,
    cutoff: usize,
    cavity_dim: usize,
    dim: usize,
}

/// Builds a layout with the default dimension cap.
pub fn build_space(n_pairs: usize, fock_cutoff: usize) -> Result<SystemLayout> {
    SystemLayout::with_dimension_cap(n_pairs, fock_cutoff, DEFAULT_DIMENSION_CAP)
}

impl SystemLayout {
    pub fn new(n_pairs: usize, fock_cutoff: usize) -> Result<Self> {
        build_space(n_pairs, fock_cutoff)
    }

    pub fn with_dimension_cap(n_pairs: usize, fock_cutoff: usize, cap: usize) -> Result<Self> {
        if n_pairs == 0 {
            return Err(Error::invalid("need at least one cavity pair"));
        }
        if fock_cutoff < 2 {
            return Err(Error::invalid(format!(
                "Fock cutoff must be at least 2, got {fock_cutoff}"
            )));
        }
        let cavity_dim = u32::try_from(2 * n_pairs)
            .ok()
            .and_then(|e| fock_cutoff.checked_pow(e));
        let dim = cavity_dim.and_then(|c| c.checked_mul(2));
        match (cavity_dim, dim) {
            (Some(cavity_dim), Some(dim)) if dim <= cap => Ok(SystemLayout {
                n_pairs,
                cutoff: fock_cutoff,
                cavity_dim,
                dim,
            }),
            _ => Err(Error::invalid(format!(
                "Hilbert space for N={n_pairs}, d={fock_cutoff} exceeds the dimension cap {cap}"
            ))),
        }
    }

    pub fn n_pairs(&self) -> usize {
        self.n_pairs
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_modes(&self) -> usize {
        2 * self.n_pairs
    }

    /// Dimension of the cavity part alone, `d^(2N)`.
    pub fn cavity_dim(&self) -> usize {
        self.cavity_dim
    }

    /// Dimension of one cavity set, `d^N`.
    pub fn register_dim(&self) -> usize {
        self.cutoff.pow(self.n_pairs as u32)
    }

    /// All modes in basis order: `a1..aN, b1..bN`.
    pub fn modes(&self) -> impl Iterator<Item = Mode> + '_ {
        (0..self.n_pairs)
            .map(Mode::a)
            .chain((0..self.n_pairs).map(Mode::b))
    }

    /// Position of a mode among the `2N` mode digits.
    pub fn mode_slot(&self, mode: Mode) -> Result<usize> {
        if mode.pair >= self.n_pairs {
            return Err(Error::invalid(format!(
                "mode {mode} does not exist in a layout with {} pairs",
                self.n_pairs
            )));
        }
        Ok(match mode.set {
            CavitySet::A => mode.pair,
            CavitySet::B => self.n_pairs + mode.pair,
        })
    }

    fn factor_geometry(&self, factor: Factor) -> Result<(usize, usize)> {
        match factor {
            Factor::Mode(m) => {
                let slot = self.mode_slot(m)?;
                Ok((self.cutoff.pow(slot as u32), self.cutoff))
            }
            Factor::Qubit => Ok((self.cavity_dim, 2)),
        }
    }

    /// Basis index of a product state. `occupations` lists `2N` photon
    /// numbers in basis order.
    pub fn index_of(&self, occupations: &[usize], qubit: QubitLevel) -> Result<usize> {
        if occupations.len() != self.n_modes() {
            return Err(Error::DimensionMismatch {
                expected: self.n_modes(),
                actual: occupations.len(),
            });
        }
        let mut index = 0;
        let mut stride = 1;
        for (slot, &n) in occupations.iter().enumerate() {
            if n >= self.cutoff {
                return Err(Error::invalid(format!(
                    "occupation {n} of mode slot {slot} reaches the Fock cutoff {}",
                    self.cutoff
                )));
            }
            index += n * stride;
            stride *= self.cutoff;
        }
        Ok(index + qubit.index() * self.cavity_dim)
    }

    pub fn occupation(&self, index: usize, slot: usize) -> usize {
        (index / self.cutoff.pow(slot as u32)) % self.cutoff
    }

    pub fn qubit_level(&self, index: usize) -> QubitLevel {
        if index >= self.cavity_dim {
            QubitLevel::Excited
        } else {
            QubitLevel::Ground
        }
    }

    pub fn decode(&self, index: usize) -> (Vec<usize>, QubitLevel) {
        let occ = (0..self.n_modes())
            .map(|s| self.occupation(index, s))
            .collect();
        (occ, self.qubit_level(index))
    }

    /// Total photon number of a basis state (qubit excitation excluded).
    pub fn photon_number(&self, index: usize) -> usize {
        let mut rest = index % self.cavity_dim;
        let mut total = 0;
        while rest > 0 {
            total += rest % self.cutoff;
            rest /= self.cutoff;
        }
        total
    }

    /// Photons plus qubit excitation of a basis state.
    pub fn excitation(&self, index: usize) -> usize {
        self.photon_number(index) + self.qubit_level(index).index()
    }

    /// Embeds a product of single-factor operators, each acting on a
    /// distinct factor, into the full space.
    pub fn embed(&self, factors: &[(Factor, &DMatrix<C64>)]) -> Result<Operator> {
        let mut geometry = Vec::with_capacity(factors.len());
        for (i, (f, m)) in factors.iter().enumerate() {
            let (stride, size) = self.factor_geometry(*f)?;
            if m.nrows() != size || m.ncols() != size {
                return Err(Error::DimensionMismatch {
                    expected: size,
                    actual: m.nrows(),
                });
            }
            if factors[..i].iter().any(|(g, _)| g == f) {
                return Err(Error::invalid("factor listed twice in embedding"));
            }
            geometry.push((stride, size, *m));
        }
        let mut out = DMatrix::from_element(self.dim, self.dim, ZERO);
        let mut terms: Vec<(usize, C64)> = Vec::new();
        let mut next: Vec<(usize, C64)> = Vec::new();
        for col in 0..self.dim {
            terms.clear();
            terms.push((col, ONE));
            for &(stride, size, m) in &geometry {
                next.clear();
                for &(idx, amp) in &terms {
                    let k = (idx / stride) % size;
                    for r in 0..size {
                        let v = m[(r, k)];
                        if v != ZERO {
                            next.push((idx + r * stride - k * stride, amp * v));
                        }
                    }
                }
                std::mem::swap(&mut terms, &mut next);
            }
            for &(row, amp) in &terms {
                out[(row, col)] += amp;
            }
        }
        Ok(Operator { matrix: out })
    }

    pub fn embed_mode_op(&self, mode: Mode, single: &DMatrix<C64>) -> Result<Operator> {
        self.embed(&[(Factor::Mode(mode), single)])
    }

    pub fn embed_qubit_op(&self, single: &DMatrix<C64>) -> Result<Operator> {
        self.embed(&[(Factor::Qubit, single)])
    }
}

/// Single-mode lowering matrix on `d` levels.
pub fn lowering_matrix(cutoff: usize) -> DMatrix<C64> {
    DMatrix::from_fn(cutoff, cutoff, |r, c| {
        if c == r + 1 {
            C64::new((c as f64).sqrt(), 0.0)
        } else {
            ZERO
        }
    })
}

/// `a_m` embedded in the full space.
pub fn annihilation_op(layout: &SystemLayout, mode: Mode) -> Result<Operator> {
    layout.embed_mode_op(mode, &lowering_matrix(layout.cutoff()))
}

pub fn creation_op(layout: &SystemLayout, mode: Mode) -> Result<Operator> {
    Ok(annihilation_op(layout, mode)?.adjoint())
}

/// Photon-number operator `a_m† a_m`.
pub fn number_op(layout: &SystemLayout, mode: Mode) -> Result<Operator> {
    let d = layout.cutoff();
    let single = DMatrix::from_fn(d, d, |r, c| {
        if r == c {
            C64::new(r as f64, 0.0)
        } else {
            ZERO
        }
    });
    layout.embed_mode_op(mode, &single)
}

/// Total excitation number: all photons plus `|e><e|`.
pub fn total_excitation_op(layout: &SystemLayout) -> Operator {
    let diag = DVector::from_fn(layout.dim(), |i, _| C64::new(layout.excitation(i) as f64, 0.0));
    Operator {
        matrix: DMatrix::from_diagonal(&diag),
    }
}

/// Qubit operators embedded in the full space.
#[derive(Clone, Debug)]
pub struct QubitOps {
    pub s_minus: Operator,
    pub s_plus: Operator,
    pub sz: Operator,
    pub proj_g: Operator,
    pub proj_e: Operator,
}

pub fn qubit_ops(layout: &SystemLayout, convention: SzConvention) -> QubitOps {
    // Qubit factor basis: 0 = |g>, 1 = |e>.
    let sp = DMatrix::from_row_slice(2, 2, &[ZERO, ZERO, ONE, ZERO]);
    let pg = DMatrix::from_row_slice(2, 2, &[ONE, ZERO, ZERO, ZERO]);
    let pe = DMatrix::from_row_slice(2, 2, &[ZERO, ZERO, ZERO, ONE]);
    let scale = match convention {
        SzConvention::Unhalved => 1.0,
        SzConvention::Halved => 0.5,
    };
    let sz = (&pe - &pg) * C64::new(scale, 0.0);
    let embed = |m: &DMatrix<C64>| {
        layout
            .embed_qubit_op(m)
            .expect("qubit factor always has dimension 2")
    };
    let s_plus = embed(&sp);
    QubitOps {
        s_minus: s_plus.adjoint(),
        s_plus,
        sz: embed(&sz),
        proj_g: embed(&pg),
        proj_e: embed(&pe),
    }
}

/// Dense complex square matrix on a truncated Hilbert space.
#[derive(Clone, Debug, PartialEq)]
pub struct Operator {
    matrix: DMatrix<C64>,
}

impl Operator {
    pub fn from_matrix(matrix: DMatrix<C64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::invalid(format!(
                "operator must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::invalid("operator has non-finite entries"));
        }
        Ok(Operator { matrix })
    }

    pub fn zeros(dim: usize) -> Self {
        Operator {
            matrix: DMatrix::from_element(dim, dim, ZERO),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Operator {
            matrix: DMatrix::identity(dim, dim),
        }
    }

    pub fn diagonal(entries: &[C64]) -> Self {
        Operator {
            matrix: DMatrix::from_diagonal(&DVector::from_column_slice(entries)),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.matrix
    }

    pub fn adjoint(&self) -> Operator {
        Operator {
            matrix: self.matrix.adjoint(),
        }
    }

    pub fn matmul(&self, other: &Operator) -> Result<Operator> {
        self.check_dim(other.dim())?;
        Ok(Operator {
            matrix: &self.matrix * &other.matrix,
        })
    }

    /// Kronecker product; `self` is the more significant (slower) factor.
    pub fn tensor(&self, other: &Operator) -> Operator {
        Operator {
            matrix: self.matrix.kronecker(&other.matrix),
        }
    }

    pub fn commutator(&self, other: &Operator) -> Result<Operator> {
        self.check_dim(other.dim())?;
        Ok(Operator {
            matrix: &self.matrix * &other.matrix - &other.matrix * &self.matrix,
        })
    }

    pub fn scale(&self, factor: C64) -> Operator {
        Operator {
            matrix: &self.matrix * factor,
        }
    }

    pub fn apply(&self, v: &DVector<C64>) -> Result<DVector<C64>> {
        self.check_dim(v.len())?;
        Ok(&self.matrix * v)
    }

    pub fn max_abs(&self) -> f64 {
        self.matrix.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// `max |H - H†|` entrywise.
    pub fn hermiticity_error(&self) -> f64 {
        max_hermiticity_error(&self.matrix)
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermiticity_error() <= tol
    }

    /// `exp(scalar * self)`.
    ///
    /// Hermitian operators go through an eigendecomposition, which keeps
    /// `exp(-iHt)` unitary to machine precision; anything else uses Padé
    /// scaling and squaring.
    pub fn expm(&self, scalar: C64) -> Result<Operator> {
        if !scalar.re.is_finite() || !scalar.im.is_finite() {
            return Err(Error::invalid("non-finite scalar in matrix exponential"));
        }
        if self.matrix.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::invalid("non-finite operator in matrix exponential"));
        }
        let dim = self.dim();
        if dim == 0 {
            return Ok(self.clone());
        }
        let tol = 1e-14 * self.max_abs().max(1.0);
        if self.hermiticity_error() <= tol {
            let eig = HermitianEigen::new(&self.matrix);
            Ok(Operator {
                matrix: eig.map(|e| (scalar * e).exp()),
            })
        } else {
            Ok(Operator {
                matrix: (&self.matrix * scalar).exp(),
            })
        }
    }

    fn check_dim(&self, other: usize) -> Result<()> {
        if self.dim() != other {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: other,
            });
        }
        Ok(())
    }
}

pub fn tensor(a: &Operator, b: &Operator) -> Operator {
    a.tensor(b)
}

pub fn adjoint(op: &Operator) -> Operator {
    op.adjoint()
}

pub fn matmul(a: &Operator, b: &Operator) -> Result<Operator> {
    a.matmul(b)
}

pub fn expm(op: &Operator, scalar: C64) -> Result<Operator> {
    op.expm(scalar)
}

impl Add for &Operator {
    type Output = Operator;

    fn add(self, rhs: &Operator) -> Operator {
        Operator {
            matrix: &self.matrix + &rhs.matrix,
        }
    }
}

impl Add for Operator {
    type Output = Operator;

    fn add(self, rhs: Operator) -> Operator {
        Operator {
            matrix: self.matrix + rhs.matrix,
        }
    }
}

impl Sub for &Operator {
    type Output = Operator;

    fn sub(self, rhs: &Operator) -> Operator {
        Operator {
            matrix: &self.matrix - &rhs.matrix,
        }
    }
}

impl Sub for Operator {
    type Output = Operator;

    fn sub(self, rhs: Operator) -> Operator {
        Operator {
            matrix: self.matrix - rhs.matrix,
        }
    }
}

impl Mul for &Operator {
    type Output = Operator;

    fn mul(self, rhs: &Operator) -> Operator {
        Operator {
            matrix: &self.matrix * &rhs.matrix,
        }
    }
}

impl Mul<f64> for &Operator {
    type Output = Operator;

    fn mul(self, rhs: f64) -> Operator {
        self.scale(C64::new(rhs, 0.0))
    }
}

impl Neg for Operator {
    type Output = Operator;

    fn neg(self) -> Operator {
        Operator {
            matrix: -self.matrix,
        }
    }
}

pub(crate) fn max_hermiticity_error(m: &DMatrix<C64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

/// Eigendecomposition of a Hermitian matrix (only the Hermitian part of
/// the input is used).
pub(crate) struct HermitianEigen {
    pub values: Vec<f64>,
    pub vectors: DMatrix<C64>,
}

impl HermitianEigen {
    pub fn new(m: &DMatrix<C64>) -> Self {
        let herm = (m + m.adjoint()) * C64::new(0.5, 0.0);
        let eig = SymmetricEigen::new(herm);
        HermitianEigen {
            values: eig.eigenvalues.iter().copied().collect(),
            vectors: eig.eigenvectors,
        }
    }

    /// `V f(Λ) V†`.
    pub fn map(&self, f: impl Fn(f64) -> C64) -> DMatrix<C64> {
        let mut scaled = self.vectors.clone();
        for (j, &e) in self.values.iter().enumerate() {
            let fe = f(e);
            scaled.column_mut(j).iter_mut().for_each(|z| *z *= fe);
        }
        scaled * self.vectors.adjoint()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Smallest eigenvalue of the Hermitian part of `m`.
pub fn min_eigenvalue(m: &DMatrix<C64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    HermitianEigen::new(m).min()
}

/// Which picture a state is expressed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    /// Frame co-rotating at the qubit frequency; the Hamiltonian is
    /// time independent there.
    #[serde(rename = "lab-rotating")]
    Rotating,
    /// Interaction picture of the free cavity and qubit Hamiltonians, in
    /// which the ideal target states are written.
    #[serde(rename = "interaction")]
    Interaction,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StateData {
    Pure(DVector<C64>),
    Mixed(DMatrix<C64>),
}

/// A validated pure or mixed state tagged with its frame.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantumState {
    data: StateData,
    frame: Frame,
}

pub const PURE_NORM_TOL: f64 = 1e-10;
pub const HERMITICITY_TOL: f64 = 1e-10;
pub const TRACE_TOL: f64 = 1e-8;
pub const POSITIVITY_TOL: f64 = 1e-8;

impl QuantumState {
    pub fn pure(psi: DVector<C64>, frame: Frame) -> Result<Self> {
        let norm = psi.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > PURE_NORM_TOL {
            return Err(Error::invalid(format!(
                "state vector norm {norm} is not 1"
            )));
        }
        Ok(QuantumState {
            data: StateData::Pure(psi),
            frame,
        })
    }

    /// Normalizes `psi` before validating.
    pub fn pure_normalized(psi: DVector<C64>, frame: Frame) -> Result<Self> {
        let norm = psi.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::invalid("cannot normalize a zero or non-finite vector"));
        }
        Self::pure(psi.unscale(norm), frame)
    }

    pub fn mixed(rho: DMatrix<C64>, frame: Frame) -> Result<Self> {
        if rho.nrows() != rho.ncols() {
            return Err(Error::invalid("density matrix must be square"));
        }
        if rho.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::invalid("density matrix has non-finite entries"));
        }
        let herm = max_hermiticity_error(&rho);
        if herm > HERMITICITY_TOL {
            return Err(Error::invalid(format!(
                "density matrix is not Hermitian (error {herm:e})"
            )));
        }
        let tr = rho.trace();
        if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
            return Err(Error::invalid(format!("density matrix trace {tr} is not 1")));
        }
        let min = min_eigenvalue(&rho);
        if min < -POSITIVITY_TOL {
            return Err(Error::invalid(format!(
                "density matrix has negative eigenvalue {min:e}"
            )));
        }
        Ok(QuantumState {
            data: StateData::Mixed(rho),
            frame,
        })
    }

    /// Wraps raw integrator output without re-validating it; callers
    /// report the diagnostics separately.
    pub(crate) fn mixed_unchecked(rho: DMatrix<C64>, frame: Frame) -> Self {
        QuantumState {
            data: StateData::Mixed(rho),
            frame,
        }
    }

    pub(crate) fn pure_unchecked(psi: DVector<C64>, frame: Frame) -> Self {
        QuantumState {
            data: StateData::Pure(psi),
            frame,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.data {
            StateData::Pure(v) => v.len(),
            StateData::Mixed(m) => m.nrows(),
        }
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn with_frame(mut self, frame: Frame) -> Self {
        self.frame = frame;
        self
    }

    pub fn data(&self) -> &StateData {
        &self.data
    }

    pub fn is_pure(&self) -> bool {
        matches!(self.data, StateData::Pure(_))
    }

    pub fn as_pure(&self) -> Option<&DVector<C64>> {
        match &self.data {
            StateData::Pure(v) => Some(v),
            StateData::Mixed(_) => None,
        }
    }

    pub fn density_matrix(&self) -> DMatrix<C64> {
        match &self.data {
            StateData::Pure(v) => v * v.adjoint(),
            StateData::Mixed(m) => m.clone(),
        }
    }

    pub fn to_mixed(&self) -> QuantumState {
        QuantumState {
            data: StateData::Mixed(self.density_matrix()),
            frame: self.frame,
        }
    }

    /// `<A> = Tr(ρ A)`.
    pub fn expectation(&self, op: &Operator) -> Result<C64> {
        if op.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: op.dim(),
            });
        }
        Ok(match &self.data {
            StateData::Pure(v) => v.dotc(&(op.matrix() * v)),
            StateData::Mixed(m) => (op.matrix() * m).trace(),
        })
    }

    /// `U ψ` or `U ρ U†`.
    pub fn transform(&self, u: &Operator) -> Result<QuantumState> {
        if u.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: u.dim(),
            });
        }
        let data = match &self.data {
            StateData::Pure(v) => StateData::Pure(u.matrix() * v),
            StateData::Mixed(m) => StateData::Mixed(u.matrix() * m * u.matrix().adjoint()),
        };
        Ok(QuantumState {
            data,
            frame: self.frame,
        })
    }

    /// Probability weight on basis states accepted by `keep`.
    pub(crate) fn diagonal_weight(&self, keep: impl Fn(usize) -> bool) -> f64 {
        self.diagonal_weighted(|i| if keep(i) { 1.0 } else { 0.0 })
    }

    /// `Σ_i w(i) ρ_ii`.
    pub(crate) fn diagonal_weighted(&self, w: impl Fn(usize) -> f64) -> f64 {
        match &self.data {
            StateData::Pure(v) => v.iter().enumerate().map(|(i, z)| w(i) * z.norm_sqr()).sum(),
            StateData::Mixed(m) => (0..m.nrows()).map(|i| w(i) * m[(i, i)].re).sum(),
        }
    }
}

/// Fock basis ket `|n_a1 .. n_bN> ⊗ |q>`, tagged as an interaction-picture
/// state (frames coincide at `t = 0`).
pub fn fock_state(
    layout: &SystemLayout,
    occupations: &[usize],
    qubit: QubitLevel,
) -> Result<QuantumState> {
    let idx = layout.index_of(occupations, qubit)?;
    let mut psi = DVector::from_element(layout.dim(), ZERO);
    psi[idx] = ONE;
    Ok(QuantumState::pure_unchecked(psi, Frame::Interaction))
}

/// `ψ_a ⊗ ψ_b ⊗ |q>` from register vectors of length `d^N`; register
/// index `Σ_j n_j d^j`.
pub fn product_pure(
    layout: &SystemLayout,
    psi_a: &DVector<C64>,
    psi_b: &DVector<C64>,
    qubit: QubitLevel,
) -> Result<QuantumState> {
    let r = layout.register_dim();
    for v in [psi_a, psi_b] {
        if v.len() != r {
            return Err(Error::DimensionMismatch {
                expected: r,
                actual: v.len(),
            });
        }
    }
    let mut psi = DVector::from_element(layout.dim(), ZERO);
    let offset = qubit.index() * layout.cavity_dim();
    for ib in 0..r {
        for ia in 0..r {
            psi[offset + ia + r * ib] = psi_a[ia] * psi_b[ib];
        }
    }
    QuantumState::pure(psi, Frame::Interaction)
}

/// `ρ_a ⊗ ρ_b ⊗ |q><q|` from register density matrices.
pub fn product_mixed(
    layout: &SystemLayout,
    rho_a: &DMatrix<C64>,
    rho_b: &DMatrix<C64>,
    qubit: QubitLevel,
) -> Result<QuantumState> {
    let r = layout.register_dim();
    for m in [rho_a, rho_b] {
        if m.nrows() != r || m.ncols() != r {
            return Err(Error::DimensionMismatch {
                expected: r,
                actual: m.nrows(),
            });
        }
    }
    let mut q = DMatrix::from_element(2, 2, ZERO);
    q[(qubit.index(), qubit.index())] = ONE;
    let rho = q.kronecker(&rho_b.kronecker(rho_a));
    QuantumState::mixed(rho, Frame::Interaction)
}

/// Reduced density matrix on the listed factors. The first listed factor
/// is the least significant digit of the result.
pub fn partial_trace(
    state: &QuantumState,
    layout: &SystemLayout,
    keep: &[Factor],
) -> Result<DMatrix<C64>> {
    if state.dim() != layout.dim() {
        return Err(Error::DimensionMismatch {
            expected: layout.dim(),
            actual: state.dim(),
        });
    }
    let mut geometry = Vec::with_capacity(keep.len());
    for (i, f) in keep.iter().enumerate() {
        if keep[..i].contains(f) {
            return Err(Error::invalid("factor listed twice in partial trace"));
        }
        geometry.push(layout.factor_geometry(*f)?);
    }
    let kept_dim: usize = geometry.iter().map(|(_, s)| s).product();
    // Split every index into (kept index, environment index).
    let split = |idx: usize| {
        let mut kept = 0;
        let mut env = idx;
        let mut place = 1;
        for &(stride, size) in &geometry {
            let digit = (idx / stride) % size;
            kept += digit * place;
            place *= size;
            env -= digit * stride;
        }
        (kept, env)
    };
    let parts: Vec<(usize, usize)> = (0..layout.dim()).map(split).collect();
    let rho = state.density_matrix();
    let mut out = DMatrix::from_element(kept_dim, kept_dim, ZERO);
    for (i, &(ki, ei)) in parts.iter().enumerate() {
        for (j, &(kj, ej)) in parts.iter().enumerate() {
            if ei == ej {
                out[(ki, kj)] += rho[(i, j)];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    #[test]
    fn dimensions() {
        assert_eq!(build_space(2, 3).unwrap().dim(), 162);
        assert_eq!(build_space(1, 2).unwrap().dim(), 8);
        assert_eq!(build_space(3, 2).unwrap().dim(), 128);
    }

    #[test]
    fn rejects_bad_layouts() {
        assert!(build_space(0, 3).is_err());
        assert!(build_space(2, 1).is_err());
        // 3^8 * 2 = 13122 > 10^4
        assert!(build_space(4, 3).is_err());
        assert!(SystemLayout::with_dimension_cap(4, 3, 20_000).is_ok());
        assert!(build_space(40, 10).is_err());
    }

    #[test]
    fn modes_are_unique_and_cover_all_slots() {
        let layout = build_space(3, 2).unwrap();
        let mut slots: Vec<usize> = layout.modes().map(|m| layout.mode_slot(m).unwrap()).collect();
        slots.sort();
        assert_eq!(slots, (0..6).collect::<Vec<_>>());
        assert!(layout.mode_slot(Mode::b(3)).is_err());
    }

    #[test]
    fn lowering_blocks() {
        let a2 = lowering_matrix(2);
        assert_eq!(a2, DMatrix::from_row_slice(2, 2, &[c(0.0), c(1.0), c(0.0), c(0.0)]));
        let a3 = lowering_matrix(3);
        assert_eq!(a3[(0, 1)], c(1.0));
        assert_eq!(a3[(1, 2)], c(2f64.sqrt()));
        assert_eq!(a3.iter().filter(|z| **z != ZERO).count(), 2);
        let n = a3.adjoint() * &a3;
        for i in 0..3 {
            assert_abs_diff_eq!(n[(i, i)].re, i as f64, epsilon = 1e-15);
        }
    }

    #[test]
    fn truncated_commutator_pattern() {
        let layout = build_space(1, 3).unwrap();
        let a = annihilation_op(&layout, Mode::a(0)).unwrap();
        let comm = a.commutator(&a.adjoint()).unwrap();
        for i in 0..layout.dim() {
            for j in 0..layout.dim() {
                let expected = if i != j {
                    0.0
                } else if layout.occupation(i, 0) == 2 {
                    // top level: [a, a†] = -(d-1) there
                    -2.0
                } else {
                    1.0
                };
                assert_abs_diff_eq!(comm.matrix()[(i, j)].re, expected, epsilon = 1e-12);
                assert_abs_diff_eq!(comm.matrix()[(i, j)].im, 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn disjoint_mode_operators_commute_exactly() {
        let layout = build_space(2, 3).unwrap();
        let ops: Vec<Operator> = layout
            .modes()
            .map(|m| annihilation_op(&layout, m).unwrap())
            .collect();
        let q = qubit_ops(&layout, SzConvention::Unhalved);
        for (i, x) in ops.iter().enumerate() {
            for (j, y) in ops.iter().enumerate() {
                if i != j {
                    assert_eq!(x.commutator(y).unwrap().max_abs(), 0.0);
                    assert_eq!(x.commutator(&y.adjoint()).unwrap().max_abs(), 0.0);
                }
            }
            assert_eq!(x.commutator(&q.s_plus).unwrap().max_abs(), 0.0);
        }
    }

    #[test]
    fn qubit_algebra() {
        let layout = build_space(1, 2).unwrap();
        let q = qubit_ops(&layout, SzConvention::Unhalved);
        assert_eq!(q.s_plus.matmul(&q.s_minus).unwrap(), q.proj_e);
        assert_eq!(q.s_plus.matmul(&q.s_plus).unwrap().max_abs(), 0.0);
        assert_eq!(q.sz.matmul(&q.sz).unwrap(), Operator::identity(layout.dim()));
        assert_eq!(&q.proj_e - &q.proj_g, q.sz);
        let half = qubit_ops(&layout, SzConvention::Halved);
        assert_eq!(&half.sz * 2.0, q.sz);
    }

    #[test]
    fn fock_state_indexing() {
        let layout = build_space(1, 2).unwrap();
        let vac = fock_state(&layout, &[0, 0], QubitLevel::Ground).unwrap();
        assert_eq!(vac.as_pure().unwrap()[0], ONE);
        let one = fock_state(&layout, &[1, 0], QubitLevel::Ground).unwrap();
        assert_eq!(one.as_pure().unwrap()[1], ONE);
        let e = fock_state(&layout, &[0, 1], QubitLevel::Excited).unwrap();
        assert_eq!(e.as_pure().unwrap()[2 + 4], ONE);
        assert!(fock_state(&layout, &[2, 0], QubitLevel::Ground).is_err());
        assert!(fock_state(&layout, &[0], QubitLevel::Ground).is_err());
    }

    #[test]
    fn decode_round_trip() {
        let layout = build_space(2, 3).unwrap();
        for i in 0..layout.dim() {
            let (occ, q) = layout.decode(i);
            assert_eq!(layout.index_of(&occ, q).unwrap(), i);
            let photons: usize = occ.iter().sum();
            assert_eq!(layout.photon_number(i), photons);
        }
    }

    #[test]
    fn number_op_matches_a_dagger_a() {
        let layout = build_space(2, 3).unwrap();
        for m in layout.modes() {
            let a = annihilation_op(&layout, m).unwrap();
            let n = a.adjoint().matmul(&a).unwrap();
            assert!((&n - &number_op(&layout, m).unwrap()).max_abs() < 1e-14);
        }
    }

    #[test]
    fn adjoint_is_an_involution() {
        let m = DMatrix::from_fn(5, 5, |i, j| C64::new(i as f64 * 0.3 - j as f64, (i * j) as f64 * 0.1));
        let op = Operator::from_matrix(m).unwrap();
        assert_eq!(op.adjoint().adjoint(), op);
    }

    #[test]
    fn expm_basics() {
        let zero = Operator::zeros(4);
        assert_eq!(zero.expm(C64::new(0.0, -3.0)).unwrap(), Operator::identity(4));
        let w = [0.3, -1.2, 2.5];
        let h = Operator::diagonal(&w.map(c));
        let t = 0.7;
        let u = h.expm(C64::new(0.0, -t)).unwrap();
        for (i, &wi) in w.iter().enumerate() {
            let expected = C64::new(0.0, -wi * t).exp();
            assert_abs_diff_eq!((u.matrix()[(i, i)] - expected).norm(), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn expm_agrees_between_routes() {
        // Non-Hermitian input goes through Padé; compare with the Hermitian
        // route applied to i*H.
        let h = DMatrix::from_fn(6, 6, |i, j| {
            let x = ((i * 7 + j * 3) % 5) as f64 * 0.2;
            let y = ((i * 2 + j * 5) % 3) as f64 * 0.1;
            if i == j {
                C64::new(x, 0.0)
            } else if i < j {
                C64::new(x, y)
            } else {
                C64::new(((j * 7 + i * 3) % 5) as f64 * 0.2, -(((j * 2 + i * 5) % 3) as f64 * 0.1))
            }
        });
        let herm = Operator::from_matrix(h.clone()).unwrap();
        assert!(herm.is_hermitian(0.0));
        let via_eig = herm.expm(C64::new(0.0, -1.3)).unwrap();
        let anti = Operator::from_matrix(h * C64::new(0.0, -1.3)).unwrap();
        let via_pade = anti.expm(ONE).unwrap();
        assert!((&via_eig - &via_pade).max_abs() < 1e-12);
    }

    #[test]
    fn partial_trace_of_product() {
        let layout = build_space(1, 2).unwrap();
        let s = 0.5f64.sqrt();
        let psi_a = DVector::from_vec(vec![c(s), c(s)]);
        let psi_b = DVector::from_vec(vec![c(0.0), c(1.0)]);
        let state = product_pure(&layout, &psi_a, &psi_b, QubitLevel::Ground).unwrap();
        let ra = partial_trace(&state, &layout, &[Factor::Mode(Mode::a(0))]).unwrap();
        for z in ra.iter() {
            assert_abs_diff_eq!(z.re, 0.5, epsilon = 1e-15);
        }
        let rq = partial_trace(&state, &layout, &[Factor::Qubit]).unwrap();
        assert_abs_diff_eq!(rq[(0, 0)].re, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn mixed_state_validation() {
        let ok = DMatrix::from_diagonal(&DVector::from_vec(vec![c(0.25), c(0.75)]));
        assert!(QuantumState::mixed(ok, Frame::Interaction).is_ok());
        let neg = DMatrix::from_diagonal(&DVector::from_vec(vec![c(-0.1), c(1.1)]));
        assert!(QuantumState::mixed(neg, Frame::Interaction).is_err());
        let bad_trace = DMatrix::from_diagonal(&DVector::from_vec(vec![c(0.5), c(0.6)]));
        assert!(QuantumState::mixed(bad_trace, Frame::Interaction).is_err());
        let mut non_herm = DMatrix::from_diagonal(&DVector::from_vec(vec![c(0.5), c(0.5)]));
        non_herm[(0, 1)] = C64::new(0.1, 0.0);
        assert!(QuantumState::mixed(non_herm, Frame::Interaction).is_err());
        assert!(QuantumState::pure(DVector::from_vec(vec![c(1.0), c(1.0)]), Frame::Interaction).is_err());
    }
}
