//! Time evolution: Schrödinger propagation (the validation oracle) and
//! integration of the Lindblad master equation
//!
//! ```text
//! dρ/dt = -i[H, ρ] + Σ_j κ_j D[a_j]ρ + Σ_j κ'_j D[b_j]ρ + γ_φ D[Sz]ρ + γ D[S-]ρ
//! D[c]ρ = c ρ c† - c†c ρ / 2 - ρ c†c / 2
//! ```
//!
//! With the unhalved `Sz` (`Sz² = 1`) the dephasing term is exactly
//! `γ_φ (Sz ρ Sz - ρ)`.
//!
//! The Lindblad integrator never touches the full `dim × dim` density
//! matrix. It works on the set of basis states reachable from the support
//! of `ρ0` through `H` and the jump operators, which is invariant and, for
//! excitation-conserving models, far smaller than the full space. When the
//! generator conserves total excitation it also integrates in a frame
//! shifted by `ω_ref N_tot`; that conjugation commutes with every term of
//! the generator and is undone exactly on output.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{
    annihilation_op, min_eigenvalue, qubit_ops, Frame, Mode, Operator, QuantumState, QubitLevel,
    StateData, SystemLayout, SzConvention,
};
use crate::model::{
    effective_hamiltonians, rotating_frame_hamiltonian, swap_hamiltonian, DecoherenceConfig,
    ProtocolConfig,
};

const ZERO: C64 = C64::new(0.0, 0.0);

/// Trace or norm drift that aborts an integration.
pub const DRIFT_ABORT: f64 = 1e-6;
/// Most negative eigenvalue tolerated before an integration aborts.
pub const POSITIVITY_ABORT: f64 = -1e-6;

/// Default fixed step as a fraction of the inverse spectral spread of the
/// (shifted) Hamiltonian on the reachable subspace.
pub const DEFAULT_STEP_FRACTION: f64 = 0.05;
/// Default minimum number of steps per integration.
pub const DEFAULT_MIN_STEPS: usize = 2000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    FixedRk4,
    /// Dormand–Prince 5(4) with step-size control.
    Adaptive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorOptions {
    pub method: Method,
    /// Fixed step (seconds); `None` picks one from the spectrum. For the
    /// adaptive method this is the initial step.
    pub dt: Option<f64>,
    /// Local error tolerance of the adaptive method (absolute, on matrix
    /// entries).
    pub rtol: f64,
    /// Steps between recorded samples. The final time is always recorded.
    pub record_stride: usize,
    pub monitor_positivity: bool,
    pub monitor_trace: bool,
    /// Keep full states at every sample rather than only the final one.
    pub store_states: bool,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        IntegratorOptions {
            method: Method::FixedRk4,
            dt: None,
            rtol: 1e-10,
            record_stride: 250,
            monitor_positivity: true,
            monitor_trace: true,
            store_states: false,
        }
    }
}

impl IntegratorOptions {
    pub fn validate(&self) -> Result<()> {
        if let Some(dt) = self.dt {
            if !(dt.is_finite() && dt > 0.0) {
                return Err(Error::invalid(format!("time step must be positive, got {dt}")));
            }
        }
        if !(self.rtol > 0.0 && self.rtol < 1.0) {
            return Err(Error::invalid(format!("tolerance must lie in (0, 1), got {}", self.rtol)));
        }
        if self.record_stride == 0 {
            return Err(Error::invalid("record stride must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleDiagnostics {
    /// `|Tr ρ - 1|`, or `|‖ψ‖² - 1|` for pure states.
    pub trace_error: f64,
    pub hermiticity_error: f64,
    /// Smallest eigenvalue of ρ; `None` when positivity is not monitored.
    pub min_eigenvalue: Option<f64>,
    pub qubit_e_population: f64,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub time: f64,
    pub diagnostics: SampleDiagnostics,
    pub state: Option<QuantumState>,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    pub final_state: QuantumState,
    /// Integration steps taken (accepted steps for the adaptive method).
    pub steps: usize,
    /// Size of the reachable subspace the integrator worked on.
    pub subspace_dim: usize,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.time).collect()
    }

    pub fn final_time(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.time)
    }

    pub fn max_trace_error(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| s.diagnostics.trace_error)
            .fold(0.0, f64::max)
    }

    pub fn max_hermiticity_error(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| s.diagnostics.hermiticity_error)
            .fold(0.0, f64::max)
    }

    /// Smallest monitored eigenvalue over all samples.
    pub fn min_eigenvalue(&self) -> Option<f64> {
        self.samples
            .iter()
            .filter_map(|s| s.diagnostics.min_eigenvalue)
            .reduce(f64::min)
    }

    pub fn max_qubit_e_population(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| s.diagnostics.qubit_e_population)
            .fold(0.0, f64::max)
    }
}

/// Which Hamiltonian drives the master equation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HamiltonianModel {
    /// Full qubit–cavity coupling in the frame rotating at the qubit
    /// frequency.
    #[default]
    RotatingFrame,
    /// Dispersive `H0 + HI`, already in the interaction picture.
    Effective,
    /// Bare beam splitter `He`, interaction picture.
    Swap,
}

impl HamiltonianModel {
    pub fn frame(self) -> Frame {
        match self {
            HamiltonianModel::RotatingFrame => Frame::Rotating,
            HamiltonianModel::Effective | HamiltonianModel::Swap => Frame::Interaction,
        }
    }
}

impl std::str::FromStr for HamiltonianModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotating-frame" | "full" => Ok(HamiltonianModel::RotatingFrame),
            "effective" => Ok(HamiltonianModel::Effective),
            "swap" => Ok(HamiltonianModel::Swap),
            other => Err(Error::invalid(format!("unknown Hamiltonian model `{other}`"))),
        }
    }
}

/// A Hamiltonian plus jump operators `(rate, c)`.
#[derive(Clone, Debug)]
pub struct LindbladProblem {
    layout: SystemLayout,
    hamiltonian: Operator,
    jumps: Vec<(f64, Operator)>,
    frame: Frame,
}

impl LindbladProblem {
    pub fn new(
        layout: SystemLayout,
        hamiltonian: Operator,
        jumps: Vec<(f64, Operator)>,
        frame: Frame,
    ) -> Result<Self> {
        let dim = layout.dim();
        if hamiltonian.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: hamiltonian.dim(),
            });
        }
        let scale = hamiltonian.max_abs().max(1.0);
        if hamiltonian.hermiticity_error() > 1e-12 * scale {
            return Err(Error::invalid("Hamiltonian is not Hermitian"));
        }
        for (rate, c) in &jumps {
            if !(rate.is_finite() && *rate >= 0.0) {
                return Err(Error::invalid(format!("jump rate {rate} must be ≥ 0")));
            }
            if c.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: c.dim(),
                });
            }
        }
        let jumps = jumps.into_iter().filter(|(r, _)| *r > 0.0).collect();
        Ok(LindbladProblem {
            layout,
            hamiltonian,
            jumps,
            frame,
        })
    }

    /// Master equation for the protocol: photon decay on every cavity,
    /// qubit relaxation, and qubit dephasing through `Sz` under the given
    /// normalization.
    pub fn from_protocol(
        config: &ProtocolConfig,
        decoherence: &DecoherenceConfig,
        layout: &SystemLayout,
        model: HamiltonianModel,
        sz: SzConvention,
    ) -> Result<Self> {
        if decoherence.n_pairs() != config.n_pairs() {
            return Err(Error::invalid(format!(
                "decoherence rates given for {} pairs, configuration has {}",
                decoherence.n_pairs(),
                config.n_pairs()
            )));
        }
        let hamiltonian = match model {
            HamiltonianModel::RotatingFrame => rotating_frame_hamiltonian(config, layout)?,
            HamiltonianModel::Effective => {
                let (h0, hi) = effective_hamiltonians(config, layout)?;
                h0 + hi
            }
            HamiltonianModel::Swap => swap_hamiltonian(config, layout)?,
        };
        let q = qubit_ops(layout, sz);
        let mut jumps = Vec::new();
        for j in 0..config.n_pairs() {
            jumps.push((decoherence.kappa_a[j], annihilation_op(layout, Mode::a(j))?));
            jumps.push((decoherence.kappa_b[j], annihilation_op(layout, Mode::b(j))?));
        }
        jumps.push((decoherence.gamma_phi, q.sz));
        jumps.push((decoherence.gamma, q.s_minus));
        LindbladProblem::new(layout.clone(), hamiltonian, jumps, model.frame())
    }

    pub fn layout(&self) -> &SystemLayout {
        &self.layout
    }

    pub fn hamiltonian(&self) -> &Operator {
        &self.hamiltonian
    }

    pub fn jumps(&self) -> &[(f64, Operator)] {
        &self.jumps
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    /// Dense right-hand side on the full space; used by tests and as a
    /// reference for the compiled generator.
    pub fn rhs_dense(&self, rho: &DMatrix<C64>) -> DMatrix<C64> {
        let h = self.hamiltonian.matrix();
        let i = C64::new(0.0, 1.0);
        let mut out = (h * rho - rho * h) * (-i);
        for (rate, c) in &self.jumps {
            let c = c.matrix();
            let cd = c.adjoint();
            let cdc = &cd * c;
            out += (c * rho * &cd - (&cdc * rho + rho * &cdc) * C64::new(0.5, 0.0)) * C64::new(*rate, 0.0);
        }
        out
    }
}

/// Master equation in the rotating frame with the unhalved `Sz`.
pub fn evolve_lindblad(
    config: &ProtocolConfig,
    decoherence: &DecoherenceConfig,
    layout: &SystemLayout,
    rho0: &QuantumState,
    t_final: f64,
    opts: &IntegratorOptions,
) -> Result<Trajectory> {
    let problem = LindbladProblem::from_protocol(
        config,
        decoherence,
        layout,
        HamiltonianModel::RotatingFrame,
        SzConvention::Unhalved,
    )?;
    evolve_problem(&problem, rho0, t_final, opts)
}

/// Sparse rows `(column, value)`.
#[derive(Clone, Debug, Default)]
struct SparseRows {
    start: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<C64>,
}

impl SparseRows {
    fn from_entries(n: usize, mut entries: Vec<(usize, usize, C64)>) -> Self {
        entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut start = vec![0; n + 1];
        for &(r, _, _) in &entries {
            start[r + 1] += 1;
        }
        for i in 0..n {
            start[i + 1] += start[i];
        }
        SparseRows {
            start,
            cols: entries.iter().map(|e| e.1).collect(),
            vals: entries.iter().map(|e| e.2).collect(),
        }
    }

    #[inline]
    fn row(&self, i: usize) -> (&[usize], &[C64]) {
        let (s, e) = (self.start[i], self.start[i + 1]);
        (&self.cols[s..e], &self.vals[s..e])
    }

    fn conj(&self) -> Self {
        SparseRows {
            start: self.start.clone(),
            cols: self.cols.clone(),
            vals: self.vals.iter().map(|v| v.conj()).collect(),
        }
    }
}

/// The Lindblad generator restricted to the reachable subspace:
/// `L(ρ) = M∘ρ + Aρ + ρA† + Σ c ρ c†`, where `M` collects all diagonal
/// contributions and `A = -i K_off` with `K = H - (i/2) Σ γ c†c`.
struct Generator {
    n: usize,
    elementwise: Vec<C64>,
    drift: SparseRows,
    drift_conj: SparseRows,
    jumps: Vec<(SparseRows, SparseRows)>,
    /// Index into the full space of every subspace state.
    support: Vec<usize>,
    /// Total excitation of every subspace state.
    excitation: Vec<i64>,
    excited_qubit: Vec<bool>,
    /// `ω_ref`: the generator was built for `H + ω_ref N_tot`.
    shift: f64,
    spectral_spread: f64,
}

impl Generator {
    fn compile(problem: &LindbladProblem, rho0: &DMatrix<C64>) -> Result<Self> {
        let layout = &problem.layout;
        let dim = layout.dim();
        let h = problem.hamiltonian.matrix();
        let mut k = h.clone();
        for (rate, c) in &problem.jumps {
            let cdc = c.matrix().adjoint() * c.matrix();
            k -= cdc * C64::new(0.0, 0.5 * rate);
        }

        // Reachability closure from the initial support.
        let mut in_set = vec![false; dim];
        let mut queue: Vec<usize> = (0..dim)
            .filter(|&i| (0..dim).any(|j| rho0[(i, j)] != ZERO))
            .collect();
        if queue.is_empty() {
            return Err(Error::invalid("initial state is zero"));
        }
        for &i in &queue {
            in_set[i] = true;
        }
        let mut ops: Vec<&DMatrix<C64>> = vec![&k];
        ops.extend(problem.jumps.iter().map(|(_, c)| c.matrix()));
        while let Some(j) = queue.pop() {
            for m in &ops {
                for i in 0..dim {
                    if !in_set[i] && m[(i, j)] != ZERO {
                        in_set[i] = true;
                        queue.push(i);
                    }
                }
            }
        }
        let support: Vec<usize> = (0..dim).filter(|&i| in_set[i]).collect();
        let n = support.len();
        let excitation: Vec<i64> = support.iter().map(|&i| layout.excitation(i) as i64).collect();
        let excited_qubit: Vec<bool> = support
            .iter()
            .map(|&i| layout.qubit_level(i) == QubitLevel::Excited)
            .collect();

        let restricted = |m: &DMatrix<C64>| -> Vec<(usize, usize, C64)> {
            let mut out = Vec::new();
            for (a, &i) in support.iter().enumerate() {
                for (b, &j) in support.iter().enumerate() {
                    let v = m[(i, j)];
                    if v != ZERO {
                        out.push((a, b, v));
                    }
                }
            }
            out
        };

        // A frame shift ω_ref N_tot is exact only if the generator conserves
        // excitation: [H, N] = 0 and every jump changes N by a fixed amount.
        let k_entries = restricted(&k);
        let conserving = k_entries
            .iter()
            .all(|&(a, b, _)| a == b || excitation[a] == excitation[b])
            && problem.jumps.iter().all(|(_, c)| {
                let e = restricted(c.matrix());
                e.windows(2)
                    .all(|w| excitation[w[0].0] - excitation[w[0].1] == excitation[w[1].0] - excitation[w[1].1])
            });
        let shift = if conserving {
            reference_shift(&support, &excitation, h, rho0)
        } else {
            0.0
        };

        let mut kdiag = vec![ZERO; n];
        let mut drift = Vec::new();
        for (a, b, v) in k_entries {
            if a == b {
                kdiag[a] = v + C64::new(shift * excitation[a] as f64, 0.0);
            } else {
                drift.push((a, b, v * C64::new(0.0, -1.0)));
            }
        }

        let mut diag_jumps: Vec<Vec<C64>> = Vec::new();
        let mut jumps = Vec::new();
        for (rate, c) in &problem.jumps {
            let scale = rate.sqrt();
            let entries: Vec<_> = restricted(c.matrix())
                .into_iter()
                .map(|(a, b, v)| (a, b, v * scale))
                .collect();
            if entries.iter().all(|&(a, b, _)| a == b) {
                let mut d = vec![ZERO; n];
                for (a, _, v) in entries {
                    d[a] = v;
                }
                diag_jumps.push(d);
            } else {
                let rows = SparseRows::from_entries(n, entries);
                let conj = rows.conj();
                jumps.push((rows, conj));
            }
        }

        let i = C64::new(0.0, 1.0);
        let mut elementwise = vec![ZERO; n * n];
        for a in 0..n {
            for b in 0..n {
                let mut m = -i * kdiag[a] + i * kdiag[b].conj();
                for d in &diag_jumps {
                    m += d[a] * d[b].conj();
                }
                elementwise[a * n + b] = m;
            }
        }

        // Gershgorin bound on the spread of the Hermitian part's spectrum.
        let mut radius = vec![0.0; n];
        for &(a, _, v) in &drift {
            radius[a] += v.norm();
        }
        let hi = (0..n).map(|a| kdiag[a].re + radius[a]).fold(f64::NEG_INFINITY, f64::max);
        let lo = (0..n).map(|a| kdiag[a].re - radius[a]).fold(f64::INFINITY, f64::min);
        let spectral_spread = (hi - lo).max(0.0);

        let drift = SparseRows::from_entries(n, drift);
        let drift_conj = drift.conj();
        Ok(Generator {
            n,
            elementwise,
            drift,
            drift_conj,
            jumps,
            support,
            excitation,
            excited_qubit,
            shift,
            spectral_spread,
        })
    }

    fn apply(&self, rho: &[C64], out: &mut [C64], scratch: &mut [C64]) {
        let n = self.n;
        for ((o, r), m) in out.iter_mut().zip(rho).zip(&self.elementwise) {
            *o = m * r;
        }
        // A ρ
        for i in 0..n {
            let (cols, vals) = self.drift.row(i);
            let row_out = &mut out[i * n..(i + 1) * n];
            for (&k, &a) in cols.iter().zip(vals) {
                let src = &rho[k * n..(k + 1) * n];
                for (o, s) in row_out.iter_mut().zip(src) {
                    *o += a * s;
                }
            }
        }
        // ρ A†
        for i in 0..n {
            let src = &rho[i * n..(i + 1) * n];
            let row_out = &mut out[i * n..(i + 1) * n];
            for (j, o) in row_out.iter_mut().enumerate() {
                let (cols, vals) = self.drift_conj.row(j);
                let mut acc = ZERO;
                for (&k, &a) in cols.iter().zip(vals) {
                    acc += src[k] * a;
                }
                *o += acc;
            }
        }
        // c ρ c†
        for (c, c_conj) in &self.jumps {
            let mut any_row = vec![false; n];
            for i in 0..n {
                let (cols, vals) = c.row(i);
                let row = &mut scratch[i * n..(i + 1) * n];
                row.fill(ZERO);
                for (&k, &v) in cols.iter().zip(vals) {
                    any_row[i] = true;
                    let src = &rho[k * n..(k + 1) * n];
                    for (o, s) in row.iter_mut().zip(src) {
                        *o += v * s;
                    }
                }
            }
            for i in (0..n).filter(|&i| any_row[i]) {
                let src = &scratch[i * n..(i + 1) * n];
                let row_out = &mut out[i * n..(i + 1) * n];
                for (j, o) in row_out.iter_mut().enumerate() {
                    let (cols, vals) = c_conj.row(j);
                    let mut acc = ZERO;
                    for (&l, &v) in cols.iter().zip(vals) {
                        acc += src[l] * v;
                    }
                    *o += acc;
                }
            }
        }
    }

    fn restrict(&self, rho: &DMatrix<C64>) -> Vec<C64> {
        let n = self.n;
        let mut out = vec![ZERO; n * n];
        for (a, &i) in self.support.iter().enumerate() {
            for (b, &j) in self.support.iter().enumerate() {
                out[a * n + b] = rho[(i, j)];
            }
        }
        out
    }

    /// Undoes the `ω_ref N_tot` shift at time `t`:
    /// `ρ_ab → e^{i ω_ref (N_a - N_b) t} ρ_ab`.
    fn unshift(&self, rho: &[C64], t: f64) -> DMatrix<C64> {
        let n = self.n;
        DMatrix::from_fn(n, n, |a, b| {
            let dn = (self.excitation[a] - self.excitation[b]) as f64;
            if dn == 0.0 || self.shift == 0.0 {
                rho[a * n + b]
            } else {
                rho[a * n + b] * C64::new(0.0, self.shift * dn * t).exp()
            }
        })
    }

    fn expand(&self, sub: &DMatrix<C64>, dim: usize) -> DMatrix<C64> {
        let mut full = DMatrix::from_element(dim, dim, ZERO);
        for (a, &i) in self.support.iter().enumerate() {
            for (b, &j) in self.support.iter().enumerate() {
                full[(i, j)] = sub[(a, b)];
            }
        }
        full
    }

    fn diagnostics(&self, rho: &[C64], opts: &IntegratorOptions) -> Result<SampleDiagnostics> {
        let n = self.n;
        if rho.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::numerical("density matrix has non-finite entries"));
        }
        let trace: C64 = (0..n).map(|a| rho[a * n + a]).sum();
        let trace_error = (trace - C64::new(1.0, 0.0)).norm();
        let mut hermiticity_error = 0.0f64;
        for a in 0..n {
            for b in a..n {
                hermiticity_error = hermiticity_error.max((rho[a * n + b] - rho[b * n + a].conj()).norm());
            }
        }
        let qubit_e_population = (0..n)
            .filter(|&a| self.excited_qubit[a])
            .map(|a| rho[a * n + a].re)
            .sum();
        let min_eig = if opts.monitor_positivity {
            // Eigenvalues are invariant under the diagonal unshift.
            Some(min_eigenvalue(&DMatrix::from_row_slice(n, n, rho)))
        } else {
            None
        };
        if opts.monitor_trace && trace_error > DRIFT_ABORT {
            return Err(Error::numerical(format!("trace drifted by {trace_error:e}")));
        }
        if let Some(m) = min_eig {
            if m < POSITIVITY_ABORT {
                return Err(Error::numerical(format!(
                    "density matrix lost positivity (min eigenvalue {m:e})"
                )));
            }
        }
        Ok(SampleDiagnostics {
            trace_error,
            hermiticity_error,
            min_eigenvalue: min_eig,
            qubit_e_population,
        })
    }
}

/// Least-squares slope of the diagonal energies against excitation number
/// over the initially populated states, negated: with `H + ω_ref N_tot` the
/// populated coherences rotate as slowly as possible.
fn reference_shift(support: &[usize], excitation: &[i64], h: &DMatrix<C64>, rho0: &DMatrix<C64>) -> f64 {
    let mut w_sum = 0.0;
    let mut n_mean = 0.0;
    let mut e_mean = 0.0;
    for (a, &i) in support.iter().enumerate() {
        let w = rho0[(i, i)].re.max(0.0);
        w_sum += w;
        n_mean += w * excitation[a] as f64;
        e_mean += w * h[(i, i)].re;
    }
    if w_sum <= 0.0 {
        return 0.0;
    }
    n_mean /= w_sum;
    e_mean /= w_sum;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (a, &i) in support.iter().enumerate() {
        let w = rho0[(i, i)].re.max(0.0);
        let dn = excitation[a] as f64 - n_mean;
        cov += w * dn * (h[(i, i)].re - e_mean);
        var += w * dn * dn;
    }
    if var <= 1e-12 * w_sum {
        0.0
    } else {
        -cov / var
    }
}

/// Integrates a master equation from `ρ0` to `t_final`.
pub fn evolve_problem(
    problem: &LindbladProblem,
    rho0: &QuantumState,
    t_final: f64,
    opts: &IntegratorOptions,
) -> Result<Trajectory> {
    opts.validate()?;
    if !(t_final.is_finite() && t_final >= 0.0) {
        return Err(Error::invalid(format!("final time must be ≥ 0, got {t_final}")));
    }
    let dim = problem.layout.dim();
    if rho0.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: rho0.dim(),
        });
    }
    let rho0 = rho0.density_matrix();
    let gen = Generator::compile(problem, &rho0)?;
    let frame = problem.frame;

    let mut rho = gen.restrict(&rho0);
    let mut samples = Vec::new();
    let mut record = |rho: &[C64], t: f64, last: bool, samples: &mut Vec<Sample>| -> Result<()> {
        let diagnostics = gen.diagnostics(rho, opts)?;
        let state = if opts.store_states || last {
            let sub = gen.unshift(rho, t);
            Some(QuantumState::mixed_unchecked(gen.expand(&sub, dim), frame))
        } else {
            None
        };
        samples.push(Sample {
            time: t,
            diagnostics,
            state,
        });
        Ok(())
    };

    let steps = if t_final == 0.0 {
        record(&rho, 0.0, true, &mut samples)?;
        0
    } else {
        match opts.method {
            Method::FixedRk4 => rk4(&gen, &mut rho, t_final, opts, &mut samples, &mut record)?,
            Method::Adaptive => dopri(&gen, &mut rho, t_final, opts, &mut samples, &mut record)?,
        }
    };
    let final_state = samples
        .last_mut()
        .and_then(|s| if opts.store_states { s.state.clone() } else { s.state.take() })
        .expect("final sample always carries a state");
    Ok(Trajectory {
        samples,
        final_state,
        steps,
        subspace_dim: gen.n,
    })
}

/// Step used by the fixed-step integrator when none is given: the smaller
/// of `t_final / 2000` and `0.1 / spread`, where `spread` bounds the
/// eigenvalue range of the (shifted) Hamiltonian on the reachable subspace.
fn default_step(gen: &Generator, t_final: f64) -> f64 {
    let by_spectrum = if gen.spectral_spread > 0.0 {
        DEFAULT_STEP_FRACTION / gen.spectral_spread
    } else {
        f64::INFINITY
    };
    (t_final / DEFAULT_MIN_STEPS as f64).min(by_spectrum)
}

type Recorder<'a> = dyn FnMut(&[C64], f64, bool, &mut Vec<Sample>) -> Result<()> + 'a;

fn rk4(
    gen: &Generator,
    rho: &mut [C64],
    t_final: f64,
    opts: &IntegratorOptions,
    samples: &mut Vec<Sample>,
    record: &mut Recorder<'_>,
) -> Result<usize> {
    let dt_max = opts.dt.unwrap_or_else(|| default_step(gen, t_final));
    let steps = (t_final / dt_max).ceil().max(1.0) as usize;
    let dt = t_final / steps as f64;
    let len = rho.len();
    let mut k1 = vec![ZERO; len];
    let mut k2 = vec![ZERO; len];
    let mut k3 = vec![ZERO; len];
    let mut k4 = vec![ZERO; len];
    let mut stage = vec![ZERO; len];
    let mut scratch = vec![ZERO; len];
    let half = C64::new(0.5 * dt, 0.0);
    let full = C64::new(dt, 0.0);
    let sixth = C64::new(dt / 6.0, 0.0);
    let two = C64::new(2.0, 0.0);

    record(rho, 0.0, false, samples)?;
    for step in 1..=steps {
        gen.apply(rho, &mut k1, &mut scratch);
        for ((s, r), k) in stage.iter_mut().zip(rho.iter()).zip(&k1) {
            *s = r + half * k;
        }
        gen.apply(&stage, &mut k2, &mut scratch);
        for ((s, r), k) in stage.iter_mut().zip(rho.iter()).zip(&k2) {
            *s = r + half * k;
        }
        gen.apply(&stage, &mut k3, &mut scratch);
        for ((s, r), k) in stage.iter_mut().zip(rho.iter()).zip(&k3) {
            *s = r + full * k;
        }
        gen.apply(&stage, &mut k4, &mut scratch);
        for (i, r) in rho.iter_mut().enumerate() {
            *r += sixth * (k1[i] + two * (k2[i] + k3[i]) + k4[i]);
        }
        let last = step == steps;
        if last || step % opts.record_stride == 0 {
            let t = if last { t_final } else { step as f64 * dt };
            record(rho, t, last, samples)
                .map_err(|e| e.context(format!("t = {t:e} s after {step} steps")))?;
        }
    }
    Ok(steps)
}

// Dormand–Prince 5(4) tableau.
const DP_C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_B: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const DP_B_LOW: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

fn dopri(
    gen: &Generator,
    rho: &mut [C64],
    t_final: f64,
    opts: &IntegratorOptions,
    samples: &mut Vec<Sample>,
    record: &mut Recorder<'_>,
) -> Result<usize> {
    let len = rho.len();
    let mut k: Vec<Vec<C64>> = (0..7).map(|_| vec![ZERO; len]).collect();
    let mut stage = vec![ZERO; len];
    let mut next = vec![ZERO; len];
    let mut scratch = vec![ZERO; len];
    let mut dt = opts.dt.unwrap_or_else(|| 10.0 * default_step(gen, t_final)).min(t_final);
    let min_dt = t_final * 1e-14;
    let mut t = 0.0;
    let mut accepted = 0usize;

    record(rho, 0.0, false, samples)?;
    gen.apply(rho, &mut k[0], &mut scratch);
    while t < t_final {
        let last = t + dt >= t_final;
        if last {
            dt = t_final - t;
        }
        for s in 1..7 {
            for (i, st) in stage.iter_mut().enumerate() {
                let mut acc = ZERO;
                for (r, kr) in k.iter().enumerate().take(s) {
                    let a = DP_A[s][r];
                    if a != 0.0 {
                        acc += kr[i] * a;
                    }
                }
                *st = rho[i] + acc * dt;
            }
            let (done, rest) = k.split_at_mut(s);
            let _ = done;
            gen.apply(&stage, &mut rest[0], &mut scratch);
            let _ = DP_C[s];
        }
        // The seventh stage is evaluated at the fifth-order solution.
        next.copy_from_slice(&stage);
        let mut err = 0.0f64;
        for i in 0..len {
            let mut e = ZERO;
            for s in 0..7 {
                e += k[s][i] * (DP_B[s] - DP_B_LOW[s]);
            }
            err = err.max((e * dt).norm());
        }
        let ratio = err / opts.rtol;
        if ratio <= 1.0 || dt <= min_dt {
            t = if last { t_final } else { t + dt };
            rho.copy_from_slice(&next);
            let (first, rest) = k.split_at_mut(1);
            first[0].copy_from_slice(&rest[5]);
            accepted += 1;
            if last || accepted % opts.record_stride == 0 {
                record(rho, t, last, samples)
                    .map_err(|e| e.context(format!("t = {t:e} s after {accepted} steps")))?;
            }
        }
        let factor = if ratio == 0.0 {
            5.0
        } else {
            (0.9 * ratio.powf(-0.2)).clamp(0.2, 5.0)
        };
        dt = (dt * factor).max(min_dt);
        if t >= t_final {
            break;
        }
    }
    Ok(accepted)
}

/// Time dependence of a Schrödinger Hamiltonian.
pub enum SchrodingerHamiltonian<'a> {
    Constant(&'a Operator),
    /// `at(t)` plus the fastest frequency it contains, which sets the
    /// default step `0.01 / max_frequency`.
    TimeDependent {
        at: &'a dyn Fn(f64) -> Operator,
        max_frequency: f64,
    },
}

/// Evolves a pure state under `-i H ψ`. Constant Hamiltonians are
/// propagated exactly through their eigendecomposition; time-dependent
/// ones with fixed-step RK4.
pub fn evolve_schrodinger(
    hamiltonian: SchrodingerHamiltonian<'_>,
    layout: &SystemLayout,
    psi0: &QuantumState,
    t_final: f64,
    opts: &IntegratorOptions,
) -> Result<Trajectory> {
    opts.validate()?;
    let Some(psi0_vec) = psi0.as_pure() else {
        return Err(Error::invalid("Schrödinger evolution needs a pure state"));
    };
    if psi0_vec.len() != layout.dim() {
        return Err(Error::DimensionMismatch {
            expected: layout.dim(),
            actual: psi0_vec.len(),
        });
    }
    if !(t_final.is_finite() && t_final >= 0.0) {
        return Err(Error::invalid(format!("final time must be ≥ 0, got {t_final}")));
    }
    let frame = psi0.frame();
    let cavity_dim = layout.cavity_dim();
    let diag = |psi: &DVector<C64>| -> Result<SampleDiagnostics> {
        let norm_sqr = psi.norm_squared();
        if !norm_sqr.is_finite() {
            return Err(Error::numerical("state vector has non-finite entries"));
        }
        let drift = (norm_sqr - 1.0).abs();
        if opts.monitor_trace && drift > DRIFT_ABORT {
            return Err(Error::numerical(format!("norm drifted by {drift:e}")));
        }
        Ok(SampleDiagnostics {
            trace_error: drift,
            hermiticity_error: 0.0,
            min_eigenvalue: None,
            qubit_e_population: psi.rows(cavity_dim, cavity_dim).norm_squared(),
        })
    };
    let sample = |psi: &DVector<C64>, t: f64, last: bool| -> Result<Sample> {
        Ok(Sample {
            time: t,
            diagnostics: diag(psi)?,
            state: (opts.store_states || last).then(|| QuantumState::pure_unchecked(psi.clone(), frame)),
        })
    };

    let mut samples = Vec::new();
    let steps;
    match hamiltonian {
        SchrodingerHamiltonian::Constant(h) => {
            if h.dim() != layout.dim() {
                return Err(Error::DimensionMismatch {
                    expected: layout.dim(),
                    actual: h.dim(),
                });
            }
            if !h.is_hermitian(1e-12 * h.max_abs().max(1.0)) {
                return Err(Error::invalid("Hamiltonian is not Hermitian"));
            }
            let eig = crate::hilbert::HermitianEigen::new(h.matrix());
            let coeffs = eig.vectors.adjoint() * psi0_vec;
            let at = |t: f64| -> DVector<C64> {
                let phased = DVector::from_fn(coeffs.len(), |i, _| {
                    coeffs[i] * C64::new(0.0, -eig.values[i] * t).exp()
                });
                &eig.vectors * phased
            };
            let dt = opts.dt.unwrap_or(t_final / DEFAULT_MIN_STEPS as f64);
            steps = if t_final == 0.0 {
                0
            } else {
                (t_final / dt).ceil().max(1.0) as usize
            };
            samples.push(sample(psi0_vec, 0.0, steps == 0)?);
            for step in (1..=steps).filter(|s| s % opts.record_stride == 0 || *s == steps) {
                let t = if step == steps { t_final } else { step as f64 * t_final / steps as f64 };
                samples.push(sample(&at(t), t, step == steps)?);
            }
        }
        SchrodingerHamiltonian::TimeDependent { at, max_frequency } => {
            let dt_max = match opts.dt {
                Some(dt) => dt,
                None if max_frequency > 0.0 => 0.01 / max_frequency,
                None => t_final / DEFAULT_MIN_STEPS as f64,
            };
            steps = if t_final == 0.0 {
                0
            } else {
                (t_final / dt_max).ceil().max(1.0) as usize
            };
            let mut psi = psi0_vec.clone();
            samples.push(sample(&psi, 0.0, steps == 0)?);
            let dt = if steps > 0 { t_final / steps as f64 } else { 0.0 };
            let mi = C64::new(0.0, -1.0);
            for step in 1..=steps {
                let t = (step - 1) as f64 * dt;
                let h0 = at(t);
                let hm = at(t + 0.5 * dt);
                let h1 = at(t + dt);
                let k1 = h0.matrix() * &psi * mi;
                let k2 = hm.matrix() * (&psi + &k1 * C64::new(0.5 * dt, 0.0)) * mi;
                let k3 = hm.matrix() * (&psi + &k2 * C64::new(0.5 * dt, 0.0)) * mi;
                let k4 = h1.matrix() * (&psi + &k3 * C64::new(dt, 0.0)) * mi;
                psi += (k1 + (k2 + k3) * C64::new(2.0, 0.0) + k4) * C64::new(dt / 6.0, 0.0);
                let last = step == steps;
                if last || step % opts.record_stride == 0 {
                    let ts = if last { t_final } else { step as f64 * dt };
                    samples.push(sample(&psi, ts, last).map_err(|e| e.context(format!("t = {ts:e} s")))?);
                }
            }
        }
    }
    let final_state = samples
        .last()
        .and_then(|s| s.state.clone())
        .expect("final sample always carries a state");
    Ok(Trajectory {
        samples,
        final_state,
        steps,
        subspace_dim: layout.dim(),
    })
}

/// Diagonal map from the rotating frame to the interaction picture:
/// `ρ_I = D ρ_R D†`, `D(t) = exp(-i Σ_j Δ_j (n_aj + n_bj) t)`.
pub fn frame_to_interaction(
    state: &QuantumState,
    t: f64,
    config: &ProtocolConfig,
    layout: &SystemLayout,
) -> Result<QuantumState> {
    if state.frame() != Frame::Rotating {
        return Err(Error::invalid("frame_to_interaction expects a rotating-frame state"));
    }
    if state.dim() != layout.dim() || config.n_pairs() != layout.n_pairs() {
        return Err(Error::DimensionMismatch {
            expected: layout.dim(),
            actual: state.dim(),
        });
    }
    let n = layout.n_pairs();
    let angles: Vec<f64> = (0..layout.dim())
        .map(|i| {
            config
                .pairs()
                .iter()
                .enumerate()
                .map(|(j, p)| p.detuning * (layout.occupation(i, j) + layout.occupation(i, n + j)) as f64)
                .sum::<f64>()
        })
        .collect();
    let phase = |i: usize, j: usize| C64::new(0.0, -(angles[i] - angles[j]) * t).exp();
    Ok(match state.data() {
        StateData::Pure(v) => QuantumState::pure_unchecked(
            DVector::from_fn(v.len(), |i, _| v[i] * C64::new(0.0, -angles[i] * t).exp()),
            Frame::Interaction,
        ),
        StateData::Mixed(m) => QuantumState::mixed_unchecked(
            DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * phase(i, j)),
            Frame::Interaction,
        ),
    })
}
