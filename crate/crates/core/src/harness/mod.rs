//! Experiments: the four swap scenarios, fidelity-vs-b sweeps, EPR-pair
//! generation and the coupling validity report.

mod config;
mod output;
pub mod selftest;

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::Serialize;

pub use config::{b_range, load_config, parse_config, Quantity};
pub use output::{render as render_records, write_records, OutputFormat, CSV_HEADER};

use crate::analytic::{epr_target_state, ideal_swapped_state, PhaseFactors, Scenario, ScenarioState};
use crate::dynamics::{evolve_problem, frame_to_interaction, HamiltonianModel, IntegratorOptions, LindbladProblem, Trajectory};
use crate::error::{Error, Result};
use crate::hilbert::{
    build_space, fock_state, partial_trace, product_mixed, product_pure, Factor, Frame, Mode, QuantumState,
    QubitLevel, SystemLayout, SzConvention,
};
use crate::metrics::{fidelity_general, uhlmann_fidelity};
use crate::model::{
    default_detunings, derive_paper_parameters, derive_scaled_parameters, DecoherenceConfig, ProtocolConfig,
    ValidityReport, DEFAULT_DELTA1, DEFAULT_DELTA2,
};

/// Trace drift above which a record is flagged.
pub const TRACE_FLAG: f64 = 1e-8;

/// `b = 11, 13, ..., 31`, or `11, 12, ..., 31` when `fine`.
pub fn default_b_grid(fine: bool) -> Vec<f64> {
    let step = if fine { 1 } else { 2 };
    (11..=31).step_by(step).map(f64::from).collect()
}

/// Everything needed to run a batch of swap points.
#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub b_values: Vec<f64>,
    pub scenarios: Vec<Scenario>,
    pub n_pairs: usize,
    pub cutoff: usize,
    /// Detunings `Δ_j` in rad/s, one per pair.
    pub detunings: Vec<f64>,
    pub decoherence: DecoherenceConfig,
    pub integrator: IntegratorOptions,
    pub model: HamiltonianModel,
    pub sz_convention: SzConvention,
    pub workers: usize,
    pub output: Option<PathBuf>,
    pub format: OutputFormat,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            b_values: default_b_grid(false),
            scenarios: Scenario::SWAP.to_vec(),
            n_pairs: 2,
            cutoff: 3,
            detunings: vec![DEFAULT_DELTA1, DEFAULT_DELTA2],
            decoherence: DecoherenceConfig::reference(2),
            integrator: IntegratorOptions::default(),
            model: HamiltonianModel::RotatingFrame,
            sz_convention: SzConvention::Unhalved,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            output: None,
            format: OutputFormat::Csv,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.b_values.is_empty() {
            return Err(Error::Config("no b values".into()));
        }
        if let Some(b) = self.b_values.iter().find(|b| !(b.is_finite() && **b > 1.0)) {
            return Err(Error::Config(format!("b must be > 1, got {b}")));
        }
        if self.scenarios.is_empty() {
            return Err(Error::Config("no scenarios".into()));
        }
        if self.scenarios.contains(&Scenario::Custom) {
            return Err(Error::Config("the custom scenario has no predefined state".into()));
        }
        if self.n_pairs == 0 {
            return Err(Error::Config("need at least one pair".into()));
        }
        if self.detunings.len() != self.n_pairs {
            return Err(Error::Config(format!(
                "{} detunings given for {} pairs",
                self.detunings.len(),
                self.n_pairs
            )));
        }
        if self.decoherence.n_pairs() != self.n_pairs {
            return Err(Error::Config(format!(
                "decoherence rates given for {} pairs, system has {}",
                self.decoherence.n_pairs(),
                self.n_pairs
            )));
        }
        if self.cutoff < 2 {
            return Err(Error::Config("Fock cutoff must be at least 2".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("need at least one worker".into()));
        }
        self.integrator.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Same spec with all decoherence rates set to zero.
    pub fn without_dissipation(mut self) -> Self {
        self.decoherence = DecoherenceConfig::none(self.n_pairs);
        self
    }

    /// Resizes per-pair settings to `n` pairs: detunings fall back to
    /// `Δ1/j`, decay rates repeat the first pair's values.
    pub fn with_n_pairs(mut self, n: usize) -> Result<Self> {
        if n == self.n_pairs {
            return Ok(self);
        }
        if n == 0 {
            return Err(Error::Config("need at least one pair".into()));
        }
        let d = &self.decoherence;
        let (ka, kb) = (d.kappa_a.first().copied().unwrap_or(0.0), d.kappa_b.first().copied().unwrap_or(0.0));
        self.decoherence = DecoherenceConfig::new(vec![ka; n], vec![kb; n], d.gamma, d.gamma_phi)?;
        self.detunings = default_detunings(n);
        self.n_pairs = n;
        Ok(self)
    }

    pub fn layout(&self) -> Result<SystemLayout> {
        build_space(self.n_pairs, self.cutoff)
    }

    /// Protocol couplings at `b = Δ1/g1`.
    pub fn protocol(&self, b: f64) -> Result<ProtocolConfig> {
        if self.n_pairs == 2 && self.detunings[0] > self.detunings[1] {
            derive_paper_parameters(b, self.detunings[0], self.detunings[1])
        } else {
            derive_scaled_parameters(b, &self.detunings)
        }
    }

    fn problem(&self, config: &ProtocolConfig, layout: &SystemLayout) -> Result<LindbladProblem> {
        LindbladProblem::from_protocol(config, &self.decoherence, layout, self.model, self.sz_convention)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
    }
}

fn register_vector(layout: &SystemLayout, entries: &[(&[usize], f64)]) -> DVector<C64> {
    let d = layout.cutoff();
    let mut v = DVector::from_element(layout.register_dim(), C64::new(0.0, 0.0));
    for (occ, amp) in entries {
        let idx = occ.iter().rev().fold(0, |acc, &o| acc * d + o);
        v[idx] = C64::new(*amp, 0.0);
    }
    v
}

fn register_diagonal(layout: &SystemLayout, entries: &[(&[usize], f64)]) -> DMatrix<C64> {
    let v = register_vector(layout, entries);
    DMatrix::from_diagonal(&v)
}

/// Initial cavity states with the qubit in `|g⟩`.
pub fn scenario_initial_state(scenario: Scenario, layout: &SystemLayout) -> Result<ScenarioState> {
    let n = layout.n_pairs();
    let s = 0.5f64.sqrt();
    let state = match scenario {
        Scenario::I | Scenario::II | Scenario::III | Scenario::IV if n != 2 => {
            return Err(Error::invalid(format!("scenario {scenario} needs 2 pairs, layout has {n}")));
        }
        Scenario::I | Scenario::II => {
            let phi_plus = register_vector(layout, &[(&[0, 0], s), (&[1, 1], s)]);
            let psi_b = if scenario == Scenario::I {
                register_vector(layout, &[(&[0, 0], 1.0)])
            } else {
                register_vector(layout, &[(&[0, 0], s), (&[1, 1], -s)])
            };
            product_pure(layout, &phi_plus, &psi_b, QubitLevel::Ground)?
        }
        Scenario::III | Scenario::IV => {
            let rho_a = register_diagonal(layout, &[(&[0, 0], 0.5), (&[1, 1], 0.5)]);
            let rho_b = if scenario == Scenario::III {
                register_diagonal(layout, &[(&[0, 0], 1.0)])
            } else {
                register_diagonal(layout, &[(&[0, 0], 2.0 / 3.0), (&[1, 1], 1.0 / 3.0)])
            };
            product_mixed(layout, &rho_a, &rho_b, QubitLevel::Ground)?
        }
        Scenario::EprInput => {
            let mut occ = vec![0; 2 * n];
            occ[..n].fill(1);
            fock_state(layout, &occ, QubitLevel::Ground)?
        }
        Scenario::Custom => return Err(Error::invalid("the custom scenario has no predefined state")),
    };
    ScenarioState::new(scenario, state, layout)
}

/// One row of a fidelity sweep.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRecord {
    pub b: f64,
    pub scenario: Scenario,
    /// Clamped to `[0, 1]`.
    pub fidelity: f64,
    pub fidelity_raw: f64,
    /// Seconds.
    pub t_swap: f64,
    pub trace_error: f64,
    pub hermiticity_error: f64,
    pub min_eig: Option<f64>,
    pub qubit_e_pop_max: f64,
    pub wall_time: f64,
    /// Trace drift above the reporting threshold.
    pub flagged: bool,
    pub steps: usize,
    pub phases: PhaseFactors,
}

fn final_interaction_state(traj: &Trajectory, t: f64, config: &ProtocolConfig, layout: &SystemLayout) -> Result<QuantumState> {
    match traj.final_state.frame() {
        Frame::Rotating => frame_to_interaction(&traj.final_state, t, config, layout),
        Frame::Interaction => Ok(traj.final_state.clone()),
    }
}

/// Integrates one scenario through a swap at `b` and scores it against
/// the ideal swapped state.
pub fn run_swap_point(b: f64, scenario: Scenario, spec: &SweepSpec) -> Result<SweepRecord> {
    let ctx = format!("b = {b}, scenario {scenario}");
    run_swap_point_inner(b, scenario, spec).map_err(|e| e.context(&ctx))
}

fn run_swap_point_inner(b: f64, scenario: Scenario, spec: &SweepSpec) -> Result<SweepRecord> {
    spec.validate()?;
    let start = Instant::now();
    let layout = spec.layout()?;
    let config = spec.protocol(b)?;
    let initial = scenario_initial_state(scenario, &layout)?;
    let ideal = ideal_swapped_state(&initial, &config, &layout)?;
    let problem = spec.problem(&config, &layout)?;
    let traj = evolve_problem(&problem, initial.state(), ideal.t_swap, &spec.integrator)?;
    let actual = final_interaction_state(&traj, ideal.t_swap, &config, &layout)?;
    let f = uhlmann_fidelity(&ideal.state, &actual)?;
    let trace_error = traj.max_trace_error();
    Ok(SweepRecord {
        b,
        scenario,
        fidelity: f.value,
        fidelity_raw: f.raw,
        t_swap: ideal.t_swap,
        trace_error,
        hermiticity_error: traj.max_hermiticity_error(),
        min_eig: traj.min_eigenvalue(),
        qubit_e_pop_max: traj.max_qubit_e_population(),
        wall_time: start.elapsed().as_secs_f64(),
        flagged: trace_error > TRACE_FLAG,
        steps: traj.steps,
        phases: ideal.phases,
    })
}

/// Every `(scenario, b)` point of the spec, scenario-major with `b`
/// ascending, run on a pool of `spec.workers` threads. Writes the output
/// file when the spec names one.
pub fn run_fidelity_sweep(spec: &SweepSpec) -> Result<Vec<SweepRecord>> {
    spec.validate()?;
    let mut b_values = spec.b_values.clone();
    b_values.sort_by(f64::total_cmp);
    b_values.dedup();
    let jobs: Vec<(Scenario, f64)> = spec
        .scenarios
        .iter()
        .flat_map(|&s| b_values.iter().map(move |&b| (s, b)))
        .collect();
    let pool = spec.pool()?;
    let results: Vec<Result<SweepRecord>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(s, b)| {
                let r = run_swap_point(b, s, spec);
                if let Ok(rec) = &r {
                    log::info!("b = {b}, scenario {s}: F = {:.6} ({:.1} s)", rec.fidelity, rec.wall_time);
                }
                r
            })
            .collect()
    });
    let records = results.into_iter().collect::<Result<Vec<_>>>()?;
    if let Some(path) = &spec.output {
        write_records(path, &records, spec.format)?;
    }
    Ok(records)
}

#[derive(Clone, Debug, Serialize)]
pub struct EprRecord {
    pub n_pairs: usize,
    pub b: f64,
    /// Evaluation time (seconds); `π/(4λ)` unless overridden.
    pub t: f64,
    pub t_epr: f64,
    pub fidelity: f64,
    pub fidelity_raw: f64,
    /// Fidelity of each `(a_j, b_j)` marginal with the target's marginal.
    pub pair_fidelities: Vec<f64>,
    pub trace_error: f64,
    pub min_eig: Option<f64>,
    pub qubit_e_pop_max: f64,
    pub wall_time: f64,
}

/// EPR-pair generation: `N` single photons in the a-set evolved for
/// `t_epr = π/(4λ)`.
pub fn run_epr_generation(n_pairs: usize, b: f64, spec: &SweepSpec) -> Result<EprRecord> {
    let spec = spec.clone().with_n_pairs(n_pairs)?;
    let t = spec.protocol(b)?.epr_time();
    run_epr_generation_at(n_pairs, b, &spec, t)
}

/// As [`run_epr_generation`], scored at an arbitrary time `t`.
pub fn run_epr_generation_at(n_pairs: usize, b: f64, spec: &SweepSpec, t: f64) -> Result<EprRecord> {
    let ctx = format!("EPR generation, N = {n_pairs}, b = {b}");
    let spec = spec.clone().with_n_pairs(n_pairs).map_err(|e| e.context(&ctx))?;
    epr_inner(b, &spec, t).map_err(|e| e.context(&ctx))
}

fn epr_inner(b: f64, spec: &SweepSpec, t: f64) -> Result<EprRecord> {
    spec.validate()?;
    let start = Instant::now();
    let n = spec.n_pairs;
    let layout = spec.layout()?;
    let config = spec.protocol(b)?;
    let initial = scenario_initial_state(Scenario::EprInput, &layout)?;
    let target = epr_target_state(&layout)?;
    let problem = spec.problem(&config, &layout)?;
    let traj = evolve_problem(&problem, initial.state(), t, &spec.integrator)?;
    let actual = final_interaction_state(&traj, t, &config, &layout)?;
    let f = uhlmann_fidelity(&target, &actual)?;
    let pair_fidelities = (0..n)
        .map(|j| {
            let keep = [Factor::Mode(Mode::a(j)), Factor::Mode(Mode::b(j))];
            let want = partial_trace(&target, &layout, &keep)?;
            let got = partial_trace(&actual, &layout, &keep)?;
            Ok(fidelity_general(&want, &got)?.value)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EprRecord {
        n_pairs: n,
        b,
        t,
        t_epr: config.epr_time(),
        fidelity: f.value,
        fidelity_raw: f.raw,
        pair_fidelities,
        trace_error: traj.max_trace_error(),
        min_eig: traj.min_eigenvalue(),
        qubit_e_pop_max: traj.max_qubit_e_population(),
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Coupling-regime report at `b`.
pub fn run_validity_check(b: f64, spec: &SweepSpec) -> Result<ValidityReport> {
    Ok(spec.protocol(b)?.check_validity())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{excitation_expectation, purity};
    use approx::assert_abs_diff_eq;

    fn b_set_state(state: &QuantumState, layout: &SystemLayout) -> QuantumState {
        let keep = [Factor::Mode(Mode::b(0)), Factor::Mode(Mode::b(1))];
        QuantumState::mixed(partial_trace(state, layout, &keep).unwrap(), Frame::Interaction).unwrap()
    }

    #[test]
    fn scenario_states() {
        let layout = build_space(2, 3).unwrap();
        let iv = scenario_initial_state(Scenario::IV, &layout).unwrap();
        assert_abs_diff_eq!(iv.state().density_matrix().trace().re, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(purity(&b_set_state(iv.state(), &layout)), 5.0 / 9.0, epsilon = 1e-14);
        let i = scenario_initial_state(Scenario::I, &layout).unwrap();
        assert!(i.state().is_pure());
        assert_abs_diff_eq!(i.state().as_pure().unwrap().norm(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(excitation_expectation(i.state(), &layout).unwrap(), 1.0, epsilon = 1e-15);

        let three = build_space(3, 2).unwrap();
        let epr = scenario_initial_state(Scenario::EprInput, &three).unwrap();
        assert_abs_diff_eq!(excitation_expectation(epr.state(), &three).unwrap(), 3.0, epsilon = 1e-15);
        assert!(scenario_initial_state(Scenario::I, &three).is_err());
        assert!(scenario_initial_state(Scenario::Custom, &layout).is_err());
    }

    #[test]
    fn ideal_limit_is_exact() {
        let spec = SweepSpec {
            model: HamiltonianModel::Effective,
            ..SweepSpec::default()
        }
        .without_dissipation();
        for s in Scenario::SWAP {
            let r = run_swap_point(17.0, s, &spec).unwrap();
            assert!((1.0 - r.fidelity_raw).abs() < 1e-9, "{s}: {}", r.fidelity_raw);
        }
    }

    #[test]
    fn swap_time_column() {
        let spec = SweepSpec {
            model: HamiltonianModel::Swap,
            ..SweepSpec::default()
        }
        .without_dissipation();
        let r = run_swap_point(21.0, Scenario::III, &spec).unwrap();
        let lambda = spec.protocol(21.0).unwrap().lambda();
        assert!((r.t_swap - std::f64::consts::PI / (2.0 * lambda)).abs() <= 1e-12 * r.t_swap);
    }

    #[test]
    fn swap_time_does_not_depend_on_n() {
        let two = SweepSpec::default();
        let one = SweepSpec::default().with_n_pairs(1).unwrap();
        let (c1, c2) = (one.protocol(21.0).unwrap(), two.protocol(21.0).unwrap());
        assert_eq!(c1.lambda(), c2.lambda());
        assert_eq!(c1.swap_time(), c2.swap_time());
    }

    #[test]
    fn epr_at_time_zero() {
        let spec = SweepSpec::default().with_n_pairs(1).unwrap();
        let r = run_epr_generation_at(1, 21.0, &spec, 0.0).unwrap();
        assert_abs_diff_eq!(r.fidelity, 0.5f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn epr_under_swap_hamiltonian_is_exact() {
        for n in 1..=3 {
            let spec = SweepSpec {
                model: HamiltonianModel::Swap,
                cutoff: 2,
                ..SweepSpec::default()
            }
            .without_dissipation();
            let r = run_epr_generation(n, 21.0, &spec).unwrap();
            assert!((1.0 - r.fidelity_raw).abs() < 1e-9, "N = {n}: {}", r.fidelity_raw);
            assert!(r.pair_fidelities.iter().all(|f| (1.0 - f).abs() < 1e-9));
        }
    }

    #[test]
    fn spec_validation() {
        let bad = SweepSpec {
            b_values: vec![1.0],
            ..SweepSpec::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = SweepSpec {
            b_values: vec![],
            ..SweepSpec::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(default_b_grid(false).len(), 11);
        assert_eq!(default_b_grid(true).len(), 21);
    }

    #[test]
    fn validity_delegates() {
        let spec = SweepSpec::default();
        assert_eq!(run_validity_check(5.0, &spec).unwrap().verdict, crate::model::Verdict::Fail);
    }
}
