//! Fast invariant checks runnable from the command line.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use serde::Serialize;

use super::{run_epr_generation, run_swap_point, SweepSpec};
use crate::analytic::{closed_form_swap_unitary, Scenario};
use crate::dynamics::{evolve_problem, HamiltonianModel, IntegratorOptions, LindbladProblem};
use crate::error::Result;
use crate::hilbert::{annihilation_op, build_space, fock_state, Frame, Mode, Operator, QuantumState, QubitLevel};
use crate::metrics::fidelity_general;
use crate::model::{
    default_detunings, derive_paper_parameters, derive_scaled_parameters, effective_hamiltonians,
    rotating_frame_hamiltonian, swap_hamiltonian, Verdict, DEFAULT_DELTA1, DEFAULT_DELTA2,
};

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, run: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match run() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

pub fn run() -> Vec<Check> {
    vec![
        check("hamiltonians are hermitian", || {
            let layout = build_space(2, 3)?;
            let c = derive_paper_parameters(21.0, DEFAULT_DELTA1, DEFAULT_DELTA2)?;
            let (h0, hi) = effective_hamiltonians(&c, &layout)?;
            let worst = [rotating_frame_hamiltonian(&c, &layout)?, h0, hi, swap_hamiltonian(&c, &layout)?]
                .iter()
                .map(Operator::hermiticity_error)
                .fold(0.0, f64::max);
            Ok((worst == 0.0, format!("max |H - H†| = {worst:e}")))
        }),
        check("expm matches closed-form swap map", || {
            let layout = build_space(2, 3)?;
            let c = derive_scaled_parameters(17.0, &default_detunings(2))?;
            let t = 1.234 / c.lambda();
            let generic = swap_hamiltonian(&c, &layout)?.expm(C64::new(0.0, -t))?;
            let (closed, faithful) = closed_form_swap_unitary(&c, &layout, t)?;
            let mut worst = 0.0f64;
            for col in (0..layout.dim()).filter(|&i| faithful[i]) {
                for row in 0..layout.dim() {
                    worst = worst.max((generic.matrix()[(row, col)] - closed.matrix()[(row, col)]).norm());
                }
            }
            Ok((worst <= 1e-10, format!("max-norm difference {worst:e}")))
        }),
        check("ideal limit reproduces the target", || {
            let spec = SweepSpec {
                model: HamiltonianModel::Effective,
                workers: 1,
                ..SweepSpec::default()
            }
            .without_dissipation();
            let r = run_swap_point(21.0, Scenario::II, &spec)?;
            Ok(((1.0 - r.fidelity_raw).abs() < 1e-9, format!("F = {}", r.fidelity_raw)))
        }),
        check("EPR pairs under the swap Hamiltonian", || {
            let spec = SweepSpec {
                model: HamiltonianModel::Swap,
                cutoff: 2,
                workers: 1,
                ..SweepSpec::default()
            }
            .without_dissipation();
            let r = run_epr_generation(2, 21.0, &spec)?;
            Ok(((1.0 - r.fidelity_raw).abs() < 1e-9, format!("F = {}", r.fidelity_raw)))
        }),
        check("photon decay", || {
            let layout = build_space(1, 2)?;
            let kappa = 5e4;
            let a = annihilation_op(&layout, Mode::a(0))?;
            let p = LindbladProblem::new(layout.clone(), Operator::zeros(layout.dim()), vec![(kappa, a)], Frame::Interaction)?;
            let rho0 = fock_state(&layout, &[1, 0], QubitLevel::Ground)?;
            let traj = evolve_problem(&p, &rho0, 1.0 / kappa, &IntegratorOptions::default())?;
            let idx = layout.index_of(&[1, 0], QubitLevel::Ground)?;
            let pop = traj.final_state.density_matrix()[(idx, idx)].re;
            let err = (pop - (-1.0f64).exp()).abs();
            Ok((err < 1e-6, format!("|p - 1/e| = {err:e}")))
        }),
        check("fidelity of commuting diagonals", || {
            let r = DMatrix::from_diagonal(&nalgebra::dvector![C64::new(2.0 / 3.0, 0.0), C64::new(1.0 / 3.0, 0.0)]);
            let s = DMatrix::from_diagonal(&nalgebra::dvector![C64::new(0.5, 0.0), C64::new(0.5, 0.0)]);
            let f = fidelity_general(&r, &s)?.raw;
            let expected = (1.0f64 / 3.0).sqrt() + (1.0f64 / 6.0).sqrt();
            Ok(((f - expected).abs() < 1e-12, format!("F = {f}")))
        }),
        check("validity report at b = 21", || {
            let c = derive_paper_parameters(21.0, DEFAULT_DELTA1, DEFAULT_DELTA2)?;
            let report = c.check_validity();
            Ok((report.verdict == Verdict::Warn, format!("verdict {:?}", report.verdict)))
        }),
        check("swap time", || {
            let c = derive_paper_parameters(21.0, DEFAULT_DELTA1, DEFAULT_DELTA2)?;
            let expected = PI / (2.0 * c.lambda());
            let t = c.swap_time();
            Ok(((t - expected).abs() <= 1e-12 * t, format!("t_swap = {:.3} ns", t * 1e9)))
        }),
        check("trace and positivity on a dissipative run", || {
            let layout = build_space(1, 3)?;
            let c = derive_scaled_parameters(21.0, &[DEFAULT_DELTA1])?;
            let p = LindbladProblem::from_protocol(
                &c,
                &crate::model::DecoherenceConfig::reference(1),
                &layout,
                HamiltonianModel::RotatingFrame,
                crate::hilbert::SzConvention::Unhalved,
            )?;
            let rho0: QuantumState = fock_state(&layout, &[1, 0], QubitLevel::Ground)?;
            let traj = evolve_problem(&p, &rho0, c.swap_time(), &IntegratorOptions::default())?;
            let tr = traj.max_trace_error();
            let me = traj.min_eigenvalue().unwrap_or(0.0);
            Ok((tr <= 1e-8 && me >= -1e-8, format!("trace drift {tr:e}, min eigenvalue {me:e}")))
        }),
    ]
}
