//! The time-independent rotating-frame Hamiltonian against direct
//! integration of the time-dependent interaction-picture one.

use cavity_swap::dynamics::{evolve_schrodinger, frame_to_interaction, IntegratorOptions, SchrodingerHamiltonian};
use cavity_swap::hilbert::{build_space, Frame, QuantumState};
use cavity_swap::metrics::uhlmann_fidelity;
use cavity_swap::model::{
    derive_paper_parameters, derive_scaled_parameters, rotating_frame_hamiltonian, InteractionHamiltonian, DEFAULT_DELTA1,
    DEFAULT_DELTA2,
};
use nalgebra::DVector;
use num_complex::Complex64 as C64;

fn superposition(dim: usize, picks: &[(usize, C64)]) -> DVector<C64> {
    let mut v = DVector::from_element(dim, C64::new(0.0, 0.0));
    for &(i, a) in picks {
        v[i] = a;
    }
    let n = v.norm();
    v / C64::new(n, 0.0)
}

fn compare(n_pairs: usize, cutoff: usize, b: f64, t: f64, picks: &[(usize, C64)]) -> f64 {
    let layout = build_space(n_pairs, cutoff).unwrap();
    let config = if n_pairs == 2 {
        derive_paper_parameters(b, DEFAULT_DELTA1, DEFAULT_DELTA2).unwrap()
    } else {
        derive_scaled_parameters(b, &[DEFAULT_DELTA1]).unwrap()
    };
    let psi = superposition(layout.dim(), picks);

    let hi = InteractionHamiltonian::new(&config, &layout).unwrap();
    let at = |s: f64| hi.at(s);
    let opts = IntegratorOptions::default();
    let direct = evolve_schrodinger(
        SchrodingerHamiltonian::TimeDependent {
            at: &at,
            max_frequency: hi.max_frequency(),
        },
        &layout,
        &QuantumState::pure(psi.clone(), Frame::Interaction).unwrap(),
        t,
        &opts,
    )
    .unwrap();

    let hr = rotating_frame_hamiltonian(&config, &layout).unwrap();
    let rotating = evolve_schrodinger(
        SchrodingerHamiltonian::Constant(&hr),
        &layout,
        &QuantumState::pure(psi, Frame::Rotating).unwrap(),
        t,
        &opts,
    )
    .unwrap();
    let mapped = frame_to_interaction(&rotating.final_state, t, &config, &layout).unwrap();
    1.0 - uhlmann_fidelity(&direct.final_state, &mapped).unwrap().raw
}

#[test]
fn one_pair_matches_interaction_picture() {
    let picks = [(1, C64::new(1.0, 0.0)), (3, C64::new(0.0, 1.0)), (4, C64::new(0.5, -0.5))];
    let loss = compare(1, 3, 21.0, 2e-9, &picks);
    assert!(loss < 1e-9, "1 - F = {loss:e}");
}

#[test]
fn two_pairs_match_interaction_picture() {
    // index = n_a1 + 3 n_a2 + 9 n_b1 + 27 n_b2
    let picks = [(0, C64::new(1.0, 0.0)), (1 + 3, C64::new(1.0, 0.0)), (9 + 27, C64::new(0.0, -1.0))];
    let loss = compare(2, 3, 21.0, 1e-9, &picks);
    assert!(loss < 1e-9, "1 - F = {loss:e}");
}
