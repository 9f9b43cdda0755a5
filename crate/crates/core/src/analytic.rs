//! Closed-form propagation under the beam-splitter Hamiltonian: swap and
//! transfer maps, photon-number-dependent phases, ideal target states and
//! EPR-pair states.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{Frame, Operator, QuantumState, QubitLevel, StateData, SystemLayout};
use crate::model::{effective_hamiltonians, swap_hamiltonian, ProtocolConfig};

const ZERO: C64 = C64::new(0.0, 0.0);
const I: C64 = C64::new(0.0, 1.0);

/// Largest Stark-shift-to-λ ratio accepted before the phases are treated
/// as divergent.
const MAX_PHASE_RATIO: f64 = 1e12;

/// `φ_k = 1/2 + (g_k²/Δ_k)/(2λ)` for the a-set and
/// `θ_j = 1/2 + (μ_j²/Δ_j)/(2λ)` for the b-set. Over one swap, a
/// coherence `|s⟩⟨t|` arriving in mode `a_k` picks up `e^{i φ_k (s - t) π}`
/// (and `θ_j` for mode `b_j`).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhaseFactors {
    pub phi: Vec<f64>,
    pub theta: Vec<f64>,
}

pub fn phase_factors(config: &ProtocolConfig) -> Result<PhaseFactors> {
    let lambda = config.lambda();
    let factor = |coupling: f64, delta: f64| -> Result<f64> {
        let stark = coupling * coupling / delta;
        let ratio = stark / (2.0 * lambda);
        if !(lambda > 0.0) || !ratio.is_finite() || ratio > MAX_PHASE_RATIO {
            return Err(Error::invalid(format!(
                "phase factor diverges: Stark shift {stark:e} against λ = {lambda:e}"
            )));
        }
        Ok(0.5 + ratio)
    };
    let mut phi = Vec::with_capacity(config.n_pairs());
    let mut theta = Vec::with_capacity(config.n_pairs());
    for p in config.pairs() {
        phi.push(factor(p.g, p.detuning)?);
        theta.push(factor(p.mu, p.detuning)?);
    }
    Ok(PhaseFactors { phi, theta })
}

/// `exp(-i He t)` for one pair, `He = -λ(a b† + a† b)`. In the Heisenberg
/// picture `a† → cos(λt) a† + i sin(λt) b†` and
/// `b† → cos(λt) b† + i sin(λt) a†`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamSplitterMap {
    pub angle: f64,
}

pub fn beam_splitter_map(lambda: f64, t: f64) -> Result<BeamSplitterMap> {
    if !(lambda.is_finite() && lambda >= 0.0 && t.is_finite() && t >= 0.0) {
        return Err(Error::invalid(format!("need λ ≥ 0 and t ≥ 0, got λ = {lambda}, t = {t}")));
    }
    Ok(BeamSplitterMap { angle: lambda * t })
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

impl BeamSplitterMap {
    /// Rows give the images of `a†` and `b†` in the basis `(a†, b†)`.
    pub fn mode_matrix(&self) -> [[C64; 2]; 2] {
        let (s, c) = self.angle.sin_cos();
        [[C64::new(c, 0.0), I * s], [I * s, C64::new(c, 0.0)]]
    }

    /// `⟨p, q| U |m, n⟩` on an untruncated pair, from expanding
    /// `(c a† + i s b†)^m (c b† + i s a†)^n |0⟩ / √(m! n!)`.
    pub fn pair_amplitude(&self, m: usize, n: usize, p: usize, q: usize) -> C64 {
        if p + q != m + n {
            return ZERO;
        }
        let (s, c) = self.angle.sin_cos();
        let mut sum = ZERO;
        // k of the m a†-images contribute a†, l of the n b†-images
        // contribute a†; k + l = p.
        for k in 0..=m.min(p) {
            let l = p - k;
            if l > n {
                continue;
            }
            let term = binomial(m, k)
                * binomial(n, l)
                * c.powi(k as i32)
                * s.powi((m - k + l) as i32)
                * c.powi((n - l) as i32);
            sum += I.powu((m - k + l) as u32) * term;
        }
        sum * (factorial(p) * factorial(q) / (factorial(m) * factorial(n))).sqrt()
    }

    /// The map on one pair truncated at `cutoff` (index `m + cutoff·n`),
    /// with a mask of the columns it represents exactly: those with
    /// `m + n < cutoff`, whose photons cannot reach the truncation edge.
    pub fn pair_unitary(&self, cutoff: usize) -> (DMatrix<C64>, Vec<bool>) {
        let d = cutoff;
        let mut u = DMatrix::from_element(d * d, d * d, ZERO);
        let mut faithful = vec![false; d * d];
        for n in 0..d {
            for m in 0..d {
                let col = m + d * n;
                faithful[col] = m + n < d;
                if !faithful[col] {
                    continue;
                }
                for q in 0..d {
                    for p in 0..d {
                        u[(p + d * q, col)] = self.pair_amplitude(m, n, p, q);
                    }
                }
            }
        }
        (u, faithful)
    }
}

/// Closed-form `exp(-i He t)` on the full space, assembled pair by pair,
/// with the mask of faithfully represented columns (every pair below the
/// truncation edge). Unfaithful columns are zero.
pub fn closed_form_swap_unitary(
    config: &ProtocolConfig,
    layout: &SystemLayout,
    t: f64,
) -> Result<(Operator, Vec<bool>)> {
    let n = layout.n_pairs();
    if config.n_pairs() != n {
        return Err(Error::invalid("configuration and layout disagree on the number of pairs"));
    }
    let d = layout.cutoff();
    let maps: Vec<BeamSplitterMap> = config
        .pairs()
        .iter()
        .map(|p| beam_splitter_map(p.lambda(), t))
        .collect::<Result<_>>()?;
    let dim = layout.dim();
    let mut u = DMatrix::from_element(dim, dim, ZERO);
    let mut faithful = vec![false; dim];
    let decoded: Vec<_> = (0..dim).map(|i| layout.decode(i)).collect();
    for col in 0..dim {
        let (occ_in, q_in) = &decoded[col];
        faithful[col] = (0..n).all(|j| occ_in[j] + occ_in[n + j] < d);
        if !faithful[col] {
            continue;
        }
        for row in 0..dim {
            let (occ_out, q_out) = &decoded[row];
            if q_out != q_in {
                continue;
            }
            let mut amp = C64::new(1.0, 0.0);
            for (j, map) in maps.iter().enumerate() {
                amp *= map.pair_amplitude(occ_in[j], occ_in[n + j], occ_out[j], occ_out[n + j]);
                if amp == ZERO {
                    break;
                }
            }
            u[(row, col)] = amp;
        }
    }
    Ok((Operator::from_matrix(u)?, faithful))
}

/// Named initial conditions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "i")]
    I,
    #[serde(rename = "ii")]
    II,
    #[serde(rename = "iii")]
    III,
    #[serde(rename = "iv")]
    IV,
    #[serde(rename = "epr-input")]
    EprInput,
    #[serde(rename = "custom")]
    Custom,
}

impl Scenario {
    pub const SWAP: [Scenario; 4] = [Scenario::I, Scenario::II, Scenario::III, Scenario::IV];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::I => "i",
            Scenario::II => "ii",
            Scenario::III => "iii",
            Scenario::IV => "iv",
            Scenario::EprInput => "epr-input",
            Scenario::Custom => "custom",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "i" | "1" => Ok(Scenario::I),
            "ii" | "2" => Ok(Scenario::II),
            "iii" | "3" => Ok(Scenario::III),
            "iv" | "4" => Ok(Scenario::IV),
            "epr-input" | "epr" => Ok(Scenario::EprInput),
            "custom" => Ok(Scenario::Custom),
            other => Err(Error::invalid(format!("unknown scenario `{other}`"))),
        }
    }
}

/// A cavity state with the qubit exactly in `|g⟩`.
#[derive(Clone, Debug)]
pub struct ScenarioState {
    scenario: Scenario,
    state: QuantumState,
}

impl ScenarioState {
    pub fn new(scenario: Scenario, state: QuantumState, layout: &SystemLayout) -> Result<Self> {
        if state.dim() != layout.dim() {
            return Err(Error::DimensionMismatch {
                expected: layout.dim(),
                actual: state.dim(),
            });
        }
        check_ground_sector(&state, layout)?;
        Ok(ScenarioState { scenario, state })
    }

    pub fn scenario(&self) -> Scenario {
        self.scenario
    }

    pub fn state(&self) -> &QuantumState {
        &self.state
    }

    pub fn into_state(self) -> QuantumState {
        self.state
    }
}

fn check_ground_sector(state: &QuantumState, layout: &SystemLayout) -> Result<()> {
    let excited = |i: usize| layout.qubit_level(i) == QubitLevel::Excited;
    let outside = match state.data() {
        StateData::Pure(v) => v.iter().enumerate().any(|(i, z)| excited(i) && *z != ZERO),
        StateData::Mixed(m) => (0..m.nrows())
            .any(|i| (0..m.ncols()).any(|j| (excited(i) || excited(j)) && m[(i, j)] != ZERO)),
    };
    if outside {
        return Err(Error::invalid("state is not confined to the qubit ground sector"));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct IdealSwap {
    pub state: QuantumState,
    pub phases: PhaseFactors,
    pub t_swap: f64,
}

/// The ideal system after one swap, `t = π/(2λ)`: `exp(-i H0 t) exp(-i He t)`
/// applied to the input, in the interaction picture.
pub fn ideal_swapped_state(
    initial: &ScenarioState,
    config: &ProtocolConfig,
    layout: &SystemLayout,
) -> Result<IdealSwap> {
    let t_swap = config.swap_time();
    let state = ideal_evolution(initial, config, layout, t_swap)?;
    Ok(IdealSwap {
        state,
        phases: phase_factors(config)?,
        t_swap,
    })
}

/// The ideal system at an arbitrary time.
pub fn ideal_evolution(
    initial: &ScenarioState,
    config: &ProtocolConfig,
    layout: &SystemLayout,
    t: f64,
) -> Result<QuantumState> {
    check_ground_sector(initial.state(), layout)?;
    let (h0, _) = effective_hamiltonians(config, layout)?;
    let he = swap_hamiltonian(config, layout)?;
    let m = h0.matrix();
    // H0 is diagonal in the Fock basis.
    let diag_phases = DVector::from_fn(layout.dim(), |i, _| C64::new(0.0, -m[(i, i)].re * t).exp());
    let u_he = he.expm(C64::new(0.0, -t))?;
    let u = DMatrix::from_fn(layout.dim(), layout.dim(), |i, j| diag_phases[i] * u_he.matrix()[(i, j)]);
    let state = initial.state().transform(&Operator::from_matrix(u)?)?;
    Ok(state.with_frame(Frame::Interaction))
}

/// `e^{iNπ/4} ⊗_j (|1⟩_aj|0⟩_bj + i|0⟩_aj|1⟩_bj)/√2 ⊗ |g⟩`.
pub fn epr_target_state(layout: &SystemLayout) -> Result<QuantumState> {
    let n = layout.n_pairs();
    if n == 0 {
        return Err(Error::invalid("need at least one pair"));
    }
    if layout.cutoff() < 2 {
        return Err(Error::invalid("EPR target needs a Fock cutoff of at least 2"));
    }
    let global = C64::new(0.0, n as f64 * PI / 4.0).exp();
    let amp = (0.5f64).powf(n as f64 / 2.0);
    let mut psi = DVector::from_element(layout.dim(), ZERO);
    for mask in 0..(1usize << n) {
        let mut occ = vec![0; 2 * n];
        let mut coeff = global * amp;
        for j in 0..n {
            if mask >> j & 1 == 1 {
                occ[n + j] = 1;
                coeff *= I;
            } else {
                occ[j] = 1;
            }
        }
        psi[layout.index_of(&occ, QubitLevel::Ground)?] = coeff;
    }
    QuantumState::pure(psi, Frame::Interaction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{build_space, fock_state, partial_trace, product_mixed, product_pure, Factor, Mode};
    use crate::metrics::{purity, uhlmann_fidelity};
    use crate::model::{derive_paper_parameters, PairCoupling, DEFAULT_DELTA1, DEFAULT_DELTA2};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    fn reference(b: f64) -> ProtocolConfig {
        derive_paper_parameters(b, DEFAULT_DELTA1, DEFAULT_DELTA2).unwrap()
    }

    fn max_diff(a: &DMatrix<C64>, b: &DMatrix<C64>) -> f64 {
        (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Register vector with the given `(occupations, amplitude)` entries.
    fn register(layout: &SystemLayout, entries: &[(&[usize], C64)]) -> DVector<C64> {
        let d = layout.cutoff();
        let mut v = DVector::from_element(layout.register_dim(), ZERO);
        for (occ, amp) in entries {
            let idx: usize = occ.iter().rev().fold(0, |acc, &o| acc * d + o);
            v[idx] += *amp;
        }
        v
    }

    #[test]
    fn mode_matrix_examples() {
        let m = beam_splitter_map(1.0, PI / 2.0).unwrap().mode_matrix();
        assert_abs_diff_eq!((m[0][0]).norm(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!((m[0][1] - I).norm(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!((m[1][0] - I).norm(), 0.0, epsilon = 1e-15);
        let id = beam_splitter_map(3.0, 0.0).unwrap().mode_matrix();
        assert_eq!(id, [[c(1.0), ZERO], [ZERO, c(1.0)]]);
        assert!(beam_splitter_map(-1.0, 1.0).is_err());
    }

    #[test]
    fn quarter_swap_makes_epr_pair() {
        let map = beam_splitter_map(1.0, PI / 4.0).unwrap();
        let s = 0.5f64.sqrt();
        assert_abs_diff_eq!((map.pair_amplitude(1, 0, 1, 0) - c(s)).norm(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!((map.pair_amplitude(1, 0, 0, 1) - I * s).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn pair_amplitude_is_unitary() {
        let map = beam_splitter_map(0.7, 1.3).unwrap();
        let (u, faithful) = map.pair_unitary(4);
        for a in 0..16 {
            for b in 0..16 {
                if !(faithful[a] && faithful[b]) {
                    continue;
                }
                let dot: C64 = (0..16).map(|r| u[(r, a)].conj() * u[(r, b)]).sum();
                let expected = if a == b { 1.0 } else { 0.0 };
                assert_abs_diff_eq!((dot - c(expected)).norm(), 0.0, epsilon = 1e-13);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn generic_expm_matches_closed_form(angle in 0.0f64..(2.0 * PI), b in 8.0f64..40.0, n in 1usize..=2) {
            let layout = build_space(n, 3).unwrap();
            let config = crate::model::derive_scaled_parameters(b, &crate::model::default_detunings(n)).unwrap();
            let t = angle / config.lambda();
            let he = swap_hamiltonian(&config, &layout).unwrap();
            let generic = he.expm(C64::new(0.0, -t)).unwrap();
            let (closed, faithful) = closed_form_swap_unitary(&config, &layout, t).unwrap();
            let mut worst = 0.0f64;
            for col in (0..layout.dim()).filter(|&c| faithful[c]) {
                for row in 0..layout.dim() {
                    worst = worst.max((generic.matrix()[(row, col)] - closed.matrix()[(row, col)]).norm());
                }
            }
            prop_assert!(worst <= 1e-10, "max-norm difference {:e}", worst);
        }
    }

    #[test]
    fn phase_factor_examples() {
        let p = phase_factors(&reference(21.0)).unwrap();
        for v in p.phi.iter().chain(&p.theta) {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-12);
        }
        // g²/Δ = 3λ with gμ/Δ = λ, so μ = g/3.
        let (delta, g) = (1e9, 3e7);
        let lambda = g * g / delta / 3.0;
        let pair = PairCoupling {
            g,
            mu: g / 3.0,
            detuning: delta,
        };
        let cfg = ProtocolConfig::general(vec![pair], lambda).unwrap();
        let p = phase_factors(&cfg).unwrap();
        assert_abs_diff_eq!(p.phi[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.theta[0], 2.0 / 3.0, epsilon = 1e-12);
        let tiny = ProtocolConfig::general(vec![pair], 1e-300).unwrap();
        assert!(phase_factors(&tiny).is_err());
    }

    #[test]
    fn scenario_one_is_transferred() {
        let layout = build_space(2, 3).unwrap();
        let s = 0.5f64.sqrt();
        let phi = register(&layout, &[(&[0, 0], c(s)), (&[1, 1], c(s))]);
        let vac = register(&layout, &[(&[0, 0], c(1.0))]);
        let input = product_pure(&layout, &phi, &vac, QubitLevel::Ground).unwrap();
        let input = ScenarioState::new(Scenario::I, input, &layout).unwrap();
        let ideal = ideal_swapped_state(&input, &reference(21.0), &layout).unwrap();
        let expected = product_pure(&layout, &vac, &phi, QubitLevel::Ground).unwrap();
        let f = uhlmann_fidelity(&expected, &ideal.state).unwrap();
        assert_abs_diff_eq!(f.raw, 1.0, epsilon = 1e-12);
        // Relative phase of the |11⟩ component is exactly +1.
        let psi = ideal.state.as_pure().unwrap();
        let i00 = layout.index_of(&[0, 0, 0, 0], QubitLevel::Ground).unwrap();
        let i11 = layout.index_of(&[0, 0, 1, 1], QubitLevel::Ground).unwrap();
        assert_abs_diff_eq!((psi[i11] / psi[i00] - c(1.0)).norm(), 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(ideal.t_swap, reference(21.0).swap_time(), epsilon = 0.0);
        assert_eq!(ideal.state.frame(), Frame::Interaction);
    }

    #[test]
    fn vacuum_is_fixed() {
        let layout = build_space(2, 3).unwrap();
        let vac = fock_state(&layout, &[0, 0, 0, 0], QubitLevel::Ground).unwrap();
        let input = ScenarioState::new(Scenario::Custom, vac.clone(), &layout).unwrap();
        let out = ideal_swapped_state(&input, &reference(17.0), &layout).unwrap();
        let diff = max_diff(&out.state.density_matrix(), &vac.density_matrix());
        assert!(diff < 1e-14);
    }

    #[test]
    fn diagonal_mixture_transfers_without_phase() {
        let layout = build_space(2, 3).unwrap();
        let r = layout.register_dim();
        let mut rho_a = DMatrix::from_element(r, r, ZERO);
        let i00 = 0;
        let i11 = 1 + 3;
        rho_a[(i00, i00)] = c(0.5);
        rho_a[(i11, i11)] = c(0.5);
        let mut vac = DMatrix::from_element(r, r, ZERO);
        vac[(0, 0)] = c(1.0);
        let input = product_mixed(&layout, &rho_a, &vac, QubitLevel::Ground).unwrap();
        let input = ScenarioState::new(Scenario::III, input, &layout).unwrap();
        let out = ideal_swapped_state(&input, &reference(21.0), &layout).unwrap();
        let expected = product_mixed(&layout, &vac, &rho_a, QubitLevel::Ground).unwrap();
        assert!(max_diff(&out.state.density_matrix(), &expected.density_matrix()) < 1e-12);
    }

    /// Printed phase formula: register amplitude `c_s` arrives on the other
    /// set as `c_s e^{iπ Σ_k f_k s_k}`, with `f = θ` on arrival in the b-set
    /// and `f = φ` on arrival in the a-set.
    #[test]
    fn phases_follow_the_closed_form() {
        let layout = build_space(2, 3).unwrap();
        let lambda = 2e7;
        let pairs: Vec<PairCoupling> = [1.2e10, 0.7e10]
            .iter()
            .zip([3.0, 0.4])
            .map(|(&delta, stark_over_lambda): (&f64, f64)| {
                let g = (stark_over_lambda * lambda * delta).sqrt();
                PairCoupling {
                    g,
                    mu: lambda * delta / g,
                    detuning: delta,
                }
            })
            .collect();
        let cfg = ProtocolConfig::general(pairs, lambda).unwrap();
        let phases = phase_factors(&cfg).unwrap();
        let occs: Vec<[usize; 2]> = vec![[0, 0], [1, 0], [0, 1], [1, 1], [2, 0], [0, 2], [2, 1], [1, 2], [2, 2]];
        let amps: Vec<C64> = (0..occs.len())
            .map(|k| C64::new(0.1 + 0.05 * k as f64, 0.03 * k as f64 - 0.1))
            .collect();
        let entries: Vec<(&[usize], C64)> = occs.iter().zip(&amps).map(|(o, a)| (&o[..], *a)).collect();
        let content = register(&layout, &entries);
        let content = &content / c(content.norm());
        let vac = register(&layout, &[(&[0, 0], c(1.0))]);

        for (from_a, factors) in [(true, &phases.theta), (false, &phases.phi)] {
            let (pa, pb) = if from_a { (&content, &vac) } else { (&vac, &content) };
            let input = product_pure(&layout, pa, pb, QubitLevel::Ground).unwrap();
            let input = ScenarioState::new(Scenario::Custom, input, &layout).unwrap();
            let out = ideal_swapped_state(&input, &cfg, &layout).unwrap();
            let psi = out.state.as_pure().unwrap();
            for (o, _) in occs.iter().zip(&amps) {
                let src = if from_a { [o[0], o[1], 0, 0] } else { [0, 0, o[0], o[1]] };
                let dst = if from_a { [0, 0, o[0], o[1]] } else { [o[0], o[1], 0, 0] };
                let c_in = input.state().as_pure().unwrap()[layout.index_of(&src, QubitLevel::Ground).unwrap()];
                let phase = PI * (factors[0] * o[0] as f64 + factors[1] * o[1] as f64);
                let expected = c_in * C64::new(0.0, phase).exp();
                let got = psi[layout.index_of(&dst, QubitLevel::Ground).unwrap()];
                assert!((got - expected).norm() < 1e-10, "{o:?}: {got} vs {expected}");
            }
        }
    }

    #[test]
    fn double_swap_restores_populations() {
        let layout = build_space(2, 3).unwrap();
        let cfg = reference(19.0);
        let s = 0.5f64.sqrt();
        let pa = register(&layout, &[(&[0, 0], c(s)), (&[1, 1], c(s))]);
        let pb = register(&layout, &[(&[0, 0], c(s)), (&[1, 1], c(-s))]);
        let input = product_pure(&layout, &pa, &pb, QubitLevel::Ground).unwrap();
        let once = ideal_swapped_state(&ScenarioState::new(Scenario::II, input.clone(), &layout).unwrap(), &cfg, &layout)
            .unwrap();
        let twice =
            ideal_swapped_state(&ScenarioState::new(Scenario::Custom, once.state, &layout).unwrap(), &cfg, &layout)
                .unwrap();
        for mode in layout.modes().collect::<Vec<Mode>>() {
            let n = crate::hilbert::number_op(&layout, mode).unwrap();
            let before = input.expectation(&n).unwrap().re;
            let after = twice.state.expectation(&n).unwrap().re;
            assert_abs_diff_eq!(before, after, epsilon = 1e-12);
        }
        let a = input.density_matrix();
        let b = twice.state.density_matrix();
        for i in 0..layout.dim() {
            assert_abs_diff_eq!(a[(i, i)].re, b[(i, i)].re, epsilon = 1e-12);
        }
    }

    #[test]
    fn linear_in_the_input() {
        let layout = build_space(2, 3).unwrap();
        let cfg = reference(23.0);
        let s = 0.5f64.sqrt();
        let pa = register(&layout, &[(&[0, 0], c(s)), (&[1, 1], c(s))]);
        let vac = register(&layout, &[(&[0, 0], c(1.0))]);
        let r1 = product_pure(&layout, &pa, &vac, QubitLevel::Ground).unwrap().density_matrix();
        let r2 = fock_state(&layout, &[0, 1, 1, 0], QubitLevel::Ground).unwrap().density_matrix();
        let run = |rho: &DMatrix<C64>| {
            let st = QuantumState::mixed(rho.clone(), Frame::Interaction).unwrap();
            let st = ScenarioState::new(Scenario::Custom, st, &layout).unwrap();
            ideal_swapped_state(&st, &cfg, &layout).unwrap().state.density_matrix()
        };
        let mix = (&r1 * c(0.3)) + (&r2 * c(0.7));
        let lhs = run(&mix);
        let rhs = run(&r1) * c(0.3) + run(&r2) * c(0.7);
        assert!(max_diff(&lhs, &rhs) < 1e-14);
    }

    #[test]
    fn pairs_evolve_independently() {
        // Pair 1 holds (|10⟩+|01⟩)/√2, pair 2 holds |1⟩_a2.
        let layout = build_space(2, 3).unwrap();
        let cfg = reference(21.0);
        let s = 0.5f64.sqrt();
        let mut psi = DVector::from_element(layout.dim(), ZERO);
        psi[layout.index_of(&[1, 1, 0, 0], QubitLevel::Ground).unwrap()] = c(s);
        psi[layout.index_of(&[0, 1, 1, 0], QubitLevel::Ground).unwrap()] = c(s);
        let st = QuantumState::pure(psi, Frame::Interaction).unwrap();
        let out = ideal_swapped_state(&ScenarioState::new(Scenario::Custom, st, &layout).unwrap(), &cfg, &layout)
            .unwrap()
            .state;
        let whole = partial_trace(&out, &layout, &[Factor::Mode(Mode::a(0)), Factor::Mode(Mode::b(0)), Factor::Mode(Mode::a(1)), Factor::Mode(Mode::b(1))]).unwrap();
        let p1 = partial_trace(&out, &layout, &[Factor::Mode(Mode::a(0)), Factor::Mode(Mode::b(0))]).unwrap();
        let p2 = partial_trace(&out, &layout, &[Factor::Mode(Mode::a(1)), Factor::Mode(Mode::b(1))]).unwrap();
        // Product of pair marginals, pair 1 least significant.
        let product = p2.kronecker(&p1);
        assert!(max_diff(&whole, &product) < 1e-12);
        let pure1 = p1.trace().re - (&p1 * &p1).trace().re;
        assert_abs_diff_eq!(pure1, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_excited_qubit() {
        let layout = build_space(1, 2).unwrap();
        let e = fock_state(&layout, &[0, 0], QubitLevel::Excited).unwrap();
        assert!(ScenarioState::new(Scenario::Custom, e, &layout).is_err());
    }

    #[test]
    fn epr_target_structure() {
        for n in 1..=3 {
            let layout = build_space(n, 2).unwrap();
            let t = epr_target_state(&layout).unwrap();
            assert_abs_diff_eq!(t.as_pure().unwrap().norm(), 1.0, epsilon = 1e-14);
        }
        let layout = build_space(2, 3).unwrap();
        let t = epr_target_state(&layout).unwrap();
        for mode in layout.modes().collect::<Vec<_>>() {
            let single = partial_trace(&t, &layout, &[Factor::Mode(mode)]).unwrap();
            let st = QuantumState::mixed(single, Frame::Interaction).unwrap();
            assert_abs_diff_eq!(purity(&st), 0.5, epsilon = 1e-14);
        }
        let layout = build_space(1, 2).unwrap();
        let psi = epr_target_state(&layout).unwrap();
        let v = psi.as_pure().unwrap();
        let g = C64::new(0.0, PI / 4.0).exp() * 0.5f64.sqrt();
        assert_abs_diff_eq!((v[layout.index_of(&[1, 0], QubitLevel::Ground).unwrap()] - g).norm(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            (v[layout.index_of(&[0, 1], QubitLevel::Ground).unwrap()] - g * I).norm(),
            0.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn ideal_evolution_reaches_epr_target() {
        for n in 1..=3 {
            let layout = build_space(n, 2).unwrap();
            let cfg = crate::model::derive_scaled_parameters(21.0, &crate::model::default_detunings(n)).unwrap();
            let mut occ = vec![0; 2 * n];
            occ[..n].fill(1);
            let input = fock_state(&layout, &occ, QubitLevel::Ground).unwrap();
            let input = ScenarioState::new(Scenario::EprInput, input, &layout).unwrap();
            let out = ideal_evolution(&input, &cfg, &layout, cfg.epr_time()).unwrap();
            let f = uhlmann_fidelity(&epr_target_state(&layout).unwrap(), &out).unwrap();
            assert_abs_diff_eq!(f.raw, 1.0, epsilon = 1e-12);
            // Global phase e^{iNπ/4} comes out of the Stark term.
            let target = epr_target_state(&layout).unwrap();
            let overlap = target.as_pure().unwrap().dotc(out.as_pure().unwrap());
            assert_abs_diff_eq!((overlap - c(1.0)).norm(), 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in [Scenario::I, Scenario::II, Scenario::III, Scenario::IV, Scenario::EprInput, Scenario::Custom] {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
        assert!("v".parse::<Scenario>().is_err());
    }
}
