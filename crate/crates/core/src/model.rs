//! Protocol parameters, validity checks, and the full and effective
//! Hamiltonians.
//!
//! All frequencies and rates are angular (rad/s). The full coupling is
//!
//! ```text
//! H(t) = Σ_j ( g_j e^{iΔ_j t} a_j S+ + μ_j e^{iΔ_j t} b_j S+ + h.c. )
//! ```
//!
//! in the interaction picture, or the time-independent
//! `H_R = -Σ_j Δ_j (n_aj + n_bj) + Σ_j (g_j a_j S+ + μ_j b_j S+ + h.c.)` in
//! the frame co-rotating at the qubit frequency.

use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex64 as C64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hilbert::{
    annihilation_op, number_op, qubit_ops, Mode, Operator, SystemLayout, SzConvention,
};

/// Relative tolerance on `λ_j = λ` in the standard protocol.
pub const LAMBDA_MATCH_TOL: f64 = 1e-12;

/// Qubit detuning `Δ1/2π` used for the reference operating points (1 GHz).
pub const DEFAULT_DELTA1: f64 = 2.0 * PI * 1.0e9;
/// Second-pair detuning `Δ2/2π` (0.5 GHz).
pub const DEFAULT_DELTA2: f64 = 2.0 * PI * 0.5e9;

/// Couplings of one cavity pair `(a_j, b_j)` to the qubit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PairCoupling {
    /// Qubit coupling of cavity `a_j`.
    pub g: f64,
    /// Qubit coupling of cavity `b_j`.
    pub mu: f64,
    /// Qubit-cavity detuning `Δ_j`, shared by `a_j` and `b_j`.
    pub detuning: f64,
}

impl PairCoupling {
    /// Effective exchange rate `g μ / Δ`.
    pub fn lambda(&self) -> f64 {
        self.g * self.mu / self.detuning
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolMode {
    /// `g_j = μ_j` and all `λ_j` equal.
    Standard,
    General,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProtocolConfig {
    pairs: Vec<PairCoupling>,
    lambda: f64,
    mode: ProtocolMode,
}

impl ProtocolConfig {
    /// Standard protocol: requires `g_j = μ_j` exactly and every `λ_j`
    /// equal to `λ_1` within [`LAMBDA_MATCH_TOL`].
    pub fn standard(pairs: Vec<PairCoupling>) -> Result<Self> {
        check_pairs(&pairs)?;
        for (j, p) in pairs.iter().enumerate() {
            if p.g != p.mu {
                return Err(Error::invalid(format!(
                    "standard protocol needs g = μ, pair {} has g = {}, μ = {}",
                    j + 1,
                    p.g,
                    p.mu
                )));
            }
        }
        let lambda = pairs[0].lambda();
        if lambda <= 0.0 {
            return Err(Error::invalid("standard protocol needs a nonzero coupling"));
        }
        for (j, p) in pairs.iter().enumerate() {
            if ((p.lambda() - lambda) / lambda).abs() > LAMBDA_MATCH_TOL {
                return Err(Error::invalid(format!(
                    "λ_{} = {} differs from λ_1 = {}",
                    j + 1,
                    p.lambda(),
                    lambda
                )));
            }
        }
        Ok(ProtocolConfig {
            pairs,
            lambda,
            mode: ProtocolMode::Standard,
        })
    }

    /// Arbitrary couplings with an explicitly chosen target `λ`.
    pub fn general(pairs: Vec<PairCoupling>, lambda: f64) -> Result<Self> {
        check_pairs(&pairs)?;
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::invalid(format!("target λ must be finite and ≥ 0, got {lambda}")));
        }
        Ok(ProtocolConfig {
            pairs,
            lambda,
            mode: ProtocolMode::General,
        })
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self) -> &[PairCoupling] {
        &self.pairs
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn mode(&self) -> ProtocolMode {
        self.mode
    }

    /// Swap time `π / 2λ`.
    pub fn swap_time(&self) -> f64 {
        PI / (2.0 * self.lambda)
    }

    /// EPR generation time `π / 4λ`.
    pub fn epr_time(&self) -> f64 {
        PI / (4.0 * self.lambda)
    }

    pub fn max_detuning(&self) -> f64 {
        self.pairs.iter().map(|p| p.detuning).fold(0.0, f64::max)
    }

    pub fn check_validity(&self) -> ValidityReport {
        check_validity(&self.pairs)
    }

    fn check_layout(&self, layout: &SystemLayout) -> Result<()> {
        if layout.n_pairs() != self.n_pairs() {
            return Err(Error::invalid(format!(
                "layout has {} pairs but the configuration has {}",
                layout.n_pairs(),
                self.n_pairs()
            )));
        }
        Ok(())
    }
}

fn check_pairs(pairs: &[PairCoupling]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::invalid("need at least one cavity pair"));
    }
    for (j, p) in pairs.iter().enumerate() {
        if !(p.detuning.is_finite() && p.detuning > 0.0) {
            return Err(Error::invalid(format!(
                "detuning of pair {} must be positive, got {}",
                j + 1,
                p.detuning
            )));
        }
        if !(p.g.is_finite() && p.mu.is_finite() && p.g >= 0.0 && p.mu >= 0.0) {
            return Err(Error::invalid(format!(
                "couplings of pair {} must be finite and ≥ 0",
                j + 1
            )));
        }
    }
    for j in 0..pairs.len() {
        for k in j + 1..pairs.len() {
            if pairs[j].detuning == pairs[k].detuning {
                return Err(Error::invalid(format!(
                    "pairs {} and {} share the detuning {}",
                    j + 1,
                    k + 1,
                    pairs[j].detuning
                )));
            }
        }
    }
    Ok(())
}

/// Decoherence rates (1/s) entering the master equation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecoherenceConfig {
    /// Photon decay rate of each `a_j`.
    pub kappa_a: Vec<f64>,
    /// Photon decay rate of each `b_j`.
    pub kappa_b: Vec<f64>,
    /// Qubit energy relaxation rate.
    pub gamma: f64,
    /// Qubit pure dephasing rate.
    pub gamma_phi: f64,
}

impl DecoherenceConfig {
    pub fn new(kappa_a: Vec<f64>, kappa_b: Vec<f64>, gamma: f64, gamma_phi: f64) -> Result<Self> {
        if kappa_a.len() != kappa_b.len() {
            return Err(Error::invalid("κ and κ' lists differ in length"));
        }
        let all = kappa_a.iter().chain(&kappa_b).chain([&gamma, &gamma_phi]);
        for &r in all {
            if !(r.is_finite() && r >= 0.0) {
                return Err(Error::invalid(format!("decoherence rate {r} must be ≥ 0")));
            }
        }
        Ok(DecoherenceConfig {
            kappa_a,
            kappa_b,
            gamma,
            gamma_phi,
        })
    }

    pub fn none(n_pairs: usize) -> Self {
        DecoherenceConfig {
            kappa_a: vec![0.0; n_pairs],
            kappa_b: vec![0.0; n_pairs],
            gamma: 0.0,
            gamma_phi: 0.0,
        }
    }

    /// `γ_φ⁻¹ = 5 µs`, `γ⁻¹ = 50 µs`, `κ⁻¹ = κ'⁻¹ = 20 µs` on every cavity.
    pub fn reference(n_pairs: usize) -> Self {
        DecoherenceConfig {
            kappa_a: vec![1.0 / 20e-6; n_pairs],
            kappa_b: vec![1.0 / 20e-6; n_pairs],
            gamma: 1.0 / 50e-6,
            gamma_phi: 1.0 / 5e-6,
        }
    }

    pub fn n_pairs(&self) -> usize {
        self.kappa_a.len()
    }

    pub fn is_zero(&self) -> bool {
        self.kappa_a
            .iter()
            .chain(&self.kappa_b)
            .chain([&self.gamma, &self.gamma_phi])
            .all(|&r| r == 0.0)
    }
}

/// Builds the reference scaling for two pairs: `g1 = μ1 = Δ1/b`,
/// `g2 = μ2 = √(Δ2/Δ1) g1`, so that `λ = g1²/Δ1` for both pairs.
pub fn derive_paper_parameters(b: f64, delta1: f64, delta2: f64) -> Result<ProtocolConfig> {
    if !(delta1.is_finite() && delta2.is_finite() && delta2 > 0.0 && delta1 > delta2) {
        return Err(Error::invalid(format!(
            "need Δ1 > Δ2 > 0, got Δ1 = {delta1}, Δ2 = {delta2}"
        )));
    }
    derive_scaled_parameters(b, &[delta1, delta2])
}

/// Same scaling for any number of pairs: `g_j = μ_j = √(Δ_j/Δ_1) Δ_1/b`.
pub fn derive_scaled_parameters(b: f64, detunings: &[f64]) -> Result<ProtocolConfig> {
    if !(b.is_finite() && b > 0.0) {
        return Err(Error::invalid(format!("b must be positive, got {b}")));
    }
    let Some(&delta1) = detunings.first() else {
        return Err(Error::invalid("need at least one detuning"));
    };
    if detunings.iter().any(|&d| !(d.is_finite() && d > 0.0)) {
        return Err(Error::invalid("detunings must be positive"));
    }
    let g1 = delta1 / b;
    let pairs = detunings
        .iter()
        .enumerate()
        .map(|(j, &d)| {
            let g = if j == 0 { g1 } else { (d / delta1).sqrt() * g1 };
            PairCoupling {
                g,
                mu: g,
                detuning: d,
            }
        })
        .collect::<Vec<_>>();
    ProtocolConfig::standard(pairs)
}

/// Default detunings for `n` pairs: `Δ_j = Δ1 / j`, which reproduces
/// `(1, 0.5) × 2π GHz` for two pairs.
pub fn default_detunings(n_pairs: usize) -> Vec<f64> {
    (1..=n_pairs).map(|j| DEFAULT_DELTA1 / j as f64).collect()
}

/// Coupling operators `X_j = g_j a_j S+ + μ_j b_j S+`, one per pair.
fn raising_couplings(config: &ProtocolConfig, layout: &SystemLayout) -> Result<Vec<Operator>> {
    config.check_layout(layout)?;
    let q = qubit_ops(layout, SzConvention::Unhalved);
    config
        .pairs()
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let a = annihilation_op(layout, Mode::a(j))?;
            let b = annihilation_op(layout, Mode::b(j))?;
            let x = &(&a * p.g) + &(&b * p.mu);
            x.matmul(&q.s_plus)
        })
        .collect()
}

/// The time-dependent interaction-picture Hamiltonian with its coupling
/// terms precomputed, for repeated evaluation inside an integrator.
#[derive(Clone, Debug)]
pub struct InteractionHamiltonian {
    terms: Vec<(f64, Operator, Operator)>,
    dim: usize,
}

impl InteractionHamiltonian {
    pub fn new(config: &ProtocolConfig, layout: &SystemLayout) -> Result<Self> {
        let terms = raising_couplings(config, layout)?
            .into_iter()
            .zip(config.pairs())
            .map(|(x, p)| {
                let xd = x.adjoint();
                (p.detuning, x, xd)
            })
            .collect();
        Ok(InteractionHamiltonian {
            terms,
            dim: layout.dim(),
        })
    }

    pub fn at(&self, t: f64) -> Operator {
        let mut h = Operator::zeros(self.dim).into_matrix();
        for (delta, x, xd) in &self.terms {
            let phase = C64::new(0.0, delta * t).exp();
            h += x.matrix() * phase + xd.matrix() * phase.conj();
        }
        Operator::from_matrix(h).expect("finite by construction")
    }

    pub fn max_frequency(&self) -> f64 {
        self.terms.iter().map(|t| t.0).fold(0.0, f64::max)
    }
}

/// `H(t)` in the interaction picture.
pub fn full_hamiltonian_at(config: &ProtocolConfig, layout: &SystemLayout, t: f64) -> Result<Operator> {
    Ok(InteractionHamiltonian::new(config, layout)?.at(t))
}

/// Time-independent Hamiltonian in the frame rotating at the qubit
/// frequency.
pub fn rotating_frame_hamiltonian(config: &ProtocolConfig, layout: &SystemLayout) -> Result<Operator> {
    let mut h = Operator::zeros(layout.dim());
    for (j, (x, p)) in raising_couplings(config, layout)?
        .into_iter()
        .zip(config.pairs())
        .enumerate()
    {
        let n = &number_op(layout, Mode::a(j))? + &number_op(layout, Mode::b(j))?;
        h = h - &n * p.detuning;
        h = h + x.adjoint() + x;
    }
    Ok(h)
}

/// `(H0, HI)`: ac-Stark shifts and the qubit-state-dependent exchange.
pub fn effective_hamiltonians(
    config: &ProtocolConfig,
    layout: &SystemLayout,
) -> Result<(Operator, Operator)> {
    config.check_layout(layout)?;
    let q = qubit_ops(layout, SzConvention::Unhalved);
    let dim = layout.dim();
    let mut stark_e = Operator::zeros(dim);
    let mut stark_g = Operator::zeros(dim);
    let mut exchange = Operator::zeros(dim);
    for (j, p) in config.pairs().iter().enumerate() {
        let a = annihilation_op(layout, Mode::a(j))?;
        let b = annihilation_op(layout, Mode::b(j))?;
        let (ad, bd) = (a.adjoint(), b.adjoint());
        let sa = p.g * p.g / p.detuning;
        let sb = p.mu * p.mu / p.detuning;
        stark_e = stark_e + &(&a * &ad) * sa + &(&b * &bd) * sb;
        stark_g = stark_g + &(&ad * &a) * sa + &(&bd * &b) * sb;
        exchange = exchange + &(&(&a * &bd) + &(&ad * &b)) * p.lambda();
    }
    let h0 = &(&stark_e * &q.proj_e) - &(&stark_g * &q.proj_g);
    let hi = &exchange * &(&q.proj_e - &q.proj_g);
    Ok((h0, hi))
}

/// Beam-splitter Hamiltonian `He = -Σ_j λ_j (a_j b_j† + a_j† b_j)`,
/// identity on the qubit.
pub fn swap_hamiltonian(config: &ProtocolConfig, layout: &SystemLayout) -> Result<Operator> {
    config.check_layout(layout)?;
    let mut he = Operator::zeros(layout.dim());
    for (j, p) in config.pairs().iter().enumerate() {
        let a = annihilation_op(layout, Mode::a(j))?;
        let b = annihilation_op(layout, Mode::b(j))?;
        let hop = &(&a * &b.adjoint()) + &(&a.adjoint() * &b);
        he = he - &hop * p.lambda();
    }
    Ok(he)
}

/// Ratio at or above which a "≫" condition passes.
pub const PASS_RATIO: f64 = 50.0;
/// Ratio below which a "≫" condition fails.
pub const FAIL_RATIO: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Warn,
    Fail,
}

impl Verdict {
    pub fn from_ratio(r: f64) -> Verdict {
        if r.is_nan() || r < FAIL_RATIO {
            Verdict::Fail
        } else if r < PASS_RATIO {
            Verdict::Warn
        } else {
            Verdict::Pass
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Warn => "warn",
            Verdict::Fail => "fail",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairValidity {
    /// One-based pair index.
    pub pair: usize,
    pub detuning_over_g: f64,
    pub detuning_over_mu: f64,
    pub verdict: Verdict,
}

/// Cross-pair condition for an unordered pair `(j, k)`: the ratio of
/// `|Δj-Δk| / (1/Δj + 1/Δk)` to each coupling product.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CrossValidity {
    pub j: usize,
    pub k: usize,
    pub ratio_gg: f64,
    /// Smaller of the `g_j μ_k` and `g_k μ_j` ratios.
    pub ratio_gmu: f64,
    pub ratio_mumu: f64,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidityReport {
    pub pairs: Vec<PairValidity>,
    pub cross: Vec<CrossValidity>,
    pub verdict: Verdict,
    pub notes: Vec<String>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

/// Evaluates the large-detuning and cross-pair selectivity conditions.
pub fn check_validity(pairs: &[PairCoupling]) -> ValidityReport {
    let mut notes = Vec::new();
    let pair_rows: Vec<PairValidity> = pairs
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let dg = ratio(p.detuning, p.g);
            let dm = ratio(p.detuning, p.mu);
            let verdict = Verdict::from_ratio(dg.min(dm));
            if verdict != Verdict::Pass {
                notes.push(format!(
                    "pair {}: Δ/g = {:.4}, Δ/μ = {:.4} → {} (pass needs ≥ {PASS_RATIO}, fail below {FAIL_RATIO})",
                    j + 1,
                    dg,
                    dm,
                    verdict
                ));
            }
            PairValidity {
                pair: j + 1,
                detuning_over_g: dg,
                detuning_over_mu: dm,
                verdict,
            }
        })
        .collect();

    let mut cross = Vec::new();
    for j in 0..pairs.len() {
        for k in j + 1..pairs.len() {
            let (pj, pk) = (&pairs[j], &pairs[k]);
            let lhs = (pj.detuning - pk.detuning).abs() / (1.0 / pj.detuning + 1.0 / pk.detuning);
            let ratio_gg = ratio(lhs, pj.g * pk.g);
            let ratio_gmu = ratio(lhs, pj.g * pk.mu).min(ratio(lhs, pk.g * pj.mu));
            let ratio_mumu = ratio(lhs, pj.mu * pk.mu);
            let verdict = Verdict::from_ratio(ratio_gg.min(ratio_gmu).min(ratio_mumu));
            if verdict != Verdict::Pass {
                notes.push(format!(
                    "pairs ({}, {}): cross ratios gg = {:.4}, gμ = {:.4}, μμ = {:.4} → {}",
                    j + 1,
                    k + 1,
                    ratio_gg,
                    ratio_gmu,
                    ratio_mumu,
                    verdict
                ));
            }
            cross.push(CrossValidity {
                j: j + 1,
                k: k + 1,
                ratio_gg,
                ratio_gmu,
                ratio_mumu,
                verdict,
            });
        }
    }
    let verdict = pair_rows
        .iter()
        .map(|p| p.verdict)
        .chain(cross.iter().map(|c| c.verdict))
        .max()
        .unwrap_or(Verdict::Pass);
    ValidityReport {
        pairs: pair_rows,
        cross,
        verdict,
        notes,
    }
}

impl fmt::Display for ValidityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "large-detuning condition (Δ_j ≫ g_j, μ_j):")?;
        for p in &self.pairs {
            writeln!(
                f,
                "  pair {}: Δ/g = {:.3}  Δ/μ = {:.3}  [{}]",
                p.pair, p.detuning_over_g, p.detuning_over_mu, p.verdict
            )?;
        }
        if !self.cross.is_empty() {
            writeln!(f, "cross-pair condition (|Δj-Δk|/(1/Δj+1/Δk) ≫ coupling products):")?;
            for c in &self.cross {
                writeln!(
                    f,
                    "  ({}, {}): gg = {:.3}  gμ = {:.3}  μμ = {:.3}  [{}]",
                    c.j, c.k, c.ratio_gg, c.ratio_gmu, c.ratio_mumu, c.verdict
                )?;
            }
        }
        writeln!(
            f,
            "thresholds: pass ≥ {PASS_RATIO}, warn ≥ {FAIL_RATIO}, fail below"
        )?;
        for n in &self.notes {
            writeln!(f, "note: {n}")?;
        }
        write!(f, "verdict: {}", self.verdict)
    }
}
