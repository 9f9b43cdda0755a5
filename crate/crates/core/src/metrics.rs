//! State comparison and diagnostics.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hilbert::{number_op, HermitianEigen, Mode, QuantumState, QubitLevel, StateData, SystemLayout};

/// Eigenvalues in `[-CLIP_TOL, 0)` are treated as roundoff and set to zero.
pub const CLIP_TOL: f64 = 1e-12;
/// Eigenvalues below `-PSD_TOL` make an input invalid.
pub const PSD_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FidelityValue {
    /// As computed; may exceed 1 by roundoff.
    pub raw: f64,
    /// Clamped to `[0, 1]`.
    pub value: f64,
}

impl FidelityValue {
    fn new(raw: f64) -> Self {
        FidelityValue {
            raw,
            value: raw.clamp(0.0, 1.0),
        }
    }
}

fn clip(e: f64) -> f64 {
    if e < 0.0 && e >= -CLIP_TOL {
        0.0
    } else {
        e.max(0.0)
    }
}

fn check_psd(eig: &HermitianEigen, which: &str) -> Result<()> {
    let m = eig.min();
    if m < -PSD_TOL {
        return Err(Error::invalid(format!(
            "{which} is not positive semidefinite (min eigenvalue {m:e})"
        )));
    }
    Ok(())
}

/// `F = Tr √(√ρ σ √ρ)`. A pure `ρ = |ψ⟩⟨ψ|` reduces this to `√⟨ψ|σ|ψ⟩`.
pub fn uhlmann_fidelity(rho: &QuantumState, sigma: &QuantumState) -> Result<FidelityValue> {
    if rho.dim() != sigma.dim() {
        return Err(Error::DimensionMismatch {
            expected: rho.dim(),
            actual: sigma.dim(),
        });
    }
    match (rho.data(), sigma.data()) {
        (StateData::Pure(psi), StateData::Pure(phi)) => {
            Ok(FidelityValue::new(psi.dotc(phi).norm()))
        }
        (StateData::Pure(psi), StateData::Mixed(s)) | (StateData::Mixed(s), StateData::Pure(psi)) => {
            let overlap = psi.dotc(&(s * psi)).re;
            Ok(FidelityValue::new(overlap.max(0.0).sqrt()))
        }
        (StateData::Mixed(r), StateData::Mixed(s)) => fidelity_general(r, s),
    }
}

/// The general formula, regardless of purity, evaluated as the sum of
/// singular values of `√ρ √σ`.
pub fn fidelity_general(rho: &DMatrix<C64>, sigma: &DMatrix<C64>) -> Result<FidelityValue> {
    if rho.shape() != sigma.shape() {
        return Err(Error::DimensionMismatch {
            expected: rho.nrows(),
            actual: sigma.nrows(),
        });
    }
    let sqrt_rho = psd_sqrt(rho, "first state")?;
    let sqrt_sigma = psd_sqrt(sigma, "second state")?;
    let raw = (sqrt_rho * sqrt_sigma).singular_values().sum();
    Ok(FidelityValue::new(raw))
}

/// Square root of a PSD matrix. Eigenvalues at roundoff level relative to
/// the largest one are zeroed so that rank-deficient inputs do not leak
/// `√ε` terms into the result.
fn psd_sqrt(m: &DMatrix<C64>, which: &str) -> Result<DMatrix<C64>> {
    let eig = HermitianEigen::new(m);
    check_psd(&eig, which)?;
    let top = eig.values.iter().copied().fold(0.0, f64::max);
    let floor = m.nrows() as f64 * f64::EPSILON * top;
    Ok(eig.map(|e| {
        let e = clip(e);
        C64::new(if e <= floor { 0.0 } else { e.sqrt() }, 0.0)
    }))
}

/// `Tr ρ²`.
pub fn purity(state: &QuantumState) -> f64 {
    match state.data() {
        StateData::Pure(v) => v.norm_squared().powi(2),
        StateData::Mixed(m) => m.iter().map(|z| z.norm_sqr()).sum(),
    }
}

/// `Tr(ρ N_tot)`, photons plus qubit excitation.
pub fn excitation_expectation(state: &QuantumState, layout: &SystemLayout) -> Result<f64> {
    check_dim(state, layout)?;
    Ok(state.diagonal_weighted(|i| layout.excitation(i) as f64))
}

/// `Tr(ρ |e⟩⟨e|)`.
pub fn qubit_e_population(state: &QuantumState, layout: &SystemLayout) -> Result<f64> {
    check_dim(state, layout)?;
    Ok(state.diagonal_weight(|i| layout.qubit_level(i) == QubitLevel::Excited))
}

/// `Tr(ρ n_m)` for every mode, in slot order `a1..aN, b1..bN`.
pub fn mode_populations(state: &QuantumState, layout: &SystemLayout) -> Result<Vec<(Mode, f64)>> {
    check_dim(state, layout)?;
    layout
        .modes()
        .map(|m| {
            let n = number_op(layout, m)?;
            Ok((m, state.expectation(&n)?.re))
        })
        .collect()
}

fn check_dim(state: &QuantumState, layout: &SystemLayout) -> Result<()> {
    if state.dim() != layout.dim() {
        return Err(Error::DimensionMismatch {
            expected: layout.dim(),
            actual: state.dim(),
        });
    }
    Ok(())
}
