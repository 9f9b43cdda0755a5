//! JSON run configuration with explicit units.
//!
//! ```json
//! {
//!   "system": { "n_pairs": 2, "fock_cutoff": 3, "sz_convention": "unhalved", "model": "rotating-frame" },
//!   "couplings": { "detunings": [{ "value": 1, "unit": "GHz" }, { "value": 0.5, "unit": "GHz" }] },
//!   "decoherence": {
//!     "kappa_a": { "value": 20, "unit": "us" },
//!     "kappa_b": { "value": 20, "unit": "us" },
//!     "gamma": { "value": 50, "unit": "us" },
//!     "gamma_phi": { "value": 5, "unit": "us" }
//!   },
//!   "integrator": { "method": "fixed-rk4", "record_stride": 250 },
//!   "sweep": { "b_min": 11, "b_max": 31, "b_steps": 11, "scenarios": ["i", "ii", "iii", "iv"], "workers": 1 },
//!   "output": { "path": "sweep.csv", "format": "csv" }
//! }
//! ```
//!
//! Frequencies (`Hz`, `kHz`, `MHz`, `GHz`) are cyclic and become `2π f`
//! rad/s; `rad/s` is taken as is. Decay rates are either rates (`1/s`,
//! `1/ms`, `1/us`, `1/ns`) or lifetimes (`s`, `ms`, `us`, `ns`). Every
//! section and key is optional; missing values keep their defaults.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{default_b_grid, OutputFormat, SweepSpec};
use crate::analytic::Scenario;
use crate::dynamics::{HamiltonianModel, Method};
use crate::error::{Error, Result};
use crate::model::DecoherenceConfig;

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quantity {
    pub value: f64,
    pub unit: String,
}

fn time_scale(unit: &str) -> Option<f64> {
    Some(match unit {
        "s" => 1.0,
        "ms" => 1e-3,
        "us" | "µs" => 1e-6,
        "ns" => 1e-9,
        "ps" => 1e-12,
        "fs" => 1e-15,
        _ => return None,
    })
}

impl Quantity {
    fn finite(&self) -> Result<f64> {
        if self.value.is_finite() {
            Ok(self.value)
        } else {
            Err(Error::Config(format!("non-finite value {}", self.value)))
        }
    }

    /// Angular frequency in rad/s.
    pub fn angular_frequency(&self) -> Result<f64> {
        let v = self.finite()?;
        let hz = match self.unit.as_str() {
            "rad/s" => return Ok(v),
            "Hz" => 1.0,
            "kHz" => 1e3,
            "MHz" => 1e6,
            "GHz" => 1e9,
            other => return Err(Error::Config(format!("`{other}` is not a frequency unit"))),
        };
        Ok(2.0 * PI * v * hz)
    }

    /// Rate in 1/s, from a rate or a lifetime.
    pub fn rate(&self) -> Result<f64> {
        let v = self.finite()?;
        if let Some(per) = self.unit.strip_prefix("1/") {
            let scale = time_scale(per).ok_or_else(|| Error::Config(format!("unknown rate unit `{}`", self.unit)))?;
            return Ok(v / scale);
        }
        let scale = time_scale(&self.unit)
            .ok_or_else(|| Error::Config(format!("`{}` is neither a rate nor a lifetime unit", self.unit)))?;
        if v <= 0.0 {
            return Err(Error::Config(format!("lifetime must be positive, got {v} {}", self.unit)));
        }
        Ok(1.0 / (v * scale))
    }

    /// Time in seconds.
    pub fn time(&self) -> Result<f64> {
        let v = self.finite()?;
        let scale = time_scale(&self.unit).ok_or_else(|| Error::Config(format!("`{}` is not a time unit", self.unit)))?;
        Ok(v * scale)
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RateList {
    One(Quantity),
    Many(Vec<Quantity>),
}

impl RateList {
    fn rates(&self, n: usize) -> Result<Vec<f64>> {
        match self {
            RateList::One(q) => Ok(vec![q.rate()?; n]),
            RateList::Many(v) if v.len() == n => v.iter().map(Quantity::rate).collect(),
            RateList::Many(v) => Err(Error::Config(format!("{} rates given for {n} pairs", v.len()))),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemSection {
    n_pairs: Option<usize>,
    fock_cutoff: Option<usize>,
    sz_convention: Option<String>,
    model: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CouplingSection {
    detunings: Option<Vec<Quantity>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DecoherenceSection {
    enabled: Option<bool>,
    kappa_a: Option<RateList>,
    kappa_b: Option<RateList>,
    gamma: Option<Quantity>,
    gamma_phi: Option<Quantity>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntegratorSection {
    method: Option<Method>,
    dt: Option<Quantity>,
    rtol: Option<f64>,
    record_stride: Option<usize>,
    monitor_positivity: Option<bool>,
    monitor_trace: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepSection {
    b_values: Option<Vec<f64>>,
    b_min: Option<f64>,
    b_max: Option<f64>,
    b_steps: Option<usize>,
    fine: Option<bool>,
    scenarios: Option<Vec<String>>,
    workers: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputSection {
    path: Option<PathBuf>,
    format: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    system: SystemSection,
    #[serde(default)]
    couplings: CouplingSection,
    #[serde(default)]
    decoherence: DecoherenceSection,
    #[serde(default)]
    integrator: IntegratorSection,
    #[serde(default)]
    sweep: SweepSection,
    #[serde(default)]
    output: OutputSection,
}

/// `steps` evenly spaced values from `min` to `max` inclusive.
pub fn b_range(min: f64, max: f64, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Config("b_steps must be at least 1".into()));
    }
    if !(min.is_finite() && max.is_finite() && max >= min) {
        return Err(Error::Config(format!("bad b range [{min}, {max}]")));
    }
    if steps == 1 {
        return Ok(vec![min]);
    }
    let h = (max - min) / (steps - 1) as f64;
    Ok((0..steps)
        .map(|i| if i == steps - 1 { max } else { min + h * i as f64 })
        .collect())
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

/// Builds a sweep specification from a JSON document.
pub fn parse_config(json: &str) -> Result<SweepSpec> {
    let file: ConfigFile = serde_json::from_str(json).map_err(|e| Error::Config(e.to_string()))?;
    build_spec(file).map_err(config_err)
}

pub fn load_config(path: &Path) -> Result<SweepSpec> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text).map_err(|e| e.context(path.display()))
}

fn build_spec(file: ConfigFile) -> Result<SweepSpec> {
    let mut spec = SweepSpec::default();
    let sys = file.system;
    if let Some(n) = sys.n_pairs {
        spec = spec.with_n_pairs(n)?;
    }
    let n = spec.n_pairs;
    if let Some(d) = sys.fock_cutoff {
        spec.cutoff = d;
    }
    if let Some(s) = sys.sz_convention {
        spec.sz_convention = s.parse()?;
    }
    if let Some(m) = sys.model {
        spec.model = m.parse::<HamiltonianModel>()?;
    }

    if let Some(ds) = file.couplings.detunings {
        spec.detunings = ds.iter().map(Quantity::angular_frequency).collect::<Result<_>>()?;
    }

    let dec = file.decoherence;
    let mut rates = spec.decoherence.clone();
    if let Some(k) = dec.kappa_a {
        rates.kappa_a = k.rates(n)?;
    }
    if let Some(k) = dec.kappa_b {
        rates.kappa_b = k.rates(n)?;
    }
    if let Some(g) = dec.gamma {
        rates.gamma = g.rate()?;
    }
    if let Some(g) = dec.gamma_phi {
        rates.gamma_phi = g.rate()?;
    }
    spec.decoherence = DecoherenceConfig::new(rates.kappa_a, rates.kappa_b, rates.gamma, rates.gamma_phi)?;
    if dec.enabled == Some(false) {
        spec = spec.without_dissipation();
    }

    let int = file.integrator;
    if let Some(m) = int.method {
        spec.integrator.method = m;
    }
    if let Some(dt) = int.dt {
        spec.integrator.dt = Some(dt.time()?);
    }
    if let Some(r) = int.rtol {
        spec.integrator.rtol = r;
    }
    if let Some(s) = int.record_stride {
        spec.integrator.record_stride = s;
    }
    if let Some(v) = int.monitor_positivity {
        spec.integrator.monitor_positivity = v;
    }
    if let Some(v) = int.monitor_trace {
        spec.integrator.monitor_trace = v;
    }

    let sw = file.sweep;
    spec.b_values = match (sw.b_values, sw.b_min, sw.b_max, sw.b_steps) {
        (Some(v), None, None, None) => v,
        (Some(_), ..) => return Err(Error::Config("give either b_values or a b range, not both".into())),
        (None, None, None, None) => default_b_grid(sw.fine.unwrap_or(false)),
        (None, min, max, steps) => {
            let grid = default_b_grid(false);
            b_range(
                min.unwrap_or(grid[0]),
                max.unwrap_or(grid[grid.len() - 1]),
                steps.unwrap_or(grid.len()),
            )?
        }
    };
    if let Some(names) = sw.scenarios {
        spec.scenarios = names.iter().map(|s| s.parse::<Scenario>()).collect::<Result<_>>()?;
    }
    if let Some(w) = sw.workers {
        spec.workers = w;
    }

    if let Some(p) = file.output.path {
        spec.output = Some(p);
    }
    if let Some(f) = file.output.format {
        spec.format = f.parse::<OutputFormat>()?;
    }
    spec.validate()?;
    Ok(spec)
}
