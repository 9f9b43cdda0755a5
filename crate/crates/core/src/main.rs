use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cavity_swap::analytic::Scenario;
use cavity_swap::dynamics::HamiltonianModel;
use cavity_swap::harness::{
    self, b_range, default_b_grid, load_config, selftest, write_records, OutputFormat, SweepRecord, SweepSpec,
};
use cavity_swap::hilbert::SzConvention;
use cavity_swap::{Error, Result};

#[derive(Parser)]
#[command(name = "cavity-swap", version, about = "Cavity state exchange and EPR generation through a coupler qubit")]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fidelity versus b for the swap scenarios.
    Sweep(Overrides),
    /// A single (b, scenario) swap point.
    Point(Overrides),
    /// Simultaneous EPR-pair generation.
    Epr(Overrides),
    /// Coupling-regime validity report.
    Check(Overrides),
    /// Fast invariant checks.
    Selftest,
}

#[derive(Args)]
struct Overrides {
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// b value(s); repeat or comma-separate.
    #[arg(long, value_delimiter = ',')]
    b: Vec<f64>,
    #[arg(long)]
    b_min: Option<f64>,
    #[arg(long)]
    b_max: Option<f64>,
    #[arg(long)]
    b_steps: Option<usize>,
    /// Double the density of the default b grid.
    #[arg(long)]
    fine: bool,
    /// Scenario(s): i, ii, iii, iv.
    #[arg(long, value_delimiter = ',')]
    scenario: Vec<String>,
    /// Fock cutoff d (levels per cavity).
    #[arg(long)]
    cutoff: Option<usize>,
    /// Number of cavity pairs (EPR generation).
    #[arg(long)]
    n_pairs: Option<usize>,
    /// Turn off all decay and dephasing.
    #[arg(long)]
    no_dissipation: bool,
    /// unhalved or halved.
    #[arg(long)]
    sz_convention: Option<String>,
    /// rotating-frame, effective or swap.
    #[arg(long)]
    model: Option<String>,
    /// csv or json.
    #[arg(long)]
    format: Option<String>,
}

impl Overrides {
    fn apply(&self, mut spec: SweepSpec) -> Result<SweepSpec> {
        if let Some(n) = self.n_pairs {
            spec = spec.with_n_pairs(n)?;
        }
        if !self.b.is_empty() {
            spec.b_values = self.b.clone();
        } else if self.b_min.is_some() || self.b_max.is_some() || self.b_steps.is_some() {
            let grid = default_b_grid(false);
            spec.b_values = b_range(
                self.b_min.unwrap_or(grid[0]),
                self.b_max.unwrap_or(grid[grid.len() - 1]),
                self.b_steps.unwrap_or(grid.len()),
            )?;
        } else if self.fine {
            spec.b_values = default_b_grid(true);
        }
        if !self.scenario.is_empty() {
            spec.scenarios = self.scenario.iter().map(|s| s.parse()).collect::<Result<Vec<Scenario>>>()?;
        }
        if let Some(d) = self.cutoff {
            spec.cutoff = d;
        }
        if self.no_dissipation {
            spec = spec.without_dissipation();
        }
        if let Some(s) = &self.sz_convention {
            spec.sz_convention = s.parse::<SzConvention>()?;
        }
        if let Some(m) = &self.model {
            spec.model = m.parse::<HamiltonianModel>()?;
        }
        if let Some(f) = &self.format {
            spec.format = f.parse::<OutputFormat>()?;
        }
        if let Some(p) = &self.out {
            spec.output = Some(p.clone());
        }
        spec.validate()?;
        Ok(spec)
    }

    fn single_b(&self, spec: &SweepSpec) -> f64 {
        match (self.b.first(), spec.b_values.as_slice()) {
            (Some(&b), _) => b,
            (None, [b]) => *b,
            _ => 21.0,
        }
    }
}

fn emit(bytes: &[u8], out: Option<&PathBuf>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, bytes).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        }),
        None => std::io::stdout().write_all(bytes).map_err(|source| Error::Io {
            path: "<stdout>".into(),
            source,
        }),
    }
}

fn json<T: serde::Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).map_err(|e| Error::invalid(e.to_string()))?;
    v.push(b'\n');
    Ok(v)
}

fn print_records(records: &[SweepRecord], spec: &SweepSpec) -> Result<()> {
    match &spec.output {
        Some(path) => write_records(path, records, spec.format),
        None => emit(&harness::render_records(records, spec.format)?, None),
    }
}

fn run(cli: Cli) -> Result<i32> {
    let mut base = match &cli.config {
        Some(path) => load_config(path)?,
        None => SweepSpec::default(),
    };
    if let Some(w) = cli.workers {
        base.workers = w;
    }
    match cli.command {
        Command::Sweep(o) => {
            let spec = o.apply(base)?;
            let records = harness::run_fidelity_sweep(&SweepSpec { output: None, ..spec.clone() })?;
            print_records(&records, &spec)?;
        }
        Command::Point(o) => {
            let mut spec = o.apply(base)?;
            let b = o.single_b(&spec);
            let scenario = spec.scenarios[0];
            spec.b_values = vec![b];
            spec.scenarios = vec![scenario];
            let record = harness::run_swap_point(b, scenario, &spec)?;
            print_records(&[record], &spec)?;
        }
        Command::Epr(o) => {
            let spec = o.apply(base)?;
            let b = o.single_b(&spec);
            let record = harness::run_epr_generation(spec.n_pairs, b, &spec)?;
            emit(&json(&record)?, spec.output.as_ref())?;
        }
        Command::Check(o) => {
            let spec = o.apply(base)?;
            let b = o.single_b(&spec);
            let report = harness::run_validity_check(b, &spec)?;
            let bytes = match o.format.as_deref() {
                Some("json") => json(&report)?,
                _ => format!("b = {b}\n{report}").into_bytes(),
            };
            emit(&bytes, spec.output.as_ref())?;
        }
        Command::Selftest => {
            let checks = selftest::run();
            let mut failed = 0;
            for c in &checks {
                println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            println!("{} of {} checks passed", checks.len() - failed, checks.len());
            if failed > 0 {
                return Ok(2);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
