//! `dse`: simulate load faults, run the estimator bank, and tabulate results.
//!
//! Machine-readable output (JSON, CSV) goes to stdout; diagnostics go to
//! stderr. Exit codes: 0 success, 2 usage, 3 input, 4 numerical failure.

mod report;

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dse_core::estimator::{estimate, EstimationResult, SolverConfig, Termination};
use dse_core::models::{build_model, FaultHypothesis, LoadTopology};
use dse_core::protection::{classify, trip_decision, Classification, TripDecision, TripPolicy};
use dse_core::simulator::{simulate, Scenario};
use dse_core::waveform::{load_waveform_csv, window, write_waveform_csv, WaveformSet};
use dse_core::Error;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "dse", version, about = "Dynamic state estimation for RL load fault detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write the measured waveform and ground truth.
    Simulate {
        /// Scenario JSON file.
        scenario: PathBuf,
        /// Output waveform CSV (`time,va,vb,vc,ia,ib,ic`).
        #[arg(long)]
        waveform: PathBuf,
        /// Output ground-truth CSV with the internal branch voltages.
        #[arg(long)]
        truth: PathBuf,
    },
    /// Run one estimator and print its result as JSON.
    Estimate {
        waveform: PathBuf,
        #[arg(long)]
        topology: LoadTopology,
        #[arg(long)]
        hypothesis: FaultHypothesis,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Run the whole bank, select the minimum-cost hypothesis and decide whether to trip.
    Classify {
        waveform: PathBuf,
        #[arg(long)]
        topology: LoadTopology,
        #[command(flatten)]
        solver: SolverArgs,
        /// Minimum cost margin (J_second - J_best) required to trip.
        #[arg(long, default_value_t = TripPolicy::default().min_margin)]
        margin: f64,
    },
    /// Simulate, estimate and classify a list of cases and tabulate true against estimated values.
    Report {
        /// Report configuration JSON; the built-in seven-case table when omitted.
        config: Option<PathBuf>,
        /// Write the CSV table here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SolverArgs {
    /// Analysis window `start:end` in seconds; the whole record when omitted.
    #[arg(long, value_parser = parse_window)]
    window: Option<(f64, f64)>,
    #[arg(long = "max-iter")]
    max_iter: Option<usize>,
    /// Convergence threshold on |J_i - J_(i-1)|.
    #[arg(long)]
    tol: Option<f64>,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        let mut cfg = SolverConfig::default();
        if let Some(n) = self.max_iter {
            cfg.max_iterations = n;
        }
        if let Some(t) = self.tol {
            cfg.cost_delta_tol = t;
        }
        cfg
    }
}

fn parse_window(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected start:end, got `{s}`"))?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("bad window bound `{v}`: {e}"));
    Ok((num(a)?, num(b)?))
}

/// Error carrying the process exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    err: anyhow::Error,
}

const USAGE: u8 = 2;
const INPUT: u8 = 3;
const NUMERICAL: u8 = 4;

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self { code: USAGE, err: anyhow::anyhow!(msg.into()) }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Configuration(_) => USAGE,
        Error::Singular { .. } | Error::Divergence { .. } => NUMERICAL,
        _ => INPUT,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self { code: exit_code(&e), err: e.into() }
    }
}

/// Attaches context to a core error without losing its exit code.
trait CoreContext<T> {
    fn ctx(self, what: impl FnOnce() -> String) -> Result<T, Failure>;
}

impl<T> CoreContext<T> for dse_core::Result<T> {
    fn ctx(self, what: impl FnOnce() -> String) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: exit_code(&e), err: anyhow::Error::from(e).context(what()) })
    }
}

fn input_err(e: impl Into<anyhow::Error>, what: String) -> Failure {
    Failure { code: INPUT, err: e.into().context(what) }
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path).map(BufReader::new).map_err(|e| input_err(e, format!("cannot open {}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| input_err(e, format!("cannot create {}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    serde_json::from_reader(open(path)?).map_err(|e| input_err(e, format!("cannot parse {}", path.display())))
}

fn load_window(path: &Path, win: Option<(f64, f64)>) -> Result<WaveformSet, Failure> {
    let ws = load_waveform_csv(open(path)?).ctx(|| format!("cannot read waveform {}", path.display()))?;
    match win {
        Some((a, b)) => window(&ws, a, b).ctx(|| format!("cannot apply window {a}:{b}")),
        None => Ok(ws),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Failure> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)
        .map_err(anyhow::Error::from)
        .and_then(|_| writeln!(out).map_err(Into::into))
        .map_err(|e| Failure { code: INPUT, err: e.context("cannot write to stdout") })
}

#[derive(Serialize)]
struct EstimateOutput {
    topology: LoadTopology,
    hypothesis: FaultHypothesis,
    t_start: f64,
    t_end: f64,
    samples: usize,
    r_hat_ohm: f64,
    l_hat_h: f64,
    rf_hat_ohm: Option<f64>,
    cost: f64,
    iterations: usize,
    converged: bool,
    termination: Termination,
}

impl EstimateOutput {
    fn new(ws: &WaveformSet, topology: LoadTopology, hypothesis: FaultHypothesis, r: &EstimationResult) -> Self {
        Self {
            topology,
            hypothesis,
            t_start: ws.t0(),
            t_end: ws.t_last(),
            samples: ws.n(),
            r_hat_ohm: r.params.r,
            l_hat_h: r.params.l,
            rf_hat_ohm: r.params.rf,
            cost: r.cost,
            iterations: r.iterations,
            converged: r.converged,
            termination: r.termination,
        }
    }
}

#[derive(Serialize)]
struct EntryOutput {
    hypothesis: FaultHypothesis,
    converged: bool,
    cost: Option<f64>,
    iterations: Option<usize>,
    r_hat_ohm: Option<f64>,
    l_hat_h: Option<f64>,
    rf_hat_ohm: Option<f64>,
    error: Option<String>,
}

#[derive(Serialize)]
struct ClassifyOutput {
    topology: LoadTopology,
    t_start: f64,
    t_end: f64,
    samples: usize,
    entries: Vec<EntryOutput>,
    selected: Option<FaultHypothesis>,
    margin: Option<f64>,
    policy: TripPolicy,
    trip_decision: TripDecision,
}

impl ClassifyOutput {
    fn new(ws: &WaveformSet, c: &Classification, policy: TripPolicy) -> Self {
        let entries = c
            .entries
            .iter()
            .map(|e| match &e.result {
                Ok(r) => EntryOutput {
                    hypothesis: e.hypothesis,
                    converged: r.converged,
                    cost: Some(r.cost),
                    iterations: Some(r.iterations),
                    r_hat_ohm: Some(r.params.r),
                    l_hat_h: Some(r.params.l),
                    rf_hat_ohm: r.params.rf,
                    error: None,
                },
                Err(msg) => EntryOutput {
                    hypothesis: e.hypothesis,
                    converged: false,
                    cost: None,
                    iterations: None,
                    r_hat_ohm: None,
                    l_hat_h: None,
                    rf_hat_ohm: None,
                    error: Some(msg.clone()),
                },
            })
            .collect();
        Self {
            topology: c.topology,
            t_start: ws.t0(),
            t_end: ws.t_last(),
            samples: ws.n(),
            entries,
            selected: c.selected,
            margin: c.margin,
            policy,
            trip_decision: trip_decision(c, &policy),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate { scenario, waveform, truth } => {
            let s: Scenario = read_json(&scenario)?;
            let out = simulate(&s).ctx(|| format!("simulation of {} failed", scenario.display()))?;
            let mut w = create(&waveform)?;
            write_waveform_csv(&out.waveform, &mut w).ctx(|| format!("cannot write {}", waveform.display()))?;
            let mut t = create(&truth)?;
            out.truth.write_csv(&mut t, s.topology.phase_count()).ctx(|| format!("cannot write {}", truth.display()))?;
            eprintln!("wrote {} samples to {} and {}", out.waveform.n(), waveform.display(), truth.display());
            Ok(())
        }
        Command::Estimate { waveform, topology, hypothesis, solver } => {
            if !hypothesis.valid_for(topology) {
                return Err(Failure::usage(format!("hypothesis {hypothesis} is not defined for topology {topology}")));
            }
            let cfg = solver.config();
            cfg.validate()?;
            let ws = load_window(&waveform, solver.window)?;
            let model = build_model(topology, hypothesis, ws.n(), ws.dt()).ctx(|| "cannot build model".into())?;
            let r = estimate(&model, &ws, &cfg).ctx(|| format!("{topology} {hypothesis} estimation failed"))?;
            print_json(&EstimateOutput::new(&ws, topology, hypothesis, &r))
        }
        Command::Classify { waveform, topology, solver, margin } => {
            let cfg = solver.config();
            cfg.validate()?;
            let policy = TripPolicy { min_margin: margin, ..TripPolicy::default() };
            policy.validate()?;
            let ws = load_window(&waveform, solver.window)?;
            let c = classify(&ws, topology, &cfg).ctx(|| "classification failed".into())?;
            print_json(&ClassifyOutput::new(&ws, &c, policy))
        }
        Command::Report { config, csv } => {
            let cfg: report::ReportConfig = match &config {
                Some(p) => read_json(p)?,
                None => report::ReportConfig::default(),
            };
            let rows = report::run(&cfg)?;
            report::print_text(&rows, &mut io::stderr().lock())
                .map_err(|e| input_err(e, "cannot write report text".into()))?;
            match csv {
                Some(p) => {
                    let mut w = create(&p)?;
                    report::write_csv(&rows, &mut w)
                        .and_then(|_| w.flush())
                        .map_err(|e| input_err(e, format!("cannot write {}", p.display())))
                }
                None => report::write_csv(&rows, &mut io::stdout().lock())
                    .map_err(|e| input_err(e, "cannot write to stdout".into())),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
