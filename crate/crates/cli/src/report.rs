//! True-versus-estimated table over a list of simulated cases.

use std::io::{self, Write};
use std::time::{Duration, Instant};

use dse_core::estimator::SolverConfig;
use dse_core::models::{FaultHypothesis, LoadTopology, Phase, PhasePair};
use dse_core::protection::classify;
use dse_core::simulator::{simulate, Scenario};
use rayon::prelude::*;
use serde::Deserialize;

use crate::Failure;

const R_LOAD: f64 = 7.373;
const L_LOAD: f64 = 9.779e-3;
const RF_LG: f64 = 0.015;
const RF_LL: f64 = 0.010;

pub const CSV_HEADER: &str = "case,R_true,R_hat,L_true,L_hat,Rf_true,Rf_hat,selected,J_best,J_margin,converged";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Case {
    pub label: String,
    pub scenario: Scenario,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    pub cases: Vec<Case>,
    #[serde(default)]
    pub max_iterations: Option<usize>,
    #[serde(default)]
    pub cost_delta_tol: Option<f64>,
}

impl Default for ReportConfig {
    /// Single-phase through delta line-ground, in that order.
    fn default() -> Self {
        use FaultHypothesis::*;
        let case = |label: &str, topology, h: FaultHypothesis, rf| Case {
            label: label.into(),
            scenario: Scenario::new(topology, R_LOAD, L_LOAD).with_fault(h, rf),
        };
        let (one, wye, delta) = (LoadTopology::SinglePhaseRL, LoadTopology::GroundedWyeRL, LoadTopology::DeltaRL);
        let (lg, ll) = (LineGround(Phase::A), LineLine(PhasePair::AB));
        Self {
            cases: vec![
                case("Single-Phase RL Load", one, lg, RF_LG),
                case("Grounded-Wye No Fault", wye, Unfaulted, 0.0),
                case("Grounded-Wye Line-Ground Fault", wye, lg, RF_LG),
                case("Grounded-Wye Line-Line Fault", wye, ll, RF_LL),
                case("Delta No Fault", delta, Unfaulted, 0.0),
                case("Delta Line-Line Fault", delta, ll, RF_LL),
                case("Delta Line-Ground Fault", delta, lg, RF_LG),
            ],
            max_iterations: None,
            cost_delta_tol: None,
        }
    }
}

impl ReportConfig {
    fn solver(&self) -> SolverConfig {
        let mut cfg = SolverConfig::default();
        if let Some(n) = self.max_iterations {
            cfg.max_iterations = n;
        }
        if let Some(t) = self.cost_delta_tol {
            cfg.cost_delta_tol = t;
        }
        cfg
    }
}

/// One case. Estimates come from the estimator of the applied hypothesis;
/// `selected`, `j_best` and `j_margin` from the bank.
#[derive(Debug, Clone)]
pub struct Row {
    pub label: String,
    pub r_true: f64,
    pub l_true: f64,
    pub rf_true: Option<f64>,
    pub r_hat: Option<f64>,
    pub l_hat: Option<f64>,
    pub rf_hat: Option<f64>,
    pub selected: Option<FaultHypothesis>,
    pub j_best: Option<f64>,
    pub j_margin: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
    pub wall: Duration,
}

fn run_case(case: &Case, cfg: &SolverConfig) -> Row {
    let t0 = Instant::now();
    let s = &case.scenario;
    let mut row = Row {
        label: case.label.clone(),
        r_true: s.r_load,
        l_true: s.l_load,
        rf_true: s.r_fault.filter(|_| s.hypothesis.is_faulted()),
        r_hat: None,
        l_hat: None,
        rf_hat: None,
        selected: None,
        j_best: None,
        j_margin: None,
        converged: false,
        error: None,
        wall: Duration::ZERO,
    };
    let outcome = simulate(s)
        .and_then(|out| out.analysis_window())
        .and_then(|ws| classify(&ws, s.topology, cfg));
    match outcome {
        Ok(c) => {
            match c.entry(s.hypothesis).map(|e| &e.result) {
                Some(Ok(r)) => {
                    row.r_hat = Some(r.params.r);
                    row.l_hat = Some(r.params.l);
                    row.rf_hat = r.params.rf;
                    row.converged = r.converged;
                }
                Some(Err(msg)) => row.error = Some(format!("{} estimator: {msg}", s.hypothesis)),
                None => row.error = Some(format!("{} is not in the {} bank", s.hypothesis, s.topology)),
            }
            row.selected = c.selected;
            row.j_best = c.selected.and_then(|h| c.entry(h)).and_then(|e| e.cost());
            row.j_margin = c.margin;
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row.wall = t0.elapsed();
    row
}

/// Runs every case; rows keep the configured order.
pub fn run(cfg: &ReportConfig) -> Result<Vec<Row>, Failure> {
    let solver = cfg.solver();
    solver.validate()?;
    Ok(cfg.cases.par_iter().map(|c| run_case(c, &solver)).collect())
}

fn num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn quote(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Deterministic table: no timing, full-precision numbers, empty cells for
/// values that do not exist.
pub fn write_csv<W: Write>(rows: &[Row], out: &mut W) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            quote(&r.label),
            r.r_true,
            num(r.r_hat),
            r.l_true,
            num(r.l_hat),
            num(r.rf_true),
            num(r.rf_hat),
            r.selected.map(|h| h.label()).unwrap_or_default(),
            num(r.j_best),
            num(r.j_margin),
            r.converged,
        )?;
    }
    Ok(())
}

fn fixed(v: Option<f64>, scale: f64, digits: usize) -> String {
    v.map(|x| format!("{:.*}", digits, x * scale)).unwrap_or_else(|| "--".into())
}

pub fn print_text<W: Write>(rows: &[Row], out: &mut W) -> io::Result<()> {
    writeln!(
        out,
        "{:<32} {:>8} {:>8} {:>9} {:>9} {:>9} {:>9} {:>10} {:>5} {:>8}",
        "case", "R", "R_hat", "L [mH]", "L_hat", "Rf [mΩ]", "Rf_hat", "selected", "conv", "time"
    )?;
    for r in rows {
        writeln!(
            out,
            "{:<32} {:>8.3} {:>8} {:>9.3} {:>9} {:>9} {:>9} {:>10} {:>5} {:>7.2}s",
            r.label,
            r.r_true,
            fixed(r.r_hat, 1.0, 3),
            r.l_true * 1e3,
            fixed(r.l_hat, 1e3, 3),
            fixed(r.rf_true, 1e3, 3),
            fixed(r.rf_hat, 1e3, 3),
            r.selected.map(|h| h.label()).unwrap_or("--"),
            if r.converged { "yes" } else { "no" },
            r.wall.as_secs_f64(),
        )?;
        if let Some(e) = &r.error {
            writeln!(out, "    error: {e}")?;
        }
    }
    Ok(())
}
