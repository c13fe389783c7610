//! Hypothesis bank, minimum-cost selection and trip logic.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::{estimate, EstimationResult, SolverConfig};
use crate::models::{build_model, FaultHypothesis, LoadTopology};
use crate::waveform::WaveformSet;

/// One estimator of the bank. A failed estimate keeps its error message.
#[derive(Debug, Clone, Serialize)]
pub struct BankEntry {
    pub hypothesis: FaultHypothesis,
    pub result: std::result::Result<EstimationResult, String>,
}

impl BankEntry {
    pub fn cost(&self) -> Option<f64> {
        self.result.as_ref().ok().map(|r| r.cost).filter(|c| c.is_finite())
    }

    pub fn converged(&self) -> bool {
        self.result.as_ref().is_ok_and(|r| r.converged)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Classification {
    pub topology: LoadTopology,
    /// In bank order.
    pub entries: Vec<BankEntry>,
    /// Minimum cost among converged entries; `None` if none converged.
    pub selected: Option<FaultHypothesis>,
    /// `J_second − J_best` among converged entries.
    pub margin: Option<f64>,
    /// Minimum cost among every entry with a finite cost, converged or not.
    pub best_any: Option<FaultHypothesis>,
    /// `J_second − J_best` among every entry with a finite cost.
    pub margin_any: Option<f64>,
}

/// Lowest and second-lowest cost; ties go to the earlier hypothesis.
fn rank<'a>(entries: impl Iterator<Item = &'a BankEntry>) -> (Option<FaultHypothesis>, Option<f64>) {
    let mut scored: Vec<(f64, FaultHypothesis)> = entries.filter_map(|e| e.cost().map(|c| (c, e.hypothesis))).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    match scored.as_slice() {
        [] => (None, None),
        [(_, h)] => (Some(*h), None),
        [(c0, h), (c1, _), ..] => (Some(*h), Some(c1 - c0)),
    }
}

impl Classification {
    pub fn from_entries(topology: LoadTopology, mut entries: Vec<BankEntry>) -> Self {
        entries.sort_by_key(|e| e.hypothesis);
        let (selected, margin) = rank(entries.iter().filter(|e| e.converged()));
        let (best_any, margin_any) = rank(entries.iter());
        Self { topology, entries, selected, margin, best_any, margin_any }
    }

    pub fn entry(&self, h: FaultHypothesis) -> Option<&BankEntry> {
        self.entries.iter().find(|e| e.hypothesis == h)
    }
}

/// Shortest record on which every model of every topology is estimable
/// (delta line-ground is the binding one).
pub const MIN_BANK_SAMPLES: usize = 5;

/// Runs every valid hypothesis for `topology` over `ws`.
///
/// Fails only when the record is shorter than [`MIN_BANK_SAMPLES`]; individual
/// estimator failures are recorded in their entries.
pub fn classify(ws: &WaveformSet, topology: LoadTopology, cfg: &SolverConfig) -> Result<Classification> {
    cfg.validate()?;
    if ws.n() < MIN_BANK_SAMPLES {
        return Err(Error::Size(format!("bank needs at least {MIN_BANK_SAMPLES} samples, got {}", ws.n())));
    }
    let models = topology
        .hypotheses()
        .into_iter()
        .map(|h| build_model(topology, h, ws.n(), ws.dt()))
        .collect::<Result<Vec<_>>>()?;
    let entries: Vec<BankEntry> = models
        .par_iter()
        .map(|m| BankEntry { hypothesis: m.hypothesis(), result: estimate(m, ws, cfg).map_err(|e| e.to_string()) })
        .collect();
    Ok(Classification::from_entries(topology, entries))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TripPolicy {
    pub min_margin: f64,
    pub require_convergence: bool,
}

impl Default for TripPolicy {
    fn default() -> Self {
        Self { min_margin: 0.5, require_convergence: true }
    }
}

impl TripPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_margin >= 0.0) {
            return Err(Error::Configuration(format!("min_margin must be >= 0, got {}", self.min_margin)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TripAction {
    Trip,
    Hold,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TripDecision {
    pub action: TripAction,
    pub reason: String,
}

pub fn trip_decision(c: &Classification, policy: &TripPolicy) -> TripDecision {
    let hold = |reason: String| TripDecision { action: TripAction::Hold, reason };
    let (selected, margin) = if policy.require_convergence {
        (c.selected, c.margin)
    } else {
        (c.best_any, c.margin_any)
    };
    let Some(h) = selected else {
        return hold(if policy.require_convergence {
            "no estimator converged".into()
        } else {
            "no estimator produced a finite cost".into()
        });
    };
    if !h.is_faulted() {
        return hold("unfaulted hypothesis selected".into());
    }
    // A lone candidate has nothing to be separated from.
    let margin = margin.unwrap_or(f64::INFINITY);
    if margin < policy.min_margin {
        return hold(format!("insufficient margin: {margin:.4} < {}", policy.min_margin));
    }
    TripDecision { action: TripAction::Trip, reason: format!("{h} selected with margin {margin:.4}") }
}
