//! The hypothesis model bank.
//!
//! Each [`HypothesisModel`] describes one load topology under one fault
//! configuration as a set of series-RL branches sharing a conductance `G` and
//! an inverse inductance `Γ`, optionally with a resistive fault element of
//! conductance `G_f`. The unknowns are those parameters plus the resistor
//! and inductor voltage trajectories of every branch (and the fault voltage
//! where a fault element is present).
//!
//! The output vector stacks one block of `n` rows per measured channel,
//! followed by one block of `n - 2` branch constraint rows per inductive
//! branch:
//!
//! ```text
//! G·(v_r(k) − v_r(k−2)) − (2Δt·Γ/6)·(v_l(k) + 4·v_l(k−1) + v_l(k−2)) = 0
//! ```
//!
//! which states that the resistor current change over two samples equals the
//! inductor voltage integrated over the same interval by Simpson's rule.
//!
//! Faulted models replace the load at the faulted terminal(s) with the fault
//! element alone, which is accurate when `R_f ≪ |R + jωL|` and keeps every
//! faulted model from containing the unfaulted one as a special case.

use std::fmt;
use std::str::FromStr;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Jacobian;
use crate::waveform::{Channel, WaveformSet};

/// Nominal supply angular frequency used to seed `Γ`.
pub const NOMINAL_OMEGA: f64 = 2.0 * std::f64::consts::PI * 60.0;

/// Fraction of a branch voltage assigned to the resistor in the initial state.
const RESISTOR_SHARE: f64 = 0.9;

/// Ratio between the seeded fault conductance and load conductance.
const FAULT_CONDUCTANCE_RATIO: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LoadTopology {
    SinglePhaseRL,
    GroundedWyeRL,
    DeltaRL,
}

impl LoadTopology {
    pub const ALL: [LoadTopology; 3] =
        [LoadTopology::SinglePhaseRL, LoadTopology::GroundedWyeRL, LoadTopology::DeltaRL];

    pub fn label(self) -> &'static str {
        match self {
            LoadTopology::SinglePhaseRL => "1ph",
            LoadTopology::GroundedWyeRL => "wye",
            LoadTopology::DeltaRL => "delta",
        }
    }

    pub fn phase_count(self) -> usize {
        match self {
            LoadTopology::SinglePhaseRL => 1,
            _ => 3,
        }
    }

    /// Every hypothesis the bank runs for this topology, in tie-break order.
    pub fn hypotheses(self) -> Vec<FaultHypothesis> {
        FaultHypothesis::ALL.into_iter().filter(|h| h.valid_for(self)).collect()
    }
}

impl fmt::Display for LoadTopology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for LoadTopology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LoadTopology::ALL
            .into_iter()
            .find(|t| t.label() == s)
            .ok_or_else(|| Error::Configuration(format!("unknown topology `{s}` (expected 1ph, wye or delta)")))
    }
}

impl TryFrom<String> for LoadTopology {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LoadTopology> for String {
    fn from(t: LoadTopology) -> String {
        t.label().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Ordered phase pair; `AB` is the branch from a to b, and so on cyclically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PhasePair {
    AB,
    BC,
    CA,
}

impl PhasePair {
    pub const ALL: [PhasePair; 3] = [PhasePair::AB, PhasePair::BC, PhasePair::CA];

    /// Index of the first phase; the second is the next one cyclically.
    pub fn first(self) -> usize {
        self as usize
    }

    pub fn phases(self) -> (usize, usize) {
        let p = self.first();
        (p, (p + 1) % 3)
    }
}

/// Fault configuration tested by one estimator of the bank.
///
/// The derived ordering is the bank's tie-break order: unfaulted, then
/// line-ground a, b, c, then line-line ab, bc, ca.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FaultHypothesis {
    Unfaulted,
    LineGround(Phase),
    LineLine(PhasePair),
}

impl FaultHypothesis {
    pub const ALL: [FaultHypothesis; 7] = [
        FaultHypothesis::Unfaulted,
        FaultHypothesis::LineGround(Phase::A),
        FaultHypothesis::LineGround(Phase::B),
        FaultHypothesis::LineGround(Phase::C),
        FaultHypothesis::LineLine(PhasePair::AB),
        FaultHypothesis::LineLine(PhasePair::BC),
        FaultHypothesis::LineLine(PhasePair::CA),
    ];

    pub fn is_faulted(self) -> bool {
        self != FaultHypothesis::Unfaulted
    }

    pub fn valid_for(self, topology: LoadTopology) -> bool {
        match topology {
            LoadTopology::SinglePhaseRL => {
                matches!(self, FaultHypothesis::Unfaulted | FaultHypothesis::LineGround(Phase::A))
            }
            _ => true,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            FaultHypothesis::Unfaulted => "unfaulted",
            FaultHypothesis::LineGround(Phase::A) => "lg-a",
            FaultHypothesis::LineGround(Phase::B) => "lg-b",
            FaultHypothesis::LineGround(Phase::C) => "lg-c",
            FaultHypothesis::LineLine(PhasePair::AB) => "ll-ab",
            FaultHypothesis::LineLine(PhasePair::BC) => "ll-bc",
            FaultHypothesis::LineLine(PhasePair::CA) => "ll-ca",
        }
    }
}

impl fmt::Display for FaultHypothesis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for FaultHypothesis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FaultHypothesis::ALL
            .into_iter()
            .find(|h| h.label() == s)
            .ok_or_else(|| Error::Configuration(format!("unknown hypothesis `{s}`")))
    }
}

impl TryFrom<String> for FaultHypothesis {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FaultHypothesis> for String {
    fn from(h: FaultHypothesis) -> String {
        h.label().to_string()
    }
}

/// Estimated unknowns of one hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateVector {
    /// Load conductance `G` (S).
    pub g: f64,
    /// Inverse load inductance `Γ` (1/H).
    pub gamma: f64,
    /// Fault conductance `G_f` (S); `None` for the unfaulted hypothesis.
    pub gf: Option<f64>,
    /// Internal voltage trajectories, named by
    /// [`HypothesisModel::trajectory_names`], each of length `n`.
    pub trajectories: Vec<Vec<f64>>,
}

/// Load and fault parameters in reporting units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LoadParams {
    /// Ohms.
    pub r: f64,
    /// Henries.
    pub l: f64,
    /// Ohms; `None` when the hypothesis has no fault element.
    pub rf: Option<f64>,
}

fn reciprocal(x: f64) -> f64 {
    if x == 0.0 {
        f64::INFINITY
    } else {
        1.0 / x
    }
}

/// Converts conductances to resistances and `Γ` to inductance. Zero maps to
/// `+∞`; non-physical signs are passed through.
pub fn physical_params(x: &StateVector) -> LoadParams {
    LoadParams { r: reciprocal(x.g), l: reciprocal(x.gamma), rf: x.gf.map(reciprocal) }
}

/// Simpson's 1/3 rule over `[t − 2Δt, t]` from samples at `t − 2Δt`,
/// `t − Δt` and `t`.
pub fn simpson_window_integral(f0: f64, f1: f64, f2: f64, dt: f64) -> f64 {
    (2.0 * dt / 6.0) * (f2 + 4.0 * f1 + f0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Factor {
    Unit,
    G,
    Gf,
}

/// `coef · factor · trajectory(k)`
#[derive(Debug, Clone, Copy)]
struct Term {
    coef: f64,
    factor: Factor,
    traj: usize,
}

#[derive(Debug, Clone)]
struct MeasurementRow {
    channel: Channel,
    terms: Vec<Term>,
}

#[derive(Debug, Clone)]
struct InductiveBranch {
    label: String,
    vr: usize,
    vl: usize,
}

/// Linear combination of measured channels.
type ChannelCombo = Vec<(f64, Channel)>;

#[derive(Debug, Clone)]
struct TrajectorySeed {
    share: f64,
    source: ChannelCombo,
}

#[derive(Debug, Clone)]
struct ConductanceSeed {
    currents: Vec<Channel>,
    voltages: Vec<Channel>,
    scale: f64,
}

/// One block of the output vector.
#[derive(Debug, Clone, PartialEq)]
pub enum OutputBlock {
    /// `n` rows reproducing a measured (or derived) channel.
    Measurement { channel: Channel, rows: std::ops::Range<usize> },
    /// `n − 2` zero-target rows for one inductive branch.
    Constraint { branch: String, rows: std::ops::Range<usize> },
}

#[derive(Debug, Clone)]
pub struct HypothesisModel {
    topology: LoadTopology,
    hypothesis: FaultHypothesis,
    n: usize,
    dt: f64,
    trajectory_names: Vec<String>,
    measurements: Vec<MeasurementRow>,
    branches: Vec<InductiveBranch>,
    seeds: Vec<TrajectorySeed>,
    conductance_seed: ConductanceSeed,
}

#[derive(Default)]
struct Builder {
    names: Vec<String>,
    measurements: Vec<MeasurementRow>,
    branches: Vec<InductiveBranch>,
    seeds: Vec<TrajectorySeed>,
}

fn term(coef: f64, factor: Factor, traj: usize) -> Term {
    Term { coef, factor, traj }
}

const PHASE_NAMES: [&str; 3] = ["a", "b", "c"];
const PAIR_NAMES: [&str; 3] = ["ab", "bc", "ca"];

impl Builder {
    fn trajectory(&mut self, name: String, share: f64, source: ChannelCombo) -> usize {
        self.names.push(name);
        self.seeds.push(TrajectorySeed { share, source });
        self.names.len() - 1
    }

    /// Series RL branch whose terminal voltage is seeded from `voltage`.
    fn rl_branch(&mut self, label: &str, voltage: ChannelCombo) -> (usize, usize) {
        let vr = self.trajectory(format!("vr_{label}"), RESISTOR_SHARE, voltage.clone());
        let vl = self.trajectory(format!("vl_{label}"), 1.0 - RESISTOR_SHARE, voltage);
        self.branches.push(InductiveBranch { label: label.to_string(), vr, vl });
        (vr, vl)
    }

    fn fault_voltage(&mut self, voltage: ChannelCombo) -> usize {
        self.trajectory("vf".to_string(), 1.0, voltage)
    }

    fn measure(&mut self, channel: Channel, terms: Vec<Term>) {
        self.measurements.push(MeasurementRow { channel, terms });
    }
}

/// Builds the model for `(topology, hypothesis)` over `n` samples spaced
/// `dt` apart.
///
/// Fails if the pairing is invalid, if `n < 3`, or if `n` is too short for
/// the model to have at least as many outputs as unknowns.
pub fn build_model(topology: LoadTopology, hypothesis: FaultHypothesis, n: usize, dt: f64) -> Result<HypothesisModel> {
    if !hypothesis.valid_for(topology) {
        return Err(Error::Configuration(format!(
            "hypothesis {hypothesis} is not defined for the {topology} topology"
        )));
    }
    if n < 3 {
        return Err(Error::Size(format!("need at least 3 samples, got {n}")));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Configuration(format!("sample period must be positive, got {dt}")));
    }

    use Factor::{Gf, Unit, G};
    let mut b = Builder::default();
    let seed = match (topology, hypothesis) {
        (LoadTopology::SinglePhaseRL, _) => {
            let (vr, vl) = b.rl_branch("a", vec![(1.0, Channel::Va)]);
            b.measure(Channel::Va, vec![term(1.0, Unit, vr), term(1.0, Unit, vl)]);
            let mut current = vec![term(1.0, G, vr)];
            if hypothesis.is_faulted() {
                current.extend([term(1.0, Gf, vr), term(1.0, Gf, vl)]);
            }
            b.measure(Channel::Ia, current);
            // A faulted single-phase record only shows the combined
            // conductance G + G_f; split it in the seeded ratio.
            let scale = if hypothesis.is_faulted() { 1.0 / (1.0 + FAULT_CONDUCTANCE_RATIO) } else { 1.0 };
            ConductanceSeed { currents: vec![Channel::Ia], voltages: vec![Channel::Va], scale }
        }
        (LoadTopology::GroundedWyeRL, FaultHypothesis::Unfaulted) => {
            let branches: Vec<(usize, usize)> =
                (0..3).map(|p| b.rl_branch(PHASE_NAMES[p], vec![(1.0, Channel::voltage(p))])).collect();
            for (p, &(vr, vl)) in branches.iter().enumerate() {
                b.measure(Channel::voltage(p), vec![term(1.0, Unit, vr), term(1.0, Unit, vl)]);
            }
            for (p, &(vr, _)) in branches.iter().enumerate() {
                b.measure(Channel::current(p), vec![term(1.0, G, vr)]);
            }
            ConductanceSeed {
                currents: (0..3).map(Channel::current).collect(),
                voltages: (0..3).map(Channel::voltage).collect(),
                scale: 1.0,
            }
        }
        (LoadTopology::GroundedWyeRL, FaultHypothesis::LineGround(phase)) => {
            let fp = phase.index();
            let vf = b.fault_voltage(vec![(1.0, Channel::voltage(fp))]);
            let mut branches = [None; 3];
            for p in (0..3).filter(|&p| p != fp) {
                branches[p] = Some(b.rl_branch(PHASE_NAMES[p], vec![(1.0, Channel::voltage(p))]));
            }
            for p in 0..3 {
                match branches[p] {
                    Some((vr, vl)) => b.measure(Channel::voltage(p), vec![term(1.0, Unit, vr), term(1.0, Unit, vl)]),
                    None => b.measure(Channel::voltage(p), vec![term(1.0, Unit, vf)]),
                }
            }
            for p in 0..3 {
                match branches[p] {
                    Some((vr, _)) => b.measure(Channel::current(p), vec![term(1.0, G, vr)]),
                    None => b.measure(Channel::current(p), vec![term(1.0, Gf, vf)]),
                }
            }
            let healthy: Vec<usize> = (0..3).filter(|&p| p != fp).collect();
            ConductanceSeed {
                currents: healthy.iter().map(|&p| Channel::current(p)).collect(),
                voltages: healthy.iter().map(|&p| Channel::voltage(p)).collect(),
                scale: 1.0,
            }
        }
        (LoadTopology::GroundedWyeRL, FaultHypothesis::LineLine(pair)) => {
            let (p, q) = pair.phases();
            let r = 3 - p - q;
            let vf = b.fault_voltage(vec![(1.0, Channel::line_line(p))]);
            let (vr, vl) = b.rl_branch(PHASE_NAMES[r], vec![(1.0, Channel::voltage(r))]);
            b.measure(Channel::line_line(p), vec![term(1.0, Unit, vf)]);
            b.measure(Channel::voltage(r), vec![term(1.0, Unit, vr), term(1.0, Unit, vl)]);
            for ph in 0..3 {
                let terms = if ph == p {
                    vec![term(1.0, Gf, vf)]
                } else if ph == q {
                    vec![term(-1.0, Gf, vf)]
                } else {
                    vec![term(1.0, G, vr)]
                };
                b.measure(Channel::current(ph), terms);
            }
            ConductanceSeed { currents: vec![Channel::current(r)], voltages: vec![Channel::voltage(r)], scale: 1.0 }
        }
        (LoadTopology::DeltaRL, FaultHypothesis::Unfaulted) => {
            let branches: Vec<(usize, usize)> =
                (0..3).map(|p| b.rl_branch(PAIR_NAMES[p], vec![(1.0, Channel::line_line(p))])).collect();
            for (p, &(vr, vl)) in branches.iter().enumerate() {
                b.measure(Channel::line_line(p), vec![term(1.0, Unit, vr), term(1.0, Unit, vl)]);
            }
            // Line current into terminal p leaves through branch p and
            // returns through branch p-1.
            for p in 0..3 {
                let out = branches[p].0;
                let back = branches[(p + 2) % 3].0;
                b.measure(Channel::current(p), vec![term(1.0, G, out), term(-1.0, G, back)]);
            }
            ConductanceSeed {
                currents: (0..3).map(Channel::current).collect(),
                voltages: (0..3).map(Channel::line_line).collect(),
                scale: 1.0 / 3f64.sqrt(),
            }
        }
        (LoadTopology::DeltaRL, FaultHypothesis::LineLine(pair)) => {
            // Fault across branch p→q; that branch is replaced by the fault.
            let (p, q) = pair.phases();
            let r = (q + 1) % 3;
            let vf = b.fault_voltage(vec![(1.0, Channel::line_line(p))]);
            let (vr_q, vl_q) = b.rl_branch(PAIR_NAMES[q], vec![(1.0, Channel::line_line(q))]);
            let (vr_r, vl_r) = b.rl_branch(PAIR_NAMES[r], vec![(1.0, Channel::line_line(r))]);
            for ph in 0..3 {
                let terms = if ph == p {
                    vec![term(1.0, Unit, vf)]
                } else if ph == q {
                    vec![term(1.0, Unit, vr_q), term(1.0, Unit, vl_q)]
                } else {
                    vec![term(1.0, Unit, vr_r), term(1.0, Unit, vl_r)]
                };
                b.measure(Channel::line_line(ph), terms);
            }
            for ph in 0..3 {
                let terms = if ph == p {
                    vec![term(1.0, Gf, vf), term(-1.0, G, vr_r)]
                } else if ph == q {
                    vec![term(1.0, G, vr_q), term(-1.0, Gf, vf)]
                } else {
                    vec![term(1.0, G, vr_r), term(-1.0, G, vr_q)]
                };
                b.measure(Channel::current(ph), terms);
            }
            ConductanceSeed {
                currents: vec![Channel::current(r)],
                voltages: vec![Channel::line_line(q), Channel::line_line(r)],
                scale: 1.0 / 3f64.sqrt(),
            }
        }
        (LoadTopology::DeltaRL, FaultHypothesis::LineGround(phase)) => {
            // Terminal p is held near ground by the fault, so the branches
            // p→q and r→p see −v_q and v_r; the line current at p is
            // attributed to the fault element alone.
            let p = phase.index();
            let q = (p + 1) % 3;
            let r = (p + 2) % 3;
            let (vr_pq, vl_pq) = b.rl_branch(PAIR_NAMES[p], vec![(-1.0, Channel::voltage(q))]);
            let (vr_qr, _) = b.rl_branch(PAIR_NAMES[q], vec![(1.0, Channel::line_line(q))]);
            let (vr_rp, vl_rp) = b.rl_branch(PAIR_NAMES[r], vec![(1.0, Channel::voltage(r))]);
            let vf = b.fault_voltage(vec![(1.0, Channel::voltage(p))]);
            for ph in 0..3 {
                let terms = if ph == p {
                    vec![term(1.0, Unit, vf)]
                } else if ph == q {
                    vec![term(-1.0, Unit, vr_pq), term(-1.0, Unit, vl_pq)]
                } else {
                    vec![term(1.0, Unit, vr_rp), term(1.0, Unit, vl_rp)]
                };
                b.measure(Channel::voltage(ph), terms);
            }
            for ph in 0..3 {
                let terms = if ph == p {
                    vec![term(1.0, Gf, vf)]
                } else if ph == q {
                    vec![term(1.0, G, vr_qr), term(-1.0, G, vr_pq)]
                } else {
                    vec![term(1.0, G, vr_rp), term(-1.0, G, vr_qr)]
                };
                b.measure(Channel::current(ph), terms);
            }
            ConductanceSeed {
                currents: vec![Channel::current(q), Channel::current(r)],
                voltages: vec![Channel::line_line(q)],
                scale: 1.0 / 3f64.sqrt(),
            }
        }
    };

    let model = HypothesisModel {
        topology,
        hypothesis,
        n,
        dt,
        trajectory_names: b.names,
        measurements: b.measurements,
        branches: b.branches,
        seeds: b.seeds,
        conductance_seed: seed,
    };
    if model.output_dim() < model.state_dim() {
        return Err(Error::Size(format!(
            "{} {} with n = {n} has {} outputs for {} unknowns",
            topology,
            hypothesis,
            model.output_dim(),
            model.state_dim()
        )));
    }
    Ok(model)
}

/// Smallest record length for which [`build_model`] accepts the pairing.
pub fn min_samples(topology: LoadTopology, hypothesis: FaultHypothesis) -> Result<usize> {
    let probe = build_model(topology, hypothesis, 64, 1.0)?;
    let (p, m, k, c) = (
        probe.param_count(),
        probe.trajectory_count(),
        probe.measurements.len(),
        probe.branches.len(),
    );
    // outputs k·n + c·(n−2) ≥ p + m·n
    Ok((3..64).find(|&n| k * n + c * (n - 2) >= p + m * n).unwrap_or(64))
}

impl HypothesisModel {
    pub fn topology(&self) -> LoadTopology {
        self.topology
    }

    pub fn hypothesis(&self) -> FaultHypothesis {
        self.hypothesis
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn trajectory_names(&self) -> &[String] {
        &self.trajectory_names
    }

    pub fn trajectory_count(&self) -> usize {
        self.trajectory_names.len()
    }

    /// 2 (`G`, `Γ`) or 3 (with `G_f`).
    pub fn param_count(&self) -> usize {
        if self.hypothesis.is_faulted() {
            3
        } else {
            2
        }
    }

    pub fn state_dim(&self) -> usize {
        self.param_count() + self.trajectory_count() * self.n
    }

    pub fn output_dim(&self) -> usize {
        self.measurements.len() * self.n + self.branches.len() * (self.n - 2)
    }

    pub fn output_layout(&self) -> Vec<OutputBlock> {
        let n = self.n;
        let mut blocks: Vec<OutputBlock> = self
            .measurements
            .iter()
            .enumerate()
            .map(|(k, m)| OutputBlock::Measurement { channel: m.channel, rows: k * n..(k + 1) * n })
            .collect();
        let base = self.measurements.len() * n;
        blocks.extend(self.branches.iter().enumerate().map(|(j, br)| OutputBlock::Constraint {
            branch: br.label.clone(),
            rows: base + j * (n - 2)..base + (j + 1) * (n - 2),
        }));
        blocks
    }

    /// Packed column of trajectory `traj` at sample `k`. Parameters occupy
    /// the leading columns (`G`, `Γ`, then `G_f`), followed by trajectories
    /// interleaved sample by sample.
    pub fn column(&self, traj: usize, k: usize) -> usize {
        self.param_count() + k * self.trajectory_count() + traj
    }

    pub fn pack(&self, x: &StateVector) -> Result<Vec<f64>> {
        self.check_state(x)?;
        let mut packed = Vec::with_capacity(self.state_dim());
        packed.push(x.g);
        packed.push(x.gamma);
        if let Some(gf) = x.gf {
            packed.push(gf);
        }
        for k in 0..self.n {
            packed.extend(x.trajectories.iter().map(|t| t[k]));
        }
        Ok(packed)
    }

    pub fn unpack(&self, packed: &[f64]) -> Result<StateVector> {
        if packed.len() != self.state_dim() {
            return Err(Error::Shape(format!(
                "state has {} entries, model expects {}",
                packed.len(),
                self.state_dim()
            )));
        }
        let m = self.trajectory_count();
        let p = self.param_count();
        let trajectories = (0..m).map(|t| (0..self.n).map(|k| packed[p + k * m + t]).collect()).collect();
        Ok(StateVector {
            g: packed[0],
            gamma: packed[1],
            gf: (p == 3).then(|| packed[2]),
            trajectories,
        })
    }

    fn check_state(&self, x: &StateVector) -> Result<()> {
        if x.gf.is_some() != self.hypothesis.is_faulted() {
            return Err(Error::Shape(format!(
                "fault conductance {} for hypothesis {}",
                if x.gf.is_some() { "present" } else { "missing" },
                self.hypothesis
            )));
        }
        if x.trajectories.len() != self.trajectory_count() || x.trajectories.iter().any(|t| t.len() != self.n) {
            return Err(Error::Shape(format!(
                "expected {} trajectories of length {}",
                self.trajectory_count(),
                self.n
            )));
        }
        Ok(())
    }

    /// State with every trajectory from `lookup(name)`; used to plug known
    /// internal voltages into the model.
    pub fn state_from_trajectories<F>(&self, g: f64, gamma: f64, gf: Option<f64>, mut lookup: F) -> Result<StateVector>
    where
        F: FnMut(&str) -> Option<Vec<f64>>,
    {
        let trajectories = self
            .trajectory_names
            .iter()
            .map(|name| lookup(name).ok_or_else(|| Error::Shape(format!("no trajectory named `{name}`"))))
            .collect::<Result<Vec<_>>>()?;
        let x = StateVector { g, gamma, gf: if self.hypothesis.is_faulted() { gf.or(Some(0.0)) } else { None }, trajectories };
        self.check_state(&x)?;
        Ok(x)
    }

    /// Measurement vector `y` assembled from `ws`; constraint rows are zero.
    pub fn measurement_vector(&self, ws: &WaveformSet) -> Result<Vec<f64>> {
        if ws.n() != self.n {
            return Err(Error::Shape(format!("waveform has {} samples, model expects {}", ws.n(), self.n)));
        }
        let mut y = Vec::with_capacity(self.output_dim());
        for m in &self.measurements {
            y.extend_from_slice(&ws.channel(m.channel));
        }
        y.resize(self.output_dim(), 0.0);
        Ok(y)
    }

    fn factor_value(factor: Factor, g: f64, gf: f64) -> f64 {
        match factor {
            Factor::Unit => 1.0,
            Factor::G => g,
            Factor::Gf => gf,
        }
    }

    /// `h(x)` on the packed state.
    pub fn h_packed(&self, x: &[f64]) -> Vec<f64> {
        self.h_packed_in(x)
    }

    /// `h(x)` in any float type. Used by tests to evaluate `h` in extended
    /// precision; the model coefficients themselves stay `f64`.
    pub fn h_packed_in<T: Float + From<f64>>(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.state_dim());
        let n = self.n;
        let m = self.trajectory_count();
        let p = self.param_count();
        let (g, gamma) = (x[0], x[1]);
        let gf = if p == 3 { x[2] } else { T::zero() };
        let at = |t: usize, k: usize| x[p + k * m + t];
        let c = <T as From<f64>>::from(2.0 * self.dt / 6.0);
        let four = <T as From<f64>>::from(4.0);

        let mut out = Vec::with_capacity(self.output_dim());
        for row in &self.measurements {
            for k in 0..n {
                out.push(row.terms.iter().fold(T::zero(), |acc, t| {
                    let f = match t.factor {
                        Factor::Unit => T::one(),
                        Factor::G => g,
                        Factor::Gf => gf,
                    };
                    acc + <T as From<f64>>::from(t.coef) * f * at(t.traj, k)
                }));
            }
        }
        for br in &self.branches {
            for k in 2..n {
                let simpson = at(br.vl, k) + four * at(br.vl, k - 1) + at(br.vl, k - 2);
                out.push(g * (at(br.vr, k) - at(br.vr, k - 2)) - c * gamma * simpson);
            }
        }
        out
    }

    /// Analytic `∂h/∂x` on the packed state.
    pub fn jacobian_packed(&self, x: &[f64]) -> Jacobian {
        debug_assert_eq!(x.len(), self.state_dim());
        let n = self.n;
        let m = self.trajectory_count();
        let p = self.param_count();
        let (g, gamma) = (x[0], x[1]);
        let gf = if p == 3 { x[2] } else { 0.0 };
        let col = |t: usize, k: usize| p + k * m + t;
        let c = 2.0 * self.dt / 6.0;

        let mut jac = Jacobian::new(self.state_dim(), p);
        let mut entries: Vec<(usize, f64)> = Vec::with_capacity(8);
        for row in &self.measurements {
            for k in 0..n {
                entries.clear();
                for t in &row.terms {
                    let v = x[col(t.traj, k)];
                    entries.push((col(t.traj, k), t.coef * Self::factor_value(t.factor, g, gf)));
                    match t.factor {
                        Factor::Unit => {}
                        Factor::G => entries.push((0, t.coef * v)),
                        Factor::Gf => entries.push((2, t.coef * v)),
                    }
                }
                jac.push_row(&mut entries);
            }
        }
        for br in &self.branches {
            for k in 2..n {
                let vl = |j: usize| x[col(br.vl, j)];
                let simpson = vl(k) + 4.0 * vl(k - 1) + vl(k - 2);
                entries.clear();
                entries.push((0, x[col(br.vr, k)] - x[col(br.vr, k - 2)]));
                entries.push((1, -c * simpson));
                entries.push((col(br.vr, k), g));
                entries.push((col(br.vr, k - 2), -g));
                entries.push((col(br.vl, k), -c * gamma));
                entries.push((col(br.vl, k - 1), -4.0 * c * gamma));
                entries.push((col(br.vl, k - 2), -c * gamma));
                jac.push_row(&mut entries);
            }
        }
        jac
    }

    /// Deterministic starting point for the estimator.
    ///
    /// `G₀` is the RMS current over RMS voltage of the channels feeding load
    /// branches (scaled by `1/√3` for delta branches), `Γ₀ = ω₀·G₀` and
    /// `G_f0 = 100·G₀`. Branch voltages are split 90/10 between resistor and
    /// inductor; fault voltages start at the measured fault-point voltage.
    pub fn initial_state(&self, ws: &WaveformSet) -> Result<StateVector> {
        if ws.n() != self.n {
            return Err(Error::Shape(format!("waveform has {} samples, model expects {}", ws.n(), self.n)));
        }
        let rms = |chans: &[Channel]| -> f64 {
            let (sum, count) = chans.iter().fold((0.0, 0usize), |(s, c), ch| {
                let data = ws.channel(*ch);
                (s + data.iter().map(|x| x * x).sum::<f64>(), c + data.len())
            });
            (sum / count as f64).sqrt()
        };
        let seed = &self.conductance_seed;
        let i_rms = rms(&seed.currents);
        let v_rms = rms(&seed.voltages);
        if !(i_rms > 0.0) || !(v_rms > 0.0) || !(i_rms / v_rms).is_finite() {
            return Err(Error::DegenerateInput(format!(
                "load channels carry no signal (I_rms = {i_rms}, V_rms = {v_rms})"
            )));
        }
        let g0 = seed.scale * i_rms / v_rms;

        let trajectories = self
            .seeds
            .iter()
            .map(|s| {
                let mut out = vec![0.0; self.n];
                for (coef, ch) in &s.source {
                    for (o, v) in out.iter_mut().zip(ws.channel(*ch).iter()) {
                        *o += s.share * coef * v;
                    }
                }
                out
            })
            .collect();

        Ok(StateVector {
            g: g0,
            gamma: NOMINAL_OMEGA * g0,
            gf: self.hypothesis.is_faulted().then_some(FAULT_CONDUCTANCE_RATIO * g0),
            trajectories,
        })
    }
}

pub fn model_h(model: &HypothesisModel, x: &StateVector) -> Result<Vec<f64>> {
    Ok(model.h_packed(&model.pack(x)?))
}

pub fn model_jacobian(model: &HypothesisModel, x: &StateVector) -> Result<Jacobian> {
    Ok(model.jacobian_packed(&model.pack(x)?))
}

pub fn initial_state(model: &HypothesisModel, ws: &WaveformSet) -> Result<StateVector> {
    model.initial_state(ws)
}

/// Every valid `(topology, hypothesis)` pair in bank order.
pub fn all_pairs() -> Vec<(LoadTopology, FaultHypothesis)> {
    LoadTopology::ALL.into_iter().flat_map(|t| t.hypotheses().into_iter().map(move |h| (t, h))).collect()
}
