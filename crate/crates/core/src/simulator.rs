//! Two-bus microgrid simulator with per-phase hysteresis current limiting.
//!
//! The source is an ideal three-phase voltage source behind a series
//! `R_s + L_s` branch per phase, feeding an RL load bus. Each load branch is
//! an inductor-current state. The optional fault is a pure conductance from
//! the fault instant on, so it adds no state.
//!
//! Bus voltages are algebraic. Along the fault incidence direction `w` they
//! follow from instantaneous KCL, `wᵀ(i_s − A·i_L) = G_f·|w|²·wᵀv`; along
//! directions orthogonal to `w` (all directions before the fault) the time
//! derivative of KCL is used, which is affine in `v` because every other
//! branch is inductive.
//!
//! A phase in current-limiting mode replaces its source voltage with a
//! tracking law `di_s/dt = di_ref/dt + (i_ref − i_s)/τ_c` toward
//! `i_ref = i_limit·sin(ωt + φ)`, so its current is continuous across mode
//! changes.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{FaultHypothesis, LoadTopology};
use crate::waveform::{self, WaveformSet};

/// Time constant of the current-mode tracking loop.
pub const CURRENT_LOOP_TAU: f64 = 5e-5;

/// Any state beyond this magnitude is treated as a numerical blow-up.
pub const DIVERGENCE_BOUND: f64 = 1e9;

fn default_v_source() -> f64 {
    120.0
}
fn default_f0() -> f64 {
    60.0
}
fn default_source_r() -> f64 {
    0.05
}
fn default_source_l() -> f64 {
    1e-4
}
fn default_release() -> f64 {
    0.9
}
fn default_t_fault() -> f64 {
    0.25
}
fn default_t_end() -> f64 {
    0.5
}
fn default_dt_sim() -> f64 {
    1e-6
}
fn default_dt_out() -> f64 {
    1e-4
}
fn default_analysis_start() -> f64 {
    0.3
}
fn default_hypothesis() -> FaultHypothesis {
    FaultHypothesis::Unfaulted
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub topology: LoadTopology,
    /// Ohms per load branch.
    pub r_load: f64,
    /// Henries per load branch.
    pub l_load: f64,
    #[serde(default = "default_hypothesis")]
    pub hypothesis: FaultHypothesis,
    /// Ohms; required for faulted hypotheses.
    #[serde(default)]
    pub r_fault: Option<f64>,
    /// Line-neutral RMS volts.
    #[serde(default = "default_v_source")]
    pub v_source_rms: f64,
    #[serde(default = "default_f0")]
    pub f0: f64,
    #[serde(default = "default_source_r")]
    pub source_r: f64,
    #[serde(default = "default_source_l")]
    pub source_l: f64,
    /// Peak amperes per phase; defaults to twice the rated peak line current.
    #[serde(default)]
    pub i_limit: Option<f64>,
    #[serde(default = "default_release")]
    pub hysteresis_release: f64,
    #[serde(default = "default_t_fault")]
    pub t_fault: f64,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default = "default_dt_sim")]
    pub dt_sim: f64,
    #[serde(default = "default_dt_out")]
    pub dt_out: f64,
    #[serde(default = "default_analysis_start")]
    pub analysis_start: f64,
}

impl Scenario {
    /// Scenario with every optional field at its default.
    pub fn new(topology: LoadTopology, r_load: f64, l_load: f64) -> Self {
        Self {
            topology,
            r_load,
            l_load,
            hypothesis: default_hypothesis(),
            r_fault: None,
            v_source_rms: default_v_source(),
            f0: default_f0(),
            source_r: default_source_r(),
            source_l: default_source_l(),
            i_limit: None,
            hysteresis_release: default_release(),
            t_fault: default_t_fault(),
            t_end: default_t_end(),
            dt_sim: default_dt_sim(),
            dt_out: default_dt_out(),
            analysis_start: default_analysis_start(),
        }
    }

    pub fn with_fault(mut self, hypothesis: FaultHypothesis, r_fault: f64) -> Self {
        self.hypothesis = hypothesis;
        self.r_fault = hypothesis.is_faulted().then_some(r_fault);
        self
    }

    pub fn omega(&self) -> f64 {
        2.0 * PI * self.f0
    }

    /// Peak steady-state line current drawn by the load at rated voltage,
    /// ignoring the source impedance.
    pub fn rated_peak_current(&self) -> f64 {
        let z = self.r_load.hypot(self.omega() * self.l_load);
        let lines = if self.topology == LoadTopology::DeltaRL { 3.0 } else { 1.0 };
        lines * 2f64.sqrt() * self.v_source_rms / z
    }

    /// Effective limit; a zero default (dead source) disables limiting.
    pub fn effective_i_limit(&self) -> f64 {
        match self.i_limit {
            Some(v) => v,
            None => {
                let v = 2.0 * self.rated_peak_current();
                if v > 0.0 {
                    v
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    pub fn output_ratio(&self) -> usize {
        (self.dt_out / self.dt_sim).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(msg));
        if !self.hypothesis.valid_for(self.topology) {
            return Err(Error::Configuration(format!(
                "hypothesis {} is not defined for the {} topology",
                self.hypothesis, self.topology
            )));
        }
        let finite = [
            ("r_load", self.r_load),
            ("l_load", self.l_load),
            ("v_source_rms", self.v_source_rms),
            ("f0", self.f0),
            ("source_r", self.source_r),
            ("source_l", self.source_l),
            ("hysteresis_release", self.hysteresis_release),
            ("t_fault", self.t_fault),
            ("t_end", self.t_end),
            ("dt_sim", self.dt_sim),
            ("dt_out", self.dt_out),
            ("analysis_start", self.analysis_start),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return fail(format!("{name} must be finite"));
            }
        }
        if self.r_load < 0.0 || self.source_r < 0.0 {
            return fail("resistances must be non-negative".into());
        }
        if !(self.l_load > 0.0) {
            return fail(format!("l_load must be positive, got {}", self.l_load));
        }
        if !(self.source_l > 0.0) {
            return fail(format!("source_l must be positive, got {}", self.source_l));
        }
        if self.v_source_rms < 0.0 {
            return fail("v_source_rms must be non-negative".into());
        }
        if !(self.f0 > 0.0) {
            return fail("f0 must be positive".into());
        }
        match (self.hypothesis.is_faulted(), self.r_fault) {
            (true, None) => return fail(format!("{} needs r_fault", self.hypothesis)),
            (true, Some(r)) if !(r > 0.0) || !r.is_finite() => {
                return fail(format!("r_fault must be positive, got {r}"))
            }
            _ => {}
        }
        if let Some(i) = self.i_limit {
            if !(i > 0.0) {
                return fail(format!("i_limit must be positive, got {i}"));
            }
        }
        if !(self.hysteresis_release > 0.0 && self.hysteresis_release <= 1.0) {
            return fail("hysteresis_release must lie in (0, 1]".into());
        }
        if !(self.dt_sim > 0.0) || !(self.dt_out > 0.0) {
            return fail("time steps must be positive".into());
        }
        if self.dt_sim > self.dt_out {
            return fail(format!("dt_sim {} exceeds dt_out {}", self.dt_sim, self.dt_out));
        }
        let ratio = self.dt_out / self.dt_sim;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return fail(format!("dt_out / dt_sim = {ratio} is not an integer"));
        }
        if !(self.t_fault < self.analysis_start && self.analysis_start < self.t_end) {
            return fail(format!(
                "need t_fault < analysis_start < t_end, got {} / {} / {}",
                self.t_fault, self.analysis_start, self.t_end
            ));
        }
        if self.t_fault < 0.0 {
            return fail("t_fault must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceMode {
    Voltage,
    CurrentLimited,
}

/// Load branch endpoints; `None` is ground.
#[derive(Debug, Clone, Copy)]
struct Branch {
    from: usize,
    to: Option<usize>,
}

/// State-space form of a scenario.
///
/// State layout: source currents of the active phases, then load branch
/// currents.
#[derive(Debug, Clone)]
pub struct CircuitODE {
    phases: usize,
    branches: Vec<Branch>,
    branch_labels: Vec<&'static str>,
    /// `|w|²·G_f` and `w`; `None` for unfaulted scenarios.
    fault: Option<(Vector3<f64>, f64)>,
    /// Orthonormal basis of `w⊥` restricted to active buses.
    derivative_rows: Vec<Vector3<f64>>,
    /// Unit rows of the active buses, used before the fault is applied.
    prefault_rows: Vec<Vector3<f64>>,
    /// `A·Aᵀ` of the load incidence matrix.
    aat: Matrix3<f64>,
    r_load: f64,
    l_load: f64,
    source_r: f64,
    source_l: f64,
    amplitude: f64,
    omega: f64,
    phase_angle: [f64; 3],
    i_limit: f64,
}

pub fn build_circuit(s: &Scenario) -> Result<CircuitODE> {
    s.validate()?;
    let (phases, branches, labels): (usize, Vec<Branch>, Vec<&'static str>) = match s.topology {
        LoadTopology::SinglePhaseRL => (1, vec![Branch { from: 0, to: None }], vec!["a"]),
        LoadTopology::GroundedWyeRL => {
            (3, (0..3).map(|p| Branch { from: p, to: None }).collect(), vec!["a", "b", "c"])
        }
        LoadTopology::DeltaRL => {
            (3, (0..3).map(|p| Branch { from: p, to: Some((p + 1) % 3) }).collect(), vec!["ab", "bc", "ca"])
        }
    };
    let e = |i: usize| Vector3::from_fn(|r, _| if r == i { 1.0 } else { 0.0 });
    let (fault, derivative_rows) = match s.hypothesis {
        FaultHypothesis::Unfaulted => (None, (0..phases).map(e).collect()),
        FaultHypothesis::LineGround(p) => {
            let p = p.index();
            let g = 1.0 / s.r_fault.unwrap_or(f64::INFINITY);
            (Some((e(p), g)), (0..phases).filter(|&q| q != p).map(e).collect())
        }
        FaultHypothesis::LineLine(pair) => {
            let (p, q) = pair.phases();
            let r = 3 - p - q;
            let g = 1.0 / s.r_fault.unwrap_or(f64::INFINITY);
            (Some((e(p) - e(q), 2.0 * g)), vec![(e(p) + e(q)) / 2f64.sqrt(), e(r)])
        }
    };
    let mut aat = Matrix3::zeros();
    for br in &branches {
        let mut col = Vector3::zeros();
        col[br.from] = 1.0;
        if let Some(q) = br.to {
            col[q] = -1.0;
        }
        aat += col * col.transpose();
    }
    Ok(CircuitODE {
        phases,
        prefault_rows: (0..phases).map(e).collect(),
        aat,
        branches,
        branch_labels: labels,
        fault,
        derivative_rows,
        r_load: s.r_load,
        l_load: s.l_load,
        source_r: s.source_r,
        source_l: s.source_l,
        amplitude: 2f64.sqrt() * s.v_source_rms,
        omega: s.omega(),
        phase_angle: [0.0, -2.0 * PI / 3.0, 2.0 * PI / 3.0],
        i_limit: s.effective_i_limit(),
    })
}

impl CircuitODE {
    pub fn state_dim(&self) -> usize {
        self.phases + self.branches.len()
    }

    pub fn phases(&self) -> usize {
        self.phases
    }

    pub fn branch_labels(&self) -> &[&'static str] {
        &self.branch_labels
    }

    pub fn has_fault_element(&self) -> bool {
        self.fault.is_some()
    }

    fn source_emf(&self, p: usize, t: f64) -> f64 {
        self.amplitude * (self.omega * t + self.phase_angle[p]).sin()
    }

    fn branch_voltage(&self, b: usize, v: &Vector3<f64>) -> f64 {
        let br = self.branches[b];
        v[br.from] - br.to.map_or(0.0, |q| v[q])
    }

    /// `A·i_L`: net load current drawn from each bus.
    fn load_injection(&self, i_load: &[f64]) -> Vector3<f64> {
        let mut out = Vector3::zeros();
        for (br, &i) in self.branches.iter().zip(i_load) {
            out[br.from] += i;
            if let Some(q) = br.to {
                out[q] -= i;
            }
        }
        out
    }

    /// Source current derivative split as `a + d ∘ v`.
    fn source_law(&self, p: usize, t: f64, i_s: f64, mode: SourceMode) -> (f64, f64) {
        match mode {
            SourceMode::Voltage => ((self.source_emf(p, t) - self.source_r * i_s) / self.source_l, -1.0 / self.source_l),
            SourceMode::CurrentLimited => {
                let arg = self.omega * t + self.phase_angle[p];
                let i_ref = self.i_limit * arg.sin();
                let di_ref = self.i_limit * self.omega * arg.cos();
                (di_ref + (i_ref - i_s) / CURRENT_LOOP_TAU, 0.0)
            }
        }
    }

    /// Bus voltages for the given state; inactive buses are zero.
    pub fn bus_voltages(&self, t: f64, x: &[f64], modes: &[SourceMode; 3], fault_on: bool) -> Option<Vector3<f64>> {
        let (i_s, i_load) = x.split_at(self.phases);
        let mut a = Vector3::zeros();
        let mut d = Vector3::zeros();
        for p in 0..self.phases {
            (a[p], d[p]) = self.source_law(p, t, i_s[p], modes[p]);
        }
        // d/dt(A·i_L) = (A·Aᵀ·v − R·A·i_L)/L
        let inj = self.load_injection(i_load);
        let coupling = Matrix3::from_diagonal(&d) - self.aat / self.l_load;
        let affine = -a - inj * (self.r_load / self.l_load);

        let mut m = Matrix3::zeros();
        let mut rhs = Vector3::zeros();
        let mut row = 0;
        let derivative_rows = if fault_on { &self.derivative_rows } else { &self.prefault_rows };
        for u in derivative_rows {
            m.set_row(row, &(u.transpose() * coupling));
            rhs[row] = u.dot(&affine);
            row += 1;
        }
        if fault_on {
            if let Some((w, g)) = &self.fault {
                let src = Vector3::from_fn(|r, _| if r < self.phases { i_s[r] } else { 0.0 });
                m.set_row(row, &(w.transpose() * *g));
                rhs[row] = w.dot(&(src - inj));
                row += 1;
            }
        }
        for i in self.phases..3 {
            m[(row, i)] = 1.0;
            row += 1;
        }
        debug_assert_eq!(row, 3);
        m.lu().solve(&rhs)
    }

    /// `dx/dt`; `None` when the bus voltages are undetermined.
    pub fn derivative(&self, t: f64, x: &[f64], modes: &[SourceMode; 3], fault_on: bool, dx: &mut [f64]) -> Option<()> {
        let v = self.bus_voltages(t, x, modes, fault_on)?;
        let (i_s, i_load) = x.split_at(self.phases);
        for p in 0..self.phases {
            let (a, d) = self.source_law(p, t, i_s[p], modes[p]);
            dx[p] = a + d * v[p];
        }
        for (b, &i) in i_load.iter().enumerate() {
            dx[self.phases + b] = (self.branch_voltage(b, &v) - self.r_load * i) / self.l_load;
        }
        Some(())
    }
}

/// Internal quantities of a simulation at the output instants.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub time: Vec<f64>,
    /// Named series: `vr_<branch>`, `vl_<branch>`, `vf` (faulted only),
    /// then `is_<phase>`, `il_<branch>`, `i_f` (faulted only).
    pub columns: Vec<(String, Vec<f64>)>,
    /// Per-phase current-limiting flag at each output instant.
    pub limited: Vec<[bool; 3]>,
}

impl GroundTruth {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    /// Restriction to `[t_start, t_end]` using the same bounds as
    /// [`waveform::window`].
    pub fn window(&self, t_start: f64, t_end: f64, dt: f64) -> GroundTruth {
        let slack = 1e-6 * dt;
        let keep: Vec<usize> =
            (0..self.time.len()).filter(|&k| self.time[k] >= t_start - slack && self.time[k] <= t_end + slack).collect();
        GroundTruth {
            time: keep.iter().map(|&k| self.time[k]).collect(),
            columns: self.columns.iter().map(|(n, v)| (n.clone(), keep.iter().map(|&k| v[k]).collect())).collect(),
            limited: keep.iter().map(|&k| self.limited[k]).collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W, phases: usize) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["time".to_string()];
        header.extend(self.columns.iter().map(|(n, _)| n.clone()));
        header.extend((0..phases).map(|p| format!("limited_{}", ["a", "b", "c"][p])));
        w.write_record(&header)?;
        for k in 0..self.time.len() {
            let mut rec = vec![format!("{}", self.time[k])];
            rec.extend(self.columns.iter().map(|(_, v)| format!("{}", v[k])));
            rec.extend((0..phases).map(|p| if self.limited[k][p] { "1" } else { "0" }.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub scenario: Scenario,
    pub waveform: WaveformSet,
    pub truth: GroundTruth,
}

impl SimulationOutput {
    /// Waveform restricted to `[analysis_start, t_end]`.
    pub fn analysis_window(&self) -> Result<WaveformSet> {
        waveform::window(&self.waveform, self.scenario.analysis_start, self.scenario.t_end)
    }

    pub fn analysis_truth(&self) -> GroundTruth {
        self.truth.window(self.scenario.analysis_start, self.scenario.t_end, self.scenario.dt_out)
    }
}

struct Recorder {
    time: Vec<f64>,
    v: [Vec<f64>; 3],
    i: [Vec<f64>; 3],
    vr: Vec<Vec<f64>>,
    vl: Vec<Vec<f64>>,
    il: Vec<Vec<f64>>,
    vf: Vec<f64>,
    i_f: Vec<f64>,
    limited: Vec<[bool; 3]>,
}

/// Mode-switch bookkeeping for one phase in current-limiting mode.
#[derive(Debug, Clone, Copy, Default)]
struct HalfCycle {
    start_step: usize,
    max_i: f64,
    max_v: f64,
}

/// Stage buffers for one classical RK4 step.
struct Rk4Work {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl Rk4Work {
    fn new(dim: usize) -> Self {
        Self { k: std::array::from_fn(|_| vec![0.0; dim]), tmp: vec![0.0; dim] }
    }

    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        ode: &CircuitODE,
        t: f64,
        h: f64,
        x: &[f64],
        modes: &[SourceMode; 3],
        fault_on: bool,
        out: &mut [f64],
    ) -> Option<()> {
        let [k1, k2, k3, k4] = &mut self.k;
        let tmp = &mut self.tmp;
        ode.derivative(t, x, modes, fault_on, k1)?;
        for j in 0..x.len() {
            tmp[j] = x[j] + 0.5 * h * k1[j];
        }
        ode.derivative(t + 0.5 * h, tmp, modes, fault_on, k2)?;
        for j in 0..x.len() {
            tmp[j] = x[j] + 0.5 * h * k2[j];
        }
        ode.derivative(t + 0.5 * h, tmp, modes, fault_on, k3)?;
        for j in 0..x.len() {
            tmp[j] = x[j] + h * k3[j];
        }
        ode.derivative(t + h, tmp, modes, fault_on, k4)?;
        for j in 0..x.len() {
            out[j] = x[j] + h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        Some(())
    }
}

/// Integrates the scenario with fixed-step RK4 from a de-energized start.
pub fn simulate(s: &Scenario) -> Result<SimulationOutput> {
    let ode = build_circuit(s)?;
    let dim = ode.state_dim();
    let nb = ode.branches.len();
    let ratio = s.output_ratio();
    let n_steps = (s.t_end / s.dt_sim).round() as usize;
    let n_out = n_steps / ratio + 1;
    let fault_step = if s.hypothesis.is_faulted() {
        (s.t_fault / s.dt_sim - 1e-9).ceil().max(0.0) as usize
    } else {
        usize::MAX
    };
    let half_cycle_steps = ((0.5 / s.f0) / s.dt_sim).round().max(1.0) as usize;
    let release = s.hysteresis_release * ode.i_limit;

    let mut rec = Recorder {
        time: Vec::with_capacity(n_out),
        v: Default::default(),
        i: Default::default(),
        vr: vec![Vec::with_capacity(n_out); nb],
        vl: vec![Vec::with_capacity(n_out); nb],
        il: vec![Vec::with_capacity(n_out); nb],
        vf: Vec::with_capacity(n_out),
        i_f: Vec::with_capacity(n_out),
        limited: Vec::with_capacity(n_out),
    };

    let mut x = vec![0.0; dim];
    let mut modes = [SourceMode::Voltage; 3];
    let mut windows = [HalfCycle::default(); 3];
    let mut work = Rk4Work::new(dim);
    let mut next = vec![0.0; dim];
    let singular = |step: usize| Error::Divergence { step, time: step as f64 * s.dt_sim };
    let h = s.dt_sim;

    for step in 0..=n_steps {
        let t = step as f64 * s.dt_sim;
        let fault_on = step >= fault_step;

        // Mode changes take effect at step boundaries.
        if modes.contains(&SourceMode::CurrentLimited) {
            let v_now = ode.bus_voltages(t, &x, &modes, fault_on).ok_or_else(|| singular(step))?;
            for p in 0..ode.phases {
                if modes[p] != SourceMode::CurrentLimited {
                    continue;
                }
                let w = &mut windows[p];
                w.max_i = w.max_i.max(x[p].abs());
                w.max_v = w.max_v.max(v_now[p].abs());
                if step - w.start_step >= half_cycle_steps {
                    // Current the voltage source would drive into the
                    // impedance seen over the last half cycle.
                    let commanded = if w.max_v > 0.0 { w.max_i * ode.amplitude / w.max_v } else { f64::INFINITY };
                    if commanded < release {
                        modes[p] = SourceMode::Voltage;
                    } else {
                        *w = HalfCycle { start_step: step, max_i: 0.0, max_v: 0.0 };
                    }
                }
            }
        }
        let mut stepped = false;
        if step < n_steps {
            // A phase whose step would carry it past the limit switches at
            // this boundary, and the step is retaken.
            loop {
                work.step(&ode, t, h, &x, &modes, fault_on, &mut next).ok_or_else(|| singular(step))?;
                let mut switched = false;
                for p in 0..ode.phases {
                    if modes[p] == SourceMode::Voltage && (next[p].abs() > ode.i_limit || x[p].abs() > ode.i_limit) {
                        modes[p] = SourceMode::CurrentLimited;
                        windows[p] = HalfCycle { start_step: step, max_i: 0.0, max_v: 0.0 };
                        switched = true;
                    }
                }
                if !switched {
                    break;
                }
            }
            stepped = true;
        }

        if step % ratio == 0 {
            let v = ode.bus_voltages(t, &x, &modes, fault_on).ok_or_else(|| singular(step))?;
            rec.time.push(t);
            for p in 0..3 {
                rec.v[p].push(v[p]);
                rec.i[p].push(if p < ode.phases { x[p] } else { 0.0 });
            }
            for b in 0..nb {
                let il = x[ode.phases + b];
                let vr = s.r_load * il;
                rec.il[b].push(il);
                rec.vr[b].push(vr);
                rec.vl[b].push(ode.branch_voltage(b, &v) - vr);
            }
            if let Some((w, g)) = &ode.fault {
                let vf = w.dot(&v);
                rec.vf.push(vf);
                rec.i_f.push(if fault_on { g / w.norm_squared() * vf } else { 0.0 });
            }
            rec.limited.push(std::array::from_fn(|p| modes[p] == SourceMode::CurrentLimited));
        }
        if !stepped {
            break;
        }
        std::mem::swap(&mut x, &mut next);
        if x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND) {
            return Err(Error::Divergence { step: step + 1, time: (step + 1) as f64 * h });
        }
    }

    let waveform = WaveformSet::new(0.0, s.dt_out, rec.v, rec.i)?;
    let mut columns = Vec::new();
    for (b, label) in ode.branch_labels.iter().enumerate() {
        columns.push((format!("vr_{label}"), std::mem::take(&mut rec.vr[b])));
        columns.push((format!("vl_{label}"), std::mem::take(&mut rec.vl[b])));
    }
    if ode.fault.is_some() {
        columns.push(("vf".to_string(), rec.vf));
    }
    for p in 0..ode.phases {
        columns.push((format!("is_{}", ["a", "b", "c"][p]), waveform.currents()[p].clone()));
    }
    for (b, label) in ode.branch_labels.iter().enumerate() {
        columns.push((format!("il_{label}"), std::mem::take(&mut rec.il[b])));
    }
    if ode.fault.is_some() {
        columns.push(("i_f".to_string(), rec.i_f));
    }
    Ok(SimulationOutput {
        scenario: s.clone(),
        waveform,
        truth: GroundTruth { time: rec.time, columns, limited: rec.limited },
    })
}

/// Steady-state RMS phase current of an unfaulted wye or single-phase
/// scenario from phasor analysis, including the source impedance.
pub fn phasor_rms_current(s: &Scenario) -> f64 {
    let w = s.omega();
    let r = s.r_load + s.source_r;
    let x = w * (s.l_load + s.source_l);
    s.v_source_rms / r.hypot(x)
}
