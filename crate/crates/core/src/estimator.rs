//! Damped Gauss-Newton solver for a single hypothesis model.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{Jacobian, NormalEquations};
use crate::models::{physical_params, HypothesisModel, LoadParams, StateVector};
use crate::waveform::WaveformSet;

/// Retries with a larger damping before an iteration is declared stalled.
pub const MAX_ESCALATIONS: usize = 8;

/// Relative residual `‖ε‖/‖y‖` below which a stalled run counts as an exact fit.
const EXACT_FIT_RATIO: f64 = 1e-12;

/// Damping seed, relative to the smallest non-zero normal-matrix diagonal,
/// used when the configured initial damping is zero.
const DAMPING_SEED: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Threshold on `|J_i − J_{i−1}|`.
    pub cost_delta_tol: f64,
    /// `λ` at the start of every iteration; 0 is plain Gauss-Newton.
    pub initial_damping: f64,
    pub damping_growth: f64,
    /// Added to `εᵀε` inside the logarithm.
    pub cost_floor: f64,
    /// Scale Jacobian columns to unit norm before forming the normal equations.
    pub column_scaling: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            cost_delta_tol: 1e-6,
            initial_damping: 0.0,
            damping_growth: 10.0,
            cost_floor: 1e-30,
            column_scaling: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::Configuration("max_iterations must be at least 1".into()));
        }
        if !(self.cost_delta_tol > 0.0) {
            return Err(Error::Configuration(format!("cost_delta_tol must be positive, got {}", self.cost_delta_tol)));
        }
        if !(self.initial_damping >= 0.0) || !self.initial_damping.is_finite() {
            return Err(Error::Configuration(format!("initial_damping must be >= 0, got {}", self.initial_damping)));
        }
        if !(self.damping_growth > 1.0) || !self.damping_growth.is_finite() {
            return Err(Error::Configuration(format!("damping_growth must exceed 1, got {}", self.damping_growth)));
        }
        if !(self.cost_floor > 0.0) || !self.cost_floor.is_finite() {
            return Err(Error::Configuration(format!("cost_floor must be positive, got {}", self.cost_floor)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// `|ΔJ|` fell below the tolerance.
    CostConverged,
    /// No step reduced the cost, but the residual is already at round-off.
    ExactFit,
    MaxIterations,
    /// No step reduced the cost within the allowed damping escalations.
    Stalled,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimationResult {
    pub x_hat: StateVector,
    pub params: LoadParams,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
    /// Cost after each iteration.
    pub cost_trace: Vec<f64>,
    pub residual_norm: f64,
}

/// `ε = y − h(x)`.
pub fn residual(y: &[f64], h_x: &[f64]) -> Result<Vec<f64>> {
    if y.len() != h_x.len() {
        return Err(Error::Shape(format!("measurement has {} rows, model output has {}", y.len(), h_x.len())));
    }
    Ok(y.iter().zip(h_x).map(|(a, b)| a - b).collect())
}

/// `J = ln(εᵀε + floor)`.
pub fn cost(eps: &[f64], floor: f64) -> f64 {
    (eps.iter().map(|e| e * e).sum::<f64>() + floor).ln()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|e| e * e).sum::<f64>().sqrt()
}

/// Solves `(HᵀH + λI) Δx = Hᵀε`.
pub fn gauss_newton_step(h: &Jacobian, eps: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if eps.len() != h.rows() {
        return Err(Error::Shape(format!("residual has {} rows, Jacobian has {}", eps.len(), h.rows())));
    }
    let mut ne = NormalEquations::assemble(h);
    if lambda != 0.0 {
        ne.add_to_diagonal(lambda);
    }
    ne.solve(&h.tmul_vec(eps))
}

/// Runs the solver from the model's deterministic initial state.
pub fn estimate(model: &HypothesisModel, ws: &WaveformSet, cfg: &SolverConfig) -> Result<EstimationResult> {
    if ws.n() != model.n() {
        return Err(Error::Shape(format!("waveform has {} samples, model expects {}", ws.n(), model.n())));
    }
    if (ws.dt() - model.dt()).abs() > 1e-9 * model.dt() {
        return Err(Error::Shape(format!("waveform period {} s differs from model period {} s", ws.dt(), model.dt())));
    }
    let x0 = model.initial_state(ws)?;
    let y = model.measurement_vector(ws)?;
    estimate_from(model, &y, &x0, cfg)
}

/// Runs the solver against an explicit measurement vector from `x0`.
pub fn estimate_from(model: &HypothesisModel, y: &[f64], x0: &StateVector, cfg: &SolverConfig) -> Result<EstimationResult> {
    cfg.validate()?;
    if y.len() != model.output_dim() {
        return Err(Error::Shape(format!("measurement has {} rows, model expects {}", y.len(), model.output_dim())));
    }
    let y_norm = norm(y);
    let mut x = model.pack(x0)?;
    let mut eps = residual(y, &model.h_packed(&x))?;
    let mut j = cost(&eps, cfg.cost_floor);
    if !j.is_finite() {
        return Err(Error::DegenerateInput("initial residual is not finite".into()));
    }

    let mut trace = Vec::new();
    let mut termination = Termination::MaxIterations;

    for _ in 0..cfg.max_iterations {
        let mut jac = model.jacobian_packed(&x);
        let scale: Option<Vec<f64>> = cfg.column_scaling.then(|| {
            let s: Vec<f64> = jac.column_norms().iter().map(|&c| if c > 0.0 && c.is_finite() { 1.0 / c } else { 1.0 }).collect();
            jac.scale_columns(&s);
            s
        });
        let rhs = jac.tmul_vec(&eps);
        let base = NormalEquations::assemble(&jac);
        // Smallest non-zero diagonal: 1 with column scaling, and without it
        // the first damped step still moves the weakly scaled columns.
        let min_diag = {
            let d = base.diagonal();
            let m = d.iter().copied().filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
            if m.is_finite() {
                m
            } else {
                1.0
            }
        };

        let mut lambda = cfg.initial_damping;
        let mut outcome = None;
        for _ in 0..=MAX_ESCALATIONS {
            let mut ne = base.clone();
            if lambda != 0.0 {
                ne.add_to_diagonal(lambda);
            }
            let trial = ne.solve(&rhs).ok().and_then(|mut dx| {
                if let Some(s) = &scale {
                    dx.iter_mut().zip(s).for_each(|(d, s)| *d *= s);
                }
                let xt: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + b).collect();
                let et = residual(y, &model.h_packed(&xt)).ok()?;
                let jt = cost(&et, cfg.cost_floor);
                jt.is_finite().then_some((xt, et, jt))
            });
            if let Some((xt, et, jt)) = trial {
                if (jt - j).abs() < cfg.cost_delta_tol {
                    outcome = Some((xt, et, jt, true));
                    break;
                }
                if jt < j {
                    outcome = Some((xt, et, jt, false));
                    break;
                }
            }
            lambda = if lambda == 0.0 { DAMPING_SEED * min_diag } else { lambda * cfg.damping_growth };
        }

        match outcome {
            Some((xt, et, jt, done)) => {
                if jt <= j {
                    x = xt;
                    eps = et;
                    j = jt;
                }
                trace.push(j);
                if done {
                    termination = Termination::CostConverged;
                    break;
                }
            }
            None => {
                trace.push(j);
                termination =
                    if norm(&eps) <= EXACT_FIT_RATIO * y_norm { Termination::ExactFit } else { Termination::Stalled };
                break;
            }
        }
    }

    let x_hat = model.unpack(&x)?;
    Ok(EstimationResult {
        params: physical_params(&x_hat),
        x_hat,
        cost: j,
        iterations: trace.len(),
        converged: matches!(termination, Termination::CostConverged | Termination::ExactFit),
        termination,
        cost_trace: trace,
        residual_norm: norm(&eps),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, FaultHypothesis, LoadTopology, Phase, PhasePair};
    use proptest::prelude::*;

    fn approx(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn residual_examples() {
        assert_eq!(residual(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(residual(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        assert!(matches!(residual(&[1.0], &[0.0, 0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn cost_examples() {
        assert!(cost(&[1.0, 0.0], 1e-30).abs() < 1e-15);
        assert!((cost(&[2.0, 0.0], 1e-30) - 4f64.ln()).abs() < 1e-15);
        assert!((cost(&[0.0, 0.0], 1e-30) - (-69.0776)).abs() < 1e-4);
    }

    #[test]
    fn step_examples() {
        let h = Jacobian::from_dense(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(approx(&gauss_newton_step(&h, &[0.5, -0.5], 0.0).unwrap(), &[0.5, -0.5], 1e-15));
        let h = Jacobian::from_dense(&[vec![2.0, 0.0], vec![0.0, 4.0]]);
        assert!(approx(&gauss_newton_step(&h, &[2.0, 4.0], 0.0).unwrap(), &[1.0, 1.0], 1e-15));
        let h = Jacobian::from_dense(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        assert!(approx(&gauss_newton_step(&h, &[1.0, 1.0], 1.0).unwrap(), &[0.5, 0.0], 1e-15));
        assert!(matches!(gauss_newton_step(&h, &[1.0, 1.0], 0.0), Err(Error::Singular { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        for bad in [
            SolverConfig { max_iterations: 0, ..Default::default() },
            SolverConfig { cost_delta_tol: 0.0, ..Default::default() },
            SolverConfig { damping_growth: 1.0, ..Default::default() },
            SolverConfig { initial_damping: -1.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Configuration(_))));
        }
    }

    fn sine_state(model: &HypothesisModel, g: f64, gamma: f64, gf: Option<f64>) -> StateVector {
        // Trajectories consistent with the branch constraints are not needed
        // here; only a fixed point of y = h(x) is.
        let n = model.n();
        StateVector {
            g,
            gamma,
            gf,
            trajectories: (0..model.trajectory_count())
                .map(|t| (0..n).map(|k| 100.0 * (0.0377 * k as f64 + t as f64).sin()).collect())
                .collect(),
        }
    }

    #[test]
    fn fixed_point_is_stationary() {
        let cases = [
            (LoadTopology::GroundedWyeRL, FaultHypothesis::LineGround(Phase::A)),
            (LoadTopology::DeltaRL, FaultHypothesis::LineLine(PhasePair::AB)),
            (LoadTopology::GroundedWyeRL, FaultHypothesis::Unfaulted),
        ];
        for (t, h) in cases {
            let m = build_model(t, h, 50, 1e-4).unwrap();
            let x = sine_state(&m, 0.1356, 102.3, h.is_faulted().then_some(66.7));
            let y = m.h_packed(&m.pack(&x).unwrap());
            let r = estimate_from(&m, &y, &x, &SolverConfig::default()).unwrap();
            assert!(r.converged, "{t} {h}: {:?}", r.termination);
            assert!(r.iterations <= 2);
            let a = m.pack(&x).unwrap();
            let b = m.pack(&r.x_hat).unwrap();
            let dx = norm(&a.iter().zip(&b).map(|(p, q)| p - q).collect::<Vec<_>>());
            assert!(dx <= 1e-12 * norm(&a), "{t} {h}: {dx}");
            assert!(r.cost < -50.0);
            assert_eq!(r.cost_trace.len(), r.iterations);
        }
    }

    #[test]
    fn shape_mismatch() {
        let m = build_model(LoadTopology::GroundedWyeRL, FaultHypothesis::Unfaulted, 10, 1e-4).unwrap();
        let x = sine_state(&m, 0.1, 10.0, None);
        assert!(matches!(estimate_from(&m, &[0.0; 3], &x, &SolverConfig::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn rank_deficient_problem_terminates() {
        // Zero trajectories make every Jacobian column for G, Γ and G_f zero.
        let m = build_model(LoadTopology::GroundedWyeRL, FaultHypothesis::LineGround(Phase::B), 12, 1e-4).unwrap();
        let zero = StateVector {
            g: 0.0,
            gamma: 0.0,
            gf: Some(0.0),
            trajectories: vec![vec![0.0; 12]; m.trajectory_count()],
        };
        let y: Vec<f64> = (0..m.output_dim()).map(|i| (i as f64).sin()).collect();
        let r = estimate_from(&m, &y, &zero, &SolverConfig::default()).unwrap();
        assert!(r.iterations <= 50);
        assert_eq!(r.converged, matches!(r.termination, Termination::CostConverged | Termination::ExactFit));
        assert!(r.cost.is_finite());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn accepted_costs_never_increase(
            g in 0.05f64..0.5,
            gamma in 20.0f64..300.0,
            gf in 10.0f64..200.0,
            perturb in 0.5f64..2.0,
            seed in 0u64..1000,
        ) {
            let m = build_model(LoadTopology::GroundedWyeRL, FaultHypothesis::LineGround(Phase::A), 30, 1e-4).unwrap();
            let truth = sine_state(&m, g, gamma, Some(gf));
            let y = m.h_packed(&m.pack(&truth).unwrap());
            let mut x0 = truth.clone();
            x0.g *= perturb;
            x0.gamma /= perturb;
            x0.gf = Some(gf * perturb);
            for (t, traj) in x0.trajectories.iter_mut().enumerate() {
                for (k, v) in traj.iter_mut().enumerate() {
                    *v += ((seed as f64) + (t * 31 + k) as f64).cos();
                }
            }
            let r = estimate_from(&m, &y, &x0, &SolverConfig::default()).unwrap();
            prop_assert_eq!(r.cost_trace.len(), r.iterations);
            let x0_cost = cost(&residual(&y, &m.h_packed(&m.pack(&x0).unwrap())).unwrap(), 1e-30);
            let mut prev = x0_cost;
            for &c in &r.cost_trace {
                prop_assert!(c <= prev);
                prev = c;
            }
            let final_cost = cost(&residual(&y, &m.h_packed(&m.pack(&r.x_hat).unwrap())).unwrap(), 1e-30);
            prop_assert_eq!(final_cost, r.cost);
        }
    }
}
