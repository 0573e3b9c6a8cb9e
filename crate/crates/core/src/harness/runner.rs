//! Closed-loop simulation: discrete controller, continuous plant.
//!
//! Actuation is zero-order hold at the sampling period; between samples the
//! plant integrates on a fine RK4 grid. Measurements are full-state and
//! noise-free unless the scenario enables the noise hook. Transform
//! regularity is checked every step; a violation aborts with a partial log.

use nalgebra::SVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scenario::{build_reference, ControllerKind, InitialState, Scenario};
use super::HarnessError;
use crate::integrate;
use crate::ltv_mpc::{LtvController, StepDiag};
use crate::nmpc::NmpcController;
use crate::plant::{self, PlantState};
use crate::qpsolve::QpStatus;
use crate::transform;

/// One logged control period.
#[derive(Clone, Debug)]
pub struct SimRow {
    pub t_s: f64,
    pub y1_mw: f64,
    pub y2_mjs: f64,
    pub y3_kpa: f64,
    pub y1_ref_mw: f64,
    pub y2_ref_mjs: f64,
    pub u: [f64; 2],
    pub v: [f64; 2],
    pub solve_time_s: f64,
    pub qp_status: QpStatus,
    pub qp_iterations: usize,
    pub outer_iterations: usize,
    pub kkt_residual: f64,
    pub press_lo_active: bool,
    pub press_hi_active: bool,
    pub input_active: bool,
    pub clamped: bool,
    pub fallback: bool,
    pub initial_violation: bool,
    pub det_a_dec: f64,
    pub cond_phi: f64,
    pub regular: bool,
}

#[derive(Clone, Debug)]
pub enum AbortReason {
    Regularity { step: usize, detail: String },
    ControllerFault { step: usize, detail: String },
    PlantDivergence { step: usize, detail: String },
}

impl std::fmt::Display for AbortReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AbortReason::Regularity { step, detail } => {
                write!(f, "regularity violation at step {step}: {detail}")
            }
            AbortReason::ControllerFault { step, detail } => {
                write!(f, "controller fault at step {step}: {detail}")
            }
            AbortReason::PlantDivergence { step, detail } => {
                write!(f, "plant integration diverged at step {step}: {detail}")
            }
        }
    }
}

/// Closed-loop record. `abort` is set when the run terminated early.
#[derive(Clone, Debug)]
pub struct SimLog {
    pub rows: Vec<SimRow>,
    pub y1_nom_mw: f64,
    pub y2_nom_mjs: f64,
    pub ts_s: f64,
    pub x0: PlantState,
    pub plant_substeps: usize,
    pub abort: Option<AbortReason>,
}

impl SimLog {
    /// Root-mean-square electric tracking error over all logged steps.
    pub fn y1_rms_error(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.rows.iter().map(|r| (r.y1_mw - r.y1_ref_mw).powi(2)).sum();
        (sum / self.rows.len() as f64).sqrt()
    }

    /// Contiguous index ranges where the predicate holds.
    pub fn intervals(&self, pred: impl Fn(&SimRow) -> bool) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = None;
        for (i, r) in self.rows.iter().enumerate() {
            if pred(r) {
                start.get_or_insert(i);
            } else if let Some(s) = start.take() {
                out.push((s, i));
            }
        }
        if let Some(s) = start {
            out.push((s, self.rows.len()));
        }
        out
    }
}

enum Controller {
    Ltv(Box<LtvController>),
    Nmpc(Box<NmpcController>),
}

impl Controller {
    fn step(
        &mut self,
        x: &PlantState,
        refs: &crate::ltv_mpc::RefWindow,
    ) -> Result<(SVector<f64, 2>, StepDiag), crate::ltv_mpc::MpcError> {
        match self {
            Controller::Ltv(c) => c.step(x, refs),
            Controller::Nmpc(c) => c.step(x, refs),
        }
    }
}

/// Run one scenario to completion (or abort) and return the log.
pub fn run_closed_loop(scenario: &Scenario) -> Result<SimLog, HarnessError> {
    scenario.validate()?;
    let params = scenario.load_params()?;
    let series = scenario.load_series()?;
    let n_steps = scenario.n_steps();
    let refs = build_reference(
        &series,
        scenario.y1_nom_mw,
        scenario.y1_as_mw,
        scenario.y2_nom_mjs,
        n_steps,
    );

    let mut controller = match scenario.controller {
        ControllerKind::Ltv => Controller::Ltv(Box::new(LtvController::new(
            &params,
            &scenario.mpc,
            scenario.y1_nom_mw,
            scenario.y2_nom_mjs,
        )?)),
        ControllerKind::Nmpc => Controller::Nmpc(Box::new(NmpcController::new(
            &params,
            &scenario.mpc,
            &scenario.nlp,
            scenario.y1_nom_mw,
            scenario.y2_nom_mjs,
        )?)),
    };

    let x0 = match &scenario.initial_state {
        InitialState::Equilibrium => {
            plant::find_equilibrium(&params, scenario.y1_nom_mw, scenario.y2_nom_mjs)?.0
        }
        InitialState::Explicit(v) => {
            let mut arr = [0.0; plant::NX];
            arr.copy_from_slice(v);
            PlantState::from_array(arr)
        }
    };

    let mut noise_rng = scenario
        .measurement_noise_std
        .map(|_| ChaCha8Rng::seed_from_u64(scenario.noise_seed));

    let mut log = SimLog {
        rows: Vec::with_capacity(n_steps),
        y1_nom_mw: scenario.y1_nom_mw,
        y2_nom_mjs: scenario.y2_nom_mjs,
        ts_s: scenario.mpc.ts_s,
        x0,
        plant_substeps: scenario.plant_substeps,
        abort: None,
    };

    let mut x = x0;
    for k in 0..n_steps {
        let reg = transform::regularity(&params, &x);
        if !reg.ok {
            log.abort = Some(AbortReason::Regularity {
                step: k,
                detail: format!("det = {:.3e}, cond = {:.3e}", reg.det_a_dec, reg.cond_phi),
            });
            break;
        }

        let x_meas = match (&mut noise_rng, scenario.measurement_noise_std) {
            (Some(rng), Some(std)) => {
                let mut xm = x;
                for i in 0..plant::NX {
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    let g = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                    xm.0[i] += std * g;
                }
                xm
            }
            _ => x,
        };

        let window = refs.window(k, scenario.mpc.horizon);
        let (u, diag) = match controller.step(&x_meas, &window) {
            Ok(pair) => pair,
            Err(e) => {
                log.abort = Some(AbortReason::ControllerFault { step: k, detail: e.to_string() });
                break;
            }
        };

        let (y1, y2, y3) = plant::outputs(&params, &x);
        log.rows.push(SimRow {
            t_s: k as f64 * scenario.mpc.ts_s,
            y1_mw: y1,
            y2_mjs: y2,
            y3_kpa: y3,
            y1_ref_mw: refs.y1_at(k),
            y2_ref_mjs: refs.y2_ref,
            u: [u[0], u[1]],
            v: [diag.v[0], diag.v[1]],
            solve_time_s: diag.solve_time_s,
            qp_status: diag.qp_status,
            qp_iterations: diag.qp_iterations,
            outer_iterations: diag.outer_iterations,
            kkt_residual: diag.kkt_residual,
            press_lo_active: diag.active.pressure_lo,
            press_hi_active: diag.active.pressure_hi,
            input_active: diag.active.input_limit,
            clamped: diag.clamped,
            fallback: diag.fallback,
            initial_violation: diag.initial_violation,
            det_a_dec: reg.det_a_dec,
            cond_phi: reg.cond_phi,
            regular: reg.ok,
        });

        match integrate::plant_step(&params, &x, &u, scenario.mpc.ts_s, scenario.plant_substeps) {
            Ok(next) => x = next,
            Err(e) => {
                log.abort = Some(AbortReason::PlantDivergence { step: k, detail: e.to_string() });
                break;
            }
        }
    }
    Ok(log)
}

/// Re-integrate the plant under the logged inputs; used by the conservation
/// check and available to downstream tooling.
pub fn replay_outputs(
    params: &plant::PlantParams,
    log: &SimLog,
) -> Result<Vec<(f64, f64, f64)>, HarnessError> {
    let mut x = log.x0;
    let mut out = Vec::with_capacity(log.rows.len());
    for row in &log.rows {
        out.push(plant::outputs(params, &x));
        let u = SVector::<f64, 2>::new(row.u[0], row.u[1]);
        x = integrate::plant_step(params, &x, &u, log.ts_s, log.plant_substeps)
            .map_err(crate::ltv_mpc::MpcError::from)?;
    }
    Ok(out)
}
