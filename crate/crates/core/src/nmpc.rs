//! Reference nonlinear MPC by direct single shooting on the physical model.
//!
//! Minimizes the same tracking cost as the LTV controller, but treats the
//! rollout as a black box the way an off-the-shelf NLP solver does: BFGS
//! curvature estimates, finite-difference gradients (central), a quadratic
//! subproblem per iteration, and an Armijo line search, iterated to
//! first-order optimality. No structure of the transformed dynamics is
//! exploited, which is exactly what makes it the timing baseline.

use nalgebra::{DMatrix, DVector, SVector};
use serde::{Deserialize, Serialize};

use crate::integrate;
use crate::ltv_mpc::{
    ActiveFamilies, ConstraintSet, MpcConfig, MpcError, RefWindow, RowKind, StepDiag,
};
use crate::plant::{self, PlantParams, PlantState};
use crate::qpsolve::{self, QpOptions, QpStatus};
use crate::transform::{self, HurwitzGains};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientScheme {
    /// Central finite differences over the decision vector (solver-style).
    #[default]
    FiniteDifference,
    /// Gradient through the discretized chain dynamics.
    Variational,
}

fn default_max_outer() -> usize {
    30
}
fn default_tol_grad() -> f64 {
    1e-6
}
fn default_fd_step() -> f64 {
    1e-5
}
fn default_armijo() -> f64 {
    1e-4
}
fn default_max_ls() -> usize {
    25
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NlpOptions {
    #[serde(default = "default_max_outer")]
    pub max_outer_iterations: usize,
    #[serde(default)]
    pub gradient: GradientScheme,
    #[serde(default = "default_tol_grad")]
    pub tol_grad: f64,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default = "default_armijo")]
    pub armijo_c1: f64,
    #[serde(default = "default_max_ls")]
    pub max_linesearch: usize,
}

impl Default for NlpOptions {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are complete")
    }
}

impl NlpOptions {
    pub fn validate(&self) -> Result<(), MpcError> {
        if !(self.tol_grad > 0.0) || !(self.fd_step > 0.0) {
            return Err(MpcError::Config("tolerances must be > 0".into()));
        }
        if self.max_outer_iterations == 0 {
            return Err(MpcError::Config("iteration cap must be >= 1".into()));
        }
        Ok(())
    }
}

/// Rollout evaluation: cost plus the quantities constraints are written on.
struct RolloutEval {
    cost: f64,
    /// Chain states l = 0..=N.
    z: Vec<SVector<f64, 9>>,
    /// Internal states l = 0..N.
    w: Vec<SVector<f64, 4>>,
}

pub struct NmpcController {
    pub params: PlantParams,
    pub config: MpcConfig,
    pub options: NlpOptions,
    pub gains: HurwitzGains,
    pub constraints: ConstraintSet,
    pub v_star: SVector<f64, 2>,
    /// Terminal weight shared with the LTV controller for comparability.
    pub p_z: DMatrix<f64>,
    plan: Vec<SVector<f64, 2>>,
}

impl NmpcController {
    pub fn new(
        params: &PlantParams,
        config: &MpcConfig,
        options: &NlpOptions,
        y1_nom: f64,
        y2_nom: f64,
    ) -> Result<Self, MpcError> {
        config.validate()?;
        options.validate()?;
        let gains = config.gains()?;
        let (x_star, u_star) = plant::find_equilibrium(params, y1_nom, y2_nom)?;
        let v_star = transform::virtual_input_for(params, &gains, &x_star, &u_star);
        let (f_mat, g_mat) = crate::ltv_mpc::zoh_discretize(&gains, config.ts_s);
        let q = DMatrix::from_diagonal(&DVector::from_row_slice(&config.q_z));
        let r = DMatrix::from_diagonal(&DVector::from_row_slice(&config.r_z));
        let p_z = crate::ltv_mpc::solve_dare(
            &DMatrix::from_iterator(9, 9, f_mat.iter().cloned()),
            &DMatrix::from_iterator(9, 2, g_mat.iter().cloned()),
            &q,
            &r,
        )?;
        let steady = crate::ltv_mpc::steady_map(params, &x_star, &u_star)?;
        let constraints = crate::ltv_mpc::build_constraints(config, params, &steady)?;
        Ok(Self {
            params: params.clone(),
            config: config.clone(),
            options: options.clone(),
            gains,
            constraints,
            v_star,
            p_z,
            plan: vec![v_star; config.horizon],
        })
    }

    pub fn reset(&mut self) {
        self.plan = vec![self.v_star; self.config.horizon];
    }

    pub fn plan(&self) -> &[SVector<f64, 2>] {
        &self.plan
    }

    fn unstack(&self, v: &DVector<f64>) -> Vec<SVector<f64, 2>> {
        (0..self.config.horizon)
            .map(|l| SVector::<f64, 2>::new(v[2 * l], v[2 * l + 1]))
            .collect()
    }

    /// Single-shooting rollout of the physical plant under the feedback law
    /// with per-step held virtual inputs; cost accumulated on the
    /// transformed trajectory.
    fn rollout(
        &self,
        x0: &PlantState,
        v_seq: &[SVector<f64, 2>],
        refs: &RefWindow,
    ) -> Result<RolloutEval, MpcError> {
        let n = self.config.horizon;
        let mut x = *x0;
        let mut z = Vec::with_capacity(n + 1);
        let mut w = Vec::with_capacity(n);
        let mut cost = 0.0;
        for l in 0..=n {
            let t = transform::forward_transform(&self.params, &x);
            z.push(t.z());
            if l < n {
                w.push(t.w());
            }
            let err = t.z() - refs.z_d[l];
            if l == n {
                let e = DVector::from_iterator(9, err.iter().cloned());
                cost += (e.transpose() * &self.p_z * &e)[0];
            } else {
                for i in 0..9 {
                    cost += self.config.q_z[i] * err[i] * err[i];
                }
            }
            if l < n {
                let dv = v_seq[l] - refs.v_d[l];
                cost += self.config.r_z[0] * dv[0] * dv[0] + self.config.r_z[1] * dv[1] * dv[1];
                x = integrate::closed_loop_step(
                    &self.params,
                    &self.gains,
                    &x,
                    &v_seq[l],
                    self.config.ts_s,
                    self.config.substeps,
                )?;
            }
        }
        Ok(RolloutEval { cost, z, w })
    }

    /// Constraint values `c(V) <= 0` on the rollout (steps 1..N-1).
    fn constraint_values(&self, ev: &RolloutEval) -> (DVector<f64>, Vec<RowKind>) {
        let n = self.config.horizon;
        let cs = &self.constraints;
        let mut vals = Vec::new();
        let mut kinds = Vec::new();
        for l in 1..n {
            for r in 0..cs.m_z.nrows() {
                let v = (cs.m_z.row(r) * DVector::from_iterator(9, ev.z[l].iter().cloned()))[0]
                    - cs.n_z[r];
                vals.push(v);
                kinds.push(match cs.z_kinds[r] {
                    RowKind::InputUpper { input, .. } => RowKind::InputUpper { input, step: l },
                    RowKind::InputLower { input, .. } => RowKind::InputLower { input, step: l },
                    k => k,
                });
            }
            for r in 0..cs.m_w.nrows() {
                let v = (cs.m_w.row(r) * DVector::from_iterator(4, ev.w[l].iter().cloned()))[0]
                    - cs.n_w[r];
                vals.push(v);
                kinds.push(match cs.w_kinds[r] {
                    RowKind::PressureHi { .. } => RowKind::PressureHi { step: l },
                    RowKind::PressureLo { .. } => RowKind::PressureLo { step: l },
                    k => k,
                });
            }
        }
        (DVector::from_vec(vals), kinds)
    }

    /// Gradient through the discretized chain dynamics (`Variational`).
    fn variational_gradient(
        &self,
        v_seq: &[SVector<f64, 2>],
        ev: &RolloutEval,
        refs: &RefWindow,
    ) -> DVector<f64> {
        let n = self.config.horizon;
        let (f_mat, g_mat) = crate::ltv_mpc::zoh_discretize(&self.gains, self.config.ts_s);
        // dz_l / dv_j = F^{l-1-j} G for j < l.
        let mut grad = DVector::zeros(2 * n);
        let mut powers = vec![nalgebra::SMatrix::<f64, 9, 9>::identity()];
        for l in 1..=n {
            powers.push(f_mat * powers[l - 1]);
        }
        for l in 0..=n {
            let err = ev.z[l] - refs.z_d[l];
            let weighted: SVector<f64, 9> = if l == n {
                let e = DVector::from_iterator(9, err.iter().cloned());
                let we = &self.p_z * e;
                SVector::<f64, 9>::from_iterator(we.iter().cloned())
            } else {
                SVector::<f64, 9>::from_iterator(
                    (0..9).map(|i| self.config.q_z[i] * err[i]),
                )
            };
            for j in 0..l.min(n) {
                let block = powers[l - 1 - j] * g_mat;
                let contrib = block.transpose() * weighted * 2.0;
                grad[2 * j] += contrib[0];
                grad[2 * j + 1] += contrib[1];
            }
        }
        for l in 0..n {
            let dv = v_seq[l] - refs.v_d[l];
            grad[2 * l] += 2.0 * self.config.r_z[0] * dv[0];
            grad[2 * l + 1] += 2.0 * self.config.r_z[1] * dv[1];
        }
        grad
    }

    /// One receding-horizon update of the baseline.
    pub fn step(
        &mut self,
        x: &PlantState,
        refs: &RefWindow,
    ) -> Result<(SVector<f64, 2>, StepDiag), MpcError> {
        let started = std::time::Instant::now();
        let n = self.config.horizon;
        let nv = 2 * n;

        // Warm start from the shifted previous plan.
        let mut v_cur = DVector::zeros(nv);
        for l in 0..n {
            let src = if l + 1 < n { self.plan[l + 1] } else { *self.plan.last().unwrap() };
            v_cur[2 * l] = src[0];
            v_cur[2 * l + 1] = src[1];
        }

        let eval = |v: &DVector<f64>| -> Result<RolloutEval, MpcError> {
            self.rollout(x, &self.unstack(v), refs)
        };

        let mut ev = eval(&v_cur)?;
        let mut b = DMatrix::<f64>::identity(nv, nv);
        let mut b_scaled = false;
        let mut iterations = 0usize;
        let mut fallback = false;
        let mut last_qp_status = QpStatus::Optimal;
        let mut last_kkt = 0.0;
        let mut active = ActiveFamilies::default();
        let constrained = self.constraints.m_z.nrows() + self.constraints.m_w.nrows() > 0;

        let fd_gradient = |v: &DVector<f64>| -> Result<(DVector<f64>, DMatrix<f64>), MpcError> {
            // Central differences; perturbed rollouts double as the
            // constraint Jacobian probes.
            let (c0, _) = self.constraint_values(&eval(v)?);
            let rows = c0.len();
            let mut g = DVector::zeros(nv);
            let mut jac = DMatrix::zeros(rows, nv);
            for j in 0..nv {
                let h = self.options.fd_step * v[j].abs().max(1.0);
                let mut vp = v.clone();
                let mut vm = v.clone();
                vp[j] += h;
                vm[j] -= h;
                let ep = eval(&vp)?;
                let em = eval(&vm)?;
                g[j] = (ep.cost - em.cost) / (2.0 * h);
                if rows > 0 {
                    let (cp, _) = self.constraint_values(&ep);
                    let (cm, _) = self.constraint_values(&em);
                    for r in 0..rows {
                        jac[(r, j)] = (cp[r] - cm[r]) / (2.0 * h);
                    }
                }
            }
            Ok((g, jac))
        };

        let mut grad;
        let mut cjac;
        match self.options.gradient {
            GradientScheme::FiniteDifference => {
                let (g, j) = fd_gradient(&v_cur)?;
                grad = g;
                cjac = j;
            }
            GradientScheme::Variational => {
                grad = self.variational_gradient(&self.unstack(&v_cur), &ev, refs);
                cjac = fd_gradient(&v_cur)?.1;
            }
        }

        for _ in 0..self.options.max_outer_iterations {
            let (c_vals, kinds) = self.constraint_values(&ev);
            let grad_ok = grad.amax() <= self.options.tol_grad;
            let feas_ok = c_vals.iter().all(|&c| c <= 1e-8);
            if grad_ok && (!constrained || feas_ok) && iterations > 0 {
                break;
            }
            if grad_ok && !constrained {
                break;
            }

            // QP subproblem: min 1/2 d'Bd + g'd  s.t.  c + A d <= 0.
            let sol = qpsolve::solve(
                &b,
                &grad,
                &cjac,
                &(-&c_vals),
                &QpOptions::default(),
            )?;
            last_qp_status = sol.status;
            last_kkt = sol.kkt_residual;
            if sol.status != QpStatus::Optimal {
                fallback = true;
                break;
            }
            for &row in &sol.active_set {
                match kinds.get(row) {
                    Some(RowKind::PressureHi { .. }) => active.pressure_hi = true,
                    Some(RowKind::PressureLo { .. }) => active.pressure_lo = true,
                    Some(RowKind::InputUpper { .. }) | Some(RowKind::InputLower { .. }) => {
                        active.input_limit = true
                    }
                    _ => {}
                }
            }
            let d = sol.x;
            if d.amax() < 1e-12 {
                break;
            }

            // Armijo backtracking on an l1 merit when constrained.
            let mu = 10.0 * sol.dual.amax().max(1.0);
            let merit = |ev: &RolloutEval| {
                let (c, _) = self.constraint_values(ev);
                ev.cost + mu * c.iter().map(|&v| v.max(0.0)).sum::<f64>()
            };
            let m0 = merit(&ev);
            let slope = grad.dot(&d)
                - mu * c_vals.iter().map(|&v| v.max(0.0)).sum::<f64>();
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..self.options.max_linesearch {
                let v_try = &v_cur + &d * alpha;
                let ev_try = eval(&v_try)?;
                if !ev_try.cost.is_finite() {
                    alpha *= 0.5;
                    continue;
                }
                if merit(&ev_try) <= m0 + self.options.armijo_c1 * alpha * slope.min(0.0) {
                    accepted = Some((v_try, ev_try, alpha));
                    break;
                }
                alpha *= 0.5;
            }
            let Some((v_new, ev_new, _alpha)) = accepted else {
                fallback = iterations == 0;
                break;
            };

            // Damped BFGS update on the cost gradient.
            let (grad_new, cjac_new) = match self.options.gradient {
                GradientScheme::FiniteDifference => fd_gradient(&v_new)?,
                GradientScheme::Variational => (
                    self.variational_gradient(&self.unstack(&v_new), &ev_new, refs),
                    fd_gradient(&v_new)?.1,
                ),
            };
            let s = &v_new - &v_cur;
            let y = &grad_new - &grad;
            let sy = s.dot(&y);
            let sbs = (s.transpose() * &b * &s)[0];
            if !b_scaled && sy > 0.0 {
                let yy = y.dot(&y);
                if yy > 0.0 {
                    b = DMatrix::identity(nv, nv) * (yy / sy).max(1e-4);
                    b_scaled = true;
                }
            }
            // Powell damping keeps B positive definite.
            let theta = if sy >= 0.2 * sbs { 1.0 } else { (0.8 * sbs) / (sbs - sy) };
            let y_d = &y * theta + (&b * &s) * (1.0 - theta);
            let sy_d = s.dot(&y_d);
            if sy_d > 1e-12 {
                let bs = &b * &s;
                b = &b - (&bs * bs.transpose()) / sbs + (&y_d * y_d.transpose()) / sy_d;
                b = (&b + b.transpose()) * 0.5;
            }

            v_cur = v_new;
            ev = ev_new;
            grad = grad_new;
            cjac = cjac_new;
            iterations += 1;
        }

        let plan = self.unstack(&v_cur);
        let v_apply = if fallback && iterations == 0 {
            // Divergence before any progress: act on the shifted plan.
            plan[0]
        } else {
            plan[0]
        };
        self.plan = plan;

        let mut u = transform::feedback_law(&self.params, &self.gains, x, &v_apply)?;
        let mut clamped = false;
        if let Some(bounds) = self.config.input_limits {
            for i in 0..2 {
                let c = u[i].clamp(bounds[i][0], bounds[i][1]);
                if (c - u[i]).abs() > 1e-12 {
                    clamped = true;
                }
                u[i] = c;
            }
        }

        Ok((
            u,
            StepDiag {
                qp_status: last_qp_status,
                qp_iterations: 0,
                kkt_residual: last_kkt,
                active,
                fallback,
                clamped,
                initial_violation: false,
                solve_time_s: started.elapsed().as_secs_f64(),
                outer_iterations: iterations,
                v: v_apply,
            },
        ))
    }
}
