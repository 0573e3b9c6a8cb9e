//! Continuous-time nonlinear model of the two-site benchmark.
//!
//! State layout (13 components):
//!
//! * gas turbines `x[0..6]` = (v_p1, w_f1, w_t1, v_p2, w_f2, w_t2), scaled by
//!   rated values;
//! * electric subsystem `x[6..10]` = (delta_1, omega_1, delta_2, omega_2);
//! * heat subsystem `x[10..13]` = (p1 - p2, w, T_h1·p1 + T_h2·p2).
//!
//! The third heat component is the boiler-time-constant-weighted pressure
//! accumulator; its drift equals the instantaneous heat imbalance
//! `Q'_a1 - Q'_L1 + Q'_a2 - Q'_L2` with no further scaling, and the mean
//! supply pressure in kPa is recovered through the affine output map
//! `y3 = p_base + p_r · x_h3`.

use std::fmt;
use std::path::Path;

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::ad::{Dual, Scalar};

/// Dimension of the plant state.
pub const NX: usize = 13;
/// Number of physical inputs (fuel valve commands).
pub const NU: usize = 2;

/// Index of eta components inside the plant state: (x_g3, x_e1, x_e2, x_h3).
pub const ETA_IDX: [usize; 4] = [2, 6, 7, 12];

#[derive(Debug, thiserror::Error)]
pub enum PlantError {
    #[error("invalid parameter `{key}`: {reason}")]
    InvalidParams { key: String, reason: String },
    #[error("parameter file {path}: {reason}")]
    ParamsFile { path: String, reason: String },
    #[error("state contains non-finite entries")]
    NonFiniteState,
    #[error("no equilibrium for targets y1 = {y1} MW, y2 = {y2} MJ/s: {reason}")]
    NoEquilibrium { y1: f64, y2: f64, reason: String },
}

/// Model evaluation form. `Linearized` replaces the admittance trigonometry
/// by its small-angle form (cos -> 1, sin -> identity) and drops the pipe
/// friction term, producing an exactly affine vector field. Used as a
/// cross-check plant for controller equivalence tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelForm {
    #[default]
    Full,
    Linearized,
}

/// Physical constants of the two-site benchmark.
///
/// Electric powers are expressed directly in MW (the voltages are
/// dimensionless and the admittances carry the MW scale); heat flows are in
/// scaled units converted to MJ/s by `q_r`; pressures are scaled units
/// converted to kPa by `p_r` and `p_base_kpa`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlantParams {
    // Gas turbines
    pub t_v1: f64,
    pub t_f1: f64,
    pub t_cd1: f64,
    pub t_v2: f64,
    pub t_f2: f64,
    pub t_cd2: f64,
    pub w_o1: f64,
    pub w_o2: f64,
    pub k_e1: f64,
    pub k_e2: f64,
    pub k_h1: f64,
    pub k_h2: f64,
    pub beta1: f64,
    pub beta2: f64,
    // Electric subsystem
    pub t_e1: f64,
    pub t_e2: f64,
    pub d1: f64,
    pub d2: f64,
    pub e1: f64,
    pub e2: f64,
    pub e_inf: f64,
    pub g11: f64,
    pub g22: f64,
    pub g12: f64,
    pub g1inf: f64,
    pub g2inf: f64,
    pub b12: f64,
    pub b1inf: f64,
    pub b2inf: f64,
    // Heat subsystem
    pub t_h1: f64,
    pub t_h2: f64,
    pub t_h3: f64,
    pub rho_s: f64,
    /// Pipe friction group lambda·L / (2 d).
    pub friction_group: f64,
    /// Condensation enthalpy group (pi/4)·h_c·rho_s.
    pub condensation_group: f64,
    pub q_l1: f64,
    pub q_l2: f64,
    // Unit conversion
    /// Heat-flow scale, MJ/s per scaled heat unit.
    pub q_r: f64,
    /// Pressure scale, kPa per unit of x_h3.
    pub p_r: f64,
    /// Base supply pressure at x_h3 = 0, kPa.
    pub p_base_kpa: f64,
    /// Evaluation form; omitted in parameter files for the physical model.
    #[serde(default, skip_serializing_if = "is_full_form")]
    pub model_form: ModelForm,
}

fn is_full_form(f: &ModelForm) -> bool {
    *f == ModelForm::Full
}

/// Keys required in a parameter file, in documentation order.
pub const PARAM_KEYS: [&str; 38] = [
    "t_v1", "t_f1", "t_cd1", "t_v2", "t_f2", "t_cd2", "w_o1", "w_o2", "k_e1", "k_e2", "k_h1",
    "k_h2", "beta1", "beta2", "t_e1", "t_e2", "d1", "d2", "e1", "e2", "e_inf", "g11", "g22",
    "g12", "g1inf", "g2inf", "b12", "b1inf", "b2inf", "t_h1", "t_h2", "t_h3", "rho_s",
    "friction_group", "condensation_group", "q_l1", "q_l2", "q_r",
];

impl PlantParams {
    /// Load from a flat JSON document, rejecting unknown and missing keys.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PlantError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PlantError::ParamsFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json_str(&text).map_err(|e| match e {
            PlantError::ParamsFile { reason, .. } => PlantError::ParamsFile {
                path: path.display().to_string(),
                reason,
            },
            other => other,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self, PlantError> {
        let file_err = |reason: String| PlantError::ParamsFile {
            path: "<inline>".to_string(),
            reason,
        };
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| file_err(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| file_err("top level must be a JSON object".into()))?;
        let mut required: Vec<&str> = PARAM_KEYS.to_vec();
        // Optional keys with defaults.
        let optional = ["p_r", "p_base_kpa", "model_form"];
        for key in obj.keys() {
            if let Some(pos) = required.iter().position(|k| k == key) {
                required.remove(pos);
            } else if !optional.contains(&key.as_str()) {
                return Err(file_err(format!("unknown key `{key}`")));
            }
        }
        if let Some(missing) = required.first() {
            return Err(file_err(format!("missing key `{missing}`")));
        }
        let params: PlantParams = serde_json::from_value(value.clone()).map_err(|e| {
            file_err(format!("bad value: {e}"))
        })?;
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        let err = |key: &str, reason: &str| {
            Err(PlantError::InvalidParams {
                key: key.into(),
                reason: reason.into(),
            })
        };
        let time_constants = [
            ("t_v1", self.t_v1),
            ("t_f1", self.t_f1),
            ("t_cd1", self.t_cd1),
            ("t_v2", self.t_v2),
            ("t_f2", self.t_f2),
            ("t_cd2", self.t_cd2),
            ("t_e1", self.t_e1),
            ("t_e2", self.t_e2),
            ("t_h1", self.t_h1),
            ("t_h2", self.t_h2),
            ("t_h3", self.t_h3),
        ];
        for (key, v) in time_constants {
            if !(v > 0.0) {
                return err(key, "time constant must be > 0");
            }
        }
        for (key, v) in [("w_o1", self.w_o1), ("w_o2", self.w_o2)] {
            if !(0.0..1.0).contains(&v) {
                return err(key, "valve floor must satisfy 0 <= w_o < 1");
            }
        }
        for (key, v) in [
            ("k_e1", self.k_e1),
            ("k_e2", self.k_e2),
            ("k_h1", self.k_h1),
            ("k_h2", self.k_h2),
        ] {
            if !(v > 0.0) {
                return err(key, "rated output must be > 0");
            }
        }
        for (key, v) in [("e1", self.e1), ("e2", self.e2), ("e_inf", self.e_inf)] {
            if !(v > 0.0) {
                return err(key, "internal voltage must be > 0");
            }
        }
        if !(self.rho_s > 0.0) {
            return err("rho_s", "steam density must be > 0");
        }
        if !(self.friction_group > 0.0) {
            return err("friction_group", "friction group must be > 0");
        }
        if !(self.p_r > 0.0) {
            return err("p_r", "pressure scale must be > 0");
        }
        Ok(())
    }
}

/// Plant state in original coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlantState(pub SVector<f64, NX>);

impl PlantState {
    pub fn from_array(x: [f64; NX]) -> Self {
        Self(SVector::from_column_slice(&x))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Internal-state components (x_g3, x_e1, x_e2, x_h3).
    pub fn eta(&self) -> SVector<f64, 4> {
        SVector::<f64, 4>::from_iterator(ETA_IDX.iter().map(|&i| self.0[i]))
    }
}

impl fmt::Display for PlantState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.9}")?;
        }
        write!(f, "]")
    }
}

/// Instantaneous energy flows through the system.
#[derive(Clone, Copy, Debug)]
pub struct EnergyFlows {
    /// Mechanical powers, MW.
    pub p_m: [f64; 2],
    /// Recovered heat flows, scaled units.
    pub q_a: [f64; 2],
    /// Generator electric outputs, MW.
    pub p_e: [f64; 2],
    /// Power delivered to the infinite bus, MW.
    pub p_e_inf: f64,
    /// Inter-site heat transfer, MJ/s.
    pub q_n: f64,
    /// Pairwise electric flows (1->2, 1->inf, 2->inf), MW.
    pub p_pair: [f64; 3],
}

#[inline]
fn sin_form<T: Scalar>(form: ModelForm, x: T) -> T {
    match form {
        ModelForm::Full => x.sin(),
        ModelForm::Linearized => x,
    }
}

#[inline]
fn cos_form<T: Scalar>(form: ModelForm, x: T) -> T {
    match form {
        ModelForm::Full => x.cos(),
        ModelForm::Linearized => T::from_f64(1.0),
    }
}

/// Mechanical power of gas turbine `i` (0-based) from its turbine fuel flow.
#[inline]
pub fn p_m<T: Scalar>(p: &PlantParams, i: usize, w_t: T) -> T {
    let (k_e, w_o) = if i == 0 { (p.k_e1, p.w_o1) } else { (p.k_e2, p.w_o2) };
    w_t.shift(-w_o).scale(k_e / (1.0 - w_o))
}

/// Recovered heat flow of site `i` from its combustor fuel flow.
#[inline]
pub fn q_a<T: Scalar>(p: &PlantParams, i: usize, w_f: T) -> T {
    let (k_h, beta) = if i == 0 { (p.k_h1, p.beta1) } else { (p.k_h2, p.beta2) };
    w_f.shift(beta).scale(k_h / (1.0 + beta))
}

/// Pipe heat transfer Q'_12(w) = -Q'_21(w), scaled units.
#[inline]
pub fn q_12<T: Scalar>(p: &PlantParams, w: T) -> T {
    w.scale(p.condensation_group)
}

/// Electric output power of generator 1, MW.
pub fn p_e1<T: Scalar>(p: &PlantParams, d1: T, d2: T) -> T {
    let form = p.model_form;
    let d12 = d1 - d2;
    let self_term = T::from_f64(p.e1 * p.e1 * p.g11);
    let inter = (cos_form(form, d12).scale(p.g12) + sin_form(form, d12).scale(p.b12))
        .scale(p.e1 * p.e2);
    let to_inf = (cos_form(form, d1).scale(p.g1inf) + sin_form(form, d1).scale(p.b1inf))
        .scale(p.e1 * p.e_inf);
    self_term + inter + to_inf
}

/// Electric output power of generator 2, MW.
pub fn p_e2<T: Scalar>(p: &PlantParams, d1: T, d2: T) -> T {
    let form = p.model_form;
    let d21 = d2 - d1;
    let self_term = T::from_f64(p.e2 * p.e2 * p.g22);
    let inter = (cos_form(form, d21).scale(p.g12) + sin_form(form, d21).scale(p.b12))
        .scale(p.e1 * p.e2);
    let to_inf = (cos_form(form, d2).scale(p.g2inf) + sin_form(form, d2).scale(p.b2inf))
        .scale(p.e2 * p.e_inf);
    self_term + inter + to_inf
}

/// Power delivered to the infinite bus, MW:
/// `P_einf = -P_inf1 - P_inf2` with `delta_inf = 0`.
pub fn p_e_inf<T: Scalar>(p: &PlantParams, d1: T, d2: T) -> T {
    let form = p.model_form;
    let from1 = sin_form(form, d1).scale(p.b1inf) - cos_form(form, d1).scale(p.g1inf);
    let from2 = sin_form(form, d2).scale(p.b2inf) - cos_form(form, d2).scale(p.g2inf);
    from1.scale(p.e_inf * p.e1) + from2.scale(p.e_inf * p.e2)
}

/// Drift vector field f(x), generic over the scalar type.
pub fn drift<T: Scalar>(p: &PlantParams, x: &[T; NX]) -> [T; NX] {
    let mut f = [T::zero(); NX];
    // Gas turbines
    f[0] = (-x[0]).shift(p.w_o1).scale(1.0 / p.t_v1);
    f[1] = (x[0] - x[1]).scale(1.0 / p.t_f1);
    f[2] = (x[1] - x[2]).scale(1.0 / p.t_cd1);
    f[3] = (-x[3]).shift(p.w_o2).scale(1.0 / p.t_v2);
    f[4] = (x[3] - x[4]).scale(1.0 / p.t_f2);
    f[5] = (x[4] - x[5]).scale(1.0 / p.t_cd2);
    // Electric subsystem
    let (d1, o1, d2, o2) = (x[6], x[7], x[8], x[9]);
    f[6] = o1.scale(1.0 / p.t_e1);
    f[7] = (p_m(p, 0, x[2]) - o1.scale(p.d1) - p_e1(p, d1, d2)).scale(1.0 / p.t_e1);
    f[8] = o2.scale(1.0 / p.t_e2);
    f[9] = (p_m(p, 1, x[5]) - o2.scale(p.d2) - p_e2(p, d1, d2)).scale(1.0 / p.t_e2);
    // Heat subsystem
    let q1 = q_a(p, 0, x[1]).shift(-p.q_l1);
    let q2 = q_a(p, 1, x[4]).shift(-p.q_l2);
    let qn = q_12(p, x[11]);
    f[10] = (q1 - qn).scale(1.0 / p.t_h1) - (q2 + qn).scale(1.0 / p.t_h2);
    let friction = match p.model_form {
        ModelForm::Full => (x[11] * x[11].abs()).scale(p.friction_group),
        ModelForm::Linearized => T::zero(),
    };
    f[11] = (x[10].scale(1.0 / p.rho_s) - friction).scale(1.0 / p.t_h3);
    f[12] = q1 + q2;
    f
}

/// Constant input vector fields (g1, g2); only the valve rows are nonzero.
pub fn input_fields(p: &PlantParams) -> (SVector<f64, NX>, SVector<f64, NX>) {
    let mut g1 = SVector::<f64, NX>::zeros();
    let mut g2 = SVector::<f64, NX>::zeros();
    g1[0] = (1.0 - p.w_o1) / p.t_v1;
    g2[3] = (1.0 - p.w_o2) / p.t_v2;
    (g1, g2)
}

/// Output map h(x) = (y1 MW, y2 MJ/s, y3 kPa).
pub fn outputs(p: &PlantParams, x: &PlantState) -> (f64, f64, f64) {
    let xs = state_array(x);
    let y1 = p_e_inf(p, xs[6], xs[8]);
    let y2 = q_12(p, xs[11]) * p.q_r;
    let y3 = p.p_base_kpa + p.p_r * xs[12];
    (y1, y2, y3)
}

/// First tracked output, generic (used by the Lie-derivative engine).
#[inline]
pub fn h1<T: Scalar>(p: &PlantParams, x: &[T; NX]) -> T {
    p_e_inf(p, x[6], x[8])
}

/// Second tracked output, generic.
#[inline]
pub fn h2<T: Scalar>(p: &PlantParams, x: &[T; NX]) -> T {
    q_12(p, x[11]).scale(p.q_r)
}

#[inline]
fn state_array(x: &PlantState) -> [f64; NX] {
    let mut a = [0.0; NX];
    a.copy_from_slice(x.0.as_slice());
    a
}

/// f(x) as a vector, with input validation.
pub fn eval_drift(p: &PlantParams, x: &PlantState) -> Result<SVector<f64, NX>, PlantError> {
    if !x.is_finite() {
        return Err(PlantError::NonFiniteState);
    }
    let f = drift(p, &state_array(x));
    Ok(SVector::from_column_slice(&f))
}

/// f(x) + g1 u1 + g2 u2.
pub fn eval_closed_drift(
    p: &PlantParams,
    x: &PlantState,
    u: &SVector<f64, NU>,
) -> Result<SVector<f64, NX>, PlantError> {
    let (g1, g2) = input_fields(p);
    Ok(eval_drift(p, x)? + g1 * u[0] + g2 * u[1])
}

/// Exact Jacobian of the drift field, by vector forward-mode differentiation.
pub fn eval_jacobian(p: &PlantParams, x: &PlantState) -> SMatrix<f64, NX, NX> {
    let xs = state_array(x);
    let mut seeds = [Dual::<NX>::constant(0.0); NX];
    for i in 0..NX {
        seeds[i] = Dual::variable(xs[i], i);
    }
    let f = drift(p, &seeds);
    let mut jac = SMatrix::<f64, NX, NX>::zeros();
    for (r, fr) in f.iter().enumerate() {
        for c in 0..NX {
            jac[(r, c)] = fr.d[c];
        }
    }
    jac
}

/// Energy flows at a state.
pub fn energy_flows(p: &PlantParams, x: &PlantState) -> EnergyFlows {
    let xs = state_array(x);
    let (d1, d2) = (xs[6], xs[8]);
    let p12 = p.e1 * p.e2
        * (p.g12 * cos_form(p.model_form, d1 - d2) + p.b12 * sin_form(p.model_form, d1 - d2));
    let p1inf = p.e1 * p.e_inf
        * (p.g1inf * cos_form(p.model_form, d1) + p.b1inf * sin_form(p.model_form, d1));
    let p2inf = p.e2 * p.e_inf
        * (p.g2inf * cos_form(p.model_form, d2) + p.b2inf * sin_form(p.model_form, d2));
    EnergyFlows {
        p_m: [p_m(p, 0, xs[2]), p_m(p, 1, xs[5])],
        q_a: [q_a(p, 0, xs[1]), q_a(p, 1, xs[4])],
        p_e: [p_e1(p, d1, d2), p_e2(p, d1, d2)],
        p_e_inf: p_e_inf(p, d1, d2),
        q_n: q_12(p, xs[11]) * p.q_r,
        p_pair: [p12, p1inf, p2inf],
    }
}

/// Equilibrium of the full model for given output targets.
///
/// The heat side is triangular: `y2` pins the pipe flow, the two pressure
/// balance equations pin the recovered heats and hence the fuel inputs, and
/// a damped Newton iteration on the rotor angles settles the electric power
/// balance. The resulting bus power must then match `y1` — equilibria only
/// exist on a one-parameter output locus, so an off-locus `y1` is reported
/// as `NoEquilibrium`. `x_h3` is a free rigid coordinate and is pinned to
/// `x_h3_target` (0 places the supply pressure at `p_base_kpa`).
pub fn find_equilibrium(
    p: &PlantParams,
    y1_target: f64,
    y2_target: f64,
) -> Result<(PlantState, SVector<f64, NU>), PlantError> {
    find_equilibrium_pinned(p, y1_target, y2_target, 0.0)
}

pub fn find_equilibrium_pinned(
    p: &PlantParams,
    y1_target: f64,
    y2_target: f64,
    x_h3_target: f64,
) -> Result<(PlantState, SVector<f64, NU>), PlantError> {
    let fail = |reason: &str| PlantError::NoEquilibrium {
        y1: y1_target,
        y2: y2_target,
        reason: reason.into(),
    };

    // Heat side.
    let q12_star = y2_target / p.q_r;
    let w_star = q12_star / p.condensation_group;
    // f_h3 = 0 and f_h1 = 0 are linear in (Q'a1, Q'a2).
    // [1, 1; 1/T_h1, -1/T_h2] [Qa1; Qa2] = [QL1 + QL2; (QL1 + Q12)/T_h1 - (QL2 - Q12)/T_h2]
    let rhs1 = p.q_l1 + p.q_l2;
    let rhs2 = (p.q_l1 + q12_star) / p.t_h1 - (p.q_l2 - q12_star) / p.t_h2;
    let det = -1.0 / p.t_h2 - 1.0 / p.t_h1;
    let qa1 = (rhs1 * (-1.0 / p.t_h2) - rhs2) / det;
    let qa2 = rhs1 - qa1;

    let w_f = [
        qa1 * (1.0 + p.beta1) / p.k_h1 - p.beta1,
        qa2 * (1.0 + p.beta2) / p.k_h2 - p.beta2,
    ];
    let u = [
        (w_f[0] - p.w_o1) / (1.0 - p.w_o1),
        (w_f[1] - p.w_o2) / (1.0 - p.w_o2),
    ];
    if !(0.0..=1.0).contains(&u[0]) || !(0.0..=1.0).contains(&u[1]) {
        return Err(fail(&format!(
            "required fuel input ({:.4}, {:.4}) outside [0, 1]",
            u[0], u[1]
        )));
    }

    // Electric side: solve P_e_i(delta) = P_m_i by damped Newton.
    let p_m_star = [p_m(p, 0, w_f[0]), p_m(p, 1, w_f[1])];
    let mut delta = [0.1, 0.1];
    let residual = |d: &[f64; 2]| -> SVector<f64, 2> {
        SVector::<f64, 2>::new(
            p_e1(p, d[0], d[1]) - p_m_star[0],
            p_e2(p, d[0], d[1]) - p_m_star[1],
        )
    };
    let mut res = residual(&delta);
    let mut converged = false;
    for _ in 0..100 {
        if res.amax() < 1e-13 {
            converged = true;
            break;
        }
        let s1 = [Dual::<2>::variable(delta[0], 0), Dual::<2>::variable(delta[1], 1)];
        let f1 = p_e1(p, s1[0], s1[1]);
        let f2 = p_e2(p, s1[0], s1[1]);
        let jac = SMatrix::<f64, 2, 2>::new(f1.d[0], f1.d[1], f2.d[0], f2.d[1]);
        let step = match jac.lu().solve(&res) {
            Some(s) => s,
            None => return Err(fail("singular power-flow Jacobian")),
        };
        // Damped update: halve until the residual norm decreases.
        let mut alpha = 1.0;
        let base_norm = res.norm();
        loop {
            let cand = [delta[0] - alpha * step[0], delta[1] - alpha * step[1]];
            let cand_res = residual(&cand);
            if cand_res.norm() < base_norm || alpha < 1e-6 {
                delta = cand;
                res = cand_res;
                break;
            }
            alpha *= 0.5;
        }
    }
    if !converged && res.amax() >= 1e-13 {
        return Err(fail("rotor-angle Newton iteration did not converge"));
    }

    // Locus condition: the bus power is now determined and must match y1.
    let y1_star = p_e_inf(p, delta[0], delta[1]);
    let scale = y1_target.abs().max(1.0);
    if (y1_star - y1_target).abs() > 1e-9 * scale {
        return Err(fail(&format!(
            "targets lie off the equilibrium locus (attainable y1 = {y1_star:.6} MW at y2 = {y2_target} MJ/s)"
        )));
    }

    let x_h1 = p.rho_s * p.friction_group * w_star * w_star.abs();
    let x = PlantState::from_array([
        w_f[0], w_f[0], w_f[0], w_f[1], w_f[1], w_f[1], delta[0], 0.0, delta[1], 0.0, x_h1,
        w_star, x_h3_target,
    ]);
    let u = SVector::<f64, NU>::new(u[0], u[1]);

    // Independent residual verification.
    let r = eval_closed_drift(p, &x, &u)?;
    if r.amax() >= 1e-10 {
        return Err(fail(&format!(
            "stationarity residual {:.3e} exceeds 1e-10",
            r.amax()
        )));
    }
    Ok((x, u))
}

/// Interior steady state parametrized by the site-1 fuel input, with the
/// heat balance pinning the site-2 input. Returns `(y1, y2, x, u2)`.
///
/// Sweeping `u1` traces the output locus on which full-system equilibria
/// exist.
pub fn steady_from_u1(p: &PlantParams, u1: f64) -> Result<(f64, f64, PlantState, f64), PlantError> {
    let fail = |reason: &str| PlantError::NoEquilibrium {
        y1: f64::NAN,
        y2: f64::NAN,
        reason: reason.into(),
    };
    let w_f1 = p.w_o1 + (1.0 - p.w_o1) * u1;
    let qa1: f64 = q_a(p, 0, w_f1);
    let qa2 = p.q_l1 + p.q_l2 - qa1;
    let w_f2 = qa2 * (1.0 + p.beta2) / p.k_h2 - p.beta2;
    let u2 = (w_f2 - p.w_o2) / (1.0 - p.w_o2);
    // Pipe flow from the pressure-difference balance.
    let q12 = (p.t_h2 * (qa1 - p.q_l1) - p.t_h1 * (qa2 - p.q_l2)) / (p.t_h1 + p.t_h2);
    let w = q12 / p.condensation_group;
    let y2 = q12 * p.q_r;
    let y1 = {
        // Reuse the electric solve from find_equilibrium via a local Newton.
        let p_m_star = [p_m(p, 0, w_f1), p_m(p, 1, w_f2)];
        let mut delta = [0.1, 0.1];
        for _ in 0..100 {
            let s = [Dual::<2>::variable(delta[0], 0), Dual::<2>::variable(delta[1], 1)];
            let f1 = p_e1(p, s[0], s[1]);
            let f2 = p_e2(p, s[0], s[1]);
            let res = SVector::<f64, 2>::new(f1.v - p_m_star[0], f2.v - p_m_star[1]);
            if res.amax() < 1e-13 {
                break;
            }
            let jac = SMatrix::<f64, 2, 2>::new(f1.d[0], f1.d[1], f2.d[0], f2.d[1]);
            let step = jac
                .lu()
                .solve(&res)
                .ok_or_else(|| fail("singular power-flow Jacobian"))?;
            delta[0] -= step[0];
            delta[1] -= step[1];
        }
        p_e_inf(p, delta[0], delta[1])
    };
    // Rebuild the full state for callers that need it.
    let x_h1 = p.rho_s * p.friction_group * w * w.abs();
    let delta = solve_angles(p, &[p_m(p, 0, w_f1), p_m(p, 1, w_f2)]).ok_or_else(|| {
        fail("rotor-angle Newton iteration did not converge")
    })?;
    let x = PlantState::from_array([
        w_f1, w_f1, w_f1, w_f2, w_f2, w_f2, delta[0], 0.0, delta[1], 0.0, x_h1, w, 0.0,
    ]);
    Ok((y1, y2, x, u2))
}

fn solve_angles(p: &PlantParams, p_m_star: &[f64; 2]) -> Option<[f64; 2]> {
    let mut delta = [0.1, 0.1];
    for _ in 0..100 {
        let s = [Dual::<2>::variable(delta[0], 0), Dual::<2>::variable(delta[1], 1)];
        let f1 = p_e1(p, s[0], s[1]);
        let f2 = p_e2(p, s[0], s[1]);
        let res = SVector::<f64, 2>::new(f1.v - p_m_star[0], f2.v - p_m_star[1]);
        if res.amax() < 1e-13 {
            return Some(delta);
        }
        let jac = SMatrix::<f64, 2, 2>::new(f1.d[0], f1.d[1], f2.d[0], f2.d[1]);
        let step = jac.lu().solve(&res)?;
        delta[0] -= step[0];
        delta[1] -= step[1];
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn test_params() -> PlantParams {
        crate::default_params()
    }

    fn symmetric_params() -> PlantParams {
        let mut p = test_params();
        p.k_e1 = 10.0;
        p.k_e2 = 10.0;
        p.k_h1 = 10.0;
        p.k_h2 = 10.0;
        p.g11 = 2.4;
        p.g22 = 2.4;
        p.q_l1 = 6.8;
        p.q_l2 = 6.8;
        p
    }

    fn random_state(rng_state: &mut u64) -> PlantState {
        // Small deterministic xorshift, no external RNG needed here.
        let mut next = || {
            *rng_state ^= *rng_state << 13;
            *rng_state ^= *rng_state >> 7;
            *rng_state ^= *rng_state << 17;
            (*rng_state as f64 / u64::MAX as f64) * 2.0 - 1.0
        };
        let mut x = [0.0; NX];
        for (i, v) in x.iter_mut().enumerate() {
            *v = match i {
                0..=5 => 0.6 + 0.3 * next(),
                6 | 8 => 0.2 + 0.25 * next(),
                7 | 9 => 0.3 * next(),
                10 => 0.57 + 0.4 * next(),
                11 => 0.845 + 0.4 * next(),
                _ => 40.0 * next(),
            };
        }
        PlantState::from_array(x)
    }

    #[test]
    fn gas_turbine_fixed_point_at_valve_floor() {
        let p = test_params();
        let x = PlantState::from_array([
            p.w_o1, p.w_o1, p.w_o1, p.w_o2, p.w_o2, p.w_o2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        ]);
        let f = eval_drift(&p, &x).unwrap();
        for i in 0..6 {
            assert_relative_eq!(f[i], 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn power_flow_at_zero_angles_is_conductive() {
        let p = test_params();
        let flows = energy_flows(&p, &PlantState::from_array([0.0; NX]));
        assert_relative_eq!(flows.p_pair[0], p.e1 * p.e2 * p.g12, max_relative = 1e-15);
        assert_relative_eq!(flows.p_pair[1], p.e1 * p.e_inf * p.g1inf, max_relative = 1e-15);
        assert_relative_eq!(flows.p_pair[2], p.e2 * p.e_inf * p.g2inf, max_relative = 1e-15);
    }

    #[test]
    fn zero_pipe_flow_drops_friction_and_transfer() {
        let p = test_params();
        let mut arr = [0.3; NX];
        arr[11] = 0.0; // w = 0
        let x = PlantState::from_array(arr);
        let f = eval_drift(&p, &x).unwrap();
        // Friction term vanishes: f_h2 reduces to x_h1 / (rho_s T_h3).
        assert_relative_eq!(f[11], arr[10] / (p.rho_s * p.t_h3), max_relative = 1e-14);
        // Q'_12 = 0: pressure-difference drift carries only the heat terms.
        let q1: f64 = q_a(&p, 0, arr[1]) - p.q_l1;
        let q2: f64 = q_a(&p, 1, arr[4]) - p.q_l2;
        assert_relative_eq!(f[10], q1 / p.t_h1 - q2 / p.t_h2, max_relative = 1e-13);
        let (_, y2, _) = outputs(&p, &x);
        assert_eq!(y2, 0.0);
    }

    #[test]
    fn input_fields_shape() {
        let p = test_params();
        let (g1, g2) = input_fields(&p);
        assert_relative_eq!(g1[0], (1.0 - p.w_o1) / p.t_v1, max_relative = 1e-15);
        assert_eq!(g1.iter().filter(|v| **v != 0.0).count(), 1);
        for (i, v) in g2.iter().enumerate() {
            if i != 3 {
                assert_eq!(*v, 0.0);
            }
        }
        let mut p0 = test_params();
        p0.w_o1 = 0.0;
        p0.t_v1 = 1.0;
        let (g1, _) = input_fields(&p0);
        assert_eq!(g1[0], 1.0);
    }

    #[test]
    fn pressure_output_is_affine() {
        let p = test_params();
        let mut arr = [0.0; NX];
        arr[12] = 0.0;
        let (_, _, y3) = outputs(&p, &PlantState::from_array(arr));
        assert_eq!(y3, p.p_base_kpa);
        arr[12] = 10.0;
        let (_, _, y3b) = outputs(&p, &PlantState::from_array(arr));
        assert_relative_eq!(y3b, p.p_base_kpa + 10.0 * p.p_r, max_relative = 1e-15);
    }

    #[test]
    fn jacobian_gas_block_structure() {
        let p = test_params();
        let mut seed = 0x1234_5678_9abc_def0u64;
        let x = random_state(&mut seed);
        let jac = eval_jacobian(&p, &x);
        assert_relative_eq!(jac[(0, 0)], -1.0 / p.t_v1, max_relative = 1e-15);
        assert_relative_eq!(jac[(1, 1)], -1.0 / p.t_f1, max_relative = 1e-15);
        assert_relative_eq!(jac[(2, 2)], -1.0 / p.t_cd1, max_relative = 1e-15);
        // Upper-triangular part of the per-site chain is zero.
        assert_eq!(jac[(0, 1)], 0.0);
        assert_eq!(jac[(1, 2)], 0.0);
        // Friction derivative d(w|w|)/dw = 2|w| with the sign handled inside.
        let w = x.0[11];
        assert_relative_eq!(
            jac[(11, 11)],
            -p.friction_group * 2.0 * w.abs() / p.t_h3,
            max_relative = 1e-13
        );
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let p = test_params();
        let mut seed = 0xdead_beef_0bad_cafeu64;
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let x = random_state(&mut seed);
            let jac = eval_jacobian(&p, &x);
            // Central differences with Richardson extrapolation: D(h/2) refined
            // against D(h) for an O(h^4) estimate.
            for c in 0..NX {
                let scale = x.0[c].abs().max(1.0);
                let h = 1e-6 * scale;
                let col_fd = |step: f64| -> SVector<f64, NX> {
                    let mut xp = x;
                    let mut xm = x;
                    xp.0[c] += step;
                    xm.0[c] -= step;
                    (eval_drift(&p, &xp).unwrap() - eval_drift(&p, &xm).unwrap()) / (2.0 * step)
                };
                let d_h = col_fd(h);
                let d_h2 = col_fd(h / 2.0);
                let refined = (d_h2 * 4.0 - d_h) / 3.0;
                for r in 0..NX {
                    let denom = refined[r].abs().max(1e-3);
                    worst = worst.max((jac[(r, c)] - refined[r]).abs() / denom);
                }
            }
        }
        assert!(worst < 1e-6, "max relative Jacobian error {worst}");
    }

    #[test]
    fn heat_conservation_identity() {
        let p = test_params();
        let mut seed = 0x0fed_cba9_8765_4321u64;
        for _ in 0..200 {
            let x = random_state(&mut seed);
            let f = eval_drift(&p, &x).unwrap();
            let expected: f64 =
                q_a(&p, 0, x.0[1]) - p.q_l1 + q_a(&p, 1, x.0[4]) - p.q_l2;
            assert_relative_eq!(f[12], expected, max_relative = 1e-14, epsilon = 1e-14);
        }
    }

    #[test]
    fn pipe_transfer_antisymmetry() {
        let p = test_params();
        for k in -10..=10 {
            let w = k as f64 * 0.173;
            let q12: f64 = q_12(&p, w);
            let q21: f64 = q_12(&p, -w);
            assert_eq!(q12 + q21, 0.0);
        }
    }

    #[test]
    fn gas_subsystem_lipschitz_bound() {
        let p = test_params();
        let lip = (1.0 / p.t_v1)
            .max(1.0 / p.t_f1)
            .max(1.0 / p.t_cd1)
            .max(1.0 / p.t_v2)
            .max(1.0 / p.t_f2)
            .max(1.0 / p.t_cd2);
        let mut seed = 0x1111_2222_3333_4444u64;
        for _ in 0..100 {
            let xa = random_state(&mut seed);
            let xb = random_state(&mut seed);
            let a = xa;
            let mut b = xa;
            // Perturb only gas states so the bound applies exactly.
            for i in 0..6 {
                b.0[i] = xb.0[i];
            }
            let fa = eval_drift(&p, &a).unwrap();
            let fb = eval_drift(&p, &b).unwrap();
            let df = (fa.fixed_rows::<6>(0) - fb.fixed_rows::<6>(0)).norm();
            let dx = (a.0.fixed_rows::<6>(0) - b.0.fixed_rows::<6>(0)).norm();
            // Chain coupling means per-row constants combine; 2x the per-row
            // bound is a safe envelope for the stacked 6-dim block.
            assert!(df <= 2.0 * lip * dx + 1e-12, "df={df} dx={dx}");
        }
    }

    #[test]
    fn non_finite_state_rejected() {
        let p = test_params();
        let mut arr = [0.0; NX];
        arr[4] = f64::NAN;
        assert!(matches!(
            eval_drift(&p, &PlantState::from_array(arr)),
            Err(PlantError::NonFiniteState)
        ));
    }

    #[test]
    fn equilibrium_at_nominal_targets() {
        let p = test_params();
        let (x, u) = find_equilibrium(&p, 5.0, 1.69).unwrap();
        let r = eval_closed_drift(&p, &x, &u).unwrap();
        assert!(r.amax() < 1e-10, "residual {:.3e}", r.amax());
        let (y1, y2, y3) = outputs(&p, &x);
        assert_relative_eq!(y1, 5.0, max_relative = 1e-9);
        assert_relative_eq!(y2, 1.69, max_relative = 1e-9);
        assert_relative_eq!(y3, p.p_base_kpa, max_relative = 1e-12);
    }

    #[test]
    fn symmetric_zero_transfer_equilibrium() {
        let p = symmetric_params();
        let y1 = {
            // Attainable y1 for this symmetric file at y2 = 0.
            let (x, _) = find_equilibrium(&p, find_attainable_y1(&p), 0.0).unwrap();
            outputs(&p, &x).0
        };
        let (x, u) = find_equilibrium(&p, y1, 0.0).unwrap();
        assert_relative_eq!(x.0[11], 0.0, epsilon = 1e-12); // w* = 0
        assert_relative_eq!(u[0], u[1], epsilon = 1e-12);
        for i in 0..3 {
            assert_relative_eq!(x.0[i], x.0[i + 3], epsilon = 1e-12);
        }
        assert_relative_eq!(x.0[6], x.0[8], epsilon = 1e-10);
    }

    fn find_attainable_y1(p: &PlantParams) -> f64 {
        // The heat side fully determines the state at y2 = 0; read off y1.
        let q12 = 0.0;
        let rhs1 = p.q_l1 + p.q_l2;
        let rhs2 = (p.q_l1 + q12) / p.t_h1 - (p.q_l2 - q12) / p.t_h2;
        let det = -1.0 / p.t_h2 - 1.0 / p.t_h1;
        let qa1 = (rhs1 * (-1.0 / p.t_h2) - rhs2) / det;
        let qa2 = rhs1 - qa1;
        let w_f1 = qa1 * (1.0 + p.beta1) / p.k_h1 - p.beta1;
        let w_f2 = qa2 * (1.0 + p.beta2) / p.k_h2 - p.beta2;
        let delta = solve_angles(p, &[p_m(p, 0, w_f1), p_m(p, 1, w_f2)]).unwrap();
        p_e_inf(p, delta[0], delta[1])
    }

    #[test]
    fn equilibrium_beyond_capacity_rejected() {
        let p = test_params();
        assert!(matches!(
            find_equilibrium(&p, 1000.0, 1.69),
            Err(PlantError::NoEquilibrium { .. })
        ));
        // Heat demand beyond rated recovery is also rejected (u leaves [0,1]).
        assert!(matches!(
            find_equilibrium(&p, 5.0, 50.0),
            Err(PlantError::NoEquilibrium { .. })
        ));
    }

    #[test]
    fn params_loader_rejects_unknown_and_missing_keys() {
        let p = test_params();
        let mut doc: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        doc.insert("bogus_key".into(), 1.0.into());
        let text = serde_json::to_string(&doc).unwrap();
        let err = PlantParams::from_json_str(&text).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");

        doc.remove("bogus_key");
        doc.remove("t_h3");
        let text = serde_json::to_string(&doc).unwrap();
        let err = PlantParams::from_json_str(&text).unwrap_err();
        assert!(err.to_string().contains("t_h3"), "{err}");
    }

    #[test]
    fn params_validation_catches_bad_values() {
        let mut p = test_params();
        p.t_v1 = -0.5;
        assert!(matches!(p.validate(), Err(PlantError::InvalidParams { .. })));
        let mut p = test_params();
        p.w_o1 = 1.0;
        assert!(p.validate().is_err());
    }
}
