//! Feedback-linearizing coordinate transformation.
//!
//! The tracked outputs have vector relative degree {5, 4}: stacking their
//! Lie derivatives along the drift gives the chain coordinates
//! `xi_e = (y1, L_f y1, ..., L_f^4 y1)` and `xi_h = (y2, ..., L_f^3 y2)`,
//! completed by the internal coordinates `eta = (x_g3, x_e1, x_e2, x_h3)`.
//!
//! All Lie derivatives are obtained by propagating the drift flow as a
//! truncated Taylor jet: the k-th Taylor coefficient of `h(x(t))` along
//! `x' = f(x)` equals `L_f^k h / k!`. Running the same propagation over
//! [`MultiDual`] coefficients yields gradients (for the transform Jacobian)
//! and directional derivatives along the input fields (for the decoupling
//! matrix) in single passes, exact to round-off.

use nalgebra::{SMatrix, SVector};

use crate::ad::{Dual, Jet, MultiDual, Scalar};
use crate::plant::{self, PlantParams, PlantState, NX};

const FACT: [f64; 6] = [1.0, 1.0, 2.0, 6.0, 24.0, 120.0];

#[derive(Debug, thiserror::Error)]
pub enum TransformError {
    #[error("decoupling matrix is singular (|det| = {det:.3e})")]
    SingularDecoupling { det: f64 },
    #[error("transform not invertible near the given guess: {reason}")]
    NotInvertibleHere { reason: String },
    #[error("unsupported output field id")]
    UnsupportedField,
    #[error("gain polynomial is not Hurwitz")]
    NotHurwitz,
    #[error(transparent)]
    Plant(#[from] plant::PlantError),
}

/// Normal-form coordinates (xi_e, xi_h, eta).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformedState {
    pub xi_e: SVector<f64, 5>,
    pub xi_h: SVector<f64, 4>,
    pub eta: SVector<f64, 4>,
}

impl TransformedState {
    /// Outer-chain state z = (xi_e, xi_h).
    pub fn z(&self) -> SVector<f64, 9> {
        let mut z = SVector::<f64, 9>::zeros();
        z.fixed_rows_mut::<5>(0).copy_from(&self.xi_e);
        z.fixed_rows_mut::<4>(5).copy_from(&self.xi_h);
        z
    }

    pub fn w(&self) -> SVector<f64, 4> {
        self.eta
    }

    pub fn from_zw(z: &SVector<f64, 9>, w: &SVector<f64, 4>) -> Self {
        Self {
            xi_e: z.fixed_rows::<5>(0).into_owned(),
            xi_h: z.fixed_rows::<4>(5).into_owned(),
            eta: *w,
        }
    }

    /// Stacked 13-vector in the row order used by the transform Jacobian.
    pub fn stacked(&self) -> SVector<f64, NX> {
        let mut s = SVector::<f64, NX>::zeros();
        s.fixed_rows_mut::<5>(0).copy_from(&self.xi_e);
        s.fixed_rows_mut::<4>(5).copy_from(&self.xi_h);
        s.fixed_rows_mut::<4>(9).copy_from(&self.eta);
        s
    }

    pub fn from_stacked(s: &SVector<f64, NX>) -> Self {
        Self {
            xi_e: s.fixed_rows::<5>(0).into_owned(),
            xi_h: s.fixed_rows::<4>(5).into_owned(),
            eta: s.fixed_rows::<4>(9).into_owned(),
        }
    }
}

/// Stabilizing polynomial coefficients, ascending powers:
/// `s^5 + a_e5 s^4 + ... + a_e1` and `s^4 + a_h4 s^3 + ... + a_h1`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HurwitzGains {
    pub alpha_e: [f64; 5],
    pub alpha_h: [f64; 4],
}

impl HurwitzGains {
    pub fn new(alpha_e: [f64; 5], alpha_h: [f64; 4]) -> Result<Self, TransformError> {
        let g = Self { alpha_e, alpha_h };
        if !is_hurwitz(&alpha_e) || !is_hurwitz(&alpha_h) {
            return Err(TransformError::NotHurwitz);
        }
        Ok(g)
    }
}

impl Default for HurwitzGains {
    /// Critically damped poles at -1 rad/s: `(s + 1)^5` and `(s + 1)^4`.
    fn default() -> Self {
        Self {
            alpha_e: [1.0, 5.0, 10.0, 10.0, 5.0],
            alpha_h: [1.0, 4.0, 6.0, 4.0],
        }
    }
}

/// Routh–Hurwitz test for a monic polynomial with ascending coefficients
/// `alpha[0] + alpha[1] s + ... + s^n`.
pub fn is_hurwitz(alpha: &[f64]) -> bool {
    let n = alpha.len();
    // Descending coefficient list [1, alpha_{n-1}, ..., alpha_0].
    let mut coeffs = Vec::with_capacity(n + 1);
    coeffs.push(1.0);
    for k in (0..n).rev() {
        coeffs.push(alpha[k]);
    }
    if coeffs.iter().any(|c| !c.is_finite()) {
        return false;
    }
    let width = n / 2 + 1;
    let mut row0: Vec<f64> = (0..width).map(|i| *coeffs.get(2 * i).unwrap_or(&0.0)).collect();
    let mut row1: Vec<f64> = (0..width).map(|i| *coeffs.get(2 * i + 1).unwrap_or(&0.0)).collect();
    let mut first_col = vec![row0[0], row1[0]];
    for _ in 2..=n {
        if row1[0].abs() < 1e-300 {
            return false;
        }
        let mut next = vec![0.0; width];
        for i in 0..width - 1 {
            next[i] = (row1[0] * row0[i + 1] - row0[0] * row1[i + 1]) / row1[0];
        }
        first_col.push(next[0]);
        row0 = std::mem::take(&mut row1);
        row1 = next;
    }
    first_col.iter().all(|&c| c > 0.0)
}

/// Propagate the drift flow from `x0` as a degree-(M-1) Taylor jet.
fn flow_jet<T: Scalar, const M: usize>(p: &PlantParams, x0: &[T; NX]) -> [Jet<T, M>; NX] {
    let mut xj: [Jet<T, M>; NX] = [Jet::zero(); NX];
    for i in 0..NX {
        xj[i].c[0] = x0[i];
    }
    for m in 0..M - 1 {
        let fj = plant::drift(p, &xj);
        for i in 0..NX {
            xj[i].c[m + 1] = fj[i].c[m].scale(1.0 / (m as f64 + 1.0));
        }
    }
    xj
}

fn state_array(x: &PlantState) -> [f64; NX] {
    let mut a = [0.0; NX];
    a.copy_from_slice(x.0.as_slice());
    a
}

/// Output chains evaluated at `x`: value parts are the Lie derivatives
/// `L_f^k h1 (k = 0..=5)` and `L_f^k h2 (k = 0..=4)`; the two dual lanes
/// carry their directional derivatives along the input fields g1, g2.
struct ChainEval {
    lf_h1: [Dual<2>; 6],
    lf_h2: [Dual<2>; 5],
}

fn eval_chains(p: &PlantParams, x: &PlantState) -> ChainEval {
    let xs = state_array(x);
    let (g1, g2) = plant::input_fields(p);
    let mut seeds = [Dual::<2>::constant(0.0); NX];
    for i in 0..NX {
        seeds[i] = MultiDual::seeded(xs[i], [g1[i], g2[i]]);
    }
    let xj = flow_jet::<Dual<2>, 6>(p, &seeds);
    let y1 = plant::h1(p, &xj);
    let y2 = plant::h2(p, &xj);
    let mut lf_h1 = [Dual::<2>::constant(0.0); 6];
    let mut lf_h2 = [Dual::<2>::constant(0.0); 5];
    for k in 0..6 {
        lf_h1[k] = y1.c[k].scale(FACT[k]);
    }
    for k in 0..5 {
        lf_h2[k] = y2.c[k].scale(FACT[k]);
    }
    ChainEval { lf_h1, lf_h2 }
}

/// Forward transform Phi(x).
pub fn forward_transform(p: &PlantParams, x: &PlantState) -> TransformedState {
    let xs = state_array(x);
    let xj = flow_jet::<f64, 5>(p, &xs);
    let y1 = plant::h1(p, &xj);
    let y2 = plant::h2(p, &xj);
    let mut xi_e = SVector::<f64, 5>::zeros();
    let mut xi_h = SVector::<f64, 4>::zeros();
    for k in 0..5 {
        xi_e[k] = y1.c[k] * FACT[k];
    }
    for k in 0..4 {
        xi_h[k] = y2.c[k] * FACT[k];
    }
    TransformedState { xi_e, xi_h, eta: x.eta() }
}

/// Output field selector for the public Lie-derivative API.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputField {
    Y1,
    Y2,
}

/// `L_f^order h` for a tracked output. Orders up to 5 for y1, 4 for y2.
pub fn lie_derivative(
    p: &PlantParams,
    field: OutputField,
    order: usize,
    x: &PlantState,
) -> Result<f64, TransformError> {
    let max = match field {
        OutputField::Y1 => 5,
        OutputField::Y2 => 4,
    };
    if order > max {
        return Err(TransformError::UnsupportedField);
    }
    let ch = eval_chains(p, x);
    Ok(match field {
        OutputField::Y1 => ch.lf_h1[order].v,
        OutputField::Y2 => ch.lf_h2[order].v,
    })
}

/// Mixed derivative `L_{g_input} L_f^order h`.
pub fn mixed_lie_derivative(
    p: &PlantParams,
    field: OutputField,
    input: usize,
    order: usize,
    x: &PlantState,
) -> Result<f64, TransformError> {
    if input > 1 {
        return Err(TransformError::UnsupportedField);
    }
    let max = match field {
        OutputField::Y1 => 4,
        OutputField::Y2 => 3,
    };
    if order > max {
        return Err(TransformError::UnsupportedField);
    }
    let ch = eval_chains(p, x);
    Ok(match field {
        OutputField::Y1 => ch.lf_h1[order].d[input],
        OutputField::Y2 => ch.lf_h2[order].d[input],
    })
}

/// Jacobian of Phi in the stacked row order (xi_e, xi_h, eta).
pub fn phi_jacobian(p: &PlantParams, x: &PlantState) -> SMatrix<f64, NX, NX> {
    let xs = state_array(x);
    let mut seeds = [Dual::<NX>::constant(0.0); NX];
    for i in 0..NX {
        seeds[i] = Dual::variable(xs[i], i);
    }
    let xj = flow_jet::<Dual<NX>, 5>(p, &seeds);
    let y1 = plant::h1(p, &xj);
    let y2 = plant::h2(p, &xj);
    let mut jac = SMatrix::<f64, NX, NX>::zeros();
    for k in 0..5 {
        for c in 0..NX {
            jac[(k, c)] = y1.c[k].d[c] * FACT[k];
        }
    }
    for k in 0..4 {
        for c in 0..NX {
            jac[(5 + k, c)] = y2.c[k].d[c] * FACT[k];
        }
    }
    for (r, &i) in plant::ETA_IDX.iter().enumerate() {
        jac[(9 + r, i)] = 1.0;
    }
    jac
}

/// One-pass evaluation of everything the feedback law needs at `x`.
#[derive(Clone, Copy, Debug)]
pub struct NormalFormEval {
    pub xi_e: SVector<f64, 5>,
    pub xi_h: SVector<f64, 4>,
    pub lf5_h1: f64,
    pub lf4_h2: f64,
    pub a_dec: SMatrix<f64, 2, 2>,
}

pub fn eval_normal_form(p: &PlantParams, x: &PlantState) -> NormalFormEval {
    let ch = eval_chains(p, x);
    let mut xi_e = SVector::<f64, 5>::zeros();
    let mut xi_h = SVector::<f64, 4>::zeros();
    for k in 0..5 {
        xi_e[k] = ch.lf_h1[k].v;
    }
    for k in 0..4 {
        xi_h[k] = ch.lf_h2[k].v;
    }
    let a_dec = SMatrix::<f64, 2, 2>::new(
        ch.lf_h1[4].d[0],
        ch.lf_h1[4].d[1],
        ch.lf_h2[3].d[0],
        ch.lf_h2[3].d[1],
    );
    NormalFormEval {
        xi_e,
        xi_h,
        lf5_h1: ch.lf_h1[5].v,
        lf4_h2: ch.lf_h2[4].v,
        a_dec,
    }
}

/// Decoupling matrix A_dec(x).
pub fn decoupling_matrix(p: &PlantParams, x: &PlantState) -> SMatrix<f64, 2, 2> {
    eval_normal_form(p, x).a_dec
}

/// [`NormalFormEval`] plus exact first-order state derivatives of every
/// quantity the feedback law uses, from one nested-dual jet pass. These are
/// the second-order Lie objects needed to differentiate the closed loop.
#[derive(Clone, Debug)]
pub struct NormalFormDerivs {
    pub nf: NormalFormEval,
    pub grad_xi_e: [SVector<f64, NX>; 5],
    pub grad_xi_h: [SVector<f64, NX>; 4],
    pub grad_lf5_h1: SVector<f64, NX>,
    pub grad_lf4_h2: SVector<f64, NX>,
    /// Gradient of each decoupling-matrix entry, indexed `[row][col]`.
    pub grad_a_dec: [[SVector<f64, NX>; 2]; 2],
}

pub fn eval_normal_form_derivs(p: &PlantParams, x: &PlantState) -> NormalFormDerivs {
    // Outer duals: the 13 coordinate directions. Inner duals: the two input
    // fields, so inner parts of outer derivatives are mixed second-order
    // derivatives (gradients of the decoupling entries).
    type T2 = MultiDual<Dual<2>, NX>;
    let xs = state_array(x);
    let (g1, g2) = plant::input_fields(p);
    let mut seeds = [T2::constant(Dual::constant(0.0)); NX];
    for j in 0..NX {
        seeds[j] = T2::variable(Dual::seeded(xs[j], [g1[j], g2[j]]), j);
    }
    let xj = flow_jet::<T2, 6>(p, &seeds);
    let y1 = plant::h1(p, &xj);
    let y2 = plant::h2(p, &xj);

    let mut xi_e = SVector::<f64, 5>::zeros();
    let mut xi_h = SVector::<f64, 4>::zeros();
    let mut grad_xi_e = [SVector::<f64, NX>::zeros(); 5];
    let mut grad_xi_h = [SVector::<f64, NX>::zeros(); 4];
    for k in 0..5 {
        let c = y1.c[k];
        xi_e[k] = c.v.v * FACT[k];
        for j in 0..NX {
            grad_xi_e[k][j] = c.d[j].v * FACT[k];
        }
    }
    for k in 0..4 {
        let c = y2.c[k];
        xi_h[k] = c.v.v * FACT[k];
        for j in 0..NX {
            grad_xi_h[k][j] = c.d[j].v * FACT[k];
        }
    }
    let mut grad_lf5_h1 = SVector::<f64, NX>::zeros();
    let mut grad_lf4_h2 = SVector::<f64, NX>::zeros();
    for j in 0..NX {
        grad_lf5_h1[j] = y1.c[5].d[j].v * FACT[5];
        grad_lf4_h2[j] = y2.c[4].d[j].v * FACT[4];
    }
    let a_dec = SMatrix::<f64, 2, 2>::new(
        y1.c[4].v.d[0] * FACT[4],
        y1.c[4].v.d[1] * FACT[4],
        y2.c[3].v.d[0] * FACT[3],
        y2.c[3].v.d[1] * FACT[3],
    );
    let mut grad_a_dec = [[SVector::<f64, NX>::zeros(); 2]; 2];
    for j in 0..NX {
        grad_a_dec[0][0][j] = y1.c[4].d[j].d[0] * FACT[4];
        grad_a_dec[0][1][j] = y1.c[4].d[j].d[1] * FACT[4];
        grad_a_dec[1][0][j] = y2.c[3].d[j].d[0] * FACT[3];
        grad_a_dec[1][1][j] = y2.c[3].d[j].d[1] * FACT[3];
    }
    NormalFormDerivs {
        nf: NormalFormEval {
            xi_e,
            xi_h,
            lf5_h1: y1.c[5].v.v * FACT[5],
            lf4_h2: y2.c[4].v.v * FACT[4],
            a_dec,
        },
        grad_xi_e,
        grad_xi_h,
        grad_lf5_h1,
        grad_lf4_h2,
        grad_a_dec,
    }
}

pub const DET_THRESHOLD: f64 = 1e-10;
pub const COND_THRESHOLD: f64 = 1e10;

/// Feedback-linearizing input law: maps virtual inputs `v` to physical
/// inputs `u` so that the closed loop realizes the chain dynamics
/// `xi' = A xi + B v` with the companion matrices of [`outer_matrices`]
/// exactly (the `alpha_1`-scaling of `v` makes the chains unity-DC-gain,
/// so a constant `v` commands the corresponding steady output).
pub fn feedback_law(
    p: &PlantParams,
    gains: &HurwitzGains,
    x: &PlantState,
    v: &SVector<f64, 2>,
) -> Result<SVector<f64, 2>, TransformError> {
    let nf = eval_normal_form(p, x);
    feedback_law_from_eval(gains, &nf, v)
}

pub fn feedback_law_from_eval(
    gains: &HurwitzGains,
    nf: &NormalFormEval,
    v: &SVector<f64, 2>,
) -> Result<SVector<f64, 2>, TransformError> {
    let det = nf.a_dec[(0, 0)] * nf.a_dec[(1, 1)] - nf.a_dec[(0, 1)] * nf.a_dec[(1, 0)];
    if det.abs() <= DET_THRESHOLD || !det.is_finite() {
        return Err(TransformError::SingularDecoupling { det });
    }
    let mut b_e = -nf.lf5_h1 + gains.alpha_e[0] * v[0];
    for j in 0..5 {
        b_e -= gains.alpha_e[j] * nf.xi_e[j];
    }
    let mut b_h = -nf.lf4_h2 + gains.alpha_h[0] * v[1];
    for j in 0..4 {
        b_h -= gains.alpha_h[j] * nf.xi_h[j];
    }
    let u1 = (nf.a_dec[(1, 1)] * b_e - nf.a_dec[(0, 1)] * b_h) / det;
    let u2 = (-nf.a_dec[(1, 0)] * b_e + nf.a_dec[(0, 0)] * b_h) / det;
    Ok(SVector::<f64, 2>::new(u1, u2))
}

/// Inverse of [`feedback_law`]: the virtual input that reproduces a given
/// physical input at `x`.
pub fn virtual_input_for(
    p: &PlantParams,
    gains: &HurwitzGains,
    x: &PlantState,
    u: &SVector<f64, 2>,
) -> SVector<f64, 2> {
    let nf = eval_normal_form(p, x);
    let au = nf.a_dec * u;
    let mut v1 = au[0] + nf.lf5_h1;
    for j in 0..5 {
        v1 += gains.alpha_e[j] * nf.xi_e[j];
    }
    let mut v2 = au[1] + nf.lf4_h2;
    for j in 0..4 {
        v2 += gains.alpha_h[j] * nf.xi_h[j];
    }
    SVector::<f64, 2>::new(v1 / gains.alpha_e[0], v2 / gains.alpha_h[0])
}

/// Companion-form outer matrices for the linearized chains and the
/// unity-DC-gain input columns `B := -A e_1`.
pub fn outer_matrices(
    gains: &HurwitzGains,
) -> (
    SMatrix<f64, 5, 5>,
    SVector<f64, 5>,
    SMatrix<f64, 4, 4>,
    SVector<f64, 4>,
) {
    let mut a_e = SMatrix::<f64, 5, 5>::zeros();
    for i in 0..4 {
        a_e[(i, i + 1)] = 1.0;
    }
    for j in 0..5 {
        a_e[(4, j)] = -gains.alpha_e[j];
    }
    let mut a_h = SMatrix::<f64, 4, 4>::zeros();
    for i in 0..3 {
        a_h[(i, i + 1)] = 1.0;
    }
    for j in 0..4 {
        a_h[(3, j)] = -gains.alpha_h[j];
    }
    let b_e = -a_e * SVector::<f64, 5>::x();
    let b_h = -a_h * SVector::<f64, 4>::x();
    (a_e, b_e, a_h, b_h)
}

/// Newton inversion of Phi, seeded at `x_guess`. Returns the preimage and
/// the number of Newton updates taken.
pub fn inverse_transform_counted(
    p: &PlantParams,
    target: &TransformedState,
    x_guess: &PlantState,
) -> Result<(PlantState, usize), TransformError> {
    let t = target.stacked();
    let scale = t.amax().max(1.0);
    // The high-order chain components carry round-off amplified by the chain
    // gains; `loose` is the acceptance floor once Newton steps reach machine
    // size, `tight` the early-exit tolerance.
    let tight = 1e-11 * scale;
    let loose = 1e-8 * scale;
    let mut x = *x_guess;
    let mut iters = 0usize;
    for _ in 0..50 {
        let cur = forward_transform(p, &x).stacked();
        let res = t - cur;
        if res.amax() <= tight {
            return Ok((x, iters));
        }
        let jac = phi_jacobian(p, &x);
        let lu = jac.lu();
        let step = lu.solve(&res).ok_or_else(|| TransformError::NotInvertibleHere {
            reason: "singular transform Jacobian".into(),
        })?;
        if !step.iter().all(|v| v.is_finite()) {
            return Err(TransformError::NotInvertibleHere {
                reason: "non-finite Newton step".into(),
            });
        }
        if step.amax() <= 1e-13 * x.0.amax().max(1.0) && res.amax() <= loose {
            return Ok((x, iters));
        }
        // Damped update.
        let base = res.norm();
        let mut alpha = 1.0;
        loop {
            let cand = PlantState(x.0 + step * alpha);
            let cand_res = t - forward_transform(p, &cand).stacked();
            if cand_res.norm() < base {
                x = cand;
                break;
            }
            alpha *= 0.5;
            if alpha < 1e-8 {
                if res.amax() <= loose {
                    return Ok((x, iters));
                }
                return Err(TransformError::NotInvertibleHere {
                    reason: "Newton iteration stalled".into(),
                });
            }
        }
        iters += 1;
    }
    let cur = forward_transform(p, &x).stacked();
    if (t - cur).amax() <= loose {
        return Ok((x, iters));
    }
    Err(TransformError::NotInvertibleHere {
        reason: "iteration budget exhausted".into(),
    })
}

/// Newton inversion of Phi near `x_guess`.
pub fn inverse_transform(
    p: &PlantParams,
    target: &TransformedState,
    x_guess: &PlantState,
) -> Result<PlantState, TransformError> {
    inverse_transform_counted(p, target, x_guess).map(|(x, _)| x)
}

/// Operational domain check: decoupling-matrix determinant and transform
/// conditioning at `x`.
#[derive(Clone, Copy, Debug)]
pub struct RegularityReport {
    pub det_a_dec: f64,
    pub cond_phi: f64,
    pub ok: bool,
}

pub fn regularity(p: &PlantParams, x: &PlantState) -> RegularityReport {
    let a = decoupling_matrix(p, x);
    let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
    let jac = phi_jacobian(p, x);
    let svd = jac.svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    RegularityReport {
        det_a_dec: det,
        cond_phi: cond,
        ok: det.abs() > DET_THRESHOLD && cond < COND_THRESHOLD,
    }
}

/// State sampler used across the test suites: a box around a reference
/// state well inside the transform's regular domain.
#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn sample_state(rng: &mut ChaCha8Rng, x_star: &PlantState) -> PlantState {
        let mut x = *x_star;
        for i in 0..NX {
            let span = match i {
                0..=5 => 0.12,
                6 | 8 => 0.1,
                7 | 9 => 0.1,
                10 => 0.2,
                11 => 0.25,
                _ => 30.0,
            };
            x.0[i] += rng.gen_range(-span..span);
        }
        x
    }
}
