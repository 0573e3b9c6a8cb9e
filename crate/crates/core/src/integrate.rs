//! Fixed-step integration of the normal-form system and its sensitivities.
//!
//! The internal transition map advances the coupled chain/internal state
//! `(z, w)` one sampling period under a constant virtual input. The chain
//! part is linear; the internal rate `q(z, w)` is evaluated by inverting the
//! coordinate transformation at every integration stage (warm-started Newton,
//! typically one update). Sensitivities differentiate the *discrete* RK4 map
//! exactly — each stage's Jacobian is chained through the tableau — so a
//! finite-difference probe of the implemented map reproduces them to
//! round-off rather than truncation accuracy.

use nalgebra::{SMatrix, SVector};

use crate::plant::{self, PlantParams, PlantState, NX};
use crate::transform::{
    self, feedback_law, forward_transform, inverse_transform_counted, HurwitzGains,
    TransformedState, TransformError,
};

#[derive(Debug, thiserror::Error)]
pub enum IntegrateError {
    #[error("state diverged (non-finite) during integration")]
    Divergence,
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Plant(#[from] plant::PlantError),
}

/// Classical fixed-step RK4 over a closure field; the field captures any
/// held input. Deterministic; errors if the state leaves the finite range.
pub fn rk4_integrate<const D: usize>(
    field: &mut impl FnMut(&SVector<f64, D>) -> Result<SVector<f64, D>, IntegrateError>,
    s0: SVector<f64, D>,
    duration: f64,
    substeps: usize,
) -> Result<SVector<f64, D>, IntegrateError> {
    assert!(substeps >= 1, "substeps must be >= 1");
    if duration == 0.0 {
        return Ok(s0);
    }
    let h = duration / substeps as f64;
    let mut s = s0;
    for _ in 0..substeps {
        let k1 = field(&s)?;
        let k2 = field(&(s + k1 * (h / 2.0)))?;
        let k3 = field(&(s + k2 * (h / 2.0)))?;
        let k4 = field(&(s + k3 * h))?;
        s += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if !s.iter().all(|v| v.is_finite()) {
            return Err(IntegrateError::Divergence);
        }
    }
    Ok(s)
}

/// A system with first-order sensitivity information: the Jacobian of the
/// field with respect to the state plus constant forcing columns (here, the
/// held virtual input).
pub trait VariationalSystem<const D: usize, const P: usize> {
    /// Field value at `s`; `want_jac` additionally requests
    /// `(d field / d s, d field / d forcing)`.
    #[allow(clippy::type_complexity)]
    fn eval(
        &mut self,
        s: &SVector<f64, D>,
        want_jac: bool,
    ) -> Result<(SVector<f64, D>, Option<(SMatrix<f64, D, D>, SMatrix<f64, D, P>)>), IntegrateError>;
}

/// Integrate a [`VariationalSystem`] together with the exact derivative of
/// the discrete map. `m0` has `C = D + P` columns: `D` state-sensitivity
/// columns and `P` forcing columns.
pub fn rk4_with_sensitivity<const D: usize, const P: usize, const C: usize>(
    sys: &mut impl VariationalSystem<D, P>,
    s0: SVector<f64, D>,
    m0: SMatrix<f64, D, C>,
    duration: f64,
    substeps: usize,
) -> Result<(SVector<f64, D>, SMatrix<f64, D, C>), IntegrateError> {
    assert!(substeps >= 1);
    assert_eq!(C, D + P, "sensitivity columns must cover state plus forcing");
    if duration == 0.0 {
        return Ok((s0, m0));
    }
    let h = duration / substeps as f64;
    let mut s = s0;
    let mut m = m0;

    // d K_i / d(columns) for one stage: J(s_i) * P_i plus forcing columns.
    let stage = |sys: &mut dyn VariationalSystem<D, P>,
                 si: &SVector<f64, D>,
                 pi: &SMatrix<f64, D, C>|
     -> Result<(SVector<f64, D>, SMatrix<f64, D, C>), IntegrateError> {
        let (k, jac) = sys.eval(si, true)?;
        let (j_s, j_p) = jac.expect("jacobian requested");
        let mut mi = j_s * pi;
        for c in 0..P {
            let add = j_p.column(c);
            let mut col = mi.column_mut(D + c);
            col += add;
        }
        Ok((k, mi))
    };

    for _ in 0..substeps {
        let (k1, m1) = stage(sys, &s, &m)?;
        let s2 = s + k1 * (h / 2.0);
        let p2 = m + m1 * (h / 2.0);
        let (k2, m2) = stage(sys, &s2, &p2)?;
        let s3 = s + k2 * (h / 2.0);
        let p3 = m + m2 * (h / 2.0);
        let (k3, m3) = stage(sys, &s3, &p3)?;
        let s4 = s + k3 * h;
        let p4 = m + m3 * h;
        let (k4, m4) = stage(sys, &s4, &p4)?;
        s += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        m += (m1 + m2 * 2.0 + m3 * 2.0 + m4) * (h / 6.0);
        if !s.iter().all(|v| v.is_finite()) {
            return Err(IntegrateError::Divergence);
        }
    }
    Ok((s, m))
}

/// Per-step linearization of the internal transition map.
#[derive(Clone, Copy, Debug)]
pub struct SensitivityTriplet {
    pub f_z: SMatrix<f64, 4, 9>,
    pub f_w: SMatrix<f64, 4, 4>,
    pub g_w: SMatrix<f64, 4, 2>,
    /// Affine offset `w_next - F_z z - F_w w - G_w v` at the expansion point.
    pub w_tilde: SVector<f64, 4>,
}

/// Physical plant under the continuously evaluated feedback law, with exact
/// Jacobians of the closed-loop field. Differentiating the input law needs
/// the second-order Lie objects supplied by
/// [`transform::eval_normal_form_derivs`].
struct ClosedLoopField<'a> {
    p: &'a PlantParams,
    gains: &'a HurwitzGains,
    v: SVector<f64, 2>,
    g_mat: SMatrix<f64, NX, 2>,
}

impl<'a> ClosedLoopField<'a> {
    fn new(p: &'a PlantParams, gains: &'a HurwitzGains, v: SVector<f64, 2>) -> Self {
        let (g1, g2) = plant::input_fields(p);
        let mut g_mat = SMatrix::<f64, NX, 2>::zeros();
        g_mat.set_column(0, &g1);
        g_mat.set_column(1, &g2);
        Self { p, gains, v, g_mat }
    }
}

impl VariationalSystem<NX, 2> for ClosedLoopField<'_> {
    fn eval(
        &mut self,
        s: &SVector<f64, NX>,
        want_jac: bool,
    ) -> Result<
        (SVector<f64, NX>, Option<(SMatrix<f64, NX, NX>, SMatrix<f64, NX, 2>)>),
        IntegrateError,
    > {
        let x = PlantState(*s);
        if !want_jac {
            let u = feedback_law(self.p, self.gains, &x, &self.v)?;
            let rhs = plant::eval_drift(self.p, &x)? + self.g_mat * u;
            return Ok((rhs, None));
        }
        let d = transform::eval_normal_form_derivs(self.p, &x);
        let u = transform::feedback_law_from_eval(self.gains, &d.nf, &self.v)?;
        let rhs = plant::eval_drift(self.p, &x)? + self.g_mat * u;

        let a = d.nf.a_dec;
        let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
        let a_inv = SMatrix::<f64, 2, 2>::new(
            a[(1, 1)] / det,
            -a[(0, 1)] / det,
            -a[(1, 0)] / det,
            a[(0, 0)] / det,
        );
        // Gradients of the feedback-law brackets.
        let mut db1 = -d.grad_lf5_h1;
        for k in 0..5 {
            db1 -= d.grad_xi_e[k] * self.gains.alpha_e[k];
        }
        let mut db2 = -d.grad_lf4_h2;
        for k in 0..4 {
            db2 -= d.grad_xi_h[k] * self.gains.alpha_h[k];
        }
        // du/dx column-wise: A_dec^{-1} (db/dx_j - (dA/dx_j) u).
        let mut du_dx = SMatrix::<f64, 2, NX>::zeros();
        for j in 0..NX {
            let da_u = SVector::<f64, 2>::new(
                d.grad_a_dec[0][0][j] * u[0] + d.grad_a_dec[0][1][j] * u[1],
                d.grad_a_dec[1][0][j] * u[0] + d.grad_a_dec[1][1][j] * u[1],
            );
            let col = a_inv * (SVector::<f64, 2>::new(db1[j], db2[j]) - da_u);
            du_dx.set_column(j, &col);
        }
        let j_s = plant::eval_jacobian(self.p, &x) + self.g_mat * du_dx;
        let dv = a_inv
            * SMatrix::<f64, 2, 2>::new(self.gains.alpha_e[0], 0.0, 0.0, self.gains.alpha_h[0]);
        let j_p = self.g_mat * dv;
        Ok((rhs, Some((j_s, j_p))))
    }
}

/// Result of advancing the coupled system one sampling period.
#[derive(Clone, Debug)]
pub struct Transition {
    pub w_next: SVector<f64, 4>,
    /// Endpoint of the integrated chain state (diagnostic; the prediction
    /// model propagates `z` by the exact matrix exponential).
    pub z_next: SVector<f64, 9>,
    /// Physical endpoint, for warm-seeding the next step.
    pub x_next: PlantState,
    pub sens: Option<SensitivityTriplet>,
}

/// Advance the internal state one sampling period under constant `v`.
///
/// The trajectory of the coupled chain/internal system is realized by
/// integrating the physical plant under the exact-linearizing feedback law
/// (the two are the same flow); one Newton inversion recovers the physical
/// start state and the internal coordinates are read off the endpoint.
/// Sensitivities differentiate this discrete map exactly: stage Jacobians of
/// the closed-loop field are chained through the RK4 tableau and seeded with
/// the inverse transform Jacobian.
pub fn transition_map(
    p: &PlantParams,
    gains: &HurwitzGains,
    z: &SVector<f64, 9>,
    w: &SVector<f64, 4>,
    v: &SVector<f64, 2>,
    ts: f64,
    substeps: usize,
    x_seed: &PlantState,
    want_sens: bool,
) -> Result<Transition, IntegrateError> {
    let target = TransformedState::from_zw(z, w);
    let (x0, _) = inverse_transform_counted(p, &target, x_seed)?;

    if want_sens {
        let j_phi = transform::phi_jacobian(p, &x0);
        let j_phi_inv = j_phi.try_inverse().ok_or(TransformError::NotInvertibleHere {
            reason: "singular transform Jacobian at the transition start".into(),
        })?;
        let mut m0 = SMatrix::<f64, NX, 15>::zeros();
        m0.fixed_view_mut::<NX, NX>(0, 0).copy_from(&j_phi_inv);
        let mut field = ClosedLoopField::new(p, gains, *v);
        let (x_end, m) = rk4_with_sensitivity::<NX, 2, 15>(&mut field, x0.0, m0, ts, substeps)?;
        let mut f_z = SMatrix::<f64, 4, 9>::zeros();
        let mut f_w = SMatrix::<f64, 4, 4>::zeros();
        let mut g_w = SMatrix::<f64, 4, 2>::zeros();
        for (r, &i) in plant::ETA_IDX.iter().enumerate() {
            for c in 0..9 {
                f_z[(r, c)] = m[(i, c)];
            }
            for c in 0..4 {
                f_w[(r, c)] = m[(i, 9 + c)];
            }
            for c in 0..2 {
                g_w[(r, c)] = m[(i, 13 + c)];
            }
        }
        let x_next = PlantState(x_end);
        let end = transform::forward_transform(p, &x_next);
        let w_next = x_next.eta();
        let w_tilde = w_next - f_z * z - f_w * w - g_w * v;
        Ok(Transition {
            w_next,
            z_next: end.z(),
            x_next,
            sens: Some(SensitivityTriplet { f_z, f_w, g_w, w_tilde }),
        })
    } else {
        let x_next = closed_loop_step(p, gains, &x0, v, ts, substeps)?;
        let end = transform::forward_transform(p, &x_next);
        Ok(Transition { w_next: x_next.eta(), z_next: end.z(), x_next, sens: None })
    }
}

/// Literal integration of the coupled normal-form equations, with the
/// internal rate pulled back through the inverse transform at every stage.
/// Used as the independent cross-check route; needs fine substeps because
/// stage extrapolations must stay within the inversion's basin.
pub fn transition_map_reference(
    p: &PlantParams,
    gains: &HurwitzGains,
    z: &SVector<f64, 9>,
    w: &SVector<f64, 4>,
    v: &SVector<f64, 2>,
    ts: f64,
    substeps: usize,
    x_seed: &PlantState,
) -> Result<SVector<f64, 4>, IntegrateError> {
    let (a_e, b_e, a_h, b_h) = transform::outer_matrices(gains);
    let mut a_blk = SMatrix::<f64, 9, 9>::zeros();
    a_blk.fixed_view_mut::<5, 5>(0, 0).copy_from(&a_e);
    a_blk.fixed_view_mut::<4, 4>(5, 5).copy_from(&a_h);
    let mut b_blk = SMatrix::<f64, 9, 2>::zeros();
    b_blk.fixed_view_mut::<5, 1>(0, 0).copy_from(&b_e);
    b_blk.fixed_view_mut::<4, 1>(5, 1).copy_from(&b_h);
    let mut x_warm = *x_seed;
    let mut field = |s: &SVector<f64, NX>| -> Result<SVector<f64, NX>, IntegrateError> {
        let ts_state = TransformedState::from_stacked(s);
        let (x, _) = inverse_transform_counted(p, &ts_state, &x_warm)?;
        x_warm = x;
        let f = plant::eval_drift(p, &x)?;
        let z = s.fixed_rows::<9>(0).into_owned();
        let mut rhs = SVector::<f64, NX>::zeros();
        rhs.fixed_rows_mut::<9>(0).copy_from(&(a_blk * z + b_blk * v));
        for (r, &i) in plant::ETA_IDX.iter().enumerate() {
            rhs[9 + r] = f[i];
        }
        Ok(rhs)
    };
    let mut s0 = SVector::<f64, NX>::zeros();
    s0.fixed_rows_mut::<9>(0).copy_from(z);
    s0.fixed_rows_mut::<4>(9).copy_from(w);
    let s_end = rk4_integrate(&mut field, s0, ts, substeps)?;
    Ok(s_end.fixed_rows::<4>(9).into_owned())
}

/// Nominal trajectory under a previously planned input sequence.
#[derive(Clone, Debug)]
pub struct Rollout {
    /// Chain states, length N, propagated by the exact discrete model.
    pub z_bar: Vec<SVector<f64, 9>>,
    /// Internal states, length N.
    pub w_bar: Vec<SVector<f64, 4>>,
    /// Preimages along the trajectory, length N.
    pub x_bar: Vec<PlantState>,
    /// Per-step linearizations, length N-1.
    pub triplets: Vec<SensitivityTriplet>,
}

/// Roll the coupled system forward `n - 1` transitions from `(z0, w0)`.
///
/// `planned_v` supplies the inputs; if shorter than `n - 1` the last entry
/// is repeated (warm-start padding convention).
#[allow(clippy::too_many_arguments)]
pub fn nominal_rollout(
    p: &PlantParams,
    gains: &HurwitzGains,
    f_mat: &SMatrix<f64, 9, 9>,
    g_mat: &SMatrix<f64, 9, 2>,
    z0: &SVector<f64, 9>,
    w0: &SVector<f64, 4>,
    x0: &PlantState,
    planned_v: &[SVector<f64, 2>],
    ts: f64,
    substeps: usize,
    n: usize,
    want_sens: bool,
) -> Result<Rollout, IntegrateError> {
    assert!(n >= 1);
    assert!(!planned_v.is_empty() || n == 1);
    let mut z_bar = Vec::with_capacity(n);
    let mut w_bar = Vec::with_capacity(n);
    let mut x_bar = Vec::with_capacity(n);
    let mut triplets = Vec::with_capacity(n.saturating_sub(1));
    z_bar.push(*z0);
    w_bar.push(*w0);
    x_bar.push(*x0);
    for l in 0..n - 1 {
        let v = *planned_v.get(l).unwrap_or_else(|| planned_v.last().unwrap());
        let tr = transition_map(
            p, gains, &z_bar[l], &w_bar[l], &v, ts, substeps, &x_bar[l], want_sens,
        )?;
        z_bar.push(f_mat * z_bar[l] + g_mat * v);
        w_bar.push(tr.w_next);
        x_bar.push(tr.x_next);
        if let Some(s) = tr.sens {
            triplets.push(s);
        }
    }
    Ok(Rollout { z_bar, w_bar, x_bar, triplets })
}

/// Integrate the physical plant under the continuously evaluated feedback
/// law with a held virtual input — the closed loop that realizes the linear
/// chains exactly.
pub fn closed_loop_step(
    p: &PlantParams,
    gains: &HurwitzGains,
    x0: &PlantState,
    v: &SVector<f64, 2>,
    duration: f64,
    substeps: usize,
) -> Result<PlantState, IntegrateError> {
    let (g1, g2) = plant::input_fields(p);
    let mut field = |s: &SVector<f64, NX>| -> Result<SVector<f64, NX>, IntegrateError> {
        let xs = PlantState(*s);
        let u = feedback_law(p, gains, &xs, v)?;
        let f = plant::eval_drift(p, &xs)?;
        Ok(f + g1 * u[0] + g2 * u[1])
    };
    let s = rk4_integrate(&mut field, x0.0, duration, substeps)?;
    Ok(PlantState(s))
}

/// Integrate the physical plant under a held physical input (ZOH actuation).
pub fn plant_step(
    p: &PlantParams,
    x0: &PlantState,
    u: &SVector<f64, 2>,
    duration: f64,
    substeps: usize,
) -> Result<PlantState, IntegrateError> {
    let (g1, g2) = plant::input_fields(p);
    let forcing = g1 * u[0] + g2 * u[1];
    let mut field = |s: &SVector<f64, NX>| -> Result<SVector<f64, NX>, IntegrateError> {
        Ok(plant::eval_drift(p, &PlantState(*s))? + forcing)
    };
    let s = rk4_integrate(&mut field, x0.0, duration, substeps)?;
    Ok(PlantState(s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::default_params;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (PlantParams, HurwitzGains, PlantState, SVector<f64, 2>, SVector<f64, 2>) {
        let p = default_params();
        let gains = HurwitzGains::default();
        let (x, u) = plant::find_equilibrium(&p, 5.0, 1.69).unwrap();
        let v = transform::virtual_input_for(&p, &gains, &x, &u);
        (p, gains, x, u, v)
    }

    fn zoh_mats(gains: &HurwitzGains, ts: f64) -> (SMatrix<f64, 9, 9>, SMatrix<f64, 9, 2>) {
        crate::ltv_mpc::zoh_discretize(gains, ts)
    }

    fn sample_zw(
        p: &PlantParams,
        x_star: &PlantState,
        rng: &mut ChaCha8Rng,
    ) -> (SVector<f64, 9>, SVector<f64, 4>, PlantState) {
        let x = crate::transform::tests_support::sample_state(rng, x_star);
        let t = forward_transform(p, &x);
        (t.z(), t.w(), x)
    }

    #[test]
    fn exponential_decay() {
        let mut f = |s: &SVector<f64, 1>| Ok(-s);
        let s = rk4_integrate(&mut f, SVector::<f64, 1>::new(1.0), 2.0, 20).unwrap();
        assert_relative_eq!(s[0], (-2.0f64).exp(), epsilon = 1e-6);
    }

    #[test]
    fn zero_duration_is_identity() {
        let mut f = |s: &SVector<f64, 1>| Ok(-s);
        let s = rk4_integrate(&mut f, SVector::<f64, 1>::new(0.7), 0.0, 4).unwrap();
        assert_eq!(s[0], 0.7);
    }

    #[test]
    fn fourth_order_convergence() {
        let run = |n: usize| {
            let mut f = |s: &SVector<f64, 1>| Ok(-s);
            rk4_integrate(&mut f, SVector::<f64, 1>::new(1.0), 2.0, n).unwrap()[0]
        };
        let exact = (-2.0f64).exp();
        let e1 = (run(10) - exact).abs();
        let e2 = (run(20) - exact).abs();
        let ratio = e1 / e2;
        assert!((12.0..22.0).contains(&ratio), "convergence ratio {ratio}");
    }

    #[test]
    fn divergence_detected() {
        let mut f = |s: &SVector<f64, 1>| Ok(s * 1e8);
        let res = rk4_integrate(&mut f, SVector::<f64, 1>::new(1.0), 10.0, 10);
        assert!(matches!(res, Err(IntegrateError::Divergence)));
    }

    #[test]
    fn transition_fixed_point_at_equilibrium() {
        let (p, gains, x, _, v) = setup();
        let t = forward_transform(&p, &x);
        let tr = transition_map(&p, &gains, &t.z(), &t.w(), &v, 2.0, 4, &x, false).unwrap();
        assert!((tr.w_next - t.w()).amax() < 1e-10, "{:?}", (tr.w_next - t.w()).amax());
    }

    #[test]
    fn transition_short_horizon_taylor() {
        let (p, gains, x_star, _, v_star) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (z, w, x) = sample_zw(&p, &x_star, &mut rng);
        // q(z, w) at the start.
        let f = plant::eval_drift(&p, &x).unwrap();
        let q0 = SVector::<f64, 4>::from_iterator(plant::ETA_IDX.iter().map(|&i| f[i]));
        let v = v_star + SVector::<f64, 2>::new(0.3, -0.2);
        let err_at = |ts: f64| {
            let tr = transition_map(&p, &gains, &z, &w, &v, ts, 1, &x, false).unwrap();
            (tr.w_next - w - q0 * ts).amax()
        };
        let e1 = err_at(1e-3);
        let e2 = err_at(2e-3);
        // Second-order remainder: quadrupling with doubled step.
        assert!(e2 / e1.max(1e-300) < 6.0, "e1={e1} e2={e2}");
        assert!(e1 < 1e-4);
    }

    #[test]
    fn two_route_consistency_with_normal_form_reference() {
        // The implemented map (physical integration under the feedback law)
        // matches the literal normal-form integration on a fine grid.
        let (p, gains, x_star, _, v_star) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let (z, w, x) = sample_zw(&p, &x_star, &mut rng);
            let v = v_star
                + SVector::<f64, 2>::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.3..0.3));
            let tr = transition_map(&p, &gains, &z, &w, &v, 2.0, 64, &x, false).unwrap();
            let w_ref = transition_map_reference(&p, &gains, &z, &w, &v, 2.0, 64, &x).unwrap();
            let scale = w_ref.amax().max(1.0);
            worst = worst.max((tr.w_next - w_ref).amax() / scale);
        }
        assert!(worst < 1e-7, "two-route mismatch {worst}");
    }

    #[test]
    fn sensitivity_of_linear_internal_dynamics_is_exponential() {
        // Toy: z' = 0 (D = 1 dummy chain), w' = a w + b v.
        struct Toy {
            a: f64,
            b: f64,
        }
        impl VariationalSystem<1, 1> for Toy {
            fn eval(
                &mut self,
                s: &SVector<f64, 1>,
                want_jac: bool,
            ) -> Result<
                (SVector<f64, 1>, Option<(SMatrix<f64, 1, 1>, SMatrix<f64, 1, 1>)>),
                IntegrateError,
            > {
                let rhs = SVector::<f64, 1>::new(self.a * s[0] + self.b);
                let jac = want_jac.then(|| {
                    (SMatrix::<f64, 1, 1>::new(self.a), SMatrix::<f64, 1, 1>::new(0.0))
                });
                Ok((rhs, jac))
            }
        }
        let mut toy = Toy { a: -0.7, b: 0.3 };
        let m0 = SMatrix::<f64, 1, 2>::new(1.0, 0.0);
        let s0 = SVector::<f64, 1>::new(2.0);
        let (_, m) = rk4_with_sensitivity::<1, 1, 2>(&mut toy, s0, m0, 2.0, 200)
            .unwrap();
        assert_relative_eq!(m[(0, 0)], (-1.4f64).exp(), epsilon = 1e-10);
    }

    #[test]
    fn sensitivity_zero_duration_is_identity() {
        let (p, gains, x, _, v) = setup();
        let t = forward_transform(&p, &x);
        let tr = transition_map(&p, &gains, &t.z(), &t.w(), &v, 0.0, 4, &x, true).unwrap();
        let s = tr.sens.unwrap();
        assert!((s.f_w - SMatrix::<f64, 4, 4>::identity()).amax() < 1e-12);
        assert!(s.f_z.amax() < 1e-12);
        assert!(s.g_w.amax() < 1e-12);
    }

    #[test]
    fn sensitivities_match_finite_differences() {
        let (p, gains, x_star, _, v_star) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let (z, w, x) = sample_zw(&p, &x_star, &mut rng);
            let v = v_star
                + SVector::<f64, 2>::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.25..0.25));
            let tr = transition_map(&p, &gains, &z, &w, &v, 2.0, 4, &x, true).unwrap();
            let s = tr.sens.unwrap();
            let psi = |z: &SVector<f64, 9>, w: &SVector<f64, 4>, v: &SVector<f64, 2>| {
                transition_map(&p, &gains, z, w, v, 2.0, 4, &x, false).unwrap().w_next
            };
            let h = 1e-5;
            for c in 0..9 {
                let mut zp = z;
                let mut zm = z;
                zp[c] += h;
                zm[c] -= h;
                let fd = (psi(&zp, &w, &v) - psi(&zm, &w, &v)) / (2.0 * h);
                for r in 0..4 {
                    let denom = fd[r].abs().max(1e-2);
                    worst = worst.max((s.f_z[(r, c)] - fd[r]).abs() / denom);
                }
            }
            for c in 0..4 {
                let mut wp = w;
                let mut wm = w;
                wp[c] += h;
                wm[c] -= h;
                let fd = (psi(&z, &wp, &v) - psi(&z, &wm, &v)) / (2.0 * h);
                for r in 0..4 {
                    let denom = fd[r].abs().max(1e-2);
                    worst = worst.max((s.f_w[(r, c)] - fd[r]).abs() / denom);
                }
            }
            for c in 0..2 {
                let mut vp = v;
                let mut vm = v;
                vp[c] += h;
                vm[c] -= h;
                let fd = (psi(&z, &w, &vp) - psi(&z, &w, &vm)) / (2.0 * h);
                for r in 0..4 {
                    let denom = fd[r].abs().max(1e-2);
                    worst = worst.max((s.g_w[(r, c)] - fd[r]).abs() / denom);
                }
            }
        }
        assert!(worst < 1e-4, "sensitivity error vs finite differences: {worst}");
    }

    #[test]
    fn two_step_sensitivity_chain_rule() {
        let (p, gains, x_star, _, v_star) = setup();
        let (f_mat, g_mat) = zoh_mats(&gains, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let (z, w, x) = sample_zw(&p, &x_star, &mut rng);
        let v0 = v_star + SVector::<f64, 2>::new(0.2, -0.1);
        let v1 = v_star + SVector::<f64, 2>::new(-0.15, 0.12);

        let t0 = transition_map(&p, &gains, &z, &w, &v0, 2.0, 4, &x, true).unwrap();
        let z1 = f_mat * z + g_mat * v0;
        let t1 =
            transition_map(&p, &gains, &z1, &t0.w_next, &v1, 2.0, 4, &t0.x_next, true).unwrap();
        let s0 = t0.sens.unwrap();
        let s1 = t1.sens.unwrap();

        // Composite dependence of w2 on (w0, v0).
        let dw2_dw0 = s1.f_w * s0.f_w;
        let dw2_dv0 = s1.f_z * g_mat + s1.f_w * s0.g_w;

        let compose = |w0: &SVector<f64, 4>, v0: &SVector<f64, 2>| {
            let a = transition_map(&p, &gains, &z, w0, v0, 2.0, 4, &x, false).unwrap();
            let z1 = f_mat * z + g_mat * v0;
            transition_map(&p, &gains, &z1, &a.w_next, &v1, 2.0, 4, &a.x_next, false)
                .unwrap()
                .w_next
        };
        let h = 1e-5;
        for c in 0..4 {
            let mut wp = w;
            let mut wm = w;
            wp[c] += h;
            wm[c] -= h;
            let fd = (compose(&wp, &v0) - compose(&wm, &v0)) / (2.0 * h);
            for r in 0..4 {
                assert!((dw2_dw0[(r, c)] - fd[r]).abs() / fd[r].abs().max(1e-2) < 1e-4);
            }
        }
        for c in 0..2 {
            let mut vp = v0;
            let mut vm = v0;
            vp[c] += h;
            vm[c] -= h;
            let fd = (compose(&w, &vp) - compose(&w, &vm)) / (2.0 * h);
            for r in 0..4 {
                assert!((dw2_dv0[(r, c)] - fd[r]).abs() / fd[r].abs().max(1e-2) < 1e-4);
            }
        }
    }

    #[test]
    fn rollout_constant_at_equilibrium() {
        let (p, gains, x, _, v) = setup();
        let (f_mat, g_mat) = zoh_mats(&gains, 2.0);
        let t = forward_transform(&p, &x);
        let plan = vec![v; 4];
        let roll = nominal_rollout(
            &p, &gains, &f_mat, &g_mat, &t.z(), &t.w(), &x, &plan, 2.0, 4, 5, true,
        )
        .unwrap();
        assert_eq!(roll.z_bar.len(), 5);
        assert_eq!(roll.triplets.len(), 4);
        for l in 0..5 {
            assert!((roll.z_bar[l] - t.z()).amax() < 1e-8, "z drift at step {l}");
            assert!((roll.w_bar[l] - t.w()).amax() < 1e-8, "w drift at step {l}");
        }
    }

    #[test]
    fn rollout_single_step_is_current_state() {
        let (p, gains, x, _, v) = setup();
        let (f_mat, g_mat) = zoh_mats(&gains, 2.0);
        let t = forward_transform(&p, &x);
        let roll = nominal_rollout(
            &p, &gains, &f_mat, &g_mat, &t.z(), &t.w(), &x, &[v], 2.0, 4, 1, false,
        )
        .unwrap();
        assert_eq!(roll.z_bar.len(), 1);
        assert_eq!(roll.z_bar[0], t.z());
        assert_eq!(roll.w_bar[0], t.w());
    }

    #[test]
    fn rollout_matches_chained_transitions() {
        let (p, gains, x_star, _, v_star) = setup();
        let (f_mat, g_mat) = zoh_mats(&gains, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let (z, w, x) = sample_zw(&p, &x_star, &mut rng);
        let plan: Vec<_> = (0..4)
            .map(|_| {
                v_star + SVector::<f64, 2>::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.2..0.2))
            })
            .collect();
        let roll = nominal_rollout(
            &p, &gains, &f_mat, &g_mat, &z, &w, &x, &plan, 2.0, 4, 5, false,
        )
        .unwrap();
        let mut zc = z;
        let mut wc = w;
        let mut xc = x;
        for (l, v) in plan.iter().enumerate() {
            let tr = transition_map(&p, &gains, &zc, &wc, v, 2.0, 4, &xc, false).unwrap();
            zc = f_mat * zc + g_mat * v;
            wc = tr.w_next;
            xc = tr.x_next;
            assert!((roll.z_bar[l + 1] - zc).amax() < 1e-12);
            assert!((roll.w_bar[l + 1] - wc).amax() < 1e-12);
        }
    }
}
