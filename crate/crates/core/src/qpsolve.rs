//! Dense convex quadratic programming by a primal active-set method.
//!
//! Solves `min 1/2 v' H v + q' v  s.t.  M v <= b` for strictly convex `H`.
//! Working-set changes are fully deterministic: the blocking constraint with
//! the smallest step ratio enters (lowest row index on ties) and the most
//! negative multiplier leaves (lowest row index on ties). Infeasible starts
//! are repaired by a phase-1 pass of the same method on an
//! elastic-relaxation problem with one extra variable bounding the largest
//! violation.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, thiserror::Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("hessian is not symmetric positive definite")]
    BadHessian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

/// Condensed convex quadratic program.
#[derive(Clone, Debug)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub q: DVector<f64>,
    pub m: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers for every original row (zero for rows inactive or
    /// dropped as duplicates).
    pub dual: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub kkt_residual: f64,
    /// Active rows (original indices) at termination.
    pub active_set: Vec<usize>,
    /// Objective value after each phase-2 iterate; non-increasing.
    pub objective_trace: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct QpOptions {
    pub max_iterations: usize,
    pub feas_tol: f64,
    pub dual_tol: f64,
    pub dedup_tol: f64,
    /// Warm-start point; repaired by phase 1 if infeasible.
    pub warm_start: Option<DVector<f64>>,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            feas_tol: 1e-9,
            dual_tol: 1e-9,
            dedup_tol: 1e-12,
            warm_start: None,
        }
    }
}

/// Max of the four KKT residuals (stationarity, primal feasibility, dual
/// feasibility, complementary slackness); zero iff exactly optimal.
pub fn kkt_residual(
    h: &DMatrix<f64>,
    q: &DVector<f64>,
    m: &DMatrix<f64>,
    b: &DVector<f64>,
    x: &DVector<f64>,
    dual: &DVector<f64>,
) -> f64 {
    let stationarity = (h * x + q + m.transpose() * dual).amax();
    let slack = m * x - b;
    let primal = slack.iter().fold(0.0f64, |a, &s| a.max(s));
    let dual_feas = dual.iter().fold(0.0f64, |a, &l| a.max(-l));
    let compl = slack
        .iter()
        .zip(dual.iter())
        .fold(0.0f64, |a, (&s, &l)| a.max((s * l).abs()));
    stationarity.max(primal).max(dual_feas).max(compl)
}

/// Solve the QP. `H` must be symmetric positive definite.
pub fn solve(
    h: &DMatrix<f64>,
    q: &DVector<f64>,
    m: &DMatrix<f64>,
    b: &DVector<f64>,
    options: &QpOptions,
) -> Result<QpSolution, QpError> {
    let n = h.nrows();
    if h.ncols() != n || q.len() != n {
        return Err(QpError::Dimension("hessian/gradient size".into()));
    }
    if m.ncols() != n && m.nrows() > 0 {
        return Err(QpError::Dimension("constraint columns".into()));
    }
    if m.nrows() != b.len() {
        return Err(QpError::Dimension("constraint rows".into()));
    }
    let chol = h.clone().cholesky().ok_or(QpError::BadHessian)?;

    // Deduplicate rows identical within tolerance (keep the lowest index).
    let rows_total = m.nrows();
    let mut keep: Vec<usize> = Vec::with_capacity(rows_total);
    for i in 0..rows_total {
        let dup = keep.iter().any(|&j| {
            (b[i] - b[j]).abs() <= options.dedup_tol
                && (m.row(i) - m.row(j)).amax() <= options.dedup_tol
        });
        if !dup {
            keep.push(i);
        }
    }
    let m_red = DMatrix::from_fn(keep.len(), n, |r, c| m[(keep[r], c)]);
    let b_red = DVector::from_fn(keep.len(), |r, _| b[keep[r]]);

    // Starting point: warm start if given, otherwise the unconstrained
    // minimizer; repair feasibility by phase 1 when needed.
    let x_cand = options
        .warm_start
        .clone()
        .filter(|w| w.len() == n)
        .unwrap_or_else(|| chol.solve(&(-q)));
    let violation = max_violation(&m_red, &b_red, &x_cand);
    let x0 = if violation <= options.feas_tol {
        x_cand
    } else {
        match phase1(&m_red, &b_red, &x_cand, options) {
            Some(x) => x,
            None => {
                let dual = DVector::zeros(rows_total);
                let kkt = kkt_residual(h, q, m, b, &x_cand, &dual);
                return Ok(QpSolution {
                    x: x_cand,
                    dual,
                    status: QpStatus::Infeasible,
                    iterations: 0,
                    kkt_residual: kkt,
                    active_set: Vec::new(),
                    objective_trace: Vec::new(),
                });
            }
        }
    };

    let core = active_set_core(&chol, q, &m_red, &b_red, x0, options);

    // Map duals back to original row indices.
    let mut dual = DVector::zeros(rows_total);
    for (r, &orig) in keep.iter().enumerate() {
        dual[orig] = core.dual[r];
    }
    let active_set: Vec<usize> = core.active.iter().map(|&r| keep[r]).collect();
    let kkt = kkt_residual(h, q, m, b, &core.x, &dual);
    Ok(QpSolution {
        x: core.x,
        dual,
        status: core.status,
        iterations: core.iterations,
        kkt_residual: kkt,
        active_set,
        objective_trace: core.trace,
    })
}

fn max_violation(m: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    (m * x - b).iter().fold(0.0f64, |a, &s| a.max(s))
}

struct CoreResult {
    x: DVector<f64>,
    dual: DVector<f64>,
    status: QpStatus,
    iterations: usize,
    active: Vec<usize>,
    trace: Vec<f64>,
}

/// Primal active-set iteration from a feasible starting point.
fn active_set_core(
    chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
    q: &DVector<f64>,
    m: &DMatrix<f64>,
    b: &DVector<f64>,
    mut x: DVector<f64>,
    options: &QpOptions,
) -> CoreResult {
    let n = q.len();
    let rows = m.nrows();
    let objective = |x: &DVector<f64>| {
        let hx = chol.l() * (chol.l().transpose() * x);
        0.5 * x.dot(&hx) + q.dot(x)
    };
    let mut working: Vec<usize> = (0..rows)
        .filter(|&i| ((m.row(i) * &x)[0] - b[i]).abs() <= options.feas_tol)
        .collect();
    let mut trace = vec![objective(&x)];
    let mut dual = DVector::zeros(rows);
    let scale_x = 1.0f64.max(x.amax());

    for iter in 0..options.max_iterations {
        // Equality-constrained subproblem on the working set via the Schur
        // complement of the Hessian.
        let g = chol.l() * (chol.l().transpose() * &x) + q;
        let (p, lambda) = if working.is_empty() {
            (-chol.solve(&g), DVector::zeros(0))
        } else {
            let k = working.len();
            let mt = DMatrix::from_fn(n, k, |r, c| m[(working[c], r)]);
            let y = chol.solve(&mt); // H^{-1} M_W'
            let s = mt.transpose() * &y;
            let rhs = -(mt.transpose() * chol.solve(&g));
            let lambda = match s.clone().cholesky() {
                Some(c) => c.solve(&rhs),
                None => {
                    // Degenerate working set: fall back to a pseudo-inverse.
                    match s.svd(true, true).solve(&rhs, 1e-12) {
                        Ok(l) => l,
                        Err(_) => DVector::zeros(k),
                    }
                }
            };
            let p = -chol.solve(&(g.clone() + &mt * &lambda));
            (p, lambda)
        };

        if p.amax() <= 1e-11 * scale_x.max(1.0) {
            // Stationary on the working set; check multipliers.
            let (mut worst, mut worst_idx) = (-options.dual_tol, usize::MAX);
            for c in 0..working.len() {
                if lambda[c] < worst {
                    worst = lambda[c];
                    worst_idx = c;
                }
            }
            if worst_idx == usize::MAX {
                dual.fill(0.0);
                for (c, &row) in working.iter().enumerate() {
                    dual[row] = lambda[c].max(0.0);
                }
                return CoreResult {
                    x,
                    dual,
                    status: QpStatus::Optimal,
                    iterations: iter,
                    active: working.clone(),
                    trace,
                };
            }
            working.remove(worst_idx);
            trace.push(objective(&x));
            continue;
        }

        // Step length to the nearest blocking constraint; ascending scan
        // makes the lowest row index win exact ties.
        let mut alpha = 1.0f64;
        let mut blocker: Option<usize> = None;
        for i in 0..rows {
            if working.contains(&i) {
                continue;
            }
            let mp = (m.row(i) * &p)[0];
            if mp > 1e-13 {
                let ai = ((b[i] - (m.row(i) * &x)[0]) / mp).max(0.0);
                if ai < alpha - 1e-14 {
                    alpha = ai;
                    blocker = Some(i);
                }
            }
        }
        x += &p * alpha;
        trace.push(objective(&x));
        if let Some(i) = blocker {
            working.push(i);
            working.sort_unstable();
        }
    }

    dual.fill(0.0);
    CoreResult {
        x,
        dual,
        status: QpStatus::MaxIterations,
        iterations: options.max_iterations,
        active: working,
        trace,
    }
}

/// Phase 1: minimize an elastic bound `t` on the violation from `x_c`,
/// `min eps/2 (|x - x_c|^2 + t^2) + t  s.t.  M x - t 1 <= b`, starting from
/// the trivially feasible `(x_c, max violation)`. Returns a feasible point
/// or `None` when the constraints are inconsistent.
fn phase1(
    m: &DMatrix<f64>,
    b: &DVector<f64>,
    x_c: &DVector<f64>,
    options: &QpOptions,
) -> Option<DVector<f64>> {
    let n = x_c.len();
    let rows = m.nrows();
    let eps = 1e-6;
    let mut h_aug = DMatrix::<f64>::identity(n + 1, n + 1) * eps;
    h_aug[(n, n)] = eps;
    let mut q_aug = DVector::zeros(n + 1);
    for i in 0..n {
        q_aug[i] = -eps * x_c[i];
    }
    q_aug[n] = 1.0;
    let mut m_aug = DMatrix::zeros(rows, n + 1);
    m_aug.view_mut((0, 0), (rows, n)).copy_from(m);
    for i in 0..rows {
        m_aug[(i, n)] = -1.0;
    }
    let chol = h_aug.clone().cholesky()?;
    let t0 = max_violation(m, b, x_c) + 1.0;
    let mut x0 = DVector::zeros(n + 1);
    x0.rows_mut(0, n).copy_from(x_c);
    x0[n] = t0;
    let sub_options = QpOptions {
        warm_start: None,
        ..options.clone()
    };
    let res = active_set_core(&chol, &q_aug, &m_aug, b, x0, &sub_options);
    let t_star = res.x[n];
    if t_star > 1e-7 {
        return None;
    }
    let mut x = DVector::zeros(n);
    x.copy_from(&res.x.rows(0, n));
    // The elastic optimum can sit a hair outside; nudge onto the feasible
    // side within tolerance.
    if max_violation(m, b, &x) <= options.feas_tol.max(t_star.max(0.0) * 2.0) {
        Some(x)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn solve_simple(
        h: Vec<f64>,
        q: Vec<f64>,
        m: Vec<f64>,
        b: Vec<f64>,
        n: usize,
    ) -> QpSolution {
        let rows = b.len();
        let h = DMatrix::from_row_slice(n, n, &h);
        let q = DVector::from_vec(q);
        let m = DMatrix::from_row_slice(rows, n, &m);
        let b = DVector::from_vec(b);
        solve(&h, &q, &m, &b, &QpOptions::default()).unwrap()
    }

    #[test]
    fn hand_kkt_single_bound() {
        // min v^2 s.t. -v <= -1  (i.e. v >= 1): optimum v = 1, dual = 2.
        let sol = solve_simple(vec![2.0], vec![0.0], vec![-1.0], vec![-1.0], 1);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-10);
        assert_relative_eq!(sol.dual[0], 2.0, epsilon = 1e-10);
        assert!(sol.kkt_residual < 1e-12);
    }

    #[test]
    fn unconstrained_quadratic() {
        // H = I, q = -c -> v = c.
        let sol = solve_simple(
            vec![1.0, 0.0, 0.0, 1.0],
            vec![-3.0, 2.5],
            vec![],
            vec![],
            2,
        );
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.x[0], 3.0, epsilon = 1e-12);
        assert_relative_eq!(sol.x[1], -2.5, epsilon = 1e-12);
    }

    #[test]
    fn infeasible_detected() {
        // v <= 0 and -v <= -1 cannot both hold.
        let sol = solve_simple(vec![2.0], vec![0.0], vec![1.0, -1.0], vec![0.0, -1.0], 1);
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn duplicate_rows_deduplicated() {
        let h = DMatrix::from_row_slice(1, 1, &[2.0]);
        let q = DVector::from_vec(vec![0.0]);
        let m = DMatrix::from_row_slice(3, 1, &[-1.0, -1.0, -1.0]);
        let b = DVector::from_vec(vec![-1.0, -1.0, -1.0]);
        let sol = solve(&h, &q, &m, &b, &QpOptions::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-10);
        // Only the first duplicate carries the multiplier.
        assert_relative_eq!(sol.dual[0], 2.0, epsilon = 1e-10);
        assert_eq!(sol.dual[1], 0.0);
        assert_eq!(sol.dual[2], 0.0);
        assert_eq!(sol.active_set, vec![0]);
    }

    #[test]
    fn lowest_index_wins_ties() {
        // Two symmetric constraints equally violated by the descent path;
        // the active set retains the lower row index.
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0]);
        let q = DVector::from_vec(vec![-4.0, -4.0]);
        // x + y <= 1 duplicated with different ordering plus a spectator.
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.00000001]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        let sol = solve(&h, &q, &m, &b, &QpOptions::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(sol.active_set.contains(&0));
    }

    #[test]
    fn objective_trace_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (h, q, m, b) = random_qp(&mut rng, 6, 10);
            let sol = solve(&h, &q, &m, &b, &QpOptions::default()).unwrap();
            if sol.status != QpStatus::Optimal {
                continue;
            }
            for w in sol.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0), "trace increased: {w:?}");
            }
        }
    }

    fn random_qp(
        rng: &mut ChaCha8Rng,
        n: usize,
        rows: usize,
    ) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>, DVector<f64>) {
        // H = A A' + n I is safely positive definite.
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let h = &a * a.transpose() + DMatrix::identity(n, n) * (n as f64);
        let q = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
        let m = DMatrix::from_fn(rows, n, |_, _| rng.gen_range(-1.0..1.0));
        // Feasible by construction around a random interior point.
        let x_feas = DVector::from_fn(n, |_, _| rng.gen_range(-0.5..0.5));
        let slack = DVector::from_fn(rows, |_, _| rng.gen_range(0.05..1.0));
        let b = &m * &x_feas + slack;
        (h, q, m, b)
    }

    /// Exhaustive oracle: enumerate all working sets up to size n, solve the
    /// KKT equalities, keep feasible candidates with nonnegative duals, and
    /// return the best objective.
    fn enumerate_oracle(
        h: &DMatrix<f64>,
        q: &DVector<f64>,
        m: &DMatrix<f64>,
        b: &DVector<f64>,
    ) -> Option<DVector<f64>> {
        let n = h.nrows();
        let rows = m.nrows();
        let mut best: Option<(f64, DVector<f64>)> = None;
        let mut consider = |subset: &[usize]| {
            let k = subset.len();
            let mut kkt = DMatrix::zeros(n + k, n + k);
            kkt.view_mut((0, 0), (n, n)).copy_from(h);
            for (c, &row) in subset.iter().enumerate() {
                for r in 0..n {
                    kkt[(r, n + c)] = m[(row, r)];
                    kkt[(n + c, r)] = m[(row, r)];
                }
            }
            let mut rhs = DVector::zeros(n + k);
            for r in 0..n {
                rhs[r] = -q[r];
            }
            for (c, &row) in subset.iter().enumerate() {
                rhs[n + c] = b[row];
            }
            let sol = kkt.lu().solve(&rhs)?;
            let x = sol.rows(0, n).into_owned();
            let lambda = sol.rows(n, k).into_owned();
            if lambda.iter().any(|&l| l < -1e-9) {
                return None;
            }
            let slack = m * &x - b;
            if slack.iter().any(|&s| s > 1e-8) {
                return None;
            }
            let obj = 0.5 * x.dot(&(h * &x)) + q.dot(&x);
            if best.as_ref().map_or(true, |(bo, _)| obj < bo - 1e-12) {
                best = Some((obj, x));
            }
            Some(())
        };
        // Enumerate subsets by bitmask; row counts in tests keep this small.
        for mask in 0u32..(1u32 << rows) {
            let subset: Vec<usize> = (0..rows).filter(|i| mask & (1 << i) != 0).collect();
            if subset.len() > n {
                continue;
            }
            let _ = consider(&subset);
        }
        best.map(|(_, x)| x)
    }

    #[test]
    fn matches_active_set_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        for case in 0..100 {
            let n = rng.gen_range(1..=12);
            let rows = rng.gen_range(0..=usize::min(14, n + 6));
            let (h, q, m, b) = random_qp(&mut rng, n, rows);
            let sol = solve(&h, &q, &m, &b, &QpOptions::default()).unwrap();
            assert_eq!(sol.status, QpStatus::Optimal, "case {case} not optimal");
            assert!(sol.kkt_residual < 1e-8, "case {case} kkt {}", sol.kkt_residual);
            let oracle = enumerate_oracle(&h, &q, &m, &b).expect("oracle found optimum");
            let scale = oracle.amax().max(1.0);
            assert!(
                (&sol.x - &oracle).amax() / scale < 1e-8,
                "case {case}: solver {:?} oracle {:?}",
                sol.x,
                oracle
            );
            checked += 1;
        }
        assert_eq!(checked, 100);
    }

    #[test]
    fn warm_start_agrees_with_cold_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..30 {
            let (h, q, m, b) = random_qp(&mut rng, 8, 12);
            let cold = solve(&h, &q, &m, &b, &QpOptions::default()).unwrap();
            let mut warm_pt = cold.x.clone();
            for v in warm_pt.iter_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
            let warm = solve(
                &h,
                &q,
                &m,
                &b,
                &QpOptions { warm_start: Some(warm_pt), ..Default::default() },
            )
            .unwrap();
            assert_eq!(warm.status, QpStatus::Optimal);
            assert!((&warm.x - &cold.x).amax() < 1e-7);
        }
    }

    #[test]
    fn kkt_residual_detects_perturbation() {
        let h = DMatrix::from_row_slice(1, 1, &[2.0]);
        let q = DVector::from_vec(vec![0.0]);
        let m = DMatrix::from_row_slice(1, 1, &[-1.0]);
        let b = DVector::from_vec(vec![-1.0]);
        let x = DVector::from_vec(vec![1.0]);
        let dual = DVector::from_vec(vec![2.0]);
        assert!(kkt_residual(&h, &q, &m, &b, &x, &dual) < 1e-12);
        let x_bad = DVector::from_vec(vec![1.0 + 1e-3]);
        let r = kkt_residual(&h, &q, &m, &b, &x_bad, &dual);
        // Stationarity gap is |H delta| = 2e-3.
        assert!(r >= 2e-3 - 1e-12, "residual {r}");
    }

    #[test]
    fn oracle_solutions_are_kkt_certified() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let (h, q, m, b) = random_qp(&mut rng, 5, 8);
            let sol = solve(&h, &q, &m, &b, &QpOptions::default()).unwrap();
            assert!(sol.kkt_residual < 1e-8);
        }
    }
}
