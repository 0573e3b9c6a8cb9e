//! Equilibrium output locus.
//!
//! Full-system equilibria form a one-parameter family; its image in the
//! `(y1, y2)` plane is the curve the closed loop settles onto whenever the
//! pressure constraint pins the accumulator. Points are obtained by
//! continuation in the site-1 fuel input.

use super::HarnessError;
use crate::ltv_mpc::SteadyMap;
use crate::plant::{self, PlantParams};

/// Output pair on the equilibrium locus.
#[derive(Clone, Copy, Debug)]
pub struct LocusPoint {
    pub y1: f64,
    pub y2: f64,
    pub u1: f64,
    pub u2: f64,
}

/// Trace the locus over a `y1` grid by continuation: a dense `u1` sweep
/// brackets each target, then bisection refines it.
pub fn equilibrium_locus(
    params: &PlantParams,
    y1_min: f64,
    y1_max: f64,
    n_points: usize,
) -> Result<Vec<LocusPoint>, HarnessError> {
    assert!(n_points >= 2);
    let sweep = sweep_u1(params)?;
    let mut out = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let target = y1_min + (y1_max - y1_min) * i as f64 / (n_points - 1) as f64;
        if let Some(pt) = solve_for_y1(params, &sweep, target) {
            out.push(pt);
        }
    }
    if out.len() < 2 {
        return Err(HarnessError::Scenario(format!(
            "equilibrium locus unreachable over y1 in [{y1_min}, {y1_max}]"
        )));
    }
    Ok(out)
}

fn sweep_u1(params: &PlantParams) -> Result<Vec<(f64, LocusPoint)>, HarnessError> {
    let mut pts = Vec::new();
    let n = 240;
    for i in 0..=n {
        let u1 = i as f64 / n as f64;
        if let Ok((y1, y2, _x, u2)) = plant::steady_from_u1(params, u1) {
            if (0.0..=1.0).contains(&u2) {
                pts.push((u1, LocusPoint { y1, y2, u1, u2 }));
            }
        }
    }
    if pts.len() < 2 {
        return Err(HarnessError::Scenario(
            "equilibrium locus sweep found no feasible band".into(),
        ));
    }
    Ok(pts)
}

fn solve_for_y1(
    params: &PlantParams,
    sweep: &[(f64, LocusPoint)],
    target: f64,
) -> Option<LocusPoint> {
    // Bracket on the sweep, then bisect in u1.
    let mut bracket = None;
    for pair in sweep.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if (a.1.y1 - target) * (b.1.y1 - target) <= 0.0 {
            bracket = Some((a.0, b.0));
            break;
        }
    }
    let (mut lo, mut hi) = bracket?;
    let eval = |u1: f64| plant::steady_from_u1(params, u1).ok();
    let f_lo = eval(lo)?.0 - target;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        let (y1m, _, _, _) = eval(mid)?;
        if (y1m - target) * f_lo <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if (hi - lo).abs() < 1e-13 {
            break;
        }
    }
    let u1 = 0.5 * (lo + hi);
    let (y1, y2, _, u2) = eval(u1)?;
    Some(LocusPoint { y1, y2, u1, u2 })
}

/// Locus point nearest to an output pair, in per-axis-normalized distance.
pub fn nearest_point(locus: &[LocusPoint], y1: f64, y2: f64, scale: (f64, f64)) -> Option<(LocusPoint, f64)> {
    locus
        .iter()
        .map(|p| {
            let d1 = (p.y1 - y1) / scale.0;
            let d2 = (p.y2 - y2) / scale.1;
            (*p, (d1 * d1 + d2 * d2).sqrt())
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
}

/// Intersection of an input-limit boundary (one input pinned at a bound)
/// with the equilibrium locus: the operating point the closed loop plateaus
/// at when both families are active.
pub fn boundary_locus_intersection(
    params: &PlantParams,
    steady: &SteadyMap,
    input: usize,
    bound: f64,
) -> Result<LocusPoint, HarnessError> {
    let sweep = sweep_u1(params)?;
    // phi(u1) = steady-map estimate of u_input on the locus minus the bound.
    let phi = |p: &LocusPoint| {
        let u = steady.u_for(&nalgebra::SVector::<f64, 2>::new(p.y1, p.y2));
        u[input] - bound
    };
    let mut bracket = None;
    for pair in sweep.windows(2) {
        if phi(&pair[0].1) * phi(&pair[1].1) <= 0.0 {
            bracket = Some((pair[0].0, pair[1].0));
            break;
        }
    }
    let (mut lo, mut hi) =
        bracket.ok_or_else(|| HarnessError::Scenario("boundary does not cross the locus".into()))?;
    let eval = |u1: f64| -> Option<LocusPoint> {
        let (y1, y2, _, u2) = plant::steady_from_u1(params, u1).ok()?;
        Some(LocusPoint { y1, y2, u1, u2 })
    };
    let f_lo = phi(&eval(lo).ok_or_else(|| HarnessError::Scenario("sweep failure".into()))?);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        let p = eval(mid).ok_or_else(|| HarnessError::Scenario("sweep failure".into()))?;
        if phi(&p) * f_lo <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    eval(0.5 * (lo + hi)).ok_or_else(|| HarnessError::Scenario("sweep failure".into()))
}
