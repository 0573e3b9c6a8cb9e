use chp_mpc_core::plant;
use chp_mpc_core::transform::{self, HurwitzGains, TransformedState};

fn main() {
    let p = chp_mpc_core::default_params();
    let _gains = HurwitzGains::default();
    let (x, _u) = plant::find_equilibrium(&p, 5.0, 1.69).unwrap();
    let t0 = transform::forward_transform(&p, &x);
    // Perturb the chain tail the way one RK4 stage does.
    let mut tgt = t0;
    tgt.xi_e[4] += 0.15 * 0.25; // (h/2) * 0.3 on the top chain state
    tgt.xi_h[3] += -0.1 * 0.25;
    // Manual Newton with diagnostics.
    let target = tgt.stacked();
    let mut xc = x;
    for it in 0..20 {
        let cur = transform::forward_transform(&p, &xc).stacked();
        let res = target - cur;
        let jac = transform::phi_jacobian(&p, &xc);
        let step = jac.lu().solve(&res).unwrap();
        println!("it {it}: |res| = {:.3e}  |step| = {:.3e}", res.amax(), step.amax());
        if res.amax() < 1e-10 { break; }
        xc = plant::PlantState(xc.0 + step);
    }
    // Also check: does phi_jacobian match FD of forward_transform?
    let mut worst = 0.0f64;
    let jac = transform::phi_jacobian(&p, &x);
    for c in 0..13 {
        let h = 1e-6 * x.0[c].abs().max(1.0);
        let mut xp = x; xp.0[c] += h;
        let mut xm = x; xm.0[c] -= h;
        let fp = transform::forward_transform(&p, &xp).stacked();
        let fm = transform::forward_transform(&p, &xm).stacked();
        for r in 0..13 {
            let fd = (fp[r] - fm[r]) / (2.0 * h);
            let denom = fd.abs().max(1.0);
            let err = (jac[(r, c)] - fd).abs() / denom;
            if err > worst { worst = err; println!("  J[{r},{c}] ad {:.6e} fd {fd:.6e}", jac[(r,c)]); }
        }
    }
    println!("max rel jacobian err vs fd: {worst:.3e}");
    let _ = TransformedState::from_stacked(&target);
}
