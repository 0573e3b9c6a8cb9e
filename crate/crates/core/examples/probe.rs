//! Debug probe for the transition map Newton behavior.
use chp_mpc_core::plant;
use chp_mpc_core::transform::{self, HurwitzGains};
use chp_mpc_core::integrate;
use nalgebra::SVector;

fn main() {
    let p = chp_mpc_core::default_params();
    let gains = HurwitzGains::default();
    let (x, u) = plant::find_equilibrium(&p, 5.0, 1.69).unwrap();
    let v_star = transform::virtual_input_for(&p, &gains, &x, &u);
    println!("v* = {:?}", v_star);
    let t = transform::forward_transform(&p, &x);
    println!("z* = {:?}", t.z());
    let v = v_star + SVector::<f64, 2>::new(0.3, -0.2);
    // Integrate closed loop in x-space and compare to the normal-form route
    // subinterval by subinterval.
    let mut xc = x;
    for k in 0..8 {
        let dt = 0.25;
        match integrate::closed_loop_step(&p, &gains, &xc, &v, dt, 8) {
            Ok(xn) => {
                let tn = transform::forward_transform(&p, &xn);
                println!("t={:.2} |xi_e| max {:.3e} u_now {:?}", (k+1) as f64*dt,
                    tn.xi_e.amax(),
                    transform::feedback_law(&p, &gains, &xn, &v).map(|u| (u[0], u[1])));
                xc = xn;
            }
            Err(e) => { println!("closed_loop_step failed at k={k}: {e}"); break; }
        }
    }
    println!("--- transition_map 2s/4substeps:");
    match integrate::transition_map(&p, &gains, &t.z(), &t.w(), &v, 2.0, 4, &x, false) {
        Ok(tr) => println!("w_next {:?} z_next {:?}", tr.w_next, tr.z_next),
        Err(e) => println!("transition failed: {e}"),
    }
}
