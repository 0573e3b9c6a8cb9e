use chp_mpc_core::plant::{self, PlantState};
use chp_mpc_core::transform::{self, HurwitzGains};
use nalgebra::SVector;

fn main() {
    let p = chp_mpc_core::default_params();
    let gains = HurwitzGains::default();
    let (x0, u) = plant::find_equilibrium(&p, 5.0, 1.69).unwrap();
    let v_star = transform::virtual_input_for(&p, &gains, &x0, &u);
    let v = v_star + SVector::<f64, 2>::new(0.2, -0.1);
    let mut x = x0;
    x.0[6] += 0.05;
    x.0[11] += 0.1;

    // Check eval_normal_form_derivs gradients against FD.
    let d = transform::eval_normal_form_derivs(&p, &x);
    let nf0 = transform::eval_normal_form(&p, &x);
    println!("value consistency: a_dec diff {:.3e}, lf5 diff {:.3e}",
        (d.nf.a_dec - nf0.a_dec).amax(), (d.nf.lf5_h1 - nf0.lf5_h1).abs());
    let h = 1e-6;
    let mut worst_xi = 0.0f64;
    let mut worst_adec = 0.0f64;
    let mut worst_l5 = 0.0f64;
    for j in 0..13 {
        let hj = h * x.0[j].abs().max(1.0);
        let mut xp = x; xp.0[j] += hj;
        let mut xm = x; xm.0[j] -= hj;
        let np = transform::eval_normal_form(&p, &xp);
        let nm = transform::eval_normal_form(&p, &xm);
        for k in 0..5 {
            let fd = (np.xi_e[k] - nm.xi_e[k]) / (2.0 * hj);
            let e = (d.grad_xi_e[k][j] - fd).abs() / fd.abs().max(1.0);
            worst_xi = worst_xi.max(e);
        }
        let fd5 = (np.lf5_h1 - nm.lf5_h1) / (2.0 * hj);
        worst_l5 = worst_l5.max((d.grad_lf5_h1[j] - fd5).abs() / fd5.abs().max(1.0));
        for r in 0..2 { for c in 0..2 {
            let fd = (np.a_dec[(r,c)] - nm.a_dec[(r,c)]) / (2.0 * hj);
            let e = (d.grad_a_dec[r][c][j] - fd).abs() / fd.abs().max(1.0);
            worst_adec = worst_adec.max(e);
        }}
    }
    println!("grad xi_e err {worst_xi:.3e}, grad lf5 err {worst_l5:.3e}, grad a_dec err {worst_adec:.3e}");

    // Check the closed-loop field Jacobian via integrate's public transition at ts -> small.
    // Direct FD on u(x, v):
    let u0 = transform::feedback_law(&p, &gains, &x, &v).unwrap();
    println!("u0 = {:?}", u0);
    // du/dx via the formula
    let a = d.nf.a_dec;
    let det = a[(0,0)]*a[(1,1)] - a[(0,1)]*a[(1,0)];
    let a_inv = nalgebra::SMatrix::<f64,2,2>::new(a[(1,1)]/det, -a[(0,1)]/det, -a[(1,0)]/det, a[(0,0)]/det);
    let mut db1 = -d.grad_lf5_h1;
    for k in 0..5 { db1 -= d.grad_xi_e[k] * gains.alpha_e[k]; }
    let mut db2 = -d.grad_lf4_h2;
    for k in 0..4 { db2 -= d.grad_xi_h[k] * gains.alpha_h[k]; }
    let mut worst_du = 0.0f64;
    for j in 0..13 {
        let da_u = SVector::<f64,2>::new(
            d.grad_a_dec[0][0][j]*u0[0] + d.grad_a_dec[0][1][j]*u0[1],
            d.grad_a_dec[1][0][j]*u0[0] + d.grad_a_dec[1][1][j]*u0[1]);
        let col = a_inv * (SVector::<f64,2>::new(db1[j], db2[j]) - da_u);
        let hj = 1e-7 * x.0[j].abs().max(1.0);
        let mut xp = x; xp.0[j] += hj;
        let mut xm = x; xm.0[j] -= hj;
        let up = transform::feedback_law(&p, &gains, &xp, &v).unwrap();
        let um = transform::feedback_law(&p, &gains, &xm, &v).unwrap();
        for r in 0..2 {
            let fd = (up[r] - um[r]) / (2.0 * hj);
            let e = (col[r] - fd).abs() / fd.abs().max(1.0);
            if e > worst_du { worst_du = e; }
        }
    }
    println!("du/dx err {worst_du:.3e}");
}
