use chp_mpc_core::integrate::transition_map;
use chp_mpc_core::plant;
use chp_mpc_core::transform::{self, HurwitzGains};
use nalgebra::SVector;

fn main() {
    let p = chp_mpc_core::default_params();
    let gains = HurwitzGains::default();
    let (x0, u) = plant::find_equilibrium(&p, 5.0, 1.69).unwrap();
    let v_star = transform::virtual_input_for(&p, &gains, &x0, &u);
    let mut x = x0;
    x.0[6] += 0.05;
    x.0[11] += 0.1;
    let t = transform::forward_transform(&p, &x);
    let (z, w) = (t.z(), t.w());
    let v = v_star + SVector::<f64, 2>::new(0.2, -0.1);
    let tr = transition_map(&p, &gains, &z, &w, &v, 2.0, 4, &x, true).unwrap();
    let s = tr.sens.unwrap();
    let psi = |z: &SVector<f64, 9>, w: &SVector<f64, 4>, v: &SVector<f64, 2>| {
        transition_map(&p, &gains, z, w, v, 2.0, 4, &x, false).unwrap().w_next
    };
    let h = 1e-5;
    println!("F_w analytic col0: {:?}", s.f_w.column(0).transpose());
    let mut wp = w; wp[0] += h;
    let mut wm = w; wm[0] -= h;
    let fd = (psi(&z, &wp, &v) - psi(&z, &wm, &v)) / (2.0 * h);
    println!("F_w fd col0:       {:?}", fd.transpose());
    println!("G_w analytic col0: {:?}", s.g_w.column(0).transpose());
    let mut vp = v; vp[0] += h;
    let mut vm = v; vm[0] -= h;
    let fd = (psi(&z, &w, &vp) - psi(&z, &w, &vm)) / (2.0 * h);
    println!("G_w fd col0:       {:?}", fd.transpose());
    println!("F_z analytic col0: {:?}", s.f_z.column(0).transpose());
    let mut zp = z; zp[0] += h;
    let mut zm = z; zm[0] -= h;
    let fd = (psi(&zp, &w, &v) - psi(&zm, &w, &v)) / (2.0 * h);
    println!("F_z fd col0:       {:?}", fd.transpose());
    println!("F_z analytic col4: {:?}", s.f_z.column(4).transpose());
    let mut zp = z; zp[4] += h;
    let mut zm = z; zm[4] -= h;
    let fd = (psi(&zp, &w, &v) - psi(&zm, &w, &v)) / (2.0 * h);
    println!("F_z fd col4:       {:?}", fd.transpose());
}
