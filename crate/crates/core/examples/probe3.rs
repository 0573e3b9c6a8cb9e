use chp_mpc_core::plant::{self, PlantState};
use chp_mpc_core::transform::{self, HurwitzGains, TransformedState};
use nalgebra::{SMatrix, SVector};

fn main() {
    let p = chp_mpc_core::default_params();
    let gains = HurwitzGains::default();
    let (x0, u) = plant::find_equilibrium(&p, 5.0, 1.69).unwrap();
    let v_star = transform::virtual_input_for(&p, &gains, &x0, &u);
    let v = v_star + SVector::<f64, 2>::new(0.3, -0.2);
    let t0 = transform::forward_transform(&p, &x0);

    let (a_e, b_e, a_h, b_h) = transform::outer_matrices(&gains);
    let mut a_blk = SMatrix::<f64, 9, 9>::zeros();
    a_blk.fixed_view_mut::<5, 5>(0, 0).copy_from(&a_e);
    a_blk.fixed_view_mut::<4, 4>(5, 5).copy_from(&a_h);
    let mut b_blk = SMatrix::<f64, 9, 2>::zeros();
    b_blk.fixed_view_mut::<5, 1>(0, 0).copy_from(&b_e);
    b_blk.fixed_view_mut::<4, 1>(5, 1).copy_from(&b_h);

    let mut s = {
        let mut s = SVector::<f64, 13>::zeros();
        s.fixed_rows_mut::<9>(0).copy_from(&t0.z());
        s.fixed_rows_mut::<4>(9).copy_from(&t0.w());
        s
    };
    let mut x_seed = x0;
    let h: f64 = 0.5;
    let mut eval = |s: &SVector<f64, 13>, x_seed: &mut PlantState, tag: &str| -> SVector<f64, 13> {
        let ts = TransformedState::from_stacked(s);
        match transform::inverse_transform_counted(&p, &ts, x_seed) {
            Ok((x, it)) => {
                *x_seed = x;
                let f = plant::eval_drift(&p, &x).unwrap();
                let mut rhs = SVector::<f64, 13>::zeros();
                let z = s.fixed_rows::<9>(0).into_owned();
                rhs.fixed_rows_mut::<9>(0).copy_from(&(a_blk * z + b_blk * v));
                for (r, &i) in plant::ETA_IDX.iter().enumerate() {
                    rhs[9 + r] = f[i];
                }
                println!("  {tag}: inv ok in {it} iters");
                rhs
            }
            Err(e) => {
                println!("  {tag}: INVERT FAILED: {e}");
                println!("    target z head = {:.4} {:.4e} {:.4e} {:.4e} {:.4e}", s[0], s[1], s[2], s[3], s[4]);
                println!("    target xi_h = {:.4} {:.4e} {:.4e} {:.4e}", s[5], s[6], s[7], s[8]);
                println!("    target eta = {:.4} {:.4} {:.4} {:.4}", s[9], s[10], s[11], s[12]);
                std::process::exit(1);
            }
        }
    };
    for sub in 0..4 {
        println!("substep {sub}: s5..9 = {:.4e} {:.4e} {:.4e} {:.4e}", s[5], s[6], s[7], s[8]);
        let k1 = eval(&s, &mut x_seed, "k1");
        let k2 = eval(&(s + k1 * (h / 2.0)), &mut x_seed, "k2");
        let k3 = eval(&(s + k2 * (h / 2.0)), &mut x_seed, "k3");
        let k4 = eval(&(s + k3 * h), &mut x_seed, "k4");
        s += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    println!("done: final eta = {:?}", s.fixed_rows::<4>(9));
}
