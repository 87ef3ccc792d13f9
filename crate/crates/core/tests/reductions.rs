use mvlstm::cells::*;
use mvlstm::{CellOptions, CellParams, Matrix, ParamSet, Variant, Vector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Every weight and bias uniform in `[-1, 1]`, peephole masks respected.
fn random_params(variant: Variant, options: CellOptions, d_x: usize, d_h: usize, seed: u64) -> CellParams {
    let mut p = init_params_with(d_x, d_h, variant, options, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let flat: Vec<f64> = (0..p.num_scalars()).map(|_| rng.random_range(-1.0..=1.0)).collect();
    p.set_flat(&flat);
    if options.diagonal_peephole {
        mask_peepholes(&mut p);
    }
    p
}

fn random_frames(d_x: usize, steps: usize, seed: u64) -> Vec<Vector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..steps)
        .map(|_| Vector::from_vec((0..d_x).map(|_| rng.random_range(-2.0..=2.0)).collect()))
        .collect()
}

fn mode_var(p: CellParams) -> ModeVarParams {
    match p {
        CellParams::ModeVar(m) => m,
        CellParams::Lstm(_) => unreachable!(),
    }
}

fn zeroed(m: &Matrix) -> Matrix {
    Matrix::zeros(m.rows(), m.cols())
}

fn run_mode_var(p: &ModeVarParams, frames: &[Vector], statics: &[Vector]) -> Vec<ModeVarState> {
    let mut s = ModeVarState::zeros(p.base.hidden_dim);
    let mut out = Vec::new();
    for (x, x_hat) in frames.iter().zip(statics) {
        s = if p.cross.is_some() {
            crosscell_step(p, &s, x, x_hat).unwrap().0
        } else {
            modevar_step(p, &s, x, x_hat).unwrap().0
        };
        out.push(s.clone());
    }
    out
}

fn options() -> impl Strategy<Value = CellOptions> {
    (any::<bool>(), any::<bool>(), any::<bool>()).prop_map(|(d, b, u)| CellOptions {
        diagonal_peephole: d,
        bias_cell_dynamics_gates: b,
        untied_crosscell: u,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn crosscell_without_cross_terms_is_modevar(
        opts in options(), d_x in 1usize..5, d_h in 1usize..6, steps in 1usize..12, seed in any::<u64>()
    ) {
        let mut cross = mode_var(random_params(Variant::ModevarCrosscell, opts, d_x, d_h, seed));
        let c = cross.cross.as_mut().unwrap();
        c.w_chat_i = zeroed(&c.w_chat_i);
        c.w_chat_f = zeroed(&c.w_chat_f);
        match &mut c.untied {
            Some(u) => {
                u.w_c_ihat = zeroed(&u.w_c_ihat);
                u.w_c_fhat = zeroed(&u.w_c_fhat);
            }
            // the bias gates share W_ci and W_cf, so both paths lose them
            None => {
                cross.base.w_ci = zeroed(&cross.base.w_ci);
                cross.base.w_cf = zeroed(&cross.base.w_cf);
            }
        }
        let mut plain = cross.clone();
        plain.cross = None;
        let frames = random_frames(d_x, steps, seed.wrapping_add(1));
        let statics = random_frames(d_x, steps, seed.wrapping_add(2));
        let a = run_mode_var(&cross, &frames, &statics);
        let b = run_mode_var(&plain, &frames, &statics);
        for (sa, sb) in a.iter().zip(&b) {
            prop_assert!(sa.max_abs_diff(sb) <= 1e-12);
        }
    }

    #[test]
    fn modevar_without_bias_path_is_lstm(
        opts in options(), d_x in 1usize..5, d_h in 1usize..6, steps in 1usize..12, seed in any::<u64>()
    ) {
        let mut m = mode_var(random_params(Variant::Modevar, opts, d_x, d_h, seed));
        m.bias = BiasPath::zeros(d_x, d_h);
        m.w_chat_o = zeroed(&m.w_chat_o);
        m.w_hhat_o = zeroed(&m.w_hhat_o);
        let frames = random_frames(d_x, steps, seed.wrapping_add(1));
        let statics = random_frames(d_x, steps, seed.wrapping_add(2));
        let states = run_mode_var(&m, &frames, &statics);
        let mut s = CellState::zeros(d_h);
        for (x, mv) in frames.iter().zip(&states) {
            s = lstm_step(&m.base, &s, x).unwrap().0;
            prop_assert!(s.h.sub(&mv.h).unwrap().norm_inf() <= 1e-12);
            prop_assert!(s.c.sub(&mv.c).unwrap().norm_inf() <= 1e-12);
            prop_assert!(mv.c_hat.norm_inf() == 0.0);
        }
    }

    #[test]
    fn tied_paths_on_the_same_input_stay_identical(
        crosscell in any::<bool>(), opts in options(), d_x in 1usize..5, d_h in 1usize..6,
        steps in 1usize..51, seed in any::<u64>()
    ) {
        let variant = if crosscell { Variant::ModevarCrosscell } else { Variant::Modevar };
        let opts = CellOptions { untied_crosscell: false, ..opts };
        let mut m = mode_var(random_params(variant, opts, d_x, d_h, seed));
        m.bias = BiasPath::tied_to(&m.base);
        if let Some(c) = &mut m.cross {
            c.w_chat_i = m.base.w_ci.clone();
            c.w_chat_f = m.base.w_cf.clone();
        }
        let frames = random_frames(d_x, steps, seed.wrapping_add(1));
        for s in run_mode_var(&m, &frames, &frames) {
            prop_assert_eq!(&s.c_hat, &s.c);
            prop_assert_eq!(&s.h_hat, &s.h);
        }
    }
}
