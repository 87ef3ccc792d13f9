//! Reverse-mode differentiation through time for every cell variant, the
//! central-difference oracle used to check it, and the gradient-check report.
//!
//! The backward pass is derived by hand per cell. Couplings that are easy to
//! get wrong are spelled out where they happen: the shared output gate feeds
//! both `h` and `ĥ`; the cross-cell peepholes route `ĉ⁻` into the dynamics
//! gates and `c⁻` into the bias gates; the static input gets a contribution
//! from every step.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cells::{
    forward_sequence, init_params_with, mask_peepholes, CellOptions, CellParams, FinalState, LstmCache,
    LstmParams, ModeVarCache, ModeVarParams, StepCache, Variant,
};
use crate::error::{Error, Result};
use crate::numerics::{matvec_t_acc, Matrix, Vector};
use crate::params::ParamSet;
use crate::reference::{central_differences, run, Diff, Layout, Scalar, Structure, Tensors};

/// Gradients of a scalar loss with respect to cell parameters and inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    /// Same structure as the differentiated parameter set.
    pub params: CellParams,
    /// `∂L/∂x_t` per frame.
    pub frames: Vec<Vector>,
    /// `∂L/∂x̂` summed over every step (mode variational cells only).
    pub static_frame: Option<Vector>,
    /// Per-step contributions to `static_frame`; empty when not available.
    pub static_steps: Vec<Vector>,
}

/// Loss gradient arriving at the latent features of each step.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputSeed {
    pub h: Vec<Vector>,
    /// Empty for the plain LSTM.
    pub h_hat: Vec<Vector>,
}

impl OutputSeed {
    /// Seed only the final step's `h` (and `ĥ` when given).
    pub fn final_step(steps: usize, d_h: Vector, d_h_hat: Option<Vector>) -> Self {
        let dim = d_h.dim();
        let mut h = vec![Vector::zeros(dim); steps];
        let mut h_hat = Vec::new();
        if let Some(dh) = d_h_hat {
            h_hat = vec![Vector::zeros(dim); steps];
            h_hat[steps - 1] = dh;
        }
        h[steps - 1] = d_h;
        OutputSeed { h, h_hat }
    }
}

fn sigmoid_grad(upstream: &Vector, s: &Vector) -> Vector {
    Vector::from_vec(
        upstream
            .iter()
            .zip(s.iter())
            .map(|(&d, &s)| d * s * (1.0 - s))
            .collect(),
    )
}

fn tanh_grad(upstream: &Vector, t: &Vector) -> Vector {
    Vector::from_vec(
        upstream
            .iter()
            .zip(t.iter())
            .map(|(&d, &t)| d * (1.0 - t * t))
            .collect(),
    )
}

fn mul(a: &Vector, b: &Vector) -> Vector {
    Vector::from_vec(a.iter().zip(b.iter()).map(|(x, y)| x * y).collect())
}

/// `pre = W · input + …`: accumulate `∂W` and `∂input`.
fn linear_back(grad_w: &mut Matrix, w: &Matrix, input: &Vector, d_pre: &Vector, d_input: &mut Vector) {
    grad_w.add_outer(d_pre, input);
    matvec_t_acc(w, d_pre, d_input).expect("shapes validated by forward pass");
}

fn check_seed(seed: &OutputSeed, steps: usize, d_h: usize, needs_hat: bool) -> Result<()> {
    if seed.h.len() != steps {
        return Err(Error::shape("output seed", format!("{} steps", seed.h.len()), steps));
    }
    if seed.h.iter().chain(&seed.h_hat).any(|v| v.dim() != d_h) {
        return Err(Error::shape("output seed", "seed vector", format!("dim {d_h}")));
    }
    if !seed.h_hat.is_empty() && (!needs_hat || seed.h_hat.len() != steps) {
        return Err(Error::invalid("bias-feature seed given for a cell without one, or wrong length"));
    }
    Ok(())
}

/// Backpropagates `seed` through the cached forward pass.
pub fn backward_sequence(params: &CellParams, caches: &[StepCache], seed: &OutputSeed) -> Result<Gradients> {
    if caches.is_empty() {
        return Err(Error::Empty("step caches"));
    }
    let mut grads = match params {
        CellParams::Lstm(p) => {
            let lstm: Vec<&LstmCache> = caches
                .iter()
                .map(|c| match c {
                    StepCache::Lstm(c) if c.x.dim() == p.input_dim && c.h.dim() == p.hidden_dim => Ok(c),
                    _ => Err(Error::Variant("caches do not match LSTM parameters".into())),
                })
                .collect::<Result<_>>()?;
            check_seed(seed, caches.len(), p.hidden_dim, false)?;
            let (g, frames) = lstm_backward(p, &lstm, seed);
            Gradients {
                params: CellParams::Lstm(g),
                frames,
                static_frame: None,
                static_steps: Vec::new(),
            }
        }
        CellParams::ModeVar(p) => {
            let mv: Vec<&ModeVarCache> = caches
                .iter()
                .map(|c| match c {
                    StepCache::ModeVar(c) if c.x.dim() == p.base.input_dim && c.h.dim() == p.base.hidden_dim => {
                        Ok(c)
                    }
                    _ => Err(Error::Variant("caches do not match mode variational parameters".into())),
                })
                .collect::<Result<_>>()?;
            check_seed(seed, caches.len(), p.base.hidden_dim, true)?;
            let (g, frames, static_steps) = mode_var_backward(p, &mv, seed);
            let mut total = Vector::zeros(p.base.input_dim);
            for s in &static_steps {
                total.add_assign(s);
            }
            Gradients {
                params: CellParams::ModeVar(g),
                frames,
                static_frame: Some(total),
                static_steps,
            }
        }
    };
    if params.diagonal_peephole() {
        mask_peepholes(&mut grads.params);
    }
    Ok(grads)
}

fn lstm_backward(p: &LstmParams, caches: &[&LstmCache], seed: &OutputSeed) -> (LstmParams, Vec<Vector>) {
    let n = p.hidden_dim;
    let mut g = p.zeroed();
    let mut d_frames = vec![Vector::zeros(p.input_dim); caches.len()];
    let mut dh_next = Vector::zeros(n);
    let mut dc_next = Vector::zeros(n);

    for (t, c) in caches.iter().enumerate().rev() {
        let mut dh = seed.h[t].clone();
        dh.add_assign(&dh_next);

        // h = o ⊙ tanh(c)
        let mut dc = tanh_grad(&mul(&dh, &c.o), &c.tanh_c);
        dc.add_assign(&dc_next);
        let d_pre_o = sigmoid_grad(&mul(&dh, &c.tanh_c), &c.o);

        let dx = &mut d_frames[t];
        let mut dh_prev = Vector::zeros(n);
        let mut dc_prev = Vector::zeros(n);

        linear_back(&mut g.w_xo, &p.w_xo, &c.x, &d_pre_o, dx);
        linear_back(&mut g.w_ho, &p.w_ho, &c.prev.h, &d_pre_o, &mut dh_prev);
        // the output gate peeks at the current cell
        linear_back(&mut g.w_co, &p.w_co, &c.c, &d_pre_o, &mut dc);
        g.b_o.add_assign(&d_pre_o);

        // c = f ⊙ c⁻ + i ⊙ g
        let d_pre_i = sigmoid_grad(&mul(&dc, &c.g), &c.i);
        let d_pre_f = sigmoid_grad(&mul(&dc, &c.prev.c), &c.f);
        let d_pre_g = tanh_grad(&mul(&dc, &c.i), &c.g);
        dc_prev.add_assign(&mul(&dc, &c.f));

        linear_back(&mut g.w_xi, &p.w_xi, &c.x, &d_pre_i, dx);
        linear_back(&mut g.w_hi, &p.w_hi, &c.prev.h, &d_pre_i, &mut dh_prev);
        linear_back(&mut g.w_ci, &p.w_ci, &c.prev.c, &d_pre_i, &mut dc_prev);
        g.b_i.add_assign(&d_pre_i);

        linear_back(&mut g.w_xf, &p.w_xf, &c.x, &d_pre_f, dx);
        linear_back(&mut g.w_hf, &p.w_hf, &c.prev.h, &d_pre_f, &mut dh_prev);
        linear_back(&mut g.w_cf, &p.w_cf, &c.prev.c, &d_pre_f, &mut dc_prev);
        g.b_f.add_assign(&d_pre_f);

        linear_back(&mut g.w_xc, &p.w_xc, &c.x, &d_pre_g, dx);
        linear_back(&mut g.w_hc, &p.w_hc, &c.prev.h, &d_pre_g, &mut dh_prev);
        g.b_c.add_assign(&d_pre_g);

        dh_next = dh_prev;
        dc_next = dc_prev;
    }
    (g, d_frames)
}

fn mode_var_backward(
    p: &ModeVarParams,
    caches: &[&ModeVarCache],
    seed: &OutputSeed,
) -> (ModeVarParams, Vec<Vector>, Vec<Vector>) {
    let n = p.base.hidden_dim;
    let d_x = p.base.input_dim;
    let base = &p.base;
    let bias = &p.bias;
    let mut g = p.zeroed();
    let mut d_frames = vec![Vector::zeros(d_x); caches.len()];
    let mut d_static = vec![Vector::zeros(d_x); caches.len()];
    let mut dh_next = Vector::zeros(n);
    let mut dc_next = Vector::zeros(n);
    let mut dhh_next = Vector::zeros(n);
    let mut dch_next = Vector::zeros(n);

    for (t, c) in caches.iter().enumerate().rev() {
        let mut dh = seed.h[t].clone();
        dh.add_assign(&dh_next);
        let mut dhh = match seed.h_hat.get(t) {
            Some(s) => s.clone(),
            None => Vector::zeros(n),
        };
        dhh.add_assign(&dhh_next);

        // h = o ⊙ tanh(c), ĥ = o ⊙ tanh(ĉ): the shared gate collects both
        let mut dc = tanh_grad(&mul(&dh, &c.o), &c.tanh_c);
        dc.add_assign(&dc_next);
        let mut dch = tanh_grad(&mul(&dhh, &c.o), &c.tanh_c_hat);
        dch.add_assign(&dch_next);
        let mut d_o = mul(&dh, &c.tanh_c);
        d_o.add_assign(&mul(&dhh, &c.tanh_c_hat));
        let d_pre_o = sigmoid_grad(&d_o, &c.o);

        let mut dh_prev = Vector::zeros(n);
        let mut dc_prev = Vector::zeros(n);
        let mut dhh_prev = Vector::zeros(n);
        let mut dch_prev = Vector::zeros(n);
        let dx = &mut d_frames[t];
        let dxh = &mut d_static[t];

        linear_back(&mut g.base.w_xo, &base.w_xo, &c.x, &d_pre_o, dx);
        linear_back(&mut g.base.w_ho, &base.w_ho, &c.prev.h, &d_pre_o, &mut dh_prev);
        linear_back(&mut g.base.w_co, &base.w_co, &c.c, &d_pre_o, &mut dc);
        linear_back(&mut g.w_chat_o, &p.w_chat_o, &c.c_hat, &d_pre_o, &mut dch);
        linear_back(&mut g.w_hhat_o, &p.w_hhat_o, &c.prev.h_hat, &d_pre_o, &mut dhh_prev);
        g.base.b_o.add_assign(&d_pre_o);

        // c = f ⊙ c⁻ + i ⊙ g
        let mut d_i = mul(&dc, &c.g);
        let mut d_f = mul(&dc, &c.prev.c);
        let d_pre_g = tanh_grad(&mul(&dc, &c.i), &c.g);
        dc_prev.add_assign(&mul(&dc, &c.f));

        // ĉ = f̂ ⊙ ĉ⁻ + î ⊙ ĝ, or with i, f when the bias cell borrows them
        let (d_i_hat, d_f_hat, d_pre_g_hat) = if p.bias_cell_dynamics_gates {
            d_i.add_assign(&mul(&dch, &c.g_hat));
            d_f.add_assign(&mul(&dch, &c.prev.c_hat));
            dch_prev.add_assign(&mul(&dch, &c.f));
            (Vector::zeros(n), Vector::zeros(n), tanh_grad(&mul(&dch, &c.i), &c.g_hat))
        } else {
            dch_prev.add_assign(&mul(&dch, &c.f_hat));
            (
                mul(&dch, &c.g_hat),
                mul(&dch, &c.prev.c_hat),
                tanh_grad(&mul(&dch, &c.i_hat), &c.g_hat),
            )
        };
        let d_pre_i = sigmoid_grad(&d_i, &c.i);
        let d_pre_f = sigmoid_grad(&d_f, &c.f);
        let d_pre_i_hat = sigmoid_grad(&d_i_hat, &c.i_hat);
        let d_pre_f_hat = sigmoid_grad(&d_f_hat, &c.f_hat);

        // dynamics gates
        linear_back(&mut g.base.w_xi, &base.w_xi, &c.x, &d_pre_i, dx);
        linear_back(&mut g.base.w_hi, &base.w_hi, &c.prev.h, &d_pre_i, &mut dh_prev);
        linear_back(&mut g.base.w_ci, &base.w_ci, &c.prev.c, &d_pre_i, &mut dc_prev);
        g.base.b_i.add_assign(&d_pre_i);

        linear_back(&mut g.base.w_xf, &base.w_xf, &c.x, &d_pre_f, dx);
        linear_back(&mut g.base.w_hf, &base.w_hf, &c.prev.h, &d_pre_f, &mut dh_prev);
        linear_back(&mut g.base.w_cf, &base.w_cf, &c.prev.c, &d_pre_f, &mut dc_prev);
        g.base.b_f.add_assign(&d_pre_f);

        linear_back(&mut g.base.w_xc, &base.w_xc, &c.x, &d_pre_g, dx);
        linear_back(&mut g.base.w_hc, &base.w_hc, &c.prev.h, &d_pre_g, &mut dh_prev);
        g.base.b_c.add_assign(&d_pre_g);

        // bias gates
        let gb = &mut g.bias;
        linear_back(&mut gb.w_x_i, &bias.w_x_i, &c.x_hat, &d_pre_i_hat, dxh);
        linear_back(&mut gb.w_h_i, &bias.w_h_i, &c.prev.h_hat, &d_pre_i_hat, &mut dhh_prev);
        linear_back(&mut gb.w_c_i, &bias.w_c_i, &c.prev.c_hat, &d_pre_i_hat, &mut dch_prev);
        gb.b_i.add_assign(&d_pre_i_hat);

        linear_back(&mut gb.w_x_f, &bias.w_x_f, &c.x_hat, &d_pre_f_hat, dxh);
        linear_back(&mut gb.w_h_f, &bias.w_h_f, &c.prev.h_hat, &d_pre_f_hat, &mut dhh_prev);
        linear_back(&mut gb.w_c_f, &bias.w_c_f, &c.prev.c_hat, &d_pre_f_hat, &mut dch_prev);
        gb.b_f.add_assign(&d_pre_f_hat);

        linear_back(&mut gb.w_x_c, &bias.w_x_c, &c.x_hat, &d_pre_g_hat, dxh);
        linear_back(&mut gb.w_h_c, &bias.w_h_c, &c.prev.h_hat, &d_pre_g_hat, &mut dhh_prev);
        gb.b_c.add_assign(&d_pre_g_hat);

        // cross-cell peepholes
        if let (Some(cross), Some(gcross)) = (&p.cross, &mut g.cross) {
            linear_back(&mut gcross.w_chat_i, &cross.w_chat_i, &c.prev.c_hat, &d_pre_i, &mut dch_prev);
            linear_back(&mut gcross.w_chat_f, &cross.w_chat_f, &c.prev.c_hat, &d_pre_f, &mut dch_prev);
            match (&cross.untied, &mut gcross.untied) {
                (Some(u), Some(gu)) => {
                    linear_back(&mut gu.w_c_ihat, &u.w_c_ihat, &c.prev.c, &d_pre_i_hat, &mut dc_prev);
                    linear_back(&mut gu.w_c_fhat, &u.w_c_fhat, &c.prev.c, &d_pre_f_hat, &mut dc_prev);
                }
                _ => {
                    // W_ci and W_cf are shared with the bias gates
                    linear_back(&mut g.base.w_ci, &base.w_ci, &c.prev.c, &d_pre_i_hat, &mut dc_prev);
                    linear_back(&mut g.base.w_cf, &base.w_cf, &c.prev.c, &d_pre_f_hat, &mut dc_prev);
                }
            }
        }

        dh_next = dh_prev;
        dc_next = dc_prev;
        dhh_next = dhh_prev;
        dch_next = dch_prev;
    }
    (g, d_frames, d_static)
}

/// Central differences of `loss` over every scalar of `params`.
pub fn central_difference<P: ParamSet>(params: &P, loss: impl Fn(&P) -> f64, epsilon: f64) -> P {
    let base = params.to_flat();
    let mut flat = base.clone();
    let mut work = params.clone();
    let mut out = vec![0.0; base.len()];
    for k in 0..base.len() {
        flat[k] = base[k] + epsilon;
        work.set_flat(&flat);
        let plus = loss(&work);
        flat[k] = base[k] - epsilon;
        work.set_flat(&flat);
        let minus = loss(&work);
        flat[k] = base[k];
        out[k] = (plus - minus) / (2.0 * epsilon);
    }
    let mut grads = params.clone();
    grads.set_flat(&out);
    grads
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if (1e-7..=1e-3).contains(&epsilon) {
        Ok(())
    } else {
        Err(Error::invalid(format!("epsilon {epsilon} outside [1e-7, 1e-3]")))
    }
}

/// Central differences of `loss_fn ∘ forward_sequence` with respect to the
/// parameters, every frame and the static frame.
pub fn finite_diff_grad(
    params: &CellParams,
    frames: &[Vector],
    static_frame: Option<&Vector>,
    loss_fn: impl Fn(&FinalState) -> f64,
    epsilon: f64,
) -> Result<Gradients> {
    check_epsilon(epsilon)?;
    let eval = |p: &CellParams, fr: &[Vector], st: Option<&Vector>| -> f64 {
        let (fin, _) = forward_sequence(p, fr, st).expect("validated forward");
        loss_fn(&fin)
    };
    // validate once so the closures below can unwrap
    forward_sequence(params, frames, static_frame)?;

    let grad_params = central_difference(params, |p| eval(p, frames, static_frame), epsilon);

    let mut work = frames.to_vec();
    let mut d_frames = Vec::with_capacity(frames.len());
    for t in 0..frames.len() {
        let mut d = Vector::zeros(frames[t].dim());
        for k in 0..frames[t].dim() {
            let orig = frames[t][k];
            work[t][k] = orig + epsilon;
            let plus = eval(params, &work, static_frame);
            work[t][k] = orig - epsilon;
            let minus = eval(params, &work, static_frame);
            work[t][k] = orig;
            d[k] = (plus - minus) / (2.0 * epsilon);
        }
        d_frames.push(d);
    }

    let d_static = match (params, static_frame) {
        (CellParams::ModeVar(_), Some(s)) => {
            let mut work = s.clone();
            let mut d = Vector::zeros(s.dim());
            for k in 0..s.dim() {
                work[k] = s[k] + epsilon;
                let plus = eval(params, frames, Some(&work));
                work[k] = s[k] - epsilon;
                let minus = eval(params, frames, Some(&work));
                work[k] = s[k];
                d[k] = (plus - minus) / (2.0 * epsilon);
            }
            Some(d)
        }
        _ => None,
    };

    Ok(Gradients {
        params: grad_params,
        frames: d_frames,
        static_frame: d_static,
        static_steps: Vec::new(),
    })
}

pub const REL_ERROR_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub steps: usize,
}

impl Default for CheckDims {
    fn default() -> Self {
        CheckDims {
            input_dim: 2,
            hidden_dim: 3,
            steps: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst entry within the tensor.
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub variant: Variant,
    pub seed: u64,
    pub per_param: Vec<ParamError>,
    pub global_max: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamError> {
        self.per_param
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<14} {:>14}  result", "parameter", "max rel err");
        for p in &self.per_param {
            let verdict = if p.max_rel_error <= self.tolerance { "pass" } else { "FAIL" };
            let _ = writeln!(out, "{:<14} {:>14.3e}  {verdict}", p.name, p.max_rel_error);
        }
        out
    }

    /// `key = value` lines, one per parameter plus a summary.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "variant = \"{}\"", self.variant);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "tolerance = {:e}", self.tolerance);
        let _ = writeln!(out, "global_max = {:e}", self.global_max);
        let _ = writeln!(out, "passed = {}", self.passed);
        for p in &self.per_param {
            let _ = writeln!(out, "\"max_rel_error.{}\" = {:e}", p.name, p.max_rel_error);
        }
        out
    }
}

/// Compares two gradient sets tensor by tensor. Frame and static-frame
/// gradients are reported under `x` and `x_hat`.
pub fn compare_gradients(
    variant: Variant,
    seed: u64,
    analytic: &Gradients,
    numeric: &Gradients,
    tolerance: f64,
) -> GradCheckReport {
    let mut per_param = Vec::new();
    let numeric_flat = numeric.params.to_flat();
    let mut at = 0;
    analytic.params.visit(&mut |name, _, values| {
        per_param.push(worst_of(name, values, &numeric_flat[at..at + values.len()]));
        at += values.len();
    });

    let a_frames: Vec<f64> = analytic.frames.iter().flat_map(|v| v.iter().copied()).collect();
    let n_frames: Vec<f64> = numeric.frames.iter().flat_map(|v| v.iter().copied()).collect();
    per_param.push(worst_of("x", &a_frames, &n_frames));
    if let (Some(a), Some(n)) = (&analytic.static_frame, &numeric.static_frame) {
        per_param.push(worst_of("x_hat", a.as_slice(), n.as_slice()));
    }

    let global_max = per_param.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    GradCheckReport {
        variant,
        seed,
        per_param,
        global_max,
        tolerance,
        passed: global_max <= tolerance,
    }
}

fn worst_of(name: &str, analytic: &[f64], numeric: &[f64]) -> ParamError {
    let mut worst = (0, 0.0);
    for (k, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(a, n);
        if e > worst.1 || e.is_nan() {
            worst = (k, e);
        }
    }
    ParamError {
        name: name.to_string(),
        max_rel_error: worst.1,
        worst_index: worst.0,
    }
}

/// A seeded random cell, input sequence and linear read-out of the final
/// latent features.
#[derive(Clone, Debug)]
pub struct CheckInstance {
    pub params: CellParams,
    pub frames: Vec<Vector>,
    pub static_frame: Option<Vector>,
    /// `L = r · h_T (+ q · ĥ_T)`
    pub read_h: Vector,
    pub read_h_hat: Option<Vector>,
}

impl CheckInstance {
    pub fn new(variant: Variant, dims: CheckDims, options: CellOptions, seed: u64) -> Result<Self> {
        let mut params = init_params_with(dims.input_dim, dims.hidden_dim, variant, options, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x00c0_ffee);
        params.visit_mut(&mut |_, _, v| v.iter_mut().for_each(|x| *x = rng.random_range(-0.7..0.7)));
        if options.diagonal_peephole {
            mask_peepholes(&mut params);
        }
        // Inputs and read-out weights have magnitude in [0.3, 1]: a near-zero
        // static input component would shrink a whole weight column's gradient
        // to the central-difference noise floor (~1e-11).
        let mut rand_vec = |n: usize| {
            Vector::from_vec(
                (0..n)
                    .map(|_| {
                        let m = rng.random_range(0.3..1.0);
                        if rng.random_bool(0.5) { m } else { -m }
                    })
                    .collect(),
            )
        };
        let frames = (0..dims.steps).map(|_| rand_vec(dims.input_dim)).collect();
        let static_frame = variant.is_mode_var().then(|| rand_vec(dims.input_dim));
        let read_h = rand_vec(dims.hidden_dim);
        let read_h_hat = variant.is_mode_var().then(|| rand_vec(dims.hidden_dim));
        Ok(CheckInstance {
            params,
            frames,
            static_frame,
            read_h,
            read_h_hat,
        })
    }

    pub fn loss(&self, fin: &FinalState) -> f64 {
        let mut l = self.read_h.dot(fin.h()).expect("dims");
        if let (Some(q), Some(hh)) = (&self.read_h_hat, fin.h_hat()) {
            l += q.dot(hh).expect("dims");
        }
        l
    }

    pub fn analytic(&self) -> Result<Gradients> {
        let (_, caches) = forward_sequence(&self.params, &self.frames, self.static_frame.as_ref())?;
        let seed = OutputSeed::final_step(self.frames.len(), self.read_h.clone(), self.read_h_hat.clone());
        backward_sequence(&self.params, &caches, &seed)
    }

    /// Plain central differences through [`finite_diff_grad`].
    pub fn numeric(&self, epsilon: f64) -> Result<Gradients> {
        finite_diff_grad(
            &self.params,
            &self.frames,
            self.static_frame.as_ref(),
            |fin| self.loss(fin),
            epsilon,
        )
    }

    /// The same central differences, evaluated on the reference
    /// transcription with the loss change carried exactly instead of
    /// recovered by subtracting two rounded losses.
    ///
    /// A plain difference at `ε = 1e-5` has an absolute rounding floor near
    /// `1e-11`, which swamps the relative error of any entry below roughly
    /// `1e-6`. Random instances routinely have a few such entries.
    pub fn numeric_exact(&self, epsilon: f64) -> Result<Gradients> {
        check_epsilon(epsilon)?;
        forward_sequence(&self.params, &self.frames, self.static_frame.as_ref())?;
        let layout = Layout::of(&self.params);
        let n_params = layout.num_scalars();
        let (d_x, steps) = (self.params.input_dim(), self.frames.len());
        let mut point = self.params.to_flat();
        self.frames.iter().for_each(|f| point.extend_from_slice(f.as_slice()));
        if let Some(s) = &self.static_frame {
            point.extend_from_slice(s.as_slice());
        }
        let structure = Structure::of(&self.params);
        let read_h: Vec<Diff> = self.read_h.iter().map(|&v| Diff::fixed(v)).collect();
        let read_h_hat: Option<Vec<Diff>> =
            self.read_h_hat.as_ref().map(|q| q.iter().map(|&v| Diff::fixed(v)).collect());

        let grad = central_differences(&point, epsilon, |v| {
            let w = Tensors::from_flat(&layout, &v[..n_params]);
            let frames: Vec<Vec<Diff>> = v[n_params..n_params + steps * d_x].chunks(d_x).map(<[_]>::to_vec).collect();
            let stat = v[n_params + steps * d_x..].to_vec();
            let statics = vec![stat; steps];
            let trace = run(&w, structure, &frames, &statics);
            let last = trace.last().expect("non-empty");
            let mut l = dot(&read_h, &last.h);
            if let Some(q) = &read_h_hat {
                l = l + dot(q, &last.h_hat);
            }
            l
        });

        let mut params = self.params.clone();
        params.set_flat(&grad[..n_params]);
        let frames = grad[n_params..n_params + steps * d_x]
            .chunks(d_x)
            .map(|c| Vector::from_vec(c.to_vec()))
            .collect();
        let static_frame = self
            .static_frame
            .as_ref()
            .map(|_| Vector::from_vec(grad[n_params + steps * d_x..].to_vec()));
        Ok(Gradients {
            params,
            frames,
            static_frame,
            static_steps: Vec::new(),
        })
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::constant(0.0), |acc, (x, y)| acc + *x * *y)
}

pub const CHECK_EPSILON: f64 = 1e-5;

/// Analytic versus central-difference gradients on a seeded random instance.
pub fn grad_check(variant: Variant, dims: CheckDims, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    grad_check_with(variant, dims, CellOptions::default(), seed, tolerance)
}

pub fn grad_check_with(
    variant: Variant,
    dims: CheckDims,
    options: CellOptions,
    seed: u64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if tolerance <= 0.0 || tolerance.is_nan() {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let inst = CheckInstance::new(variant, dims, options, seed)?;
    let analytic = inst.analytic()?;
    let mut numeric = inst.numeric_exact(CHECK_EPSILON)?;
    if options.diagonal_peephole {
        // off-diagonal peephole entries are not free parameters
        mask_peepholes(&mut numeric.params);
    }
    Ok(compare_gradients(variant, seed, &analytic, &numeric, tolerance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{forward_steps, LstmParams};

    #[test]
    fn zero_seed_gives_zero_gradients() {
        for variant in Variant::ALL {
            let inst = CheckInstance::new(variant, CheckDims::default(), CellOptions::default(), 3).unwrap();
            let (_, caches) = forward_sequence(&inst.params, &inst.frames, inst.static_frame.as_ref()).unwrap();
            let hat = variant.is_mode_var().then(|| Vector::zeros(3));
            let seed = OutputSeed::final_step(inst.frames.len(), Vector::zeros(3), hat);
            let g = backward_sequence(&inst.params, &caches, &seed).unwrap();
            assert!(g.params.to_flat().iter().all(|&v| v == 0.0));
            assert!(g.frames.iter().all(|f| f.iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn scalar_lstm_matches_hand_derivative() {
        // Only W_xc = 1; x = 1; L = h. By hand:
        //   g = tanh(1), c = g/2, h = tanh(c)/2
        //   ∂L/∂W_xc = ½ (1 − tanh²c) · ½ (1 − g²) · x   (o and i fixed at ½)
        //   ∂L/∂b_o  = tanh(c) · ¼   (σ' = ¼ at 0; o's pre-activation W_co c = 0)
        //   ∂L/∂W_co = ∂L/∂b_o · c
        let mut p = LstmParams::zeros(1, 1);
        p.w_xc = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let params = CellParams::Lstm(p);
        let frames = [Vector::from_vec(vec![1.0])];
        let (_, caches) = forward_sequence(&params, &frames, None).unwrap();
        let g = backward_sequence(&params, &caches, &OutputSeed::final_step(1, Vector::filled(1, 1.0), None)).unwrap();

        let gt = 1f64.tanh();
        let c = 0.5 * gt;
        let tc = c.tanh();
        // dc also receives the output gate's peephole path (W_co = 0 here)
        let d_w_xc = 0.5 * (1.0 - tc * tc) * 0.5 * (1.0 - gt * gt);
        let d_b_o = tc * 0.25;
        assert!((g.params.tensor("W_xc").unwrap()[0] - d_w_xc).abs() < 1e-10);
        assert!((g.params.tensor("b_o").unwrap()[0] - d_b_o).abs() < 1e-10);
        assert!((g.params.tensor("W_co").unwrap()[0] - d_b_o * c).abs() < 1e-10);
        // i and f: d c / d pre_i = g · ¼, d c / d pre_f = c⁻ · ¼ = 0
        let dc = 0.5 * (1.0 - tc * tc);
        assert!((g.params.tensor("b_i").unwrap()[0] - dc * gt * 0.25).abs() < 1e-10);
        assert_eq!(g.params.tensor("b_f").unwrap()[0], 0.0);
    }

    #[test]
    fn central_difference_exact_on_quadratic() {
        let mut p = LstmParams::zeros(1, 1);
        p.w_xi = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        let g = central_difference(&p, |q| q.w_xi[(0, 0)].powi(2), 1e-5);
        assert!((g.w_xi[(0, 0)] - 6.0).abs() < 1e-8);
        assert!(g.to_flat().iter().enumerate().all(|(k, &v)| k == 0 || v == 0.0));
    }

    #[test]
    fn constant_loss_gives_zero_numeric_gradient() {
        let inst = CheckInstance::new(Variant::Modevar, CheckDims::default(), CellOptions::default(), 1).unwrap();
        let g = finite_diff_grad(&inst.params, &inst.frames, inst.static_frame.as_ref(), |_| 4.2, 1e-5).unwrap();
        assert!(g.params.to_flat().iter().all(|&v| v == 0.0));
        assert!(g.static_frame.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn epsilon_range_enforced() {
        let inst = CheckInstance::new(Variant::Lstm, CheckDims::default(), CellOptions::default(), 1).unwrap();
        assert!(finite_diff_grad(&inst.params, &inst.frames, None, |f| f.h()[0], 1e-2).is_err());
        assert!(finite_diff_grad(&inst.params, &inst.frames, None, |f| f.h()[0], 1e-9).is_err());
    }

    #[test]
    fn all_variants_pass_spec_instance() {
        let dims = CheckDims { input_dim: 2, hidden_dim: 3, steps: 4 };
        for variant in Variant::ALL {
            let r = grad_check(variant, dims, 7, 1e-5).unwrap();
            assert!(r.passed, "{variant}: {}", r.to_table());
        }
    }

    #[test]
    fn options_pass_gradient_check() {
        let dims = CheckDims { input_dim: 3, hidden_dim: 3, steps: 5 };
        let opts = [
            CellOptions { diagonal_peephole: true, ..Default::default() },
            CellOptions { bias_cell_dynamics_gates: true, ..Default::default() },
            CellOptions { untied_crosscell: true, ..Default::default() },
            CellOptions { diagonal_peephole: true, bias_cell_dynamics_gates: true, untied_crosscell: true },
        ];
        for o in opts {
            for variant in Variant::ALL {
                let r = grad_check_with(variant, dims, o, 13, 1e-5).unwrap();
                assert!(r.passed, "{variant} {o:?}: {}", r.to_table());
            }
        }
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let inst = CheckInstance::new(Variant::ModevarCrosscell, CheckDims::default(), CellOptions::default(), 7)
            .unwrap();
        let mut analytic = inst.analytic().unwrap();
        let numeric = inst.numeric(CHECK_EPSILON).unwrap();
        assert!(analytic.params.with_tensor_mut("W_hi", &mut |v| v[0] *= 1.01));
        let r = compare_gradients(Variant::ModevarCrosscell, 7, &analytic, &numeric, 1e-5);
        assert!(!r.passed);
        assert_eq!(r.worst().unwrap().name, "W_hi");
    }

    #[test]
    fn report_lists_each_parameter_once() {
        let r = grad_check(Variant::ModevarCrosscell, CheckDims::default(), 2, 1e-5).unwrap();
        let names: Vec<_> = r.per_param.iter().map(|p| p.name.as_str()).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert!(r.to_key_values().contains("passed = true"));
    }

    #[test]
    fn static_gradient_is_sum_over_replicated_inputs() {
        // Treat the T copies of x̂ as independent inputs, difference each one
        // numerically, and compare with the per-step analytic pieces and
        // their sum.
        let inst = CheckInstance::new(Variant::ModevarCrosscell, CheckDims { input_dim: 2, hidden_dim: 3, steps: 5 }, CellOptions::default(), 17).unwrap();
        let g = inst.analytic().unwrap();
        let xs = inst.static_frame.clone().unwrap();
        let mut statics = vec![xs.clone(); inst.frames.len()];
        let eps = 1e-6;
        let mut total = Vector::zeros(2);
        for t in 0..statics.len() {
            for k in 0..2 {
                let orig = statics[t][k];
                statics[t][k] = orig + eps;
                let plus = inst.loss(&forward_steps(&inst.params, &inst.frames, Some(&statics)).unwrap().0);
                statics[t][k] = orig - eps;
                let minus = inst.loss(&forward_steps(&inst.params, &inst.frames, Some(&statics)).unwrap().0);
                statics[t][k] = orig;
                let d = (plus - minus) / (2.0 * eps);
                assert!(relative_error(g.static_steps[t][k], d) < 1e-5, "t={t} k={k}");
                total[k] += d;
            }
        }
        let sum = g.static_frame.unwrap();
        for k in 0..2 {
            assert!(relative_error(sum[k], total[k]) < 1e-5);
        }
    }

    #[test]
    fn zero_model_recurrent_gradients_vanish() {
        // All-zero weights with zero inputs keep h, c, ĥ, ĉ at zero, so every
        // weight that multiplies a previous state gets no gradient.
        for variant in Variant::ALL {
            let params = CellParams::zeros(2, 3, variant, CellOptions::default());
            let frames = vec![Vector::zeros(2); 4];
            let stat = Vector::zeros(2);
            let (_, caches) = forward_sequence(&params, &frames, Some(&stat)).unwrap();
            let hat = variant.is_mode_var().then(|| Vector::filled(3, 1.0));
            let seed = OutputSeed::final_step(4, Vector::filled(3, 1.0), hat);
            let g = backward_sequence(&params, &caches, &seed).unwrap();
            let recurrent = [
                "W_hi", "W_ci", "W_hf", "W_cf", "W_hc", "W_ho", "W_co", "W_hhat_ihat", "W_chat_ihat",
                "W_hhat_fhat", "W_chat_fhat", "W_hhat_chat", "W_chat_o", "W_hhat_o", "W_chat_i", "W_chat_f",
            ];
            g.params.visit(&mut |name, _, v| {
                if recurrent.contains(&name) {
                    assert!(v.iter().all(|&x| x == 0.0), "{variant} {name}");
                }
            });
        }
    }

    #[test]
    fn mismatched_caches_rejected() {
        let l = CheckInstance::new(Variant::Lstm, CheckDims::default(), CellOptions::default(), 1).unwrap();
        let m = CheckInstance::new(Variant::Modevar, CheckDims::default(), CellOptions::default(), 1).unwrap();
        let (_, caches) = forward_sequence(&l.params, &l.frames, None).unwrap();
        let seed = OutputSeed::final_step(4, Vector::zeros(3), Some(Vector::zeros(3)));
        assert!(backward_sequence(&m.params, &caches, &seed).is_err());
        let seed = OutputSeed::final_step(4, Vector::zeros(3), Some(Vector::zeros(3)));
        assert!(backward_sequence(&l.params, &caches, &seed).is_err());
        assert!(backward_sequence(&l.params, &[], &seed).is_err());
    }
}
