//! Browser bindings. Each exported function is a thin wrapper over a plain
//! Rust function so the logic also runs (and is tested) natively.

use std::fmt::Write;

use mvlstm::autodiff::{grad_check_with, CheckDims};
use mvlstm::cells::{forward_steps, init_params, BiasPath, CellParams, StepCache};
use mvlstm::data::{make_modes, make_static_sequence, render_sample, GeneratorConfig};
use mvlstm::probe::{convergence_report, figure_svg, trace_features};
use mvlstm::{CellOptions, Result, Variant};
use wasm_bindgen::prelude::*;

/// Input dimension of the demo generator.
pub const INPUT_DIM: usize = 8;

fn demo_data() -> GeneratorConfig {
    GeneratorConfig {
        input_dim: INPUT_DIM,
        num_classes: 4,
        samples_per_cell: 1,
        ..Default::default()
    }
}

#[wasm_bindgen]
pub struct ProbeView {
    svg: String,
    convergence: Option<u32>,
    last_delta: f64,
}

#[wasm_bindgen]
impl ProbeView {
    #[wasm_bindgen(getter)]
    pub fn svg(&self) -> String {
        self.svg.clone()
    }

    /// First step whose change is below epsilon, if any.
    #[wasm_bindgen(getter)]
    pub fn convergence(&self) -> Option<u32> {
        self.convergence
    }

    /// Largest per-dimension change over the final step.
    #[wasm_bindgen(getter)]
    pub fn last_delta(&self) -> f64 {
        self.last_delta
    }
}

/// Heatmap of an untrained cell's features on frame `tau` of a synthetic
/// sample of class `class` under mode `mode`, replicated `n` times.
#[allow(clippy::too_many_arguments)]
pub fn probe(
    variant: Variant,
    hidden_dim: usize,
    seed: u64,
    class: usize,
    mode: usize,
    tau: usize,
    n: usize,
    epsilon: f64,
) -> Result<ProbeView> {
    let cfg = demo_data();
    cfg.validate()?;
    let modes = make_modes(&cfg, seed);
    let spec = modes
        .get(mode)
        .ok_or_else(|| mvlstm::Error::Invalid(format!("mode {mode} out of range (0..{})", modes.len())))?;
    if class >= cfg.num_classes {
        return Err(mvlstm::Error::Invalid(format!("class {class} out of range (0..{})", cfg.num_classes)));
    }
    let sample = render_sample(&cfg, seed, spec, class, seed, true);
    let seq = make_static_sequence(&sample, tau, n)?;
    let params = init_params(INPUT_DIM, hidden_dim, variant, seed)?;
    let trace = trace_features(&params, &seq, false)?;
    let report = convergence_report(&trace, epsilon)?;
    let f = &trace.features;
    let last_delta = if f.rows() < 2 {
        0.0
    } else {
        f.row(f.rows() - 1)
            .iter()
            .zip(f.row(f.rows() - 2))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    };
    let title = format!("{variant}, class {class}, mode {mode}, frame {tau} x {n}");
    Ok(ProbeView {
        svg: figure_svg(&trace, hidden_dim.min(15), &title)?,
        convergence: report.convergence_time.map(|t| t as u32),
        last_delta,
    })
}

/// Per-parameter relative errors of exact backpropagation against central
/// differences, one line per parameter.
pub fn gradcheck(variant: Variant, dims: CheckDims, seed: u64, tolerance: f64) -> Result<String> {
    let r = grad_check_with(variant, dims, CellOptions::default(), seed, tolerance)?;
    let mut s = String::new();
    for p in &r.per_param {
        let mark = if p.max_rel_error <= tolerance { "ok" } else { "FAIL" };
        writeln!(s, "{:<12} {:>10.3e}  {mark}", p.name, p.max_rel_error).unwrap();
    }
    writeln!(s, "worst {:.3e}: {}", r.global_max, if r.passed { "pass" } else { "fail" }).unwrap();
    Ok(s)
}

/// Largest `|ĉ − c|` and `|ĥ − h|` over `steps` steps with the bias path tied
/// to the dynamics path and fed the same frames.
pub fn tied_symmetry(variant: Variant, hidden_dim: usize, seed: u64, steps: usize) -> Result<f64> {
    if !variant.is_mode_var() {
        return Err(mvlstm::Error::Variant("the plain LSTM has no bias path".into()));
    }
    let cfg = demo_data();
    let modes = make_modes(&cfg, seed);
    let sample = render_sample(&cfg, seed, &modes[0], 0, seed, true);
    let frames: Vec<_> = sample.frames.iter().cycle().take(steps).cloned().collect();
    let mut params = init_params(INPUT_DIM, hidden_dim, variant, seed)?;
    if let CellParams::ModeVar(m) = &mut params {
        m.bias = BiasPath::tied_to(&m.base);
        if let Some(c) = &mut m.cross {
            c.w_chat_i = m.base.w_ci.clone();
            c.w_chat_f = m.base.w_cf.clone();
        }
    }
    let (_, caches) = forward_steps(&params, &frames, Some(&frames))?;
    let mut worst = 0.0f64;
    for c in &caches {
        if let StepCache::ModeVar(m) = c {
            worst = worst.max(m.c_hat.sub(&m.c)?.norm_inf()).max(m.h_hat.sub(&m.h)?.norm_inf());
        }
    }
    Ok(worst)
}

fn js(e: mvlstm::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn variant(name: &str) -> std::result::Result<Variant, JsError> {
    name.parse().map_err(js)
}

#[wasm_bindgen(js_name = probe)]
#[allow(clippy::too_many_arguments)]
pub fn probe_js(
    variant_name: &str,
    hidden_dim: usize,
    seed: u32,
    class: usize,
    mode: usize,
    tau: usize,
    n: usize,
    epsilon: f64,
) -> std::result::Result<ProbeView, JsError> {
    probe(variant(variant_name)?, hidden_dim, seed as u64, class, mode, tau, n, epsilon).map_err(js)
}

#[wasm_bindgen(js_name = gradcheck)]
pub fn gradcheck_js(
    variant_name: &str,
    input_dim: usize,
    hidden_dim: usize,
    steps: usize,
    seed: u32,
    tolerance: f64,
) -> std::result::Result<String, JsError> {
    let dims = CheckDims {
        input_dim,
        hidden_dim,
        steps,
    };
    gradcheck(variant(variant_name)?, dims, seed as u64, tolerance).map_err(js)
}

#[wasm_bindgen(js_name = tiedSymmetry)]
pub fn tied_symmetry_js(variant_name: &str, hidden_dim: usize, seed: u32, steps: usize) -> std::result::Result<f64, JsError> {
    tied_symmetry(variant(variant_name)?, hidden_dim, seed as u64, steps).map_err(js)
}
