//! Static-sequence probes: feed one replicated frame, record the latent
//! features step by step, and measure where they settle.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::cells::{forward_sequence, CellParams, Variant};
use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

pub const DEFAULT_EPSILON: f64 = 1e-4;
pub const DEFAULT_STEPS: usize = 30;
pub const DEFAULT_FIRST_K: usize = 15;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeTrace {
    /// Row `t` holds `h` after step `t + 1`.
    pub features: Matrix,
    /// Same layout for `ĥ`, when recorded.
    pub bias_features: Option<Matrix>,
    pub variant: Variant,
    pub source_seed: u64,
    pub tau: usize,
}

impl ProbeTrace {
    pub fn steps(&self) -> usize {
        self.features.rows()
    }
}

fn stack(rows: &[&Vector]) -> Matrix {
    let data: Vec<Vec<f64>> = rows.iter().map(|v| v.as_slice().to_vec()).collect();
    Matrix::from_rows(&data).expect("uniform rows")
}

/// Runs `params` over `static_seq`, whose frames must be bitwise identical.
/// Mode variational cells take the same frame as their static input.
pub fn trace_features(params: &CellParams, static_seq: &[Vector], record_bias: bool) -> Result<ProbeTrace> {
    let first = static_seq.first().ok_or(Error::Empty("static sequence"))?;
    let same = |v: &Vector| v.dim() == first.dim() && v.iter().zip(first.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
    if let Some(t) = static_seq.iter().position(|v| !same(v)) {
        return Err(Error::invalid(format!("frame {t} differs from frame 0; probe input must be static")));
    }
    let (_, caches) = forward_sequence(params, static_seq, Some(first))?;
    let h: Vec<&Vector> = caches.iter().map(|c| c.h()).collect();
    let bias_features = if record_bias {
        let hh: Option<Vec<&Vector>> = caches.iter().map(|c| c.h_hat()).collect();
        Some(stack(&hh.ok_or_else(|| Error::Variant("the plain LSTM has no bias features".into()))?))
    } else {
        None
    };
    Ok(ProbeTrace {
        features: stack(&h),
        bias_features,
        variant: params.variant(),
        source_seed: 0,
        tau: 0,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    /// First 1-based step `t ≥ 2` with `‖h_t − h_{t−1}‖∞ < ε`.
    pub convergence_time: Option<usize>,
    pub converged_value: Vector,
    pub epsilon: f64,
}

pub fn convergence_report(trace: &ProbeTrace, epsilon: f64) -> Result<ProbeReport> {
    convergence_of(&trace.features, epsilon)
}

pub fn convergence_of(rows: &Matrix, epsilon: f64) -> Result<ProbeReport> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::invalid("epsilon must be positive"));
    }
    if rows.rows() == 0 {
        return Err(Error::Empty("trace"));
    }
    let convergence_time = (1..rows.rows())
        .find(|&t| {
            rows.row(t)
                .iter()
                .zip(rows.row(t - 1))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
                < epsilon
        })
        .map(|t| t + 1);
    Ok(ProbeReport {
        convergence_time,
        converged_value: rows.row_vector(rows.rows() - 1),
        epsilon,
    })
}

/// Euclidean distance between two converged values.
pub fn pair_divergence(a: &ProbeReport, b: &ProbeReport) -> Result<f64> {
    if a.convergence_time.is_none() || b.convergence_time.is_none() {
        return Err(Error::NotConverged("both probes must converge before comparing them".into()));
    }
    Ok(a.converged_value.sub(&b.converged_value)?.norm2())
}

/// `dim,1,…,N` header, then one row per feature dimension. Values use the
/// shortest representation that parses back to the same bits.
pub fn figure_csv(trace: &ProbeTrace, first_k: usize) -> Result<String> {
    check_first_k(trace, first_k)?;
    let f = &trace.features;
    let mut out = String::from("dim");
    for t in 1..=f.rows() {
        write!(out, ",{t}").expect("string write");
    }
    out.push('\n');
    for d in 0..first_k {
        write!(out, "{}", d + 1).expect("string write");
        for t in 0..f.rows() {
            write!(out, ",{}", f[(t, d)]).expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

fn check_first_k(trace: &ProbeTrace, first_k: usize) -> Result<()> {
    if first_k == 0 || first_k > trace.features.cols() {
        return Err(Error::invalid(format!(
            "first_k {first_k} must be between 1 and the feature dimension {}",
            trace.features.cols()
        )));
    }
    Ok(())
}

/// Diverging blue–white–red, fixed to `[−1, 1]`.
pub fn diverging_color(v: f64) -> (u8, u8, u8) {
    const NEG: (f64, f64, f64) = (33.0, 102.0, 172.0);
    const POS: (f64, f64, f64) = (178.0, 24.0, 43.0);
    let v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
    let (end, w) = if v < 0.0 { (NEG, -v) } else { (POS, v) };
    let mix = |e: f64| (255.0 + (e - 255.0) * w).round() as u8;
    (mix(end.0), mix(end.1), mix(end.2))
}

fn hex((r, g, b): (u8, u8, u8)) -> String {
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Heatmap with one row per dimension and one column per step.
pub fn figure_svg(trace: &ProbeTrace, first_k: usize, title: &str) -> Result<String> {
    check_first_k(trace, first_k)?;
    let f = &trace.features;
    let (cell, left, top) = (14usize, 56usize, 36usize);
    let plot_w = f.rows() * cell;
    let plot_h = first_k * cell;
    let legend_x = left + plot_w + 24;
    let width = legend_x + 70;
    let height = top + plot_h + 44;
    let mut s = String::new();
    let w = &mut s;
    writeln!(w, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">"#).unwrap();
    writeln!(w, r#"<rect width="{width}" height="{height}" fill="white"/>"#).unwrap();
    writeln!(w, r#"<text x="{left}" y="16" font-size="12">{}</text>"#, escape(title)).unwrap();
    for d in 0..first_k {
        for t in 0..f.rows() {
            writeln!(
                w,
                r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="{}"/>"#,
                left + t * cell,
                top + d * cell,
                hex(diverging_color(f[(t, d)]))
            )
            .unwrap();
        }
        writeln!(w, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 4, top + d * cell + cell - 3, d + 1).unwrap();
    }
    for t in (0..f.rows()).filter(|t| t % 5 == 4 || *t == 0) {
        writeln!(w, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + t * cell + cell / 2, top + plot_h + 12, t + 1).unwrap();
    }
    writeln!(w, r#"<text x="{}" y="{}" text-anchor="middle">time step</text>"#, left + plot_w / 2, top + plot_h + 30).unwrap();
    writeln!(
        w,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">feature dimension</text>"#,
        top + plot_h / 2,
        top + plot_h / 2
    )
    .unwrap();
    // legend: 21 swatches from +1 (top) to −1 (bottom)
    let sw = plot_h.max(42) as f64 / 21.0;
    for i in 0..21 {
        let v = 1.0 - i as f64 / 10.0;
        writeln!(
            w,
            r#"<rect x="{legend_x}" y="{:.2}" width="12" height="{:.2}" fill="{}"/>"#,
            top as f64 + i as f64 * sw,
            sw + 0.05,
            hex(diverging_color(v))
        )
        .unwrap();
    }
    for (v, y) in [("1", 0.0), ("0", 10.5), ("-1", 21.0)] {
        writeln!(w, r#"<text x="{}" y="{:.2}">{v}</text>"#, legend_x + 16, top as f64 + y * sw + 3.0).unwrap();
    }
    writeln!(w, "</svg>").unwrap();
    Ok(s)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `<stem>.csv` and `<stem>.svg`.
pub fn export_figure(trace: &ProbeTrace, first_k: usize, stem: &Path, title: &str) -> Result<(PathBuf, PathBuf)> {
    let csv = figure_csv(trace, first_k)?;
    let svg = figure_svg(trace, first_k, title)?;
    let with = |ext: &str| {
        let mut p = stem.as_os_str().to_owned();
        p.push(ext);
        PathBuf::from(p)
    };
    let (c, v) = (with(".csv"), with(".svg"));
    write_atomic(&c, csv.as_bytes())?;
    write_atomic(&v, svg.as_bytes())?;
    Ok((c, v))
}
