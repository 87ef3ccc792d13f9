//! A second, deliberately naive transcription of the cell equations.
//!
//! Everything here works on flat scalar loops over tensors looked up by name,
//! generic over [`Scalar`]. With `f64` it is a brute-force check on
//! [`crate::cells`]. With [`Diff`] it carries, next to every value at one
//! point, the exact difference to a second point, which gives central
//! differences without subtracting two nearly equal losses.

use std::collections::BTreeMap;
use std::ops::{Add, Mul, Sub};

use crate::cells::{CellParams, Variant};
use crate::numerics::Vector;
use crate::params::{ParamSet, Shape};

pub trait Scalar: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> {
    fn constant(v: f64) -> Self;
    fn value(self) -> f64;
    fn sigmoid(self) -> Self;
    fn tanh(self) -> Self;
    fn log_sum_exp(z: &[Self]) -> Self;
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn lse_f64(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl Scalar for f64 {
    fn constant(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn sigmoid(self) -> Self {
        sigmoid_f64(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn log_sum_exp(z: &[Self]) -> Self {
        lse_f64(z)
    }
}

/// A value `base` at one point together with `delta`, the change of the same
/// expression at a second point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Diff {
    pub base: f64,
    pub delta: f64,
}

impl Diff {
    pub fn fixed(base: f64) -> Self {
        Diff { base, delta: 0.0 }
    }
}

impl Add for Diff {
    type Output = Diff;
    fn add(self, o: Diff) -> Diff {
        Diff {
            base: self.base + o.base,
            delta: self.delta + o.delta,
        }
    }
}

impl Sub for Diff {
    type Output = Diff;
    fn sub(self, o: Diff) -> Diff {
        Diff {
            base: self.base - o.base,
            delta: self.delta - o.delta,
        }
    }
}

impl Mul for Diff {
    type Output = Diff;
    fn mul(self, o: Diff) -> Diff {
        Diff {
            base: self.base * o.base,
            delta: self.delta * o.base + self.base * o.delta + self.delta * o.delta,
        }
    }
}

impl Scalar for Diff {
    fn constant(v: f64) -> Self {
        Diff::fixed(v)
    }

    fn value(self) -> f64 {
        self.base
    }

    // σ(a+d) − σ(a) = σ(−a) σ(a+d) (1 − e^{−d})
    fn sigmoid(self) -> Self {
        let (a, d) = (self.base, self.delta);
        Diff {
            base: sigmoid_f64(a),
            delta: sigmoid_f64(-a) * sigmoid_f64(a + d) * -(-d).exp_m1(),
        }
    }

    // tanh(a+d) − tanh(a) = sinh(d) / (cosh(a) cosh(a+d))
    fn tanh(self) -> Self {
        let (a, d) = (self.base, self.delta);
        let delta = if a.abs() < 300.0 && (a + d).abs() < 300.0 {
            d.sinh() / (a.cosh() * (a + d).cosh())
        } else {
            d.tanh() * (1.0 - a.tanh() * (a + d).tanh())
        };
        Diff { base: a.tanh(), delta }
    }

    // lse(z + dz) − lse(z) = log(1 + Σ softmax(z)_j (e^{dz_j} − 1))
    fn log_sum_exp(z: &[Self]) -> Self {
        let base: Vec<f64> = z.iter().map(|v| v.base).collect();
        let l = lse_f64(&base);
        let s: f64 = z.iter().map(|v| (v.base - l).exp() * v.delta.exp_m1()).sum();
        Diff {
            base: l,
            delta: s.ln_1p(),
        }
    }
}

/// Names and shapes of a parameter set, in visit order.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout(pub Vec<(&'static str, Shape)>);

impl Layout {
    pub fn of<P: ParamSet>(p: &P) -> Self {
        let mut out = Vec::new();
        p.visit(&mut |name, shape, _| out.push((name, shape)));
        Layout(out)
    }

    pub fn num_scalars(&self) -> usize {
        self.0.iter().map(|(_, s)| s.len()).sum()
    }
}

/// Named row-major tensors over any scalar type. Vectors are stored as
/// single-column matrices.
#[derive(Clone, Debug)]
pub struct Tensors<S> {
    map: BTreeMap<&'static str, (usize, usize, Vec<S>)>,
}

impl<S: Scalar> Tensors<S> {
    pub fn from_flat(layout: &Layout, flat: &[S]) -> Self {
        let mut map = BTreeMap::new();
        let mut at = 0;
        for &(name, shape) in &layout.0 {
            let (r, c) = match shape {
                Shape::Matrix(r, c) => (r, c),
                Shape::Vector(n) => (n, 1),
            };
            map.insert(name, (r, c, flat[at..at + r * c].to_vec()));
            at += r * c;
        }
        Tensors { map }
    }

    pub fn lift<P: ParamSet>(p: &P) -> Self {
        let flat: Vec<S> = p.to_flat().into_iter().map(S::constant).collect();
        Self::from_flat(&Layout::of(p), &flat)
    }

    pub fn has(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn vector(&self, name: &str) -> &[S] {
        &self.map.get(name).unwrap_or_else(|| panic!("missing tensor {name}")).2
    }

    /// `W v`.
    pub fn apply(&self, name: &str, v: &[S]) -> Vec<S> {
        let (r, c, w) = self.map.get(name).unwrap_or_else(|| panic!("missing tensor {name}"));
        assert_eq!(*c, v.len(), "{name}: {r}x{c} times dim {}", v.len());
        (0..*r)
            .map(|i| {
                let mut acc = S::constant(0.0);
                for j in 0..*c {
                    acc = acc + w[i * c + j] * v[j];
                }
                acc
            })
            .collect()
    }
}

fn add<S: Scalar>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter().zip(b).map(|(x, y)| *x + *y).collect()
}

fn mul<S: Scalar>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter().zip(b).map(|(x, y)| *x * *y).collect()
}

fn sig<S: Scalar>(a: &[S]) -> Vec<S> {
    a.iter().map(|x| x.sigmoid()).collect()
}

fn tnh<S: Scalar>(a: &[S]) -> Vec<S> {
    a.iter().map(|x| x.tanh()).collect()
}

/// `Σ W_k v_k + b`.
fn gate<S: Scalar>(w: &Tensors<S>, terms: &[(&str, &[S])], bias: &str) -> Vec<S> {
    let mut acc = w.vector(bias).to_vec();
    for (name, v) in terms {
        acc = add(&acc, &w.apply(name, v));
    }
    acc
}

/// Structural facts the transcription needs beyond the tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Structure {
    pub variant: Variant,
    pub hidden_dim: usize,
    pub bias_cell_dynamics_gates: bool,
    pub untied_crosscell: bool,
}

impl Structure {
    pub fn of(p: &CellParams) -> Self {
        let o = p.options();
        Structure {
            variant: p.variant(),
            hidden_dim: p.hidden_dim(),
            bias_cell_dynamics_gates: o.bias_cell_dynamics_gates,
            untied_crosscell: o.untied_crosscell,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step<S> {
    pub c: Vec<S>,
    pub h: Vec<S>,
    pub c_hat: Vec<S>,
    pub h_hat: Vec<S>,
}

/// Runs the cell from the zero state. `statics[t]` is the static input at
/// step `t`; ignored by the plain LSTM.
pub fn run<S: Scalar>(w: &Tensors<S>, st: Structure, frames: &[Vec<S>], statics: &[Vec<S>]) -> Vec<Step<S>> {
    let zero = vec![S::constant(0.0); st.hidden_dim];
    let mut c = zero.clone();
    let mut h = zero.clone();
    let mut c_hat = zero.clone();
    let mut h_hat = zero.clone();
    let mut out = Vec::with_capacity(frames.len());
    let cross = st.variant == Variant::ModevarCrosscell;
    for (t, x) in frames.iter().enumerate() {
        if st.variant == Variant::Lstm {
            let i = sig(&gate(w, &[("W_xi", x), ("W_hi", &h), ("W_ci", &c)], "b_i"));
            let f = sig(&gate(w, &[("W_xf", x), ("W_hf", &h), ("W_cf", &c)], "b_f"));
            let g = tnh(&gate(w, &[("W_xc", x), ("W_hc", &h)], "b_c"));
            let c_new = add(&mul(&f, &c), &mul(&i, &g));
            let o = sig(&gate(w, &[("W_xo", x), ("W_ho", &h), ("W_co", &c_new)], "b_o"));
            h = mul(&o, &tnh(&c_new));
            c = c_new;
        } else {
            let xh = &statics[t];
            let mut ti: Vec<(&str, &[S])> = vec![("W_xi", x), ("W_hi", &h), ("W_ci", &c)];
            let mut tf: Vec<(&str, &[S])> = vec![("W_xf", x), ("W_hf", &h), ("W_cf", &c)];
            let mut ti_hat: Vec<(&str, &[S])> =
                vec![("W_xhat_ihat", xh), ("W_hhat_ihat", &h_hat), ("W_chat_ihat", &c_hat)];
            let mut tf_hat: Vec<(&str, &[S])> =
                vec![("W_xhat_fhat", xh), ("W_hhat_fhat", &h_hat), ("W_chat_fhat", &c_hat)];
            if cross {
                ti.push(("W_chat_i", &c_hat));
                tf.push(("W_chat_f", &c_hat));
                if st.untied_crosscell {
                    ti_hat.push(("W_c_ihat", &c));
                    tf_hat.push(("W_c_fhat", &c));
                } else {
                    ti_hat.push(("W_ci", &c));
                    tf_hat.push(("W_cf", &c));
                }
            }
            let i = sig(&gate(w, &ti, "b_i"));
            let f = sig(&gate(w, &tf, "b_f"));
            let g = tnh(&gate(w, &[("W_xc", x), ("W_hc", &h)], "b_c"));
            let i_hat = sig(&gate(w, &ti_hat, "b_i_hat"));
            let f_hat = sig(&gate(w, &tf_hat, "b_f_hat"));
            let g_hat = tnh(&gate(w, &[("W_xhat_chat", xh), ("W_hhat_chat", &h_hat)], "b_c_hat"));

            let c_new = add(&mul(&f, &c), &mul(&i, &g));
            let c_hat_new = if st.bias_cell_dynamics_gates {
                add(&mul(&f, &c_hat), &mul(&i, &g_hat))
            } else {
                add(&mul(&f_hat, &c_hat), &mul(&i_hat, &g_hat))
            };
            let o = sig(&gate(
                w,
                &[
                    ("W_xo", x),
                    ("W_ho", &h),
                    ("W_co", &c_new),
                    ("W_chat_o", &c_hat_new),
                    ("W_hhat_o", &h_hat),
                ],
                "b_o",
            ));
            h = mul(&o, &tnh(&c_new));
            h_hat = mul(&o, &tnh(&c_hat_new));
            c = c_new;
            c_hat = c_hat_new;
        }
        out.push(Step {
            c: c.clone(),
            h: h.clone(),
            c_hat: c_hat.clone(),
            h_hat: h_hat.clone(),
        });
    }
    out
}

/// `f64` trace of a cell with the static frame replicated at every step.
pub fn trace(params: &CellParams, frames: &[Vector], static_frame: Option<&Vector>) -> Vec<Step<f64>> {
    let w = Tensors::lift(params);
    let xs: Vec<Vec<f64>> = frames.iter().map(|f| f.as_slice().to_vec()).collect();
    let stat = static_frame.map(|s| s.as_slice().to_vec()).unwrap_or_default();
    let statics = vec![stat; frames.len()];
    run(&w, Structure::of(params), &xs, &statics)
}

/// `(f(v + ε e_k) − f(v − ε e_k)) / 2ε` for every `k`, where `f` receives the
/// point `v − ε e_k` with a difference of `2ε` on coordinate `k`.
pub fn central_differences(point: &[f64], epsilon: f64, f: impl Fn(&[Diff]) -> Diff + Sync) -> Vec<f64> {
    let one = |k: usize| {
        let mut v: Vec<Diff> = point.iter().copied().map(Diff::fixed).collect();
        v[k] = Diff {
            base: point[k] - epsilon,
            delta: 2.0 * epsilon,
        };
        f(&v).delta / (2.0 * epsilon)
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..point.len()).into_par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..point.len()).map(one).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diff_ops_match_direct_differences() {
        let a = 0.37;
        let d = 1e-3;
        let x = Diff { base: a, delta: d };
        let close = |u: f64, v: f64| (u - v).abs() <= 1e-12 * v.abs().max(1e-300);
        assert!(close(x.sigmoid().delta, sigmoid_f64(a + d) - sigmoid_f64(a)));
        assert!(close(x.tanh().delta, (a + d).tanh() - a.tanh()));
        assert!(close((x * x).delta, (a + d) * (a + d) - a * a));
        let z = [x, Diff::fixed(-1.0), Diff { base: 2.0, delta: -d }];
        let moved: Vec<f64> = z.iter().map(|v| v.base + v.delta).collect();
        let base: Vec<f64> = z.iter().map(|v| v.base).collect();
        assert!(close(Diff::log_sum_exp(&z).delta, lse_f64(&moved) - lse_f64(&base)));
    }

    #[test]
    fn diff_keeps_tiny_changes_exact() {
        // a plain subtraction here would lose every digit
        let x = Diff { base: 0.5, delta: 1e-20 };
        let expect = 1e-20 * sigmoid_f64(0.5) * sigmoid_f64(-0.5);
        assert!((x.sigmoid().delta - expect).abs() < 1e-15 * expect);
        let t = x.tanh().delta;
        assert!((t - 1e-20 * (1.0 - 0.5f64.tanh().powi(2))).abs() < 1e-34);
    }

    #[test]
    fn saturated_tanh_is_finite() {
        let x = Diff { base: 800.0, delta: -1000.0 };
        assert!((x.tanh().delta + 2.0).abs() < 1e-12);
    }

    #[test]
    fn central_differences_of_a_cubic() {
        let g = central_differences(&[2.0, -1.0], 1e-5, |v| v[0] * v[0] * v[0] + v[1] * v[0]);
        // d/dx = 3x² + y, plus the ε² term of the cubic
        assert!((g[0] - (11.0 + 1e-10)).abs() < 1e-12);
        assert!((g[1] - 2.0).abs() < 1e-12);
    }

    use crate::cells::{forward_sequence, init_params_with, CellOptions};
    use crate::autodiff::{CheckDims, CheckInstance};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frames(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vector> {
        (0..n)
            .map(|_| Vector::from_vec((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect()
    }

    #[test]
    fn cells_agree_with_transcription() {
        let option_sets = [
            CellOptions::default(),
            CellOptions { bias_cell_dynamics_gates: true, ..Default::default() },
            CellOptions { untied_crosscell: true, diagonal_peephole: true, ..Default::default() },
        ];
        for variant in Variant::ALL {
            for (k, opts) in option_sets.iter().enumerate() {
                for seed in 0..10u64 {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + k as u64);
                    let mut p = init_params_with(2, 3, variant, *opts, seed).unwrap();
                    p.visit_mut(&mut |_, _, v| v.iter_mut().for_each(|x| *x += rng.random_range(-0.5..0.5)));
                    if opts.diagonal_peephole {
                        crate::cells::mask_peepholes(&mut p);
                    }
                    let frames = random_frames(&mut rng, 7, 2);
                    let stat = random_frames(&mut rng, 1, 2).pop().unwrap();
                    let (_, caches) = forward_sequence(&p, &frames, Some(&stat)).unwrap();
                    let reference = trace(&p, &frames, Some(&stat));
                    for (c, r) in caches.iter().zip(&reference) {
                        let h = c.h().sub(&Vector::from_vec(r.h.clone())).unwrap().norm_inf();
                        assert!(h < 1e-12, "{variant} h off by {h:e}");
                        if let Some(hh) = c.h_hat() {
                            let e = hh.sub(&Vector::from_vec(r.h_hat.clone())).unwrap().norm_inf();
                            assert!(e < 1e-12, "{variant} h_hat off by {e:e}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn exact_and_plain_differences_agree() {
        for variant in Variant::ALL {
            let inst = CheckInstance::new(variant, CheckDims::default(), CellOptions::default(), 5).unwrap();
            let a = inst.numeric(1e-5).unwrap().params.to_flat();
            let b = inst.numeric_exact(1e-5).unwrap().params.to_flat();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-9, "{variant}: {x} vs {y}");
            }
        }
    }
}
