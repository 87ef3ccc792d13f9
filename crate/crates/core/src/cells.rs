//! Recurrent cells: the peephole LSTM, the mode variational LSTM and its
//! cross-cell peephole form.
//!
//! The mode variational cell runs two memories side by side. The dynamics
//! cell `c` reads the frame sequence `x_t`; the bias cell `ĉ` reads a static
//! frame `x̂` replicated at every step. A single output gate, which peeks at
//! both cells and at the previous bias features `ĥ`, produces `h = o ⊙ tanh(c)`
//! and `ĥ = o ⊙ tanh(ĉ)`. In the cross-cell form the dynamics input/forget
//! gates also read `ĉ⁻` and the bias gates read `c⁻`.
//!
//! Step functions are pure and return a [`StepCache`] holding everything the
//! backward pass in [`crate::autodiff`] needs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matvec_acc, sigmoid_scalar, tanh_scalar, Matrix, Vector};
use crate::params::{emit, emit_mut, ParamSet, Shape, Visitor, VisitorMut};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Lstm,
    Modevar,
    ModevarCrosscell,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Lstm, Variant::Modevar, Variant::ModevarCrosscell];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Lstm => "lstm",
            Variant::Modevar => "modevar",
            Variant::ModevarCrosscell => "modevar_crosscell",
        }
    }

    pub fn is_mode_var(self) -> bool {
        self != Variant::Lstm
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(Variant::Lstm),
            "modevar" => Ok(Variant::Modevar),
            "modevar_crosscell" | "crosscell" => Ok(Variant::ModevarCrosscell),
            other => Err(Error::invalid(format!(
                "unknown variant '{other}' (expected lstm, modevar or modevar_crosscell)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Structural switches that change the cell equations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CellOptions {
    /// Restrict every cell-state peephole matrix to its diagonal.
    pub diagonal_peephole: bool,
    /// Update the bias cell with the dynamics gates `i`, `f` instead of its
    /// own `î`, `f̂` (which are then computed but unused).
    pub bias_cell_dynamics_gates: bool,
    /// Give the bias gates their own `c⁻` peepholes in the cross-cell form
    /// instead of reusing `W_ci` and `W_cf`.
    pub untied_crosscell: bool,
}

/// Names of every matrix that multiplies a cell state.
pub const PEEPHOLE_NAMES: [&str; 10] = [
    "W_ci",
    "W_cf",
    "W_co",
    "W_chat_ihat",
    "W_chat_fhat",
    "W_chat_o",
    "W_chat_i",
    "W_chat_f",
    "W_c_ihat",
    "W_c_fhat",
];

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_xi: Matrix,
    pub w_hi: Matrix,
    pub w_ci: Matrix,
    pub b_i: Vector,
    pub w_xf: Matrix,
    pub w_hf: Matrix,
    pub w_cf: Matrix,
    pub b_f: Vector,
    pub w_xc: Matrix,
    pub w_hc: Matrix,
    pub b_c: Vector,
    pub w_xo: Matrix,
    pub w_ho: Matrix,
    pub w_co: Matrix,
    pub b_o: Vector,
    pub diagonal_peephole: bool,
}

/// The hatted weights of the bias path.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasPath {
    pub w_x_i: Matrix,
    pub w_h_i: Matrix,
    pub w_c_i: Matrix,
    pub b_i: Vector,
    pub w_x_f: Matrix,
    pub w_h_f: Matrix,
    pub w_c_f: Matrix,
    pub b_f: Vector,
    pub w_x_c: Matrix,
    pub w_h_c: Matrix,
    pub b_c: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossCell {
    /// `ĉ⁻` into the dynamics input gate.
    pub w_chat_i: Matrix,
    /// `ĉ⁻` into the dynamics forget gate.
    pub w_chat_f: Matrix,
    pub untied: Option<UntiedPeepholes>,
}

/// Separate `c⁻` peepholes for the bias gates.
#[derive(Clone, Debug, PartialEq)]
pub struct UntiedPeepholes {
    pub w_c_ihat: Matrix,
    pub w_c_fhat: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeVarParams {
    pub base: LstmParams,
    pub bias: BiasPath,
    /// `ĉ_t` into the shared output gate.
    pub w_chat_o: Matrix,
    /// `ĥ_{t-1}` into the shared output gate.
    pub w_hhat_o: Matrix,
    pub cross: Option<CrossCell>,
    pub bias_cell_dynamics_gates: bool,
}

#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum CellParams {
    Lstm(LstmParams),
    ModeVar(ModeVarParams),
}

impl ParamSet for LstmParams {
    fn visit(&self, f: &mut Visitor<'_>) {
        emit(f, "W_xi", &self.w_xi);
        emit(f, "W_hi", &self.w_hi);
        emit(f, "W_ci", &self.w_ci);
        emit(f, "b_i", &self.b_i);
        emit(f, "W_xf", &self.w_xf);
        emit(f, "W_hf", &self.w_hf);
        emit(f, "W_cf", &self.w_cf);
        emit(f, "b_f", &self.b_f);
        emit(f, "W_xc", &self.w_xc);
        emit(f, "W_hc", &self.w_hc);
        emit(f, "b_c", &self.b_c);
        emit(f, "W_xo", &self.w_xo);
        emit(f, "W_ho", &self.w_ho);
        emit(f, "W_co", &self.w_co);
        emit(f, "b_o", &self.b_o);
    }

    fn visit_mut(&mut self, f: &mut VisitorMut<'_>) {
        emit_mut(f, "W_xi", &mut self.w_xi);
        emit_mut(f, "W_hi", &mut self.w_hi);
        emit_mut(f, "W_ci", &mut self.w_ci);
        emit_mut(f, "b_i", &mut self.b_i);
        emit_mut(f, "W_xf", &mut self.w_xf);
        emit_mut(f, "W_hf", &mut self.w_hf);
        emit_mut(f, "W_cf", &mut self.w_cf);
        emit_mut(f, "b_f", &mut self.b_f);
        emit_mut(f, "W_xc", &mut self.w_xc);
        emit_mut(f, "W_hc", &mut self.w_hc);
        emit_mut(f, "b_c", &mut self.b_c);
        emit_mut(f, "W_xo", &mut self.w_xo);
        emit_mut(f, "W_ho", &mut self.w_ho);
        emit_mut(f, "W_co", &mut self.w_co);
        emit_mut(f, "b_o", &mut self.b_o);
    }
}

impl ParamSet for ModeVarParams {
    fn visit(&self, f: &mut Visitor<'_>) {
        self.base.visit(f);
        let b = &self.bias;
        emit(f, "W_xhat_ihat", &b.w_x_i);
        emit(f, "W_hhat_ihat", &b.w_h_i);
        emit(f, "W_chat_ihat", &b.w_c_i);
        emit(f, "b_i_hat", &b.b_i);
        emit(f, "W_xhat_fhat", &b.w_x_f);
        emit(f, "W_hhat_fhat", &b.w_h_f);
        emit(f, "W_chat_fhat", &b.w_c_f);
        emit(f, "b_f_hat", &b.b_f);
        emit(f, "W_xhat_chat", &b.w_x_c);
        emit(f, "W_hhat_chat", &b.w_h_c);
        emit(f, "b_c_hat", &b.b_c);
        emit(f, "W_chat_o", &self.w_chat_o);
        emit(f, "W_hhat_o", &self.w_hhat_o);
        if let Some(x) = &self.cross {
            emit(f, "W_chat_i", &x.w_chat_i);
            emit(f, "W_chat_f", &x.w_chat_f);
            if let Some(u) = &x.untied {
                emit(f, "W_c_ihat", &u.w_c_ihat);
                emit(f, "W_c_fhat", &u.w_c_fhat);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut VisitorMut<'_>) {
        self.base.visit_mut(f);
        let b = &mut self.bias;
        emit_mut(f, "W_xhat_ihat", &mut b.w_x_i);
        emit_mut(f, "W_hhat_ihat", &mut b.w_h_i);
        emit_mut(f, "W_chat_ihat", &mut b.w_c_i);
        emit_mut(f, "b_i_hat", &mut b.b_i);
        emit_mut(f, "W_xhat_fhat", &mut b.w_x_f);
        emit_mut(f, "W_hhat_fhat", &mut b.w_h_f);
        emit_mut(f, "W_chat_fhat", &mut b.w_c_f);
        emit_mut(f, "b_f_hat", &mut b.b_f);
        emit_mut(f, "W_xhat_chat", &mut b.w_x_c);
        emit_mut(f, "W_hhat_chat", &mut b.w_h_c);
        emit_mut(f, "b_c_hat", &mut b.b_c);
        emit_mut(f, "W_chat_o", &mut self.w_chat_o);
        emit_mut(f, "W_hhat_o", &mut self.w_hhat_o);
        if let Some(x) = &mut self.cross {
            emit_mut(f, "W_chat_i", &mut x.w_chat_i);
            emit_mut(f, "W_chat_f", &mut x.w_chat_f);
            if let Some(u) = &mut x.untied {
                emit_mut(f, "W_c_ihat", &mut u.w_c_ihat);
                emit_mut(f, "W_c_fhat", &mut u.w_c_fhat);
            }
        }
    }
}

impl ParamSet for CellParams {
    fn visit(&self, f: &mut Visitor<'_>) {
        match self {
            CellParams::Lstm(p) => p.visit(f),
            CellParams::ModeVar(p) => p.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut VisitorMut<'_>) {
        match self {
            CellParams::Lstm(p) => p.visit_mut(f),
            CellParams::ModeVar(p) => p.visit_mut(f),
        }
    }
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let x = || Matrix::zeros(hidden_dim, input_dim);
        let h = || Matrix::zeros(hidden_dim, hidden_dim);
        let b = || Vector::zeros(hidden_dim);
        LstmParams {
            input_dim,
            hidden_dim,
            w_xi: x(),
            w_hi: h(),
            w_ci: h(),
            b_i: b(),
            w_xf: x(),
            w_hf: h(),
            w_cf: h(),
            b_f: b(),
            w_xc: x(),
            w_hc: h(),
            b_c: b(),
            w_xo: x(),
            w_ho: h(),
            w_co: h(),
            b_o: b(),
            diagonal_peephole: false,
        }
    }
}

impl BiasPath {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let x = || Matrix::zeros(hidden_dim, input_dim);
        let h = || Matrix::zeros(hidden_dim, hidden_dim);
        let b = || Vector::zeros(hidden_dim);
        BiasPath {
            w_x_i: x(),
            w_h_i: h(),
            w_c_i: h(),
            b_i: b(),
            w_x_f: x(),
            w_h_f: h(),
            w_c_f: h(),
            b_f: b(),
            w_x_c: x(),
            w_h_c: h(),
            b_c: b(),
        }
    }

    /// The bias path with every weight copied from the dynamics path.
    pub fn tied_to(base: &LstmParams) -> Self {
        BiasPath {
            w_x_i: base.w_xi.clone(),
            w_h_i: base.w_hi.clone(),
            w_c_i: base.w_ci.clone(),
            b_i: base.b_i.clone(),
            w_x_f: base.w_xf.clone(),
            w_h_f: base.w_hf.clone(),
            w_c_f: base.w_cf.clone(),
            b_f: base.b_f.clone(),
            w_x_c: base.w_xc.clone(),
            w_h_c: base.w_hc.clone(),
            b_c: base.b_c.clone(),
        }
    }
}

impl ModeVarParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize, variant: Variant, options: CellOptions) -> Self {
        let h = || Matrix::zeros(hidden_dim, hidden_dim);
        let cross = (variant == Variant::ModevarCrosscell).then(|| CrossCell {
            w_chat_i: h(),
            w_chat_f: h(),
            untied: options.untied_crosscell.then(|| UntiedPeepholes {
                w_c_ihat: h(),
                w_c_fhat: h(),
            }),
        });
        let mut base = LstmParams::zeros(input_dim, hidden_dim);
        base.diagonal_peephole = options.diagonal_peephole;
        ModeVarParams {
            base,
            bias: BiasPath::zeros(input_dim, hidden_dim),
            w_chat_o: h(),
            w_hhat_o: h(),
            cross,
            bias_cell_dynamics_gates: options.bias_cell_dynamics_gates,
        }
    }

    pub fn variant(&self) -> Variant {
        if self.cross.is_some() {
            Variant::ModevarCrosscell
        } else {
            Variant::Modevar
        }
    }

    /// `c⁻` peepholes used by the bias input and forget gates in the
    /// cross-cell form.
    fn bias_gate_c_peepholes(&self) -> Option<(&Matrix, &Matrix)> {
        let cross = self.cross.as_ref()?;
        Some(match &cross.untied {
            Some(u) => (&u.w_c_ihat, &u.w_c_fhat),
            None => (&self.base.w_ci, &self.base.w_cf),
        })
    }

    pub fn options(&self) -> CellOptions {
        CellOptions {
            diagonal_peephole: self.base.diagonal_peephole,
            bias_cell_dynamics_gates: self.bias_cell_dynamics_gates,
            untied_crosscell: self.cross.as_ref().is_some_and(|c| c.untied.is_some()),
        }
    }
}

impl CellParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize, variant: Variant, options: CellOptions) -> Self {
        match variant {
            Variant::Lstm => {
                let mut p = LstmParams::zeros(input_dim, hidden_dim);
                p.diagonal_peephole = options.diagonal_peephole;
                CellParams::Lstm(p)
            }
            v => CellParams::ModeVar(ModeVarParams::zeros(input_dim, hidden_dim, v, options)),
        }
    }

    pub fn variant(&self) -> Variant {
        match self {
            CellParams::Lstm(_) => Variant::Lstm,
            CellParams::ModeVar(p) => p.variant(),
        }
    }

    pub fn options(&self) -> CellOptions {
        match self {
            CellParams::Lstm(p) => CellOptions {
                diagonal_peephole: p.diagonal_peephole,
                ..CellOptions::default()
            },
            CellParams::ModeVar(p) => p.options(),
        }
    }

    fn base(&self) -> &LstmParams {
        match self {
            CellParams::Lstm(p) => p,
            CellParams::ModeVar(p) => &p.base,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.base().input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.base().hidden_dim
    }

    pub fn diagonal_peephole(&self) -> bool {
        self.base().diagonal_peephole
    }
}

/// Zeroes the off-diagonal entries of every peephole matrix in `set`.
pub fn mask_peepholes<P: ParamSet>(set: &mut P) {
    set.visit_mut(&mut |name, shape, values| {
        if let Shape::Matrix(r, c) = shape {
            if r == c && PEEPHOLE_NAMES.contains(&name) {
                for i in 0..r {
                    for j in 0..c {
                        if i != j {
                            values[i * c + j] = 0.0;
                        }
                    }
                }
            }
        }
    });
}

/// Fresh parameters: every matrix uniform in `±sqrt(6 / (fan_in + fan_out))`,
/// biases zero except the forget biases (`b_f`, `b_f_hat`) at 1.
pub fn init_params(input_dim: usize, hidden_dim: usize, variant: Variant, seed: u64) -> Result<CellParams> {
    init_params_with(input_dim, hidden_dim, variant, CellOptions::default(), seed)
}

pub fn init_params_with(
    input_dim: usize,
    hidden_dim: usize,
    variant: Variant,
    options: CellOptions,
    seed: u64,
) -> Result<CellParams> {
    if input_dim == 0 || hidden_dim == 0 {
        return Err(Error::invalid(format!(
            "dimensions must be positive (input {input_dim}, hidden {hidden_dim})"
        )));
    }
    let mut p = CellParams::zeros(input_dim, hidden_dim, variant, options);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    p.visit_mut(&mut |name, shape, values| match shape {
        Shape::Matrix(rows, cols) => {
            let bound = glorot_bound(rows, cols);
            for v in values.iter_mut() {
                *v = rng.random_range(-bound..=bound);
            }
        }
        Shape::Vector(_) => {
            let fill = if name == "b_f" || name == "b_f_hat" { 1.0 } else { 0.0 };
            values.fill(fill);
        }
    });
    if options.diagonal_peephole {
        mask_peepholes(&mut p);
    }
    Ok(p)
}

pub fn glorot_bound(fan_out: usize, fan_in: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellState {
    pub c: Vector,
    pub h: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeVarState {
    pub c: Vector,
    pub h: Vector,
    pub c_hat: Vector,
    pub h_hat: Vector,
}

impl CellState {
    pub fn zeros(hidden_dim: usize) -> Self {
        CellState {
            c: Vector::zeros(hidden_dim),
            h: Vector::zeros(hidden_dim),
        }
    }
}

impl ModeVarState {
    pub fn zeros(hidden_dim: usize) -> Self {
        ModeVarState {
            c: Vector::zeros(hidden_dim),
            h: Vector::zeros(hidden_dim),
            c_hat: Vector::zeros(hidden_dim),
            h_hat: Vector::zeros(hidden_dim),
        }
    }

    pub fn max_abs_diff(&self, other: &ModeVarState) -> f64 {
        [
            (&self.c, &other.c),
            (&self.h, &other.h),
            (&self.c_hat, &other.c_hat),
            (&self.h_hat, &other.h_hat),
        ]
        .iter()
        .map(|(a, b)| a.sub(b).map(|d| d.norm_inf()).unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FinalState {
    Lstm(CellState),
    ModeVar(ModeVarState),
}

impl FinalState {
    pub fn h(&self) -> &Vector {
        match self {
            FinalState::Lstm(s) => &s.h,
            FinalState::ModeVar(s) => &s.h,
        }
    }

    pub fn c(&self) -> &Vector {
        match self {
            FinalState::Lstm(s) => &s.c,
            FinalState::ModeVar(s) => &s.c,
        }
    }

    pub fn h_hat(&self) -> Option<&Vector> {
        match self {
            FinalState::Lstm(_) => None,
            FinalState::ModeVar(s) => Some(&s.h_hat),
        }
    }
}

/// Forward values of one plain LSTM step.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCache {
    pub x: Vector,
    pub prev: CellState,
    pub pre_i: Vector,
    pub pre_f: Vector,
    pub pre_g: Vector,
    pub pre_o: Vector,
    pub i: Vector,
    pub f: Vector,
    /// Candidate `tanh(W_xc x + W_hc h⁻ + b_c)`.
    pub g: Vector,
    pub o: Vector,
    pub c: Vector,
    pub tanh_c: Vector,
    pub h: Vector,
}

/// Forward values of one mode variational step (either form).
#[derive(Clone, Debug, PartialEq)]
pub struct ModeVarCache {
    pub x: Vector,
    pub x_hat: Vector,
    pub prev: ModeVarState,
    pub pre_i: Vector,
    pub pre_f: Vector,
    pub pre_g: Vector,
    pub pre_i_hat: Vector,
    pub pre_f_hat: Vector,
    pub pre_g_hat: Vector,
    pub pre_o: Vector,
    pub i: Vector,
    pub f: Vector,
    pub g: Vector,
    pub i_hat: Vector,
    pub f_hat: Vector,
    pub g_hat: Vector,
    pub o: Vector,
    pub c: Vector,
    pub c_hat: Vector,
    pub tanh_c: Vector,
    pub tanh_c_hat: Vector,
    pub h: Vector,
    pub h_hat: Vector,
}

#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum StepCache {
    Lstm(LstmCache),
    ModeVar(ModeVarCache),
}

impl StepCache {
    pub fn h(&self) -> &Vector {
        match self {
            StepCache::Lstm(c) => &c.h,
            StepCache::ModeVar(c) => &c.h,
        }
    }

    pub fn h_hat(&self) -> Option<&Vector> {
        match self {
            StepCache::Lstm(_) => None,
            StepCache::ModeVar(c) => Some(&c.h_hat),
        }
    }

    /// Every gate value in the cache, for range checks.
    pub fn gates(&self) -> Vec<&Vector> {
        match self {
            StepCache::Lstm(c) => vec![&c.i, &c.f, &c.o],
            StepCache::ModeVar(c) => vec![&c.i, &c.f, &c.o, &c.i_hat, &c.f_hat],
        }
    }
}

/// `Σ W v + b`, summed in the order given.
fn affine(terms: &[(&Matrix, &Vector)], bias: &Vector) -> Result<Vector> {
    let mut acc = Vector::zeros(bias.dim());
    for (m, v) in terms {
        matvec_acc(m, v, &mut acc)?;
    }
    acc.add_assign(bias);
    Ok(acc)
}

fn check_dim(what: &'static str, v: &Vector, expected: usize) -> Result<()> {
    if v.dim() != expected {
        return Err(Error::shape(what, format!("dim {}", v.dim()), format!("expected {expected}")));
    }
    Ok(())
}

/// `f ⊙ c⁻ + i ⊙ g`
fn cell_update(f: &Vector, c_prev: &Vector, i: &Vector, g: &Vector) -> Vector {
    let mut out = Vector::zeros(c_prev.dim());
    for k in 0..out.dim() {
        out[k] = f[k] * c_prev[k] + i[k] * g[k];
    }
    out
}

pub fn lstm_step(p: &LstmParams, s: &CellState, x: &Vector) -> Result<(CellState, LstmCache)> {
    check_dim("lstm_step input", x, p.input_dim)?;
    check_dim("lstm_step c", &s.c, p.hidden_dim)?;
    check_dim("lstm_step h", &s.h, p.hidden_dim)?;

    let pre_i = affine(&[(&p.w_xi, x), (&p.w_hi, &s.h), (&p.w_ci, &s.c)], &p.b_i)?;
    let pre_f = affine(&[(&p.w_xf, x), (&p.w_hf, &s.h), (&p.w_cf, &s.c)], &p.b_f)?;
    let pre_g = affine(&[(&p.w_xc, x), (&p.w_hc, &s.h)], &p.b_c)?;
    let i = pre_i.map(sigmoid_scalar);
    let f = pre_f.map(sigmoid_scalar);
    let g = pre_g.map(tanh_scalar);
    let c = cell_update(&f, &s.c, &i, &g);
    let pre_o = affine(&[(&p.w_xo, x), (&p.w_ho, &s.h), (&p.w_co, &c)], &p.b_o)?;
    let o = pre_o.map(sigmoid_scalar);
    let tanh_c = c.map(tanh_scalar);
    let h = o.hadamard(&tanh_c)?;

    let next = CellState { c: c.clone(), h: h.clone() };
    let cache = LstmCache {
        x: x.clone(),
        prev: s.clone(),
        pre_i,
        pre_f,
        pre_g,
        pre_o,
        i,
        f,
        g,
        o,
        c,
        tanh_c,
        h,
    };
    Ok((next, cache))
}

/// Mode variational step; rejects cross-cell parameter sets.
pub fn modevar_step(
    p: &ModeVarParams,
    s: &ModeVarState,
    x: &Vector,
    x_hat: &Vector,
) -> Result<(ModeVarState, ModeVarCache)> {
    if p.cross.is_some() {
        return Err(Error::Variant(
            "cross-cell parameters passed to modevar_step; use crosscell_step".into(),
        ));
    }
    mode_var_forward(p, s, x, x_hat)
}

/// Cross-cell peephole step; rejects parameter sets without cross terms.
pub fn crosscell_step(
    p: &ModeVarParams,
    s: &ModeVarState,
    x: &Vector,
    x_hat: &Vector,
) -> Result<(ModeVarState, ModeVarCache)> {
    if p.cross.is_none() {
        return Err(Error::Variant(
            "parameters without cross-cell terms passed to crosscell_step".into(),
        ));
    }
    mode_var_forward(p, s, x, x_hat)
}

fn mode_var_forward(
    p: &ModeVarParams,
    s: &ModeVarState,
    x: &Vector,
    x_hat: &Vector,
) -> Result<(ModeVarState, ModeVarCache)> {
    let base = &p.base;
    let bias = &p.bias;
    check_dim("mode_var input", x, base.input_dim)?;
    check_dim("mode_var static input", x_hat, base.input_dim)?;
    for (what, v) in [
        ("mode_var c", &s.c),
        ("mode_var h", &s.h),
        ("mode_var c_hat", &s.c_hat),
        ("mode_var h_hat", &s.h_hat),
    ] {
        check_dim(what, v, base.hidden_dim)?;
    }

    let (pre_i, pre_f) = match &p.cross {
        None => (
            affine(&[(&base.w_xi, x), (&base.w_hi, &s.h), (&base.w_ci, &s.c)], &base.b_i)?,
            affine(&[(&base.w_xf, x), (&base.w_hf, &s.h), (&base.w_cf, &s.c)], &base.b_f)?,
        ),
        Some(cross) => (
            affine(
                &[
                    (&base.w_xi, x),
                    (&base.w_hi, &s.h),
                    (&base.w_ci, &s.c),
                    (&cross.w_chat_i, &s.c_hat),
                ],
                &base.b_i,
            )?,
            affine(
                &[
                    (&base.w_xf, x),
                    (&base.w_hf, &s.h),
                    (&base.w_cf, &s.c),
                    (&cross.w_chat_f, &s.c_hat),
                ],
                &base.b_f,
            )?,
        ),
    };
    let (pre_i_hat, pre_f_hat) = match p.bias_gate_c_peepholes() {
        None => (
            affine(&[(&bias.w_x_i, x_hat), (&bias.w_h_i, &s.h_hat), (&bias.w_c_i, &s.c_hat)], &bias.b_i)?,
            affine(&[(&bias.w_x_f, x_hat), (&bias.w_h_f, &s.h_hat), (&bias.w_c_f, &s.c_hat)], &bias.b_f)?,
        ),
        Some((w_c_ihat, w_c_fhat)) => (
            affine(
                &[
                    (&bias.w_x_i, x_hat),
                    (&bias.w_h_i, &s.h_hat),
                    (&bias.w_c_i, &s.c_hat),
                    (w_c_ihat, &s.c),
                ],
                &bias.b_i,
            )?,
            affine(
                &[
                    (&bias.w_x_f, x_hat),
                    (&bias.w_h_f, &s.h_hat),
                    (&bias.w_c_f, &s.c_hat),
                    (w_c_fhat, &s.c),
                ],
                &bias.b_f,
            )?,
        ),
    };
    let pre_g = affine(&[(&base.w_xc, x), (&base.w_hc, &s.h)], &base.b_c)?;
    let pre_g_hat = affine(&[(&bias.w_x_c, x_hat), (&bias.w_h_c, &s.h_hat)], &bias.b_c)?;

    let i = pre_i.map(sigmoid_scalar);
    let f = pre_f.map(sigmoid_scalar);
    let i_hat = pre_i_hat.map(sigmoid_scalar);
    let f_hat = pre_f_hat.map(sigmoid_scalar);
    let g = pre_g.map(tanh_scalar);
    let g_hat = pre_g_hat.map(tanh_scalar);

    let c = cell_update(&f, &s.c, &i, &g);
    let c_hat = if p.bias_cell_dynamics_gates {
        cell_update(&f, &s.c_hat, &i, &g_hat)
    } else {
        cell_update(&f_hat, &s.c_hat, &i_hat, &g_hat)
    };

    let pre_o = affine(
        &[
            (&base.w_xo, x),
            (&base.w_ho, &s.h),
            (&base.w_co, &c),
            (&p.w_chat_o, &c_hat),
            (&p.w_hhat_o, &s.h_hat),
        ],
        &base.b_o,
    )?;
    let o = pre_o.map(sigmoid_scalar);
    let tanh_c = c.map(tanh_scalar);
    let tanh_c_hat = c_hat.map(tanh_scalar);
    let h = o.hadamard(&tanh_c)?;
    let h_hat = o.hadamard(&tanh_c_hat)?;

    let next = ModeVarState {
        c: c.clone(),
        h: h.clone(),
        c_hat: c_hat.clone(),
        h_hat: h_hat.clone(),
    };
    let cache = ModeVarCache {
        x: x.clone(),
        x_hat: x_hat.clone(),
        prev: s.clone(),
        pre_i,
        pre_f,
        pre_g,
        pre_i_hat,
        pre_f_hat,
        pre_g_hat,
        pre_o,
        i,
        f,
        g,
        i_hat,
        f_hat,
        g_hat,
        o,
        c,
        c_hat,
        tanh_c,
        tanh_c_hat,
        h,
        h_hat,
    };
    Ok((next, cache))
}

/// Runs the cell from the zero state over `frames`. Mode variational cells
/// receive `static_frame` as their static input at every step; the plain
/// LSTM ignores it.
pub fn forward_sequence(
    params: &CellParams,
    frames: &[Vector],
    static_frame: Option<&Vector>,
) -> Result<(FinalState, Vec<StepCache>)> {
    match params {
        CellParams::Lstm(_) => forward_steps(params, frames, None),
        CellParams::ModeVar(_) => {
            let x_hat = static_frame
                .ok_or_else(|| Error::invalid("mode variational cells need a static frame"))?;
            let replicated = vec![x_hat.clone(); frames.len()];
            forward_steps(params, frames, Some(&replicated))
        }
    }
}

/// Like [`forward_sequence`] but with an explicit static input per step.
pub fn forward_steps(
    params: &CellParams,
    frames: &[Vector],
    static_steps: Option<&[Vector]>,
) -> Result<(FinalState, Vec<StepCache>)> {
    if frames.is_empty() {
        return Err(Error::Empty("frame sequence"));
    }
    let d_h = params.hidden_dim();
    let mut caches = Vec::with_capacity(frames.len());
    match params {
        CellParams::Lstm(p) => {
            let mut s = CellState::zeros(d_h);
            for x in frames {
                let (next, cache) = lstm_step(p, &s, x)?;
                caches.push(StepCache::Lstm(cache));
                s = next;
            }
            Ok((FinalState::Lstm(s), caches))
        }
        CellParams::ModeVar(p) => {
            let statics = static_steps
                .ok_or_else(|| Error::invalid("mode variational cells need a static input"))?;
            if statics.len() != frames.len() {
                return Err(Error::shape(
                    "forward_steps",
                    format!("{} frames", frames.len()),
                    format!("{} static inputs", statics.len()),
                ));
            }
            let mut s = ModeVarState::zeros(d_h);
            for (x, x_hat) in frames.iter().zip(statics) {
                let (next, cache) = mode_var_forward(p, &s, x, x_hat)?;
                caches.push(StepCache::ModeVar(cache));
                s = next;
            }
            Ok((FinalState::ModeVar(s), caches))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vector {
        Vector::from_vec((0..n).map(|_| rng.random_range(-scale..scale)).collect())
    }

    /// Parameters with every entry (biases included) drawn at random.
    fn noisy_params(d_x: usize, d_h: usize, variant: Variant, seed: u64) -> CellParams {
        let mut p = init_params(d_x, d_h, variant, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        p.visit_mut(&mut |_, _, v| v.iter_mut().for_each(|x| *x = rng.random_range(-0.8..0.8)));
        p
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        for variant in Variant::ALL {
            let a = init_params(3, 4, variant, 11).unwrap();
            let b = init_params(3, 4, variant, 11).unwrap();
            assert_eq!(a.to_flat(), b.to_flat());
            a.visit(&mut |name, shape, values| match shape {
                Shape::Matrix(r, c) => {
                    let bound = glorot_bound(r, c);
                    assert!(values.iter().all(|v| v.abs() <= bound), "{name}");
                }
                Shape::Vector(_) => {
                    let expect = if name == "b_f" || name == "b_f_hat" { 1.0 } else { 0.0 };
                    assert!(values.iter().all(|&v| v == expect), "{name}");
                }
            });
        }
        let p = init_params(2, 4, Variant::Lstm, 0).unwrap();
        assert_eq!(p.tensor("b_f").unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn init_rejects_zero_dims() {
        assert!(init_params(0, 3, Variant::Lstm, 0).is_err());
        assert!(init_params(3, 0, Variant::Modevar, 0).is_err());
    }

    #[test]
    fn parameter_key_sets_differ_by_variant() {
        let l = init_params(2, 2, Variant::Lstm, 0).unwrap().names();
        let m = init_params(2, 2, Variant::Modevar, 0).unwrap().names();
        let x = init_params(2, 2, Variant::ModevarCrosscell, 0).unwrap().names();
        assert_eq!(l.len(), 15);
        assert_eq!(m.len(), 15 + 11 + 2);
        assert_eq!(x.len(), m.len() + 2);
        assert!(m.contains(&"b_f_hat"));
        assert!(x.contains(&"W_chat_i") && !m.contains(&"W_chat_i"));
        let untied = init_params_with(
            2,
            2,
            Variant::ModevarCrosscell,
            CellOptions { untied_crosscell: true, ..Default::default() },
            0,
        )
        .unwrap()
        .names();
        assert!(untied.contains(&"W_c_ihat") && untied.contains(&"W_c_fhat"));
    }

    #[test]
    fn diagonal_peephole_masks_off_diagonals() {
        let opts = CellOptions { diagonal_peephole: true, ..Default::default() };
        let p = init_params_with(3, 3, Variant::ModevarCrosscell, opts, 5).unwrap();
        let w = p.tensor("W_chat_i").unwrap();
        for r in 0..3 {
            for c in 0..3 {
                if r != c {
                    assert_eq!(w[r * 3 + c], 0.0);
                }
            }
        }
        assert!(p.tensor("W_hi").unwrap().iter().filter(|v| **v != 0.0).count() > 3);
    }

    #[test]
    fn zero_params_give_half_gates_and_zero_state() {
        let p = LstmParams::zeros(2, 3);
        let (s, cache) = lstm_step(&p, &CellState::zeros(3), &Vector::from_vec(vec![0.3, -7.0])).unwrap();
        assert_eq!(s, CellState::zeros(3));
        for g in [&cache.i, &cache.f, &cache.o] {
            assert!(g.iter().all(|&v| v == 0.5));
        }

        for variant in [Variant::Modevar, Variant::ModevarCrosscell] {
            let p = ModeVarParams::zeros(2, 3, variant, CellOptions::default());
            let x = Vector::from_vec(vec![1.0, 2.0]);
            let step = if variant == Variant::Modevar { modevar_step } else { crosscell_step };
            let (s, cache) = step(&p, &ModeVarState::zeros(3), &x, &x).unwrap();
            assert_eq!(s, ModeVarState::zeros(3));
            for g in StepCache::ModeVar(cache).gates() {
                assert!(g.iter().all(|&v| v == 0.5));
            }
        }
    }

    #[test]
    fn scalar_lstm_hand_evaluation() {
        let mut p = LstmParams::zeros(1, 1);
        p.w_xc = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let (s, cache) = lstm_step(&p, &CellState::zeros(1), &Vector::from_vec(vec![1.0])).unwrap();
        assert_eq!((cache.i[0], cache.f[0], cache.o[0]), (0.5, 0.5, 0.5));
        let c = 0.5 * 1f64.tanh();
        assert!((s.c[0] - c).abs() < 1e-15);
        assert!((s.c[0] - 0.380_797).abs() < 1e-6);
        assert!((s.h[0] - 0.5 * c.tanh()).abs() < 1e-15);
        assert!((s.h[0] - 0.181_699_742_194_526).abs() < 1e-12);
    }

    #[test]
    fn step_rejects_bad_dims_and_wrong_variant() {
        let p = LstmParams::zeros(2, 3);
        assert!(lstm_step(&p, &CellState::zeros(3), &Vector::zeros(4)).is_err());
        assert!(lstm_step(&p, &CellState::zeros(2), &Vector::zeros(2)).is_err());

        let m = ModeVarParams::zeros(2, 3, Variant::Modevar, CellOptions::default());
        let x = Vector::zeros(2);
        assert!(crosscell_step(&m, &ModeVarState::zeros(3), &x, &x).is_err());
        assert!(modevar_step(&m, &ModeVarState::zeros(3), &x, &Vector::zeros(3)).is_err());
        let c = ModeVarParams::zeros(2, 3, Variant::ModevarCrosscell, CellOptions::default());
        assert!(modevar_step(&c, &ModeVarState::zeros(3), &x, &x).is_err());
    }

    #[test]
    fn cache_reproduces_outputs() {
        let p = noisy_params(2, 3, Variant::ModevarCrosscell, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frames: Vec<_> = (0..4).map(|_| random_vector(&mut rng, 2, 1.0)).collect();
        let (_, caches) = forward_sequence(&p, &frames, Some(&frames[0])).unwrap();
        for cache in &caches {
            let StepCache::ModeVar(c) = cache else { panic!() };
            assert_eq!(c.h, c.o.hadamard(&c.c.map(tanh_scalar)).unwrap());
            assert_eq!(c.h_hat, c.o.hadamard(&c.c_hat.map(tanh_scalar)).unwrap());
            assert_eq!(c.i, c.pre_i.map(sigmoid_scalar));
            assert_eq!(c.f_hat, c.pre_f_hat.map(sigmoid_scalar));
            assert_eq!(c.c, cell_update(&c.f, &c.prev.c, &c.i, &c.g));
            assert_eq!(c.c_hat, cell_update(&c.f_hat, &c.prev.c_hat, &c.i_hat, &c.g_hat));
        }
    }

    #[test]
    fn bias_cell_dynamics_gates_switch() {
        let mut p = noisy_params(2, 3, Variant::Modevar, 4);
        if let CellParams::ModeVar(m) = &mut p {
            m.bias_cell_dynamics_gates = true;
        }
        let x = Vector::from_vec(vec![0.4, -0.2]);
        let (_, caches) = forward_sequence(&p, &[x.clone(), x.clone()], Some(&x)).unwrap();
        let StepCache::ModeVar(c) = &caches[1] else { panic!() };
        assert_eq!(c.c_hat, cell_update(&c.f, &c.prev.c_hat, &c.i, &c.g_hat));
        assert_ne!(c.c_hat, cell_update(&c.f_hat, &c.prev.c_hat, &c.i_hat, &c.g_hat));
    }

    #[test]
    fn forward_sequence_edge_cases() {
        let p = noisy_params(2, 3, Variant::Modevar, 1);
        assert!(matches!(forward_sequence(&p, &[], Some(&Vector::zeros(2))), Err(Error::Empty(_))));
        assert!(forward_sequence(&p, &[Vector::zeros(2)], None).is_err());

        let x = Vector::from_vec(vec![0.5, -1.0]);
        let (fin, caches) = forward_sequence(&p, std::slice::from_ref(&x), Some(&x)).unwrap();
        let CellParams::ModeVar(m) = &p else { panic!() };
        let (s, _) = modevar_step(m, &ModeVarState::zeros(3), &x, &x).unwrap();
        assert_eq!(fin, FinalState::ModeVar(s));
        assert_eq!(caches.len(), 1);

        let z = CellParams::zeros(2, 3, Variant::Lstm, CellOptions::default());
        let (_, caches) = forward_sequence(&z, &vec![x.clone(); 6], None).unwrap();
        assert!(caches.iter().all(|c| c.h().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn forward_is_deterministic() {
        let p = noisy_params(3, 4, Variant::ModevarCrosscell, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frames: Vec<_> = (0..7).map(|_| random_vector(&mut rng, 3, 2.0)).collect();
        let a = forward_sequence(&p, &frames, Some(&frames[2])).unwrap();
        let b = forward_sequence(&p, &frames, Some(&frames[2])).unwrap();
        assert_eq!(a, b);
    }
}
