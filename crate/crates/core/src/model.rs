//! Sequence classifier: recurrent encoder, linear readout, softmax
//! cross-entropy, optimizers and the training loop.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward_sequence, relative_error, OutputSeed};
use crate::cells::{forward_sequence, glorot_bound, init_params_with, CellOptions, CellParams, StepCache, Variant};
use crate::data::SequenceSample;
use crate::error::{Error, Result};
use crate::numerics::{matvec, Matrix, Vector};
use crate::params::{emit, emit_mut, ParamSet, Visitor, VisitorMut};
use crate::reference::{self, central_differences, Diff, Layout, Scalar, Structure, Tensors};

/// Which frame becomes the static input of a mode variational cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TauPolicy {
    #[default]
    FirstFrame,
    Fixed(usize),
    /// A frame chosen per sequence from its seed, so a sample always gets the
    /// same one.
    RandomPerSequence,
}

impl TauPolicy {
    pub fn resolve(self, sample: &SequenceSample) -> Result<usize> {
        let t = match self {
            TauPolicy::FirstFrame => 0,
            TauPolicy::Fixed(t) => t,
            TauPolicy::RandomPerSequence => random_tau(sample.seed, sample.len()),
        };
        if t >= sample.len() {
            return Err(Error::invalid(format!("tau {t} out of range for {} frames", sample.len())));
        }
        Ok(t)
    }
}

pub fn random_tau(seed: u64, len: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    (rng.next_u64() % len.max(1) as u64) as usize
}

impl FromStr for TauPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" | "first_frame" => Ok(TauPolicy::FirstFrame),
            "random" | "random_per_sequence" => Ok(TauPolicy::RandomPerSequence),
            n => n
                .parse()
                .map(TauPolicy::Fixed)
                .map_err(|_| Error::invalid(format!("tau must be first, random or a frame index, got '{n}'"))),
        }
    }
}

impl fmt::Display for TauPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TauPolicy::FirstFrame => f.write_str("first"),
            TauPolicy::RandomPerSequence => f.write_str("random"),
            TauPolicy::Fixed(t) => write!(f, "{t}"),
        }
    }
}

impl Serialize for TauPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TauPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Index(usize),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Index(t) => Ok(TauPolicy::Fixed(t)),
            Raw::Name(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// How the sequence of latent features becomes one vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    #[default]
    Last,
    Mean,
}

impl FromStr for Readout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Readout::Last),
            "mean" => Ok(Readout::Mean),
            o => Err(Error::invalid(format!("readout must be last or mean, got '{o}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub cell: CellParams,
    pub w_out: Matrix,
    pub b_out: Vector,
}

impl ClassifierParams {
    pub fn num_classes(&self) -> usize {
        self.b_out.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let (c, d) = self.w_out.shape();
        if d != self.cell.hidden_dim() || c != self.b_out.dim() {
            return Err(Error::shape(
                "classifier readout",
                format!("W_out {c}x{d}, b_out [{}]", self.b_out.dim()),
                format!("hidden dim {}", self.cell.hidden_dim()),
            ));
        }
        Ok(())
    }
}

impl ParamSet for ClassifierParams {
    fn visit(&self, f: &mut Visitor<'_>) {
        self.cell.visit(f);
        emit(f, "W_out", &self.w_out);
        emit(f, "b_out", &self.b_out);
    }

    fn visit_mut(&mut self, f: &mut VisitorMut<'_>) {
        self.cell.visit_mut(f);
        emit_mut(f, "W_out", &mut self.w_out);
        emit_mut(f, "b_out", &mut self.b_out);
    }
}

/// Trained parameters plus the settings needed to apply them.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub params: ClassifierParams,
    pub readout: Readout,
    pub tau: TauPolicy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub hidden_dim: usize,
    pub options: CellOptions,
    pub readout: Readout,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::ModevarCrosscell,
            hidden_dim: 32,
            options: CellOptions::default(),
            readout: Readout::Last,
        }
    }
}

impl Classifier {
    pub fn init(config: &ModelConfig, input_dim: usize, num_classes: usize, tau: TauPolicy, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("a classifier needs at least two classes"));
        }
        let cell = init_params_with(input_dim, config.hidden_dim, config.variant, config.options, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        let bound = glorot_bound(num_classes, config.hidden_dim);
        let data = (0..num_classes * config.hidden_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Ok(Classifier {
            params: ClassifierParams {
                cell,
                w_out: Matrix::from_vec(num_classes, config.hidden_dim, data)?,
                b_out: Vector::zeros(num_classes),
            },
            readout: config.readout,
            tau,
        })
    }

    pub fn variant(&self) -> Variant {
        self.params.cell.variant()
    }

    pub fn static_frame(&self, sample: &SequenceSample) -> Result<Option<Vector>> {
        if !self.variant().is_mode_var() {
            return Ok(None);
        }
        Ok(Some(sample.frames[self.tau.resolve(sample)?].clone()))
    }

    fn check_sample(&self, sample: &SequenceSample) -> Result<()> {
        if sample.is_empty() {
            return Err(Error::Empty("sample frames"));
        }
        let d = self.params.cell.input_dim();
        if let Some(f) = sample.frames.iter().find(|f| f.dim() != d) {
            return Err(Error::shape("encode", format!("frame dim {}", f.dim()), format!("input dim {d}")));
        }
        Ok(())
    }

    fn pooled(&self, caches: &[StepCache]) -> Vector {
        match self.readout {
            Readout::Last => caches.last().expect("non-empty").h().clone(),
            Readout::Mean => {
                let mut acc = Vector::zeros(self.params.cell.hidden_dim());
                caches.iter().for_each(|c| acc.add_assign(c.h()));
                acc.scale(1.0 / caches.len() as f64)
            }
        }
    }

    /// Logits `W_out · h + b_out` for one sample.
    pub fn encode(&self, sample: &SequenceSample) -> Result<Vector> {
        self.check_sample(sample)?;
        let x_hat = self.static_frame(sample)?;
        let (_, caches) = forward_sequence(&self.params.cell, &sample.frames, x_hat.as_ref())?;
        matvec(&self.params.w_out, &self.pooled(&caches))?.add(&self.params.b_out)
    }

    pub fn predict(&self, sample: &SequenceSample) -> Result<usize> {
        Ok(self.encode(sample)?.argmax().expect("at least two classes"))
    }

    /// Loss, whether the prediction was right, and the gradient of the loss.
    pub fn loss_and_grad(&self, sample: &SequenceSample) -> Result<(f64, bool, ClassifierParams)> {
        self.check_sample(sample)?;
        let x_hat = self.static_frame(sample)?;
        let (_, caches) = forward_sequence(&self.params.cell, &sample.frames, x_hat.as_ref())?;
        let pooled = self.pooled(&caches);
        let logits = matvec(&self.params.w_out, &pooled)?.add(&self.params.b_out)?;
        let (loss, d_logits) = softmax_cross_entropy(&logits, sample.label)?;
        let correct = logits.argmax() == Some(sample.label);

        let mut w_out = Matrix::zeros(self.params.w_out.rows(), self.params.w_out.cols());
        w_out.add_outer(&d_logits, &pooled);
        let mut d_pooled = Vector::zeros(pooled.dim());
        crate::numerics::matvec_t_acc(&self.params.w_out, &d_logits, &mut d_pooled)?;

        let steps = caches.len();
        let seed = match self.readout {
            Readout::Last => OutputSeed::final_step(steps, d_pooled, None),
            Readout::Mean => OutputSeed {
                h: vec![d_pooled.scale(1.0 / steps as f64); steps],
                h_hat: Vec::new(),
            },
        };
        let cell = backward_sequence(&self.params.cell, &caches, &seed)?.params;
        Ok((loss, correct, ClassifierParams { cell, w_out, b_out: d_logits }))
    }
}

/// `−log softmax(logits)[label]` and its gradient `softmax − onehot`.
pub fn softmax_cross_entropy(logits: &Vector, label: usize) -> Result<(f64, Vector)> {
    if label >= logits.dim() {
        return Err(Error::invalid(format!("label {label} out of range for {} classes", logits.dim())));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - m).exp()).sum();
    let lse = m + sum.ln();
    let mut grad = logits.map(|z| (z - lse).exp());
    grad[label] -= 1.0;
    Ok((lse - logits[label], grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    #[default]
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" | "sgd_momentum" => Ok(OptimizerKind::SgdMomentum),
            "adam" => Ok(OptimizerKind::Adam),
            o => Err(Error::invalid(format!("optimizer must be sgd_momentum or adam, got '{o}'"))),
        }
    }
}

pub const MOMENTUM: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Optimizer state over a flattened parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, num_scalars: usize) -> Self {
        Optimizer {
            kind,
            learning_rate,
            first: vec![0.0; num_scalars],
            second: vec![0.0; num_scalars],
            steps: 0,
        }
    }

    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P) {
        let g = grads.to_flat();
        assert_eq!(g.len(), self.first.len(), "optimizer state does not match the parameters");
        let mut w = params.to_flat();
        self.steps += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::SgdMomentum => {
                for ((w, v), g) in w.iter_mut().zip(&mut self.first).zip(&g) {
                    *v = MOMENTUM * *v + g;
                    *w -= lr * *v;
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - ADAM_BETA1.powi(self.steps as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(self.steps as i32);
                for (((w, m), v), g) in w.iter_mut().zip(&mut self.first).zip(&mut self.second).zip(&g) {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPSILON);
                }
            }
        }
        params.set_flat(&w);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Global-norm threshold; 0 disables clipping.
    pub grad_clip: f64,
    pub tau_policy: TauPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 50,
            batch_size: 8,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            grad_clip: 5.0,
            tau_policy: TauPolicy::FirstFrame,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be at least 1"));
        }
        if self.grad_clip.is_nan() || self.grad_clip < 0.0 {
            return Err(Error::invalid("grad_clip must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub wall_time_ms: f64,
}

pub const METRICS_HEADER: &str = "epoch,mean_loss,train_accuracy";
pub const TIMING_HEADER: &str = "epoch,wall_time_ms";

/// Deterministic per-epoch table. Wall time goes to [`timing_csv`] so this
/// file is byte-identical across reruns.
pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in metrics {
        out += &format!("{},{:?},{:?}\n", m.epoch, m.mean_loss, m.train_accuracy);
    }
    out
}

pub fn timing_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = format!("{TIMING_HEADER}\n");
    for m in metrics {
        out += &format!("{},{:.3}\n", m.epoch, m.wall_time_ms);
    }
    out
}

fn check_dataset(samples: &[SequenceSample]) -> Result<(usize, usize)> {
    let first = samples.first().ok_or(Error::Empty("dataset"))?;
    let d = first.input_dim();
    if let Some(s) = samples.iter().find(|s| s.is_empty() || s.frames.iter().any(|f| f.dim() != d)) {
        return Err(Error::invalid(format!(
            "sample with seed {} does not have input dim {d} throughout",
            s.seed
        )));
    }
    let classes = samples.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    Ok((d, classes))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub classifier: Classifier,
    pub metrics: Vec<EpochMetrics>,
}

pub fn train(samples: &[SequenceSample], num_classes: usize, model: &ModelConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(samples, num_classes, model, config, |_| {})
}

/// Minibatch BPTT. Per-sample gradients may be computed in parallel; they
/// are always summed in batch order.
pub fn train_with(
    samples: &[SequenceSample],
    num_classes: usize,
    model: &ModelConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    let (d_x, seen_classes) = check_dataset(samples)?;
    if seen_classes > num_classes {
        return Err(Error::invalid(format!("label {} out of range for {num_classes} classes", seen_classes - 1)));
    }
    let mut clf = Classifier::init(model, d_x, num_classes, config.tau_policy, config.seed)?;
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, clf.params.num_scalars());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(3);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut metrics = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            let per_sample = per_sample_grads(&clf, samples, batch)?;
            let mut total = clf.params.zeroed();
            for (loss, ok, g) in &per_sample {
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("loss {loss} at epoch {epoch}")));
                }
                loss_sum += loss;
                correct += usize::from(*ok);
                total.accumulate(g);
            }
            total.scale_mut(1.0 / batch.len() as f64);
            if !total.all_finite() {
                return Err(Error::NonFinite(format!("gradient at epoch {epoch}")));
            }
            let norm = total.global_norm();
            if config.grad_clip > 0.0 && norm > config.grad_clip {
                total.scale_mut(config.grad_clip / norm);
            }
            opt.step(&mut clf.params, &total);
        }
        let m = EpochMetrics {
            epoch,
            mean_loss: loss_sum / samples.len() as f64,
            train_accuracy: correct as f64 / samples.len() as f64,
            wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(TrainOutcome { classifier: clf, metrics })
}

fn per_sample_grads(
    clf: &Classifier,
    samples: &[SequenceSample],
    batch: &[usize],
) -> Result<Vec<(f64, bool, ClassifierParams)>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        batch.par_iter().map(|&i| clf.loss_and_grad(&samples[i])).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        batch.iter().map(|&i| clf.loss_and_grad(&samples[i])).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub correct: usize,
    pub total: usize,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    pub fn rate(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

pub fn predict_all(clf: &Classifier, samples: &[SequenceSample]) -> Result<Vec<usize>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        samples.par_iter().map(|s| clf.predict(s)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        samples.iter().map(|s| clf.predict(s)).collect()
    }
}

pub fn evaluate(clf: &Classifier, samples: &[SequenceSample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let c = clf.params.num_classes();
    if let Some(s) = samples.iter().find(|s| s.label >= c) {
        return Err(Error::invalid(format!("label {} out of range for {c} classes", s.label)));
    }
    let predictions = predict_all(clf, samples)?;
    let mut confusion = vec![vec![0; c]; c];
    let mut correct = 0;
    for (s, &p) in samples.iter().zip(&predictions) {
        confusion[s.label][p] += 1;
        correct += usize::from(s.label == p);
    }
    Ok(Evaluation {
        correct,
        total: samples.len(),
        confusion,
    })
}

/// Worst relative error between the classifier's analytic gradient and
/// central differences of the full loss, taken over every parameter.
pub fn classifier_grad_check(clf: &Classifier, sample: &SequenceSample, epsilon: f64) -> Result<(String, f64)> {
    let (_, _, analytic) = clf.loss_and_grad(sample)?;
    let layout = Layout::of(&clf.params);
    let structure = Structure::of(&clf.params.cell);
    let x_hat = clf.static_frame(sample)?;
    let frames: Vec<Vec<Diff>> = sample
        .frames
        .iter()
        .map(|f| f.iter().map(|&v| Diff::fixed(v)).collect())
        .collect();
    let statics: Vec<Vec<Diff>> = match &x_hat {
        Some(x) => vec![x.iter().map(|&v| Diff::fixed(v)).collect(); frames.len()],
        None => Vec::new(),
    };
    let readout = clf.readout;
    let label = sample.label;
    let numeric = central_differences(&clf.params.to_flat(), epsilon, |v| {
        let w = Tensors::from_flat(&layout, v);
        let trace = reference::run(&w, structure, &frames, &statics);
        let pooled: Vec<Diff> = match readout {
            Readout::Last => trace.last().expect("non-empty").h.clone(),
            Readout::Mean => {
                let k = Diff::fixed(1.0 / trace.len() as f64);
                (0..structure.hidden_dim)
                    .map(|j| trace.iter().fold(Diff::fixed(0.0), |acc, s| acc + s.h[j]) * k)
                    .collect()
            }
        };
        let logits: Vec<Diff> = w
            .apply("W_out", &pooled)
            .into_iter()
            .zip(w.vector("b_out"))
            .map(|(a, b)| a + *b)
            .collect();
        Diff::log_sum_exp(&logits) - logits[label]
    });
    let mut worst = (String::new(), 0.0);
    let flat = analytic.to_flat();
    let mut at = 0;
    analytic.visit(&mut |name, _, values| {
        for k in 0..values.len() {
            let e = relative_error(flat[at + k], numeric[at + k]);
            if e > worst.1 {
                worst = (name.to_string(), e);
            }
        }
        at += values.len();
    });
    Ok(worst)
}
