//! Evaluation tables, the seen/unseen benchmark and pair probes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use mvlstm::data::{generate_dataset, split_by_mode, DatasetManifest, FoldConfig, GeneratorConfig, SequenceSample, Split};
use mvlstm::model::{evaluate, train, Classifier, ModelConfig, TauPolicy, TrainConfig};
use mvlstm::probe::{convergence_report, trace_features, ProbeReport, ProbeTrace};
use mvlstm::data::make_static_sequence;
use mvlstm::{Error, Result, Variant};

use crate::config::Selector;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Seen,
    Unseen,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Seen => "seen",
            Role::Unseen => "unseen",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeRate {
    pub mode: u32,
    pub kind: String,
    pub role: Role,
    pub correct: usize,
    pub total: usize,
}

impl ModeRate {
    pub fn rate(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalTable {
    pub label: String,
    pub variant: Variant,
    pub rows: Vec<ModeRate>,
}

impl EvalTable {
    fn mean_rate(&self, role: Role) -> Option<f64> {
        let r: Vec<f64> = self.rows.iter().filter(|r| r.role == role).map(ModeRate::rate).collect();
        (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64)
    }

    /// Pooled over the seen modes.
    pub fn seen_rate(&self) -> Option<f64> {
        let (c, t) = self
            .rows
            .iter()
            .filter(|r| r.role == Role::Seen)
            .fold((0, 0), |(c, t), r| (c + r.correct, t + r.total));
        (t > 0).then(|| c as f64 / t as f64)
    }

    /// Mean of the per-mode unseen rates.
    pub fn unseen_rate(&self) -> Option<f64> {
        self.mean_rate(Role::Unseen)
    }

    pub fn overall(&self) -> f64 {
        let (c, t) = self.rows.iter().fold((0, 0), |(c, t), r| (c + r.correct, t + r.total));
        c as f64 / t.max(1) as f64
    }

    /// Seen rate minus mean unseen rate.
    pub fn gap(&self) -> Option<f64> {
        Some(self.seen_rate()? - self.unseen_rate()?)
    }
}

pub const EVAL_HEADER: &str = "model,variant,mode,kind,role,correct,total,rate";
pub const SUMMARY_HEADER: &str = "model,variant,seen_rate,unseen_rate,overall,gap";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:?}"))
}

pub fn eval_csv(tables: &[EvalTable]) -> String {
    let mut s = format!("{EVAL_HEADER}\n");
    for t in tables {
        for r in &t.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{:?}",
                t.label,
                t.variant,
                r.mode,
                r.kind,
                r.role.name(),
                r.correct,
                r.total,
                r.rate()
            )
            .unwrap();
        }
    }
    s
}

pub fn summary_csv(tables: &[EvalTable]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for t in tables {
        writeln!(
            s,
            "{},{},{},{},{:?},{}",
            t.label,
            t.variant,
            opt(t.seen_rate()),
            opt(t.unseen_rate()),
            t.overall(),
            opt(t.gap())
        )
        .unwrap();
    }
    s
}

pub fn eval_text(t: &EvalTable) -> String {
    let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.2}%", 100.0 * v));
    let mut s = format!("{} ({})\n  mode  kind      role     correct/total  rate\n", t.label, t.variant);
    for r in &t.rows {
        writeln!(
            s,
            "  {:<5} {:<9} {:<8} {:>7}/{:<5}  {}",
            r.mode,
            r.kind,
            r.role.name(),
            r.correct,
            r.total,
            pct(Some(r.rate()))
        )
        .unwrap();
    }
    writeln!(
        s,
        "  seen {}  unseen {}  overall {}  gap {}",
        pct(t.seen_rate()),
        pct(t.unseen_rate()),
        pct(Some(t.overall())),
        pct(t.gap())
    )
    .unwrap();
    s
}

fn kind_of(manifest: &DatasetManifest, mode: u32) -> String {
    manifest
        .mode(mode)
        .map_or_else(|| "?".to_string(), |m| m.kind().short_name().to_string())
}

fn rate_row(clf: &Classifier, manifest: &DatasetManifest, mode: u32, role: Role, samples: &[SequenceSample]) -> Result<ModeRate> {
    let e = evaluate(clf, samples)?;
    Ok(ModeRate {
        mode,
        kind: kind_of(manifest, mode),
        role,
        correct: e.correct,
        total: e.total,
    })
}

fn by_mode(samples: &[SequenceSample]) -> BTreeMap<u32, Vec<SequenceSample>> {
    let mut m: BTreeMap<u32, Vec<SequenceSample>> = BTreeMap::new();
    for s in samples {
        m.entry(s.mode_id).or_default().push(s.clone());
    }
    m
}

/// Per-mode recognition rates on the held-out partitions.
pub fn evaluate_split(label: &str, clf: &Classifier, split: &Split, manifest: &DatasetManifest) -> Result<EvalTable> {
    let mut rows = Vec::new();
    for (mode, samples) in by_mode(&split.seen_test) {
        rows.push(rate_row(clf, manifest, mode, Role::Seen, &samples)?);
    }
    for (&mode, samples) in &split.unseen_test {
        if !samples.is_empty() {
            rows.push(rate_row(clf, manifest, mode, Role::Unseen, samples)?);
        }
    }
    if rows.is_empty() {
        return Err(Error::Empty("evaluation partition"));
    }
    Ok(EvalTable {
        label: label.to_string(),
        variant: clf.variant(),
        rows,
    })
}

/// Per-mode recognition rates on the training partition.
pub fn evaluate_training(label: &str, clf: &Classifier, split: &Split, manifest: &DatasetManifest) -> Result<EvalTable> {
    let rows = by_mode(&split.train)
        .into_iter()
        .map(|(mode, samples)| rate_row(clf, manifest, mode, Role::Seen, &samples))
        .collect::<Result<_>>()?;
    Ok(EvalTable {
        label: label.to_string(),
        variant: clf.variant(),
        rows,
    })
}

/// Mean and standard error of the mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub se: f64,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let se = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
    };
    Summary { mean, se }
}

/// Seen/unseen robustness benchmark: one dataset and one training run per
/// seed.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkConfig {
    pub data: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seen: Vec<u32>,
    pub unseen: Vec<u32>,
    pub fold: FoldConfig,
    pub seeds: Vec<u64>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            data: GeneratorConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seen: vec![0],
            unseen: vec![1, 2, 3],
            fold: FoldConfig::default(),
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub table: EvalTable,
    pub classifier: Classifier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantRuns {
    pub variant: Variant,
    pub runs: Vec<SeedRun>,
}

impl VariantRuns {
    fn collect(&self, f: impl Fn(&EvalTable) -> Option<f64>) -> Vec<f64> {
        self.runs.iter().filter_map(|r| f(&r.table)).collect()
    }

    pub fn seen(&self) -> Summary {
        summarize(&self.collect(EvalTable::seen_rate))
    }

    pub fn unseen(&self) -> Summary {
        summarize(&self.collect(EvalTable::unseen_rate))
    }

    pub fn gap(&self) -> Summary {
        summarize(&self.collect(EvalTable::gap))
    }
}

pub fn run_benchmark(cfg: &BenchmarkConfig, variants: &[Variant]) -> Result<Vec<VariantRuns>> {
    let mut splits = Vec::new();
    for &seed in &cfg.seeds {
        let d = generate_dataset(&cfg.data, seed)?;
        let split = split_by_mode(&d.samples, &cfg.seen, &cfg.unseen, cfg.fold)?;
        splits.push((seed, split, d.manifest));
    }
    variants
        .iter()
        .map(|&variant| {
            let model = ModelConfig { variant, ..cfg.model };
            let runs = splits
                .iter()
                .map(|(seed, split, manifest)| {
                    let train_cfg = TrainConfig { seed: *seed, ..cfg.train };
                    let out = train(&split.train, cfg.data.num_classes, &model, &train_cfg)?;
                    let table = evaluate_split(&format!("seed{seed}"), &out.classifier, split, manifest)?;
                    Ok(SeedRun {
                        seed: *seed,
                        table,
                        classifier: out.classifier,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(VariantRuns { variant, runs })
        })
        .collect()
}

pub fn benchmark_text(results: &[VariantRuns]) -> String {
    let mut s = String::from("variant            seen             unseen           gap\n");
    for r in results {
        let f = |x: Summary| format!("{:.4} ± {:.4}", x.mean, x.se);
        writeln!(s, "{:<18} {:<16} {:<16} {}", r.variant.name(), f(r.seen()), f(r.unseen()), f(r.gap())).unwrap();
    }
    s
}

/// Index pairs for a pair selector, deterministic in dataset order.
///
/// Pair `p` takes class `p mod C` and replicate `p / C`. Mode-differing
/// pairs put the first mode against the others in turn; same-mode pairs
/// cycle through the modes and take two consecutive replicates.
pub fn select_pairs(samples: &[SequenceSample], modes: &[u32], selector: Selector, count: usize) -> Result<Vec<(usize, usize)>> {
    let classes = samples.iter().map(|s| s.label).max().map_or(0, |m| m + 1);
    let mut cells: BTreeMap<(u32, usize), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        cells.entry((s.mode_id, s.label)).or_default().push(i);
    }
    let get = |mode: u32, class: usize, rep: usize| cells.get(&(mode, class)).and_then(|v| v.get(rep)).copied();
    let mut pairs = Vec::new();
    match selector {
        Selector::Sample(i) if i < samples.len() => pairs.push((i, i)),
        Selector::Sample(_) => {}
        Selector::SameClassDiffMode if modes.len() >= 2 => {
            for p in 0..count {
                let (k, j) = (p % classes, p / classes);
                let other = modes[1 + p % (modes.len() - 1)];
                if let (Some(a), Some(b)) = (get(modes[0], k, j), get(other, k, j)) {
                    pairs.push((a, b));
                }
            }
        }
        Selector::SameClassDiffMode => {}
        Selector::SameClassSameMode => {
            for p in 0..count {
                let (k, j) = (p % classes, p / classes);
                let m = modes[p % modes.len()];
                if let (Some(a), Some(b)) = (get(m, k, 2 * j), get(m, k, 2 * j + 1)) {
                    pairs.push((a, b));
                }
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Empty("selector matched no samples"));
    }
    Ok(pairs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub trace: ProbeTrace,
    pub report: ProbeReport,
}

/// Trace of the sample's frame `tau` replicated `n` times.
pub fn probe_sample(clf: &Classifier, sample: &SequenceSample, tau: TauPolicy, n: usize, epsilon: f64) -> Result<Probe> {
    let t = tau.resolve(sample)?;
    let seq = make_static_sequence(sample, t, n)?;
    let mut trace = trace_features(&clf.params.cell, &seq, false)?;
    trace.source_seed = sample.seed;
    trace.tau = t;
    let report = convergence_report(&trace, epsilon)?;
    Ok(Probe { trace, report })
}
