//! Subcommand bodies. Each writes its artifacts under the output directory
//! plus a `run-<command>.toml` manifest naming them.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mvlstm::archive;
use mvlstm::autodiff::{grad_check_with, CheckDims};
use mvlstm::data::{count_cells, generate_dataset, load_dataset, save_dataset, split_by_mode, write_atomic, Dataset, Split};
use mvlstm::model::{metrics_csv, timing_csv, train_with, Classifier};
use mvlstm::probe::{export_figure, pair_divergence};
use mvlstm::Variant;
use serde::Serialize;

use crate::config::{ExperimentConfig, Selector};
use crate::error::{CliError, CliResult};
use crate::experiment::{eval_csv, eval_text, evaluate_split, evaluate_training, probe_sample, select_pairs, summary_csv};

pub const MODEL_FILE: &str = "model.mvp";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const EVAL_SUMMARY_FILE: &str = "eval-summary.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";
pub const PROBE_FILE: &str = "probe.csv";
pub const DIVERGENCE_FILE: &str = "divergence.csv";

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    /// Files written by the command, relative to the output directory
    /// unless absolute.
    outputs: Vec<String>,
    /// Outputs that hold wall-clock measurements and differ between runs.
    nondeterministic: Vec<String>,
    config: &'a ExperimentConfig,
}

pub fn manifest_name(command: &str) -> String {
    format!("run-{command}.toml")
}

fn display_rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).display().to_string()
}

fn write_manifest(cfg: &ExperimentConfig, command: &str, outputs: &[PathBuf], nondeterministic: &[&str]) -> CliResult<()> {
    let m = RunManifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        outputs: outputs.iter().map(|p| display_rel(&cfg.out, p)).collect(),
        nondeterministic: nondeterministic.iter().map(|s| s.to_string()).collect(),
        config: cfg,
    };
    let text = toml::to_string(&m).map_err(|e| CliError::Failed(format!("manifest: {e}")))?;
    write_atomic(&cfg.out.join(manifest_name(command)), text.as_bytes())?;
    Ok(())
}

fn prepare(cfg: &ExperimentConfig) -> CliResult<()> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out)?;
    Ok(())
}

pub fn gen_data(cfg: &ExperimentConfig, out: &mut dyn Write) -> CliResult<Dataset> {
    prepare(cfg)?;
    let stem = cfg.dataset_stem();
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let dataset = generate_dataset(&cfg.data, cfg.seed)?;
    save_dataset(&dataset, &stem)?;
    let modes = dataset.manifest.mode_ids();
    writeln!(out, "{} samples, {} classes, {} modes", dataset.samples.len(), cfg.data.num_classes, modes.len())?;
    write!(out, "class")?;
    for m in &modes {
        write!(out, "  mode{m}")?;
    }
    writeln!(out)?;
    let counts: BTreeMap<(usize, u32), usize> = count_cells(&dataset.samples, cfg.data.num_classes, &dataset.manifest.modes)
        .into_iter()
        .map(|c| ((c.class, c.mode), c.count))
        .collect();
    for k in 0..cfg.data.num_classes {
        write!(out, "{k:>5}")?;
        for &m in &modes {
            write!(out, "  {:>5}", counts.get(&(k, m)).copied().unwrap_or(0))?;
        }
        writeln!(out)?;
    }
    let files = [mvlstm::data::manifest_path(&stem), mvlstm::data::frames_path(&stem)];
    write_manifest(cfg, "gen-data", &files, &[])?;
    Ok(dataset)
}

fn load_split(cfg: &ExperimentConfig) -> CliResult<(Dataset, Split)> {
    let stem = cfg.dataset_stem();
    let dataset = load_dataset(&stem).map_err(|e| match e {
        mvlstm::Error::Io(io) => CliError::Failed(format!("dataset {}: {io}", stem.display())),
        other => other.into(),
    })?;
    let modes = dataset.manifest.mode_ids();
    let unseen = cfg.split.resolve_unseen(&modes);
    for m in cfg.split.seen.iter().chain(&unseen) {
        if !modes.contains(m) {
            return Err(CliError::Usage(format!("mode {m} is not in the dataset (modes {modes:?})")));
        }
    }
    let split = split_by_mode(&dataset.samples, &cfg.split.seen, &unseen, cfg.split.fold_config())?;
    Ok((dataset, split))
}

pub fn train(cfg: &ExperimentConfig, out: &mut dyn Write) -> CliResult<Classifier> {
    prepare(cfg)?;
    let (dataset, split) = load_split(cfg)?;
    let classes = dataset.manifest.generator.num_classes;
    writeln!(
        out,
        "training {} on {} samples (modes {:?}), {} epochs, lr {}",
        cfg.model.variant,
        split.train.len(),
        cfg.split.seen,
        cfg.train.epochs,
        cfg.train.learning_rate
    )?;
    let mut log = Vec::new();
    let outcome = train_with(&split.train, classes, &cfg.model, &cfg.train_config(), |m| {
        log.push(format!("epoch {:>4}  loss {:.6}  train acc {:.4}", m.epoch, m.mean_loss, m.train_accuracy));
    })
    .map_err(|e| match e {
        mvlstm::Error::NonFinite(msg) => CliError::Failed(format!("training aborted: {msg}")),
        other => other.into(),
    })?;
    for line in log {
        writeln!(out, "{line}")?;
    }
    let last = outcome.metrics.last().expect("at least one epoch");
    writeln!(out, "final train accuracy {}", last.train_accuracy)?;
    let files = [cfg.out.join(MODEL_FILE), cfg.out.join(METRICS_FILE), cfg.out.join(TIMING_FILE)];
    archive::save(&outcome.classifier, &files[0])?;
    write_atomic(&files[1], metrics_csv(&outcome.metrics).as_bytes())?;
    write_atomic(&files[2], timing_csv(&outcome.metrics).as_bytes())?;
    write_manifest(cfg, "train", &files, &[TIMING_FILE])?;
    Ok(outcome.classifier)
}

fn load_model(path: &Path, expect: Option<Variant>, dataset: &Dataset) -> CliResult<Classifier> {
    let clf = archive::load(path).map_err(|e| match e {
        mvlstm::Error::Io(io) => CliError::Failed(format!("archive {}: {io}", path.display())),
        other => CliError::Failed(format!("archive {}: {other}", path.display())),
    })?;
    if let Some(v) = expect {
        if clf.variant() != v {
            return Err(CliError::Failed(format!(
                "archive/variant mismatch: {} holds {}, expected {v}",
                path.display(),
                clf.variant()
            )));
        }
    }
    let d_x = dataset.manifest.generator.input_dim;
    let classes = dataset.manifest.generator.num_classes;
    if clf.params.cell.input_dim() != d_x || clf.params.num_classes() != classes {
        return Err(CliError::Failed(format!(
            "archive {} expects {} inputs and {} classes; the dataset has {d_x} and {classes}",
            path.display(),
            clf.params.cell.input_dim(),
            clf.params.num_classes()
        )));
    }
    Ok(clf)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Subset {
    #[default]
    Test,
    Train,
}

pub fn eval(
    cfg: &ExperimentConfig,
    models: &[PathBuf],
    expect: Option<Variant>,
    subset: Subset,
    out: &mut dyn Write,
) -> CliResult<Vec<crate::experiment::EvalTable>> {
    prepare(cfg)?;
    let (dataset, split) = load_split(cfg)?;
    let default = [cfg.out.join(MODEL_FILE)];
    let models = if models.is_empty() { &default[..] } else { models };
    let mut tables = Vec::new();
    for path in models {
        let clf = load_model(path, expect, &dataset)?;
        let label = path.display().to_string().replace(',', "_");
        let t = match subset {
            Subset::Test => evaluate_split(&label, &clf, &split, &dataset.manifest)?,
            Subset::Train => evaluate_training(&label, &clf, &split, &dataset.manifest)?,
        };
        write!(out, "{}", eval_text(&t))?;
        tables.push(t);
    }
    if tables.len() >= 2 {
        writeln!(out, "gap comparison:")?;
        for t in &tables {
            match t.gap() {
                Some(g) => writeln!(out, "  {:<18} {:.4}  ({})", t.variant.name(), g, t.label)?,
                None => writeln!(out, "  {:<18} -  ({})", t.variant.name(), t.label)?,
            }
        }
        if let (Some(a), Some(b)) = (tables[0].gap(), tables[1].gap()) {
            writeln!(
                out,
                "  {} minus {}: {:+.4}",
                tables[1].variant.name(),
                tables[0].variant.name(),
                b - a
            )?;
        }
    }
    let files = [cfg.out.join(EVAL_FILE), cfg.out.join(EVAL_SUMMARY_FILE)];
    write_atomic(&files[0], eval_csv(&tables).as_bytes())?;
    write_atomic(&files[1], summary_csv(&tables).as_bytes())?;
    write_manifest(cfg, "eval", &files, &[])?;
    Ok(tables)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckRow {
    pub variant: Variant,
    pub param: String,
    pub max_rel_error: f64,
    pub worst_seed: u64,
}

pub fn gradcheck(cfg: &ExperimentConfig, variants: &[Variant], out: &mut dyn Write) -> CliResult<Vec<GradcheckRow>> {
    prepare(cfg)?;
    let g = &cfg.gradcheck;
    let dims = CheckDims {
        input_dim: g.input_dim,
        hidden_dim: g.hidden_dim,
        steps: g.steps,
    };
    let variants = if variants.is_empty() { &Variant::ALL[..] } else { variants };
    let start = Instant::now();
    let mut rows: Vec<GradcheckRow> = Vec::new();
    for &variant in variants {
        let first = rows.len();
        for seed in 0..g.seeds {
            let report = grad_check_with(variant, dims, g.options, seed, g.tolerance)?;
            for p in report.per_param {
                match rows[first..].iter_mut().find(|r| r.param == p.name) {
                    Some(r) if p.max_rel_error > r.max_rel_error => {
                        r.max_rel_error = p.max_rel_error;
                        r.worst_seed = seed;
                    }
                    Some(_) => {}
                    None => rows.push(GradcheckRow {
                        variant,
                        param: p.name,
                        max_rel_error: p.max_rel_error,
                        worst_seed: seed,
                    }),
                }
            }
        }
    }
    let mut csv = String::from("variant,param,max_rel_error,worst_seed,passed\n");
    writeln!(
        out,
        "gradient check: {} seeds, d_x {}, d_h {}, T {}, tolerance {:e}",
        g.seeds, g.input_dim, g.hidden_dim, g.steps, g.tolerance
    )?;
    for r in &rows {
        let ok = r.max_rel_error <= g.tolerance;
        csv += &format!("{},{},{:?},{},{}\n", r.variant, r.param, r.max_rel_error, r.worst_seed, ok);
        writeln!(
            out,
            "  {:<18} {:<12} {:>10.3e}  seed {:<3} {}",
            r.variant.name(),
            r.param,
            r.max_rel_error,
            r.worst_seed,
            if ok { "ok" } else { "FAIL" }
        )?;
    }
    writeln!(out, "elapsed {:.2}s", start.elapsed().as_secs_f64())?;
    let file = cfg.out.join(GRADCHECK_FILE);
    write_atomic(&file, csv.as_bytes())?;
    write_manifest(cfg, "gradcheck", &[file], &[])?;
    let failures = rows.iter().filter(|r| r.max_rel_error > g.tolerance).count();
    if let Some(worst) = rows.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)) {
        if failures > 0 {
            writeln!(out, "{failures} parameter(s) above tolerance")?;
            return Err(CliError::Failed(format!(
                "gradient check failed: worst {} {} relative error {:e} (seed {}) exceeds {:e}",
                worst.variant, worst.param, worst.max_rel_error, worst.worst_seed, g.tolerance
            )));
        }
    }
    writeln!(out, "all parameters within tolerance")?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairResult {
    pub a: usize,
    pub b: usize,
    /// `None` when either trace failed to converge.
    pub divergence: Option<f64>,
}

pub fn probe(cfg: &ExperimentConfig, model: Option<&Path>, out: &mut dyn Write) -> CliResult<Vec<PairResult>> {
    prepare(cfg)?;
    let stem = cfg.dataset_stem();
    let dataset = load_dataset(&stem)?;
    let path = model.map_or_else(|| cfg.out.join(MODEL_FILE), Path::to_path_buf);
    let clf = load_model(&path, None, &dataset)?;
    let p = &cfg.probe;
    let pairs = select_pairs(&dataset.samples, &dataset.manifest.mode_ids(), p.selector, p.pairs)
        .map_err(|e| CliError::Failed(format!("{e} ({})", p.selector)))?;
    let single = matches!(p.selector, Selector::Sample(_));
    let mut files = Vec::new();
    let mut probe_csv = String::from("pair,side,index,mode,class,tau,convergence_time\n");
    let mut div_csv = String::from("pair,index_a,index_b,mode_a,mode_b,divergence\n");
    let mut results = Vec::new();
    for (n, &(a, b)) in pairs.iter().enumerate() {
        let sides: &[(&str, usize)] = if single { &[("a", a)] } else { &[("a", a), ("b", b)] };
        let mut reports = Vec::new();
        for &(side, i) in sides {
            let s = &dataset.samples[i];
            let pr = probe_sample(&clf, s, p.tau, p.n_static, p.epsilon)?;
            let stem = cfg.out.join(format!("probe-{n}-{side}"));
            let title = format!(
                "{} sample {i}: class {}, mode {}, frame {} x {}",
                clf.variant(),
                s.label,
                s.mode_id,
                pr.trace.tau,
                p.n_static
            );
            let (c, v) = export_figure(&pr.trace, p.first_k, &stem, &title)?;
            files.extend([c, v]);
            let ct = pr.report.convergence_time.map_or_else(String::new, |t| t.to_string());
            probe_csv += &format!("{n},{side},{i},{},{},{},{ct}\n", s.mode_id, s.label, pr.trace.tau);
            writeln!(
                out,
                "pair {n} {side}: sample {i} class {} mode {} tau {} convergence {}",
                s.label,
                s.mode_id,
                pr.trace.tau,
                if ct.is_empty() { "none".to_string() } else { format!("step {ct}") }
            )?;
            reports.push(pr.report);
        }
        if !single {
            let d = pair_divergence(&reports[0], &reports[1]).ok();
            let (ma, mb) = (dataset.samples[a].mode_id, dataset.samples[b].mode_id);
            div_csv += &format!("{n},{a},{b},{ma},{mb},{}\n", d.map_or_else(String::new, |d| format!("{d:?}")));
            match d {
                Some(d) => writeln!(out, "pair {n} divergence {d:.6}")?,
                None => writeln!(out, "pair {n} divergence undefined (a trace did not converge)")?,
            }
            results.push(PairResult { a, b, divergence: d });
        } else {
            results.push(PairResult { a, b, divergence: None });
        }
    }
    let summary = cfg.out.join(PROBE_FILE);
    write_atomic(&summary, probe_csv.as_bytes())?;
    files.push(summary);
    if !single {
        let ds: Vec<f64> = results.iter().filter_map(|r| r.divergence).collect();
        if !ds.is_empty() {
            writeln!(
                out,
                "mean divergence {:.6} over {} of {} pairs",
                ds.iter().sum::<f64>() / ds.len() as f64,
                ds.len(),
                results.len()
            )?;
        }
        let div = cfg.out.join(DIVERGENCE_FILE);
        write_atomic(&div, div_csv.as_bytes())?;
        files.push(div);
    }
    write_manifest(cfg, "probe", &files, &[])?;
    Ok(results)
}
