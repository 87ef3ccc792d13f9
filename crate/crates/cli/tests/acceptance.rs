//! One pass/fail line per acceptance criterion. Criteria listed in
//! `KNOWN_RED` are measured and reported but do not fail the run; any other
//! failure exits nonzero.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use mvlstm::archive;
use mvlstm::cells::*;
use mvlstm::data::{decode_frames, encode_frames, generate_dataset, load_dataset, save_dataset, GeneratorConfig};
use mvlstm::model::{Classifier, TauPolicy, TrainConfig};
use mvlstm::probe::{export_figure, pair_divergence};
use mvlstm::{CellOptions, CellParams, Matrix, ParamSet, Variant, Vector};
use mvlstm_cli::experiment::{probe_sample, run_benchmark, select_pairs, BenchmarkConfig, Summary, VariantRuns};
use mvlstm_cli::Selector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIN: &str = env!("CARGO_BIN_EXE_mvlstm");
const KNOWN_RED: [u32; 3] = [5, 6, 7];

type Outcome = Result<String, String>;

fn mvlstm(args: &[&str], out: &Path) -> Result<String, String> {
    let o = Command::new(BIN)
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| format!("spawn: {e}"))?;
    let stdout = String::from_utf8_lossy(&o.stdout).into_owned();
    if !o.status.success() {
        return Err(format!("{args:?} exited {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr).trim()));
    }
    Ok(stdout)
}

fn smoke_config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml").display().to_string()
}

fn random_params(variant: Variant, options: CellOptions, d_x: usize, d_h: usize, seed: u64) -> ModeVarParams {
    let mut p = init_params_with(d_x, d_h, variant, options, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let flat: Vec<f64> = (0..p.num_scalars()).map(|_| rng.random_range(-1.0..=1.0)).collect();
    p.set_flat(&flat);
    if options.diagonal_peephole {
        mask_peepholes(&mut p);
    }
    match p {
        CellParams::ModeVar(m) => m,
        CellParams::Lstm(_) => unreachable!(),
    }
}

fn random_frames(rng: &mut ChaCha8Rng, d_x: usize, steps: usize) -> Vec<Vector> {
    (0..steps)
        .map(|_| Vector::from_vec((0..d_x).map(|_| rng.random_range(-2.0..=2.0)).collect()))
        .collect()
}

fn random_options(rng: &mut ChaCha8Rng) -> CellOptions {
    CellOptions {
        diagonal_peephole: rng.random(),
        bias_cell_dynamics_gates: rng.random(),
        untied_crosscell: rng.random(),
    }
}

fn zeroed(m: &Matrix) -> Matrix {
    Matrix::zeros(m.rows(), m.cols())
}

fn run_mode_var(p: &ModeVarParams, frames: &[Vector], statics: &[Vector]) -> Vec<ModeVarState> {
    let mut s = ModeVarState::zeros(p.base.hidden_dim);
    let mut out = Vec::with_capacity(frames.len());
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

fn criterion_1() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("gradcheck.toml");
    fs::write(
        &cfg,
        "[gradcheck]\nseeds = 20\ntolerance = 1e-5\ninput_dim = 8\nhidden_dim = 8\nsteps = 6\n",
    )
    .map_err(|e| e.to_string())?;
    let start = Instant::now();
    let text = mvlstm(&["gradcheck", "--config", cfg.to_str().unwrap()], dir.path())?;
    let elapsed = start.elapsed();
    let csv = fs::read_to_string(dir.path().join("gradcheck.csv")).map_err(|e| e.to_string())?;
    let worst = csv
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(2)?.parse::<f64>().ok())
        .fold(0.0, f64::max);
    let variants = ["lstm", "modevar", "modevar_crosscell"]
        .iter()
        .filter(|v| csv.lines().any(|l| l.starts_with(&format!("{v},"))))
        .count();
    let detail = format!("3 variants, 20 seeds, D_x=D_h=8, T=6, worst relative error {worst:.2e}, {elapsed:.1?}");
    if text.contains("all parameters within tolerance") && variants == 3 && elapsed < Duration::from_secs(60) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut cross_worst, mut lstm_worst) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let (d_x, d_h, steps) = (rng.random_range(1..=6), rng.random_range(1..=8), rng.random_range(1..=12));
        let mut cross = random_params(Variant::ModevarCrosscell, random_options(&mut rng), d_x, d_h, rng.random());
        let c = cross.cross.as_mut().unwrap();
        c.w_chat_i = zeroed(&c.w_chat_i);
        c.w_chat_f = zeroed(&c.w_chat_f);
        match &mut c.untied {
            Some(u) => {
                u.w_c_ihat = zeroed(&u.w_c_ihat);
                u.w_c_fhat = zeroed(&u.w_c_fhat);
            }
            None => {
                cross.base.w_ci = zeroed(&cross.base.w_ci);
                cross.base.w_cf = zeroed(&cross.base.w_cf);
            }
        }
        let mut plain = cross.clone();
        plain.cross = None;
        let frames = random_frames(&mut rng, d_x, steps);
        let statics = random_frames(&mut rng, d_x, steps);
        for (a, b) in run_mode_var(&cross, &frames, &statics).iter().zip(run_mode_var(&plain, &frames, &statics)) {
            cross_worst = cross_worst.max(a.max_abs_diff(&b));
        }
    }
    for _ in 0..100 {
        let (d_x, d_h, steps) = (rng.random_range(1..=6), rng.random_range(1..=8), rng.random_range(1..=12));
        let mut m = random_params(Variant::Modevar, random_options(&mut rng), d_x, d_h, rng.random());
        m.bias = BiasPath::zeros(d_x, d_h);
        m.w_chat_o = zeroed(&m.w_chat_o);
        m.w_hhat_o = zeroed(&m.w_hhat_o);
        let frames = random_frames(&mut rng, d_x, steps);
        let statics = random_frames(&mut rng, d_x, steps);
        let mut s = CellState::zeros(d_h);
        for (x, mv) in frames.iter().zip(run_mode_var(&m, &frames, &statics)) {
            s = lstm_step(&m.base, &s, x).unwrap().0;
            lstm_worst = lstm_worst.max(s.h.sub(&mv.h).unwrap().norm_inf()).max(s.c.sub(&mv.c).unwrap().norm_inf());
        }
    }
    let detail = format!("100+100 instances, crosscell->modevar max {cross_worst:.1e}, modevar->lstm max {lstm_worst:.1e}");
    if cross_worst <= 1e-12 && lstm_worst <= 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut bitwise, mut worst, mut total) = (0usize, 0.0f64, 0usize);
    for n in 0..100 {
        let variant = if n % 2 == 0 { Variant::Modevar } else { Variant::ModevarCrosscell };
        let opts = CellOptions {
            untied_crosscell: false,
            ..random_options(&mut rng)
        };
        let (d_x, d_h) = (rng.random_range(1..=6), rng.random_range(1..=8));
        let mut m = random_params(variant, opts, d_x, d_h, rng.random());
        m.bias = BiasPath::tied_to(&m.base);
        if let Some(c) = &mut m.cross {
            c.w_chat_i = m.base.w_ci.clone();
            c.w_chat_f = m.base.w_cf.clone();
        }
        let frames = random_frames(&mut rng, d_x, 50);
        for s in run_mode_var(&m, &frames, &frames) {
            total += 1;
            if s.c_hat == s.c && s.h_hat == s.h {
                bitwise += 1;
            }
            worst = worst.max(s.c_hat.sub(&s.c).unwrap().norm_inf()).max(s.h_hat.sub(&s.h).unwrap().norm_inf());
        }
    }
    let detail = format!("100 instances x T=50, {bitwise}/{total} steps bitwise equal, max difference {worst:.1e}");
    if worst <= 1e-14 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_4() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = smoke_config();
    let start = Instant::now();
    mvlstm(&["--config", &cfg, "gen-data"], dir.path())?;
    let text = mvlstm(&["--config", &cfg, "train"], dir.path())?;
    let elapsed = start.elapsed();
    let clf = archive::load(&dir.path().join("model.mvp")).map_err(|e| e.to_string())?;
    let samples = load_dataset(&dir.path().join("dataset")).map_err(|e| e.to_string())?.samples.len();
    let reached = text.contains("final train accuracy 1\n");
    let detail = format!("{} on {samples} samples, 4 classes, 200 epochs, {elapsed:.1?}", clf.variant());
    if reached && samples == 20 && clf.variant() == Variant::ModevarCrosscell && elapsed < Duration::from_secs(120) {
        Ok(format!("100% train accuracy, {detail}"))
    } else {
        Err(format!("accuracy 1 reached: {reached}, {detail}"))
    }
}

fn fmt_summary(s: Summary) -> String {
    format!("{:.4}±{:.4}", s.mean, s.se)
}

fn find(runs: &[VariantRuns], v: Variant) -> &VariantRuns {
    runs.iter().find(|r| r.variant == v).unwrap()
}

fn criterion_5(runs: &[VariantRuns], elapsed: Duration) -> Outcome {
    let lstm = find(runs, Variant::Lstm).gap();
    let cross = find(runs, Variant::ModevarCrosscell).gap();
    let modevar = find(runs, Variant::Modevar).gap();
    let se = lstm.se.max(cross.se);
    let detail = format!(
        "gap lstm {} modevar {} crosscell {}, difference {:.4} vs SE {:.4}, {elapsed:.0?}",
        fmt_summary(lstm),
        fmt_summary(modevar),
        fmt_summary(cross),
        lstm.mean - cross.mean,
        se
    );
    if cross.mean < lstm.mean && lstm.mean - cross.mean > se && elapsed < Duration::from_secs(900) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_6(runs: &[VariantRuns], data: &GeneratorConfig) -> Outcome {
    let dataset = generate_dataset(data, 0).map_err(|e| e.to_string())?;
    let modes = dataset.manifest.mode_ids();
    let seed0 = |v: Variant| -> &Classifier { &find(runs, v).runs.iter().find(|r| r.seed == 0).unwrap().classifier };
    let (lstm, cross) = (seed0(Variant::Lstm), seed0(Variant::ModevarCrosscell));
    let diff = select_pairs(&dataset.samples, &modes, Selector::SameClassDiffMode, 48).map_err(|e| e.to_string())?;
    let same = select_pairs(&dataset.samples, &modes, Selector::SameClassSameMode, 48).map_err(|e| e.to_string())?;

    let probe = |clf: &Classifier, i: usize| probe_sample(clf, &dataset.samples[i], TauPolicy::FirstFrame, 30, 1e-4).unwrap();
    let divergences = |clf: &Classifier, pairs: &[(usize, usize)]| -> (usize, usize, Vec<Option<f64>>) {
        let mut converged = 0;
        let ds = pairs
            .iter()
            .map(|&(a, b)| {
                let (pa, pb) = (probe(clf, a), probe(clf, b));
                converged += pa.report.convergence_time.is_some() as usize + pb.report.convergence_time.is_some() as usize;
                pair_divergence(&pa.report, &pb.report).ok()
            })
            .collect();
        (converged, 2 * pairs.len(), ds)
    };
    let (c_diff, n_diff, lstm_diff) = divergences(lstm, &diff);
    let (c_same, n_same, lstm_same) = divergences(lstm, &same);
    let (_, _, cross_diff) = divergences(cross, &diff);
    let frac = (c_diff + c_same) as f64 / (n_diff + n_same) as f64;
    let mean = |ds: &[Option<f64>]| -> Option<f64> {
        let v: Vec<f64> = ds.iter().flatten().copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let both: Vec<(f64, f64)> = lstm_diff.iter().zip(&cross_diff).filter_map(|(a, b)| Some(((*a)?, (*b)?))).collect();
    let show = |m: Option<f64>| m.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"));
    let (m_diff, m_same) = (mean(&lstm_diff), mean(&lstm_same));
    let cross_vs_lstm = (!both.is_empty()).then(|| {
        let n = both.len() as f64;
        (both.iter().map(|b| b.1).sum::<f64>() / n, both.iter().map(|b| b.0).sum::<f64>() / n)
    });

    // artifact layout: first 15 dimensions by 30 steps
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = probe(lstm, diff[0].0);
    let (csv, svg) = export_figure(&p.trace, 15, &dir.path().join("fig"), "probe").map_err(|e| e.to_string())?;
    let csv = fs::read_to_string(csv).map_err(|e| e.to_string())?;
    let rows = csv.lines().count() - 1;
    let cols = csv.lines().next().map_or(0, |l| l.split(',').count() - 1);
    let svg_ok = fs::read_to_string(svg).map_err(|e| e.to_string())?.starts_with("<svg");

    let detail = format!(
        "lstm converged {}/{} probes ({:.0}%), divergence diff-mode {} same-mode {}, crosscell vs lstm on diff-mode pairs {}, artifacts {rows}x{cols} csv + svg",
        c_diff + c_same,
        n_diff + n_same,
        100.0 * frac,
        show(m_diff),
        show(m_same),
        cross_vs_lstm.map_or_else(|| "undefined".to_string(), |(c, l)| format!("{c:.4} vs {l:.4}"))
    );
    let ordered = matches!((m_diff, m_same), (Some(d), Some(s)) if d > s);
    let smaller = matches!(cross_vs_lstm, Some((c, l)) if c < l);
    if frac >= 0.9 && ordered && smaller && rows == 15 && cols == 30 && svg_ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_7(lstm: &VariantRuns, random: &[VariantRuns]) -> Outcome {
    let l = lstm.unseen();
    let m = find(random, Variant::Modevar).unseen();
    let c = find(random, Variant::ModevarCrosscell).unseen();
    let detail = format!(
        "unseen accuracy under random tau: lstm {} modevar {} crosscell {}",
        fmt_summary(l),
        fmt_summary(m),
        fmt_summary(c)
    );
    let at_least = |a: Summary, b: Summary| a.mean + a.se.max(b.se) >= b.mean;
    if at_least(c, m) && at_least(m, l) && at_least(c, l) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut skip = Vec::new();
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let bytes = fs::read(&path).unwrap();
        if name.starts_with("run-") {
            let m: toml::Value = toml::from_str(&String::from_utf8_lossy(&bytes)).unwrap();
            if let Some(list) = m.get("nondeterministic").and_then(|v| v.as_array()) {
                skip.extend(list.iter().filter_map(|v| v.as_str().map(str::to_string)));
            }
        }
        files.insert(name, bytes);
    }
    files.retain(|name, _| !skip.contains(name));
    files
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path();
    let cfg = smoke_config();
    let base = ["--config", cfg.as_str(), "--modes", "additive:2", "--epochs", "5"];
    let commands: [&[&str]; 6] = [
        &["gen-data"],
        &["train"],
        &["eval"],
        &["eval", "--on-train"],
        &["gradcheck", "--seeds", "2"],
        &["probe", "--pair", "same-class-diff-mode", "--pairs", "4"],
    ];
    let mut checked = 0;
    for cmd in commands {
        let args: Vec<&str> = base.iter().chain(cmd).copied().collect();
        mvlstm(&args, out)?;
        let first = snapshot(out);
        mvlstm(&args, out)?;
        let second = snapshot(out);
        if first != second {
            let differing: Vec<&String> = first.keys().filter(|k| first.get(*k) != second.get(*k)).collect();
            return Err(format!("{cmd:?} rerun changed {differing:?}"));
        }
        checked = first.len();
    }
    Ok(format!("6 commands rerun in place, {checked} files byte-identical (timing excluded)"))
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut checks = Vec::new();
    for (n, variant) in [Variant::Lstm, Variant::Modevar, Variant::ModevarCrosscell].into_iter().enumerate() {
        let cfg = mvlstm::model::ModelConfig {
            variant,
            hidden_dim: 6,
            ..Default::default()
        };
        let clf = Classifier::init(&cfg, 5, 3, TauPolicy::RandomPerSequence, n as u64).map_err(|e| e.to_string())?;
        let bytes = archive::encode(&clf);
        let back = archive::decode(&bytes).map_err(|e| e.to_string())?;
        let bits = |c: &Classifier| c.params.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if bits(&back) != bits(&clf) || back != clf {
            return Err(format!("{variant} archive round trip differs"));
        }
        let path = dir.path().join(format!("{variant}.mvp"));
        archive::save(&clf, &path).map_err(|e| e.to_string())?;
        if archive::load(&path).map_err(|e| e.to_string())? != clf {
            return Err(format!("{variant} archive file round trip differs"));
        }
        for i in (0..bytes.len()).step_by(7) {
            let mut bad = bytes.clone();
            bad[i] ^= 0x04;
            if archive::decode(&bad).is_ok() {
                return Err(format!("{variant} archive with byte {i} flipped was accepted"));
            }
        }
        if archive::decode(&bytes[..bytes.len() - 1]).is_ok() {
            return Err(format!("truncated {variant} archive was accepted"));
        }
    }
    checks.push("3 archives bit-exact, flips and truncation rejected".to_string());

    let data = GeneratorConfig {
        samples_per_cell: 3,
        modes: "additive:1,gain:1,orthogonal:1".parse().unwrap(),
        ..Default::default()
    };
    let d = generate_dataset(&data, 9).map_err(|e| e.to_string())?;
    let stem = dir.path().join("set");
    save_dataset(&d, &stem).map_err(|e| e.to_string())?;
    if load_dataset(&stem).map_err(|e| e.to_string())? != d {
        return Err("dataset round trip differs".into());
    }
    let frames = encode_frames(&d.samples);
    let mut rejected = 0;
    for i in (0..frames.len()).step_by(101) {
        let mut bad = frames.clone();
        bad[i] ^= 0x20;
        match decode_frames(&bad) {
            Err(e) if !e.to_string().is_empty() => rejected += 1,
            _ => return Err(format!("dataset with byte {i} flipped was accepted")),
        }
    }
    checks.push(format!("dataset bit-exact, {rejected} flipped copies rejected"));
    Ok(checks.join("; "))
}

fn main() -> ExitCode {
    let mut failed = Vec::new();
    let mut report = |n: u32, outcome: Outcome| {
        let (status, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        let note = if outcome.is_err() && KNOWN_RED.contains(&n) { " [known red]" } else { "" };
        println!("criterion {n}: {status}{note}: {detail}");
        if outcome.is_err() && !KNOWN_RED.contains(&n) {
            failed.push(n);
        }
    };

    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4());

    let bench = BenchmarkConfig::default();
    let start = Instant::now();
    let runs = run_benchmark(&bench, &[Variant::Lstm, Variant::Modevar, Variant::ModevarCrosscell]);
    let elapsed = start.elapsed();
    match &runs {
        Ok(runs) => {
            report(5, criterion_5(runs, elapsed));
            report(6, criterion_6(runs, &bench.data));
            let random = BenchmarkConfig {
                train: TrainConfig {
                    tau_policy: TauPolicy::RandomPerSequence,
                    ..bench.train
                },
                ..bench.clone()
            };
            // the plain LSTM never reads a static frame, so its runs carry over
            let outcome = run_benchmark(&random, &[Variant::Modevar, Variant::ModevarCrosscell])
                .map_err(|e| e.to_string())
                .and_then(|r| criterion_7(find(runs, Variant::Lstm), &r));
            report(7, outcome);
        }
        Err(e) => {
            for n in 5..=7 {
                report(n, Err(format!("benchmark failed: {e}")));
            }
        }
    }

    report(8, criterion_8());
    report(9, criterion_9());

    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failing criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
