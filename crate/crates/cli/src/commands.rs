use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use fxq_core::data::{synthetic, Dataset, SyntheticSpec};
use fxq_core::engine::{compile, equivalence_report, infer, quantize_images};
use fxq_core::graph::{grid_search_fl, private_fl_equiv, zoo, Coordinate, ModelGraph, SearchSpace};
use fxq_core::io::{
    model_from_bytes, model_to_bytes, program_from_bytes, program_to_bytes, tensor_from_bytes,
    tensor_to_bytes,
};
use fxq_core::stats::{sweep, threshold_fit, threshold_sigmas, write_thresholds_csv, SweepConfig};
use fxq_core::train::{
    calibrate, evaluate, tiny_finetune, train, write_log, EvalMode, FinetuneConfig, Schedule,
    TrainConfig, TrainMode,
};
use fxq_core::Signedness;

use crate::output::OutDir;
use crate::{
    Cli, CliError, Command, DataArgs, FinetuneArgs, GridSearchArgs, InferArgs, ModeArg, OptimArgs,
    QuantizeArgs, ScheduleArg, SweepArgs, TrainArgs, VerifyArgs,
};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: &Cli) -> Result<()> {
    let out = OutDir::new(&cli.out).map_err(CliError::Usage)?;
    match &cli.command {
        Command::StatsSweep(a) => stats_sweep(a, cli.seed, &out),
        Command::StatsThresholds(a) => stats_thresholds(a, cli.seed, &out),
        Command::Quantize(a) => quantize(a, &out),
        Command::GridSearch(a) => grid_search(a, &out),
        Command::Train(a) => train_cmd(a, cli.seed, &out),
        Command::Finetune(a) => finetune(a, cli.seed, &out),
        Command::Infer(a) => infer_cmd(a, &out),
        Command::Verify(a) => verify(a, cli.seed, &out),
    }
}

fn suffix(signed: bool) -> &'static str {
    if signed {
        "signed"
    } else {
        "unsigned"
    }
}

fn sweep_config(a: &SweepArgs, seed: u64) -> Result<SweepConfig> {
    let sigma_max = a.sigma_max.unwrap_or(if a.signed { 40.0 } else { 100.0 });
    if !(a.sigma_min > 0.0 && sigma_max > a.sigma_min) || a.points < 2 {
        return Err(CliError::usage(anyhow!(
            "need 0 < --sigma-min < --sigma-max and --points >= 2"
        )));
    }
    let sign = if a.signed {
        Signedness::Signed
    } else {
        Signedness::Unsigned
    };
    let cfg = SweepConfig {
        n_samples: a.samples,
        word_length: a.word_length,
        seed,
        ..SweepConfig::log_spaced(a.sigma_min, sigma_max, a.points, sign)
    };
    cfg.validate().map_err(CliError::usage)?;
    Ok(cfg)
}

fn stats_sweep(a: &SweepArgs, seed: u64, out: &OutDir) -> Result<()> {
    let table = sweep(&sweep_config(a, seed)?).map_err(CliError::failed)?;
    let s = suffix(a.signed);
    let grid = out
        .write_with(&format!("sweep_{s}.csv"), |w| table.write_grid_csv(w))
        .map_err(CliError::failed)?;
    let argmin = out
        .write_with(&format!("argmin_{s}.csv"), |w| table.write_argmin_csv(w))
        .map_err(CliError::failed)?;
    let worst = table.min_error.iter().cloned().fold(0.0, f64::max);
    println!("wrote {} and {}", grid.display(), argmin.display());
    println!("largest min-over-FL relative error: {worst:.6}");
    Ok(())
}

fn stats_thresholds(a: &SweepArgs, seed: u64, out: &OutDir) -> Result<()> {
    let table = sweep(&sweep_config(a, seed)?).map_err(CliError::failed)?;
    let th = threshold_sigmas(&table);
    let path = out
        .write_with(&format!("thresholds_{}.csv", suffix(a.signed)), |w| {
            write_thresholds_csv(&th, w)
        })
        .map_err(CliError::failed)?;
    println!("wrote {}", path.display());
    match threshold_fit(&th) {
        Some((slope, icpt)) => println!("log2(sigma_threshold) = {slope:.4} * FL + {icpt:.4}"),
        None => println!("fewer than two thresholds inside the sigma range; no fit"),
    }
    Ok(())
}

fn dataset(d: &DataArgs) -> Result<(Dataset, Dataset)> {
    if !(d.noise >= 0.0 && d.noise.is_finite()) {
        return Err(CliError::usage(anyhow!("--noise must be non-negative")));
    }
    Ok(synthetic(&SyntheticSpec {
        train: d.train_size,
        test: d.test_size,
        seed: d.data_seed,
        noise: d.noise,
    }))
}

fn load_model(path: &Path) -> Result<ModelGraph> {
    let bytes = fs::read(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(CliError::Usage)?;
    model_from_bytes(&bytes)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(CliError::Usage)
}

fn save_model(g: &ModelGraph, name: &str, out: &OutDir) -> Result<()> {
    let path = out
        .write(name, &model_to_bytes(g))
        .map_err(CliError::failed)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn parse_space(s: &str) -> Result<SearchSpace> {
    let bad = || {
        CliError::usage(anyhow!(
            "bad --fl-space `{s}`: expected `lo-hi` or `a,b,c` with values in 0..=31"
        ))
    };
    let num = |t: &str| t.trim().parse::<u8>().ok().filter(|&v| v <= 31);
    let fls: Vec<u8> = if let Some((lo, hi)) = s.split_once('-') {
        let (lo, hi) = (num(lo).ok_or_else(bad)?, num(hi).ok_or_else(bad)?);
        if lo > hi {
            return Err(bad());
        }
        (lo..=hi).collect()
    } else {
        s.split(',')
            .map(|t| num(t).ok_or_else(bad))
            .collect::<Result<_>>()?
    };
    SearchSpace::new(fls).map_err(CliError::usage)
}

fn apply_optim(mut c: TrainConfig, o: &OptimArgs) -> Result<TrainConfig> {
    if let Some(v) = o.steps {
        c.steps = v;
    }
    if let Some(v) = o.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = o.lr {
        c.lr = v;
    }
    if let Some(v) = o.schedule {
        c.schedule = match v {
            ScheduleArg::Constant => Schedule::Constant,
            ScheduleArg::Linear => Schedule::Linear,
        };
    }
    if let Some(v) = o.momentum {
        c.momentum = v;
    }
    if let Some(v) = o.weight_decay {
        c.weight_decay = v;
    }
    if let Some(v) = o.fl_momentum {
        c.fl_momentum = v;
    }
    c.nesterov &= !o.no_nesterov;
    c.decay_bn &= !o.no_decay_bn;
    c.decay_depthwise &= !o.no_decay_depthwise;
    c.decay_alpha &= !o.no_decay_alpha;
    c.validate().map_err(CliError::usage)?;
    Ok(c)
}

fn train_cmd(a: &TrainArgs, seed: u64, out: &OutDir) -> Result<()> {
    let mut g = zoo::by_name(&a.arch, seed).map_err(CliError::usage)?;
    let cfg = apply_optim(TrainConfig::toy(seed), &a.optim)?;
    let (tr, te) = dataset(&a.data)?;
    let (mode, eval) = match a.mode {
        ModeArg::Float => (TrainMode::Float, EvalMode::Float),
        ModeArg::Qat => (TrainMode::Qat, EvalMode::Quantized),
    };
    let report = train(&mut g, &tr, &cfg, mode).map_err(CliError::failed)?;
    out.write_with("train_log.csv", |w| write_log(&report.log, w))
        .map_err(CliError::failed)?;
    save_model(&g, "model.fxqm", out)?;
    let acc = evaluate(&g, &te, eval).map_err(CliError::failed)?;
    println!("test accuracy: {acc:.4}");
    Ok(())
}

fn finetune(a: &FinetuneArgs, seed: u64, out: &OutDir) -> Result<()> {
    let mut g = load_model(&a.model)?;
    if g.frozen {
        return Err(CliError::usage(anyhow!(
            "{} is already quantized; pass a full-precision model",
            a.model.display()
        )));
    }
    let (tr, te) = dataset(&a.data)?;
    let parent = evaluate(&g, &te, EvalMode::Float).map_err(CliError::failed)?;
    let cfg = FinetuneConfig {
        train: apply_optim(TrainConfig::tiny_finetune(seed), &a.optim)?,
        space: parse_space(&a.fl_space)?,
        calib_size: a.calib_size,
        normalize_input: a.normalize_input,
    };
    let rep = tiny_finetune(&mut g, &tr, &cfg).map_err(|e| match e {
        fxq_core::train::TrainError::Config(_) => CliError::usage(e),
        e => CliError::failed(e),
    })?;
    out.write_with("finetune_log.csv", |w| write_log(&rep.train.log, w))
        .map_err(CliError::failed)?;
    save_model(&g, "finetuned.fxqm", out)?;
    let acc = evaluate(&g, &te, EvalMode::Quantized).map_err(CliError::failed)?;
    println!("float parent accuracy: {parent:.4}");
    println!("quantized accuracy: {acc:.4}");
    Ok(())
}

fn coordinate_row(g: &ModelGraph, c: Coordinate) -> String {
    match c {
        Coordinate::Input => "input,".to_string(),
        Coordinate::Activation(id) => format!("activation,{}", g.name(id)),
        Coordinate::Weight(id) => format!("weight,{}", g.name(id)),
    }
}

fn grid_search(a: &GridSearchArgs, out: &OutDir) -> Result<()> {
    let mut g = load_model(&a.model)?;
    let space = parse_space(&a.fl_space)?;
    let (tr, te) = dataset(&a.data)?;
    let (x, y) = tr.head(a.calib_size.max(1));
    g.unfreeze();
    calibrate(&mut g, &x, false).map_err(CliError::failed)?;
    let rep = grid_search_fl(&mut g, &x, &y, &space).map_err(CliError::failed)?;
    let mut csv = String::from("kind,layer,fl\n");
    for &(c, fl) in &rep.choices {
        let _ = writeln!(csv, "{},{fl}", coordinate_row(&g, c));
    }
    out.write("grid_search.csv", csv.as_bytes())
        .map_err(CliError::failed)?;
    save_model(&g, "searched.fxqm", out)?;
    let acc = evaluate(&g, &te, EvalMode::Quantized).map_err(CliError::failed)?;
    println!(
        "calibration loss {:.6} -> {:.6} after {} evaluations",
        rep.loss_before, rep.loss_after, rep.evaluations
    );
    println!("quantized accuracy: {acc:.4}");
    Ok(())
}

fn freeze_for_export(g: &mut ModelGraph, tr: &Dataset, calib: usize) -> Result<()> {
    if !g.frozen {
        let (x, _) = tr.head(calib.max(1));
        calibrate(g, &x, false).map_err(CliError::failed)?;
        g.freeze().map_err(CliError::failed)?;
    }
    Ok(())
}

fn quantize(a: &QuantizeArgs, out: &OutDir) -> Result<()> {
    let mut g = load_model(&a.model)?;
    let (tr, te) = dataset(&a.data)?;
    freeze_for_export(&mut g, &tr, a.calib_size)?;
    let p = compile(&g).map_err(CliError::failed)?;
    for w in &p.warnings {
        eprintln!("warning: {w}");
    }
    let path = out
        .write("program.fxqp", &program_to_bytes(&p))
        .map_err(CliError::failed)?;
    println!("wrote {}", path.display());
    let n = a.export_inputs.min(te.len());
    if n > 0 {
        let (x, y) = te.head(n);
        let t = quantize_images(&g, &x);
        let bytes = tensor_to_bytes(&t).map_err(CliError::failed)?;
        out.write("inputs.fxqt", &bytes).map_err(CliError::failed)?;
        let mut labels = String::from("sample,label\n");
        for (i, l) in y.iter().enumerate() {
            let _ = writeln!(labels, "{i},{l}");
        }
        out.write("labels.csv", labels.as_bytes())
            .map_err(CliError::failed)?;
        println!("exported {n} test inputs");
    }
    Ok(())
}

fn infer_cmd(a: &InferArgs, out: &OutDir) -> Result<()> {
    let read = |p: &Path| {
        fs::read(p)
            .with_context(|| format!("reading {}", p.display()))
            .map_err(CliError::Usage)
    };
    let p = program_from_bytes(&read(&a.program)?).map_err(CliError::usage)?;
    let t = tensor_from_bytes(&read(&a.input)?).map_err(CliError::usage)?;
    let r = infer(&p, &t).map_err(|e| match e {
        fxq_core::engine::EngineError::InputFormat { .. }
        | fxq_core::engine::EngineError::InputSize { .. } => CliError::usage(e),
        e => CliError::failed(e),
    })?;
    let classes = r.classes();
    let mut csv = String::from("sample,prediction");
    for k in 0..classes {
        let _ = write!(csv, ",logit_{k}");
    }
    csv.push('\n');
    let real = r.logits_real();
    for (i, pred) in r.predictions().iter().enumerate() {
        let _ = write!(csv, "{i},{pred}");
        for v in &real[i * classes..(i + 1) * classes] {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    let path = out
        .write("logits.csv", csv.as_bytes())
        .map_err(CliError::failed)?;
    println!("wrote {}", path.display());
    println!(
        "{} samples, {} multiplies, {} wider than 8x8, {} overflows",
        r.batch,
        r.trace.total_multiplies(),
        r.trace.wide_multiplies,
        r.trace.overflows
    );
    Ok(())
}

struct SuiteResult {
    name: &'static str,
    passed: bool,
    checks: u64,
    detail: String,
}

/// Exact equality of both sides of the private-FL rewrite over every FL pair
/// and a grid of inputs spanning both clipping edges.
fn private_fl_suite(alphas: &[f64], points: usize, wl: u8) -> SuiteResult {
    let mut checks = 0u64;
    let mut failures = 0u64;
    let mut first = String::new();
    let top = wl.min(8);
    for &alpha in alphas {
        for fl in 0..=top {
            for flm in 0..=top {
                let edge = alpha * 2f64.powi(flm as i32 - fl as i32);
                for i in 0..points {
                    let x = -0.25 * edge + 1.5 * edge * i as f64 / (points.max(2) - 1) as f64;
                    checks += 1;
                    match private_fl_equiv(x, alpha, fl, flm, wl) {
                        Ok(s) if s.lhs == s.rhs && s.lhs_mantissa == s.rhs_mantissa => {}
                        other => {
                            failures += 1;
                            if first.is_empty() {
                                first = format!(
                                    "x={x} alpha={alpha} fl={fl} fl_master={flm}: {other:?}"
                                );
                            }
                        }
                    }
                }
            }
        }
    }
    SuiteResult {
        name: "private_fl_identity",
        passed: failures == 0,
        checks,
        detail: if failures == 0 {
            "exact".into()
        } else {
            format!("{failures} mismatches; first {first}")
        },
    }
}

fn verify(a: &VerifyArgs, seed: u64, out: &OutDir) -> Result<()> {
    let (tr, te) = dataset(&a.data)?;
    let g = match &a.model {
        Some(p) => {
            let g = load_model(p)?;
            if !g.frozen {
                return Err(CliError::usage(anyhow!(
                    "{} is not frozen; run quantize or train --mode qat",
                    p.display()
                )));
            }
            g
        }
        None => {
            let mut g = zoo::by_name(&a.arch, seed).map_err(CliError::usage)?;
            let (x, _) = tr.head(512);
            calibrate(&mut g, &x, true).map_err(CliError::failed)?;
            g.freeze().map_err(CliError::failed)?;
            g
        }
    };
    let n = a.samples.min(te.len()).max(1);
    let (x, _) = te.head(n);
    let p = compile(&g).map_err(CliError::failed)?;
    let mut suites = Vec::new();

    let eq = equivalence_report(&g, &p, &x).map_err(CliError::failed)?;
    let bad: Vec<String> = eq
        .nodes
        .iter()
        .filter(|d| d.input != 0 || d.output != 0)
        .map(|d| format!("{}(in {} out {})", d.name, d.input, d.output))
        .collect();
    suites.push(SuiteResult {
        name: "fusion_equivalence",
        passed: bad.is_empty(),
        checks: eq.nodes.len() as u64 * n as u64,
        detail: if bad.is_empty() {
            "mantissa-exact at every node".into()
        } else {
            bad.join(" ")
        },
    });

    let mut alphas: Vec<f64> = g
        .sibling_groups()
        .iter()
        .filter_map(|gr| g.layer(gr[0]).ok().map(|l| l.clip.alpha()))
        .collect();
    alphas.push(1.0);
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    suites.push(private_fl_suite(&alphas, a.grid, g.word_length));

    let t = quantize_images(&g, &x);
    let (passed, checks, detail) = match infer(&p, &t) {
        Ok(r) => {
            let widths: Vec<String> = r
                .trace
                .multiplies
                .iter()
                .map(|((a, w), c)| format!("{a}x{w}:{c}"))
                .collect();
            (
                r.trace.wide_multiplies == 0 && r.trace.overflows == 0,
                r.trace.total_multiplies(),
                format!(
                    "wide {} overflows {} widths {}",
                    r.trace.wide_multiplies,
                    r.trace.overflows,
                    widths.join(" ")
                ),
            )
        }
        Err(e) => (false, 0, e.to_string().replace(',', ";")),
    };
    suites.push(SuiteResult {
        name: "integer_only",
        passed,
        checks,
        detail,
    });

    let mut csv = String::from("suite,passed,checks,detail\n");
    for s in &suites {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            s.name,
            s.passed,
            s.checks,
            s.detail.replace(',', ";")
        );
        println!(
            "{:<22} {}  ({} checks) {}",
            s.name,
            if s.passed { "PASS" } else { "FAIL" },
            s.checks,
            s.detail
        );
    }
    out.write("verify.csv", csv.as_bytes())
        .map_err(CliError::failed)?;
    if suites.iter().all(|s| s.passed) {
        Ok(())
    } else {
        Err(CliError::failed(anyhow!("verification failed")))
    }
}
