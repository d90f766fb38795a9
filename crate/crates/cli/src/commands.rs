use std::fs;
use std::path::Path;

use lptb::bench::{run_bench, scaling_sweep, BenchSpec};
use lptb::checkpoint::{load_checkpoint, save_checkpoint};
use lptb::experiments::{grid, run_ablation, Ablation};
use lptb::liquid::DecaySharingMode;
use lptb::pyramid::{detections_jsonl, Detector};
use lptb::synthetic::{self, Dataset, Split, Video};
use lptb::train::{detect, evaluate_model, gradcheck_model, train as train_model, EvalResult, TrainReport};
use lptb::{Precision, Real};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;

pub const CONFIG_ECHO: &str = "config.json";
pub const VERSION_STAMP: &str = "version.json";

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

/// Creates `out` (refusing a non-empty one without `force`) and writes the
/// resolved config and version stamp.
fn prepare_out(out: &Path, force: bool, cfg: &RunConfig) -> Result<(), CliError> {
    if out.exists() {
        if !out.is_dir() {
            return Err(CliError::Usage(format!("{} exists and is not a directory", out.display())));
        }
        let non_empty = fs::read_dir(out)?.next().is_some();
        if non_empty && !force {
            return Err(CliError::Usage(format!(
                "{} is not empty; pass --force to write into it",
                out.display()
            )));
        }
    }
    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("cannot create {}: {e}", out.display())))?;
    write(out, CONFIG_ECHO, &cfg.to_json())?;
    let stamp = json!({ "tool": "lptb", "version": env!("CARGO_PKG_VERSION") });
    write(out, VERSION_STAMP, &serde_json::to_string_pretty(&stamp).expect("json"))
}

fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Io(format!("dataset directory {} not found", dir.display())));
    }
    Ok(synthetic::load(dir)?)
}

pub fn generate(cfg: &RunConfig, out: &Path, force: bool) -> Result<(), CliError> {
    let dataset = synthetic::generate(&cfg.data)?;
    prepare_out(out, force, cfg)?;
    synthetic::save(&dataset, out)?;
    let test = dataset.split(Split::Test).count();
    eprintln!(
        "wrote {} videos ({} train, {test} test) to {}",
        dataset.videos.len(),
        dataset.videos.len() - test,
        out.display()
    );
    Ok(())
}

fn write_eval(out: &Path, result: &EvalResult) -> Result<(), CliError> {
    write(out, "eval.json", &result.to_json()?)?;
    write(out, "eval.csv", &result.to_csv())
}

fn print_eval(result: &EvalResult) {
    let parts: Vec<String> = result
        .map_per_threshold
        .iter()
        .map(|(t, m)| format!("{t}: {:.2}", m * 100.0))
        .collect();
    eprintln!("mAP {} | avg {:.2}", parts.join("  "), result.avg_map * 100.0);
}

fn train_typed<F: Real>(cfg: &RunConfig, dataset: &Dataset, out: &Path) -> Result<(), CliError> {
    if cfg.train.epochs == 0 {
        let model = Detector::<F>::new(cfg.model.clone(), cfg.train.seed)?;
        save_checkpoint(&model, &out.join("checkpoint"))?;
        eprintln!("epochs = 0: wrote the initialization checkpoint");
        return Ok(());
    }
    let outcome = train_model::<F>(dataset, &cfg.model, &cfg.train)?;
    save_checkpoint(&outcome.best, &out.join("checkpoint"))?;
    save_checkpoint(&outcome.model, &out.join("final_checkpoint"))?;
    let report: &TrainReport = &outcome.report;
    write(out, "train_log.csv", &report.to_csv())?;
    write(out, "train_report.json", &serde_json::to_string_pretty(report).expect("json"))?;
    eprintln!("loss {:.4} -> {:.4}", report.initial_loss, report.final_loss());
    if let Some(best) = &outcome.best_eval {
        write_eval(out, best)?;
        eprintln!("best epoch {}", report.best_epoch.unwrap_or(0));
        print_eval(best);
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path, force: bool) -> Result<(), CliError> {
    let dataset = load_dataset(data)?;
    if cfg.train.epochs > 0 {
        cfg.train.validate()?;
    }
    prepare_out(out, force, cfg)?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, &dataset, out),
        Precision::F64 => train_typed::<f64>(cfg, &dataset, out),
    }
}

fn eval_typed<F: Real>(cfg: &RunConfig, dataset: &Dataset, checkpoint: &Path, out: &Path, force: bool) -> Result<(), CliError> {
    let model = load_checkpoint::<F>(checkpoint)?;
    // The checkpoint defines the architecture; echo it.
    let cfg = RunConfig {
        model: model.cfg.clone(),
        ..cfg.clone()
    };
    let result = evaluate_model(&model, dataset, cfg.eval.backend, &cfg.train.decode, &cfg.eval.thresholds)?;
    prepare_out(out, force, &cfg)?;
    write_eval(out, &result)?;
    let videos: Vec<&Video> = dataset.split(Split::Test).collect();
    let dets = detect(&model, &videos, cfg.eval.backend, &cfg.train.decode)?;
    let lines: String = videos
        .iter()
        .zip(&dets)
        .map(|(v, d)| detections_jsonl(&v.id, d))
        .collect();
    write(out, "detections.jsonl", &lines)?;
    print_eval(&result);
    Ok(())
}

pub fn eval(cfg: &RunConfig, data: &Path, checkpoint: &Path, out: &Path, force: bool) -> Result<(), CliError> {
    let dataset = load_dataset(data)?;
    if !checkpoint.is_dir() {
        return Err(CliError::Io(format!("checkpoint directory {} not found", checkpoint.display())));
    }
    match cfg.precision {
        Precision::F32 => eval_typed::<f32>(cfg, &dataset, checkpoint, out, force),
        Precision::F64 => eval_typed::<f64>(cfg, &dataset, checkpoint, out, force),
    }
}

pub fn bench(cfg: &RunConfig, out: &Path, force: bool) -> Result<(), CliError> {
    cfg.bench.validate()?;
    prepare_out(out, force, cfg)?;
    let report = run_bench(&cfg.bench)?;
    write(out, "bench.csv", &report.to_csv())?;
    write(out, "bench.json", &serde_json::to_string_pretty(&report).expect("json"))?;
    eprint!("{}", report.to_csv());
    if report.unreliable {
        eprintln!("warning: timer resolution exceeds 1% of a median; timings unreliable");
    }
    Ok(())
}

pub fn scaling(cfg: &RunConfig, out: &Path, force: bool) -> Result<(), CliError> {
    let spec = BenchSpec {
        sequence_lengths: cfg.scaling.sequence_lengths.clone(),
        ..cfg.bench.clone()
    };
    spec.validate()?;
    cfg.scaling.backend.validate()?;
    prepare_out(out, force, cfg)?;
    let report = scaling_sweep(&spec, cfg.scaling.backend)?;
    write(out, "scaling.csv", &report.to_csv())?;
    write(out, "scaling.json", &serde_json::to_string_pretty(&report).expect("json"))?;
    eprint!("{}", report.to_csv());
    eprintln!("log-log slope {:.3}", report.slope);
    Ok(())
}

fn parse_ablations(which: &[String]) -> Result<Vec<Ablation>, CliError> {
    let mut out: Vec<Ablation> = Vec::new();
    for w in which {
        let picked = if w == "all" {
            Ablation::ALL.to_vec()
        } else {
            vec![w.parse().map_err(CliError::Usage)?]
        };
        for a in picked {
            if !out.contains(&a) {
                out.push(a);
            }
        }
    }
    Ok(out)
}

pub fn ablate(cfg: &RunConfig, which: &[String], data: &Path, out: &Path, force: bool) -> Result<(), CliError> {
    let ablations = parse_ablations(which)?;
    if cfg.precision != Precision::F32 {
        return Err(CliError::Usage("ablation grids train in f32".into()));
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    let dataset = load_dataset(data)?;
    prepare_out(out, force, cfg)?;
    let mut combined = String::new();
    let mut tables = Vec::new();
    for a in ablations {
        let workers = match cfg.ablation.workers {
            0 => grid(a, &cfg.model, &cfg.train).len(),
            n => n,
        };
        eprintln!("ablation {} ({workers} worker(s))", a.name());
        let table = run_ablation(a, &dataset, &cfg.model, &cfg.train, workers);
        for r in &table.rows {
            if let Some(e) = &r.error {
                eprintln!("  {} failed: {e}", r.setting);
            }
        }
        write(out, &format!("ablation_{}.csv", a.name()), &table.to_csv())?;
        write(out, &format!("ablation_{}.md", a.name()), &table.to_markdown())?;
        eprint!("{}", table.to_markdown());
        combined.push_str(&table.to_markdown());
        combined.push('\n');
        tables.push(table);
    }
    write(out, "ablations.md", &combined)?;
    write(out, "ablations.json", &serde_json::to_string_pretty(&tables).expect("json"))
}

pub fn gradcheck(cfg: &RunConfig, out: &Path, force: bool) -> Result<(), CliError> {
    cfg.gradcheck.validate()?;
    prepare_out(out, force, cfg)?;
    let mut csv = String::new();
    let mut failures = Vec::new();
    for sharing in [DecaySharingMode::BlockShared, DecaySharingMode::PerChannel] {
        let report = gradcheck_model(&cfg.gradcheck, sharing, None)?;
        let body = report.to_csv();
        if csv.is_empty() {
            csv.push_str(&body);
        } else {
            csv.extend(body.lines().skip(1).map(|l| format!("{l}\n")));
        }
        if report.decay_groups().is_empty() {
            failures.push(format!("{sharing:?}: no decay-rate parameter checked"));
        }
        for g in &report.groups {
            let mark = if g.passes(report.tolerance) { "ok  " } else { "FAIL" };
            eprintln!("{mark} {sharing:?} {:<28} rel {:.2e}", g.name, g.max_rel_error);
            if !g.passes(report.tolerance) {
                failures.push(format!("{sharing:?} {} ({:.2e})", g.name, g.max_rel_error));
            }
        }
    }
    write(out, "gradcheck.csv", &csv)?;
    if failures.is_empty() {
        eprintln!("all parameter groups within {:.0e}", cfg.gradcheck.tolerance);
        Ok(())
    } else {
        Err(CliError::Numerical(format!("gradient check failed: {}", failures.join(", "))))
    }
}
