//! `cil`: build synthetic datasets, run strategies over scenarios, compare
//! and inspect the results.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Parser, Subcommand};

use cil_core::data::{
    load_dataset, parse_difficulty, split_path, synth_generate, Split, SynthSpec,
};
use cil_core::metrics::{compare_reports, emit_report, load_report};
use cil_core::model::{load_checkpoint, save_checkpoint};
use cil_core::run::{run_scenario, ScenarioConfig};
use cil_core::strategies::Variant;

const WORKERS_ENV: &str = "CL_NUM_WORKERS";

#[derive(Parser)]
#[command(
    name = "cil",
    version,
    about = "Class-incremental continual learning benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate a strategy on a scenario, one report per seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds; defaults to the config's seed.
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `strategy.variant` from the config.
        #[arg(long, value_parser = parse_variant)]
        strategy: Option<Variant>,
        /// Also save the final model as `model.ckpt` in each report directory.
        #[arg(long)]
        checkpoint: bool,
        /// Also dump the replay buffer as `buffer.jsonl`.
        #[arg(long)]
        dump_buffer: bool,
    },
    /// Generate a synthetic dataset pair `{out}_train.clds` / `{out}_test.clds`.
    Synth {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long, default_value_t = 200)]
        test_per_class: usize,
        /// `easy`, `medium`, `hard` or a positive separation scale.
        #[arg(long, default_value = "medium")]
        difficulty: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output path stem.
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge report directories into `summary.csv` and `curves.svg`.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize datasets (`.clds`), scenario configs, reports or checkpoints.
    Inspect {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
        format!(
            "unknown strategy `{s}`; expected one of {}",
            names.join(", ")
        )
    })
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn config(e: impl std::fmt::Display) -> Self {
        Failure::Config(e.to_string())
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            strategy,
            checkpoint,
            dump_buffer,
        } => cmd_run(&config, &seed, &out, strategy, checkpoint, dump_buffer),
        Command::Synth {
            classes,
            per_class,
            test_per_class,
            difficulty,
            seed,
            out,
        } => cmd_synth(classes, per_class, test_per_class, &difficulty, seed, &out),
        Command::Compare { reports, out } => cmd_compare(&reports, &out),
        Command::Inspect { paths } => paths.iter().try_for_each(|p| cmd_inspect(p)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn workers(jobs: usize) -> usize {
    let cap = std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    cap.min(jobs).max(1)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Outcome {
    let text = serde_json::to_string_pretty(value).expect("json serializes") + "\n";
    std::fs::write(path, text).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn cmd_run(
    config: &Path,
    seeds: &[u64],
    out: &Path,
    strategy: Option<Variant>,
    checkpoint: bool,
    dump_buffer: bool,
) -> Outcome {
    let mut cfg = ScenarioConfig::load(config).map_err(Failure::config)?;
    if let Some(v) = strategy {
        cfg.strategy.variant = v;
    }
    let base = config.parent().unwrap_or(Path::new("."));
    let scenario = cfg.build(base).map_err(Failure::config)?;
    let seeds = if seeds.is_empty() {
        vec![cfg.seed]
    } else {
        seeds.to_vec()
    };
    std::fs::create_dir_all(out)
        .map_err(|e| Failure::runtime(format!("{}: {e}", out.display())))?;

    let name = cfg.strategy.variant.name();
    let queue = Mutex::new(seeds.iter().copied().enumerate());
    let status: Mutex<Vec<Option<Result<PathBuf, String>>>> = Mutex::new(vec![None; seeds.len()]);
    std::thread::scope(|scope| {
        for _ in 0..workers(seeds.len()) {
            scope.spawn(|| loop {
                let next = queue.lock().expect("queue lock").next();
                let Some((i, seed)) = next else { break };
                let dir = out.join(format!("{name}-seed{seed}"));
                let result = run_one(&cfg, &scenario, seed, &dir, checkpoint, dump_buffer);
                status.lock().expect("status lock")[i] = Some(result.map(|()| dir));
            });
        }
    });

    let status: Vec<Result<PathBuf, String>> = status
        .into_inner()
        .expect("status lock")
        .into_iter()
        .map(|s| s.expect("every seed ran"))
        .collect();
    let runs: Vec<serde_json::Value> = seeds
        .iter()
        .zip(&status)
        .map(|(seed, s)| match s {
            Ok(dir) => serde_json::json!({"seed": seed, "dir": dir, "status": "ok"}),
            Err(e) => serde_json::json!({"seed": seed, "status": "error", "error": e}),
        })
        .collect();
    let manifest = serde_json::json!({
        "config": config,
        "echo": cfg.echo(cfg.seed),
        "seeds": seeds,
        "out": out,
        "runs": runs,
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    let failed: Vec<&String> = status.iter().filter_map(|s| s.as_ref().err()).collect();
    if let Some(first) = failed.first() {
        return Err(Failure::runtime(format!(
            "{} of {} runs failed; first: {first}",
            failed.len(),
            seeds.len()
        )));
    }
    Ok(())
}

fn run_one(
    cfg: &ScenarioConfig,
    scenario: &cil_core::data::Scenario,
    seed: u64,
    dir: &Path,
    checkpoint: bool,
    dump_buffer: bool,
) -> Result<(), String> {
    let outcome = run_scenario(cfg, scenario, seed).map_err(|e| format!("seed {seed}: {e}"))?;
    let r = &outcome.report;
    emit_report(r, dir).map_err(|e| e.to_string())?;
    if checkpoint {
        for (i, model) in outcome.models.iter().enumerate() {
            let file = if outcome.models.len() == 1 {
                "model.ckpt".to_string()
            } else {
                format!("model-episode{}.ckpt", i + 1)
            };
            save_checkpoint(&dir.join(file), model, &scenario.registry, &r.config)
                .map_err(|e| e.to_string())?;
        }
    }
    if let (true, Some(state)) = (dump_buffer, &outcome.state) {
        state
            .buffer
            .dump(&dir.join("buffer.jsonl"))
            .map_err(|e| e.to_string())?;
    }
    let bwt = r
        .backward_transfer
        .map_or("n/a".to_string(), |b| format!("{b:.2}"));
    eprintln!(
        "{} seed {seed}: final average accuracy {:.2}, backward transfer {bwt} ({:.1}s) -> {}",
        r.label(),
        r.final_average_accuracy(),
        r.wall_clock_secs,
        dir.display()
    );
    Ok(())
}

fn cmd_synth(
    classes: usize,
    per_class: usize,
    test_per_class: usize,
    difficulty: &str,
    seed: u64,
    out: &Path,
) -> Outcome {
    let spec = SynthSpec {
        classes,
        per_class,
        test_per_class,
        difficulty: parse_difficulty(difficulty).map_err(Failure::config)?,
        seed,
    };
    let (train, test) = synth_generate(&spec).map_err(Failure::config)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .map_err(|e| Failure::runtime(format!("{}: {e}", parent.display())))?;
    }
    for (file, split) in [(&train, Split::Train), (&test, Split::Test)] {
        file.save(&split_path(out, split))
            .map_err(Failure::runtime)?;
    }
    let echo = serde_json::json!({"difficulty_name": difficulty, "spec": spec});
    let mut echo_path = out.as_os_str().to_owned();
    echo_path.push("_synth.json");
    write_json(Path::new(&echo_path), &echo)?;
    println!("{}", serde_json::to_string(&echo).expect("json serializes"));
    Ok(())
}

fn cmd_compare(reports: &[PathBuf], out: &Path) -> Outcome {
    let loaded = compare_reports(reports, out).map_err(Failure::config)?;
    for r in &loaded {
        let bwt = r
            .backward_transfer
            .map_or("n/a".to_string(), |b| format!("{b:.2}"));
        println!(
            "{} seed {}: {:.2} / {bwt}",
            r.label(),
            r.seed,
            r.final_average_accuracy()
        );
    }
    Ok(())
}

fn cmd_inspect(path: &Path) -> Outcome {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    if path.is_dir() || (ext == "json" && is_report(path)) {
        let r = load_report(path).map_err(Failure::config)?;
        println!("report {}: {} seed {}", path.display(), r.label(), r.seed);
        for t in 1..=r.matrix.episodes() {
            let row: Vec<String> = r
                .matrix
                .row(t)
                .iter()
                .map(|c| format!("{:.1}", c.accuracy))
                .collect();
            println!(
                "  after episode {t}: {}  (average {:.2})",
                row.join(" "),
                r.average_accuracy[t - 1]
            );
        }
        if let Some(b) = r.backward_transfer {
            println!("  backward transfer {b:.2}");
        }
        return Ok(());
    }
    match ext {
        "clds" => {
            let d = load_dataset(path).map_err(Failure::config)?;
            println!(
                "dataset {}: {:?} split, {} images",
                path.display(),
                d.split(),
                d.len()
            );
            for (name, n) in d.class_names().iter().zip(d.histogram()) {
                println!("  {name}: {n}");
            }
        }
        "ckpt" => {
            let c = load_checkpoint(path).map_err(Failure::config)?;
            println!(
                "checkpoint {}: {} parameters, {} classes, frozen prefix {:?}",
                path.display(),
                c.model.parameter_count(),
                c.model.class_count(),
                c.model.frozen_prefix()
            );
            for &id in c.model.head_classes() {
                println!(
                    "  {id}: {}",
                    c.registry.get(id as usize).map_or("?", |s| s.as_str())
                );
            }
        }
        _ => {
            let cfg = ScenarioConfig::load(path).map_err(Failure::config)?;
            let base = path.parent().unwrap_or(Path::new("."));
            let s = cfg.build(base).map_err(Failure::config)?;
            println!(
                "scenario {} ({} classes, strategy {})",
                s.name,
                s.class_count(),
                cfg.strategy.variant.name()
            );
            for (i, ep) in s.episodes.iter().enumerate() {
                let names: Vec<&str> = ep
                    .global_ids
                    .iter()
                    .map(|&g| s.registry[g as usize].as_str())
                    .collect();
                println!(
                    "  episode {}: {} train / {} test, {} epochs, classes {}",
                    i + 1,
                    s.samples(i, Split::Train).len(),
                    s.samples(i, Split::Test).len(),
                    ep.epochs,
                    names.join(", ")
                );
            }
        }
    }
    Ok(())
}

fn is_report(path: &Path) -> bool {
    std::fs::read_to_string(path)
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .is_some_and(|v| v.get("schema_version").is_some())
}
