use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::Context;
use era_core::autodiff::checkpoint;
use era_core::train::classifier::train_classifier_model;
use era_core::train::grpo::train_toy_grpo_policy;
use era_core::train::record::{compare_csv, mean_std, summary_csv};
use era_core::train::sac::train_sac_with;
use era_core::verify::run_suite;
use era_core::{GrpoAlgorithm, RunHeader, RunRecord, SacVariant, Suite};

use crate::config::{usage, RunConfig, TrainKind};

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Prints one line per property; `Ok(false)` when any property failed.
pub fn verify(suite: Suite, seed: u64, out_dir: Option<&Path>, jsonl: bool) -> anyhow::Result<bool> {
    let results = run_suite(suite, seed)?;
    let mut lines = Vec::with_capacity(results.len());
    for r in &results {
        lines.push(serde_json::to_string(r)?);
        if jsonl {
            println!("{}", lines.last().expect("just pushed"));
        } else {
            println!("{}", r.line());
        }
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if !jsonl {
        println!("{} of {} properties passed", results.len() - failed, results.len());
    }
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        let header = RunHeader::new(&format!("verify-{suite}"), seed, results.len(), &suite)?;
        let mut text = serde_json::json!({ "header": header }).to_string();
        text.push('\n');
        for l in &lines {
            text.push_str(l);
            text.push('\n');
        }
        let path = dir.join(format!("verify-{suite}.jsonl"));
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(failed == 0)
}

fn thread_cap(jobs: usize) -> usize {
    let env = std::env::var("ERA_KIT_THREADS").ok().and_then(|s| s.parse::<usize>().ok());
    let avail = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    env.unwrap_or(avail).clamp(1, jobs.max(1))
}

struct Outcome {
    record: RunRecord,
    seconds: f64,
}

fn run_seed(cfg: &RunConfig, seed: u64) -> anyhow::Result<Outcome> {
    let t0 = Instant::now();
    let stem = cfg.out_dir.join(format!("{}-seed{seed}", cfg.kind.name()));
    let header = RunHeader::new(cfg.kind.name(), seed, cfg.steps, &cfg.section())?;
    let record = match cfg.kind {
        TrainKind::Sac | TrainKind::SacEra => {
            let variant = if cfg.kind == TrainKind::Sac {
                SacVariant::Baseline
            } else {
                SacVariant::Era
            };
            let (run, agent) = train_sac_with(cfg.env, variant, &cfg.sac, seed, cfg.steps, |p| {
                eprintln!(
                    "[{} seed {seed}] step {} return {:.2} entropy {:.3}",
                    cfg.kind.name(),
                    p.step,
                    p.eval_return,
                    p.entropy
                );
            })?;
            checkpoint::save(stem.with_extension("ckpt"), agent.actor())?;
            RunRecord::from_rows(header, &run.points)?
        }
        TrainKind::Classifier => {
            let (run, mlp) = train_classifier_model(&cfg.classifier, seed)?;
            checkpoint::save(stem.with_extension("ckpt"), &mlp)?;
            RunRecord::from_rows(header, &run.epochs)?
        }
        TrainKind::GrpoToy | TrainKind::GrpoEraToy => {
            let algorithm = if cfg.kind == TrainKind::GrpoToy {
                GrpoAlgorithm::Vanilla
            } else {
                GrpoAlgorithm::Era
            };
            let (run, policy) = train_toy_grpo_policy(&cfg.grpo, algorithm, seed, cfg.steps)?;
            checkpoint::save(stem.with_extension("ckpt"), &policy)?;
            RunRecord::from_rows(header, &run.trace)?
        }
    };
    record.write(stem.with_extension("jsonl"))?;
    Ok(Outcome {
        record,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// One run per seed, fanned out over at most `ERA_KIT_THREADS` threads.
pub fn train(cfg: &RunConfig) -> anyhow::Result<()> {
    create_dir(&cfg.out_dir)?;
    let n = cfg.seeds.len();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<anyhow::Result<Outcome>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..thread_cap(n) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let out = run_seed(cfg, cfg.seeds[i]);
                slots.lock().expect("no panics while holding the lock")[i] = Some(out);
            });
        }
    });
    let mut records = Vec::with_capacity(n);
    for (seed, slot) in cfg.seeds.iter().zip(slots.into_inner().expect("threads joined")) {
        let out = slot.expect("every seed ran").with_context(|| format!("seed {seed}"))?;
        eprintln!("[{} seed {seed}] done in {:.1}s", cfg.kind.name(), out.seconds);
        records.push(out.record);
    }
    let summary = summary_csv(&records)?;
    let path = cfg.out_dir.join(format!("{}-summary.csv", cfg.kind.name()));
    fs::write(&path, &summary).with_context(|| format!("writing {}", path.display()))?;
    println!("{} over seeds {:?} (final values)", cfg.kind.name(), cfg.seeds);
    for col in records[0].numeric_columns() {
        let finals: Vec<f64> = records.iter().filter_map(|r| r.last(&col)).collect();
        if finals.is_empty() {
            continue;
        }
        let (m, s) = mean_std(&finals);
        println!("  {col:<20} {m:>12.4} ± {s:.4}");
    }
    println!("records, checkpoints and summary in {}", cfg.out_dir.display());
    Ok(())
}

pub fn compare(paths: &[PathBuf], out_dir: Option<&Path>) -> anyhow::Result<()> {
    if paths.len() < 2 {
        return usage("compare needs at least two run records");
    }
    let records = paths.iter().map(RunRecord::read).collect::<era_core::Result<Vec<_>>>()?;
    let csv = match compare_csv(&records) {
        Ok(c) => c,
        Err(e) => return usage(e.to_string()),
    };
    match out_dir {
        Some(dir) => {
            create_dir(dir)?;
            let path = dir.join("compare.csv");
            fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}
