//! Acceptance run: one PASS/FAIL line per criterion, followed by indented
//! measurements. Exits non-zero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::Outcome;
use crossutt::context::CacheEntry;
use crossutt::data::{generate, Corpus};
use crossutt::encoder::ContextMode;
use crossutt::harness::heatmap::cue_localization;
use crossutt::harness::{bench_fusion, evaluate, export_heatmaps, EvalOptions, EvalReport, ExperimentConfig, Profile, Trainer};
use crossutt::numerics::{Rng, Tensor};
use crossutt::transducer::{ModelConfig, Transducer};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

fn within(start: Instant, limit: Duration, outcome: Outcome) -> Outcome {
    let elapsed = start.elapsed();
    let detail = outcome?;
    if elapsed > limit {
        return Err(format!("{detail}; took {:.1} s, limit {} s", elapsed.as_secs_f64(), limit.as_secs()));
    }
    Ok(format!("{detail}; {:.1} s", elapsed.as_secs_f64()))
}

fn gradient_integrity() -> Outcome {
    let ops = common::op_gradient_errors(17).map_err(|e| e.to_string())?;
    let (worst_op, worst) = ops
        .iter()
        .copied()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("ops");
    if worst >= 1e-4 {
        return Err(format!("op {worst_op}: relative error {worst:.3e}"));
    }
    let mut lines = vec![format!("{} ops, worst {worst_op} at {worst:.2e}", ops.len())];
    for (mode, streaming) in [
        (ContextMode::Pooled, false),
        (ContextMode::FrameConcat, true),
        (ContextMode::None, false),
    ] {
        let r = common::model_gradient_check(mode, streaming, 40, 31).map_err(|e| e.to_string())?;
        let label = format!("model {mode}{}", if streaming { " streaming" } else { "" });
        if r.max_rel_err >= 1e-4 {
            return Err(format!("{label}: relative error {:.3e} at {}", r.max_rel_err, r.worst));
        }
        if mode == ContextMode::Pooled && r.pool_grad_norm == 0.0 {
            return Err(format!("{label}: no gradient reached the pooling parameters"));
        }
        lines.push(format!(
            "{label}: {} coordinates over {} tensors, worst {:.2e} ({}), pooling gradient norm {:.2e}",
            r.checked, r.tensors, r.max_rel_err, r.worst, r.pool_grad_norm
        ));
    }
    Ok(lines.join("; "))
}

fn transducer_loss() -> Outcome {
    let r = common::transducer_oracle(4, 3, 3, 10, 5).map_err(|e| e.to_string())?;
    let detail = format!(
        "{} lattices, max loss error {:.1e}, max gradient error {:.1e}",
        r.cases, r.max_loss_err, r.max_grad_err
    );
    if r.max_loss_err > 1e-8 || r.max_grad_err > 1e-8 {
        return Err(detail);
    }
    Ok(detail)
}

fn stop_gradient() -> Outcome {
    let a = common::stop_gradient_probe(ContextMode::Pooled, 3)?;
    let b = common::stop_gradient_probe(ContextMode::FrameConcat, 4)?;
    Ok(format!("{a}; {b}"))
}

fn scaling_and_memory() -> Outcome {
    let mut cfg = ExperimentConfig::for_profile(Profile::Paper);
    cfg.bench.repetitions = 30;
    let report = bench_fusion(&cfg).map_err(|e| e.to_string())?;
    let medians = |mode: ContextMode| -> Vec<(usize, f64)> {
        report
            .rows
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| (r.history_frames, r.fusion_median_ms))
            .collect()
    };
    let pooled = medians(ContextMode::Pooled);
    let concat = medians(ContextMode::FrameConcat);
    let lo = pooled.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let hi = pooled.iter().map(|p| p.1).fold(0.0, f64::max);
    let spread = hi / lo - 1.0;
    let at = |rows: &[(usize, f64)], t: usize| rows.iter().find(|r| r.0 == t).map(|r| r.1);
    let growth = match (at(&concat, 25), at(&concat, 800)) {
        (Some(a), Some(b)) => b / a,
        _ => return Err("frame_concat rows for 25 and 800 history frames missing".into()),
    };
    // Memory: real cache entries at the benchmark's width and slot count.
    let (l, d) = (cfg.model.context.pool_slots, cfg.model.encoder.dim);
    let mut small = ModelConfig::desk();
    small.encoder.dim = d;
    small.encoder.heads = cfg.model.encoder.heads;
    small.encoder.num_blocks = 2;
    small.encoder.context_mode = ContextMode::Pooled;
    small.context.pool_slots = l;
    let model = Transducer::new(small, 1).map_err(|e| e.to_string())?;
    let mut rng = Rng::new(2);
    let mut memory_ok = true;
    for &t in &cfg.bench.history_frames {
        let outputs: Vec<Tensor> = (0..2).map(|_| common::random_tensor(&mut rng, &[t, d], 1.0)).collect();
        let entry: CacheEntry = model.cache_entry("m", &outputs, None, false).map_err(|e| e.to_string())?;
        memory_ok &= entry.values_per_layer().iter().all(|&v| v == l * d) && entry.frames.is_none();
    }
    let series = |rows: &[(usize, f64)]| {
        rows.iter()
            .map(|(t, m)| format!("{t}:{m:.3}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let detail = format!(
        "pooled spread {:.1}% [{}], frame_concat growth {growth:.2}x [{}], pooled entry {} values per layer (L*D = {}) at every history length",
        100.0 * spread,
        series(&pooled),
        series(&concat),
        if memory_ok { l * d } else { 0 },
        l * d
    );
    if spread >= 0.25 || growth <= 4.0 || !memory_ok {
        return Err(detail);
    }
    Ok(detail)
}

struct DependencyResult {
    mode: ContextMode,
    report: EvalReport,
    trainer: Trainer,
}

fn train_for_dependency(mode: ContextMode, train: &Corpus, test: &Corpus) -> crossutt::Result<DependencyResult> {
    let mut cfg = ExperimentConfig::default();
    cfg.model.encoder.context_mode = mode;
    cfg.model.predictor.carry_state = false;
    cfg.train.epochs = 40;
    cfg.train.log_wall_time = false;
    let mut train = train.clone();
    let mut trainer = Trainer::new(cfg, train.vocab.clone())?;
    trainer.prepare(&mut train)?;
    trainer.run(&train, &mut std::io::sink(), None, |_| {})?;
    let report = evaluate(&trainer.model, test, EvalOptions::default())?;
    Ok(DependencyResult { mode, report, trainer })
}

fn dependency_task() -> Outcome {
    let spec = ExperimentConfig::default().corpus;
    let train = generate(&spec, 1).map_err(|e| e.to_string())?;
    let mut held_out = spec.clone();
    held_out.clips = 200;
    let test = generate(&held_out, 3).map_err(|e| e.to_string())?;
    let modes = [ContextMode::None, ContextMode::Pooled, ContextMode::FrameConcat];
    let results: Vec<DependencyResult> = std::thread::scope(|s| {
        let handles: Vec<_> = modes
            .iter()
            .map(|&m| {
                let (train, test) = (&train, &test);
                s.spawn(move || train_for_dependency(m, train, test))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("training thread")).collect::<crossutt::Result<_>>()
    })
    .map_err(|e| e.to_string())?;
    let acc = |m: ContextMode| results.iter().find(|r| r.mode == m).expect("mode").report.dependent.accuracy;
    let (none, pooled, concat) = (acc(ContextMode::None), acc(ContextMode::Pooled), acc(ContextMode::FrameConcat));
    let pooled_run = results.iter().find(|r| r.mode == ContextMode::Pooled).expect("pooled");
    let cleared = evaluate(&pooled_run.trainer.model, &test, EvalOptions { clear_cache: true })
        .map_err(|e| e.to_string())?;
    let mut maps = Vec::new();
    for clip in test.clips() {
        maps.extend(export_heatmaps(&pooled_run.trainer.model, &test, &clip.id).map_err(|e| e.to_string())?);
    }
    let (hit, total) = cue_localization(&maps, &test);
    let wers: Vec<String> = results.iter().map(|r| format!("{} {:.1}", r.mode, r.report.wer)).collect();
    let detail = format!(
        "dependent-token accuracy over {} tokens: none {none:.1}%, pooled {pooled:.1}%, frame_concat {concat:.1}%; \
         pooled with cache cleared {:.1}%; cue holds the most pooling weight in {hit}/{total} heatmaps; WER {}",
        pooled_run.report.dependent.total,
        cleared.dependent.accuracy,
        wers.join(", ")
    );
    if pooled - none < 20.0 || (none - 50.0).abs() > 10.0 || (concat - pooled).abs() > 5.0 {
        return Err(detail);
    }
    Ok(detail)
}

fn streaming_causality() -> Outcome {
    let mut lines = Vec::new();
    for (w, mode) in [
        (1, ContextMode::Pooled),
        (1, ContextMode::None),
        (2, ContextMode::FrameConcat),
        (0, ContextMode::Pooled),
        (0, ContextMode::None),
    ] {
        let (checked, sensitive) = common::causality_check(w, mode, 9)?;
        if checked == 0 {
            return Err(format!("w={w}: no frame checked"));
        }
        lines.push(format!("w={w} {mode}: {checked} frames unchanged, {sensitive} react at the bound"));
    }
    Ok(lines.join("; "))
}

fn serialization() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (
        prop::collection::vec(1usize..6, 1..8),
        1usize..5,
        any::<u64>(),
        0u64..3,
    );
    runner
        .run(&strategy, |(sizes, batch, seed, epoch)| {
            let corpus = common::scrambled_corpus(&sizes, seed, 4);
            common::check_plan(&corpus, batch, seed, epoch).map_err(TestCaseError::fail)?;
            common::check_training_contexts(&corpus, batch, seed).map_err(TestCaseError::fail)?;
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("1000 random corpora: start-time order, exactly-once coverage, resets at clip changes, empty context for every first utterance during training".into())
}

fn determinism() -> Outcome {
    let a = common::determinism_check(ContextMode::Pooled, 5)?;
    let b = common::determinism_check(ContextMode::FrameConcat, 6)?;
    Ok(format!("{a}; {b}"))
}

fn main() -> ExitCode {
    // Accept and ignore libtest arguments passed by `cargo test`.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    type Check = fn() -> Outcome;
    let criteria: [(u32, &str, u64, Check); 9] = [
        (1, "gradient integrity", 120, gradient_integrity),
        (2, "transducer loss oracle", 60, transducer_loss),
        (3, "pooling oracle", 600, || common::pooling_oracle(100, 11)),
        (4, "stop-gradient contract", 600, stop_gradient),
        (5, "scaling and memory", 300, scaling_and_memory),
        (6, "dependency task", 1800, dependency_task),
        (7, "streaming causality", 600, streaming_causality),
        (8, "serialization", 600, serialization),
        (9, "determinism", 600, determinism),
    ];
    let mut failed = 0;
    for (id, name, limit, check) in criteria {
        let key = format!("c{id}");
        if !filter.is_empty() && !filter.iter().any(|f| *f == key || name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check)
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            });
        match within(start, Duration::from_secs(limit), outcome) {
            Ok(detail) => println!("PASS {id} {name}\n    {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {id} {name}\n    {reason}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
