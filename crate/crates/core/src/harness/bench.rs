//! Timing of the context-fusion computation inside one encoder block.

use std::hint::black_box;
use std::time::Instant;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Precision};
use crate::context::{AttentionPool, DensePool};
use crate::encoder::infer::DenseBlock;
use crate::encoder::{ConformerBlock, ContextMode, TimeMode};
use crate::error::Result;
use crate::numerics::dense::Mat;
use crate::numerics::{ParamStore, Rng};

/// Raw frames per encoder frame.
const SUBSAMPLING: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineInfo {
    pub os: String,
    pub arch: String,
    pub logical_cpus: usize,
    pub cpu_model: Option<String>,
    pub threads_used: usize,
}

impl MachineInfo {
    pub fn detect() -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo").ok().and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        });
        Self {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            cpu_model,
            threads_used: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: ContextMode,
    /// Previous-utterance frames; 0 for the no-context baseline.
    pub history_frames: usize,
    /// Key/value assembly, attention with context columns, and pooling
    /// when the mode pools.
    pub fusion_median_ms: f64,
    pub fusion_mean_ms: f64,
    /// Pooling alone (pooled mode only); already part of the fusion time.
    pub pooling_median_ms: Option<f64>,
    /// Whole block forward including pooling.
    pub total_median_ms: f64,
    pub audio_seconds: f64,
    pub rtf: f64,
    /// Fusion median relative to the no-context baseline.
    pub relative_to_baseline: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RtfReport {
    pub machine: MachineInfo,
    pub dim: usize,
    pub heads: usize,
    pub pool_slots: usize,
    pub current_frames: usize,
    pub frame_rate: f64,
    pub repetitions: usize,
    pub warmup: usize,
    pub precision: Precision,
    pub rows: Vec<BenchRow>,
    /// Fusion median at the longest history over the shortest.
    pub frame_concat_growth: f64,
    pub pooled_growth: f64,
    /// Values a pooled cache entry holds per context layer.
    pub pooled_values_per_layer: usize,
    /// Values a frame-level cache entry holds per layer at the longest history.
    pub frame_concat_values_per_layer: usize,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn random_mat<T: Float>(rng: &mut Rng, rows: usize, cols: usize) -> Mat<T> {
    let mut m = Mat::zeros(rows, cols);
    for v in &mut m.data {
        *v = T::from(rng.normal()).unwrap();
    }
    m
}

fn time_ms(f: impl FnOnce()) -> f64 {
    let start = Instant::now();
    f();
    start.elapsed().as_secs_f64() * 1e3
}

struct Case<T> {
    mode: ContextMode,
    history_frames: usize,
    history: Option<Mat<T>>,
    fusion: Vec<f64>,
    pooling: Vec<f64>,
    total: Vec<f64>,
}

/// Sweeps the configured history lengths for frame-level and pooled
/// context plus the no-context baseline, interleaving all cases in every
/// repetition so drift hits them equally.
pub fn bench_fusion(cfg: &ExperimentConfig) -> Result<RtfReport> {
    match cfg.bench.precision {
        Precision::F32 => run::<f32>(cfg),
        Precision::F64 => run::<f64>(cfg),
    }
}

fn run<T: Float>(cfg: &ExperimentConfig) -> Result<RtfReport> {
    let enc = &cfg.model.encoder;
    let b = &cfg.bench;
    let mut store = ParamStore::new();
    let mut rng = Rng::new(cfg.seed).fork(7);
    let block = ConformerBlock::new(&mut store, &mut rng, "bench.block", enc)?;
    let pool = AttentionPool::new(&mut store, &mut rng, "bench.pool", cfg.model.context.pool_slots, enc.dim)?;
    let dense: DenseBlock<T> = DenseBlock::load(&store, &block);
    let dense_pool: DensePool<T> = DensePool::load(&store, &pool);
    let time = TimeMode::from_config(enc);
    let x: Mat<T> = random_mat(&mut rng, b.current_frames, enc.dim);

    let mut cases = vec![Case {
        mode: ContextMode::None,
        history_frames: 0,
        history: None,
        fusion: Vec::new(),
        pooling: Vec::new(),
        total: Vec::new(),
    }];
    for mode in [ContextMode::FrameConcat, ContextMode::Pooled] {
        for &t in &b.history_frames {
            cases.push(Case {
                mode,
                history_frames: t,
                history: Some(random_mat(&mut rng, t, enc.dim)),
                fusion: Vec::new(),
                pooling: Vec::new(),
                total: Vec::new(),
            });
        }
    }
    for rep in 0..b.warmup + b.repetitions {
        let keep = rep >= b.warmup;
        for c in &mut cases {
            let h = c.history.as_ref();
            let fusion = time_ms(|| {
                let pooled = (c.mode == ContextMode::Pooled).then(|| dense_pool.pool(h.expect("history")).0);
                let ctx = if c.mode == ContextMode::Pooled { pooled.as_ref() } else { h };
                black_box(dense.attend(&x, ctx, time.lookahead));
            });
            let pooling = (c.mode == ContextMode::Pooled).then(|| {
                time_ms(|| {
                    black_box(dense_pool.pool(h.expect("history")));
                })
            });
            let total = time_ms(|| {
                let pooled = (c.mode == ContextMode::Pooled).then(|| dense_pool.pool(h.expect("history")).0);
                let ctx = if c.mode == ContextMode::Pooled { pooled.as_ref() } else { h };
                black_box(dense.forward(&x, ctx, time));
            });
            if keep {
                c.fusion.push(fusion);
                c.pooling.extend(pooling);
                c.total.push(total);
            }
        }
    }
    let audio_seconds = (b.current_frames * SUBSAMPLING) as f64 / cfg.frame_rate;
    let baseline = median(&cases[0].fusion);
    let rows: Vec<BenchRow> = cases
        .iter()
        .map(|c| {
            let f = median(&c.fusion);
            BenchRow {
                mode: c.mode,
                history_frames: c.history_frames,
                fusion_median_ms: f,
                fusion_mean_ms: mean(&c.fusion),
                pooling_median_ms: (!c.pooling.is_empty()).then(|| median(&c.pooling)),
                total_median_ms: median(&c.total),
                audio_seconds,
                rtf: f / 1e3 / audio_seconds,
                relative_to_baseline: f / baseline,
            }
        })
        .collect();
    let growth = |mode: ContextMode| {
        let r: Vec<&BenchRow> = rows.iter().filter(|r| r.mode == mode).collect();
        match (r.first(), r.last()) {
            (Some(a), Some(z)) => z.fusion_median_ms / a.fusion_median_ms,
            _ => f64::NAN,
        }
    };
    let longest = b.history_frames.iter().copied().max().unwrap_or(0);
    Ok(RtfReport {
        machine: MachineInfo::detect(),
        dim: enc.dim,
        heads: enc.heads,
        pool_slots: cfg.model.context.pool_slots,
        current_frames: b.current_frames,
        frame_rate: cfg.frame_rate,
        repetitions: b.repetitions,
        warmup: b.warmup,
        precision: b.precision,
        frame_concat_growth: growth(ContextMode::FrameConcat),
        pooled_growth: growth(ContextMode::Pooled),
        pooled_values_per_layer: cfg.model.context.pool_slots * enc.dim,
        frame_concat_values_per_layer: longest * enc.dim,
        rows,
    })
}

/// Plain-text table of a report.
pub fn format_table(r: &RtfReport) -> String {
    let mut s = format!(
        "machine: {} {} ({} cpus, {} thread), {:?}\nD={} heads={} L={} T={} reps={} precision={:?}\n",
        r.machine.os,
        r.machine.arch,
        r.machine.logical_cpus,
        r.machine.threads_used,
        r.machine.cpu_model.as_deref().unwrap_or("unknown cpu"),
        r.dim,
        r.heads,
        r.pool_slots,
        r.current_frames,
        r.repetitions,
        r.precision,
    );
    s.push_str("mode          T_prev  fusion_ms  pool_ms  total_ms      rtf  vs_none\n");
    for row in &r.rows {
        s.push_str(&format!(
            "{:<12} {:>7} {:>10.3} {:>8} {:>9.3} {:>8.5} {:>8.2}\n",
            row.mode.to_string(),
            row.history_frames,
            row.fusion_median_ms,
            row.pooling_median_ms.map_or("-".to_string(), |p| format!("{p:.3}")),
            row.total_median_ms,
            row.rtf,
            row.relative_to_baseline,
        ));
    }
    s.push_str(&format!(
        "growth shortest->longest history: frame_concat {:.2}x, pooled {:.3}x\n",
        r.frame_concat_growth, r.pooled_growth
    ));
    s
}
