use std::fmt::Write as _;
use std::time::Instant;

use fluff_core::detector::{decode_detections, nms, DetectorNet};
use fluff_core::nn;
use fluff_core::rng::{seeded_rng, uniform_tensor};
use fluff_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliResult;

/// One timed iteration, per image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub pred_ms: f64,
    pub nms_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub median: f64,
    pub p5: f64,
    pub p95: f64,
}

impl Stats {
    /// Nearest-rank percentiles.
    pub fn of(values: &[f64]) -> Stats {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let rank = |q: f64| -> f64 {
            if v.is_empty() {
                return 0.0;
            }
            let r = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
            v[r - 1]
        };
        Stats {
            median: rank(0.5),
            p5: rank(0.05),
            p95: rank(0.95),
        }
    }
}

/// Latency per image. `t_pred_ms` and `t_nms_ms` are sample means,
/// `t_infer_ms` is their sum and `fps` is `1000 / t_infer_ms`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub batch_size: usize,
    pub parallel: bool,
    pub t_pred_ms: f64,
    pub t_nms_ms: f64,
    pub t_infer_ms: f64,
    pub fps: f64,
    pub pred: Stats,
    pub nms: Stats,
    pub infer: Stats,
    pub samples: Vec<Sample>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl BenchReport {
    pub fn from_samples(samples: Vec<Sample>, batch_size: usize, parallel: bool) -> Self {
        let t_pred_ms = mean(samples.iter().map(|s| s.pred_ms));
        let t_nms_ms = mean(samples.iter().map(|s| s.nms_ms));
        let t_infer_ms = t_pred_ms + t_nms_ms;
        let pred: Vec<f64> = samples.iter().map(|s| s.pred_ms).collect();
        let nmsv: Vec<f64> = samples.iter().map(|s| s.nms_ms).collect();
        let infer: Vec<f64> = samples.iter().map(|s| s.pred_ms + s.nms_ms).collect();
        BenchReport {
            batch_size,
            parallel,
            t_pred_ms,
            t_nms_ms,
            t_infer_ms,
            fps: 1000.0 / t_infer_ms,
            pred: Stats::of(&pred),
            nms: Stats::of(&nmsv),
            infer: Stats::of(&infer),
            samples,
        }
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>10} {:>10} {:>10} {:>10}", "", "mean ms", "median", "p5", "p95");
        for (name, m, st) in [
            ("T_pred", self.t_pred_ms, self.pred),
            ("T_nms", self.t_nms_ms, self.nms),
            ("T_infer", self.t_infer_ms, self.infer),
        ] {
            let _ = writeln!(s, "{name:<8} {m:>10.3} {:>10.3} {:>10.3} {:>10.3}", st.median, st.p5, st.p95);
        }
        let _ = writeln!(s, "FPS {:.2} (batch {}, parallel {})", self.fps, self.batch_size, self.parallel);
        s
    }
}

/// Times forward plus decode (`T_pred`) and suppression (`T_nms`) with a
/// monotonic clock on deterministic random input.
pub fn bench(cfg: &RunConfig, net: &DetectorNet) -> CliResult<BenchReport> {
    let b = &cfg.bench;
    nn::set_parallel(b.parallel);
    let i = cfg.network.input;
    let mut rng = seeded_rng(cfg.seed);
    let x: Tensor<f32> = uniform_tensor(&mut rng, (b.batch_size, i.channels, i.height, i.width), 0.0, 1.0);
    let priors = cfg.network.priors()?;
    let mut samples = Vec::with_capacity(b.timed_iters);
    for it in 0..b.warmup_iters + b.timed_iters {
        let t0 = Instant::now();
        let out = net.forward(&x)?;
        let sets = decode_detections(&out, &priors, cfg.loss.variances, cfg.nms.score_threshold)?;
        let t1 = Instant::now();
        let kept: usize = sets.iter().map(|s| nms(s, &cfg.nms).len()).sum();
        let t2 = Instant::now();
        std::hint::black_box(kept);
        if it >= b.warmup_iters {
            let per = b.batch_size as f64;
            samples.push(Sample {
                pred_ms: (t1 - t0).as_secs_f64() * 1e3 / per,
                nms_ms: (t2 - t1).as_secs_f64() * 1e3 / per,
            });
        }
    }
    Ok(BenchReport::from_samples(samples, b.batch_size, b.parallel))
}
