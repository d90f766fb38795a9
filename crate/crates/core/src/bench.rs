//! Single-thread forward-latency measurements across relaxation backends.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::liquid::Backend;
use crate::pyramid::{decode, nms, DecodeConfig, Detector, PyramidConfig};
use crate::real::{Precision, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    pub sequence_lengths: Vec<usize>,
    /// Embedding width; also used as the input feature width.
    pub channels: usize,
    pub backends: Vec<Backend>,
    pub warmup_iters: usize,
    pub measured_iters: usize,
    pub thread_count: usize,
    pub include_heads: bool,
    pub include_nms: bool,
    /// Enforce the single-thread, no-post-processing protocol.
    pub protocol: bool,
    pub precision: Precision,
    pub seed: u64,
    /// Architecture of the measured detector; `embed_dim` and `input_dim`
    /// are overridden by `channels`.
    pub model: PyramidConfig,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            sequence_lengths: vec![2304],
            channels: 64,
            backends: vec![Backend::Parallel, Backend::CfcSequential, Backend::ode_default()],
            warmup_iters: 10,
            measured_iters: 30,
            thread_count: 1,
            include_heads: false,
            include_nms: false,
            protocol: true,
            precision: Precision::F32,
            seed: 0,
            model: PyramidConfig::default(),
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.measured_iters < 5 {
            return fail(format!("measured_iters {} must be >= 5", self.measured_iters));
        }
        if self.protocol && self.thread_count != 1 {
            return fail(format!("protocol runs are single-threaded, got thread_count {}", self.thread_count));
        }
        if self.protocol && self.include_nms {
            return fail("protocol runs exclude NMS".into());
        }
        if self.thread_count != 1 {
            return fail(format!(
                "compute kernels run on one worker; thread_count {} is not supported",
                self.thread_count
            ));
        }
        if self.channels == 0 {
            return fail("channels must be positive".into());
        }
        if self.sequence_lengths.is_empty() || self.sequence_lengths.contains(&0) {
            return fail("sequence_lengths must be non-empty and positive".into());
        }
        if self.backends.is_empty() {
            return fail("no backends to measure".into());
        }
        for b in &self.backends {
            b.validate()?;
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> PyramidConfig {
        PyramidConfig {
            input_dim: self.channels,
            embed_dim: self.channels,
            dropout: 0.0,
            ..self.model.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub host: String,
    pub os: String,
    pub arch: String,
    pub cpu: String,
    pub precision: Precision,
    pub thread_count: usize,
    pub timer_resolution_ns: f64,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub backend: String,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub flops: u64,
    pub params: usize,
    /// This backend's median over the Parallel median at the same `T`.
    pub speedup_vs_parallel: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub fingerprint: Fingerprint,
    /// Set when the timer resolution exceeds 1% of some median.
    pub unreliable: bool,
}

pub const CSV_HEADER: &str = "backend,T,C,median_ms,mean_ms,p95_ms,flops,params,speedup_vs_parallel";

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let sp = r.speedup_vs_parallel.map(|v| format!("{v:.3}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{:.4},{:.4},{:.4},{},{},{sp}",
                r.backend, r.t, r.c, r.median_ms, r.mean_ms, r.p95_ms, r.flops, r.params
            );
        }
        s
    }

    pub fn row(&self, backend: &str, t: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.backend == backend && r.t == t)
    }
}

/// Smallest observable step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..50 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

fn read_trimmed(path: &str) -> Option<String> {
    std::fs::read_to_string(path).ok().map(|s| s.trim().to_string()).filter(|s| !s.is_empty())
}

pub fn fingerprint(precision: Precision, thread_count: usize, resolution: Duration) -> Fingerprint {
    let host = read_trimmed("/proc/sys/kernel/hostname")
        .or_else(|| std::env::var("HOSTNAME").ok())
        .unwrap_or_else(|| "unknown".into());
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown".into());
    Fingerprint {
        host,
        os: std::env::consts::OS.into(),
        arch: std::env::consts::ARCH.into(),
        cpu,
        precision,
        thread_count,
        timer_resolution_ns: resolution.as_nanos() as f64,
        version: env!("CARGO_PKG_VERSION").into(),
    }
}

/// Sample statistics in milliseconds: `(median, mean, p95)`.
pub fn summarize(samples: &[Duration]) -> (f64, f64, f64) {
    let mut ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
    ms.sort_by(f64::total_cmp);
    let n = ms.len();
    let median = if n % 2 == 1 {
        ms[n / 2]
    } else {
        0.5 * (ms[n / 2 - 1] + ms[n / 2])
    };
    let mean = ms.iter().sum::<f64>() / n as f64;
    // nearest-rank percentile
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    (median, mean, ms[rank - 1])
}

fn bench_input<F: Real>(t: usize, c: usize, seed: u64) -> DenseArray<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..t * c)
        .map(|_| F::of(StandardNormal.sample(&mut rng)))
        .collect();
    DenseArray::new(vec![t, c], data).expect("shape matches")
}

fn one_pass<F: Real>(model: &Detector<F>, x: &DenseArray<F>, backend: Backend, spec: &BenchSpec) -> Result<()> {
    let mut g = crate::autodiff::Graph::inference();
    let out = if spec.include_heads || spec.include_nms {
        model.forward(&mut g, x, backend, crate::liquid::ForwardMode::eval())?
    } else {
        let xv = g.input(x.pad_rows(model.cfg.padded_len(x.shape()[0]))?);
        let h = model.stem(&mut g, xv)?;
        model.build_pyramid(&mut g, h, backend, crate::liquid::ForwardMode::eval())?;
        return Ok(());
    };
    if spec.include_nms {
        let levels = out
            .heads
            .iter()
            .enumerate()
            .map(|(l, h)| crate::pyramid::LevelPrediction {
                level: l,
                stride: model.cfg.level_stride(l),
                cls_logits: g.value(h.cls_logits).clone(),
                reg_offsets: g.value(h.reg_offsets).clone(),
            })
            .collect();
        let preds = crate::pyramid::Predictions {
            levels,
            valid_len: out.valid_len,
            base_dt: model.cfg.token_dt,
        };
        let d = DecodeConfig::default();
        nms(&decode(&preds, d.score_threshold)?, d.iou_threshold, d.max_keep)?;
    }
    Ok(())
}

fn run_typed<F: Real>(spec: &BenchSpec) -> Result<BenchReport> {
    let model = Detector::<F>::new(spec.model_config(), spec.seed)?;
    let resolution = timer_resolution();
    let mut rows = Vec::new();
    let mut unreliable = false;
    for &t in &spec.sequence_lengths {
        let x = bench_input::<F>(t, spec.channels, spec.seed ^ t as u64);
        let mut parallel_median = None;
        let first = rows.len();
        for &backend in &spec.backends {
            for _ in 0..spec.warmup_iters {
                one_pass(&model, &x, backend, spec)?;
            }
        }
        // Round-robin so slow drift of the host affects every backend alike.
        let mut samples = vec![Vec::with_capacity(spec.measured_iters); spec.backends.len()];
        for _ in 0..spec.measured_iters {
            for (i, &backend) in spec.backends.iter().enumerate() {
                let start = Instant::now();
                one_pass(&model, &x, backend, spec)?;
                samples[i].push(start.elapsed());
            }
        }
        for (&backend, samples) in spec.backends.iter().zip(&samples) {
            let (median_ms, mean_ms, p95_ms) = summarize(samples);
            if resolution.as_secs_f64() * 1e3 > 0.01 * median_ms {
                unreliable = true;
            }
            if backend == Backend::Parallel {
                parallel_median = Some(median_ms);
            }
            rows.push(BenchRow {
                backend: backend.name().to_string(),
                t,
                c: spec.channels,
                median_ms,
                mean_ms,
                p95_ms,
                flops: model.flops_for(backend, t, spec.include_heads || spec.include_nms),
                params: model.num_params(),
                speedup_vs_parallel: None,
            });
        }
        if let Some(p) = parallel_median {
            for r in &mut rows[first..] {
                r.speedup_vs_parallel = Some(r.median_ms / p);
            }
        }
    }
    Ok(BenchReport {
        rows,
        fingerprint: fingerprint(spec.precision, spec.thread_count, resolution),
        unreliable,
    })
}

/// Warmup, then `measured_iters` timed forward passes per (backend, T), all
/// on one fixed random input and one set of weights. Backends take turns
/// within each measured iteration.
pub fn run_bench(spec: &BenchSpec) -> Result<BenchReport> {
    spec.validate()?;
    match spec.precision {
        Precision::F32 => run_typed::<f32>(spec),
        Precision::F64 => run_typed::<f64>(spec),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub backend: String,
    /// `(T, median_ms, flops)`
    pub points: Vec<(usize, f64, u64)>,
    /// Least-squares slope of log latency against log T.
    pub slope: f64,
    pub unreliable: bool,
    pub fingerprint: Fingerprint,
}

impl ScalingReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("backend,T,median_ms,flops\n");
        for (t, ms, f) in &self.points {
            let _ = writeln!(s, "{},{t},{ms:.4},{f}", self.backend);
        }
        let _ = writeln!(s, "# log-log slope {:.4}", self.slope);
        s
    }
}

/// Ordinary least-squares slope of `ys` against `xs`.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// One protocol run per length for a single backend.
pub fn scaling_sweep(spec: &BenchSpec, backend: Backend) -> Result<ScalingReport> {
    if spec.sequence_lengths.len() < 2 || spec.sequence_lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("scaling needs at least two strictly ascending lengths".into()));
    }
    let run = BenchSpec {
        backends: vec![backend],
        ..spec.clone()
    };
    let report = run_bench(&run)?;
    let points: Vec<(usize, f64, u64)> = report.rows.iter().map(|r| (r.t, r.median_ms, r.flops)).collect();
    let lx: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    Ok(ScalingReport {
        backend: backend.name().to_string(),
        slope: ols_slope(&lx, &ly),
        points,
        unreliable: report.unreliable,
        fingerprint: report.fingerprint,
    })
}
