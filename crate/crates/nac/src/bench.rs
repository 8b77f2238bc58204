//! Runtime and peak-allocation scaling harness.
//!
//! Timing wraps the forward pass only, on a monotonic clock, after warmup
//! passes. Peak memory is an instrumented-allocator counter (requested
//! bytes, not OS RSS), reset before each measured pass, so numbers are
//! deterministic and portable; they are meant for orderings and ratios,
//! never absolute footprints.
//!
//! The binary and the acceptance suite install [`TrackingAlloc`] as the
//! global allocator; without it peak columns read zero.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Mode, NacConfig, NacLayer};
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::{self, Tensor};

// ── Tracking allocator ───────────────────────────────────────────────

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

/// System-allocator wrapper that tracks current and peak requested bytes.
/// Install with `#[global_allocator] static A: TrackingAlloc = TrackingAlloc;`.
pub struct TrackingAlloc;

unsafe impl GlobalAlloc for TrackingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            if new_size >= layout.size() {
                let now =
                    CURRENT.fetch_add(new_size - layout.size(), Ordering::Relaxed) + new_size
                        - layout.size();
                PEAK.fetch_max(now, Ordering::Relaxed);
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

pub fn current_allocated() -> usize {
    CURRENT.load(Ordering::Relaxed)
}

/// Reset the peak to the current level; call before a measured region.
pub fn reset_peak() {
    PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
}

pub fn peak_allocated() -> usize {
    PEAK.load(Ordering::Relaxed)
}

/// Whether the tracking allocator is actually installed in this process.
pub fn tracking_active() -> bool {
    let before = current_allocated();
    let v: Vec<u8> = Vec::with_capacity(4096);
    let moved = current_allocated() != before;
    drop(v);
    moved
}

// ── Benchmark configuration ──────────────────────────────────────────

pub const MODEL_TAGS: [&str; 6] =
    ["nac-exact", "nac-euler", "nac-steady", "nac-pairwise", "scaled-dot", "plain-rnn"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    pub models: Vec<String>,
    pub seq_lens: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub batch: usize,
    pub reps: usize,
    pub warmups: usize,
    pub top_k: usize,
    pub sparsity: f64,
    /// Compact trunk for desk-scale runs; `None` uses the width formula.
    pub backbone_units: Option<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            models: MODEL_TAGS.iter().map(|s| s.to_string()).collect(),
            seq_lens: vec![1024],
            d_model: 64,
            heads: 4,
            batch: 1,
            reps: 10,
            warmups: 2,
            top_k: 8,
            sparsity: 0.5,
            backbone_units: Some(8),
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps < 10 {
            return Err(Error::arg(format!(
                "benchmark protocol needs >= 10 measured passes, got {}",
                self.reps
            )));
        }
        for m in &self.models {
            if !MODEL_TAGS.contains(&m.as_str()) {
                return Err(Error::arg(format!(
                    "unknown model tag {m:?}; valid tags: {}",
                    MODEL_TAGS.join(", ")
                )));
            }
        }
        if self.seq_lens.is_empty() {
            return Err(Error::arg("seq_lens must be non-empty".to_string()));
        }
        Ok(())
    }
}

/// One benchmark measurement row.
#[derive(Debug, Clone)]
pub struct BenchRecord {
    pub model: String,
    pub seq_len: usize,
    pub d_model: usize,
    pub heads: usize,
    pub top_k: String,
    pub mode: String,
    pub reps: usize,
    pub runtime_mean_s: f64,
    pub runtime_std_s: f64,
    pub throughput_seq_per_s: f64,
    pub peak_alloc_mb: f64,
}

pub const CSV_HEADER: &str = "model,seq_len,d_model,heads,top_k,mode,reps,\
runtime_mean_s,runtime_std_s,throughput_seq_per_s,peak_alloc_mb";

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.6e},{:.6e},{:.4},{:.3}",
            self.model,
            self.seq_len,
            self.d_model,
            self.heads,
            self.top_k,
            self.mode,
            self.reps,
            self.runtime_mean_s,
            self.runtime_std_s,
            self.throughput_seq_per_s,
            self.peak_alloc_mb
        )
    }

    /// The row with timing columns blanked; used for reproducibility
    /// comparisons, since wall-clock numbers vary run to run.
    pub fn csv_row_deterministic(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.3}",
            self.model,
            self.seq_len,
            self.d_model,
            self.heads,
            self.top_k,
            self.mode,
            self.reps,
            self.peak_alloc_mb
        )
    }
}

// ── Baseline models ──────────────────────────────────────────────────

/// Textbook multi-head scaled-dot attention with dense projections.
pub struct ScaledDotAttention {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub heads: usize,
}

impl ScaledDotAttention {
    pub fn init(d_model: usize, heads: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = 1.0 / (d_model as f64).sqrt();
        let mut mk = || {
            Tensor::from_vec(
                vec![d_model, d_model],
                (0..d_model * d_model).map(|_| rng.gen_range(-r..r)).collect(),
            )
            .unwrap()
        };
        ScaledDotAttention { w_q: mk(), w_k: mk(), w_v: mk(), w_o: mk(), heads }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let dh = d / self.heads;
        let split = |y: &Tensor| -> Result<Tensor> {
            tensor::swap_axes12(&y.reshape(vec![b, t, self.heads, dh])?)
        };
        let q = split(&tensor::matmul(x, &self.w_q)?)?;
        let k = split(&tensor::matmul(x, &self.w_k)?)?;
        let v = split(&tensor::matmul(x, &self.w_v)?)?;
        let scores = tensor::matmul(&q, &tensor::transpose_last2(&k)?)?;
        let scaled = scores.scale(1.0 / (dh as f64).sqrt());
        let alpha = tensor::softmax_lastdim(&scaled)?;
        let mixed = tensor::matmul(&alpha, &v)?;
        let merged = tensor::swap_axes12(&mixed)?.reshape(vec![b, t, d])?;
        tensor::matmul(&merged, &self.w_o)
    }
}

/// Plain tanh RNN unrolled over the sequence; linear in T by construction.
pub struct PlainRnn {
    pub w_x: Tensor,
    pub w_h: Tensor,
    pub bias: Tensor,
}

impl PlainRnn {
    pub fn init(d_model: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = 1.0 / (d_model as f64).sqrt();
        let mut mk = |n: usize| {
            Tensor::from_vec(vec![d_model, n], (0..d_model * n).map(|_| rng.gen_range(-r..r)).collect())
                .unwrap()
        };
        PlainRnn { w_x: mk(d_model), w_h: mk(d_model), bias: Tensor::zeros(&[d_model]) }
    }

    /// Final hidden state `[B, d]` after scanning `x [B, T, d]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut h = Tensor::zeros(&[b, d]);
        for step in 0..t {
            let mut xt = vec![0.0; b * d];
            for bi in 0..b {
                xt[bi * d..(bi + 1) * d]
                    .copy_from_slice(&x.data()[(bi * t + step) * d..(bi * t + step + 1) * d]);
            }
            let xt = Tensor::from_vec(vec![b, d], xt)?;
            let drive = tensor::add(
                &tensor::add(&tensor::matmul(&xt, &self.w_x)?, &tensor::matmul(&h, &self.w_h)?)?,
                &self.bias,
            )?;
            h = drive.tanh();
        }
        Ok(h)
    }
}

// ── Harness ──────────────────────────────────────────────────────────

fn nac_config_for(tag: &str, cfg: &BenchConfig) -> NacConfig {
    let (mode, pairwise) = match tag {
        "nac-euler" => (Mode::Euler, false),
        "nac-steady" => (Mode::Steady, false),
        "nac-pairwise" => (Mode::Exact, true),
        _ => (Mode::Exact, false),
    };
    NacConfig {
        d_model: cfg.d_model,
        heads: cfg.heads,
        top_k: cfg.top_k,
        mode,
        pairwise_full: pairwise,
        sparsity: cfg.sparsity,
        backbone_units: cfg.backbone_units,
        seed: cfg.seed,
        ..NacConfig::default()
    }
}

fn bench_input(cfg: &BenchConfig, seq_len: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(seq_len as u64));
    Tensor::from_vec(
        vec![cfg.batch, seq_len, cfg.d_model],
        (0..cfg.batch * seq_len * cfg.d_model).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Run one model tag at one sequence length: `warmups` untimed passes, then
/// `reps` timed passes with the allocator peak tracked per pass.
pub fn bench_model(tag: &str, cfg: &BenchConfig, seq_len: usize) -> Result<BenchRecord> {
    if !MODEL_TAGS.contains(&tag) {
        return Err(Error::arg(format!(
            "unknown model tag {tag:?}; valid tags: {}",
            MODEL_TAGS.join(", ")
        )));
    }
    let x = bench_input(cfg, seq_len);
    let mut durations = Vec::with_capacity(cfg.reps);
    let mut peak_bytes = 0usize;

    enum Built {
        Nac(Box<NacLayer>, NacConfig),
        Dot(ScaledDotAttention),
        Rnn(PlainRnn),
    }
    let built = match tag {
        "scaled-dot" => Built::Dot(ScaledDotAttention::init(cfg.d_model, cfg.heads, cfg.seed)),
        "plain-rnn" => Built::Rnn(PlainRnn::init(cfg.d_model, cfg.seed)),
        _ => {
            let config = nac_config_for(tag, cfg);
            let layer = NacLayer::init(config.clone())?;
            Built::Nac(Box::new(layer), config)
        }
    };

    let run_once = |b: &Built| -> Result<(f64, usize)> {
        let baseline = current_allocated();
        reset_peak();
        let start = Instant::now();
        match b {
            Built::Nac(layer, _) => {
                let mut tape = Tape::inference();
                let xv = tape.leaf(x.clone());
                let y = layer.forward(&mut tape, &xv, None)?;
                std::hint::black_box(y.tensor().data()[0]);
            }
            Built::Dot(m) => {
                let y = m.forward(&x)?;
                std::hint::black_box(y.data()[0]);
            }
            Built::Rnn(m) => {
                let y = m.forward(&x)?;
                std::hint::black_box(y.data()[0]);
            }
        }
        let elapsed = start.elapsed().as_secs_f64();
        Ok((elapsed, peak_allocated().saturating_sub(baseline)))
    };

    for _ in 0..cfg.warmups {
        run_once(&built)?;
    }
    for _ in 0..cfg.reps {
        let (elapsed, peak) = run_once(&built)?;
        durations.push(elapsed);
        peak_bytes = peak_bytes.max(peak);
    }

    let (mean, std) = crate::train::mean_std(&durations);
    let (top_k, mode) = match &built {
        Built::Nac(_, config) => (
            if config.pairwise_full { "full".to_string() } else { config.top_k.to_string() },
            config.mode.name().to_string(),
        ),
        _ => ("-".to_string(), "-".to_string()),
    };
    Ok(BenchRecord {
        model: tag.to_string(),
        seq_len,
        d_model: cfg.d_model,
        heads: cfg.heads,
        top_k,
        mode,
        reps: cfg.reps,
        runtime_mean_s: mean,
        runtime_std_s: std,
        throughput_seq_per_s: cfg.batch as f64 / mean,
        peak_alloc_mb: peak_bytes as f64 / (1024.0 * 1024.0),
    })
}

/// The full grid: every model tag at every sequence length, in order.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for tag in &cfg.models {
        for &t in &cfg.seq_lens {
            out.push(bench_model(tag, cfg, t)?);
        }
    }
    Ok(out)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_tag_is_rejected_with_tag_list() {
        let cfg = BenchConfig::default();
        let err = bench_model("nac-fancy", &cfg, 32).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("nac-fancy") && msg.contains("scaled-dot"));

        let bad = BenchConfig { models: vec!["bogus".to_string()], ..BenchConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn too_few_reps_rejected() {
        let cfg = BenchConfig { reps: 5, ..BenchConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn loglog_slope_recovers_exponents() {
        let quad: Vec<(f64, f64)> = [128.0, 256.0, 512.0]
            .iter()
            .map(|&t: &f64| (t, 3.0 * t * t))
            .collect();
        assert!((loglog_slope(&quad) - 2.0).abs() < 1e-12);
        let lin: Vec<(f64, f64)> = [128.0, 256.0, 512.0].iter().map(|&t| (t, 0.5 * t)).collect();
        assert!((loglog_slope(&lin) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn small_bench_runs_all_tags() {
        let cfg = BenchConfig {
            seq_lens: vec![16],
            d_model: 8,
            heads: 2,
            top_k: 2,
            backbone_units: Some(8),
            ..BenchConfig::default()
        };
        let records = run_bench(&cfg).unwrap();
        assert_eq!(records.len(), MODEL_TAGS.len());
        for r in &records {
            assert!(r.runtime_mean_s > 0.0);
            assert_eq!(r.reps, 10);
        }
        // csv shape sanity
        assert_eq!(records[0].csv_row().split(',').count(), CSV_HEADER.split(',').count());
    }

    #[test]
    fn scaled_dot_matches_manual_single_head() {
        // h = 1 reduces to one softmax(QK^T / sqrt(d)) V
        let m = ScaledDotAttention::init(4, 1, 3);
        let x = Tensor::from_vec(vec![1, 3, 4], (0..12).map(|i| (i as f64 / 7.0).sin()).collect())
            .unwrap();
        let y = m.forward(&x).unwrap();
        let q = tensor::matmul(&x, &m.w_q).unwrap();
        let k = tensor::matmul(&x, &m.w_k).unwrap();
        let v = tensor::matmul(&x, &m.w_v).unwrap();
        let s = tensor::matmul(&q, &tensor::transpose_last2(&k).unwrap()).unwrap().scale(0.5);
        let a = tensor::softmax_lastdim(&s).unwrap();
        let want =
            tensor::matmul(&tensor::matmul(&a, &v).unwrap(), &m.w_o).unwrap();
        for (g, w) in y.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn plain_rnn_scans_sequence() {
        let m = PlainRnn::init(4, 9);
        let x = Tensor::zeros(&[2, 5, 4]);
        let h = m.forward(&x).unwrap();
        assert_eq!(h.shape(), &[2, 4]);
        // zero input and zero bias keeps the state at zero
        for &v in h.data() {
            assert_eq!(v, 0.0);
        }
    }
}
