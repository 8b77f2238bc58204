//! Command-line entry point: property verification, training/evaluation on
//! the synthetic event task, runtime/memory benchmarks, and ablation sweeps.
//!
//! Every command honors `--seed` and writes reproducible artifacts; the
//! `NAC_THREADS` environment variable caps worker threads where work fans
//! out. Benchmark timing columns are the one exception to bit-exact
//! reproducibility (wall-clock noise); peak-allocation columns are exact.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use nac::attention::Mode;
use nac::bench::{self, BenchConfig, TrackingAlloc};
use nac::checkpoint;
use nac::error::Error;
use nac::train::{self, gen_event_task, mean_std, Model, TrainConfig};
use nac::verify::{self, Suite};

#[global_allocator]
static ALLOC: TrackingAlloc = TrackingAlloc;

#[derive(Parser)]
#[command(
    name = "nac",
    about = "Continuous-time attention engine: verify, train, eval, bench, sweep",
    after_help = "Environment: NAC_THREADS caps the worker count for fanned-out jobs."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run randomized property campaigns and report one CSV row per property.
    Verify {
        /// One of: bounds, decay, agreement, gradcheck, layer, all.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 10_000)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report CSV under this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on the synthetic event task and write checkpoint + loss curve.
    Train {
        /// JSON file holding a train config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the seed in the config (both data and init).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Re-evaluate a saved run directory and check the recorded accuracy.
    Eval {
        /// A run directory produced by `train`.
        #[arg(long)]
        run: PathBuf,
    },
    /// Runtime / peak-allocation scaling benchmark.
    Bench {
        /// JSON file holding a bench config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Mode x top-k training grid; one CSV row per cell.
    Sweep {
        /// JSON file holding a sweep config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

#[derive(serde::Serialize, serde::Deserialize, Clone)]
struct SweepConfig {
    base: TrainConfig,
    modes: Vec<Mode>,
    /// Top-k budgets; `null` means the full pairwise path.
    top_ks: Vec<Option<usize>>,
    seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            base: TrainConfig::default(),
            modes: vec![Mode::Exact, Mode::Euler, Mode::Steady],
            top_ks: vec![Some(2), Some(8), None],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct RunManifest {
    config: TrainConfig,
    test_accuracy: f64,
    checkpoint: String,
    curve: String,
    dataset: String,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Usage-level failure: print and exit 2, mirroring clap's own convention.
fn usage_error(msg: &str) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(2)
}

fn load_json_config<T: serde::de::DeserializeOwned + Default>(
    path: &Option<PathBuf>,
) -> Result<T, String> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("bad config {}: {e}", p.display()))
        }
    }
}

fn run_dir(out: &Path, kind: &str, config_json: &str, seed: u64) -> PathBuf {
    out.join(format!("{kind}-{:08x}-s{seed}", fnv1a(config_json.as_bytes()) as u32))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Verify { suite, trials, seed, out } => cmd_verify(&suite, trials, seed, out),
        Cmd::Train { config, seed, out } => cmd_train(config, seed, &out),
        Cmd::Eval { run } => cmd_eval(&run),
        Cmd::Bench { config, seed, out } => cmd_bench(config, seed, &out),
        Cmd::Sweep { config, seed, out } => cmd_sweep(config, seed, &out),
    }
}

fn cmd_verify(suite: &str, trials: u64, seed: u64, out: Option<PathBuf>) -> ExitCode {
    let suite = match Suite::from_str(suite) {
        Ok(s) => s,
        Err(e) => return usage_error(&e.to_string()),
    };
    let rows = match verify::run_suite(suite, trials, seed) {
        Ok(rows) => rows,
        Err(Error::Argument(msg)) => return usage_error(&msg),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    let mut report = String::from(verify::CSV_HEADER);
    report.push('\n');
    for r in &rows {
        report.push_str(&r.csv_row());
        report.push('\n');
    }
    print!("{report}");
    if let Some(dir) = out {
        if let Err(e) = fs::create_dir_all(&dir)
            .and_then(|_| fs::write(dir.join("verify_report.csv"), &report))
        {
            eprintln!("error: cannot write report: {e}");
            return ExitCode::FAILURE;
        }
    }
    let mut failed = false;
    for r in rows.iter().filter(|r| !r.pass()) {
        failed = true;
        eprintln!(
            "FAIL {}: {} violations, worst margin {:.3e}",
            r.property, r.violations, r.worst_margin
        );
        if let Some(replay) = &r.replay {
            eprintln!("  worst trial: {replay}");
        }
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn cmd_train(config: Option<PathBuf>, seed: Option<u64>, out: &Path) -> ExitCode {
    let mut config: TrainConfig = match load_json_config(&config) {
        Ok(c) => c,
        Err(msg) => return usage_error(&msg),
    };
    if let Some(s) = seed {
        config.seed = s;
        config.nac.seed = s;
    }
    let config_json = match serde_json::to_string_pretty(&config) {
        Ok(j) => j,
        Err(e) => return usage_error(&format!("config not serializable: {e}")),
    };
    let dir = run_dir(out, "train", &config_json, config.seed);
    if let Err(e) = fs::create_dir_all(&dir) {
        eprintln!("error: cannot create run dir: {e}");
        return ExitCode::FAILURE;
    }

    let result = (|| -> nac::Result<(f64, PathBuf)> {
        let dataset = gen_event_task(config.n_sequences, config.base_length, config.seed)?;
        let mut model = Model::init(&config.nac)?;
        let outcome = train::train_bptt(&mut model, &dataset, &config)?;
        train::write_curve_csv(&dir.join("curve.csv"), &outcome.curve)?;
        train::save_jsonl(&dir.join("dataset.jsonl"), &dataset.test)?;
        let named = model.named_tensors();
        let refs: Vec<(String, &nac::Tensor)> =
            named.iter().map(|(n, t)| (n.clone(), t)).collect();
        checkpoint::save(&dir.join("model.ckpt"), &refs)?;
        let manifest = RunManifest {
            config: config.clone(),
            test_accuracy: outcome.test_accuracy,
            checkpoint: "model.ckpt".to_string(),
            curve: "curve.csv".to_string(),
            dataset: "dataset.jsonl".to_string(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok((outcome.test_accuracy, dir.clone()))
    })();

    match result {
        Ok((acc, dir)) => {
            println!("run dir: {}", dir.display());
            println!("test accuracy: {acc:.4}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_eval(run: &Path) -> ExitCode {
    let result = (|| -> nac::Result<(f64, f64, [[usize; 2]; 2])> {
        let manifest: RunManifest =
            serde_json::from_str(&fs::read_to_string(run.join("manifest.json"))?)?;
        let config = manifest.config;
        let dataset = gen_event_task(config.n_sequences, config.base_length, config.seed)?;
        let mut model = Model::init(&config.nac)?;
        let loaded = checkpoint::load(&run.join(&manifest.checkpoint))?;
        model.load_named_tensors(&loaded)?;
        let (acc, confusion) = train::evaluate(&model, &dataset.test, &dataset)?;
        Ok((acc, manifest.test_accuracy, confusion))
    })();
    match result {
        Ok((acc, recorded, confusion)) => {
            println!("test accuracy: {acc:.4} (recorded {recorded:.4})");
            println!("confusion: {confusion:?}");
            if (acc - recorded).abs() < 1e-12 {
                println!("matches recorded accuracy");
                ExitCode::SUCCESS
            } else {
                eprintln!("error: accuracy does not match the recorded value");
                ExitCode::FAILURE
            }
        }
        Err(Error::Io(e)) => usage_error(&format!("cannot read run directory: {e}")),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_bench(config: Option<PathBuf>, seed: Option<u64>, out: &Path) -> ExitCode {
    let mut config: BenchConfig = match load_json_config(&config) {
        Ok(c) => c,
        Err(msg) => return usage_error(&msg),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Err(e) = config.validate() {
        return usage_error(&e.to_string());
    }
    if !bench::tracking_active() {
        eprintln!("warning: tracking allocator inactive; peak columns will be zero");
    }
    let records = match bench::run_bench(&config) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    let mut csv = String::from(bench::CSV_HEADER);
    csv.push('\n');
    for r in &records {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    print!("{csv}");
    let config_json = serde_json::to_string(&config).expect("config serializes");
    let dir = run_dir(out, "bench", &config_json, config.seed);
    if let Err(e) =
        fs::create_dir_all(&dir).and_then(|_| fs::write(dir.join("bench.csv"), &csv))
    {
        eprintln!("error: cannot write bench csv: {e}");
        return ExitCode::FAILURE;
    }
    println!("run dir: {}", dir.display());
    ExitCode::SUCCESS
}

fn cmd_sweep(config: Option<PathBuf>, seed: Option<u64>, out: &Path) -> ExitCode {
    let mut config: SweepConfig = match load_json_config(&config) {
        Ok(c) => c,
        Err(msg) => return usage_error(&msg),
    };
    if let Some(s) = seed {
        config.seeds = config.seeds.iter().enumerate().map(|(i, _)| s + i as u64).collect();
        config.base.seed = s;
    }
    if config.seeds.len() < 3 {
        return usage_error("sweep needs at least 3 seeds");
    }
    let config_json = serde_json::to_string_pretty(&config).expect("config serializes");
    let dir = run_dir(out, "sweep", &config_json, config.base.seed);
    if let Err(e) = fs::create_dir_all(&dir) {
        eprintln!("error: cannot create run dir: {e}");
        return ExitCode::FAILURE;
    }

    // one training run per (mode, k, seed), fanned out deterministically
    let mut cells = Vec::new();
    for &mode in &config.modes {
        for &k in &config.top_ks {
            cells.push((mode, k));
        }
    }
    let jobs: Vec<(Mode, Option<usize>, u64)> = cells
        .iter()
        .flat_map(|&(m, k)| config.seeds.iter().map(move |&s| (m, k, s)))
        .collect();
    let base = &config.base;
    let results = nac::parallel::par_map_indexed(jobs.len(), |i| {
        let (mode, k, seed) = jobs[i];
        let mut c = base.clone();
        c.seed = seed;
        c.nac.seed = seed;
        c.nac.mode = mode;
        match k {
            Some(kk) => {
                c.nac.top_k = kk;
                c.nac.pairwise_full = false;
            }
            None => c.nac.pairwise_full = true,
        }
        (|| -> nac::Result<f64> {
            let dataset = gen_event_task(c.n_sequences, c.base_length, seed)?;
            let mut model = Model::init(&c.nac)?;
            Ok(train::train_bptt(&mut model, &dataset, &c)?.test_accuracy)
        })()
    });

    let mut csv = String::from("mode,top_k,seeds,acc_mean,acc_std\n");
    for (ci, &(mode, k)) in cells.iter().enumerate() {
        let mut accs = Vec::new();
        for si in 0..config.seeds.len() {
            match &results[ci * config.seeds.len() + si] {
                Ok(a) => accs.push(*a),
                Err(e) => {
                    eprintln!("error: sweep cell failed: {e}");
                    return ExitCode::FAILURE;
                }
            }
        }
        let (mean, std) = mean_std(&accs);
        let k_label = k.map_or("full".to_string(), |v| v.to_string());
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            mode.name(),
            k_label,
            accs.len(),
            mean,
            std
        ));
    }
    print!("{csv}");
    if let Err(e) = fs::write(dir.join("sweep.csv"), &csv) {
        eprintln!("error: cannot write sweep csv: {e}");
        return ExitCode::FAILURE;
    }
    println!("run dir: {}", dir.display());
    ExitCode::SUCCESS
}
