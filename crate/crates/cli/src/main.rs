use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sesn::autodiff::gradcheck::standard_suite;
use sesn::data::{make_mnist_scale, DigitPool, ScaleDatasetConfig, ScaledDataset, Split};
use sesn::equivariance::{oracle_suite, sweep_equivariance};
use sesn::image::write_pgm;
use sesn::model::{evaluate, train, write_metrics, Classifier, ClassifierConfig, TrainSettings, METRICS_HEADER};
use sesn::timing::bench_layers;
use sesn::{Container, RunConfig, Scalar, SteerableBasis};

/// Scale-equivariant steerable networks on the CPU.
#[derive(Parser, Debug)]
#[command(name = "sesn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// key=value run configuration
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// override one key, e.g. `--set seed=3`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the multi-scale filter basis and store it in a container.
    Basis {
        #[arg(long, value_name = "FILE")]
        spec: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// also write one PGM per function and level
        #[arg(long, value_name = "DIR")]
        pgm: Option<PathBuf>,
    },
    /// Run the depth, downscale and interscale sweeps of the equivariance error.
    CheckEquivariance {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
    },
    /// Compare the fast layers with the literal group convolution.
    OracleCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// added to every analytic gradient entry; a nonzero value must fail
        #[arg(long, default_value_t = 0.0)]
        inject_fault: f64,
    },
    /// Synthesize MNIST-scale realizations from the IDX files.
    MakeDataset {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// comma-separated realization seeds; defaults to `data_seed`
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Train a classifier; writes a checkpoint and per-epoch metrics.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "model.sesn")]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Accuracy of one or more checkpoints.
    Eval {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
        /// thread count; defaults to the one stored in the checkpoint
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Time the scale layers against plain convolutions of matched shape.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Human-readable summary of a container file.
    Dump { file: PathBuf },
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut run = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    for o in overrides {
        let Some((k, v)) = o.split_once('=') else { bail!(UsageError(format!("override `{o}` is not KEY=VALUE"))) };
        run.set(k.trim(), v.trim()).map_err(|e| UsageError(e.to_string()))?;
    }
    Ok(run)
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Outcome of a command that checks something.
enum Verdict {
    Pass,
    Fail,
}

fn header(run: &RunConfig, source: Option<&Path>) -> Result<()> {
    println!("seed={}", run.int("seed"));
    println!("threads={}", rayon::current_num_threads());
    println!("config={}", source.map_or("defaults".to_string(), |p| p.display().to_string()));
    for o in run.overrides() {
        println!("config.{o}");
    }
    Ok(())
}

fn setup(cfg: &ConfigArgs) -> Result<RunConfig> {
    let run = load_config(cfg.config.as_deref(), &cfg.overrides)?;
    init_threads(run.threads()?)?;
    header(&run, cfg.config.as_deref())?;
    Ok(run)
}

fn init_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("starting the worker pool")
}

fn cmd_basis(spec: Option<&Path>, overrides: &[String], out: &Path, pgm: Option<&Path>) -> Result<Verdict> {
    let run = load_config(spec, overrides)?;
    init_threads(run.threads()?)?;
    header(&run, spec)?;
    let basis = SteerableBasis::build(run.basis_spec().map_err(|e| UsageError(e.to_string()))?)?;
    let mut c = Container::new();
    basis.write_to(&mut c)?;
    c.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!("out={}", out.display());
    println!("tensor=basis.data shape={:?}", basis.data().shape());
    if let Some(dir) = pgm {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let v = basis.filter_size();
        let mut count = 0;
        for n in 0..basis.num_functions() {
            for l in 0..basis.num_levels() {
                let (a, b) = basis.orders()[n];
                write_pgm(dir.join(format!("psi_{n:02}_h{a}{b}_level{l}.pgm")), basis.slice(n, l), v, v)?;
                count += 1;
            }
        }
        println!("pgm_files={count}");
    }
    Ok(Verdict::Pass)
}

fn cmd_check_equivariance(cfg: &ConfigArgs, out: &Path) -> Result<Verdict> {
    let run = setup(cfg)?;
    let start = std::time::Instant::now();
    let mut report = sweep_equivariance(&run.sweep_config())?;
    report.header.extend(run.overrides().into_iter().map(|o| format!("config.{o}")));
    std::fs::write(out, report.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    for r in &report.records {
        println!("sweep={} x={} delta_mean={:.6e} delta_std={:.6e} trials={}", r.sweep, r.x, r.delta_mean, r.delta_std, r.trials);
    }
    let mut ok = true;
    for c in report.shape_checks(0.08, 5.0) {
        println!("check={} passed={} detail=\"{}\"", c.name, c.passed, c.detail);
        ok &= c.passed;
    }
    println!("wall_seconds={:.1}", start.elapsed().as_secs_f64());
    println!("out={}", out.display());
    Ok(if ok { Verdict::Pass } else { Verdict::Fail })
}

fn cmd_oracle_check(cfg: &ConfigArgs) -> Result<Verdict> {
    let run = setup(cfg)?;
    let (instances, seed) = (run.usize("oracle_instances"), run.int("seed"));
    let (cases, tol) = match run.raw("precision") {
        "f32" => (oracle_suite::<f32>(instances, seed)?, 1e-5),
        _ => (oracle_suite::<f64>(instances, seed)?, 1e-12),
    };
    println!("precision={} tolerance={tol:e} instances={}", run.raw("precision"), cases.len());
    for op in ["conv_t_h", "conv_h_h", "conv_h_h_interscale"] {
        let worst = cases.iter().filter(|c| c.name.split('#').next() == Some(op)).map(|c| c.rel_error).fold(0.0, f64::max);
        println!("op={op} worst_rel_error={worst:.3e}");
    }
    let failing: Vec<_> = cases.iter().filter(|c| c.rel_error.is_nan() || c.rel_error > tol).collect();
    for c in &failing {
        println!("failed=\"{}\" rel_error={:.3e}", c.name, c.rel_error);
    }
    println!("passed={}", failing.is_empty());
    Ok(if failing.is_empty() { Verdict::Pass } else { Verdict::Fail })
}

fn cmd_gradcheck(cfg: &ConfigArgs, fault: f64) -> Result<Verdict> {
    let run = setup(cfg)?;
    let tol = 1e-6;
    let seeds = run.usize("gradcheck_seeds") as u64;
    let base = run.int("seed");
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut failing = Vec::new();
    for seed in base..base + seeds {
        for (k, r) in standard_suite(seed, fault)?.into_iter().enumerate() {
            if !r.passed(tol) {
                failing.push(format!("{}@seed{seed}", r.name));
            }
            match worst.get_mut(k) {
                Some(w) => w.1 = w.1.max(r.max_rel_error),
                None => worst.push((r.name, r.max_rel_error)),
            }
        }
    }
    println!("seeds={seeds} tolerance={tol:e} injected_fault={fault:e}");
    for (name, e) in &worst {
        println!("op={name} worst_rel_error={e:.3e}");
    }
    for f in &failing {
        println!("failed={f}");
    }
    println!("passed={}", failing.is_empty());
    Ok(if failing.is_empty() { Verdict::Pass } else { Verdict::Fail })
}

fn dataset_config(run: &RunConfig, seed: u64) -> ScaleDatasetConfig {
    let base = match run.raw("split") {
        "full" => ScaleDatasetConfig::full(seed),
        _ => ScaleDatasetConfig::desk(seed),
    };
    ScaleDatasetConfig { resolution: run.usize("resolution"), ..base }
}

fn load_pool(run: &RunConfig) -> Result<DigitPool> {
    let dir = run.raw("data_dir");
    DigitPool::load_mnist_dir(dir).with_context(|| format!("reading MNIST from {dir}"))
}

fn cmd_make_dataset(cfg: &ConfigArgs, seeds: &[u64], out: &Path) -> Result<Verdict> {
    let run = setup(cfg)?;
    let pool = load_pool(&run)?;
    println!("source_images={}", pool.len());
    let seeds = if seeds.is_empty() { vec![run.int("data_seed")] } else { seeds.to_vec() };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for seed in seeds {
        let dc = dataset_config(&run, seed);
        let ds = make_mnist_scale(&pool, &dc)?;
        let path = out.join(format!("mnist_scale_{}_r{}_seed{seed}.sesn", run.raw("split"), dc.resolution));
        ds.save(&path).with_context(|| format!("writing {}", path.display()))?;
        println!("dataset={} seed={seed} train={} val={} test={}", path.display(), dc.train, dc.val, dc.test);
    }
    Ok(Verdict::Pass)
}

fn resolve_dataset(run: &RunConfig, explicit: Option<&Path>) -> Result<ScaledDataset> {
    let path = explicit.map(Path::to_path_buf).or_else(|| (!run.raw("dataset").is_empty()).then(|| PathBuf::from(run.raw("dataset"))));
    match path {
        Some(p) => {
            println!("dataset={}", p.display());
            ScaledDataset::load(&p).with_context(|| format!("reading {}", p.display()))
        }
        None => {
            let seed = run.int("data_seed");
            println!("dataset=generated split={} data_seed={seed}", run.raw("split"));
            Ok(make_mnist_scale(&load_pool(run)?, &dataset_config(run, seed))?)
        }
    }
}

fn train_with<T: Scalar>(run: &RunConfig, data: &ScaledDataset, out: &Path, metrics: Option<&Path>) -> Result<()> {
    let cfg = ClassifierConfig::from_run(run).map_err(|e| UsageError(e.to_string()))?;
    println!("variant={} parameters={} precision={}", cfg.variant, cfg.num_parameters(), T::NAME);
    let settings = TrainSettings::from_run(run);
    let (model, rows) = train::<T>(cfg, data, &settings, |r| {
        println!("epoch={} split={} loss={:.6} accuracy={:.6} lr={:e} wall_seconds={:.3}", r.epoch, r.split, r.loss, r.accuracy, r.lr, r.wall_seconds);
    })?;
    model.to_container(run)?.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!("checkpoint={}", out.display());
    if let Some(path) = metrics {
        let head = vec![format!("seed={}", run.int("seed")), format!("threads={}", rayon::current_num_threads())];
        write_metrics(path, &head, &rows)?;
        println!("metrics={} header={METRICS_HEADER}", path.display());
    }
    let test = evaluate(&model, data, Split::Test, 256)?;
    println!("test_accuracy={:.6} test_loss={:.6} test_count={}", test.accuracy, test.loss, test.count);
    Ok(())
}

fn cmd_train(cfg: &ConfigArgs, dataset: Option<&Path>, out: &Path, metrics: Option<&Path>) -> Result<Verdict> {
    let run = setup(cfg)?;
    let data = resolve_dataset(&run, dataset)?;
    match run.raw("precision") {
        "f32" => train_with::<f32>(&run, &data, out, metrics)?,
        _ => train_with::<f64>(&run, &data, out, metrics)?,
    }
    Ok(Verdict::Pass)
}

fn eval_with<T: Scalar>(c: &Container, data: &ScaledDataset, split: Split) -> Result<f64> {
    let (model, _) = Classifier::<T>::from_container(c)?;
    let e = evaluate(&model, data, split, 256)?;
    println!("accuracy={:.6} loss={:.6} count={}", e.accuracy, e.loss, e.count);
    Ok(e.accuracy)
}

fn cmd_eval(checkpoints: &[PathBuf], dataset: Option<&Path>, split: &str, threads: Option<usize>) -> Result<Verdict> {
    let containers: Vec<Container> = checkpoints
        .iter()
        .map(|p| Container::load(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<_>>()?;
    let run = RunConfig::parse(&containers[0].text("run_config")?)?;
    let n = match threads {
        Some(n) => n,
        None => run.threads()?,
    };
    init_threads(n)?;
    header(&run, Some(&checkpoints[0]))?;
    let data = resolve_dataset(&run, dataset)?;
    let split = match split {
        "train" => Split::Train,
        "val" => Split::Val,
        _ => Split::Test,
    };
    let mut accs = Vec::new();
    for (path, c) in checkpoints.iter().zip(&containers) {
        println!("checkpoint={}", path.display());
        let precision = RunConfig::parse(&c.text("run_config")?)?.raw("precision").to_string();
        accs.push(match precision.as_str() {
            "f32" => eval_with::<f32>(c, &data, split)?,
            _ => eval_with::<f64>(c, &data, split)?,
        });
    }
    let (mean, std) = sesn::equivariance::mean_std(&accs);
    println!("error_percent=\"{:.2} ± {:.2}\" checkpoints={}", 100.0 * (1.0 - mean), 100.0 * std, accs.len());
    Ok(Verdict::Pass)
}

fn cmd_bench(cfg: &ConfigArgs) -> Result<Verdict> {
    let run = setup(cfg)?;
    let bc = run.bench_config().map_err(|e| UsageError(e.to_string()))?;
    println!("precision={} batch={} c_in={} c_out={} size={} n_scales={} filter_size={}", run.raw("precision"), bc.batch, bc.c_in, bc.c_out, bc.size, bc.basis.scale_grid.num_levels(), bc.basis.filter_size);
    let report = match run.raw("precision") {
        "f32" => bench_layers::<f32>(&bc)?,
        _ => bench_layers::<f64>(&bc)?,
    };
    for line in report.lines() {
        println!("{line}");
    }
    Ok(Verdict::Pass)
}

fn cmd_dump(file: &Path) -> Result<Verdict> {
    let c = Container::load(file).with_context(|| format!("reading {}", file.display()))?;
    println!("file={} tensors={}", file.display(), c.len());
    print!("{}", c.summary());
    if let Ok(text) = c.text("run_config") {
        for line in text.lines().filter(|l| !l.starts_with('#')) {
            println!("run_config.{}", line.replace(" = ", "="));
        }
    }
    Ok(Verdict::Pass)
}

fn run(cli: Cli) -> Result<Verdict> {
    match &cli.command {
        Command::Basis { spec, overrides, out, pgm } => cmd_basis(spec.as_deref(), overrides, out, pgm.as_deref()),
        Command::CheckEquivariance { cfg, out } => cmd_check_equivariance(cfg, out),
        Command::OracleCheck { cfg } => cmd_oracle_check(cfg),
        Command::Gradcheck { cfg, inject_fault } => cmd_gradcheck(cfg, *inject_fault),
        Command::MakeDataset { cfg, seeds, out } => cmd_make_dataset(cfg, seeds, out),
        Command::Train { cfg, dataset, out, metrics } => cmd_train(cfg, dataset.as_deref(), out, metrics.as_deref()),
        Command::Eval { checkpoints, dataset, split, threads } => cmd_eval(checkpoints, dataset.as_deref(), split, *threads),
        Command::Bench { cfg } => cmd_bench(cfg),
        Command::Dump { file } => cmd_dump(file),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Verdict::Pass) => ExitCode::SUCCESS,
        Ok(Verdict::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.chain().any(|c| c.is::<UsageError>() || matches!(c.downcast_ref::<sesn::Error>(), Some(sesn::Error::Config { .. })));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
