//! Command-line entry point: train, generate, evaluate, selftest.

use std::io::Write as IoWrite;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use molgen::analysis;
use molgen::chem;
use molgen::config::RunConfig;
use molgen::params::{init_model_params, ParameterStore};
use molgen::real::Real;
use molgen::sampler::{self, CompositionPlan};
use molgen::selfcheck;
use molgen::train::{self, AdamState, TrainError};

#[derive(Parser)]
#[command(
    name = "molgen",
    about = "Autoregressive 3-D molecule generation from distance distributions",
    version
)]
struct Cli {
    /// Plain key = value configuration file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Numeric precision of the model (f32 for speed, f64 for checks).
    #[arg(long, global = true, default_value = "f32")]
    precision: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on an XYZ dataset (file or manifest), writing checkpoints
    /// and a metrics log.
    Train(TrainArgs),
    /// Sample molecules from a trained checkpoint into an XYZ file.
    Generate(GenerateArgs),
    /// Valence/uniqueness/match statistics, or paired RMSD tables.
    Evaluate(EvaluateArgs),
    /// Run the built-in gradient-check and sampler-oracle suites.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct CommonOverrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    features: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    filter_rbf: Option<usize>,
    #[arg(long)]
    grid_extent: Option<f64>,
    #[arg(long)]
    grid_steps: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonOverrides,
    /// XYZ file or manifest of XYZ paths.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    val_interval: Option<u64>,
    #[arg(long)]
    val_samples: Option<usize>,
    /// Fraction of the dataset used for training; the rest is held out.
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Checkpoint output path.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Metrics log path (default: stdout).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: CommonOverrides,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Number of molecules to sample.
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Composition formula; hydrogens are always placed last.
    #[arg(long, default_value = "C7O2H10")]
    composition: String,
    /// Softmax temperature at generation time.
    #[arg(long)]
    temperature: Option<f64>,
    /// Output XYZ path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional per-molecule placement trace file.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonOverrides,
    /// Generated molecules (XYZ).
    #[arg(long)]
    generated: Option<PathBuf>,
    /// Training reference set (XYZ).
    #[arg(long)]
    train: Option<PathBuf>,
    /// Held-out reference set (XYZ).
    #[arg(long)]
    test: Option<PathBuf>,
    /// Bond-distance tolerance factor.
    #[arg(long, default_value_t = analysis::DEFAULT_BOND_TOLERANCE)]
    tol_factor: f64,
    /// Write the machine-readable report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Alternative mode: RMSD per index-aligned pair of two XYZ files.
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    rmsd_pairs: Option<Vec<PathBuf>>,
}

#[derive(Args)]
struct SelftestArgs {
    /// Check every stride-th parameter entry in the gradient suite.
    #[arg(long, default_value_t = 1)]
    stride: usize,
}

/// Exit code 1: configuration/data errors. Exit code 2 is reserved for a
/// non-finite-loss abort.
struct Failure {
    code: i32,
    message: String,
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure { code: 1, message: e.to_string() }
    }
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.precision.as_str() {
        "f32" => run::<f32>(cli),
        "f64" => run::<f64>(cli),
        other => Err(Failure { code: 1, message: format!("unknown precision {other:?}") }),
    };
    match result {
        Ok(code) => std::process::exit(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            std::process::exit(f.code);
        }
    }
}

fn base_config(
    cli_config: &Option<PathBuf>,
    common: &CommonOverrides,
) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = cli_config {
        cfg.apply_file(path)?;
    }
    let kv = |cfg: &mut RunConfig, key: &str, v: Option<String>| -> Result<(), Failure> {
        if let Some(v) = v {
            cfg.apply_kv(key, &v).map_err(|m| Failure { code: 1, message: m })?;
        }
        Ok(())
    };
    kv(&mut cfg, "seed", common.seed.map(|v| v.to_string()))?;
    kv(&mut cfg, "features", common.features.map(|v| v.to_string()))?;
    kv(&mut cfg, "blocks", common.blocks.map(|v| v.to_string()))?;
    kv(&mut cfg, "bins", common.bins.map(|v| v.to_string()))?;
    kv(&mut cfg, "filter_rbf", common.filter_rbf.map(|v| v.to_string()))?;
    kv(&mut cfg, "grid_extent", common.grid_extent.map(|v| v.to_string()))?;
    kv(&mut cfg, "grid_steps", common.grid_steps.map(|v| v.to_string()))?;
    kv(&mut cfg, "threads", common.threads.map(|v| v.to_string()))?;
    Ok(cfg)
}

fn run<R: Real>(cli: Cli) -> Result<i32, Failure> {
    match cli.cmd {
        Cmd::Train(args) => cmd_train::<R>(&cli.config, args),
        Cmd::Generate(args) => cmd_generate::<R>(&cli.config, args),
        Cmd::Evaluate(args) => cmd_evaluate(&cli.config, args),
        Cmd::Selftest(args) => Ok(if selfcheck::run_all(args.stride) { 0 } else { 1 }),
    }
}

fn cmd_train<R: Real>(config: &Option<PathBuf>, args: TrainArgs) -> Result<i32, Failure> {
    let mut cfg = base_config(config, &args.common)?;
    if let Some(v) = args.data {
        cfg.data = Some(v);
    }
    if let Some(v) = args.iters {
        cfg.iters = v;
    }
    if let Some(v) = args.batch {
        cfg.batch = v;
    }
    if let Some(v) = args.val_interval {
        cfg.val_interval = v;
    }
    if let Some(v) = args.val_samples {
        cfg.val_samples = v;
    }
    if let Some(v) = args.train_fraction {
        cfg.train_fraction = v;
    }
    if let Some(v) = args.checkpoint {
        cfg.checkpoint = Some(v);
    }
    if let Some(v) = args.metrics {
        cfg.metrics = Some(v);
    }
    cfg.validate()?;
    eprint!("{}", cfg.echo());

    let data_path = cfg.data.clone().ok_or_else(|| Failure {
        code: 1,
        message: "train needs --data (or `data` in the config file)".into(),
    })?;
    let molecules = chem::load_dataset(&data_path)?;
    let (dataset, heldout) = if cfg.train_fraction < 1.0 {
        chem::split_train_test(molecules, cfg.train_fraction, cfg.seed)
    } else {
        (molecules, Vec::new())
    };

    let (mut store, mut adam, mut rng, start_iter) = match &args.resume {
        Some(path) => {
            let ckpt = train::load_checkpoint::<R>(path)?;
            eprintln!("resumed from {} at iteration {}", path.display(), ckpt.step);
            (ckpt.store, ckpt.adam, ckpt.rng.restore(), ckpt.step)
        }
        None => {
            let store = init_model_params::<R>(&cfg.model, cfg.seed);
            let adam = AdamState::new(&store);
            let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            (store, adam, rng, 0)
        }
    };

    let tcfg = train::TrainConfig {
        batch_size: cfg.batch,
        iterations: cfg.iters,
        val_interval: cfg.val_interval,
        val_samples: cfg.val_samples,
        seed: cfg.seed,
        t_train: cfg.t_train,
        t_val: cfg.t_gen,
        threads: cfg.threads,
    };
    let checkpoint_path = cfg.checkpoint.clone().unwrap_or_else(|| PathBuf::from("molgen.ckpt"));

    let mut metrics: Box<dyn IoWrite> = match &cfg.metrics {
        Some(p) => Box::new(std::fs::File::create(p).map_err(|e| Failure {
            code: 1,
            message: format!("cannot create metrics file {}: {e}", p.display()),
        })?),
        None => Box::new(std::io::stdout()),
    };

    let outcome = train::train(
        &cfg.model,
        &tcfg,
        &dataset,
        &heldout,
        &mut store,
        &mut adam,
        &mut rng,
        start_iter,
        Some(&checkpoint_path),
        metrics.as_mut(),
    );
    match outcome {
        Ok(o) => {
            eprintln!(
                "trained {} iterations; final loss {:.6} over {} terms; checkpoint {}",
                o.iterations_run,
                o.final_loss,
                o.final_terms,
                checkpoint_path.display()
            );
            Ok(0)
        }
        Err(e @ TrainError::NonFiniteLoss { .. }) => {
            eprintln!("error: {e}");
            Ok(2)
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_generate<R: Real>(config: &Option<PathBuf>, args: GenerateArgs) -> Result<i32, Failure> {
    let mut cfg = base_config(config, &args.common)?;
    if let Some(v) = args.checkpoint {
        cfg.checkpoint = Some(v);
    }
    if let Some(t) = args.temperature {
        cfg.t_gen = t;
    }
    cfg.validate()?;

    let ckpt_path = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| Failure { code: 1, message: "generate needs --checkpoint".into() })?;
    let ckpt = train::load_checkpoint::<R>(&ckpt_path)?;
    let store: ParameterStore<R> = ckpt.store;

    let counts = CompositionPlan::parse_formula(&args.composition)?;
    let mut xyz = String::new();
    let mut traces = String::new();
    for i in 0..args.count {
        let sample_seed = cfg.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let plan = CompositionPlan::shuffled(&counts, &mut rng)?;
        let (mol, trace) = sampler::generate(&cfg.model, &store, &plan, cfg.t_gen, &mut rng)?;
        chem::write_xyz_block(&mol, &format!("sample {i} seed {sample_seed}"), &mut xyz);
        if args.trace.is_some() {
            traces.push_str(&format!("# sample {i} seed {sample_seed}\n"));
            traces.push_str(&trace.to_text());
        }
    }
    match &args.out {
        Some(p) => std::fs::write(p, xyz).map_err(|e| Failure {
            code: 1,
            message: format!("cannot write {}: {e}", p.display()),
        })?,
        None => print!("{xyz}"),
    }
    if let Some(p) = &args.trace {
        std::fs::write(p, traces).map_err(|e| Failure {
            code: 1,
            message: format!("cannot write {}: {e}", p.display()),
        })?;
    }
    eprintln!("generated {} molecules of {}", args.count, args.composition);
    Ok(0)
}

fn cmd_evaluate(config: &Option<PathBuf>, args: EvaluateArgs) -> Result<i32, Failure> {
    base_config(config, &args.common)?.validate()?;

    if let Some(pair) = &args.rmsd_pairs {
        let a = chem::load_dataset(&pair[0])?;
        let b = chem::load_dataset(&pair[1])?;
        if a.len() != b.len() {
            return Err(Failure {
                code: 1,
                message: format!("{} vs {} molecules in the two files", a.len(), b.len()),
            });
        }
        println!("pair\trmsd_all\trmsd_heavy");
        for (i, (ma, mb)) in a.iter().zip(&b).enumerate() {
            let all = analysis::kabsch_rmsd(ma, mb, false)?;
            let heavy = analysis::kabsch_rmsd(ma, mb, true)?;
            println!("{i}\t{all:.6}\t{heavy:.6}");
        }
        return Ok(0);
    }

    let generated_path = args.generated.ok_or_else(|| Failure {
        code: 1,
        message: "evaluate needs --generated (or --rmsd-pairs)".into(),
    })?;
    let generated = chem::load_dataset(&generated_path)?;
    let train_set = match &args.train {
        Some(p) => chem::load_dataset(p)?,
        None => Vec::new(),
    };
    let test_set = match &args.test {
        Some(p) => chem::load_dataset(p)?,
        None => Vec::new(),
    };
    let report = analysis::match_statistics(&generated, &train_set, &test_set, args.tol_factor);
    print!("{}", report.human());
    if let Some(p) = &args.report {
        std::fs::write(p, report.machine()).map_err(|e| Failure {
            code: 1,
            message: format!("cannot write {}: {e}", p.display()),
        })?;
    }
    Ok(0)
}
