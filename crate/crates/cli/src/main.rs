use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use uvae_autograd::set_parallel;
use uvae_core::checkpoint::Checkpoint;
use uvae_core::config::{RunConfig, DATA_ROOT_ENV};
use uvae_core::data::list_images;
use uvae_core::diagnose::{run_diagnostics, DiagnoseConfig};
use uvae_core::evaluate::{evaluate_model, evaluate_synthetic, load_paired_folder, load_pairs};
use uvae_core::metrics::InvarianceConfig;
use uvae_core::preprocess::SigmaSpec;
use uvae_core::synthesis::{build_paired_dataset, Method, OutputFormat, SynthesisConfig};
use uvae_core::toy::{write_toy_dataset, NoiseModel};
use uvae_core::train::{run_training, TrainOptions};
use uvae_core::CoreError;

/// Exit code for invalid configuration or arguments.
const EXIT_CONFIG: u8 = 2;
/// Exit code for a run that started and then failed.
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "uvae", version, about = "Learn image degradations from unpaired clean and corrupted sets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a TOML run config.
    Train(TrainArgs),
    /// Generate a paired dataset from a checkpoint.
    Synthesize(SynthesizeArgs),
    /// Score synthetic corruptions against real pairs.
    Evaluate(EvaluateArgs),
    /// Run the analytic self-check battery.
    Diagnose(DiagnoseArgs),
    /// Write a smooth synthetic toy dataset.
    ToyData(ToyDataArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    strict_determinism: bool,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Validate everything and exit without writing.
    #[arg(long)]
    dry_run: bool,
    /// Root for relative data folders; defaults to the config file's directory.
    #[arg(long, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
    /// Print a progress line every this many iterations (0 disables).
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    C2n,
    N2c,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Png8,
    Npy,
}

#[derive(Args, Debug)]
struct SynthesizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Folder of input images: clean for C2N, corrupted for N2C.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "c2n")]
    method: MethodArg,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Pre-process level, `S` or `LO,HI`. Defaults to the training level of the input domain.
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long, value_enum, default_value = "png8")]
    format: FormatArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run config whose architecture the checkpoint must match.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    strict_determinism: bool,
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Paired folder with `clean/` and `noisy/` (or `degraded/`).
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Score these corrupted images instead of generating them.
    #[arg(long)]
    synthetic: Option<PathBuf>,
    /// Writes `per_image.csv`, `summary.tsv` and `report.json` here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long)]
    sigma: Option<String>,
    /// Also run the content-invariance MMD protocol (needs a checkpoint).
    #[arg(long)]
    invariance: bool,
    #[arg(long, default_value_t = 128)]
    invariance_crop: usize,
    #[arg(long, default_value_t = 10)]
    invariance_draws: usize,
    #[arg(long, default_value_t = 500)]
    permutations: usize,
    #[arg(long)]
    strict_determinism: bool,
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Writes `diagnose.json` here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args, Debug)]
struct ToyDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    train: usize,
    #[arg(long, default_value_t = 100)]
    val: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    /// `gaussian:SIGMA` (0-255 scale) or `poisson-gaussian:A,B` (variance a·x + b).
    #[arg(long, default_value = "gaussian:25")]
    noise: String,
    #[arg(long)]
    dry_run: bool,
}

/// Marks an error as a configuration problem.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Config(_) | CoreError::Incompatible(_) | CoreError::Argument(_) => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            };
        }
    }
    EXIT_RUNTIME
}

fn parse_sigma(text: &str) -> Result<SigmaSpec> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let num = |s: &str| s.parse::<f64>().map_err(|_| config_err(format!("invalid noise level {s:?}")));
    let spec = match parts.as_slice() {
        [s] => SigmaSpec::Fixed(num(s)?),
        [lo, hi] => SigmaSpec::Range([num(lo)?, num(hi)?]),
        _ => return Err(config_err(format!("expected S or LO,HI, got {text:?}"))),
    };
    spec.validate("sigma")?;
    Ok(spec)
}

fn parse_noise(text: &str) -> Result<NoiseModel> {
    let bad = || config_err(format!("expected gaussian:SIGMA or poisson-gaussian:A,B, got {text:?}"));
    let (kind, args) = text.split_once(':').ok_or_else(bad)?;
    let vals: Vec<f64> =
        args.split(',').map(|s| s.trim().parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
    match (kind, vals.as_slice()) {
        ("gaussian", [s]) if *s >= 0.0 => Ok(NoiseModel::Gaussian { sigma: *s }),
        ("poisson-gaussian", [a, b]) if *a >= 0.0 && *b >= 0.0 => Ok(NoiseModel::PoissonGaussian { a: *a, b: *b }),
        _ => Err(bad()),
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint<f32>> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config, args.data_root.as_deref())
        .with_context(|| format!("reading config {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    if let Some(r) = &args.resume {
        let ck = load_checkpoint(r)?;
        ck.check_architecture(&cfg.model)?;
    }
    if args.dry_run {
        let n_clean = list_images(&cfg.data.clean)?.len();
        let n_corrupt = list_images(&cfg.data.corrupted)?.len();
        println!(
            "config ok: {n_clean} clean and {n_corrupt} corrupted images, {} iterations",
            cfg.optimizer.total_iters
        );
        return Ok(());
    }
    let options =
        TrainOptions { out_dir: args.out.clone(), strict_determinism: args.strict_determinism, resume: args.resume };
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    std::fs::write(args.out.join("config.toml"), cfg.to_toml_string()?)
        .with_context(|| format!("writing config snapshot to {}", args.out.display()))?;
    let every = args.log_every;
    let outcome = run_training::<f32>(&cfg, &options, |r| {
        if every > 0 && (r.iteration % every == 0 || r.iteration + 1 == cfg.optimizer.total_iters) {
            println!(
                "iter {:>7}  total {:.4e}  recon_clean {:.4e}  recon_noisy {:.4e}  kl {:.4e}  anneal {:.3}  lr {:.2e}",
                r.iteration, r.total, r.recon_clean, r.recon_noisy, r.kl_total, r.anneal_weight, r.lr
            );
        }
    })?;
    println!("final checkpoint: {}", outcome.final_checkpoint.display());
    Ok(())
}

fn synthesize(args: SynthesizeArgs) -> Result<()> {
    set_parallel(!args.strict_determinism);
    let ck = load_checkpoint(&args.checkpoint)?;
    if let Some(p) = &args.config {
        let cfg = RunConfig::load(p, None).with_context(|| format!("reading config {}", p.display()))?;
        ck.check_architecture(&cfg.model)?;
    }
    let method = match args.method {
        MethodArg::C2n => Method::C2N,
        MethodArg::N2c => Method::N2C,
    };
    let sigma = match &args.sigma {
        Some(s) => parse_sigma(s)?,
        None if method == Method::C2N => ck.config.task.sigma_x,
        None => ck.config.task.sigma_y,
    };
    let output_format = match args.format {
        FormatArg::Png8 => OutputFormat::Png8,
        FormatArg::Npy => OutputFormat::Npy,
    };
    let cfg = SynthesisConfig { method, temperature: args.temperature, sigma_x: sigma, output_format, seed: args.seed };
    cfg.validate()?;
    let model = ck.model()?;
    if args.dry_run {
        let n = list_images(&args.input)?.len();
        println!("config ok: {n} input images, checkpoint at iteration {}", ck.iteration);
        return Ok(());
    }
    let records = build_paired_dataset(&args.input, &args.out, &model, &cfg, ck.normalization.as_ref())?;
    println!("wrote {} pairs to {}", records.len(), args.out.display());
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    set_parallel(!args.strict_determinism);
    let real = load_paired_folder(&args.pairs)?;
    let ck = args.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    if args.synthetic.is_none() && ck.is_none() {
        return Err(config_err("evaluate needs --checkpoint or --synthetic"));
    }
    if args.invariance && ck.is_none() {
        return Err(config_err("--invariance needs --checkpoint"));
    }
    let sigma = args.sigma.as_deref().map(parse_sigma).transpose()?;
    if args.dry_run {
        println!("config ok: {} pairs", real.names.len());
        return Ok(());
    }

    let invariance_cfg = |ck: &Checkpoint<f32>| InvarianceConfig {
        crop: args.invariance_crop,
        draws: args.invariance_draws,
        sigma_x: ck.config.task.sigma_x,
        sigma_y: ck.config.task.sigma_y,
        permutations: args.permutations,
        seed: args.seed,
        ..Default::default()
    };
    let report = match (&args.synthetic, &ck) {
        (Some(dir), _) => {
            let dir = if dir.join("degraded").is_dir() { dir.join("degraded") } else { dir.clone() };
            let matched = load_pairs(&args.pairs.join("clean"), &dir)?;
            let synth: Vec<_> = matched.noisy;
            let mut report = evaluate_synthetic(&real, &synth)?;
            if let (true, Some(ck)) = (args.invariance, &ck) {
                let pairs: Vec<_> = real.clean.iter().cloned().zip(real.noisy.iter().cloned()).collect();
                report.invariance =
                    Some(uvae_core::metrics::invariance_mmd_protocol(&ck.model()?, &pairs, &invariance_cfg(ck))?);
            }
            report
        }
        (None, Some(ck)) => {
            let cfg = SynthesisConfig {
                method: Method::C2N,
                temperature: args.temperature,
                sigma_x: sigma.unwrap_or(ck.config.task.sigma_x),
                output_format: OutputFormat::Png8,
                seed: args.seed,
            };
            let inv = args.invariance.then(|| invariance_cfg(ck));
            evaluate_model(&real, &ck.model()?, &cfg, ck.normalization.as_ref(), inv.as_ref())?
        }
        (None, None) => unreachable!("checked above"),
    };

    print!("{}", report.summary());
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        std::fs::write(out.join("per_image.csv"), report.to_csv())?;
        std::fs::write(out.join("summary.tsv"), report.summary())?;
        std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn diagnose(args: DiagnoseArgs) -> Result<()> {
    let cfg = DiagnoseConfig { seed: args.seed, ..Default::default() };
    if args.dry_run {
        println!("config ok");
        return Ok(());
    }
    let report = run_diagnostics(&cfg)?;
    println!("sigma_x\tsigma_y\t|n|\tkl\tl1_bound");
    for r in &report.sweep {
        println!("{}\t{}\t{}\t{:.6e}\t{:.6e}", r.sigma_x, r.sigma_y, r.shift_norm, r.kl, r.l1_bound);
    }
    for c in &report.checks {
        println!("{}  {}  ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        std::fs::write(out.join("diagnose.json"), serde_json::to_string_pretty(&report)?)?;
    }
    if !report.all_passed() {
        bail!("diagnostic battery failed");
    }
    Ok(())
}

fn toy_data(args: ToyDataArgs) -> Result<()> {
    let noise = parse_noise(&args.noise)?;
    if args.size == 0 || args.train == 0 || !(args.channels == 1 || args.channels == 3) {
        return Err(config_err("size and train must be positive; channels must be 1 or 3"));
    }
    if args.dry_run {
        println!("config ok");
        return Ok(());
    }
    write_toy_dataset(&args.out, args.seed, args.train, args.val, args.size, args.channels, noise)?;
    println!("wrote toy dataset to {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Synthesize(a) => synthesize(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Diagnose(a) => diagnose(a),
        Command::ToyData(a) => toy_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
