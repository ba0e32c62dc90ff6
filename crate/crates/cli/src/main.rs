//! `fisher-ae`: train, evaluate and sample Fisher auto-encoders.
//!
//! Stdout carries line-oriented results; progress and logs go to stderr.
//! Failures print one `error code=<n> kind=<kind>: <message>` line to stderr
//! and exit with 2 (config), 3 (numeric) or 4 (I/O).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fisher_ae::checkpoint::Checkpoint;
use fisher_ae::config::{DatasetKind, ExperimentConfig, LossKind};
use fisher_ae::data::{load_datasets, Dataset};
use fisher_ae::eval::{
    latent_cluster_robustness, reconstruction_curve, write_curves_csv, write_pgm_grid, CorruptionKind, Metric,
};
use fisher_ae::nets::AutoEncoder;
use fisher_ae::optim::{build_model, checkpoint_path, load_model, metrics_path, train};
use fisher_ae::svgd::{svgd_sample, SvgdConfig};
use fisher_ae::{gradsuite, Error};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Command {
    /// Train a model; writes model.ckpt and metrics.csv.
    Train,
    /// BCE (or MSE) vs. Gaussian noise variance; writes noise_curve.csv.
    EvalNoise,
    /// BCE (or MSE) vs. masked fraction; writes mask_curve.csv.
    EvalMask,
    /// k-means NMI of latent means vs. noise; writes nmi.csv.
    EvalNmi,
    /// SVGD draws from the prior, decoded; writes samples.pgm.
    Sample,
    /// Finite-difference gradient suites.
    Gradcheck,
    /// Test images above their reconstructions; writes recon_grid.pgm.
    ExportGrid,
}

#[derive(Debug, Parser)]
#[command(name = "fisher-ae", version, about = "Fisher auto-encoder experiments")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
    /// Overrides the seed the subcommand uses (train, eval or svgd).
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to evaluate or sample from (default: <out>/model.ckpt);
    /// for `train`, a checkpoint to resume from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Config(_) => (2, "config"),
            Error::InvalidArgument(_) | Error::Shape { .. } => (2, "invalid"),
            Error::NumericOverflow { .. }
            | Error::NonFiniteLoss(_)
            | Error::NonFiniteGradient { .. }
            | Error::ParticleDivergence { .. }
            | Error::TapeConsumed => (3, "numeric"),
            Error::Io { .. } | Error::Idx { .. } | Error::Checkpoint(_) => (4, "io"),
        };
        Failure {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = f.message.split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("error code={} kind={}: {msg}", f.code, f.kind);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: &Cli) -> CliResult {
    if cli.command == Command::Gradcheck {
        return gradcheck();
    }
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::Train => cfg.train.seed = seed,
            Command::Sample => cfg.svgd.seed = seed,
            _ => cfg.eval.seed = seed,
        }
    }
    if let Ok(dir) = cfg.data.dir.canonicalize() {
        cfg.data.dir = dir;
    }
    cfg.validate()?;
    fs::create_dir_all(&cli.out).map_err(|e| Error::Io {
        path: cli.out.clone(),
        source: e,
    })?;
    write_file(&cli.out.join("resolved-config.toml"), cfg.to_toml().as_bytes())?;

    match cli.command {
        Command::Train => run_train(cli, &cfg),
        Command::EvalNoise => run_curve(cli, &cfg, CorruptionKind::Gaussian),
        Command::EvalMask => run_curve(cli, &cfg, CorruptionKind::Mask),
        Command::EvalNmi => run_nmi(cli, &cfg),
        Command::Sample => run_sample(cli, &cfg),
        Command::ExportGrid => run_export_grid(cli, &cfg),
        Command::Gradcheck => unreachable!("handled above"),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    fs::write(path, bytes).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn gradcheck() -> CliResult {
    let reports = gradsuite::run_all()?;
    let failed = reports.iter().filter(|r| !r.passed()).count();
    for r in &reports {
        println!("{r}");
    }
    if failed > 0 {
        return Err(Failure {
            code: 3,
            kind: "gradcheck",
            message: format!("{failed} of {} suites above threshold", reports.len()),
        });
    }
    Ok(())
}

fn run_train(cli: &Cli, cfg: &ExperimentConfig) -> CliResult {
    let (train_set, _) = load_datasets(&cfg.data)?;
    log::info!("training on {} items of dimension {}", train_set.len(), train_set.dim());
    let resume = cli.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let outcome = train(cfg, &train_set, Some(&cli.out), resume.as_ref())?;
    for m in &outcome.metrics {
        println!(
            "epoch {} loss_total={} loss_div={} loss_rec={} loss_stab={}",
            m.epoch, m.loss_total, m.loss_div, m.loss_rec, m.loss_stab
        );
    }
    println!("checkpoint {}", checkpoint_path(&cli.out).display());
    println!("metrics {}", metrics_path(&cli.out).display());
    Ok(())
}

fn model_name(cfg: &ExperimentConfig) -> &'static str {
    match cfg.model.loss {
        LossKind::Fisher => "fisher",
        LossKind::Elbo => "vae",
    }
}

fn trained_model(cli: &Cli, cfg: &ExperimentConfig, data_dim: usize) -> CliResult<AutoEncoder> {
    let path = cli.checkpoint.clone().unwrap_or_else(|| checkpoint_path(&cli.out));
    Ok(load_model(cfg, data_dim, &Checkpoint::load(&path)?)?)
}

fn test_set(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    Ok(load_datasets(&cfg.data)?.1)
}

fn run_curve(cli: &Cli, cfg: &ExperimentConfig, kind: CorruptionKind) -> CliResult {
    let test = test_set(cfg)?;
    let model = trained_model(cli, cfg, test.dim())?;
    let (axis, file) = match kind {
        CorruptionKind::Gaussian => (&cfg.eval.noise_axis, "noise_curve.csv"),
        CorruptionKind::Mask => (&cfg.eval.mask_axis, "mask_curve.csv"),
    };
    // BCE needs targets in [0, 1]
    let metric = match cfg.data.dataset {
        DatasetKind::Mnist => Metric::Bce,
        DatasetKind::Synthetic => Metric::Mse,
    };
    log::info!("{} points x {} trials on {} test items", axis.len(), cfg.eval.trials, test.len());
    let curve = reconstruction_curve(&model, model_name(cfg), &test, kind, axis, cfg.eval.trials, metric, cfg.eval.seed)?;
    let path = cli.out.join(file);
    write_curves_csv(&path, std::slice::from_ref(&curve), &[])?;
    for i in 0..curve.axis.len() {
        println!(
            "{} level={} mean={} std={}",
            metric.name(),
            curve.axis[i],
            curve.mean[i],
            curve.std[i]
        );
    }
    println!("curve {}", path.display());
    Ok(())
}

fn run_nmi(cli: &Cli, cfg: &ExperimentConfig) -> CliResult {
    let test = test_set(cfg)?;
    let model = trained_model(cli, cfg, test.dim())?;
    let baseline = build_model(cfg, test.dim())?;
    let e = &cfg.eval;
    let trained = latent_cluster_robustness(&model, model_name(cfg), &test, &e.noise_axis, e.trials, e.kmeans_restarts, e.seed)?;
    let untrained = latent_cluster_robustness(&baseline, "untrained", &test, &e.noise_axis, e.trials, e.kmeans_restarts, e.seed)?;
    let path = cli.out.join("nmi.csv");
    write_curves_csv(&path, &[], &[trained.clone(), untrained.clone()])?;
    for r in [&trained, &untrained] {
        for i in 0..r.axis.len() {
            println!("nmi model={} level={} mean={} std={}", r.model, r.axis[i], r.nmi[i], r.std[i]);
        }
    }
    println!("curve {}", path.display());
    Ok(())
}

fn image_side(dim: usize) -> CliResult<usize> {
    let side = (dim as f64).sqrt().round() as usize;
    if side * side != dim {
        return Err(Failure {
            code: 2,
            kind: "invalid",
            message: format!("data dimension {dim} is not a square image"),
        });
    }
    Ok(side)
}

fn run_sample(cli: &Cli, cfg: &ExperimentConfig) -> CliResult {
    let test = test_set(cfg)?;
    let side = image_side(test.dim())?;
    let model = trained_model(cli, cfg, test.dim())?;
    let fpe = model.prior.as_fpe();
    let score = |z: ArrayView2<'_, f64>| -> Array2<f64> {
        match &fpe {
            Some(p) => {
                let mut out = Array2::zeros(z.raw_dim());
                for (i, row) in z.axis_iter(Axis(0)).enumerate() {
                    out.row_mut(i).assign(&p.score_values(row));
                }
                out
            }
            None => z.mapv(|v| -v),
        }
    };
    let svgd = SvgdConfig {
        particles: cfg.svgd.particles,
        step_size: cfg.svgd.step_size,
        iterations: cfg.svgd.iterations,
    };
    log::info!("svgd: {} particles, {} iterations", svgd.particles, svgd.iterations);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.svgd.seed);
    let z = svgd_sample(score, model.latent_dim(), &svgd, &mut rng)?;
    let images = model.decode(z.view())?;
    let path = cli.out.join("samples.pgm");
    write_pgm_grid(&path, images.view(), side, 8)?;
    println!("samples {} count={}", path.display(), images.nrows());
    Ok(())
}

fn run_export_grid(cli: &Cli, cfg: &ExperimentConfig) -> CliResult {
    let test = test_set(cfg)?;
    let side = image_side(test.dim())?;
    let model = trained_model(cli, cfg, test.dim())?;
    let n = test.len().min(32);
    let x = test.items.slice(s![..n, ..]);
    let xhat = model.reconstruct(x)?;
    // rows of 8 originals followed by their 8 reconstructions
    let mut tiles = Vec::new();
    for start in (0..n).step_by(8) {
        let end = (start + 8).min(n);
        tiles.push(x.slice(s![start..end, ..]));
        tiles.push(xhat.slice(s![start..end, ..]));
    }
    let grid = concatenate(Axis(0), &tiles).expect("equal widths");
    let path = cli.out.join("recon_grid.pgm");
    write_pgm_grid(&path, grid.view(), side, 8)?;
    println!("grid {} count={}", path.display(), grid.nrows());
    Ok(())
}
