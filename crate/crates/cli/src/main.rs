use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pinp_core::config::{Ablation, RunConfig};
use pinp_core::io::{self, ContainerKind, PredictionMeta};
use pinp_core::metrics::CsiThresholds;
use pinp_core::nn::Model;
use pinp_core::predictor::RolloutConfig;
use pinp_core::sim::{cfl_numbers, generate_dataset, velocity_field, SequenceRecord};
use pinp_core::train::{self, EvalInput, LatentComparison};
use pinp_core::{Error, Record32, Result};

#[derive(Parser)]
#[command(
    name = "pinp",
    version,
    about = "Physics-informed scalar transport prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "dataset.pinpds")]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint with its loss log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file; falls back to `dataset` in the config.
        dataset: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Ablation switch to turn on; repeatable.
        #[arg(long)]
        ablate: Vec<String>,
        #[arg(long, default_value = "checkpoint.pinpck")]
        out: PathBuf,
    },
    /// Roll a checkpoint forward from the first frames of each sequence.
    Predict {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, default_value = "prediction.pinpds")]
        out: PathBuf,
        /// Directory for graymap dumps of one sequence.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Sequence dumped to `--images`.
        #[arg(long, default_value_t = 0)]
        image_record: usize,
    },
    /// Score a prediction file against the dataset it was made from.
    Evaluate {
        prediction: PathBuf,
        truth: PathBuf,
        /// Comma-separated CSI thresholds on the 0-255 scale, strictly decreasing.
        #[arg(long)]
        thresholds: Option<String>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Train and score every ablation setting.
    Ablate {
        #[command(flatten)]
        common: Common,
        dataset: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value = "ablation.csv")]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn dataset_path(arg: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    arg.or_else(|| cfg.dataset.clone()).ok_or_else(|| {
        Error::Config("no dataset given on the command line or in the config".into())
    })
}

fn config_header(cfg: &RunConfig) -> String {
    let t = &cfg.train;
    let active = cfg.ablation.active();
    format!(
        "lr={} epochs={} batch={} K={} train_horizon={} test_horizon={} seed={} ablation={}",
        t.lr,
        t.epochs,
        t.batch_size,
        cfg.model.window,
        t.train_horizon,
        t.test_horizon,
        t.seed,
        if active.is_empty() {
            "none".to_string()
        } else {
            active.join(",")
        }
    )
}

fn read_records(path: &Path) -> Result<Vec<Record32>> {
    Ok(io::read_container::<f32>(path)?.0)
}

fn cmd_generate(common: Common, out: PathBuf) -> Result<()> {
    let mut cfg = load_config(&common)?;
    if let Some(seed) = common.seed {
        for (n, s) in cfg.generate.scenarios.iter_mut().enumerate() {
            s.seed = seed.wrapping_add(n as u64);
        }
    }
    let g = &cfg.generate;
    let grid = g.grid()?;
    for s in &g.scenarios {
        s.validate()?;
        let (u, _) = velocity_field::<f64>(s, &grid)?;
        let (adv, diff) = cfl_numbers(&u, s.inv_pe, &grid);
        println!(
            "scenario {:?} seed {}: advective CFL {adv:.4}, diffusive CFL {diff:.4}",
            s.kind, s.seed
        );
    }
    let records = generate_dataset::<f32>(&g.scenarios, &grid, g.frames, g.count)?;
    io::write_dataset(&out, &records, &grid, g.frames)?;
    println!(
        "wrote {} records of {} frames ({}x{}) to {}",
        records.len(),
        g.frames,
        grid.height,
        grid.width,
        out.display()
    );
    Ok(())
}

fn cmd_train(
    common: Common,
    dataset: Option<PathBuf>,
    epochs: Option<usize>,
    ablate: Vec<String>,
    out: PathBuf,
) -> Result<()> {
    let mut cfg = load_config(&common)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    for name in &ablate {
        Ablation::parse(name)?.apply(&mut cfg.ablation);
    }
    let path = dataset_path(dataset, &cfg)?;
    let records = read_records(&path)?;
    record_grid(&mut cfg, &records);
    cfg.dataset = Some(path);
    cfg.validate()?;
    println!("config: {}", config_header(&cfg));
    let ck = train::train_with(&cfg, &records, |e| {
        let val = e.val_mse.map_or_else(|| "-".into(), |v| format!("{v:.6e}"));
        println!(
            "epoch {:>4} lr {:.2e} data {:.6e} physical {:.6e} temporal {:.6e} total {:.6e} val_mse {val}",
            e.epoch, e.lr, e.loss.data, e.loss.physical, e.loss.temporal, e.loss.total
        );
    })?;
    io::write_checkpoint(&out, &ck)?;
    let log_path = with_suffix(&out, ".loss.csv");
    io::write_loss_log(&log_path, &ck.log)?;
    match ck.epoch {
        Some(e) => println!(
            "kept epoch {e}; checkpoint {} log {}",
            out.display(),
            log_path.display()
        ),
        None => println!("no training epochs; initial checkpoint {}", out.display()),
    }
    Ok(())
}

fn record_grid(cfg: &mut RunConfig, records: &[Record32]) {
    if let Some(r) = records.first() {
        let g = &mut cfg.generate;
        (g.height, g.width, g.dx, g.dt) = (r.grid.height, r.grid.width, r.grid.dx, r.grid.dt);
        g.frames = r.len();
        g.count = records.len();
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_predict(
    checkpoint: PathBuf,
    dataset: PathBuf,
    horizon: Option<usize>,
    out: PathBuf,
    images: Option<PathBuf>,
    image_record: usize,
) -> Result<()> {
    let ck = io::read_checkpoint::<f32>(&checkpoint)?;
    let cfg = &ck.config;
    let (records, _) = io::read_container::<f32>(&dataset)?;
    let horizon = horizon.unwrap_or(cfg.train.test_horizon);
    let model = Model::new(cfg.model.clone())?;
    let k = model.window();
    let trained = (cfg.generate.height, cfg.generate.width);
    for r in &records {
        if (r.grid.height, r.grid.width) != trained {
            return Err(Error::shape(
                "predict",
                format!(
                    "checkpoint grid {}x{} vs dataset grid {}x{}",
                    trained.0, trained.1, r.grid.height, r.grid.width
                ),
            ));
        }
        if r.len() < k {
            return Err(Error::InvalidArgument(format!(
                "sequences have {} frames; the model needs {k}",
                r.len()
            )));
        }
    }
    let rcfg = RolloutConfig {
        window: k,
        steps: horizon,
        flags: cfg.ablation.predictor(),
    };
    let inv_pe = ck.params.value(pinp_core::nn::THETA_PE)?.data()[0].exp() as f64;
    let mut predicted = Vec::with_capacity(records.len());
    for r in &records {
        let psi = pinp_core::grid::spatial_embedding::<f32>(&r.obstacles, &r.grid)?;
        let ro = pinp_core::predictor::rollout(
            &model,
            &ck.params,
            &r.frames[..k],
            &psi,
            &r.grid,
            &rcfg,
        )?;
        predicted.push(SequenceRecord {
            frames: ro.frames,
            u_true: ro.latents.iter().map(|l| l.velocity.clone()).collect(),
            p_true: ro.latents.iter().map(|l| l.pressure.clone()).collect(),
            inv_pe,
            seed: r.seed,
            scenario: r.scenario,
            obstacles: r.obstacles.clone(),
            grid: r.grid,
        });
    }
    let grid = records
        .first()
        .map_or_else(|| cfg.generate.grid(), |r| Ok(r.grid))?;
    let meta = PredictionMeta {
        start_frame: k,
        inv_pe,
    };
    io::write_container(
        &out,
        &predicted,
        &grid,
        horizon,
        ContainerKind::Prediction,
        Some(meta),
    )?;
    println!(
        "wrote {} predictions of {horizon} frames to {}",
        predicted.len(),
        out.display()
    );
    if let Some(dir) = images {
        let p = predicted.get(image_record).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "--image-record {image_record} but only {} sequences",
                predicted.len()
            ))
        })?;
        let mut ranges = io::dump_frames(&dir, "c", &p.frames)?;
        let ux: Vec<_> = p.u_true.iter().map(|u| u.x.clone()).collect();
        let uy: Vec<_> = p.u_true.iter().map(|u| u.y.clone()).collect();
        ranges.extend(io::dump_frames(&dir, "ux", &ux)?);
        ranges.extend(io::dump_frames(&dir, "uy", &uy)?);
        ranges.extend(io::dump_frames(&dir, "p", &p.p_true)?);
        io::write_image_index(&dir, &ranges)?;
        println!("wrote {} images to {}", ranges.len(), dir.display());
    }
    Ok(())
}

fn cmd_evaluate(
    prediction: PathBuf,
    truth: PathBuf,
    thresholds: Option<String>,
    out: PathBuf,
) -> Result<()> {
    let thresholds = match thresholds {
        Some(t) => CsiThresholds::parse(&t)?,
        None => CsiThresholds::default(),
    };
    let (pred, meta) = io::read_container::<f32>(&prediction)?;
    let (truth_recs, _) = io::read_container::<f32>(&truth)?;
    let start = meta.prediction.as_ref().map_or(0, |p| p.start_frame);
    let horizon = meta.frames;
    if pred.len() != truth_recs.len() {
        return Err(Error::shape(
            "evaluate",
            format!(
                "{} predicted vs {} true sequences",
                pred.len(),
                truth_recs.len()
            ),
        ));
    }
    for (n, (p, t)) in pred.iter().zip(&truth_recs).enumerate() {
        if p.grid != t.grid || p.seed != t.seed || t.len() < start + horizon {
            return Err(Error::shape(
                "evaluate",
                format!(
                    "sequence {n}: prediction {}x{} seed {} frames {start}..{} vs truth {}x{} seed {} with {} frames",
                    p.grid.height,
                    p.grid.width,
                    p.seed,
                    start + horizon,
                    t.grid.height,
                    t.grid.width,
                    t.seed,
                    t.len()
                ),
            ));
        }
    }
    let before = start.saturating_sub(1);
    let input = EvalInput {
        predicted: pred.iter().map(|p| p.frames.clone()).collect(),
        truth: truth_recs
            .iter()
            .map(|t| t.frames[start..start + horizon].to_vec())
            .collect(),
        last_observed: truth_recs
            .iter()
            .map(|t| t.frames[before].clone())
            .collect(),
        latent: (meta.kind == ContainerKind::Prediction).then(|| LatentComparison {
            estimated_u: pred.iter().map(|p| p.u_true.clone()).collect(),
            true_u: truth_recs
                .iter()
                .map(|t| t.u_true[before..before + horizon].to_vec())
                .collect(),
            estimated_p: pred.iter().map(|p| p.p_true.clone()).collect(),
            true_p: truth_recs
                .iter()
                .map(|t| t.p_true[before..before + horizon].to_vec())
                .collect(),
            tracer: truth_recs
                .iter()
                .map(|t| t.frames[before..before + horizon].to_vec())
                .collect(),
        }),
    };
    let report = train::metric_report(&input, &thresholds)?;
    io::write_report(&out, &report)?;
    println!(
        "mse {:.6e} (persistence {:.6e}) mae {:.6e} csi_m {:.4}; report in {}",
        report.model.mse,
        report.persistence.mse,
        report.model.mae,
        report.csi_m,
        out.display()
    );
    Ok(())
}

fn cmd_ablate(
    common: Common,
    dataset: Option<PathBuf>,
    epochs: Option<usize>,
    out: PathBuf,
) -> Result<()> {
    let mut cfg = load_config(&common)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    let path = dataset_path(dataset, &cfg)?;
    let records = read_records(&path)?;
    record_grid(&mut cfg, &records);
    println!("config: {}", config_header(&cfg));
    let rows = train::run_ablations(&cfg, &records, |a, e| {
        println!(
            "[{}] epoch {:>4} total {:.6e}",
            a.name(),
            e.epoch,
            e.loss.total
        );
    })?;
    for r in &rows {
        match &r.outcome {
            train::AblationOutcome::Finished { mae, mse } => {
                println!("{:<32} MAE {mae:.6e} MSE {mse:.6e}", r.ablation.label())
            }
            train::AblationOutcome::Diverged { reason } => {
                println!("{:<32} diverged: {reason}", r.ablation.label())
            }
        }
    }
    io::write_ablation_table(&out, &rows)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("PINP_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::Config(format!(
            "PINP_THREADS must be a positive integer, got `{v}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Generate { common, out } => cmd_generate(common, out),
        Command::Train {
            common,
            dataset,
            epochs,
            ablate,
            out,
        } => cmd_train(common, dataset, epochs, ablate, out),
        Command::Predict {
            checkpoint,
            dataset,
            horizon,
            out,
            images,
            image_record,
        } => cmd_predict(checkpoint, dataset, horizon, out, images, image_record),
        Command::Evaluate {
            prediction,
            truth,
            thresholds,
            out,
        } => cmd_evaluate(prediction, truth, thresholds, out),
        Command::Ablate {
            common,
            dataset,
            epochs,
            out,
        } => cmd_ablate(common, dataset, epochs, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Numerical(_) => 2,
                _ => 1,
            })
        }
    }
}
