use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trajvid::config::RunConfig;
use trajvid::core::flow_estimate::HornSchunck;
use trajvid::dataset::{make_dataset, Dataset};
use trajvid::eval::{adherence_trials, evaluate_adherence, generate_for_clips, metric_report};
use trajvid::io::raster;
use trajvid::io::trajectory_json::TrajectoryJson;
use trajvid::model::Model;
use trajvid::pipeline::Pipeline;
use trajvid::service::{self, AppState};
use trajvid::train::{checkpoint_name, load_model, train_completion, Trainer};
use trajvid::{io, Error, Result};

/// Trajectory-controlled image-to-video generation.
#[derive(Parser, Debug)]
#[command(name = "trajvid", version)]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice of this invocation (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render synthetic clips to a dataset directory.
    Synth {
        /// Number of clips.
        #[arg(long)]
        count: Option<usize>,
        /// Dataset directory (default: data.root).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on a dataset directory, writing checkpoints and a log.
    Train {
        /// Dataset directory (default: data.root).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory (default: train.out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Checkpoint to continue from (default: train.resume).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate a clip from a first frame and click trajectories.
    Generate(GenerateArgs),
    /// Score a checkpoint on the validation clips of a dataset.
    Evaluate(EvaluateArgs),
    /// Serve the HTTP API.
    Serve {
        /// Checkpoint to serve (default: serve.checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Port (default: serve.port).
        #[arg(long)]
        port: Option<u16>,
        /// Output directory for jobs (default: serve.work_dir).
        #[arg(long)]
        work_dir: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// First frame (PNG).
    #[arg(long)]
    image: PathBuf,
    /// Trajectory JSON in first-frame pixels.
    #[arg(long)]
    trajectory: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Sampler steps (default: sampler.steps).
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory (default: data.root).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sampler steps (default: sampler.steps).
    #[arg(long)]
    steps: Option<usize>,
    /// Clips generated per batch.
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Run the commanded-motion adherence experiment instead.
    #[arg(long)]
    adherence: bool,
    /// Number of adherence trials.
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Commanded speed in pixels per frame.
    #[arg(long, default_value_t = 1.5)]
    speed: f32,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFiniteLoss { .. } => 3,
        Error::Usage(_) | Error::Config(_) | Error::TrajectorySchema(_) | Error::Trajectory(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .parse_default_env()
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    log::info!("seed {}", cfg.seed);
    match cli.command {
        Command::Synth { count, out } => synth(&cfg, count.unwrap_or(cfg.data.count), out.as_deref().unwrap_or(&cfg.data.root)),
        Command::Train { data, out, resume } => {
            let data = data.unwrap_or_else(|| cfg.data.root.clone());
            if let Some(out) = out {
                cfg.train.out_dir = out;
            }
            if resume.is_some() {
                cfg.train.resume = resume;
            }
            train(&cfg, &data)
        }
        Command::Generate(args) => generate(&cfg, &args),
        Command::Evaluate(args) => evaluate(&cfg, &args),
        Command::Serve { checkpoint, port, work_dir } => {
            let checkpoint = checkpoint
                .or_else(|| cfg.serve.checkpoint.clone())
                .ok_or_else(|| Error::Usage("serve needs --checkpoint or serve.checkpoint".into()))?;
            serve(&cfg, &checkpoint, port.unwrap_or(cfg.serve.port), work_dir.unwrap_or_else(|| cfg.serve.work_dir.clone()))
        }
    }
}

fn synth(cfg: &RunConfig, count: usize, out: &Path) -> Result<()> {
    let ds = make_dataset(out, count, &cfg.data.scenes, cfg.seed, cfg.data.train_fraction)?;
    println!(
        "wrote {} clips ({} train, {} val) to {}",
        ds.len(),
        ds.index.train.len(),
        ds.index.val.len(),
        out.display()
    );
    Ok(())
}

fn train(cfg: &RunConfig, data: &Path) -> Result<()> {
    if !data.exists() {
        return Err(Error::Usage(format!("dataset {} does not exist; run synth first", data.display())));
    }
    let ds = Dataset::open(data)?;
    let clips = ds.load_all(&(0..ds.len()).collect::<Vec<_>>())?;
    let pool = if ds.index.train.is_empty() {
        (0..ds.len()).collect()
    } else {
        ds.index.train.clone()
    };
    let model = Model::new(&cfg.model, cfg.seed, candle_core::DType::F32)?;
    let mut trainer = Trainer::new(model, &cfg.train, cfg.seed);
    if let Some(p) = &cfg.train.resume {
        trainer.resume(p)?;
        log::info!("resumed at step {} from {}", trainer.step(), p.display());
    }
    let out = cfg.train.out_dir.clone();
    let written = trainer.fit(&clips, &pool, Some(&out), |r| {
        log::info!("step {} loss {:.5} lr {:e} {} ms", r.step, r.loss, r.lr, r.wall_ms);
    })?;
    if cfg.train.completion_steps > 0 && !trainer.completion_trained {
        let losses = train_completion(
            &trainer.model,
            &clips,
            &pool,
            cfg.train.completion_steps,
            cfg.train.completion_lr,
            cfg.seed,
        )?;
        trainer.completion_trained = true;
        let p = out.join(checkpoint_name(trainer.step()));
        trainer.save(&p)?;
        log::info!("completion network: final loss {:.5}", losses.last().copied().unwrap_or(f32::NAN));
    }
    println!(
        "trained to step {}; {} checkpoints in {}",
        trainer.step(),
        written.len(),
        out.display()
    );
    Ok(())
}

fn generate(cfg: &RunConfig, args: &GenerateArgs) -> Result<()> {
    let traj = TrajectoryJson::parse(&io::read(&args.trajectory)?)?;
    let image = raster::decode_rgb(&io::read(&args.image)?)?;
    let pipeline = Pipeline::load(&args.checkpoint, &cfg.providers, &cfg.trajectory)?;
    let errors = pipeline.validate(&traj, image.width(), image.height());
    if !errors.is_empty() {
        let lines: Vec<String> = errors.iter().map(|e| format!("{}: {}", e.field, e.message)).collect();
        return Err(Error::TrajectorySchema(lines.join("; ")));
    }
    let mut sampler = cfg.sampler.clone();
    if let Some(s) = args.steps {
        sampler.steps = s;
    }
    let g = pipeline.generate(&image, &traj, cfg.seed, &sampler, |done, total| {
        log::info!("sampling {done}/{total}");
    })?;
    let written = g.write(&args.out)?;
    println!("wrote {} files to {}", written.len(), args.out.display());
    Ok(())
}

fn evaluate(cfg: &RunConfig, args: &EvaluateArgs) -> Result<()> {
    let (model, _) = load_model(&args.checkpoint)?;
    let mut sampler = cfg.sampler.clone();
    if let Some(s) = args.steps {
        sampler.steps = s;
    }
    let json = if args.adherence {
        let trials = adherence_trials(&cfg.data.scenes, cfg.seed, args.trials, args.speed)?;
        let report = evaluate_adherence(&model, &trials, &sampler, cfg.seed)?;
        serde_json::to_string_pretty(&report)
    } else {
        let data = args.data.clone().unwrap_or_else(|| cfg.data.root.clone());
        let ds = Dataset::open(&data)?;
        let which = if ds.index.val.is_empty() {
            (0..ds.len()).collect()
        } else {
            ds.index.val.clone()
        };
        let clips = ds.load_all(&which)?;
        let refs: Vec<_> = clips.iter().collect();
        let generated = generate_for_clips(&model, &refs, &sampler, cfg.seed, args.batch)?;
        let report = metric_report(&generated, &refs, &HornSchunck::default())?;
        serde_json::to_string_pretty(&report)
    }
    .expect("reports serialize");
    match &args.out {
        Some(p) => io::write_atomic(p, json.as_bytes())?,
        None => println!("{json}"),
    }
    Ok(())
}

fn serve(cfg: &RunConfig, checkpoint: &Path, port: u16, work_dir: PathBuf) -> Result<()> {
    let pipeline = Pipeline::load(checkpoint, &cfg.providers, &cfg.trajectory)?;
    let state = AppState::new(pipeline, work_dir, cfg.sampler.clone());
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
    rt.block_on(async {
        let addr = format!("{}:{port}", cfg.serve.host);
        let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| Error::io(&addr, e))?;
        eprintln!("listening on http://{}", listener.local_addr().map_err(|e| Error::io(&addr, e))?);
        service::serve(listener, state).await.map_err(|e| Error::io(&addr, e))
    })
}
