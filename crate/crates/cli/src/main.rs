use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use meshseg::config::RunConfig;
use meshseg::metrics::SegmentationReport;
use meshseg::model::checkpoint::read_manifest;
use meshseg::model::{build_meshnet, build_unet, load_checkpoint, save_checkpoint, Checkpoint, Model, ModelSpec};
use meshseg::phantom::{load_subjects, read_manifest as read_dataset, write_dataset, PhantomSpec};
use meshseg::pgm::write_mid_slices;
use meshseg::sampler::check_side;
use meshseg::stitch::{segment_volume, InferenceOptions};
use meshseg::train::train;
use meshseg::vvol;

#[derive(Parser)]
#[command(name = "meshseg", version, about = "Volumetric tissue segmentation with dilated 3D convolutions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Phantom(PhantomArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Segment a volume with a trained checkpoint.
    Segment(SegmentArgs),
    /// Compare a segmentation with ground truth.
    Evaluate(EvaluateArgs),
    /// Print a model's layer table, parameter count and receptive field.
    Info(InfoArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON phantom spec; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    /// Volume dims as D,H,W or a single side.
    #[arg(long, value_parser = parse_dims)]
    dims: Option<[usize; 3]>,
    /// Fraction of boundary voxels relabelled.
    #[arg(long)]
    label_noise: Option<f64>,
    #[arg(long)]
    intensity_sigma: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.batches=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SegmentArgs {
    /// Intensity volume (VVOL).
    #[arg(long)]
    input: PathBuf,
    /// Checkpoint; defaults to `paths.checkpoint`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output label volume; defaults to `paths.output`.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Sampled subvolumes on top of the grid; defaults to `inference.subvolumes`.
    #[arg(long)]
    subvolumes: Option<usize>,
    /// Seed for the sampled subvolumes; defaults to the checkpoint's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Thread cap for inference; defaults to `inference.workers` (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Subvolumes per forward pass; defaults to `inference.batch`.
    #[arg(long)]
    batch: Option<usize>,
    /// Write the three mid-slices as PGM images into this directory.
    #[arg(long)]
    slices: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predicted label volume (VVOL).
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth label volume (VVOL).
    #[arg(long)]
    truth: PathBuf,
    /// Also write the report as a tab-separated table.
    #[arg(long)]
    tsv: Option<PathBuf>,
}

#[derive(Args)]
struct InfoArgs {
    /// `meshnet-68`, `meshnet-64`, `unet`, or `meshnet` with --width and --dilations.
    variant: Option<String>,
    #[arg(long, default_value_t = 1)]
    input_channels: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    dilations: Option<Vec<usize>>,
    #[command(flatten)]
    config: ConfigArgs,
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split([',', 'x'])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts.as_slice() {
        [n] => Ok([*n; 3]),
        [d, h, w] => Ok([*d, *h, *w]),
        _ => Err("expected one side or D,H,W".into()),
    }
}

fn cmd_phantom(args: PhantomArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)
            .map_err(|e| meshseg::Error::field("phantom", format!("{}: {e}", p.display())))?,
        None => PhantomSpec::default(),
    };
    if let Some(v) = args.count {
        spec.count = v;
    }
    if let Some(v) = args.dims {
        spec.dims = v;
    }
    if let Some(v) = args.label_noise {
        spec.label_noise = v;
    }
    if let Some(v) = args.intensity_sigma {
        spec.intensity_sigma = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    let manifest = write_dataset(&spec, &args.out)?;
    println!("wrote {} phantoms to {}", manifest.entries.len(), args.out.display());
    Ok(())
}

fn load_config(args: &ConfigArgs, extra: &[String]) -> Result<RunConfig> {
    let mut overrides = args.overrides.clone();
    overrides.extend_from_slice(extra);
    Ok(RunConfig::load(args.config.as_deref(), &overrides)?)
}

fn required<'a>(value: &'a Option<PathBuf>, field: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| meshseg::Error::field(field, "required").into())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = load_config(&args.config, &[format!("seed={}", args.seed)])?;
    let seed = cfg.seed()?;
    let data_dir = required(&cfg.paths.data_dir, "paths.data_dir")?;
    let checkpoint_path = required(&cfg.paths.checkpoint, "paths.checkpoint")?;
    let dataset = read_dataset(data_dir)?;
    let train_idx: Vec<usize> = if cfg.data.train.is_empty() {
        (0..dataset.entries.len())
            .filter(|i| !cfg.data.validation.contains(i))
            .collect()
    } else {
        cfg.data.train.clone()
    };
    let subjects = load_subjects(data_dir, &train_idx, cfg.data.clean_labels)?;
    let validation = load_subjects(data_dir, &cfg.data.validation, true)?;
    let sampler = cfg.sampler_config()?;
    let train_cfg = cfg.train_config()?;
    let spec = cfg.model_spec()?;
    let mut model = Model::<f32>::init(spec, cfg.train.init_seed.unwrap_or(seed))?;
    model.set_batchnorm_momentum(cfg.train.batchnorm_momentum)?;
    eprintln!(
        "training {} ({} parameters) on {} volumes: {} batches of {}",
        model.spec().name,
        model.parameter_count(),
        subjects.len(),
        train_cfg.batches,
        train_cfg.batch_size
    );

    let mut log = match &cfg.paths.log {
        Some(p) => Some(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => None,
    };
    let start = Instant::now();
    let every = (train_cfg.batches / 20).max(1);
    let summary = train(&mut model, &subjects, &validation, &sampler, &train_cfg, |r| {
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(r).expect("log record serializes");
            writeln!(w, "{line}")?;
        }
        if (r.batch + 1) % every == 0 || r.validation_dice.is_some() {
            let mut msg = format!("batch {:>5}  loss {:.5}", r.batch + 1, r.loss);
            if let Some(d) = &r.validation_dice {
                let cells: Vec<String> = d
                    .iter()
                    .map(|v| v.map_or("absent".into(), |x| format!("{x:.4}")))
                    .collect();
                msg.push_str(&format!("  validation dice [{}]", cells.join(", ")));
            }
            eprintln!("{msg}  ({:.0}s)", start.elapsed().as_secs_f64());
        }
        Ok(())
    })?;
    if let Some(mut w) = log {
        w.flush()?;
    }
    let checkpoint = Checkpoint {
        model,
        sampler,
        normalization: train_cfg.normalization,
        batches_trained: summary.losses.len(),
        seed,
    };
    save_checkpoint(&checkpoint, checkpoint_path)?;
    println!("wrote {}", checkpoint_path.display());
    Ok(())
}

fn cmd_segment(args: SegmentArgs) -> Result<()> {
    let cfg = load_config(&args.config, &[])?;
    let checkpoint_path = match &args.checkpoint {
        Some(p) => p.as_path(),
        None => required(&cfg.paths.checkpoint, "paths.checkpoint")?,
    };
    let output = match &args.output {
        Some(p) => p.as_path(),
        None => required(&cfg.paths.output, "paths.output")?,
    };
    let volume = vvol::read_volume(&args.input)?;
    let manifest = read_manifest(checkpoint_path)?;
    check_side(manifest.sampler.side, volume.dims())?;
    let checkpoint = load_checkpoint(checkpoint_path)?;
    let sampled = args.subvolumes.unwrap_or(cfg.inference.subvolumes);
    let plan = checkpoint.plan(volume.dims(), sampled, args.seed.unwrap_or(checkpoint.seed))?;
    let options = InferenceOptions {
        batch: args.batch.unwrap_or(cfg.inference.batch),
        workers: args.workers.unwrap_or(cfg.inference.workers),
    };
    let start = Instant::now();
    let labels = segment_volume(&checkpoint.model, &volume, &plan, checkpoint.normalization, options)?;
    eprintln!(
        "segmented {:?} with {} subvolumes in {:.1}s",
        volume.dims(),
        plan.len(),
        start.elapsed().as_secs_f64()
    );
    vvol::write_labels(&labels, output)?;
    println!("wrote {}", output.display());
    if let Some(dir) = &args.slices {
        std::fs::create_dir_all(dir)?;
        let stem = output
            .file_stem()
            .map_or("segmentation".into(), |s| s.to_string_lossy().into_owned());
        for p in write_mid_slices(&labels, dir, &stem)? {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let pred = vvol::read_labels(&args.pred)?;
    let truth = vvol::read_labels(&args.truth)?;
    let report = SegmentationReport::new(&pred, &truth)?;
    print!("{}", report.to_text());
    if let Some(p) = &args.tsv {
        std::fs::write(p, report.to_tsv())?;
    }
    Ok(())
}

fn info_spec(args: &InfoArgs) -> Result<ModelSpec> {
    let (m, n) = (args.input_channels, args.classes);
    let variant = match &args.variant {
        Some(v) => v.clone(),
        None if args.config.config.is_some() || !args.config.overrides.is_empty() => {
            return Ok(load_config(&args.config, &[])?.model_spec()?);
        }
        None => bail!("give a model variant or --config"),
    };
    Ok(match variant.as_str() {
        "meshnet-68" => build_meshnet(68, m, n, 0.0)?,
        "meshnet-64" => build_meshnet(64, m, n, 0.0)?,
        "unet" => build_unet(m, n)?,
        "meshnet" => {
            let width = args
                .width
                .ok_or_else(|| meshseg::Error::field("width", "required for variant `meshnet`"))?;
            let dilations = args
                .dilations
                .as_ref()
                .ok_or_else(|| meshseg::Error::field("dilations", "required for variant `meshnet`"))?;
            ModelSpec::meshnet(&format!("meshnet-w{width}"), m, n, width, dilations, 0.0)?
        }
        other => {
            return Err(meshseg::Error::field(
                "variant",
                format!("unknown variant `{other}` (meshnet-64, meshnet-68, unet, meshnet)"),
            )
            .into())
        }
    })
}

fn cmd_info(args: InfoArgs) -> Result<()> {
    let spec = info_spec(&args)?;
    let [rf, ..] = spec.receptive_field();
    let pooled = spec.layers.iter().any(|l| matches!(l, meshseg::model::LayerSpec::MaxPool));
    println!("model: {}", spec.name);
    print!("{}", spec.layer_table());
    println!("parameters: {}", spec.parameter_count());
    if pooled {
        println!("receptive field: {rf} (lower bound)");
    } else {
        println!("receptive field: {rf}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Train(a) => cmd_train(a),
        Command::Segment(a) => cmd_segment(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Info(a) => cmd_info(a),
    }
}

/// 2 for configuration mistakes, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<meshseg::Error>() {
        Some(meshseg::Error::ConfigField { .. } | meshseg::Error::InvalidConfig(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
