//! Command-line front end for the volume classifier.
//!
//! Subcommands cover the full workflow: `histogram` exports a volume's
//! intensity/gradient histogram, `synth` generates labeled synthetic
//! corpora, `train` creates or updates a model (adding classes and samples,
//! then retraining on everything stored), `classify` scores a volume,
//! `classes` lists the model contents and `eval` runs a labeled corpus
//! over a grid of decision policies.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use vclass_core::decision::{ClassRegistry, DecisionPolicy};
use vclass_core::histogram::compute_histogram;
use vclass_core::mlp::{Network, TrainingConfig};
use vclass_core::model_store::{ClassifierState, MODEL_BASE_BINS};
use vclass_core::synthgen::{
    evaluate, write_corpus, Family, FamilySpec, LabeledVolume, SynthError,
};
use vclass_core::volume_io::{
    load_volume, sidecar_path, Endianness, Volume, VolumeMeta, VoxelType,
};

#[derive(Parser)]
#[command(
    name = "vclass",
    version,
    about = "Classify 3D scalar volumes by their intensity/gradient histograms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute a volume's 2D histogram and write it as a PGM image or CSV
    Histogram(HistogramArgs),
    /// Generate a synthetic labeled corpus of raw volumes
    Synth(SynthArgs),
    /// Add or update a training sample, then retrain on all stored samples
    Train(TrainArgs),
    /// Classify a volume and print the per-class scores
    Classify(ClassifyArgs),
    /// List the classes stored in a model
    Classes(ClassesArgs),
    /// Evaluate a labeled corpus over a grid of decision thresholds
    Eval(EvalArgs),
}

/// Volume input: a raw file plus metadata from its sidecar and/or flags.
#[derive(Args)]
struct VolumeArgs {
    /// Raw voxel file
    volume: PathBuf,
    /// Sidecar descriptor path (default: volume path with .meta extension)
    #[arg(long)]
    meta: Option<PathBuf>,
    /// Voxel counts, e.g. 64,64,64
    #[arg(long)]
    dims: Option<String>,
    /// Voxel type: u8, u16, i16 or f32
    #[arg(long = "type")]
    voxel_type: Option<String>,
    /// Byte order of multi-byte types: little or big
    #[arg(long)]
    endian: Option<String>,
    /// Physical voxel spacing, e.g. 1,1,1
    #[arg(long)]
    spacing: Option<String>,
}

#[derive(Args)]
struct HistogramArgs {
    #[command(flatten)]
    volume: VolumeArgs,
    /// Histogram bins per axis before reduction (power of two, 8..=256)
    #[arg(long, default_value_t = 256)]
    bins: usize,
    /// Power-of-two reduction factor
    #[arg(long, default_value_t = 0)]
    reduce: u32,
    /// Output file; .pgm writes an image, .csv the raw counts
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (created if missing)
    out_dir: PathBuf,
    /// Volume family: blob, shell, ramp, noise or checker
    #[arg(long)]
    family: String,
    /// Number of instances to generate
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Cube side length in voxels
    #[arg(long, default_value_t = 64)]
    dims: usize,
    /// Parameter perturbation scale in [0,1]
    #[arg(long, default_value_t = 0.3)]
    jitter: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// First instance index (continue a series with a later start)
    #[arg(long, default_value_t = 0)]
    start: usize,
    /// Corpus label recorded in the manifest (default: family name, or
    /// "rest" for the noise and checker families)
    #[arg(long)]
    label: Option<String>,
    /// File name prefix (default: family name)
    #[arg(long)]
    prefix: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Model file (created on first use)
    model: PathBuf,
    #[command(flatten)]
    volume: VolumeArgs,
    /// Class to assign this volume to (created if absent)
    #[arg(long)]
    label: String,
    /// Mark the label as the rest (catch-all) class
    #[arg(long)]
    rest_class: bool,
    /// Reduction factor used when creating a new model
    #[arg(long, default_value_t = 3)]
    reduce: u8,
    /// Hidden layer sizes used when creating a new model, e.g. 64 or 64,32
    #[arg(long, default_value = "64")]
    hidden: String,
    #[arg(long, default_value_t = 0.2)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 10_000)]
    max_epochs: u32,
    #[arg(long, default_value_t = 0.003)]
    mse_target: f64,
    /// Seed for weight initialization and output addition
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct ClassifyArgs {
    /// Model file
    model: PathBuf,
    #[command(flatten)]
    volume: VolumeArgs,
    /// Reject when the maximum output falls below this value
    #[arg(long)]
    threshold: Option<f32>,
    /// Reduction factor override (must match the model)
    #[arg(long)]
    reduce: Option<u32>,
    /// Emit machine-readable JSON instead of text
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ClassesArgs {
    /// Model file
    model: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Model file
    model: PathBuf,
    /// Corpus directory containing volumes and a manifest.csv of
    /// `file,label` lines
    corpus: PathBuf,
    /// Comma-separated threshold grid; `none` disables thresholding
    #[arg(long, default_value = "none,0.5,0.7,0.9")]
    thresholds: String,
    /// Also print the confusion matrix for every policy
    #[arg(long)]
    matrix: bool,
    /// Write the summary rows as CSV to this path
    #[arg(long)]
    csv: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) => m,
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

macro_rules! data_error_from {
    ($($ty:ty),* $(,)?) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_error_from!(
    vclass_core::volume_io::VolumeError,
    vclass_core::histogram::HistogramError,
    vclass_core::mlp::MlpError,
    vclass_core::model_store::StoreError,
    vclass_core::synthgen::SynthError,
    std::io::Error,
);

/// Restore default SIGPIPE behavior so piping into `head` ends the process
/// quietly instead of panicking on a closed stdout.
#[cfg(unix)]
fn reset_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn reset_sigpipe() {}

fn main() -> ExitCode {
    reset_sigpipe();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
        Err(_) => {
            eprintln!("error: internal invariant violation");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Histogram(args) => cmd_histogram(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Classify(args) => cmd_classify(args),
        Command::Classes(args) => cmd_classes(args),
        Command::Eval(args) => cmd_eval(args),
    }
}

// ---------------------------------------------------------------- volume in

fn parse_triple_flag<T: std::str::FromStr>(s: &str, flag: &str) -> Result<(T, T, T), CliError> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(CliError::usage(format!(
            "--{flag} expects three comma-separated values, got {s:?}"
        )));
    }
    let parse = |p: &str| {
        p.parse::<T>()
            .map_err(|_| CliError::usage(format!("--{flag}: bad value {p:?}")))
    };
    Ok((parse(parts[0])?, parse(parts[1])?, parse(parts[2])?))
}

/// Assemble volume metadata from the sidecar (when present) plus flag
/// overrides. Missing required values are a usage error; a malformed
/// sidecar file is a data error.
fn resolve_meta(args: &VolumeArgs) -> Result<VolumeMeta, CliError> {
    let sidecar = args
        .meta
        .clone()
        .unwrap_or_else(|| sidecar_path(&args.volume));
    let base = if sidecar.exists() {
        Some(VolumeMeta::read_sidecar(&sidecar)?)
    } else if args.meta.is_some() {
        return Err(CliError::Data(format!(
            "sidecar {} does not exist",
            sidecar.display()
        )));
    } else {
        None
    };

    let dims = match &args.dims {
        Some(s) => Some(parse_triple_flag::<usize>(s, "dims")?),
        None => base.as_ref().map(|m| m.dims),
    };
    let voxel_type = match &args.voxel_type {
        Some(s) => Some(VoxelType::parse(s).map_err(|e| CliError::usage(e.to_string()))?),
        None => base.as_ref().map(|m| m.voxel_type),
    };
    let mut meta = VolumeMeta::new(
        dims.ok_or_else(|| {
            CliError::usage("volume dimensions unknown: provide a sidecar file or --dims")
        })?,
        voxel_type.ok_or_else(|| {
            CliError::usage("voxel type unknown: provide a sidecar file or --type")
        })?,
    );
    if let Some(m) = &base {
        meta.endianness = m.endianness;
        meta.spacing = m.spacing;
    }
    if let Some(s) = &args.endian {
        meta.endianness = Endianness::parse(s).map_err(|e| CliError::usage(e.to_string()))?;
    }
    if let Some(s) = &args.spacing {
        meta.spacing = parse_triple_flag::<f64>(s, "spacing")?;
    }
    meta.validate()
        .map_err(|e| CliError::usage(e.to_string()))?;
    Ok(meta)
}

fn read_volume(args: &VolumeArgs) -> Result<Volume, CliError> {
    let meta = resolve_meta(args)?;
    Ok(load_volume(&args.volume, &meta)?)
}

fn source_id(args: &VolumeArgs) -> String {
    args.volume
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| args.volume.display().to_string())
}

// ---------------------------------------------------------------- commands

fn cmd_histogram(args: HistogramArgs) -> Result<(), CliError> {
    if !(8..=256).contains(&args.bins) || !args.bins.is_power_of_two() {
        return Err(CliError::usage(format!(
            "--bins must be a power of two in 8..=256, got {}",
            args.bins
        )));
    }
    if (1u64 << args.reduce.min(63)) > args.bins as u64 {
        return Err(CliError::usage(format!(
            "--reduce {} exceeds what {} bins allow",
            args.reduce, args.bins
        )));
    }
    let volume = read_volume(&args.volume)?;
    let histogram = compute_histogram(&volume, args.bins)?.downscale(args.reduce)?;

    match args.out.extension().and_then(|e| e.to_str()) {
        Some("pgm") => histogram.write_pgm(&args.out)?,
        Some("csv") => histogram.write_csv(&args.out)?,
        _ => {
            return Err(CliError::usage(
                "--out must end in .pgm (image) or .csv (raw counts)",
            ))
        }
    }
    println!(
        "wrote {}x{} histogram to {}",
        histogram.bins(),
        histogram.bins(),
        args.out.display()
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let family = Family::parse(&args.family).map_err(|e| CliError::usage(e.to_string()))?;
    if args.count == 0 {
        return Err(CliError::usage("--count must be at least 1"));
    }
    let spec = FamilySpec {
        family,
        dims: args.dims,
        jitter: args.jitter,
        seed: args.seed,
    };
    let label = args.label.clone().unwrap_or_else(|| {
        if family.is_rest_family() {
            "rest".to_string()
        } else {
            family.name().to_string()
        }
    });
    let prefix = args
        .prefix
        .clone()
        .unwrap_or_else(|| family.name().to_string());

    fs::create_dir_all(&args.out_dir)?;
    let files = write_corpus(&spec, args.count, args.start, &args.out_dir, &prefix).map_err(
        |e| match e {
            SynthError::BadSpec(_) => CliError::usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        },
    )?;
    let mut manifest = String::new();
    for file in &files {
        let _ = writeln!(manifest, "{file},{label}");
    }
    let manifest_path = args.out_dir.join("manifest.csv");
    let mut contents = if manifest_path.exists() {
        fs::read_to_string(&manifest_path)?
    } else {
        String::new()
    };
    contents.push_str(&manifest);
    fs::write(&manifest_path, contents)?;

    println!(
        "wrote {} {family} volume(s) labeled {label:?} to {}",
        args.count,
        args.out_dir.display()
    );
    Ok(())
}

fn parse_hidden(s: &str) -> Result<Vec<usize>, CliError> {
    let sizes: Result<Vec<usize>, _> = s.split(',').map(|p| p.trim().parse::<usize>()).collect();
    match sizes {
        Ok(sizes) if (1..=2).contains(&sizes.len()) && sizes.iter().all(|&n| n >= 1) => Ok(sizes),
        _ => Err(CliError::usage(format!(
            "--hidden expects one or two positive sizes, got {s:?}"
        ))),
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let volume = read_volume(&args.volume)?;

    let mut state = if args.model.exists() {
        ClassifierState::load(&args.model)?
    } else {
        let hidden = parse_hidden(&args.hidden)?;
        if args.reduce > 5 {
            return Err(CliError::usage(format!(
                "--reduce must be at most 5, got {}",
                args.reduce
            )));
        }
        let bins = MODEL_BASE_BINS >> args.reduce;
        let mut registry = ClassRegistry::new();
        registry
            .add(&args.label)
            .map_err(|e| CliError::usage(e.to_string()))?;
        let network = Network::init(bins * bins, &hidden, 1, args.seed)?;
        ClassifierState::new(network, registry, args.reduce)?
    };

    if state.registry().index_of(&args.label).is_none() {
        state.add_class(&args.label, args.seed)?;
        println!("added class {:?}", args.label);
    }
    if args.rest_class {
        state.set_rest_class(&args.label)?;
    }

    let input = state.prepare_input(&volume)?;
    let id = source_id(&args.volume);
    let outcome = state.upsert_sample(&id, &args.label, input)?;
    println!("sample {id:?} labeled {:?} ({outcome:?})", args.label);

    let cfg = TrainingConfig {
        learning_rate: args.learning_rate,
        momentum: args.momentum,
        mse_target: args.mse_target,
        max_epochs: args.max_epochs,
        seed: args.seed,
    };
    let report = state.retrain(&cfg)?;
    state.save(&args.model)?;

    println!(
        "trained on {} sample(s): epochs {}, final MSE {:.6}, converged {}",
        state.sample_count(),
        report.epochs_run,
        report.final_mse,
        report.converged
    );
    println!(
        "model {} ({} classes, reduction factor {})",
        args.model.display(),
        state.registry().len(),
        state.reduction_factor()
    );
    Ok(())
}

fn validate_threshold(threshold: Option<f32>) -> Result<(), CliError> {
    if let Some(t) = threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(CliError::usage(format!(
                "--threshold must be in [0,1], got {t}"
            )));
        }
    }
    Ok(())
}

fn cmd_classify(args: ClassifyArgs) -> Result<(), CliError> {
    validate_threshold(args.threshold)?;
    let state = ClassifierState::load(&args.model)?;
    let volume = read_volume(&args.volume)?;

    let input: Vec<f32> = match args.reduce {
        None => state.prepare_input(&volume)?,
        Some(reduce) => {
            // honor the override; a mismatch surfaces as a shape error
            // naming both sizes
            let histogram = compute_histogram(&volume, MODEL_BASE_BINS)?.downscale(reduce)?;
            histogram.flatten().iter().map(|&v| v as f32).collect()
        }
    };
    let policy = DecisionPolicy {
        use_rest_class: state.registry().rest_class_index().is_some(),
        threshold: args.threshold,
    };
    let result = state.classify_input(&input, &policy)?;

    if args.json {
        let scores: Vec<serde_json::Value> = state
            .registry()
            .names()
            .iter()
            .zip(result.scores.iter())
            .map(|(name, &score)| serde_json::json!({ "class": name, "score": score }))
            .collect();
        let doc = serde_json::json!({
            "scores": scores,
            "chosen": result.chosen,
            "confidence": result.confidence,
            "rejected": result.rejected,
        });
        println!("{doc}");
    } else {
        let registry = state.registry();
        let width = registry
            .names()
            .iter()
            .map(|n| n.len())
            .max()
            .unwrap_or(5)
            .max(5);
        println!("{:width$}  score", "class");
        for (i, (name, score)) in registry
            .names()
            .iter()
            .zip(result.scores.iter())
            .enumerate()
        {
            let marker = if registry.is_rest(i) {
                "  [rest class]"
            } else {
                ""
            };
            println!("{name:width$}  {score:.6}{marker}");
        }
        println!();
        println!("chosen: {}", result.chosen);
        println!("confidence: {:.6}", result.confidence);
        println!("rejected: {}", result.rejected);
    }
    Ok(())
}

fn cmd_classes(args: ClassesArgs) -> Result<(), CliError> {
    let state = ClassifierState::load(&args.model)?;
    let registry = state.registry();
    let mut counts = vec![0usize; registry.len()];
    for sample in state.samples() {
        counts[sample.label] += 1;
    }
    println!(
        "{} ({} classes, {} samples, reduction factor {}, layers {:?})",
        args.model.display(),
        registry.len(),
        state.sample_count(),
        state.reduction_factor(),
        state.network().layer_sizes()
    );
    for (i, name) in registry.names().iter().enumerate() {
        let marker = if registry.is_rest(i) {
            "  [rest class]"
        } else {
            ""
        };
        println!("  {name}: {} sample(s){marker}", counts[i]);
    }
    Ok(())
}

fn parse_thresholds(s: &str) -> Result<Vec<Option<f32>>, CliError> {
    let mut grid = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if part == "none" {
            grid.push(None);
        } else {
            let t: f32 = part
                .parse()
                .map_err(|_| CliError::usage(format!("bad threshold {part:?}")))?;
            validate_threshold(Some(t))?;
            grid.push(Some(t));
        }
    }
    if grid.is_empty() {
        return Err(CliError::usage(
            "--thresholds must name at least one policy",
        ));
    }
    Ok(grid)
}

fn load_corpus(dir: &Path) -> Result<Vec<LabeledVolume>, CliError> {
    let manifest = dir.join("manifest.csv");
    if !manifest.exists() {
        return Err(CliError::usage(format!(
            "no manifest.csv in {} (generate a corpus with `vclass synth`)",
            dir.display()
        )));
    }
    let mut corpus = Vec::new();
    for (lineno, line) in fs::read_to_string(&manifest)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (file, label) = line.split_once(',').ok_or_else(|| {
            CliError::Data(format!(
                "manifest line {}: expected `file,label`, got {line:?}",
                lineno + 1
            ))
        })?;
        let path = dir.join(file.trim());
        let meta = VolumeMeta::read_sidecar(&sidecar_path(&path))?;
        corpus.push(LabeledVolume {
            label: label.trim().to_string(),
            source_id: file.trim().to_string(),
            volume: load_volume(&path, &meta)?,
        });
    }
    if corpus.is_empty() {
        return Err(CliError::usage(format!(
            "corpus {} is empty",
            dir.display()
        )));
    }
    Ok(corpus)
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let grid = parse_thresholds(&args.thresholds)?;
    let state = ClassifierState::load(&args.model)?;
    let corpus = load_corpus(&args.corpus)?;

    let mut summary =
        String::from("threshold,some_to_rest,rest_to_some,some_to_other_some,correct,total\n");
    println!(
        "{:>9}  {:>10}  {:>10}  {:>16}  {:>7}  {:>5}",
        "threshold", "some->rest", "rest->some", "some->other-some", "correct", "total"
    );
    for threshold in grid {
        let policy = DecisionPolicy {
            use_rest_class: state.registry().rest_class_index().is_some(),
            threshold,
        };
        let outcome = evaluate(&state, &corpus, &policy)?;
        let name = threshold.map_or("none".to_string(), |t| format!("{t}"));
        println!(
            "{:>9}  {:>10}  {:>10}  {:>16}  {:>7}  {:>5}",
            name,
            outcome.some_to_rest,
            outcome.rest_to_some,
            outcome.some_to_other_some,
            outcome.correct(),
            outcome.total()
        );
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{}",
            name,
            outcome.some_to_rest,
            outcome.rest_to_some,
            outcome.some_to_other_some,
            outcome.correct(),
            outcome.total()
        );
        if args.matrix {
            println!();
            print!("{}", outcome.to_text_table());
            println!();
        }
    }
    if let Some(path) = &args.csv {
        fs::write(path, summary)?;
        println!("wrote summary to {}", path.display());
    }
    Ok(())
}
