//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage or configuration problems, 3 I/O and file
//! format problems, 4 numerical failures.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{
    generate_phantom_dataset, read_image, read_labels, write_labels, write_softmap, DatasetManifest, Split,
};
use crate::ensemble::{
    average, hard_labels, load_members, member_file_name, member_outputs, member_paths, slice_uncertainty,
    train_ensemble, uncertainty_map,
};
use crate::error::{Error, Result};
use crate::image::{LabelMap, SoftSegmentation};
use crate::metrics::{binary_pathology_dice, pearson, MetricReport, SliceMetrics};
use crate::model::HUNetCompound;
use crate::severity::{SeverityReport, VolumeSeverity};
use crate::training::class_frequencies;

#[derive(Debug, Parser)]
#[command(name = "hseg", version, about = "Hierarchical ensemble segmentation of lung-like slices")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded phantom dataset with a manifest
    Synth(SynthArgs),
    /// Train an ensemble of independently seeded models
    Train(TrainArgs),
    /// Segment one image with an ensemble
    Predict(PredictArgs),
    /// Compare predicted label maps with reference label maps
    Evaluate(EvaluateArgs),
    /// Per-slice ensemble entropy, optionally against a second annotation
    Uncertainty(UncertaintyArgs),
    /// Per-volume infection extent and gravity
    Severity(SeverityArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// key = value run configuration; keys not given keep their built-in defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for all randomness (config key `seed`, default 0)
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory for images/, labels/, rater2/ and manifest.tsv
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset manifest; its train split is used
    #[arg(long)]
    pub data: PathBuf,
    /// Directory receiving member_<k>.hseg and member_<k>_loss.csv
    #[arg(long)]
    pub out: PathBuf,
    /// Ensemble size (config key `k`, default 6)
    #[arg(long)]
    pub ensemble_k: Option<usize>,
    /// Members trained concurrently (default: ensemble size)
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Training epochs (config key `epochs`, default 30)
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Train class networks without the lung stage (config key `flat`, default false)
    #[arg(long)]
    pub flat: bool,
    /// Overwrite existing checkpoints in the output directory
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Directory of member_<k>.hseg checkpoints
    #[arg(long)]
    pub models: PathBuf,
    /// Input image (binary PGM)
    #[arg(long)]
    pub image: PathBuf,
    /// Averaged class probabilities (SSEG, 4 labels)
    #[arg(long)]
    pub out_soft: PathBuf,
    /// Argmax label map (PGM)
    #[arg(long)]
    pub out_labels: PathBuf,
    /// Per-pixel entropy in nats (SSEG, 1 label); not written when omitted
    #[arg(long)]
    pub out_uncertainty: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of predicted label maps (*.pgm)
    #[arg(long)]
    pub pred_dir: PathBuf,
    /// Directory of reference label maps with the same file names
    #[arg(long)]
    pub gt_dir: PathBuf,
    /// Report CSV
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct UncertaintyArgs {
    /// Directory of member_<k>.hseg checkpoints
    #[arg(long)]
    pub models: PathBuf,
    /// Dataset manifest
    #[arg(long)]
    pub data: PathBuf,
    /// Split to score: train or test
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Directory of second-annotation label maps named like the manifest's label files; not used when omitted
    #[arg(long)]
    pub gt2: Option<PathBuf>,
    /// Per-slice CSV
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SeverityArgs {
    /// Directory of member_<k>.hseg checkpoints (not needed with --use-gt)
    #[arg(long)]
    pub models: Option<PathBuf>,
    /// Dataset manifest
    #[arg(long)]
    pub data: PathBuf,
    /// Restrict to one split (train or test); all records when omitted
    #[arg(long)]
    pub split: Option<Split>,
    /// Use the manifest's reference labels instead of predictions
    #[arg(long)]
    pub use_gt: bool,
    /// Report CSV
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Usage(_)
        | Error::Config(_)
        | Error::Dimension(_)
        | Error::Geometry(_)
        | Error::Ensemble(_)
        | Error::Member { .. } => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::NonFiniteLoss { .. } | Error::UndefinedRatio(_) | Error::UndefinedCorrelation(_) => 4,
    }
}

/// Runs a parsed command, writing progress to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Uncertainty(a) => cmd_uncertainty(a),
        Command::Severity(a) => cmd_severity(a),
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    cfg.validate()?;
    create_dir(&args.out_dir)?;
    let manifest = generate_phantom_dataset(&cfg.phantom_config(), &args.out_dir)?;
    let samples = manifest.load_samples(None)?;
    let counts = class_frequencies(samples.iter().map(|s| &s.labels));
    let total: u64 = counts.iter().sum();
    println!(
        "volumes {} slices {} (train {}, test {})",
        manifest.volumes(None).len(),
        manifest.records.len(),
        manifest.records_in(Some(Split::Train)).count(),
        manifest.records_in(Some(Split::Test)).count()
    );
    for (name, c) in ["non_lung", "healthy", "ggo", "con"].iter().zip(counts) {
        println!("{name:<9} {c:>8} ({:.4})", c as f64 / total.max(1) as f64);
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(k) = args.ensemble_k {
        cfg.k = k;
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    if args.flat {
        cfg.flat = true;
    }
    cfg.validate()?;
    let jobs = args.jobs.unwrap_or(cfg.k);
    if jobs == 0 {
        return Err(Error::Usage("--jobs must be at least 1".into()));
    }
    if args.out.exists() && !member_paths(&args.out)?.is_empty() && !args.force {
        return Err(Error::Usage(format!(
            "{} already holds checkpoints; pass --force to overwrite",
            args.out.display()
        )));
    }
    let manifest = DatasetManifest::load(&args.data)?;
    let samples = manifest.load_samples(Some(Split::Train))?;
    if samples.is_empty() {
        return Err(Error::Usage(format!("{} has no train records", args.data.display())));
    }
    create_dir(&args.out)?;
    let ensemble = cfg.ensemble_config();
    println!(
        "training {} member(s) on {} slices, {} epochs, {} job(s)",
        ensemble.k,
        samples.len(),
        ensemble.train.epochs,
        jobs
    );
    let members = train_ensemble(&samples, &ensemble, jobs)?;
    for (m, member) in members.iter().enumerate() {
        crate::model::save_checkpoint(&member.model, args.out.join(member_file_name(m)))?;
        member.trace.save_csv(args.out.join(format!("member_{m}_loss.csv")))?;
        let means = member.trace.epoch_means();
        println!(
            "member {m}: first epoch loss {:.4}, last epoch loss {:.4}",
            means.first().copied().unwrap_or(f64::NAN),
            means.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn checked_members(models: &[HUNetCompound], height: usize, width: usize) -> Result<()> {
    for m in models {
        m.check_input_shape(&[1, 1, height, width])?;
    }
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let models = load_members(&args.models)?;
    let image = read_image(&args.image)?;
    checked_members(&models, image.height, image.width)?;
    let prediction = average(&member_outputs(&models, &image)?)?;
    let labels = hard_labels(&prediction.classes);
    write_softmap(&args.out_soft, &prediction.classes)?;
    write_labels(&args.out_labels, &labels)?;
    if let Some(path) = &args.out_uncertainty {
        let entropy = uncertainty_map(&prediction.classes);
        write_softmap(path, &SoftSegmentation::new(1, image.height, image.width, entropy.to_vec())?)?;
    }
    println!("{} member(s), wrote {} and {}", models.len(), args.out_soft.display(), args.out_labels.display());
    Ok(())
}

fn pgm_names(dir: &Path) -> Result<BTreeSet<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = BTreeSet::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".pgm") {
            names.insert(name);
        }
    }
    Ok(names)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let pred = pgm_names(&args.pred_dir)?;
    let gt = pgm_names(&args.gt_dir)?;
    let mut missing: Vec<String> = gt
        .difference(&pred)
        .map(|n| format!("{} (no prediction)", n))
        .collect();
    missing.extend(pred.difference(&gt).map(|n| format!("{} (no reference)", n)));
    if !missing.is_empty() {
        return Err(Error::Usage(format!("unpaired label maps: {}", missing.join(", "))));
    }
    if gt.is_empty() {
        return Err(Error::Usage(format!("no .pgm label maps in {}", args.gt_dir.display())));
    }
    let rows = gt
        .iter()
        .map(|name| {
            let p = read_labels(args.pred_dir.join(name))?;
            let g = read_labels(args.gt_dir.join(name))?;
            SliceMetrics::compute(name.trim_end_matches(".pgm"), &p, &g)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = MetricReport::new(rows);
    report.save_csv(&args.out)?;
    println!("{}", MetricReport::CSV_HEADER);
    println!("{}", report.summary());
    Ok(())
}

fn cmd_uncertainty(args: UncertaintyArgs) -> Result<()> {
    let models = load_members(&args.models)?;
    let manifest = DatasetManifest::load(&args.data)?;
    let records: Vec<_> = manifest.records_in(Some(args.split)).collect();
    if records.is_empty() {
        return Err(Error::Usage(format!("no {} records in {}", args.split, args.data.display())));
    }
    let mut csv = String::from(if args.gt2.is_some() {
        "slice_id,entropy,inter_dice\n"
    } else {
        "slice_id,entropy\n"
    });
    let (mut entropies, mut dices) = (Vec::new(), Vec::new());
    for r in records {
        let image = read_image(manifest.resolve(&r.image))?;
        checked_members(&models, image.height, image.width)?;
        let prediction = average(&member_outputs(&models, &image)?)?;
        let entropy = slice_uncertainty(&prediction.classes, &hard_labels(&prediction.classes))?;
        entropies.push(entropy);
        let name = r.slice_name();
        match &args.gt2 {
            Some(dir) => {
                let gt = read_labels(manifest.resolve(&r.labels))?;
                let file = r.labels.file_name().map(PathBuf::from).unwrap_or_else(|| format!("{name}.pgm").into());
                let second = read_labels(dir.join(file))?;
                let dice = binary_pathology_dice(&gt, &second)?;
                dices.push(dice);
                csv.push_str(&format!("{name},{entropy:.6},{dice:.6}\n"));
            }
            None => csv.push_str(&format!("{name},{entropy:.6}\n")),
        }
    }
    fs::write(&args.out, csv).map_err(|e| Error::io(&args.out, e))?;
    let mean = entropies.iter().sum::<f64>() / entropies.len() as f64;
    println!("slices {} mean entropy {mean:.6} nats", entropies.len());
    if args.gt2.is_some() {
        match pearson(&entropies, &dices) {
            Ok((r, p)) => println!("pearson r {r:.6} p {p:.6e}"),
            Err(e @ Error::UndefinedCorrelation(_)) => println!("pearson undefined: {e}"),
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

fn cmd_severity(args: SeverityArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.data)?;
    let models = match (&args.models, args.use_gt) {
        (_, true) => Vec::new(),
        (Some(dir), false) => load_members(dir)?,
        (None, false) => return Err(Error::Usage("--models is required unless --use-gt is given".into())),
    };
    let mut report = SeverityReport::default();
    for (volume_id, records) in manifest.volumes(args.split) {
        let mut consensus = Vec::with_capacity(records.len());
        let mut per_member: Vec<Vec<LabelMap>> = vec![Vec::with_capacity(records.len()); models.len()];
        for r in records {
            if args.use_gt {
                consensus.push(read_labels(manifest.resolve(&r.labels))?);
                continue;
            }
            let image = read_image(manifest.resolve(&r.image))?;
            checked_members(&models, image.height, image.width)?;
            let outputs = member_outputs(&models, &image)?;
            for (m, (_, classes)) in outputs.iter().enumerate() {
                per_member[m].push(hard_labels(&SoftSegmentation::from_batch_tensor(classes)?));
            }
            consensus.push(hard_labels(&average(&outputs)?.classes));
        }
        report.volumes.push(VolumeSeverity::compute(volume_id, &consensus, &per_member)?);
    }
    report.save_csv(&args.out)?;
    print!("{}", report.to_csv());
    Ok(())
}
