use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tagseg::dataset::read_pgm;
use tagseg::eval::evaluate;
use tagseg::net::StreamWeights;
use tagseg::pipeline::{
    ablation_table, fill_heatmap_cache, generate_dataset, load_split, predict, run_ablation,
    save_training, train_classifiers, train_from_cache, write_predictions, write_text, RunConfig, ABLATION_FILE,
    CHECKPOINT_DIR, EVAL_SPLIT, METRICS_FILE, TRAIN_SPLIT,
};
use tagseg::synth::{ClipSample, LabelMap};
use tagseg::{Error, Result};

/// Weakly-supervised video segmentation from clip tags.
#[derive(Parser)]
#[command(name = "tagseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize train and eval clips into `<out>/train` and `<out>/eval`.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the per-class classifiers and fill a heatmap cache for a dataset.
    Heatmaps {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the segmenter; writes a checkpoint and the loss curve.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        heatmaps: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label the reference frame of every clip.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Configuration supplying the CRF settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        use_crf: bool,
    },
    /// Compare label maps under `--pred` with those at the same relative
    /// paths under `--gt`.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Number of classes; defaults to the scene palette of `--config`,
        /// else the largest label seen plus one.
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the metrics CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the four ablation arms and print the comparison table.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        use_crf: bool,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

/// A split directory (`clip_*` children) or a generated root with `train/`
/// and `eval/` splits; `prefer` picks the split in the latter case.
fn split_dir(data: &Path, prefer: &str) -> PathBuf {
    let candidate = data.join(prefer);
    if candidate.is_dir() {
        candidate
    } else {
        data.to_path_buf()
    }
}

fn all_clips(data: &Path, num_classes: usize) -> Result<Vec<ClipSample>> {
    let (train, eval) = (data.join(TRAIN_SPLIT), data.join(EVAL_SPLIT));
    if train.is_dir() || eval.is_dir() {
        let mut clips = Vec::new();
        for d in [train, eval] {
            if d.is_dir() {
                clips.extend(load_split(&d, num_classes)?);
            }
        }
        Ok(clips)
    } else {
        load_split(data, num_classes)
    }
}

/// `clip_*/gt_*.pgm` files under `root`, as sorted relative paths.
fn label_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::Io { path: root.into(), source: e })? {
        let entry = entry.map_err(|e| Error::Io { path: root.into(), source: e })?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !name.starts_with("clip_") || !entry.path().is_dir() {
            continue;
        }
        let dir = entry.path();
        for f in fs::read_dir(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })? {
            let f = f.map_err(|e| Error::Io { path: dir.clone(), source: e })?;
            let fname = f.file_name().to_string_lossy().into_owned();
            if fname.starts_with("gt_") && fname.ends_with(".pgm") {
                out.push(PathBuf::from(&name).join(fname));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, out } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            let (train, eval) = generate_dataset(&cfg, &out)?;
            write_text(&out.join("run.cfg"), &cfg.to_key_values())?;
            println!("wrote {} training and {} evaluation clips to {}", train.len(), eval.len(), out.display());
        }
        Command::Heatmaps { common, data, out } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            let clips = all_clips(&data, cfg.scene.num_classes())?;
            let bank = train_classifiers(&cfg)?;
            fill_heatmap_cache(&bank, &clips, &out)?;
            println!("cached heatmaps for {} clips in {}", clips.len(), out.display());
        }
        Command::Train { config, seed, data, heatmaps, out } => {
            let cfg = load_config(Some(&config), seed)?;
            let clips = load_split(&split_dir(&data, TRAIN_SPLIT), cfg.scene.num_classes())?;
            let outcome = train_from_cache(&cfg, &clips, &heatmaps)?;
            save_training(&cfg, &outcome, &out)?;
            let last = outcome.losses.last().map_or(f64::NAN, |r| r.total);
            println!("trained {} iterations, final loss {last}; checkpoint in {}", outcome.losses.len(), out.display());
        }
        Command::Infer { checkpoint, data, out, config, use_crf } => {
            let (net, weights) = StreamWeights::load_checkpoint(&checkpoint.join(CHECKPOINT_DIR))
                .or_else(|_| StreamWeights::load_checkpoint(&checkpoint))?;
            let cfg = load_config(config.as_deref(), None)?;
            let clips = load_split(&split_dir(&data, EVAL_SPLIT), net.num_classes)?;
            let crf = use_crf.then_some(&cfg.train.crf);
            let preds = predict(&weights, &net, &clips, crf)?;
            write_predictions(&out, &clips, &preds)?;
            println!("wrote {} label maps to {}", preds.len(), out.display());
        }
        Command::Eval { pred, gt, classes, config, out } => {
            let files = label_files(&pred)?;
            if files.is_empty() {
                return Err(Error::Missing(format!("no clip_*/gt_*.pgm label maps under {}", pred.display())));
            }
            let preds = files.iter().map(|f| read_pgm(&pred.join(f))).collect::<Result<Vec<LabelMap>>>()?;
            let gts = files.iter().map(|f| read_pgm(&gt.join(f))).collect::<Result<Vec<LabelMap>>>()?;
            let k = match (classes, config) {
                (Some(k), _) => k,
                (None, Some(c)) => RunConfig::load(&c)?.scene.num_classes(),
                (None, None) => {
                    preds.iter().chain(&gts).flat_map(|m| m.labels.iter()).max().map_or(1, |&m| m as usize + 1)
                }
            };
            let report = evaluate(&preds, &gts, k)?;
            let csv = report.to_csv();
            print!("{csv}");
            if let Some(o) = out {
                write_text(&o, &csv)?;
            }
        }
        Command::Ablate { common, out, use_crf } => {
            let mut cfg = load_config(common.config.as_deref(), common.seed)?;
            cfg.use_crf |= use_crf;
            let results = run_ablation(&cfg, &out)?;
            print!("{}", ablation_table(&results));
            println!("per-arm {METRICS_FILE} files and {} in {}", ABLATION_FILE, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{}", e.render());
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
