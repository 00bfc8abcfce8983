//! Command-line pipeline: synthesize a corpus, prepare clips, fit anchors,
//! train, infer, tune, evaluate and plot.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use motif_core::dataset::corpus::{prepare_corpus, CorpusManifest};
use motif_core::dataset::synth::{synth_generate, SynthConfig};
use motif_core::dataset::{split_clips, SplitMode, CLIP_LEN};
use motif_core::eval::ThresholdChoice;
use motif_core::geometry::GridSpec;
use motif_core::model::checkpoint;
use motif_core::train::{
    self, collect_unit_predictions, detection_records, evaluate_units, fit_anchors_from_corpus,
    infer_acts, train_loop, write_detections_jsonl, PreparedDataset, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "motif",
    about = "Leitmotif boundary detection over constant-Q spectrograms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic motif corpus (CQT caches + annotations + splits).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Optional SynthConfig JSON; defaults to the built-in 3-class setup.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Total number of 15 s clips to render.
        #[arg(long)]
        clips: Option<usize>,
        /// Emit splits.json by recording version or by act.
        #[arg(long, value_parser = parse_split_mode, default_value = "version")]
        split: SplitMode,
        /// Also write 16-bit WAVs next to the CQT caches.
        #[arg(long, default_value_t = false)]
        wav: bool,
    },
    /// Window a corpus into overlapping clips and cache CQTs.
    Prepare {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit anchor widths by K-means over training-split boundary widths.
    Anchors {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the detector per a RunConfig JSON.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run inference over a corpus and emit detections JSONL.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        prepared: PathBuf,
        /// Thresholds JSON from `tune`; defaults to 0.5 confidence, 0.5 NMS.
        #[arg(long)]
        thresholds: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid-search per-class confidence and NMS thresholds on a split.
    Tune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        prepared: PathBuf,
        /// Split to tune on: train, val or test.
        #[arg(long, default_value = "val")]
        split_set: String,
        #[arg(long, default_value_t = 0.5)]
        match_iou: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a split with tuned thresholds.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        prepared: PathBuf,
        #[arg(long)]
        thresholds: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split_set: String,
        #[arg(long, default_value_t = 0.5)]
        match_iou: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one act's CQT with ground truths and detections as SVG.
    Plot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        prepared: PathBuf,
        #[arg(long)]
        recording: String,
        #[arg(long)]
        act: String,
        #[arg(long)]
        thresholds: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_split_mode(s: &str) -> Result<SplitMode, String> {
    match s {
        "version" => Ok(SplitMode::Version),
        "act" => Ok(SplitMode::Act),
        other => Err(format!("unknown split mode {other:?} (use version or act)")),
    }
}

fn load_thresholds(path: &Option<PathBuf>, n_classes: usize) -> anyhow::Result<ThresholdChoice> {
    match path {
        Some(p) => {
            let choice: ThresholdChoice =
                serde_json::from_reader(std::fs::File::open(p).context("open thresholds")?)?;
            if choice.confidence.len() != n_classes {
                bail!(
                    "thresholds file covers {} classes, checkpoint has {}",
                    choice.confidence.len(),
                    n_classes
                );
            }
            Ok(choice)
        }
        None => Ok(ThresholdChoice::uniform(n_classes, 0.5, 0.5)),
    }
}

fn split_indices<'a>(dataset: &'a PreparedDataset, split_set: &str) -> anyhow::Result<&'a [usize]> {
    Ok(match split_set {
        "train" => &dataset.splits.train,
        "val" => &dataset.splits.val,
        "test" => &dataset.splits.test,
        other => bail!("unknown split set {other:?} (use train/val/test)"),
    })
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Synth {
            out,
            seed,
            config,
            clips,
            split,
            wav,
        } => {
            let mut cfg: SynthConfig = match config {
                Some(p) => {
                    serde_json::from_reader(std::fs::File::open(&p).context("open config")?)?
                }
                None => SynthConfig::default(),
            };
            if let Some(n) = clips {
                cfg.n_clips = n;
            }
            cfg.split_mode = split;
            cfg.emit_wav |= wav;
            std::fs::create_dir_all(&out)?;
            let summary = synth_generate(&cfg, seed, &out)?;
            println!(
                "synthesized {} clips, {} instances (per class {:?}), seed {}, config {}",
                summary.n_clips,
                summary.n_instances,
                summary.per_class_instances,
                summary.seed,
                summary.config_hash
            );
        }
        Command::Prepare { corpus, out } => {
            std::fs::create_dir_all(&out)?;
            let clips = prepare_corpus(&corpus, &out)?;
            let manifest = CorpusManifest::load(&out)?;
            let splits = manifest.splits(&corpus)?;
            let counts = split_clips(&clips, &splits)?;
            println!(
                "prepared {} clips ({} train / {} val / {} test) into {}",
                clips.len(),
                counts.train.len(),
                counts.val.len(),
                counts.test.len(),
                out.display()
            );
        }
        Command::Anchors {
            corpus,
            k,
            seed,
            out,
        } => {
            let report = fit_anchors_from_corpus(&corpus, k, seed)?;
            motif_core::anchors::save_anchor_file(&out, &report.anchors)?;
            println!(
                "anchors {:?} (mean best IoU {:.4}, {} iterations) -> {}",
                report.anchors.widths(),
                report.mean_best_iou,
                report.iterations,
                out.display()
            );
        }
        Command::Train { config, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let outcome = train_loop(&cfg)?;
            for e in &outcome.log {
                println!(
                    "epoch {:3}  loss {:.4}  val mAP50 {:.4}  ({:.1}s)",
                    e.epoch, e.total, e.val_map50, e.wall_sec
                );
            }
            println!(
                "best val mAP50 {:.4} after {} epochs -> {}",
                outcome.best_val_map50,
                outcome.epochs_run,
                outcome.checkpoint_path.display()
            );
        }
        Command::Infer {
            checkpoint,
            corpus,
            prepared,
            thresholds,
            out,
        } => {
            let (header, net, ps) = checkpoint::load(&checkpoint)?;
            let manifest =
                CorpusManifest::load(&corpus).or_else(|_| CorpusManifest::load(&prepared))?;
            let choice = load_thresholds(&thresholds, header.class_names.len())?;
            let anchors = motif_core::geometry::AnchorSet::new(header.anchors.clone())?;
            let grid = GridSpec::new(header.detector.n_grids, CLIP_LEN);
            let per_act = infer_acts(
                &net, &ps, &manifest, &corpus, &prepared, None, &anchors, &grid, &choice,
            )?;
            let records = detection_records(&per_act, &header.class_names);
            write_detections_jsonl(&out, &records)?;
            println!("{} detections -> {}", records.len(), out.display());
        }
        Command::Tune {
            checkpoint,
            corpus,
            prepared,
            split_set,
            match_iou,
            out,
        } => {
            let (header, net, ps) = checkpoint::load(&checkpoint)?;
            let dataset = PreparedDataset::load(&corpus, &prepared)?;
            train::ensure_checkpoint_matches(&header, &dataset.class_names)?;
            let anchors = motif_core::geometry::AnchorSet::new(header.anchors.clone())?;
            let grid = GridSpec::new(header.detector.n_grids, CLIP_LEN);
            let units = collect_unit_predictions(
                &net,
                &ps,
                &dataset,
                split_indices(&dataset, &split_set)?,
                &grid,
                &anchors,
                train::DECODE_FLOOR,
            )?;
            let choice =
                motif_core::eval::tune_thresholds(&units, dataset.class_names.len(), match_iou)?;
            serde_json::to_writer_pretty(std::fs::File::create(&out)?, &choice)?;
            println!(
                "tuned thresholds (per-class F1 {:?}) -> {}",
                choice.f1,
                out.display()
            );
        }
        Command::Evaluate {
            checkpoint,
            corpus,
            prepared,
            thresholds,
            split_set,
            match_iou,
            out,
        } => {
            let (header, net, ps) = checkpoint::load(&checkpoint)?;
            let dataset = PreparedDataset::load(&corpus, &prepared)?;
            train::ensure_checkpoint_matches(&header, &dataset.class_names)?;
            let anchors = motif_core::geometry::AnchorSet::new(header.anchors.clone())?;
            let grid = GridSpec::new(header.detector.n_grids, CLIP_LEN);
            let choice = load_thresholds(&thresholds, header.class_names.len())?;
            let units = collect_unit_predictions(
                &net,
                &ps,
                &dataset,
                split_indices(&dataset, &split_set)?,
                &grid,
                &anchors,
                train::DECODE_FLOOR,
            )?;
            let report = evaluate_units(&units, &choice, &dataset.class_names, match_iou);
            serde_json::to_writer_pretty(std::fs::File::create(&out)?, &report)?;
            println!(
                "{split_set}: micro F1 {:.4}, mAP {:.4} / mAP50 {:.4} / mAP75 {:.4} -> {}",
                report.boundary_f1.micro,
                report.map.map,
                report.map.map50,
                report.map.map75,
                out.display()
            );
        }
        Command::Plot {
            checkpoint,
            corpus,
            prepared,
            recording,
            act,
            thresholds,
            out,
        } => {
            let (header, net, ps) = checkpoint::load(&checkpoint)?;
            let manifest =
                CorpusManifest::load(&corpus).or_else(|_| CorpusManifest::load(&prepared))?;
            let anchors = motif_core::geometry::AnchorSet::new(header.anchors.clone())?;
            let grid = GridSpec::new(header.detector.n_grids, CLIP_LEN);
            let choice = load_thresholds(&thresholds, header.class_names.len())?;
            let key = (recording.clone(), act.clone());
            let per_act = infer_acts(
                &net,
                &ps,
                &manifest,
                &corpus,
                &prepared,
                Some(std::slice::from_ref(&key)),
                &anchors,
                &grid,
                &choice,
            )?;
            let dets = per_act.first().map(|(_, d)| d.clone()).unwrap_or_default();
            let entry = manifest
                .acts
                .iter()
                .find(|a| a.recording_id == recording && a.act_id == act)
                .with_context(|| format!("act {recording}/{act} not in manifest"))?;
            let m = motif_core::dataset::corpus::load_act_cqt(&corpus, &prepared, entry)?;
            let annotations = manifest.annotations(&corpus)?;
            let gts: Vec<motif_core::eval::GroundTruth> = annotations
                .iter()
                .filter(|i| i.recording_id == recording && i.act_id == act)
                .map(|i| motif_core::eval::GroundTruth {
                    class_id: i.class_id,
                    interval: i.interval,
                })
                .collect();
            motif_core::plot::emit_plot(&m, &dets, &gts, &out)?;
            println!(
                "plotted {} detections / {} ground truths -> {}",
                dets.len(),
                gts.len(),
                out.display()
            );
        }
    }
    Ok(())
}
