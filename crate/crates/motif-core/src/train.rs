//! Training orchestration: prepared-dataset loading, the epoch loop with
//! pitch-shift augmentation and early stopping, and inference/evaluation
//! over a corpus.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::load_anchor_file;
use crate::cqt::{CqtMatrix, HOP};
use crate::dataset::corpus::{load_act_cqt, CorpusManifest};
use crate::dataset::{
    build_targets, load_clip_index, split_clips, ClipIndexEntry, MotifInstance, SplitClips,
    TargetTensor, CLIP_LEN,
};
use crate::error::{Error, Result};
use crate::eval::{
    f1_boundary, map_summary, match_detections, tune_thresholds, EvalReport, GroundTruth,
    ThresholdChoice, UnitPredictions,
};
use crate::geometry::{decode_cell, detection_order, nms, AnchorSet, Detection, GridSpec};
use crate::loss::{detection_loss, detection_loss_grad, LossBreakdown, LossWeights};
use crate::model::checkpoint::{self, CheckpointHeader, TrainingMeta, FORMAT_VERSION};
use crate::model::store::ParameterStore;
use crate::model::tensor::Tensor;
use crate::model::{DetectorConfig, DetectorNet};

pub const FRAME_RATE: f64 = 22050.0 / HOP as f64;
/// Score floor for pre-threshold decoding during validation and tuning.
pub const DECODE_FLOOR: f64 = 0.01;
/// Hard cap on training epochs regardless of configuration.
pub const MAX_EPOCHS_CAP: usize = 120;
/// Disjoint per-act time offset used when pooling acts into one evaluation
/// set; prevents cross-act matches.
const ACT_POOL_OFFSET: f64 = 10_000.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn default_match_iou() -> f64 {
    0.5
}

fn default_val_nms_iou() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus_dir: PathBuf,
    pub prepared_dir: PathBuf,
    pub anchors_file: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub optim: OptimConfig,
    pub max_epochs: usize,
    pub patience: usize,
    pub augment: bool,
    pub seed: u64,
    #[serde(default = "default_match_iou")]
    pub match_iou: f64,
    #[serde(default = "default_val_nms_iou")]
    pub val_nms_iou: f64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_reader(std::io::BufReader::new(
            std::fs::File::open(path)
                .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?,
        ))?;
        if cfg.max_epochs < 1 || cfg.patience < 1 {
            return Err(Error::Config("max_epochs and patience must be >= 1".into()));
        }
        if cfg.max_epochs > MAX_EPOCHS_CAP {
            return Err(Error::Config(format!(
                "max_epochs {} exceeds the {MAX_EPOCHS_CAP}-epoch cap",
                cfg.max_epochs
            )));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub total: f64,
    pub coord: f64,
    pub obj: f64,
    pub noobj: f64,
    pub cls: f64,
    pub val_map50: f64,
    pub lr: f64,
    pub wall_sec: f64,
}

pub fn save_train_log(path: &Path, log: &[TrainLogEntry]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,total,coord,obj,noobj,cls,val_map50,lr,wall_sec")?;
    for e in log {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{:.3}",
            e.epoch, e.total, e.coord, e.obj, e.noobj, e.cls, e.val_map50, e.lr, e.wall_sec
        )?;
    }
    Ok(())
}

/// Adam with bias correction; state iterates in parameter-store order.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(ps: &ParameterStore, cfg: &OptimConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: ps
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
            v: ps
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Apply one update from the store's accumulated gradients.
    pub fn step(&mut self, ps: &mut ParameterStore) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let grads: Vec<Tensor> = ps.grads().to_vec();
        for ((p, g), (m, v)) in ps
            .tensors_mut()
            .iter_mut()
            .zip(&grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for ((pv, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

pub type ActKey = (String, String);

/// A corpus loaded for training: normalized per-clip features plus the
/// windowed clip index and split assignment.
pub struct PreparedDataset {
    pub class_names: Vec<String>,
    pub manifest: CorpusManifest,
    pub annotations: Vec<MotifInstance>,
    pub clips: Vec<ClipIndexEntry>,
    pub splits: SplitClips,
    features: Vec<Vec<f32>>,
    pub n_bins: usize,
    pub n_frames: usize,
}

impl PreparedDataset {
    pub fn load(corpus_dir: &Path, prepared_dir: &Path) -> Result<Self> {
        let manifest =
            CorpusManifest::load(corpus_dir).or_else(|_| CorpusManifest::load(prepared_dir))?;
        let annotations = manifest.annotations(corpus_dir)?;
        let split_cfg = manifest.splits(corpus_dir)?;
        let clips_path = prepared_dir.join("clips.json");
        if !clips_path.exists() {
            return Err(Error::Config(format!(
                "{} not found; run prepare first",
                clips_path.display()
            )));
        }
        let clips = load_clip_index(&clips_path)?;
        let splits = split_clips(&clips, &split_cfg)?;

        let (n_bins, n_frames) = (84usize, 646usize);
        // load each act's cache once and slice all of its clips from it
        let mut by_act: BTreeMap<ActKey, Vec<usize>> = BTreeMap::new();
        for (i, c) in clips.iter().enumerate() {
            by_act
                .entry((c.recording_id.clone(), c.act_id.clone()))
                .or_default()
                .push(i);
        }
        let act_jobs: Vec<(&ActKey, &Vec<usize>)> = by_act.iter().collect();
        let slices: Vec<Result<Vec<(usize, Vec<f32>)>>> = act_jobs
            .par_iter()
            .map(|(key, clip_idxs)| {
                let act = manifest
                    .acts
                    .iter()
                    .find(|a| a.recording_id == key.0 && a.act_id == key.1)
                    .ok_or_else(|| Error::Config(format!("clip references unknown act {key:?}")))?;
                let m = load_act_cqt(corpus_dir, prepared_dir, act)?;
                if m.n_bins != n_bins {
                    return Err(Error::Shape {
                        expected: format!("{n_bins} bins"),
                        got: format!("{}", m.n_bins),
                    });
                }
                clip_idxs
                    .iter()
                    .map(|i| {
                        let clip = &clips[*i];
                        let feat = slice_clip_features(&m, clip.origin_sec, n_frames)?;
                        Ok((*i, feat))
                    })
                    .collect()
            })
            .collect();
        let mut features: Vec<Vec<f32>> = vec![Vec::new(); clips.len()];
        for act in slices {
            for (i, f) in act? {
                features[i] = f;
            }
        }
        Ok(Self {
            class_names: manifest.class_names.clone(),
            manifest,
            annotations,
            clips,
            splits,
            features,
            n_bins,
            n_frames,
        })
    }

    pub fn n_clips(&self) -> usize {
        self.clips.len()
    }

    /// Model input for one clip, with an optional pitch shift in bins.
    pub fn feature_tensor(&self, clip_idx: usize, shift: i32) -> Tensor {
        feature_to_tensor(&self.features[clip_idx], self.n_bins, self.n_frames, shift)
    }

    /// Ground truths per act, in act-absolute seconds.
    pub fn act_ground_truths(&self) -> BTreeMap<ActKey, Vec<GroundTruth>> {
        let mut out: BTreeMap<ActKey, Vec<GroundTruth>> = BTreeMap::new();
        for act in &self.manifest.acts {
            out.entry((act.recording_id.clone(), act.act_id.clone()))
                .or_default();
        }
        for inst in &self.annotations {
            out.entry((inst.recording_id.clone(), inst.act_id.clone()))
                .or_default()
                .push(GroundTruth {
                    class_id: inst.class_id,
                    interval: inst.interval,
                });
        }
        out
    }
}

/// Slice a 646-frame window out of an act's CQT at `origin_sec` and
/// max-normalize it.
pub fn slice_clip_features(m: &CqtMatrix, origin_sec: f64, n_frames: usize) -> Result<Vec<f32>> {
    if m.n_frames < n_frames {
        return Err(Error::Shape {
            expected: format!(">= {n_frames} frames"),
            got: format!("{}", m.n_frames),
        });
    }
    let frame0 = ((origin_sec * FRAME_RATE).round() as usize).min(m.n_frames - n_frames);
    let mut clip = m.slice_frames(frame0, n_frames);
    clip.max_normalize();
    Ok(clip.data.iter().map(|v| *v as f32).collect())
}

fn feature_to_tensor(feat: &[f32], n_bins: usize, n_frames: usize, shift: i32) -> Tensor {
    let mut t = Tensor::zeros(&[1, n_bins, n_frames]);
    let data = t.data_mut();
    for b in 0..n_bins {
        let src = b as i32 - shift;
        if src < 0 || src as usize >= n_bins {
            continue;
        }
        let src = src as usize;
        let dst_row = &mut data[b * n_frames..(b + 1) * n_frames];
        for (d, s) in dst_row
            .iter_mut()
            .zip(&feat[src * n_frames..(src + 1) * n_frames])
        {
            *d = *s as f64;
        }
    }
    t
}

/// Decode every (anchor, grid) cell of a prediction tensor, keeping
/// detections scoring at least `floor`.
pub fn decode_predictions(
    pred: &Tensor,
    grid: &GridSpec,
    anchors: &AnchorSet,
    floor: f64,
) -> Vec<Detection> {
    let (n, g, f) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    let n_classes = f - 3;
    let mut out = Vec::new();
    let mut logits = vec![0.0; n_classes];
    for a in 0..n {
        for gi in 0..g {
            for c in 0..n_classes {
                logits[c] = pred.at3(a, gi, 3 + c);
            }
            let det = decode_cell(
                pred.at3(a, gi, 0),
                pred.at3(a, gi, 1),
                pred.at3(a, gi, 2),
                &logits,
                a,
                gi,
                grid,
                anchors,
            );
            if det.score >= floor {
                out.push(det);
            }
        }
    }
    out
}

/// Per-class confidence filter + per-class NMS.
pub fn apply_class_thresholds(dets: &[Detection], choice: &ThresholdChoice) -> Vec<Detection> {
    let n_classes = choice.confidence.len();
    let mut out = Vec::new();
    for c in 0..n_classes {
        let class_dets: Vec<Detection> = dets
            .iter()
            .filter(|d| d.class_id == c && d.score >= choice.confidence[c])
            .cloned()
            .collect();
        out.extend(nms(&class_dets, choice.nms_iou[c]));
    }
    out.sort_by(detection_order);
    out
}

/// Pool per-act units into one detection/ground-truth set, pushing each act
/// onto a disjoint time offset so matching stays within acts.
pub fn pool_units(units: &[UnitPredictions]) -> (Vec<Detection>, Vec<GroundTruth>) {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for (i, u) in units.iter().enumerate() {
        let off = i as f64 * ACT_POOL_OFFSET;
        dets.extend(u.dets.iter().map(|d| Detection {
            interval: d.interval.translate(off),
            ..d.clone()
        }));
        gts.extend(u.gts.iter().map(|g| GroundTruth {
            class_id: g.class_id,
            interval: g.interval.translate(off),
        }));
    }
    (dets, gts)
}

struct ClipTask {
    clip_idx: usize,
    shift: i32,
}

fn train_batch(
    net: &DetectorNet,
    ps: &mut ParameterStore,
    adam: &mut Adam,
    dataset: &PreparedDataset,
    targets: &BTreeMap<usize, TargetTensor>,
    batch: &[ClipTask],
    weights: &LossWeights,
    batch_id: usize,
) -> Result<LossBreakdown> {
    let results: Vec<Result<(LossBreakdown, crate::model::store::Gradients)>> = batch
        .par_iter()
        .map(|task| {
            let x = dataset.feature_tensor(task.clip_idx, task.shift);
            let (pred, tape) = net.forward_taped(ps, &x)?;
            let target = &targets[&task.clip_idx];
            let lb = detection_loss(&pred, target, weights)?;
            let grad = detection_loss_grad(&pred, target, weights)?;
            let grads = net.backward(ps, &tape, &grad);
            Ok((lb, grads))
        })
        .collect();

    let mut sum = LossBreakdown::default();
    ps.zero_grads();
    for r in results {
        let (lb, grads) = r?;
        if !lb.total.is_finite() {
            return Err(Error::NanLoss {
                batch: batch_id,
                detail: format!("clip losses {lb:?}"),
            });
        }
        sum.add(&lb);
        ps.accumulate(&grads);
    }
    ps.scale_grads(1.0 / batch.len() as f64);
    adam.step(ps);
    Ok(sum.scaled(1.0 / batch.len() as f64))
}

/// Forward + decode the given clips and group the detections per act in
/// act-absolute coordinates, pre-NMS, with ground truths attached.
pub fn collect_unit_predictions(
    net: &DetectorNet,
    ps: &ParameterStore,
    dataset: &PreparedDataset,
    clip_indices: &[usize],
    grid: &GridSpec,
    anchors: &AnchorSet,
    floor: f64,
) -> Result<Vec<UnitPredictions>> {
    let decoded: Vec<Result<(usize, Vec<Detection>)>> = clip_indices
        .par_iter()
        .map(|i| {
            let x = dataset.feature_tensor(*i, 0);
            let pred = net.forward(ps, &x)?;
            Ok((*i, decode_predictions(&pred, grid, anchors, floor)))
        })
        .collect();
    let gts = dataset.act_ground_truths();
    let mut by_act: BTreeMap<ActKey, Vec<Detection>> = BTreeMap::new();
    for i in clip_indices {
        let c = &dataset.clips[*i];
        by_act
            .entry((c.recording_id.clone(), c.act_id.clone()))
            .or_default();
    }
    for r in decoded {
        let (i, dets) = r?;
        let clip = &dataset.clips[i];
        let entry = by_act
            .entry((clip.recording_id.clone(), clip.act_id.clone()))
            .or_default();
        entry.extend(dets.into_iter().map(|d| Detection {
            interval: d.interval.translate(clip.origin_sec),
            ..d
        }));
    }
    Ok(by_act
        .into_iter()
        .map(|(key, dets)| UnitPredictions {
            dets,
            gts: gts.get(&key).cloned().unwrap_or_default(),
        })
        .collect())
}

/// Validation mAP50: uniform NMS per act, then COCO-style AP at IoU 0.5.
pub fn validation_map50(units: &[UnitPredictions], n_classes: usize, nms_iou: f64) -> f64 {
    let suppressed: Vec<UnitPredictions> = units
        .iter()
        .map(|u| UnitPredictions {
            dets: nms(&u.dets, nms_iou),
            gts: u.gts.clone(),
        })
        .collect();
    let (dets, gts) = pool_units(&suppressed);
    map_summary(&dets, &gts, n_classes).map50
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub log: Vec<TrainLogEntry>,
    pub best_val_map50: f64,
    pub epochs_run: usize,
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z ^ (z >> 31)
}

/// Train the detector per the run configuration. Each epoch shuffles the
/// training clips, applies an independent pitch shift of +/-3 bins per clip
/// (targets are pitch-invariant), evaluates validation mAP50, and stops
/// early when it fails to improve for `patience` epochs. The best-validation
/// parameters are what gets checkpointed.
pub fn train_loop(cfg: &RunConfig) -> Result<TrainOutcome> {
    if !cfg.anchors_file.exists() {
        return Err(Error::Config(format!(
            "anchors file {} not found; run the anchor fit first",
            cfg.anchors_file.display()
        )));
    }
    let anchors = load_anchor_file(&cfg.anchors_file)?;
    if anchors.len() != cfg.detector.n_anchors {
        return Err(Error::Config(format!(
            "{} anchors in file but detector expects {}",
            anchors.len(),
            cfg.detector.n_anchors
        )));
    }
    let dataset = PreparedDataset::load(&cfg.corpus_dir, &cfg.prepared_dir)?;
    if dataset.class_names.len() != cfg.detector.n_classes {
        return Err(Error::Config(format!(
            "corpus has {} classes but detector expects {}",
            dataset.class_names.len(),
            cfg.detector.n_classes
        )));
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let grid = GridSpec::new(cfg.detector.n_grids, CLIP_LEN);

    let targets: BTreeMap<usize, TargetTensor> = dataset
        .splits
        .train
        .iter()
        .map(|i| {
            let (t, _) = build_targets(&dataset.clips[*i], &grid, &anchors, cfg.detector.n_classes);
            (*i, t)
        })
        .collect();

    let (net, mut ps) = DetectorNet::new(&cfg.detector, cfg.seed)?;
    let mut adam = Adam::new(&ps, &cfg.optim);

    let mut log = Vec::new();
    let mut best_map50 = f64::NEG_INFINITY;
    let mut best_params: Option<Vec<Tensor>> = None;
    let mut best_epoch = 0usize;
    let mut epochs_without_improvement = 0usize;
    let mut epochs_run = 0usize;

    for epoch in 1..=cfg.max_epochs.min(MAX_EPOCHS_CAP) {
        epochs_run = epoch;
        let start = Instant::now();
        let mut order: Vec<usize> = dataset.splits.train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let tasks: Vec<ClipTask> = order
            .iter()
            .map(|i| ClipTask {
                clip_idx: *i,
                shift: if cfg.augment {
                    rng.gen_range(-3..=3)
                } else {
                    0
                },
            })
            .collect();

        let mut epoch_loss = LossBreakdown::default();
        let mut n_batches = 0usize;
        for (batch_id, batch) in tasks.chunks(cfg.optim.batch_size.max(1)).enumerate() {
            let lb = train_batch(
                &net, &mut ps, &mut adam, &dataset, &targets, batch, &cfg.loss, batch_id,
            )?;
            epoch_loss.add(&lb);
            n_batches += 1;
        }
        let epoch_loss = epoch_loss.scaled(1.0 / n_batches.max(1) as f64);

        let units = collect_unit_predictions(
            &net,
            &ps,
            &dataset,
            &dataset.splits.val,
            &grid,
            &anchors,
            DECODE_FLOOR,
        )?;
        let val_map50 = validation_map50(&units, cfg.detector.n_classes, cfg.val_nms_iou);

        log.push(TrainLogEntry {
            epoch,
            total: epoch_loss.total,
            coord: epoch_loss.coord,
            obj: epoch_loss.obj,
            noobj: epoch_loss.noobj,
            cls: epoch_loss.cls,
            val_map50,
            lr: adam.lr(),
            wall_sec: start.elapsed().as_secs_f64(),
        });

        if val_map50 > best_map50 {
            best_map50 = val_map50;
            best_params = Some(ps.tensors().to_vec());
            best_epoch = epoch;
            epochs_without_improvement = 0;
        } else {
            epochs_without_improvement += 1;
            if epochs_without_improvement >= cfg.patience {
                break;
            }
        }
    }

    if let Some(best) = best_params {
        for (dst, src) in ps.tensors_mut().iter_mut().zip(best) {
            *dst = src;
        }
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        detector: cfg.detector.clone(),
        anchors: anchors.widths().to_vec(),
        class_names: dataset.class_names.clone(),
        training: TrainingMeta {
            seed: cfg.seed,
            epochs_trained: best_epoch,
            best_val_map50: best_map50.max(0.0),
        },
    };
    let checkpoint_path = cfg.out_dir.join("model.ckpt");
    checkpoint::save(&checkpoint_path, &header, &ps)?;
    save_train_log(&cfg.out_dir.join("trainlog.csv"), &log)?;

    Ok(TrainOutcome {
        checkpoint_path,
        log,
        best_val_map50: best_map50.max(0.0),
        epochs_run,
    })
}

/// One emitted detection line of the detections JSONL output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub recording_id: String,
    pub act_id: String,
    pub class: String,
    pub start_sec: f64,
    pub end_sec: f64,
    pub score: f64,
}

/// Run inference over whole acts from their CQT caches: windows at 15 s
/// hops plus a half-window-offset second pass, per-class thresholds and NMS
/// per window, then a final act-level NMS to merge the passes.
pub fn infer_acts(
    net: &DetectorNet,
    ps: &ParameterStore,
    manifest: &CorpusManifest,
    corpus_dir: &Path,
    prepared_dir: &Path,
    act_filter: Option<&[ActKey]>,
    anchors: &AnchorSet,
    grid: &GridSpec,
    choice: &ThresholdChoice,
) -> Result<Vec<(ActKey, Vec<Detection>)>> {
    let acts: Vec<&crate::dataset::corpus::ActEntry> = manifest
        .acts
        .iter()
        .filter(|a| {
            act_filter.is_none_or(|keys| {
                keys.iter()
                    .any(|k| k.0 == a.recording_id && k.1 == a.act_id)
            })
        })
        .collect();
    let results: Vec<Result<(ActKey, Vec<Detection>)>> = acts
        .par_iter()
        .map(|act| {
            if act.len_sec < CLIP_LEN {
                eprintln!(
                    "skipping act {}/{}: shorter than one {CLIP_LEN} s window",
                    act.recording_id, act.act_id
                );
                return Ok(((act.recording_id.clone(), act.act_id.clone()), Vec::new()));
            }
            let m = load_act_cqt(corpus_dir, prepared_dir, act)?;
            let mut origins: Vec<f64> = Vec::new();
            let mut o = 0.0;
            while o + CLIP_LEN <= act.len_sec + 1e-9 {
                origins.push(o);
                o += CLIP_LEN;
            }
            let mut o = CLIP_LEN / 2.0;
            while o + CLIP_LEN <= act.len_sec + 1e-9 {
                origins.push(o);
                o += CLIP_LEN;
            }
            let mut act_dets: Vec<Detection> = Vec::new();
            for origin in origins {
                let feat = slice_clip_features(&m, origin, 646)?;
                let x = feature_to_tensor(&feat, m.n_bins, 646, 0);
                let pred = net.forward(ps, &x)?;
                let dets = decode_predictions(&pred, grid, anchors, DECODE_FLOOR);
                let kept = apply_class_thresholds(&dets, choice);
                act_dets.extend(kept.into_iter().map(|d| Detection {
                    interval: d.interval.translate(origin),
                    ..d
                }));
            }
            let merged = apply_class_thresholds(&act_dets, choice);
            Ok(((act.recording_id.clone(), act.act_id.clone()), merged))
        })
        .collect();
    results.into_iter().collect()
}

pub fn detection_records(
    per_act: &[(ActKey, Vec<Detection>)],
    class_names: &[String],
) -> Vec<DetectionRecord> {
    let mut out = Vec::new();
    for ((rec, act), dets) in per_act {
        for d in dets {
            out.push(DetectionRecord {
                recording_id: rec.clone(),
                act_id: act.clone(),
                class: class_names[d.class_id].clone(),
                start_sec: d.interval.start,
                end_sec: d.interval.end,
                score: d.score,
            });
        }
    }
    out.sort_by(|a, b| {
        (&a.recording_id, &a.act_id)
            .cmp(&(&b.recording_id, &b.act_id))
            .then(a.start_sec.partial_cmp(&b.start_sec).unwrap())
            .then(a.class.cmp(&b.class))
    });
    out
}

pub fn write_detections_jsonl(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        writeln!(f)?;
    }
    Ok(())
}

/// Evaluate tuned thresholds over a set of units, reporting boundary-wise
/// F1, counts and COCO-style mAP on the thresholded detections.
pub fn evaluate_units(
    units: &[UnitPredictions],
    choice: &ThresholdChoice,
    class_names: &[String],
    match_iou: f64,
) -> EvalReport {
    let thresholded: Vec<UnitPredictions> = units
        .iter()
        .map(|u| UnitPredictions {
            dets: apply_class_thresholds(&u.dets, choice),
            gts: u.gts.clone(),
        })
        .collect();
    let (dets, gts) = pool_units(&thresholded);
    let matched = match_detections(&dets, &gts, match_iou);
    let boundary_f1 = f1_boundary(&matched);
    let map = map_summary(&dets, &gts, class_names.len());
    EvalReport {
        class_names: class_names.to_vec(),
        n_detections: dets.len(),
        n_ground_truths: gts.len(),
        match_iou,
        counts: matched.per_class.clone(),
        boundary_f1,
        map,
        thresholds: choice.clone(),
    }
}

/// Tune thresholds on the validation split and evaluate on the test split.
pub fn tune_and_evaluate(
    net: &DetectorNet,
    ps: &ParameterStore,
    dataset: &PreparedDataset,
    anchors: &AnchorSet,
    grid: &GridSpec,
    match_iou: f64,
) -> Result<(ThresholdChoice, EvalReport)> {
    let val_units = collect_unit_predictions(
        net,
        ps,
        dataset,
        &dataset.splits.val,
        grid,
        anchors,
        DECODE_FLOOR,
    )?;
    let choice = tune_thresholds(&val_units, dataset.class_names.len(), match_iou)?;
    let test_units = collect_unit_predictions(
        net,
        ps,
        dataset,
        &dataset.splits.test,
        grid,
        anchors,
        DECODE_FLOOR,
    )?;
    let report = evaluate_units(&test_units, &choice, &dataset.class_names, match_iou);
    Ok((choice, report))
}

/// Checkpoint/corpus compatibility: class lists must agree exactly.
pub fn ensure_checkpoint_matches(header: &CheckpointHeader, class_names: &[String]) -> Result<()> {
    if header.class_names != class_names {
        return Err(Error::Incompatible(format!(
            "checkpoint classes {:?} do not match corpus classes {:?}",
            header.class_names, class_names
        )));
    }
    Ok(())
}

/// Fit anchors by K-means over the training-split instance widths.
pub fn fit_anchors_from_corpus(
    corpus_dir: &Path,
    k: usize,
    seed: u64,
) -> Result<crate::anchors::AnchorFitReport> {
    let manifest = CorpusManifest::load(corpus_dir)?;
    let annotations = manifest.annotations(corpus_dir)?;
    let split_cfg = manifest.splits(corpus_dir)?;
    let widths: Vec<f64> = annotations
        .iter()
        .filter(|m| match split_cfg.mode {
            crate::dataset::SplitMode::Version => split_cfg.train.contains(&m.recording_id),
            crate::dataset::SplitMode::Act => split_cfg.train.contains(&m.act_id),
        })
        .map(|m| m.interval.len())
        .collect();
    crate::anchors::kmeans_anchor_widths(&widths, k, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_moves_parameters_against_gradient() {
        let mut ps = ParameterStore::new();
        ps.register("w", Tensor::from_vec(&[2], vec![1.0, -1.0]));
        let mut adam = Adam::new(&ps, &OptimConfig::default());
        let g = ps.new_gradients();
        drop(g);
        // positive gradient -> parameter decreases
        ps.zero_grads();
        let grads = {
            let mut g = ps.new_gradients();
            g.tensor_mut(crate::model::store::ParamId(0)).data_mut()[0] = 1.0;
            g.tensor_mut(crate::model::store::ParamId(0)).data_mut()[1] = -1.0;
            g
        };
        ps.accumulate(&grads);
        adam.step(&mut ps);
        assert!(ps.tensors()[0].data()[0] < 1.0);
        assert!(ps.tensors()[0].data()[1] > -1.0);
    }

    #[test]
    fn decode_respects_floor() {
        let grid = GridSpec::default();
        let anchors = AnchorSet::new(vec![1.0, 2.0, 4.0]).unwrap();
        let mut pred = Tensor::zeros(&[3, 11, 5]);
        for v in pred.data_mut() {
            *v = -20.0;
        }
        assert!(decode_predictions(&pred, &grid, &anchors, 0.01).is_empty());
        *pred.at3_mut(1, 4, 0) = 20.0;
        *pred.at3_mut(1, 4, 3) = 20.0;
        let dets = decode_predictions(&pred, &grid, &anchors, 0.5);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class_id, 0);
    }

    #[test]
    fn pooling_keeps_acts_disjoint() {
        let u1 = UnitPredictions {
            dets: vec![Detection {
                class_id: 0,
                score: 0.9,
                interval: crate::geometry::Interval::new(1.0, 2.0),
            }],
            gts: vec![],
        };
        let u2 = UnitPredictions {
            dets: vec![],
            gts: vec![GroundTruth {
                class_id: 0,
                interval: crate::geometry::Interval::new(1.0, 2.0),
            }],
        };
        let (dets, gts) = pool_units(&[u1, u2]);
        // the detection must not match the other act's ground truth
        let m = match_detections(&dets, &gts, 0.5);
        assert_eq!(m.counts(0).tp, 0);
        assert_eq!(m.counts(0).fp, 1);
        assert_eq!(m.counts(0).fn_, 1);
    }

    #[test]
    fn missing_anchors_is_config_error() {
        let cfg = RunConfig {
            corpus_dir: PathBuf::from("/nonexistent"),
            prepared_dir: PathBuf::from("/nonexistent"),
            anchors_file: PathBuf::from("/nonexistent/anchors.txt"),
            out_dir: std::env::temp_dir(),
            detector: DetectorConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            max_epochs: 1,
            patience: 1,
            augment: false,
            seed: 0,
            match_iou: 0.5,
            val_nms_iou: 0.5,
        };
        assert!(matches!(train_loop(&cfg), Err(Error::Config(_))));
    }
}
