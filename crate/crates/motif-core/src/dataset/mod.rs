//! Annotation ingestion, clip windowing, target-tensor construction and
//! dataset splits.

pub mod corpus;
pub mod synth;

use std::collections::BTreeSet;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{encode_instance, AnchorSet, GridSpec, Interval};
use crate::model::tensor::Tensor;

pub const CLIP_LEN: f64 = 15.0;
pub const CLIP_HOP: f64 = 1.0;

/// One annotated leitmotif occurrence, in recording seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotifInstance {
    pub recording_id: String,
    pub act_id: String,
    pub class_id: usize,
    pub interval: Interval,
}

/// An instance attached to a clip, clip-relative and clamped to the window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipInstance {
    pub class_id: usize,
    pub interval: Interval,
}

/// One 15-second window of an act.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipIndexEntry {
    pub recording_id: String,
    pub act_id: String,
    pub origin_sec: f64,
    pub instances: Vec<ClipInstance>,
}

/// Boolean grid indexed (anchor, grid).
#[derive(Debug, Clone, PartialEq)]
pub struct BoolGrid {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BoolGrid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![false; rows * cols],
        }
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.cols + c] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }
}

/// Ground-truth tensor for one clip: `n_anchors x n_grids x (3 + C)` values
/// plus the ignore mask over empty cells.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTensor {
    pub values: Tensor,
    pub ignore_mask: BoolGrid,
}

impl TargetTensor {
    pub fn empty(n_anchors: usize, n_grids: usize, n_classes: usize) -> Self {
        Self {
            values: Tensor::zeros(&[n_anchors, n_grids, 3 + n_classes]),
            ignore_mask: BoolGrid::new(n_anchors, n_grids),
        }
    }

    pub fn set_cell(
        &mut self,
        anchor: usize,
        grid: usize,
        offset: f64,
        log_width: f64,
        class_id: usize,
    ) {
        let n_classes = self.values.shape()[2] - 3;
        *self.values.at3_mut(anchor, grid, 0) = 1.0;
        *self.values.at3_mut(anchor, grid, 1) = offset;
        *self.values.at3_mut(anchor, grid, 2) = log_width;
        for c in 0..n_classes {
            *self.values.at3_mut(anchor, grid, 3 + c) = if c == class_id { 1.0 } else { 0.0 };
        }
    }

    pub fn set_ignored(&mut self, anchor: usize, grid: usize) {
        self.ignore_mask.set(anchor, grid, true);
    }

    pub fn n_responsible(&self) -> usize {
        let (n, g) = (self.values.shape()[0], self.values.shape()[1]);
        (0..n)
            .flat_map(|a| (0..g).map(move |gi| (a, gi)))
            .filter(|(a, gi)| self.values.at3(*a, *gi, 0) == 1.0)
            .count()
    }
}

/// Split by whole recording versions or by acts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Version,
    Act,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub mode: SplitMode,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() || self.val.is_empty() || self.test.is_empty() {
            return Err(Error::Config("every split group must be nonempty".into()));
        }
        let mut seen = BTreeSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(id.clone()) {
                return Err(Error::Config(format!(
                    "id {id:?} appears in more than one split group"
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: SplitConfig = serde_json::from_reader(std::fs::File::open(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        serde_json::to_writer_pretty(std::fs::File::create(path)?, self)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitSet {
    Train,
    Val,
    Test,
}

/// Indices of `clips` per split set.
#[derive(Debug, Clone, Default)]
pub struct SplitClips {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Load `recording_id,act_id,motif,start_sec,end_sec` rows.
pub fn load_annotations(path: &Path, class_names: &[String]) -> Result<Vec<MotifInstance>> {
    let file = std::fs::File::open(path)?;
    parse_annotations(std::io::BufReader::new(file), class_names)
}

pub fn parse_annotations<R: BufRead>(
    reader: R,
    class_names: &[String],
) -> Result<Vec<MotifInstance>> {
    let mut out = Vec::new();
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line?,
        None => {
            return Err(Error::Annotation {
                line: 1,
                msg: "missing header".into(),
            })
        }
    };
    let expected = "recording_id,act_id,motif,start_sec,end_sec";
    if header.trim() != expected {
        return Err(Error::Annotation {
            line: 1,
            msg: format!("header must be {expected:?}, got {:?}", header.trim()),
        });
    }
    for (idx, line) in lines {
        let line = line?;
        let lineno = idx + 1;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let fields: Vec<&str> = t.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(Error::Annotation {
                line: lineno,
                msg: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let class_id = class_names
            .iter()
            .position(|n| n == fields[2])
            .ok_or_else(|| Error::Annotation {
                line: lineno,
                msg: format!("unknown motif name {:?}", fields[2]),
            })?;
        let start: f64 = fields[3].parse().map_err(|_| Error::Annotation {
            line: lineno,
            msg: format!("bad start_sec {:?}", fields[3]),
        })?;
        let end: f64 = fields[4].parse().map_err(|_| Error::Annotation {
            line: lineno,
            msg: format!("bad end_sec {:?}", fields[4]),
        })?;
        if !(end > start) || !start.is_finite() || !end.is_finite() {
            return Err(Error::Annotation {
                line: lineno,
                msg: format!("invalid interval [{start}, {end})"),
            });
        }
        out.push(MotifInstance {
            recording_id: fields[0].to_string(),
            act_id: fields[1].to_string(),
            class_id,
            interval: Interval::new(start, end),
        });
    }
    Ok(out)
}

pub fn save_annotations(
    path: &Path,
    instances: &[MotifInstance],
    class_names: &[String],
) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "recording_id,act_id,motif,start_sec,end_sec")?;
    for inst in instances {
        writeln!(
            f,
            "{},{},{},{},{}",
            inst.recording_id,
            inst.act_id,
            class_names[inst.class_id],
            inst.interval.start,
            inst.interval.end
        )?;
    }
    Ok(())
}

/// Window one act into overlapping clips at a 1-second hop.
///
/// An instance attaches to a clip when its center lies inside the window and
/// at least half of its duration does; attached intervals are clamped to the
/// window and re-expressed clip-relative. Acts shorter than one clip yield
/// no windows.
pub fn window_clips(
    recording_id: &str,
    act_id: &str,
    act_len: f64,
    instances: &[MotifInstance],
) -> Vec<ClipIndexEntry> {
    if act_len < CLIP_LEN {
        return Vec::new();
    }
    let n_clips = ((act_len - CLIP_LEN) / CLIP_HOP).floor() as usize + 1;
    (0..n_clips)
        .map(|i| {
            let origin = i as f64 * CLIP_HOP;
            let window = Interval::new(origin, origin + CLIP_LEN);
            let attached = instances
                .iter()
                .filter(|inst| {
                    window.contains(inst.interval.center())
                        && inst.interval.intersection(&window) >= 0.5 * inst.interval.len()
                })
                .map(|inst| ClipInstance {
                    class_id: inst.class_id,
                    interval: inst
                        .interval
                        .clamp_to(window.start, window.end)
                        .translate(-origin),
                })
                .collect();
            ClipIndexEntry {
                recording_id: recording_id.to_string(),
                act_id: act_id.to_string(),
                origin_sec: origin,
                instances: attached,
            }
        })
        .collect()
}

/// Build the ground-truth tensor for one clip.
///
/// Cell conflicts keep the instance with higher anchor IoU (earlier start on
/// ties); dropped instances are counted, not fatal. Empty cells whose anchor
/// prior (centered on the cell) overlaps any ground truth with IoU > 0.5 are
/// marked ignored.
pub fn build_targets(
    entry: &ClipIndexEntry,
    grid: &GridSpec,
    anchors: &AnchorSet,
    n_classes: usize,
) -> (TargetTensor, usize) {
    let mut target = TargetTensor::empty(anchors.len(), grid.n_grids, n_classes);
    // winning code per cell
    let mut owner: Vec<Option<(f64, f64, usize)>> = vec![None; anchors.len() * grid.n_grids];
    let mut dropped = 0usize;
    for (i, inst) in entry.instances.iter().enumerate() {
        let code = match encode_instance(&inst.interval, grid, anchors, inst.class_id) {
            Ok(c) => c,
            Err(_) => {
                // clamped instances always have centers in range; defensive
                dropped += 1;
                continue;
            }
        };
        let slot = code.anchor_idx * grid.n_grids + code.grid_idx;
        let challenger = (code.anchor_iou, inst.interval.start, i);
        let take = match owner[slot] {
            None => true,
            Some((iou, start, _)) => {
                code.anchor_iou > iou || (code.anchor_iou == iou && inst.interval.start < start)
            }
        };
        if take {
            if owner[slot].is_some() {
                dropped += 1;
            }
            owner[slot] = Some(challenger);
            target.set_cell(
                code.anchor_idx,
                code.grid_idx,
                code.center_offset,
                code.log_width,
                inst.class_id,
            );
        } else {
            dropped += 1;
        }
    }
    // ignore mask from anchor priors at cell centers
    for a in 0..anchors.len() {
        for g in 0..grid.n_grids {
            if target.values.at3(a, g, 0) == 1.0 {
                continue;
            }
            let c = grid.cell_center(g);
            let half = 0.5 * anchors.width(a);
            let prior = Interval::new(c - half, c + half);
            let overlapped = entry
                .instances
                .iter()
                .any(|inst| crate::geometry::iou(&prior, &inst.interval) > 0.5);
            if overlapped {
                target.set_ignored(a, g);
            }
        }
    }
    (target, dropped)
}

/// Partition clips into train/val/test by recording or act id.
pub fn split_clips(clips: &[ClipIndexEntry], cfg: &SplitConfig) -> Result<SplitClips> {
    cfg.validate()?;
    let mut out = SplitClips::default();
    for (i, clip) in clips.iter().enumerate() {
        let key = match cfg.mode {
            SplitMode::Version => &clip.recording_id,
            SplitMode::Act => &clip.act_id,
        };
        if cfg.train.contains(key) {
            out.train.push(i);
        } else if cfg.val.contains(key) {
            out.val.push(i);
        } else if cfg.test.contains(key) {
            out.test.push(i);
        } else {
            return Err(Error::Config(format!(
                "id {key:?} in the data is not assigned to any split group"
            )));
        }
    }
    Ok(out)
}

pub fn save_clip_index(path: &Path, clips: &[ClipIndexEntry]) -> Result<()> {
    serde_json::to_writer(std::io::BufWriter::new(std::fs::File::create(path)?), clips)?;
    Ok(())
}

pub fn load_clip_index(path: &Path) -> Result<Vec<ClipIndexEntry>> {
    Ok(serde_json::from_reader(std::io::BufReader::new(
        std::fs::File::open(path)?,
    ))?)
}
