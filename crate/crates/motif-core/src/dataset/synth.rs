//! Synthetic motif corpus generator: harmonic note sequences over pink
//! noise, with exact boundary annotations. Stands in for the
//! non-redistributable recordings during desk-scale testing.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioClip, CLIP_SAMPLES, TARGET_RATE};
use crate::cqt::{write_cqt_cache, CqtSpec, CqtTransform};
use crate::dataset::corpus::{ActEntry, CorpusManifest};
use crate::dataset::{MotifInstance, SplitConfig, SplitMode, CLIP_LEN};
use crate::error::{Error, Result};
use crate::geometry::Interval;
use crate::num::fnv1a64;

/// A motif prototype: a monophonic note sequence, each note a MIDI pitch
/// and a duration in beats.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotifPrototype {
    pub name: String,
    pub notes: Vec<(i32, f64)>,
}

impl MotifPrototype {
    pub fn beats(&self) -> f64 {
        self.notes.iter().map(|(_, b)| b).sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub prototypes: Vec<MotifPrototype>,
    pub n_clips: usize,
    /// Clips are dealt round-robin onto this many synthetic recording
    /// versions, split `train_versions` / `val_versions` / remainder.
    pub n_versions: usize,
    pub train_versions: usize,
    pub val_versions: usize,
    pub beat_sec: f64,
    pub tempo_range: (f64, f64),
    pub transpose_semitones: i32,
    pub noise_floor: f64,
    pub motif_gain: f64,
    pub distractor_gain: f64,
    pub max_motifs_per_clip: usize,
    pub max_distractors: usize,
    pub emit_wav: bool,
    /// Split emitted in splits.json: by synthetic recording version, or by
    /// act with the same train/val/test proportions.
    #[serde(default = "default_split_mode")]
    pub split_mode: SplitMode,
}

fn default_split_mode() -> SplitMode {
    SplitMode::Version
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            prototypes: default_prototypes(),
            n_clips: 2600,
            n_versions: 13,
            train_versions: 10,
            val_versions: 2,
            beat_sec: 0.28,
            tempo_range: (0.8, 1.25),
            transpose_semitones: 3,
            noise_floor: 0.02,
            motif_gain: 0.30,
            distractor_gain: 0.10,
            max_motifs_per_clip: 3,
            max_distractors: 4,
            emit_wav: false,
            split_mode: SplitMode::Version,
        }
    }
}

/// Three melodically distinct prototypes with well-separated total lengths.
pub fn default_prototypes() -> Vec<MotifPrototype> {
    vec![
        MotifPrototype {
            name: "rise".into(),
            notes: vec![(57, 1.0), (61, 1.0), (64, 1.0), (69, 2.0)],
        },
        MotifPrototype {
            name: "fall".into(),
            notes: vec![
                (76, 1.5),
                (74, 1.0),
                (72, 1.0),
                (71, 1.0),
                (69, 1.0),
                (67, 2.0),
                (64, 1.5),
            ],
        },
        MotifPrototype {
            name: "waves".into(),
            notes: vec![
                (62, 0.75),
                (66, 0.75),
                (62, 0.75),
                (66, 0.75),
                (62, 0.75),
                (69, 1.5),
                (66, 0.75),
                (69, 0.75),
                (66, 0.75),
                (69, 0.75),
                (66, 0.75),
                (73, 1.5),
                (69, 0.75),
                (73, 0.75),
                (69, 0.75),
                (74, 2.0),
            ],
        },
    ]
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prototypes.is_empty() {
            return Err(Error::Config("need at least one motif prototype".into()));
        }
        for p in &self.prototypes {
            let longest = p.beats() * self.beat_sec * self.tempo_range.1;
            if longest >= CLIP_LEN {
                return Err(Error::Config(format!(
                    "prototype {:?} renders to {longest:.2} s at the slowest tempo, \
                     which does not fit a {CLIP_LEN} s clip",
                    p.name
                )));
            }
        }
        if self.train_versions + self.val_versions >= self.n_versions {
            return Err(Error::Config(
                "train + val versions must leave at least one test version".into(),
            ));
        }
        if self.tempo_range.0 > self.tempo_range.1 || self.tempo_range.0 <= 0.0 {
            return Err(Error::Config("bad tempo range".into()));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }
}

fn midi_hz(midi: f64) -> f64 {
    440.0 * 2f64.powf((midi - 69.0) / 12.0)
}

fn splitmix(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Additive harmonic tone: fundamental plus three decaying partials, with a
/// short attack and an exponential decay envelope.
fn render_note(samples: &mut [f64], start_sec: f64, dur_sec: f64, f0: f64, gain: f64) {
    const PARTIAL_AMPS: [f64; 4] = [1.0, 0.45, 0.28, 0.18];
    let rate = TARGET_RATE as f64;
    let s0 = (start_sec * rate) as usize;
    let n = (dur_sec * rate) as usize;
    let attack = (0.015 * rate) as usize;
    let release = (0.03 * rate).min(n as f64 / 4.0) as usize;
    for i in 0..n {
        let idx = s0 + i;
        if idx >= samples.len() {
            break;
        }
        let t = i as f64 / rate;
        let mut v = 0.0;
        for (p, amp) in PARTIAL_AMPS.iter().enumerate() {
            let f = f0 * (p + 1) as f64;
            if f >= rate / 2.0 {
                continue;
            }
            v += amp * (2.0 * std::f64::consts::PI * f * t).sin();
        }
        let mut env = (-t / 1.2).exp();
        if i < attack {
            env *= i as f64 / attack as f64;
        }
        if n - i < release {
            env *= (n - i) as f64 / release as f64;
        }
        samples[idx] += gain * env * v;
    }
}

fn render_pink_noise(samples: &mut [f64], rng: &mut ChaCha8Rng, gain: f64) {
    let (mut b0, mut b1, mut b2) = (0.0f64, 0.0f64, 0.0f64);
    for s in samples.iter_mut() {
        let white: f64 = rng.gen_range(-1.0..1.0);
        b0 = 0.99765 * b0 + white * 0.0990460;
        b1 = 0.96300 * b1 + white * 0.2965164;
        b2 = 0.57000 * b2 + white * 1.0526913;
        *s += gain * 0.25 * (b0 + b1 + b2 + white * 0.1848);
    }
}

/// One rendered occurrence within a clip.
#[derive(Debug, Clone)]
struct Placement {
    class_id: usize,
    interval: Interval,
    tempo: f64,
    transpose: i32,
}

/// Render one 15-second clip: planned motifs, random distractor notes and a
/// pink-noise floor. Deterministic in `seed`.
fn render_clip(
    cfg: &SynthConfig,
    planned_classes: &[usize],
    seed: u64,
) -> (Vec<f64>, Vec<Placement>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = vec![0.0f64; CLIP_SAMPLES];
    let mut placements: Vec<Placement> = Vec::new();

    for &class_id in planned_classes {
        let proto = &cfg.prototypes[class_id];
        let tempo = rng.gen_range(cfg.tempo_range.0..=cfg.tempo_range.1);
        let transpose = rng.gen_range(-cfg.transpose_semitones..=cfg.transpose_semitones);
        let width = proto.beats() * cfg.beat_sec * tempo;
        let margin = 0.25;
        let mut placed = None;
        for _ in 0..40 {
            let start = rng.gen_range(margin..(CLIP_LEN - width - margin));
            let candidate = Interval::new(start, start + width);
            let overlaps = placements
                .iter()
                .any(|p| candidate.intersection(&p.interval) > 0.0);
            if !overlaps {
                placed = Some(candidate);
                break;
            }
        }
        let Some(interval) = placed else { continue };
        placements.push(Placement {
            class_id,
            interval,
            tempo,
            transpose,
        });
    }

    for p in &placements {
        let proto = &cfg.prototypes[p.class_id];
        let mut cursor = p.interval.start;
        for (midi, beats) in &proto.notes {
            let dur = beats * cfg.beat_sec * p.tempo;
            let f0 = midi_hz((*midi + p.transpose) as f64);
            render_note(&mut samples, cursor, dur * 0.95, f0, cfg.motif_gain);
            cursor += dur;
        }
    }

    let n_distractors = rng.gen_range(0..=cfg.max_distractors);
    for _ in 0..n_distractors {
        let midi = rng.gen_range(40..90);
        let dur = rng.gen_range(0.1..0.6);
        let start = rng.gen_range(0.0..(CLIP_LEN - dur));
        render_note(
            &mut samples,
            start,
            dur,
            midi_hz(midi as f64),
            cfg.distractor_gain,
        );
    }

    render_pink_noise(&mut samples, &mut rng, cfg.noise_floor);
    for v in &mut samples {
        *v = v.clamp(-1.0, 1.0);
    }
    (samples, placements)
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthSummary {
    pub n_clips: usize,
    pub n_instances: usize,
    pub per_class_instances: Vec<usize>,
    pub seed: u64,
    pub config_hash: String,
}

/// Generate a corpus under `out_dir`: per-clip CQT caches (and WAVs when
/// configured), `annotations.csv`, `splits.json` and `manifest.json`.
pub fn synth_generate(cfg: &SynthConfig, seed: u64, out_dir: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir.join("cqt"))?;
    if cfg.emit_wav {
        std::fs::create_dir_all(out_dir.join("wav"))?;
    }
    let n_classes = cfg.prototypes.len();

    // plan motif counts and classes sequentially so class balance and
    // determinism do not depend on render order
    let mut plan_rng = ChaCha8Rng::seed_from_u64(splitmix(seed, 0));
    let mut class_cursor = 0usize;
    let plans: Vec<Vec<usize>> = (0..cfg.n_clips)
        .map(|_| {
            let n: usize = {
                let r: f64 = plan_rng.gen();
                if r < 0.10 {
                    0
                } else if r < 0.50 {
                    1
                } else if r < 0.85 {
                    2
                } else {
                    3
                }
            };
            let n = n.min(cfg.max_motifs_per_clip);
            (0..n)
                .map(|_| {
                    let c = class_cursor % n_classes;
                    class_cursor += 1;
                    c
                })
                .collect()
        })
        .collect();

    let transform = CqtTransform::new(CqtSpec::default(), TARGET_RATE)?;
    let rendered: Vec<Result<(Vec<Placement>, ActEntry)>> = plans
        .par_iter()
        .enumerate()
        .map(|(i, planned)| {
            let (samples, placements) = render_clip(cfg, planned, splitmix(seed, 1 + i as u64));
            let version = i % cfg.n_versions;
            let recording_id = format!("syn{version:02}");
            let act_id = format!("clip{i:05}");
            let clip = AudioClip {
                samples,
                sample_rate: TARGET_RATE,
                origin_sec: 0.0,
            };
            let m = transform.process(&clip)?;
            let cqt_rel = format!("cqt/{recording_id}__{act_id}.cqt");
            write_cqt_cache(&out_dir.join(&cqt_rel), &m)?;
            let wav_rel = if cfg.emit_wav {
                let rel = format!("wav/{recording_id}__{act_id}.wav");
                crate::audio::write_wav_mono16(&out_dir.join(&rel), &clip.samples, TARGET_RATE)?;
                Some(rel)
            } else {
                None
            };
            Ok((
                placements,
                ActEntry {
                    recording_id,
                    act_id,
                    len_sec: CLIP_LEN,
                    wav: wav_rel,
                    cqt: Some(cqt_rel),
                },
            ))
        })
        .collect();

    let mut acts = Vec::with_capacity(cfg.n_clips);
    let mut instances: Vec<MotifInstance> = Vec::new();
    let mut per_class = vec![0usize; n_classes];
    for r in rendered {
        let (placements, act) = r?;
        for p in &placements {
            per_class[p.class_id] += 1;
            instances.push(MotifInstance {
                recording_id: act.recording_id.clone(),
                act_id: act.act_id.clone(),
                class_id: p.class_id,
                interval: p.interval,
            });
        }
        acts.push(act);
    }

    let class_names: Vec<String> = cfg.prototypes.iter().map(|p| p.name.clone()).collect();
    crate::dataset::save_annotations(&out_dir.join("annotations.csv"), &instances, &class_names)?;

    let version_name = |v: usize| format!("syn{v:02}");
    let splits = match cfg.split_mode {
        SplitMode::Version => SplitConfig {
            mode: SplitMode::Version,
            train: (0..cfg.train_versions).map(version_name).collect(),
            val: (cfg.train_versions..cfg.train_versions + cfg.val_versions)
                .map(version_name)
                .collect(),
            test: (cfg.train_versions + cfg.val_versions..cfg.n_versions)
                .map(version_name)
                .collect(),
        },
        SplitMode::Act => {
            // same proportions as the version split, dealt over act ids
            let mut groups = (Vec::new(), Vec::new(), Vec::new());
            for (i, act) in acts.iter().enumerate() {
                let slot = i % cfg.n_versions;
                if slot < cfg.train_versions {
                    groups.0.push(act.act_id.clone());
                } else if slot < cfg.train_versions + cfg.val_versions {
                    groups.1.push(act.act_id.clone());
                } else {
                    groups.2.push(act.act_id.clone());
                }
            }
            SplitConfig {
                mode: SplitMode::Act,
                train: groups.0,
                val: groups.1,
                test: groups.2,
            }
        }
    };
    splits.save(&out_dir.join("splits.json"))?;

    let manifest = CorpusManifest {
        class_names,
        acts,
        seed: Some(seed),
        config_hash: Some(cfg.fingerprint()),
    };
    manifest.save(out_dir)?;

    Ok(SynthSummary {
        n_clips: cfg.n_clips,
        n_instances: instances.len(),
        per_class_instances: per_class,
        seed,
        config_hash: cfg.fingerprint(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cqt::read_cqt_cache;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_clips: 13,
            ..Default::default()
        }
    }

    fn dir(name: &str) -> std::path::PathBuf {
        let d = std::env::temp_dir().join("motif-synth-test").join(name);
        let _ = std::fs::remove_dir_all(&d);
        std::fs::create_dir_all(&d).unwrap();
        d
    }

    fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(p) = stack.pop() {
            for entry in std::fs::read_dir(&p).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path
                        .strip_prefix(root)
                        .unwrap()
                        .to_string_lossy()
                        .into_owned();
                    files.push((rel, std::fs::read(&path).unwrap()));
                }
            }
        }
        files.sort();
        files
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let (d1, d2) = (dir("det1"), dir("det2"));
        synth_generate(&small_cfg(), 11, &d1).unwrap();
        synth_generate(&small_cfg(), 11, &d2).unwrap();
        assert_eq!(tree_bytes(&d1), tree_bytes(&d2));
    }

    #[test]
    fn zero_motifs_means_noise_only() {
        let d = dir("empty");
        let cfg = SynthConfig {
            n_clips: 4,
            max_motifs_per_clip: 0,
            ..small_cfg()
        };
        let summary = synth_generate(&cfg, 3, &d).unwrap();
        assert_eq!(summary.n_instances, 0);
        let csv = std::fs::read_to_string(d.join("annotations.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1, "header only");
        // noise-only clips still produce nonzero CQT
        let manifest = CorpusManifest::load(&d).unwrap();
        let m = read_cqt_cache(&d.join(manifest.acts[0].cqt.as_ref().unwrap())).unwrap();
        assert!(m.data.iter().any(|v| *v > 0.0));
    }

    #[test]
    fn oversized_prototype_is_config_error() {
        let cfg = SynthConfig {
            prototypes: vec![MotifPrototype {
                name: "endless".into(),
                notes: vec![(60, 60.0)],
            }],
            ..small_cfg()
        };
        assert!(matches!(
            synth_generate(&cfg, 0, &dir("oversized")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn transposition_shifts_cqt_ridge() {
        // render the same prototype at transposition 0 and +2 directly and
        // compare argmax traces of the CQT
        let cfg = small_cfg();
        let proto = &cfg.prototypes[0];
        let spec = CqtSpec::default();
        let transform = CqtTransform::new(spec, TARGET_RATE).unwrap();

        let render_at = |shift: i32| -> crate::cqt::CqtMatrix {
            let mut samples = vec![0.0f64; CLIP_SAMPLES];
            let mut cursor = 2.0;
            for (midi, beats) in &proto.notes {
                let dur = beats * cfg.beat_sec;
                render_note(
                    &mut samples,
                    cursor,
                    dur * 0.95,
                    midi_hz((*midi + shift) as f64),
                    0.3,
                );
                cursor += dur;
            }
            transform
                .process(&AudioClip {
                    samples,
                    sample_rate: TARGET_RATE,
                    origin_sec: 0.0,
                })
                .unwrap()
        };
        let base = render_at(0);
        let up = render_at(2);
        let frame = (2.5 * base.frame_rate) as usize; // inside the first note
        let argmax = |m: &crate::cqt::CqtMatrix| {
            (0..m.n_bins)
                .max_by(|a, b| m.at(*a, frame).partial_cmp(&m.at(*b, frame)).unwrap())
                .unwrap() as i32
        };
        assert_eq!(argmax(&up) - argmax(&base), 2);
    }

    #[test]
    fn class_balance_within_twenty_percent() {
        let d = dir("balance");
        let cfg = SynthConfig {
            n_clips: 60,
            ..small_cfg()
        };
        let summary = synth_generate(&cfg, 5, &d).unwrap();
        let mean = summary.per_class_instances.iter().sum::<usize>() as f64
            / summary.per_class_instances.len() as f64;
        for (c, count) in summary.per_class_instances.iter().enumerate() {
            assert!(
                (*count as f64 - mean).abs() <= 0.2 * mean,
                "class {c} count {count} vs mean {mean}"
            );
        }
    }

    #[test]
    fn act_split_mode_partitions_by_act() {
        let d = dir("actsplit");
        let cfg = SynthConfig {
            n_clips: 26,
            split_mode: SplitMode::Act,
            ..small_cfg()
        };
        synth_generate(&cfg, 2, &d).unwrap();
        let splits = SplitConfig::load(&d.join("splits.json")).unwrap();
        assert_eq!(splits.mode, SplitMode::Act);
        assert_eq!(splits.train.len(), 20);
        assert_eq!(splits.val.len(), 4);
        assert_eq!(splits.test.len(), 2);
        assert!(splits.train.iter().all(|id| id.starts_with("clip")));
    }
}
