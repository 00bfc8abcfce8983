//! On-disk corpus layout: a manifest of acts (audio or cached CQT), an
//! annotations CSV and a splits file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::TARGET_RATE;
use crate::cqt::{read_cqt_cache, write_cqt_cache, CqtSpec, CqtTransform};
use crate::dataset::{window_clips, ClipIndexEntry, MotifInstance, SplitConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActEntry {
    pub recording_id: String,
    pub act_id: String,
    pub len_sec: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wav: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cqt: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub class_names: Vec<String>,
    pub acts: Vec<ActEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl CorpusManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        Ok(serde_json::from_reader(std::io::BufReader::new(
            std::fs::File::open(&path)
                .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?,
        ))?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        serde_json::to_writer_pretty(
            std::io::BufWriter::new(std::fs::File::create(dir.join("manifest.json"))?),
            self,
        )?;
        Ok(())
    }

    pub fn annotations(&self, dir: &Path) -> Result<Vec<MotifInstance>> {
        crate::dataset::load_annotations(&dir.join("annotations.csv"), &self.class_names)
    }

    pub fn splits(&self, dir: &Path) -> Result<SplitConfig> {
        SplitConfig::load(&dir.join("splits.json"))
    }
}

/// Ensure every act has a CQT cache (computing from WAV where needed) and
/// window all acts into the clip index.
pub fn prepare_corpus(corpus_dir: &Path, out_dir: &Path) -> Result<Vec<ClipIndexEntry>> {
    use rayon::prelude::*;

    let manifest = CorpusManifest::load(corpus_dir)?;
    let annotations = manifest.annotations(corpus_dir)?;
    std::fs::create_dir_all(out_dir.join("cqt"))?;

    // transcode wav-only acts, in parallel
    let todo: Vec<(usize, PathBuf)> = manifest
        .acts
        .iter()
        .enumerate()
        .filter(|(_, act)| act.cqt.is_none())
        .map(|(i, act)| {
            let wav = act.wav.as_ref().ok_or_else(|| {
                Error::Config(format!("act {} has neither wav nor cqt entry", act.act_id))
            })?;
            Ok((i, corpus_dir.join(wav)))
        })
        .collect::<Result<_>>()?;
    let transform = CqtTransform::new(CqtSpec::default(), TARGET_RATE)?;
    let results: Vec<Result<(usize, String)>> = todo
        .par_iter()
        .map(|(i, wav_path)| {
            let clip = crate::audio::load_wav(wav_path, TARGET_RATE)?;
            let m = transform.process(&clip)?;
            let act = &manifest.acts[*i];
            let rel = format!("cqt/{}__{}.cqt", act.recording_id, act.act_id);
            write_cqt_cache(&out_dir.join(&rel), &m)?;
            Ok((*i, rel))
        })
        .collect();
    let mut manifest = manifest;
    for r in results {
        let (i, rel) = r?;
        manifest.acts[i].cqt = Some(rel);
    }

    let mut clips = Vec::new();
    for act in &manifest.acts {
        if act.len_sec < crate::dataset::CLIP_LEN {
            eprintln!(
                "skipping act {}/{}: {} s is shorter than one clip",
                act.recording_id, act.act_id, act.len_sec
            );
            continue;
        }
        let act_insts: Vec<MotifInstance> = annotations
            .iter()
            .filter(|m| m.recording_id == act.recording_id && m.act_id == act.act_id)
            .cloned()
            .collect();
        clips.extend(window_clips(
            &act.recording_id,
            &act.act_id,
            act.len_sec,
            &act_insts,
        ));
    }
    crate::dataset::save_clip_index(&out_dir.join("clips.json"), &clips)?;
    manifest.save(out_dir)?;
    Ok(clips)
}

/// Resolve the on-disk CQT cache of an act, preferring the prepared copy.
pub fn act_cqt_path(corpus_dir: &Path, prepared_dir: &Path, act: &ActEntry) -> Result<PathBuf> {
    if let Some(rel) = &act.cqt {
        let prepared = prepared_dir.join(rel);
        if prepared.exists() {
            return Ok(prepared);
        }
        let original = corpus_dir.join(rel);
        if original.exists() {
            return Ok(original);
        }
    }
    let derived = prepared_dir.join(format!("cqt/{}__{}.cqt", act.recording_id, act.act_id));
    if derived.exists() {
        return Ok(derived);
    }
    Err(Error::Config(format!(
        "no CQT cache for act {}/{}; run prepare first",
        act.recording_id, act.act_id
    )))
}

pub fn load_act_cqt(
    corpus_dir: &Path,
    prepared_dir: &Path,
    act: &ActEntry,
) -> Result<crate::cqt::CqtMatrix> {
    read_cqt_cache(&act_cqt_path(corpus_dir, prepared_dir, act)?)
}
