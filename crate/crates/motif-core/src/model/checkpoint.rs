//! Checkpoint format: a JSON text header, a `%%WEIGHTS%%` marker line, then
//! every parameter tensor as little-endian f32 in store order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::store::ParameterStore;
use crate::model::{DetectorConfig, DetectorNet};

const MARKER: &[u8] = b"\n%%WEIGHTS%%\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs_trained: usize,
    pub best_val_map50: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub detector: DetectorConfig,
    pub anchors: Vec<f64>,
    pub class_names: Vec<String>,
    pub training: TrainingMeta,
}

pub fn save(path: &Path, header: &CheckpointHeader, ps: &ParameterStore) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let json = serde_json::to_string(header)?;
    f.write_all(json.as_bytes())?;
    f.write_all(MARKER)?;
    let mut buf = Vec::with_capacity(ps.count_params() * 4);
    for t in ps.tensors() {
        for v in t.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    f.write_all(&buf)?;
    Ok(())
}

/// Load a checkpoint, rebuilding the detector described by its header.
pub fn load(path: &Path) -> Result<(CheckpointHeader, DetectorNet, ParameterStore)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let pos = bytes
        .windows(MARKER.len())
        .position(|w| w == MARKER)
        .ok_or_else(|| Error::Checkpoint("missing %%WEIGHTS%% marker".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..pos])?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let weights = &bytes[pos + MARKER.len()..];
    let (net, mut ps) = DetectorNet::new(&header.detector, 0)?;
    let expected = ps.count_params() * 4;
    if weights.len() != expected {
        return Err(Error::Checkpoint(format!(
            "weight payload is {} bytes, expected {}",
            weights.len(),
            expected
        )));
    }
    let mut off = 0;
    for t in ps.tensors_mut() {
        for v in t.data_mut() {
            let raw: [u8; 4] = weights[off..off + 4].try_into().unwrap();
            *v = f32::from_le_bytes(raw) as f64;
            off += 4;
        }
    }
    if header.anchors.len() != header.detector.n_anchors {
        return Err(Error::Incompatible(format!(
            "{} anchors in header but detector expects {}",
            header.anchors.len(),
            header.detector.n_anchors
        )));
    }
    Ok((header, net, ps))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DetectorConfig {
        DetectorConfig {
            n_anchors: 2,
            n_classes: 3,
            channels: vec![2, 3],
            convs_per_block: 1,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_preserves_f32_weights() {
        let dir = std::env::temp_dir().join("motif-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.ckpt");

        let cfg = small_cfg();
        let (_, ps) = DetectorNet::new(&cfg, 7).unwrap();
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            detector: cfg,
            anchors: vec![1.0, 3.0],
            class_names: vec!["a".into(), "b".into(), "c".into()],
            training: TrainingMeta::default(),
        };
        save(&path, &header, &ps).unwrap();
        let (h2, _, ps2) = load(&path).unwrap();
        assert_eq!(h2.class_names, header.class_names);
        assert_eq!(h2.anchors, header.anchors);
        for (a, b) in ps.tensors().iter().zip(ps2.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn identical_saves_are_byte_identical() {
        let dir = std::env::temp_dir().join("motif-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let (p1, p2) = (dir.join("a.ckpt"), dir.join("b.ckpt"));
        let cfg = small_cfg();
        let (_, ps) = DetectorNet::new(&cfg, 7).unwrap();
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            detector: cfg,
            anchors: vec![1.0, 3.0],
            class_names: vec!["a".into(), "b".into(), "c".into()],
            training: TrainingMeta::default(),
        };
        save(&p1, &header, &ps).unwrap();
        save(&p2, &header, &ps).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = std::env::temp_dir().join("motif-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.ckpt");
        let cfg = small_cfg();
        let (_, ps) = DetectorNet::new(&cfg, 7).unwrap();
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            detector: cfg,
            anchors: vec![1.0, 3.0],
            class_names: vec![],
            training: TrainingMeta::default(),
        };
        save(&path, &header, &ps).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
