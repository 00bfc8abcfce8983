//! Minimal RIFF/WAVE reader and writer: PCM 16-bit and IEEE float 32-bit,
//! one or two channels.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct WavData {
    /// Interleaved samples scaled to [-1, 1].
    pub samples: Vec<f64>,
    pub channels: u16,
    pub sample_rate: u32,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::WavFormat(msg.into())
}

fn u16_at(b: &[u8], off: usize) -> Result<u16> {
    b.get(off..off + 2)
        .map(|s| u16::from_le_bytes(s.try_into().unwrap()))
        .ok_or_else(|| fmt_err("truncated chunk"))
}

fn u32_at(b: &[u8], off: usize) -> Result<u32> {
    b.get(off..off + 4)
        .map(|s| u32::from_le_bytes(s.try_into().unwrap()))
        .ok_or_else(|| fmt_err("truncated chunk"))
}

pub fn read_wav(path: &Path) -> Result<WavData> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(fmt_err("missing RIFF/WAVE header"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(&bytes, pos + 4)? as usize;
        let body_start = pos + 8;
        let body_end = body_start + size;
        if body_end > bytes.len() {
            return Err(fmt_err("chunk size exceeds file length"));
        }
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(fmt_err("fmt chunk too small"));
                }
                fmt = Some((
                    u16_at(body, 0)?,
                    u16_at(body, 2)?,
                    u32_at(body, 4)?,
                    u16_at(body, 14)?,
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word-aligned
        pos = body_end + (size & 1);
    }
    let (format, channels, sample_rate, bits) = fmt.ok_or_else(|| fmt_err("missing fmt chunk"))?;
    let data = data.ok_or_else(|| fmt_err("missing data chunk"))?;
    if channels == 0 || channels > 2 {
        return Err(Error::WavUnsupported(format!("{channels} channels")));
    }
    let samples = match (format, bits) {
        (1, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes(c.try_into().unwrap()) as f64 / 32768.0)
            .collect(),
        (3, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        (f, b) => {
            return Err(Error::WavUnsupported(format!(
                "format tag {f} with {b} bits per sample"
            )))
        }
    };
    Ok(WavData {
        samples,
        channels,
        sample_rate,
    })
}

pub fn write_wav_interleaved16(
    path: &Path,
    interleaved: &[f64],
    channels: u16,
    sample_rate: u32,
) -> Result<()> {
    let n = interleaved.len();
    let data_size = (n * 2) as u32;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(b"RIFF")?;
    f.write_all(&(36 + data_size).to_le_bytes())?;
    f.write_all(b"WAVE")?;
    f.write_all(b"fmt ")?;
    f.write_all(&16u32.to_le_bytes())?;
    f.write_all(&1u16.to_le_bytes())?; // PCM
    f.write_all(&channels.to_le_bytes())?;
    f.write_all(&sample_rate.to_le_bytes())?;
    f.write_all(&(sample_rate * channels as u32 * 2).to_le_bytes())?;
    f.write_all(&(channels * 2).to_le_bytes())?;
    f.write_all(&16u16.to_le_bytes())?;
    f.write_all(b"data")?;
    f.write_all(&data_size.to_le_bytes())?;
    for v in interleaved {
        let q = (v.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        f.write_all(&q.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_wav_mono16(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    write_wav_interleaved16(path, samples, 1, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("motif-wav-test");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn pcm16_round_trip() {
        let path = temp("rt.wav");
        let samples: Vec<f64> = (0..100).map(|i| ((i as f64) / 50.0 - 1.0) * 0.9).collect();
        write_wav_mono16(&path, &samples, 8000).unwrap();
        let got = read_wav(&path).unwrap();
        assert_eq!(got.channels, 1);
        assert_eq!(got.sample_rate, 8000);
        assert_eq!(got.samples.len(), 100);
        for (a, b) in samples.iter().zip(&got.samples) {
            assert!((a - b).abs() < 1.0 / 16384.0);
        }
    }

    #[test]
    fn rejects_three_channels() {
        let path = temp("three.wav");
        write_wav_interleaved16(&path, &[0.0; 30], 3, 8000).unwrap();
        assert!(matches!(read_wav(&path), Err(Error::WavUnsupported(_))));
    }

    #[test]
    fn rejects_unknown_format_tag() {
        let path = temp("alaw.wav");
        write_wav_mono16(&path, &[0.0; 10], 8000).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[20] = 6; // a-law
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_wav(&path), Err(Error::WavUnsupported(_))));
    }
}
