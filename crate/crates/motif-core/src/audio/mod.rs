//! PCM audio ingestion: WAV decode/encode and band-limited resampling.

mod resample;
mod wav;

pub use resample::resample;
pub use wav::{read_wav, write_wav_mono16, WavData};

use std::path::Path;

use crate::error::Result;

pub const TARGET_RATE: u32 = 22050;
pub const CLIP_SAMPLES: usize = 330_750; // 15 s at 22050 Hz

/// Mono audio at a known rate, with its offset inside the source recording.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub origin_sec: f64,
}

impl AudioClip {
    pub fn duration_sec(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Decode a WAV file, mix to mono by averaging, and resample to
/// `target_rate`. Amplitudes are clamped to [-1, 1].
pub fn load_wav(path: &Path, target_rate: u32) -> Result<AudioClip> {
    let wav = read_wav(path)?;
    let mono = mix_to_mono(&wav);
    let mut samples = resample(&mono, wav.sample_rate, target_rate);
    for v in &mut samples {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(AudioClip {
        samples,
        sample_rate: target_rate,
        origin_sec: 0.0,
    })
}

fn mix_to_mono(wav: &WavData) -> Vec<f64> {
    let ch = wav.channels as usize;
    if ch == 1 {
        return wav.samples.clone();
    }
    wav.samples
        .chunks_exact(ch)
        .map(|frame| frame.iter().sum::<f64>() / ch as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn temp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("motif-audio-test");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn silence_is_rate_invariant() {
        let path = temp("silence.wav");
        write_wav_mono16(&path, &vec![0.0; 44100], 44100).unwrap();
        let clip = load_wav(&path, 22050).unwrap();
        assert_eq!(clip.samples.len(), 22050);
        assert!(clip.samples.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stereo_opposite_channels_cancel() {
        let path = temp("stereo.wav");
        // interleaved (+0.5, -0.5) at 22050 Hz
        let mut interleaved = Vec::new();
        for _ in 0..22050 {
            interleaved.push(0.5);
            interleaved.push(-0.5);
        }
        wav::write_wav_interleaved16(&path, &interleaved, 2, 22050).unwrap();
        let clip = load_wav(&path, 22050).unwrap();
        assert_eq!(clip.samples.len(), 22050);
        assert!(clip.samples.iter().all(|v| v.abs() < 1e-4));
    }

    #[test]
    fn sine_survives_resampling() {
        let path = temp("sine440.wav");
        let rate = 44100;
        let samples: Vec<f64> = (0..rate)
            .map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / rate as f64).sin() * 0.7)
            .collect();
        write_wav_mono16(&path, &samples, rate as u32).unwrap();
        let clip = load_wav(&path, 22050).unwrap();
        assert_eq!(clip.samples.len(), 22050);

        // oracle: DFT peak-pick on the resampled output (1 Hz bins)
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(22050);
        let mut buf: Vec<Complex<f64>> =
            clip.samples.iter().map(|v| Complex::new(*v, 0.0)).collect();
        fft.process(&mut buf);
        let peak = (1..11025)
            .max_by(|a, b| buf[*a].norm().partial_cmp(&buf[*b].norm()).unwrap())
            .unwrap();
        assert!(
            (peak as i64 - 440).unsigned_abs() <= 1,
            "dominant bin {peak} should be 440 +/- 1"
        );
    }

    #[test]
    fn malformed_header_is_format_error() {
        let path = temp("garbage.wav");
        std::fs::write(&path, b"not a riff file at all........").unwrap();
        assert!(matches!(
            load_wav(&path, 22050),
            Err(crate::error::Error::WavFormat(_))
        ));
    }
}
