//! Constant-Q transform over semitone-spaced bins, computed per frame via
//! FFT and sparse spectral kernels, with log(1 + g|X|) magnitude
//! compression.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};

pub const DEFAULT_F_MIN: f64 = 32.703; // C1
pub const DEFAULT_BINS: usize = 84;
pub const BINS_PER_OCTAVE: usize = 12;
pub const HOP: usize = 512;
pub const MAG_GAIN: f64 = 10.0;
/// Spectral kernel entries below this fraction of the kernel peak are
/// dropped; keeps the per-frame dot products sparse.
const KERNEL_TRIM: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CqtSpec {
    pub bins_per_octave: usize,
    pub n_bins: usize,
    pub f_min: f64,
    pub hop: usize,
}

impl Default for CqtSpec {
    fn default() -> Self {
        Self {
            bins_per_octave: BINS_PER_OCTAVE,
            n_bins: DEFAULT_BINS,
            f_min: DEFAULT_F_MIN,
            hop: HOP,
        }
    }
}

impl CqtSpec {
    pub fn validate(&self) -> Result<()> {
        if self.bins_per_octave != 12 || self.hop != 512 {
            return Err(Error::Config(
                "bins_per_octave is fixed at 12 and hop at 512".into(),
            ));
        }
        if self.n_bins == 0 || self.n_bins % self.bins_per_octave != 0 {
            return Err(Error::Config(
                "n_bins must be a positive multiple of bins_per_octave".into(),
            ));
        }
        Ok(())
    }

    pub fn bin_center_hz(&self, k: usize) -> f64 {
        self.f_min * 2f64.powf(k as f64 / self.bins_per_octave as f64)
    }

    /// Frequency-to-bandwidth quality factor shared by all bins.
    pub fn q_factor(&self) -> f64 {
        1.0 / (2f64.powf(1.0 / self.bins_per_octave as f64) - 1.0)
    }

    /// Analysis window length in samples for bin `k` at `sample_rate`.
    pub fn window_len(&self, k: usize, sample_rate: u32) -> usize {
        (self.q_factor() * sample_rate as f64 / self.bin_center_hz(k)).ceil() as usize
    }
}

/// Log-compressed CQT magnitudes, frequency-major (`n_bins` rows of
/// `n_frames` values).
#[derive(Debug, Clone, PartialEq)]
pub struct CqtMatrix {
    pub n_bins: usize,
    pub n_frames: usize,
    pub data: Vec<f64>,
    pub frame_rate: f64,
}

impl CqtMatrix {
    pub fn zeros(n_bins: usize, n_frames: usize, frame_rate: f64) -> Self {
        Self {
            n_bins,
            n_frames,
            data: vec![0.0; n_bins * n_frames],
            frame_rate,
        }
    }

    #[inline]
    pub fn at(&self, bin: usize, frame: usize) -> f64 {
        self.data[bin * self.n_frames + frame]
    }

    #[inline]
    pub fn at_mut(&mut self, bin: usize, frame: usize) -> &mut f64 {
        &mut self.data[bin * self.n_frames + frame]
    }

    pub fn row(&self, bin: usize) -> &[f64] {
        &self.data[bin * self.n_frames..(bin + 1) * self.n_frames]
    }

    /// Scale so the maximum value is 1; a no-op for all-zero matrices.
    pub fn max_normalize(&mut self) {
        let max = self.data.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            for v in &mut self.data {
                *v /= max;
            }
        }
    }

    /// Take a horizontal slice of `n_frames` frames starting at `frame0`.
    pub fn slice_frames(&self, frame0: usize, n_frames: usize) -> CqtMatrix {
        assert!(frame0 + n_frames <= self.n_frames);
        let mut out = CqtMatrix::zeros(self.n_bins, n_frames, self.frame_rate);
        for b in 0..self.n_bins {
            let src = &self.row(b)[frame0..frame0 + n_frames];
            out.data[b * n_frames..(b + 1) * n_frames].copy_from_slice(src);
        }
        out
    }
}

struct SparseKernel {
    /// (fft bin, conjugated coefficient) pairs.
    entries: Vec<(u32, Complex<f64>)>,
}

/// Precomputed transform for a fixed spec and sample rate.
pub struct CqtTransform {
    pub spec: CqtSpec,
    pub sample_rate: u32,
    nfft: usize,
    min_len: usize,
    kernels: Vec<SparseKernel>,
    fft: Arc<dyn Fft<f64>>,
}

impl CqtTransform {
    pub fn new(spec: CqtSpec, sample_rate: u32) -> Result<Self> {
        spec.validate()?;
        let min_len = spec.window_len(0, sample_rate);
        let nfft = min_len.next_power_of_two();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(nfft);

        let mut kernels = Vec::with_capacity(spec.n_bins);
        let mut buf = vec![Complex::new(0.0, 0.0); nfft];
        for k in 0..spec.n_bins {
            let win_len = spec.window_len(k, sample_rate).min(nfft);
            let f_k = spec.bin_center_hz(k);
            // Hann-windowed complex exponential, centered in the FFT buffer,
            // normalized so a unit sine at the bin center yields |X| ~= 1
            let mut win_sum = 0.0;
            for m in 0..win_len {
                let w = 0.5
                    - 0.5
                        * (2.0 * std::f64::consts::PI * m as f64 / (win_len - 1).max(1) as f64)
                            .cos();
                win_sum += w;
            }
            let norm = 2.0 / win_sum;
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            let start = (nfft - win_len) / 2;
            for m in 0..win_len {
                let w = 0.5
                    - 0.5
                        * (2.0 * std::f64::consts::PI * m as f64 / (win_len - 1).max(1) as f64)
                            .cos();
                let phase =
                    2.0 * std::f64::consts::PI * f_k * (m as f64 - (win_len as f64 - 1.0) / 2.0)
                        / sample_rate as f64;
                buf[start + m] = Complex::from_polar(w * norm, phase);
            }
            fft.process(&mut buf);
            let peak = buf.iter().map(|c| c.norm()).fold(0.0, f64::max);
            let thresh = peak * KERNEL_TRIM;
            let entries: Vec<(u32, Complex<f64>)> = buf
                .iter()
                .enumerate()
                .filter(|(_, c)| c.norm() >= thresh)
                .map(|(i, c)| (i as u32, c.conj() / nfft as f64))
                .collect();
            kernels.push(SparseKernel { entries });
        }
        Ok(Self {
            spec,
            sample_rate,
            nfft,
            min_len,
            kernels,
            fft,
        })
    }

    /// Number of frames produced for a clip of `n_samples`.
    pub fn n_frames(&self, n_samples: usize) -> usize {
        n_samples / self.spec.hop + 1
    }

    /// Transform a clip into log-compressed CQT magnitudes. Frames are
    /// centered at multiples of the hop; analysis windows are zero-padded at
    /// the clip edges.
    pub fn process(&self, clip: &AudioClip) -> Result<CqtMatrix> {
        if clip.sample_rate != self.sample_rate {
            return Err(Error::Config(format!(
                "clip rate {} does not match transform rate {}",
                clip.sample_rate, self.sample_rate
            )));
        }
        if clip.samples.len() < self.min_len {
            return Err(Error::InsufficientInput {
                needed: self.min_len,
                got: clip.samples.len(),
            });
        }
        let n_frames = self.n_frames(clip.samples.len());
        let frame_rate = self.sample_rate as f64 / self.spec.hop as f64;
        let mut out = CqtMatrix::zeros(self.spec.n_bins, n_frames, frame_rate);

        let half = self.nfft / 2;
        let x = &clip.samples;
        let mut packed = vec![Complex::new(0.0, 0.0); self.nfft];
        let mut spec_even = vec![Complex::new(0.0, 0.0); self.nfft];
        let mut spec_odd = vec![Complex::new(0.0, 0.0); self.nfft];

        // two real frames per complex FFT
        let mut t = 0;
        while t < n_frames {
            let even_center = (t * self.spec.hop) as isize;
            let odd_center = ((t + 1) * self.spec.hop) as isize;
            let has_odd = t + 1 < n_frames;
            for (j, c) in packed.iter_mut().enumerate() {
                let off = j as isize - half as isize;
                let re = sample_at(x, even_center + off);
                let im = if has_odd {
                    sample_at(x, odd_center + off)
                } else {
                    0.0
                };
                *c = Complex::new(re, im);
            }
            self.fft.process(&mut packed);
            // unpack the two real-signal spectra
            for f in 0..self.nfft {
                let conj_mirror = packed[(self.nfft - f) % self.nfft].conj();
                spec_even[f] = 0.5 * (packed[f] + conj_mirror);
                spec_odd[f] = Complex::new(0.0, -0.5) * (packed[f] - conj_mirror);
            }
            for (k, kernel) in self.kernels.iter().enumerate() {
                let mut acc_e = Complex::new(0.0, 0.0);
                let mut acc_o = Complex::new(0.0, 0.0);
                for (f, coef) in &kernel.entries {
                    acc_e += spec_even[*f as usize] * coef;
                    acc_o += spec_odd[*f as usize] * coef;
                }
                *out.at_mut(k, t) = (MAG_GAIN * acc_e.norm()).ln_1p();
                if has_odd {
                    *out.at_mut(k, t + 1) = (MAG_GAIN * acc_o.norm()).ln_1p();
                }
            }
            t += 2;
        }
        Ok(out)
    }
}

#[inline]
fn sample_at(x: &[f64], idx: isize) -> f64 {
    if idx < 0 || idx as usize >= x.len() {
        0.0
    } else {
        x[idx as usize]
    }
}

/// Shift rows by `semitones` bins (+k moves energy to higher bins); vacated
/// rows are zero-filled and the shape is preserved.
pub fn pitch_shift_bins(m: &CqtMatrix, semitones: i32) -> Result<CqtMatrix> {
    if semitones.abs() > 3 {
        return Err(Error::PitchShiftRange(semitones));
    }
    let mut out = CqtMatrix::zeros(m.n_bins, m.n_frames, m.frame_rate);
    for b in 0..m.n_bins {
        let src = b as i32 - semitones;
        if src >= 0 && (src as usize) < m.n_bins {
            let src = src as usize;
            out.data[b * m.n_frames..(b + 1) * m.n_frames]
                .copy_from_slice(&m.data[src * m.n_frames..(src + 1) * m.n_frames]);
        }
    }
    Ok(out)
}

const CACHE_MAGIC: &[u8; 4] = b"CQT1";

/// Write the 16-byte header (`CQT1`, F, T, reserved; little-endian) followed
/// by F*T little-endian f32 values, frequency-major.
pub fn write_cqt_cache(path: &Path, m: &CqtMatrix) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CACHE_MAGIC)?;
    f.write_all(&(m.n_bins as u32).to_le_bytes())?;
    f.write_all(&(m.n_frames as u32).to_le_bytes())?;
    f.write_all(&0u32.to_le_bytes())?;
    let mut buf = Vec::with_capacity(m.data.len() * 4);
    for v in &m.data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_cqt_cache(path: &Path) -> Result<CqtMatrix> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[0..4] != CACHE_MAGIC {
        return Err(Error::Config(format!(
            "{} is not a CQT cache file",
            path.display()
        )));
    }
    let f = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let t = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 16 + f * t * 4;
    if bytes.len() != expected {
        return Err(Error::Config(format!(
            "CQT cache payload is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(f * t);
    for chunk in bytes[16..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Ok(CqtMatrix {
        n_bins: f,
        n_frames: t,
        data,
        frame_rate: crate::audio::TARGET_RATE as f64 / HOP as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{AudioClip, TARGET_RATE};
    use proptest::prelude::*;

    fn clip_of(samples: Vec<f64>) -> AudioClip {
        AudioClip {
            samples,
            sample_rate: TARGET_RATE,
            origin_sec: 0.0,
        }
    }

    fn transform() -> CqtTransform {
        CqtTransform::new(CqtSpec::default(), TARGET_RATE).unwrap()
    }

    #[test]
    fn fifteen_second_clip_has_646_frames() {
        let t = transform();
        let clip = clip_of(vec![0.0; crate::audio::CLIP_SAMPLES]);
        let m = t.process(&clip).unwrap();
        assert_eq!(m.n_frames, 646);
        assert_eq!(m.n_bins, 84);
    }

    #[test]
    fn zero_clip_zero_matrix() {
        let t = transform();
        let m = t.process(&clip_of(vec![0.0; 40_000])).unwrap();
        assert!(m.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn too_short_clip_is_rejected() {
        let t = transform();
        assert!(matches!(
            t.process(&clip_of(vec![0.0; 1000])),
            Err(Error::InsufficientInput { .. })
        ));
    }

    /// Direct time-domain CQT at one bin: the oracle for peak placement.
    fn naive_cqt_bin(samples: &[f64], spec: &CqtSpec, k: usize, center: isize) -> f64 {
        let rate = TARGET_RATE as f64;
        let win_len = spec.window_len(k, TARGET_RATE);
        let f_k = spec.bin_center_hz(k);
        let mut win_sum = 0.0;
        let mut re = 0.0;
        let mut im = 0.0;
        for m in 0..win_len {
            let w =
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * m as f64 / (win_len - 1) as f64).cos();
            win_sum += w;
            let idx = center - win_len as isize / 2 + m as isize;
            if idx < 0 || idx as usize >= samples.len() {
                continue;
            }
            let phase =
                2.0 * std::f64::consts::PI * f_k * (m as f64 - (win_len as f64 - 1.0) / 2.0) / rate;
            re += samples[idx as usize] * w * phase.cos();
            im -= samples[idx as usize] * w * phase.sin();
        }
        (re * re + im * im).sqrt() * 2.0 / win_sum
    }

    #[test]
    fn sine_at_bin_center_peaks_at_that_bin() {
        let spec = CqtSpec::default();
        let t = transform();
        let f = spec.bin_center_hz(24);
        let samples: Vec<f64> = (0..3 * TARGET_RATE as usize)
            .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / TARGET_RATE as f64).sin() * 0.5)
            .collect();
        let m = t.process(&clip_of(samples.clone())).unwrap();
        // argmax over bins of the frame-mean magnitude
        let argmax = (0..84)
            .max_by(|a, b| {
                let ma: f64 = m.row(*a).iter().sum();
                let mb: f64 = m.row(*b).iter().sum();
                ma.partial_cmp(&mb).unwrap()
            })
            .unwrap();
        assert_eq!(argmax, 24);

        // direct naive CQT sum at each bin center agrees on the peak
        let center = samples.len() as isize / 2;
        let naive_argmax = (0..84)
            .max_by(|a, b| {
                naive_cqt_bin(&samples, &spec, *a, center)
                    .partial_cmp(&naive_cqt_bin(&samples, &spec, *b, center))
                    .unwrap()
            })
            .unwrap();
        assert_eq!(naive_argmax, 24);

        // and the fast path tracks the naive magnitude at the peak frame
        let frame = (center as usize) / spec.hop;
        let fast = (m.at(24, frame).exp() - 1.0) / MAG_GAIN;
        let naive = naive_cqt_bin(&samples, &spec, 24, (frame * spec.hop) as isize);
        assert!(
            (fast - naive).abs() < 1e-3 * naive.max(1e-6),
            "fast {fast} vs naive {naive}"
        );
    }

    #[test]
    fn gain_monotonicity() {
        let mut rng_state = 0x12345u64;
        let mut next = || {
            rng_state = rng_state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((rng_state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let samples: Vec<f64> = (0..30_000).map(|_| next() * 0.3).collect();
        let t = transform();
        let a = t.process(&clip_of(samples.clone())).unwrap();
        let b = t
            .process(&clip_of(samples.iter().map(|v| v * 2.0).collect()))
            .unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!(*y >= *x - 1e-12);
        }
        assert!(a.data.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn pitch_shift_identity_and_permutation() {
        let t = transform();
        let f = CqtSpec::default().bin_center_hz(30);
        let samples: Vec<f64> = (0..30_000)
            .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / TARGET_RATE as f64).sin())
            .collect();
        let m = t.process(&clip_of(samples)).unwrap();

        let same = pitch_shift_bins(&m, 0).unwrap();
        assert_eq!(same, m);

        // single-dominant-row matrix moved by +3
        let mut single = CqtMatrix::zeros(84, 10, m.frame_rate);
        for f in 0..10 {
            *single.at_mut(10, f) = 1.0;
        }
        let shifted = pitch_shift_bins(&single, 3).unwrap();
        for b in 0..84 {
            for f in 0..10 {
                let expect = if b == 13 { 1.0 } else { 0.0 };
                assert_eq!(shifted.at(b, f), expect);
            }
        }

        assert!(matches!(
            pitch_shift_bins(&m, 4),
            Err(Error::PitchShiftRange(4))
        ));
    }

    #[test]
    fn shift_round_trip_zeroes_edge_rows() {
        let t = transform();
        let mut state = 7u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 33) as f64 / (1u64 << 31) as f64).abs()
        };
        let samples: Vec<f64> = (0..30_000).map(|_| next() * 0.2 - 0.1).collect();
        let m = t.process(&clip_of(samples)).unwrap();
        for k in 1..=3i32 {
            let rt = pitch_shift_bins(&pitch_shift_bins(&m, k).unwrap(), -k).unwrap();
            for b in 0..84usize {
                for f in 0..m.n_frames {
                    let expect = if b >= 84 - k as usize {
                        0.0
                    } else {
                        m.at(b, f)
                    };
                    assert_eq!(rt.at(b, f), expect, "k={k} bin={b}");
                }
            }
        }
    }

    #[test]
    fn cache_round_trip() {
        let dir = std::env::temp_dir().join("motif-cqt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.cqt");
        let mut m = CqtMatrix::zeros(4, 6, 43.066);
        for (i, v) in m.data.iter_mut().enumerate() {
            *v = i as f64 * 0.25;
        }
        write_cqt_cache(&path, &m).unwrap();
        let got = read_cqt_cache(&path).unwrap();
        assert_eq!(got.n_bins, 4);
        assert_eq!(got.n_frames, 6);
        for (a, b) in m.data.iter().zip(&got.data) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn frame_count_formula(extra in 0usize..4096) {
            let t = transform();
            let n = 12_000 + extra;
            let m = t.process(&clip_of(vec![0.0; n])).unwrap();
            prop_assert_eq!(m.n_frames, n / 512 + 1);
        }

        #[test]
        fn shift_preserves_surviving_rows(k in 1i32..=3) {
            let mut m = CqtMatrix::zeros(84, 5, 43.066);
            for (i, v) in m.data.iter_mut().enumerate() {
                *v = (i % 17) as f64;
            }
            let s = pitch_shift_bins(&m, k).unwrap();
            for b in 0..(84 - k as usize) {
                prop_assert_eq!(s.row(b + k as usize), m.row(b));
            }
        }
    }
}
