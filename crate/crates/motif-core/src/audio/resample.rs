//! Windowed-sinc resampler: 64-tap Kaiser window, per-position kernel
//! normalization.

const TAPS: usize = 64;
const KAISER_BETA: f64 = 8.0;

/// Zeroth-order modified Bessel function of the first kind (series form).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-14 {
            break;
        }
    }
    sum
}

fn kaiser(r: f64) -> f64 {
    if r.abs() > 1.0 {
        return 0.0;
    }
    bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / bessel_i0(KAISER_BETA)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Band-limited resampling from `in_rate` to `out_rate`.
///
/// Output length is `floor(n_in * out_rate / in_rate)`; each output sample
/// is a normalized windowed-sinc interpolation over 64 input taps, with the
/// cutoff at the lower of the two Nyquist frequencies.
pub fn resample(input: &[f64], in_rate: u32, out_rate: u32) -> Vec<f64> {
    if in_rate == out_rate {
        return input.to_vec();
    }
    let n_in = input.len();
    let n_out = (n_in as u64 * out_rate as u64 / in_rate as u64) as usize;
    if n_in == 0 || n_out == 0 {
        return Vec::new();
    }
    let step = in_rate as f64 / out_rate as f64;
    let cutoff = 0.5 * (out_rate as f64 / in_rate as f64).min(1.0);
    let half = TAPS as f64 / 2.0;
    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out {
        let center = n as f64 * step;
        let lo = (center - half).ceil() as i64;
        let hi = (center + half).floor() as i64;
        let mut acc = 0.0;
        let mut norm = 0.0;
        for m in lo..=hi {
            let dx = m as f64 - center;
            let w = 2.0 * cutoff * sinc(2.0 * cutoff * dx) * kaiser(dx / half);
            norm += w;
            if m >= 0 && (m as usize) < n_in {
                acc += input[m as usize] * w;
            }
        }
        out.push(if norm.abs() > 1e-12 { acc / norm } else { 0.0 });
    }
    out
}
