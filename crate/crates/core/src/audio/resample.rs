use alloc::vec::Vec;
use core::f64::consts::PI;

use super::Waveform;
use crate::error::{Error, Result};

pub const MIN_SPEED_FACTOR: f64 = 0.5;
pub const MAX_SPEED_FACTOR: f64 = 2.0;

/// Zero crossings of the sinc kernel on each side of the interpolation point.
const KERNEL_ZEROS: f64 = 16.0;

/// Speed perturbation by band-limited resampling.
///
/// The output keeps the sample rate and has `round(len / factor)` samples,
/// so tempo and pitch both scale by `factor`. Output sample `j` interpolates
/// the input at position `j * factor` with a Hann-windowed sinc whose
/// cutoff is lowered to `1 / factor` of Nyquist when speeding up.
pub fn speed_perturb(w: &Waveform, factor: f64) -> Result<Waveform> {
    if !(MIN_SPEED_FACTOR..=MAX_SPEED_FACTOR).contains(&factor) {
        return Err(Error::FactorOutOfRange(factor));
    }
    if factor == 1.0 {
        return Ok(w.clone());
    }
    let x = w.samples();
    let n = x.len();
    let out_len = (libm::round(n as f64 / factor) as usize).max(1);
    let cutoff = if factor > 1.0 { 1.0 / factor } else { 1.0 };
    let half_width = KERNEL_ZEROS / cutoff;

    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let pos = j as f64 * factor;
        let lo = libm::ceil(pos - half_width).max(0.0) as usize;
        let hi = (libm::floor(pos + half_width) as usize).min(n - 1);
        let mut acc = 0.0;
        for (k, &xk) in x.iter().enumerate().take(hi + 1).skip(lo) {
            acc += xk * kernel(pos - k as f64, cutoff, half_width);
        }
        out.push(acc.clamp(-1.0, 1.0));
    }
    Waveform::new(out, w.sample_rate_hz())
}

fn kernel(d: f64, cutoff: f64, half_width: f64) -> f64 {
    let u = d / half_width;
    if libm::fabs(u) >= 1.0 {
        return 0.0;
    }
    let window = 0.5 * (1.0 + libm::cos(PI * u));
    let arg = cutoff * d;
    let sinc = if libm::fabs(arg) < 1e-12 {
        1.0
    } else {
        libm::sin(PI * arg) / (PI * arg)
    };
    cutoff * sinc * window
}
