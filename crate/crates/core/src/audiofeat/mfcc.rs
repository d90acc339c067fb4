//! MFCC extraction: windowing -> magnitude spectrum -> mel filter bank ->
//! log10 -> DCT-II, keeping the first `n_mfcc` coefficients. The mel scale
//! and filter normalization follow the Slaney auditory-toolbox convention
//! (linear below 1 kHz, logarithmic above, filters scaled by bandwidth).

use super::{AudioError, FramingPolicy, MfccConfig, MfccMatrix};
use ndarray::Array2;
use rustfft::{num_complex::Complex64, FftPlanner};

const LOG_FLOOR: f64 = 1e-10;

fn hz_to_mel(f: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;
    if f < MIN_LOG_HZ {
        f / F_SP
    } else {
        MIN_LOG_MEL + (f / MIN_LOG_HZ).ln() / (6.4f64.ln() / 27.0)
    }
}

fn mel_to_hz(m: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;
    if m < MIN_LOG_MEL {
        m * F_SP
    } else {
        MIN_LOG_HZ * ((m - MIN_LOG_MEL) * (6.4f64.ln() / 27.0)).exp()
    }
}

/// One triangular mel filter stored sparsely over FFT bins.
struct MelFilter {
    first_bin: usize,
    weights: Vec<f64>,
}

fn build_filterbank(cfg: &MfccConfig, n_fft: usize) -> Vec<MelFilter> {
    let n_bins = n_fft / 2 + 1;
    let sr = cfg.sample_rate as f64;
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(cfg.fmax);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = |b: usize| b as f64 * sr / n_fft as f64;
    (0..cfg.n_mels)
        .map(|i| {
            let (lo, mid, hi) = (edges[i], edges[i + 1], edges[i + 2]);
            let norm = 2.0 / (hi - lo);
            let first_bin = (0..n_bins).find(|&b| bin_hz(b) > lo).unwrap_or(n_bins);
            let mut weights = Vec::new();
            for b in first_bin..n_bins {
                let f = bin_hz(b);
                if f >= hi {
                    break;
                }
                let w = if f <= mid {
                    (f - lo) / (mid - lo)
                } else {
                    (hi - f) / (hi - mid)
                };
                weights.push(w.max(0.0) * norm);
            }
            MelFilter { first_bin, weights }
        })
        .collect()
}

/// Orthonormal DCT-II matrix rows (one per kept coefficient).
fn build_dct(n_mfcc: usize, n_mels: usize) -> Vec<Vec<f64>> {
    let n = n_mels as f64;
    (0..n_mfcc)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            (0..n_mels)
                .map(|j| {
                    scale
                        * (std::f64::consts::PI * k as f64 * (2.0 * j as f64 + 1.0) / (2.0 * n))
                            .cos()
                })
                .collect()
        })
        .collect()
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos())
        .collect()
}

/// Extracts an `[n_frames x n_mfcc]` coefficient matrix. Frame placement
/// follows `cfg.framing_policy`:
///
/// * `TruncatedUncentered` — frames lie fully inside the signal;
///   `n_frames = 1 + (len - window) / hop`.
/// * `PaddedCentered` — frame `t` is centered at `t * hop` with zero
///   padding at the edges; `n_frames = 1 + len / hop`.
pub fn extract_mfcc(w: &[f32], cfg: &MfccConfig) -> Result<MfccMatrix, AudioError> {
    cfg.validate()?;
    let win = cfg.window_samples();
    let hop = cfg.hop_samples();
    if w.len() < win {
        return Err(AudioError::TooShort { samples: w.len(), window: win });
    }
    let n_frames = cfg.frame_count(w.len());
    let n_fft = win.next_power_of_two();
    let n_bins = n_fft / 2 + 1;

    let window = hann(win);
    let filters = build_filterbank(cfg, n_fft);
    let dct = build_dct(cfg.n_mfcc, cfg.n_mels);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n_fft);

    let mut out = Array2::<f64>::zeros((n_frames, cfg.n_mfcc));
    let mut buf = vec![Complex64::default(); n_fft];
    let mut mags = vec![0.0f64; n_bins];
    let mut mels = vec![0.0f64; cfg.n_mels];

    for t in 0..n_frames {
        buf.iter_mut().for_each(|c| *c = Complex64::default());
        match cfg.framing_policy {
            FramingPolicy::TruncatedUncentered => {
                let start = t * hop;
                for i in 0..win {
                    buf[i] = Complex64::new(w[start + i] as f64 * window[i], 0.0);
                }
            }
            FramingPolicy::PaddedCentered => {
                let center = (t * hop) as isize;
                let begin = center - (win / 2) as isize;
                for i in 0..win {
                    let src = begin + i as isize;
                    if src >= 0 && (src as usize) < w.len() {
                        buf[i] = Complex64::new(w[src as usize] as f64 * window[i], 0.0);
                    }
                }
            }
        }
        fft.process(&mut buf);
        for (b, m) in mags.iter_mut().enumerate() {
            *m = buf[b].norm();
        }
        for (f, mel) in filters.iter().zip(mels.iter_mut()) {
            let mut acc = 0.0;
            for (j, &wgt) in f.weights.iter().enumerate() {
                acc += wgt * mags[f.first_bin + j];
            }
            *mel = acc.max(LOG_FLOOR).log10();
        }
        for (k, row) in dct.iter().enumerate() {
            let mut acc = 0.0;
            for (j, &d) in row.iter().enumerate() {
                acc += d * mels[j];
            }
            out[(t, k)] = acc;
        }
    }
    Ok(MfccMatrix { values: out })
}
