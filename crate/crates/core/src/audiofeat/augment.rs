//! Waveform augmentation: pitch shifting (phase-vocoder time stretch plus
//! resampling) and uniform noise injection, combined into the seven-fold
//! augmented set used for training.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

/// Default overlay amplitude for noise injection, as a fraction of full
/// scale.
pub const DEFAULT_NOISE_AMPLITUDE: f32 = 0.005;

/// The pitch steps of the standard augmentation set, in semitones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PitchStep {
    Half,
    Two,
    TwoAndHalf,
}

impl PitchStep {
    pub const ALL: [PitchStep; 3] = [PitchStep::Half, PitchStep::Two, PitchStep::TwoAndHalf];

    pub fn semitones(self) -> f64 {
        match self {
            PitchStep::Half => 0.5,
            PitchStep::Two => 2.0,
            PitchStep::TwoAndHalf => 2.5,
        }
    }
}

/// Provenance tag of one augmented waveform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AugmentTag {
    Original,
    Augmented { pitch: PitchStep, noise: bool },
}

impl AugmentTag {
    pub fn is_original(self) -> bool {
        matches!(self, AugmentTag::Original)
    }
}

impl std::fmt::Display for AugmentTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AugmentTag::Original => write!(f, "orig"),
            AugmentTag::Augmented { pitch, noise } => {
                write!(f, "p{:.1}{}", pitch.semitones(), if *noise { "+n" } else { "" })
            }
        }
    }
}

impl std::str::FromStr for AugmentTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "orig" {
            return Ok(AugmentTag::Original);
        }
        let (body, noise) = match s.strip_suffix("+n") {
            Some(b) => (b, true),
            None => (s, false),
        };
        let pitch = match body {
            "p0.5" => PitchStep::Half,
            "p2.0" => PitchStep::Two,
            "p2.5" => PitchStep::TwoAndHalf,
            _ => return Err(format!("unknown augment tag {s:?}")),
        };
        Ok(AugmentTag::Augmented { pitch, noise })
    }
}

/// Adds uniform noise in `[-amplitude, +amplitude]`. Deterministic for a
/// fixed seed; length preserved.
pub fn inject_noise(w: &[f32], amplitude: f32, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    w.iter().map(|&s| s + rng.gen_range(-amplitude..=amplitude)).collect()
}

/// Shifts pitch by `semitones` while preserving length: a phase-vocoder
/// time stretch by `2^(semitones/12)` followed by linear resampling back.
/// A zero shift is the identity.
pub fn pitch_shift(w: &[f32], semitones: f64) -> Vec<f32> {
    if semitones.abs() < 1e-12 || w.is_empty() {
        return w.to_vec();
    }
    let factor = (semitones / 12.0).exp2();
    const WIN: usize = 2048;
    let stretched = if w.len() < 2 * WIN {
        // Too short for framed processing; plain resampling scales pitch at
        // the cost of duration, which the final fix-up hides.
        w.iter().map(|&s| s as f64).collect()
    } else {
        phase_vocoder_stretch(w, factor, WIN, WIN / 4)
    };
    let scale = if w.len() < 2 * WIN { 1.0 / factor } else { 1.0 };
    let mut out = Vec::with_capacity(w.len());
    for i in 0..w.len() {
        let pos = i as f64 * factor * scale;
        let i0 = pos.floor() as usize;
        let frac = pos - i0 as f64;
        let sample = if i0 + 1 < stretched.len() {
            stretched[i0] * (1.0 - frac) + stretched[i0 + 1] * frac
        } else if i0 < stretched.len() {
            stretched[i0]
        } else {
            0.0
        };
        out.push(sample as f32);
    }
    out
}

/// Time-stretches by `factor` (> 1 lengthens) with magnitude interpolation
/// and per-bin phase accumulation over the half spectrum.
fn phase_vocoder_stretch(w: &[f32], factor: f64, win: usize, hop: usize) -> Vec<f64> {
    let n = w.len();
    let window: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / win as f64).cos())
        .collect();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(win);
    let ifft = planner.plan_fft_inverse(win);

    // Analysis frames over the zero-padded signal.
    let n_analysis = n / hop + 1;
    let mut frames: Vec<Vec<Complex64>> = Vec::with_capacity(n_analysis);
    let mut buf = vec![Complex64::default(); win];
    for t in 0..n_analysis {
        let start = t * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            let v = w.get(start + i).copied().unwrap_or(0.0) as f64;
            *slot = Complex64::new(v * window[i], 0.0);
        }
        fft.process(&mut buf);
        frames.push(buf.clone());
    }
    if n_analysis < 2 {
        return w.iter().map(|&s| s as f64).collect();
    }

    let rate = 1.0 / factor;
    let n_bins = win / 2 + 1;
    let omega: Vec<f64> =
        (0..n_bins).map(|k| std::f64::consts::TAU * k as f64 * hop as f64 / win as f64).collect();
    let n_synthesis = (((n_analysis - 2) as f64) / rate).floor() as usize + 1;

    let mut phase: Vec<f64> = (0..n_bins).map(|k| frames[0][k].arg()).collect();
    let mut out = vec![0.0f64; n_synthesis.saturating_sub(1) * hop + win];
    let mut norm = vec![0.0f64; out.len()];

    for j in 0..n_synthesis {
        let p = j as f64 * rate;
        let i0 = (p.floor() as usize).min(n_analysis - 2);
        let frac = p - i0 as f64;
        for k in 0..n_bins {
            let m0 = frames[i0][k].norm();
            let m1 = frames[i0 + 1][k].norm();
            let mag = m0 * (1.0 - frac) + m1 * frac;
            buf[k] = Complex64::from_polar(mag, phase[k]);
            if k > 0 && k < win / 2 {
                buf[win - k] = buf[k].conj();
            }
            let mut dphi = frames[i0 + 1][k].arg() - frames[i0][k].arg() - omega[k];
            dphi -= std::f64::consts::TAU * (dphi / std::f64::consts::TAU).round();
            phase[k] += omega[k] + dphi;
        }
        ifft.process(&mut buf);
        let start = j * hop;
        for i in 0..win {
            out[start + i] += buf[i].re / win as f64 * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    for (o, &d) in out.iter_mut().zip(norm.iter()) {
        if d > 1e-8 {
            *o /= d;
        }
    }
    out
}

/// Builds the seven-fold augmented set: the original plus all six
/// (pitch step x noise on/off) combinations, ordered by a seeded draw
/// without replacement. Tags are pairwise distinct.
pub fn make_augmented_set(w: &[f32], seed: u64) -> Vec<(Vec<f32>, AugmentTag)> {
    make_augmented_set_with(w, seed, DEFAULT_NOISE_AMPLITUDE)
}

pub fn make_augmented_set_with(
    w: &[f32],
    seed: u64,
    noise_amplitude: f32,
) -> Vec<(Vec<f32>, AugmentTag)> {
    let mut combos: Vec<AugmentTag> = PitchStep::ALL
        .iter()
        .flat_map(|&pitch| {
            [false, true].map(|noise| AugmentTag::Augmented { pitch, noise })
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    combos.shuffle(&mut rng);

    let mut out = Vec::with_capacity(7);
    out.push((w.to_vec(), AugmentTag::Original));
    for (idx, tag) in combos.into_iter().enumerate() {
        let AugmentTag::Augmented { pitch, noise } = tag else { unreachable!() };
        let mut v = pitch_shift(w, pitch.semitones());
        if noise {
            let noise_seed = seed ^ ((idx as u64 + 1).wrapping_mul(0xA076_1D64_78BD_642F));
            v = inject_noise(&v, noise_amplitude, noise_seed);
        }
        out.push((v, tag));
    }
    out
}

/// Frequency of the strongest spectral peak; the oracle used to verify
/// pitch shifts.
pub fn dominant_frequency(w: &[f32], sample_rate: u32) -> f64 {
    let n_fft = w.len().next_power_of_two().max(2);
    let mut buf: Vec<Complex64> =
        w.iter().map(|&s| Complex64::new(s as f64, 0.0)).collect();
    buf.resize(n_fft, Complex64::default());
    FftPlanner::new().plan_fft_forward(n_fft).process(&mut buf);
    let mut best = (0usize, 0.0f64);
    for (i, c) in buf.iter().enumerate().take(n_fft / 2 + 1) {
        let m = c.norm();
        if m > best.1 {
            best = (i, m);
        }
    }
    best.0 as f64 * sample_rate as f64 / n_fft as f64
}
