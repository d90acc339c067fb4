//! Synthetic desk-scale corpora.
//!
//! Generated interviews follow the same schema and invariants as real ones
//! and carry a class signature in all three modalities, so the fusion model
//! (and each single-modality ablation) has real signal to learn:
//!
//! * audio — depressed patient speech is synthesized with a lower
//!   fundamental frequency and narrower pitch variance;
//! * visual — the cheek-raiser and lip-corner-puller intensity rows (AU06,
//!   AU12) have their means shifted down with reduced variance;
//! * text — depressed answers come from a template pool containing the
//!   marker phrases the offline stub classifier keys on.

use super::{CorpusError, FauFrame, Interview, Label, Speaker, Utterance};
use super::{quantize_centis, FAU_FPS, FAU_INTENSITY_COLS, FAU_PRESENCE_COLS, SAMPLE_RATE};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Knobs for corpus synthesis; the defaults satisfy every corpus invariant
/// and give each interview enough patient speech for several 8 s segments.
#[derive(Debug, Clone, Copy)]
pub struct SynthOptions {
    /// Minimum seconds of patient speech per interview.
    pub min_patient_secs: f64,
    /// First interview id; synthetic ids must be >= 1000.
    pub base_id: u32,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions { min_patient_secs: 42.0, base_id: 1000 }
    }
}

const THERAPIST_QUESTIONS: &[&str] = &[
    "how_doingV (so how are you doing today)",
    "thats_good (that's good)",
    "where_originally (where are you from originally)",
    "tell_more (can you tell me more about that)",
    "how_sleepV (how have you been sleeping)",
    "last_happyV (when was the last time you felt really happy)",
    "anything_enjoyV (what do you enjoy doing these days)",
    "family_closeV (are you close with your family)",
    "work_lifeV (how is work going for you)",
    "thank_shareV (thank you for sharing that)",
];

const PATIENT_ANSWERS_HEALTHY: &[&str] = &[
    "i'm doing pretty well actually",
    "work keeps me busy but i like it",
    "i went hiking with friends last weekend <laughter> it was great",
    "i moved here from l_a a few years ago",
    "i sleep fine most nights honestly",
    "my family and i are really close we talk all the time",
    "i've been learning to cook new recipes lately",
    "things have been going smoothly for me",
];

const PATIENT_ANSWERS_DEPRESSED: &[&str] = &[
    "i've been feeling hopeless about pretty much everything",
    "honestly nothing interests me anymore <sigh>",
    "i can't sleep at night i just lie there",
    "most days i feel empty inside",
    "i have no energy to do anything after work",
    "i feel worthless like i'm letting everyone down",
    "i stopped seeing my friends i just stay home",
    "i grew up near l_a but these days i feel empty most of the time",
];

const NON_SPEECH_ONLY: &[&str] = &["<sigh>", "<clears throat>", "<laughter>"];

/// Voice profile used by the waveform synthesizer.
struct VoiceProfile {
    f0_mean: f64,
    f0_sd: f64,
    vibrato_hz: f64,
}

impl VoiceProfile {
    fn therapist() -> Self {
        VoiceProfile { f0_mean: 215.0, f0_sd: 12.0, vibrato_hz: 6.0 }
    }

    fn patient(label: Label) -> Self {
        match label {
            Label::Depressed => VoiceProfile { f0_mean: 112.0, f0_sd: 5.0, vibrato_hz: 1.5 },
            Label::NotDepressed => VoiceProfile { f0_mean: 185.0, f0_sd: 22.0, vibrato_hz: 10.0 },
        }
    }
}

/// Generates `n` interviews with exactly `round(n * depressed_fraction)`
/// depressed subjects. Deterministic for a fixed seed.
pub fn synth_corpus(
    n: usize,
    depressed_fraction: f64,
    seed: u64,
) -> Result<Vec<Interview>, CorpusError> {
    synth_corpus_with(n, depressed_fraction, seed, SynthOptions::default())
}

pub fn synth_corpus_with(
    n: usize,
    depressed_fraction: f64,
    seed: u64,
    opts: SynthOptions,
) -> Result<Vec<Interview>, CorpusError> {
    if n < 2 {
        return Err(CorpusError::CorpusTooSmall(n));
    }
    if !(depressed_fraction > 0.0 && depressed_fraction < 1.0) {
        return Err(CorpusError::InvalidFraction(depressed_fraction));
    }
    let n_depressed = (n as f64 * depressed_fraction).round() as usize;
    let mut labels = vec![Label::Depressed; n_depressed];
    labels.resize(n, Label::NotDepressed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels.shuffle(&mut rng);

    let interviews = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let id = opts.base_id + i as u32;
            let iv_seed = seed ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            synth_interview(id, label, iv_seed, &opts)
        })
        .collect::<Vec<_>>();
    for iv in &interviews {
        iv.validate()?;
    }
    Ok(interviews)
}

fn synth_interview(id: u32, label: Label, seed: u64, opts: &SynthOptions) -> Interview {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patient_voice = VoiceProfile::patient(label);
    let therapist_voice = VoiceProfile::therapist();
    let answers = match label {
        Label::Depressed => PATIENT_ANSWERS_DEPRESSED,
        Label::NotDepressed => PATIENT_ANSWERS_HEALTHY,
    };

    // Plan the turn structure first, then render audio over it.
    let mut utterances: Vec<Utterance> = Vec::new();
    let mut cursor = 1.0f64;
    let mut patient_total = 0.0f64;
    let mut turn = 0usize;
    while patient_total < opts.min_patient_secs || turn < 8 {
        let q = THERAPIST_QUESTIONS[turn % THERAPIST_QUESTIONS.len()];
        let dur = quantize_centis(rng.gen_range(1.5..3.0));
        let start = quantize_centis(cursor);
        utterances.push(Utterance::new(Speaker::Ellie, start, quantize_centis(start + dur), q));
        cursor = start + dur + rng.gen_range(0.3..0.8);

        let n_answers = if rng.gen_bool(0.35) { 2 } else { 1 };
        for _ in 0..n_answers {
            let text = if rng.gen_bool(0.05) {
                NON_SPEECH_ONLY[rng.gen_range(0..NON_SPEECH_ONLY.len())]
            } else {
                answers[rng.gen_range(0..answers.len())]
            };
            let dur = quantize_centis(rng.gen_range(3.5..6.5));
            let start = quantize_centis(cursor);
            utterances.push(Utterance::new(
                Speaker::Participant,
                start,
                quantize_centis(start + dur),
                text,
            ));
            patient_total += dur;
            cursor = start + dur + rng.gen_range(0.2..0.5);
        }
        cursor += rng.gen_range(0.4..0.9);
        turn += 1;
    }

    let duration = cursor + 1.0;
    let n_samples = (duration * SAMPLE_RATE as f64).ceil() as usize;
    let mut audio = vec![0.0f32; n_samples];
    for u in &utterances {
        let voice = if u.speaker.is_patient_side() { &patient_voice } else { &therapist_voice };
        render_speech(&mut audio, u.start_time, u.stop_time, voice, &mut rng);
    }

    let fau_track = synth_fau_track(duration, label, &mut rng);
    let phq8_score = match label {
        Label::Depressed => 10 + rng.gen_range(0..=14) as u8,
        Label::NotDepressed => rng.gen_range(0..=9) as u8,
    };

    Interview { id, audio, utterances, fau_track, phq8_score, label }
}

/// Renders a harmonic voice with per-utterance fundamental drawn from the
/// profile, slow vibrato, syllabic amplitude modulation, and a little
/// breath noise.
fn render_speech(
    audio: &mut [f32],
    start: f64,
    stop: f64,
    voice: &VoiceProfile,
    rng: &mut ChaCha8Rng,
) {
    let sr = SAMPLE_RATE as f64;
    let f0 = (voice.f0_mean + voice.f0_sd * standard_normal(rng)).max(70.0);
    let vib_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let am_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let begin = (start * sr).round() as usize;
    let end = ((stop * sr).round() as usize).min(audio.len());
    let len = end.saturating_sub(begin);
    let mut phase = 0.0f64;
    const HARMONICS: [f64; 4] = [1.0, 0.55, 0.3, 0.12];
    for i in 0..len {
        let t = i as f64 / sr;
        let f = f0 + voice.vibrato_hz * (std::f64::consts::TAU * 4.5 * t + vib_phase).sin();
        phase += std::f64::consts::TAU * f / sr;
        let mut s = 0.0;
        for (k, a) in HARMONICS.iter().enumerate() {
            s += a * ((k + 1) as f64 * phase).sin();
        }
        let syllable = 0.55 + 0.45 * (std::f64::consts::TAU * 2.3 * t + am_phase).sin().abs();
        let edge = (t / 0.05).min(1.0) * ((len as f64 / sr - t) / 0.08).min(1.0);
        let breath = 0.004 * (rng.gen::<f64>() * 2.0 - 1.0);
        audio[begin + i] = (0.18 * s * syllable * edge + breath) as f32;
    }
}

fn synth_fau_track(duration: f64, label: Label, rng: &mut ChaCha8Rng) -> Vec<FauFrame> {
    // Baseline intensity means for the 14 continuous rows.
    const BASE_MEANS: [f64; FAU_INTENSITY_COLS] =
        [0.8, 0.7, 1.1, 0.5, 0.0, 0.6, 0.9, 0.0, 0.8, 0.6, 0.9, 0.5, 1.4, 1.2];
    const AU06: usize = 4;
    const AU12: usize = 7;
    const PRESENCE_P: [f64; FAU_PRESENCE_COLS] = [0.25, 0.3, 0.2, 0.15, 0.2, 0.35];

    let (smile_mean, smile_sd) = match label {
        Label::Depressed => (0.55, 0.12),
        Label::NotDepressed => (2.1, 0.55),
    };
    let mut means = BASE_MEANS;
    means[AU06] = smile_mean;
    means[AU12] = smile_mean * 1.1;
    let mut base = [0.0f64; FAU_INTENSITY_COLS];
    for (j, b) in base.iter_mut().enumerate() {
        let sd = if j == AU06 || j == AU12 { smile_sd * 0.4 } else { 0.25 };
        *b = (means[j] + sd * standard_normal(rng)).max(0.0);
    }

    let n_frames = (duration * FAU_FPS).floor() as usize;
    (0..n_frames)
        .map(|j| {
            let mut intensities = [0.0f32; FAU_INTENSITY_COLS];
            for (k, slot) in intensities.iter_mut().enumerate() {
                let sd = if k == AU06 || k == AU12 { smile_sd } else { 0.35 };
                *slot = (base[k] + sd * standard_normal(rng)).max(0.0) as f32;
            }
            let mut presences = [0u8; FAU_PRESENCE_COLS];
            for (k, slot) in presences.iter_mut().enumerate() {
                *slot = u8::from(rng.gen_bool(PRESENCE_P[k]));
            }
            FauFrame { timestamp: j as f64 / FAU_FPS, intensities, presences }
        })
        .collect()
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per call keeps the stream simple to reason
    // about for determinism.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
