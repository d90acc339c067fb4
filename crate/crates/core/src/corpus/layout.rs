//! On-disk corpus layout.
//!
//! ```text
//! <root>/
//!   labels.csv                  participant_id,phq8_binary,phq8_score
//!   <id>_P/
//!     <id>_AUDIO.wav            mono PCM 16-bit or IEEE float, 16 kHz
//!     <id>_TRANSCRIPT.csv       tab-separated: start_time stop_time speaker value
//!     <id>_FAU.csv              comma-separated: timestamp + 20 AU columns
//! ```

use super::{
    CorpusError, FauFrame, Interview, Label, Speaker, Utterance, FAU_COLUMNS, FAU_INTENSITY_COLS,
    FAU_PRESENCE_COLS, SAMPLE_RATE,
};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

fn interview_dir(root: &Path, id: u32) -> PathBuf {
    root.join(format!("{id}_P"))
}

/// Loads one interview from the corpus layout. The waveform is verified to
/// be mono 16 kHz; 16-bit PCM is rescaled to [-1, 1].
pub fn load_interview(root: &Path, id: u32) -> Result<Interview, CorpusError> {
    let dir = interview_dir(root, id);
    let audio_path = dir.join(format!("{id}_AUDIO.wav"));
    let transcript_path = dir.join(format!("{id}_TRANSCRIPT.csv"));
    let fau_path = dir.join(format!("{id}_FAU.csv"));
    for p in [&audio_path, &transcript_path, &fau_path] {
        if !p.is_file() {
            return Err(CorpusError::MissingFile(p.clone()));
        }
    }

    let audio = read_wav(&audio_path)?;
    let utterances = read_transcript(&transcript_path)?;
    let fau_track = read_fau(&fau_path)?;

    let labels = load_labels(&root.join("labels.csv"))?;
    let (phq8_score, label) = *labels
        .get(&id)
        .ok_or_else(|| CorpusError::MissingFile(root.join("labels.csv")))?;
    if label != Label::from_phq8(phq8_score) {
        log::warn!(
            "interview {id}: label {label:?} inconsistent with phq8 {phq8_score}; \
             expected to be repaired by the error manifest"
        );
    }

    Ok(Interview { id, audio, utterances, fau_track, phq8_score, label })
}

fn read_wav(path: &Path) -> Result<Vec<f32>, CorpusError> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|source| CorpusError::Wav { path: path.to_path_buf(), source })?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(CorpusError::SampleRateMismatch(spec.sample_rate));
    }
    if spec.channels != 1 {
        return Err(CorpusError::UnsupportedWav(format!(
            "{} channels, expected mono",
            spec.channels
        )));
    }
    let samples: Result<Vec<f32>, hound::Error> = match (spec.sample_format, spec.bits_per_sample)
    {
        (hound::SampleFormat::Float, 32) => reader.samples::<f32>().collect(),
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect(),
        (fmt, bits) => {
            return Err(CorpusError::UnsupportedWav(format!("{fmt:?} {bits}-bit")));
        }
    };
    samples.map_err(|source| CorpusError::Wav { path: path.to_path_buf(), source })
}

fn read_transcript(path: &Path) -> Result<Vec<Utterance>, CorpusError> {
    let malformed = |line: usize, msg: String| CorpusError::MalformedCsv {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .flexible(true)
        .from_path(path)
        .map_err(|e| malformed(0, e.to_string()))?;
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2; // header is line 1
        let record = record.map_err(|e| malformed(line, e.to_string()))?;
        if record.len() != 4 {
            return Err(malformed(line, format!("expected 4 columns, got {}", record.len())));
        }
        let start: f64 = record[0]
            .trim()
            .parse()
            .map_err(|_| malformed(line, format!("bad start_time {:?}", &record[0])))?;
        let stop: f64 = record[1]
            .trim()
            .parse()
            .map_err(|_| malformed(line, format!("bad stop_time {:?}", &record[1])))?;
        out.push(Utterance::new(Speaker::parse(&record[2]), start, stop, record[3].to_string()));
    }
    Ok(out)
}

fn read_fau(path: &Path) -> Result<Vec<FauFrame>, CorpusError> {
    let malformed = |line: usize, msg: String| CorpusError::MalformedCsv {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut reader =
        csv::ReaderBuilder::new().flexible(true).from_path(path).map_err(|e| malformed(0, e.to_string()))?;
    let expected_cols = 1 + FAU_COLUMNS.len();
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| malformed(line, e.to_string()))?;
        if record.len() != expected_cols {
            return Err(malformed(
                line,
                format!("expected {expected_cols} columns, got {}", record.len()),
            ));
        }
        let timestamp: f64 = record[0]
            .trim()
            .parse()
            .map_err(|_| malformed(line, format!("bad timestamp {:?}", &record[0])))?;
        let mut intensities = [0.0f32; FAU_INTENSITY_COLS];
        for (j, slot) in intensities.iter_mut().enumerate() {
            *slot = record[1 + j]
                .trim()
                .parse()
                .map_err(|_| malformed(line, format!("bad intensity in column {}", 1 + j)))?;
        }
        let mut presences = [0u8; FAU_PRESENCE_COLS];
        for (j, slot) in presences.iter_mut().enumerate() {
            let v: f32 = record[1 + FAU_INTENSITY_COLS + j]
                .trim()
                .parse()
                .map_err(|_| malformed(line, format!("bad presence flag in column {}", 1 + j)))?;
            *slot = if v != 0.0 { 1 } else { 0 };
        }
        out.push(FauFrame { timestamp, intensities, presences });
    }
    Ok(out)
}

/// Reads `labels.csv` into id -> (phq8_score, label).
pub fn load_labels(path: &Path) -> Result<BTreeMap<u32, (u8, Label)>, CorpusError> {
    let malformed = |line: usize, msg: String| CorpusError::MalformedCsv {
        path: path.to_path_buf(),
        line,
        msg,
    };
    if !path.is_file() {
        return Err(CorpusError::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| malformed(0, e.to_string()))?;
    let mut out = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| malformed(line, e.to_string()))?;
        if record.len() != 3 {
            return Err(malformed(line, format!("expected 3 columns, got {}", record.len())));
        }
        let id: u32 = record[0]
            .trim()
            .parse()
            .map_err(|_| malformed(line, format!("bad participant_id {:?}", &record[0])))?;
        let binary: u8 = record[1]
            .trim()
            .parse()
            .map_err(|_| malformed(line, format!("bad phq8_binary {:?}", &record[1])))?;
        let score: u8 = record[2]
            .trim()
            .parse()
            .map_err(|_| malformed(line, format!("bad phq8_score {:?}", &record[2])))?;
        out.insert(id, (score, Label::from_bit(binary)));
    }
    Ok(out)
}

/// Writes `labels.csv` in the split-CSV column convention.
pub fn write_labels(path: &Path, rows: &BTreeMap<u32, (u8, Label)>) -> Result<(), CorpusError> {
    let mut text = String::from("participant_id,phq8_binary,phq8_score\n");
    for (id, (score, label)) in rows {
        let bit = match label {
            Label::Depressed => 1,
            Label::NotDepressed => 0,
        };
        text.push_str(&format!("{id},{bit},{score}\n"));
    }
    std::fs::write(path, text).map_err(io_err(path))
}

/// Interview ids present in a corpus directory, from its labels file.
pub fn corpus_ids(root: &Path) -> Result<Vec<u32>, CorpusError> {
    Ok(load_labels(&root.join("labels.csv"))?.keys().copied().collect())
}

/// Persists interviews (and the corpus labels file) in the on-disk layout.
/// Waveforms are written as 32-bit float WAV so synthetic corpora round-trip
/// bit-exactly.
pub fn write_corpus(root: &Path, interviews: &[Interview]) -> Result<(), CorpusError> {
    std::fs::create_dir_all(root).map_err(io_err(root))?;
    let mut labels = BTreeMap::new();
    for iv in interviews {
        labels.insert(iv.id, (iv.phq8_score, iv.label));
        let dir = interview_dir(root, iv.id);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;

        let audio_path = dir.join(format!("{}_AUDIO.wav", iv.id));
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut writer = hound::WavWriter::create(&audio_path, spec)
            .map_err(|source| CorpusError::Wav { path: audio_path.clone(), source })?;
        for &s in &iv.audio {
            writer
                .write_sample(s)
                .map_err(|source| CorpusError::Wav { path: audio_path.clone(), source })?;
        }
        writer
            .finalize()
            .map_err(|source| CorpusError::Wav { path: audio_path.clone(), source })?;

        let transcript_path = dir.join(format!("{}_TRANSCRIPT.csv", iv.id));
        let mut text = String::from("start_time\tstop_time\tspeaker\tvalue\n");
        for u in &iv.utterances {
            text.push_str(&format!(
                "{:.2}\t{:.2}\t{}\t{}\n",
                u.start_time, u.stop_time, u.speaker, u.text
            ));
        }
        std::fs::write(&transcript_path, text).map_err(io_err(&transcript_path))?;

        let fau_path = dir.join(format!("{}_FAU.csv", iv.id));
        let mut text = String::from("timestamp");
        for c in FAU_COLUMNS {
            text.push(',');
            text.push_str(c);
        }
        text.push('\n');
        for f in &iv.fau_track {
            text.push_str(&format!("{}", f.timestamp));
            for v in f.intensities {
                text.push_str(&format!(",{v}"));
            }
            for p in f.presences {
                text.push_str(&format!(",{p}"));
            }
            text.push('\n');
        }
        std::fs::write(&fau_path, text).map_err(io_err(&fau_path))?;
    }
    write_labels(&root.join("labels.csv"), &labels)
}
