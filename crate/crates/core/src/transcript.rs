//! Transcript normalization: turns raw diarized corpus transcripts into
//! clean dialogue text for the language-model classifier.
//!
//! Raw utterances carry three artifacts that have to be rewritten:
//! identifier tokens followed by their true text in parentheses
//! (auto-generated interviewer turns), letter-by-letter acronyms joined by
//! underscores (`l_a`), and cut-off speech or non-speech enclosed in
//! inequality signs (`<laughter>`). After cleaning, grammar is restored by
//! a deterministic rule engine (sentence-initial capitals, pronoun `i`,
//! terminal `?`/`.`), speakers are renamed to `Therapist`/`Patient`, and
//! consecutive same-speaker utterances are merged.
//!
//! Both the grammar corrector and the interrogative classifier are
//! pluggable: the defaults are rule-based and fully offline, with trait
//! slots for trained replacements.

use crate::corpus::{quantize_centis, Speaker, Utterance};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("unknown speaker label {0:?}")]
    UnknownSpeaker(String),
    #[error("acronym key {0:?} must be lowercase letters joined by underscores")]
    BadAcronymKey(String),
    #[error("acronym expansion for {0:?} is empty")]
    EmptyAcronymValue(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Maps underscore-joined letter tokens (e.g. `l_a`) to their expansions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AcronymTable {
    entries: BTreeMap<String, String>,
}

fn is_acronym_key(key: &str) -> bool {
    let parts: Vec<&str> = key.split('_').collect();
    parts.len() >= 2
        && parts
            .iter()
            .all(|p| p.len() == 1 && p.chars().all(|c| c.is_ascii_lowercase()))
}

impl AcronymTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Common cases every corpus run needs.
    pub fn builtin() -> Self {
        let mut t = Self::new();
        for (k, v) in [
            ("l_a", "Los Angeles"),
            ("u_s", "United States"),
            ("u_k", "United Kingdom"),
            ("d_c", "DC"),
            ("t_v", "TV"),
            ("a_c", "AC"),
            ("p_e", "PE"),
            ("g_p_a", "GPA"),
        ] {
            t.insert(k, v).expect("builtin keys are valid");
        }
        t
    }

    pub fn insert(&mut self, key: &str, value: &str) -> Result<(), TranscriptError> {
        if !is_acronym_key(key) {
            return Err(TranscriptError::BadAcronymKey(key.to_string()));
        }
        if value.trim().is_empty() {
            return Err(TranscriptError::EmptyAcronymValue(key.to_string()));
        }
        self.entries.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Loads a two-column tab-separated file: `key<TAB>expansion`.
    pub fn load(path: &Path) -> Result<Self, TranscriptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| TranscriptError::Io { path: path.to_path_buf(), source })?;
        let mut table = Self::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('\t')
                .ok_or_else(|| TranscriptError::BadAcronymKey(line.to_string()))?;
            table.insert(key.trim(), value)?;
        }
        Ok(table)
    }
}

/// Applies the three rewrite rules plus whitespace collapsing. Total: any
/// text that matches no rule passes through unchanged.
pub fn clean_utterance(text: &str, acronyms: &AcronymTable) -> String {
    let mut s = replace_identifier_tokens(text);
    s = strip_angle_spans(&s);
    s = expand_acronyms(&s, acronyms);
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// `ident (true text)` -> `true text`, repeated until no match remains.
fn replace_identifier_tokens(text: &str) -> String {
    let mut s = text.to_string();
    loop {
        let Some(open) = find_ident_paren(&s) else { break };
        let (ident_start, paren_open) = open;
        let Some(close_rel) = s[paren_open + 1..].find(')') else { break };
        let close = paren_open + 1 + close_rel;
        let content = s[paren_open + 1..close].to_string();
        s.replace_range(ident_start..=close, &content);
    }
    s
}

/// Finds the first `ident (`:  a word of letters/digits/underscores/
/// apostrophes, one space, then an opening parenthesis with a matching
/// close somewhere after it.
fn find_ident_paren(s: &str) -> Option<(usize, usize)> {
    let bytes = s.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b != b'(' || i < 2 || bytes[i - 1] != b' ' {
            continue;
        }
        if s[i + 1..].find(')').is_none() {
            continue;
        }
        // Walk back over the identifier token.
        let mut start = i - 1;
        while start > 0 {
            let c = bytes[start - 1];
            if c.is_ascii_alphanumeric() || c == b'_' || c == b'\'' {
                start -= 1;
            } else {
                break;
            }
        }
        if start < i - 1 {
            return Some((start, i));
        }
    }
    None
}

/// Removes `<...>` spans (cut-off speech, non-speech annotations).
fn strip_angle_spans(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    loop {
        match rest.find('<') {
            Some(open) => match rest[open + 1..].find('>') {
                Some(close_rel) => {
                    out.push_str(&rest[..open]);
                    rest = &rest[open + 1 + close_rel + 1..];
                }
                None => {
                    out.push_str(rest);
                    break;
                }
            },
            None => {
                out.push_str(rest);
                break;
            }
        }
    }
    out
}

fn expand_acronyms(text: &str, acronyms: &AcronymTable) -> String {
    text.split(' ')
        .map(|token| {
            let core_start = token.find(|c: char| c.is_ascii_alphanumeric()).unwrap_or(0);
            let core_end = token
                .rfind(|c: char| c.is_ascii_alphanumeric())
                .map(|i| i + 1)
                .unwrap_or(token.len());
            let core = &token[core_start..core_end];
            if is_acronym_key(core) {
                match acronyms.get(core) {
                    Some(expansion) => {
                        format!("{}{}{}", &token[..core_start], expansion, &token[core_end..])
                    }
                    None => {
                        log::debug!("unknown acronym token {core:?} passed through");
                        token.to_string()
                    }
                }
            } else {
                token.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Decides whether a sentence (no terminal punctuation required) is a
/// question. Pluggable so a trained classifier can replace the rules.
pub trait InterrogativeClassifier: Send + Sync {
    fn is_interrogative(&self, sentence: &str) -> bool;
}

/// Default rule engine: leading discourse markers are skipped, then the
/// sentence is a question if it is wh-initial, starts with an inverted
/// auxiliary, or ends in a question tag.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleBasedInterrogative;

const DISCOURSE_MARKERS: &[&str] = &[
    "so", "well", "and", "but", "um", "uh", "okay", "ok", "now", "then", "oh", "hmm", "yeah",
    "alright", "anyway",
];

const WH_WORDS: &[&str] =
    &["where", "what", "when", "who", "whom", "whose", "why", "which", "how"];

const AUXILIARIES: &[&str] = &[
    "is", "are", "was", "were", "am", "do", "does", "did", "can", "could", "will", "would",
    "shall", "should", "may", "might", "must", "have", "has", "had", "isn't", "aren't", "wasn't",
    "weren't", "don't", "doesn't", "didn't", "can't", "couldn't", "won't", "wouldn't",
    "shouldn't", "haven't", "hasn't", "hadn't",
];

const QUESTION_TAGS: &[&str] = &["right", "huh", "correct"];

impl InterrogativeClassifier for RuleBasedInterrogative {
    fn is_interrogative(&self, sentence: &str) -> bool {
        let lowered = sentence.to_lowercase();
        let trimmed = lowered.trim_end_matches(['.', '!', ' ']);
        if trimmed.ends_with('?') {
            return true;
        }
        let tokens: Vec<&str> = trimmed
            .split_whitespace()
            .map(|t| t.trim_matches(|c: char| !c.is_ascii_alphanumeric() && c != '\''))
            .filter(|t| !t.is_empty())
            .collect();
        let mut rest: &[&str] = &tokens;
        while rest.len() > 1 && DISCOURSE_MARKERS.contains(&rest[0]) {
            rest = &rest[1..];
        }
        let Some(&first) = rest.first() else { return false };
        if WH_WORDS.contains(&first) {
            return true;
        }
        if rest.len() >= 2 && AUXILIARIES.contains(&first) {
            return true;
        }
        if rest.len() >= 3 && QUESTION_TAGS.contains(rest.last().unwrap()) {
            return true;
        }
        false
    }
}

/// Rule-based default.
pub fn is_interrogative(sentence: &str) -> bool {
    RuleBasedInterrogative.is_interrogative(sentence)
}

/// Restores punctuation and capitalization. Pluggable so an external
/// sequence-to-sequence corrector can be slotted in.
pub trait GrammarCorrector: Send + Sync {
    fn correct(&self, text: &str) -> String;
}

/// Deterministic rule engine: capitalizes the sentence start and the
/// pronoun `i`, and appends `?` or `.` depending on the interrogative
/// classifier. Idempotent.
pub struct RuleBasedGrammar<C = RuleBasedInterrogative> {
    classifier: C,
}

impl Default for RuleBasedGrammar {
    fn default() -> Self {
        RuleBasedGrammar { classifier: RuleBasedInterrogative }
    }
}

impl<C: InterrogativeClassifier> RuleBasedGrammar<C> {
    pub fn with_classifier(classifier: C) -> Self {
        RuleBasedGrammar { classifier }
    }
}

impl<C: InterrogativeClassifier> GrammarCorrector for RuleBasedGrammar<C> {
    fn correct(&self, text: &str) -> String {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return String::new();
        }
        let words: Vec<String> = trimmed
            .split_whitespace()
            .map(|w| {
                if w == "i" || w.starts_with("i'") {
                    let mut c = String::from("I");
                    c.push_str(&w[1..]);
                    c
                } else {
                    w.to_string()
                }
            })
            .collect();
        let mut s = words.join(" ");
        if !s.ends_with(['.', '?', '!']) {
            if self.classifier.is_interrogative(&s) {
                s.push('?');
            } else {
                s.push('.');
            }
        }
        let first_alpha = s.char_indices().find(|(_, c)| c.is_alphabetic());
        if let Some((idx, c)) = first_alpha {
            let upper: String = c.to_uppercase().collect();
            s.replace_range(idx..idx + c.len_utf8(), &upper);
        }
        s
    }
}

/// Rule-based default over [`normalize_grammar`]'s contract: sentence case,
/// pronoun `i`, terminal `?` or `.`; idempotent.
pub fn normalize_grammar(text: &str) -> String {
    RuleBasedGrammar::default().correct(text)
}

fn rename_speaker(speaker: &Speaker) -> Result<Speaker, TranscriptError> {
    match speaker {
        Speaker::Ellie | Speaker::Therapist => Ok(Speaker::Therapist),
        Speaker::Participant | Speaker::Patient => Ok(Speaker::Patient),
        Speaker::Other(s) => Err(TranscriptError::UnknownSpeaker(s.clone())),
    }
}

/// Full transcript normalization with a pluggable grammar corrector.
pub struct Normalizer {
    pub acronyms: AcronymTable,
    pub grammar: Box<dyn GrammarCorrector>,
}

impl Normalizer {
    pub fn rule_based(acronyms: AcronymTable) -> Self {
        Normalizer { acronyms, grammar: Box::new(RuleBasedGrammar::default()) }
    }

    /// Cleans and grammar-normalizes every utterance, renames speakers, and
    /// merges consecutive same-speaker utterances. Utterances that clean to
    /// nothing (pure non-speech) are dropped. The output alternates
    /// speakers strictly.
    pub fn normalize_transcript(
        &self,
        utterances: &[Utterance],
    ) -> Result<Vec<Utterance>, TranscriptError> {
        let mut merged: Vec<Utterance> = Vec::new();
        for u in utterances {
            let speaker = rename_speaker(&u.speaker)?;
            let cleaned = clean_utterance(&u.text, &self.acronyms);
            if cleaned.is_empty() {
                continue;
            }
            let text = self.grammar.correct(&cleaned);
            match merged.last_mut() {
                Some(prev) if prev.speaker == speaker => {
                    prev.stop_time = quantize_centis(u.stop_time);
                    prev.text.push(' ');
                    prev.text.push_str(&text);
                }
                _ => merged.push(Utterance::new(
                    speaker,
                    quantize_centis(u.start_time),
                    quantize_centis(u.stop_time),
                    text,
                )),
            }
        }
        Ok(merged)
    }
}

/// Rule-based default of [`Normalizer::normalize_transcript`].
pub fn normalize_transcript(
    utterances: &[Utterance],
    acronyms: &AcronymTable,
) -> Result<Vec<Utterance>, TranscriptError> {
    Normalizer::rule_based(acronyms.clone()).normalize_transcript(utterances)
}

/// One line per utterance, `Speaker: text`, joined by newlines.
pub fn render_dialogue(utterances: &[Utterance]) -> String {
    utterances
        .iter()
        .map(|u| format!("{}: {}", u.speaker, u.text))
        .collect::<Vec<_>>()
        .join("\n")
}
