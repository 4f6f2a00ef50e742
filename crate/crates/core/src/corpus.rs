//! Dialogue data model, JSONL ingestion, whitespace vocabulary, and the
//! synthetic persona-conditioned corpus generator.
//!
//! The synthetic construction pairs two speakers with different hidden
//! traits in every dialogue. The context shows both speakers' style
//! markers but never says who answers next, while the gold response
//! contains tokens determined by the *target* speaker's trait. A model
//! that cannot identify the next speaker's trait is therefore capped near
//! coin-flip accuracy on those tokens; the scripted oracles below measure
//! that floor and the trait-aware ceiling.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::personality::{TraitLabel, ALL_TRAITS};
use crate::rng::Rng;

// ── data model ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub speaker: String,
    pub utterance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueSample {
    pub turns: Vec<DialogueTurn>,
    pub target_speaker: String,
    pub target_response: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_trait: Option<TraitLabel>,
}

impl DialogueSample {
    pub fn context_tokens(&self) -> Vec<String> {
        let mut tokens = Vec::new();
        for turn in &self.turns {
            tokens.push(speaker_tag(&turn.speaker));
            tokens.extend(turn.utterance.split_whitespace().map(str::to_string));
        }
        tokens
    }

    pub fn response_tokens(&self) -> Vec<String> {
        self.target_response
            .split_whitespace()
            .map(str::to_string)
            .collect()
    }
}

/// Serialized speaker identity token.
pub fn speaker_tag(speaker: &str) -> String {
    format!("<sp:{speaker}>")
}

// ── jsonl ingestion ──────────────────────────────────────────────────

/// Whether hidden traits survive loading. Training must not see them.
#[derive(Debug, Copy, Clone, PartialEq, Eq)]
pub enum LoadMode {
    /// Strip `hidden_trait` from every sample.
    WithholdTraits,
    /// Keep `hidden_trait` for post-hoc evaluation.
    Evaluation,
}

#[derive(Debug, Clone)]
pub struct LoadWarning {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub samples: Vec<DialogueSample>,
    pub warnings: Vec<LoadWarning>,
}

/// Load one JSON object per line. Malformed lines are collected as
/// warnings with their line numbers; the load fails only when more than
/// 10% of non-empty lines are bad.
pub fn load_jsonl(path: &Path, mode: LoadMode) -> Result<LoadReport> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut report = LoadReport::default();
    let mut total = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        match serde_json::from_str::<DialogueSample>(&line) {
            Ok(mut sample) => {
                if let Err(msg) = validate_sample(&sample) {
                    report.warnings.push(LoadWarning { line: idx + 1, message: msg });
                    continue;
                }
                if mode == LoadMode::WithholdTraits {
                    sample.hidden_trait = None;
                }
                report.samples.push(sample);
            }
            Err(e) => {
                report
                    .warnings
                    .push(LoadWarning { line: idx + 1, message: e.to_string() });
            }
        }
    }
    if total == 0 {
        report.warnings.push(LoadWarning {
            line: 0,
            message: format!("{}: file contains no samples", path.display()),
        });
        log::warn!("{}: empty corpus file", path.display());
    }
    for w in &report.warnings {
        if w.line > 0 {
            log::warn!("{}:{}: {}", path.display(), w.line, w.message);
        }
    }
    let bad = total - report.samples.len();
    if total > 0 && bad * 10 > total {
        return Err(Error::data(format!(
            "{}: {bad} of {total} lines malformed",
            path.display()
        )));
    }
    Ok(report)
}

fn validate_sample(sample: &DialogueSample) -> std::result::Result<(), String> {
    if sample.turns.is_empty() {
        return Err("sample has no context turns".into());
    }
    if sample.target_speaker.is_empty() {
        return Err("target_speaker is empty".into());
    }
    if sample.turns.iter().any(|t| t.speaker.is_empty()) {
        return Err("turn with empty speaker".into());
    }
    Ok(())
}

pub fn save_jsonl(path: &Path, samples: &[DialogueSample]) -> Result<()> {
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    for sample in samples {
        serde_json::to_writer(&mut file, sample)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

// ── vocabulary ───────────────────────────────────────────────────────

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

/// Whitespace-token vocabulary with reserved ids. Speaker tags are always
/// kept regardless of frequency; remaining tokens are ordered by
/// (frequency desc, token asc) so identical corpora produce identical ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn build<'a>(streams: impl Iterator<Item = &'a [String]>, min_freq: usize) -> Self {
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        let mut tags: Vec<&str> = Vec::new();
        for stream in streams {
            for token in stream {
                *freq.entry(token).or_insert(0) += 1;
                if token.starts_with("<sp:") && !tags.contains(&token.as_str()) {
                    tags.push(token);
                }
            }
        }
        tags.sort_unstable();
        let mut ordered: Vec<(&str, usize)> = freq
            .iter()
            .filter(|(t, &c)| c >= min_freq && !t.starts_with("<sp:"))
            .map(|(&t, &c)| (t, c))
            .collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

        let mut tokens: Vec<String> =
            ["<pad>", "<bos>", "<eos>", "<unk>"].iter().map(|s| s.to_string()).collect();
        tokens.extend(tags.into_iter().map(str::to_string));
        tokens.extend(ordered.into_iter().map(|(t, _)| t.to_string()));
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Rebuild the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}

// ── synthetic corpus ─────────────────────────────────────────────────

/// Context style-marker word per trait. Each appears verbatim in that
/// trait's template, grounding the marker in the definition text.
pub fn trait_marker(t: TraitLabel) -> &'static str {
    t.bare_word()
}

/// The two response tokens determined by the target's trait; both appear
/// verbatim in the trait's template.
pub fn trait_response_words(t: TraitLabel) -> (&'static str, &'static str) {
    match t {
        TraitLabel::Openness => ("creative", "curious"),
        TraitLabel::Conscientiousness => ("work", "commitment"),
        TraitLabel::Extraversion => ("social", "enjoy"),
        TraitLabel::Agreeableness => ("harmonious", "help"),
        TraitLabel::Neuroticism => ("negative", "emotional"),
    }
}

const TOPICS: [&str; 6] = ["party", "khana", "cricket", "natak", "paisa", "chutti"];

const OPENERS: [&str; 4] = [
    "arre {topic} ka kya scene hai",
    "suno {topic} ke baare mein baat karni hai",
    "yaar {topic} ko lekar confusion hai",
    "bhai {topic} wala plan final karna hai",
];

const MARKER_LINES: [&str; 3] = [
    "haan mera toh {marker} mood chal raha hai",
    "dekho main {marker} type ka insaan hoon",
    "arre mujhe {marker} wali feeling aa rahi hai",
];

const MARKER_REPLIES: [&str; 3] = [
    "sahi hai mera {marker} style hai na",
    "haan yaar main {marker} zone mein hoon",
    "bilkul mera {marker} scene rehta hai",
];

/// Gold responses follow a fixed shape; slots 3 and 5 carry the
/// trait-dependent words.
pub const TRAIT_TOKEN_SLOTS: [usize; 2] = [3, 5];

fn response_text(topic: &str, t: TraitLabel) -> String {
    let (w1, w2) = trait_response_words(t);
    format!("{topic} ke liye {w1} aur {w2} wala scene hai")
}

const SPEAKER_NAMES: [&str; 20] = [
    "asha", "bablu", "chetan", "divya", "esha", "farhan", "gopal", "heena", "ishan", "jaya",
    "kiran", "lata", "mohan", "nisha", "omkar", "priya", "qasim", "ritu", "sameer", "tara",
];

/// Deterministic speaker roster with traits assigned round-robin over a
/// seeded shuffle, so any two speakers may share a trait only when
/// n_speakers > 5.
pub fn speaker_roster(seed: u64, n_speakers: usize) -> Vec<(String, TraitLabel)> {
    let mut rng = Rng::seed_from(seed ^ 0x5b3a_9c1d_e477_0b21);
    let mut names: Vec<String> = (0..n_speakers)
        .map(|i| {
            if i < SPEAKER_NAMES.len() {
                SPEAKER_NAMES[i].to_string()
            } else {
                format!("sp{i:02}")
            }
        })
        .collect();
    rng.shuffle(&mut names);
    names
        .into_iter()
        .enumerate()
        .map(|(i, name)| (name, ALL_TRAITS[i % 5]))
        .collect()
}

/// Generate a persona-conditioned corpus.
///
/// Every sample pairs two speakers with *different* traits. Both speakers
/// drop their style marker in the context; the target speaker is chosen by
/// a fair coin and never revealed inside the context turns, so the
/// trait-dependent response words cannot be predicted from the context
/// alone.
pub fn synth_corpus(seed: u64, n_samples: usize, n_speakers: usize) -> Result<Vec<DialogueSample>> {
    if n_samples < 10 {
        return Err(Error::config(format!(
            "synthetic corpus needs at least 10 samples, asked for {n_samples}"
        )));
    }
    if n_speakers < 2 {
        return Err(Error::config(format!(
            "synthetic corpus needs at least 2 speakers, asked for {n_speakers}"
        )));
    }
    let roster = speaker_roster(seed, n_speakers);
    let mut rng = Rng::seed_from(seed);
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let (a, b) = loop {
            let i = rng.below(roster.len());
            let j = rng.below(roster.len());
            if i != j && roster[i].1 != roster[j].1 {
                break (roster[i].clone(), roster[j].clone());
            }
        };
        let topic = TOPICS[rng.below(TOPICS.len())];
        let opener = OPENERS[rng.below(OPENERS.len())].replace("{topic}", topic);
        let marker_line = MARKER_LINES[rng.below(MARKER_LINES.len())]
            .replace("{marker}", trait_marker(b.1));
        let marker_reply = MARKER_REPLIES[rng.below(MARKER_REPLIES.len())]
            .replace("{marker}", trait_marker(a.1));

        let target = if rng.below(2) == 0 { a.clone() } else { b.clone() };
        samples.push(DialogueSample {
            turns: vec![
                DialogueTurn { speaker: a.0.clone(), utterance: opener },
                DialogueTurn { speaker: b.0.clone(), utterance: marker_line },
                DialogueTurn { speaker: a.0.clone(), utterance: marker_reply },
            ],
            target_speaker: target.0,
            target_response: response_text(topic, target.1),
            hidden_trait: Some(target.1),
        });
    }
    Ok(samples)
}

/// Fraction of trait slots in `generated` matching the words implied by
/// the sample's hidden trait. Returns (correct, total).
pub fn score_trait_tokens(sample: &DialogueSample, generated: &[String]) -> (usize, usize) {
    let Some(trait_label) = sample.hidden_trait else {
        return (0, 0);
    };
    let (w1, w2) = trait_response_words(trait_label);
    let mut correct = 0;
    for (&slot, want) in TRAIT_TOKEN_SLOTS.iter().zip([w1, w2]) {
        if generated.get(slot).map(String::as_str) == Some(want) {
            correct += 1;
        }
    }
    (correct, TRAIT_TOKEN_SLOTS.len())
}

/// Uniformity statistic for the pairing construction: for each unordered
/// trait pair, the two members should be chosen as target about equally
/// often. Returns (chi_square, degrees_of_freedom).
pub fn pairing_chi_square(samples: &[DialogueSample]) -> (f64, usize) {
    let mut counts: BTreeMap<(TraitLabel, TraitLabel), (usize, usize)> = BTreeMap::new();
    for s in samples {
        let Some(target) = s.hidden_trait else { continue };
        let mut markers: Vec<TraitLabel> = Vec::new();
        for turn in &s.turns {
            for t in ALL_TRAITS {
                if turn.utterance.split_whitespace().any(|w| w == trait_marker(t))
                    && !markers.contains(&t)
                {
                    markers.push(t);
                }
            }
        }
        if markers.len() != 2 {
            continue;
        }
        markers.sort();
        let key = (markers[0], markers[1]);
        let entry = counts.entry(key).or_insert((0, 0));
        if target == key.0 {
            entry.0 += 1;
        } else {
            entry.1 += 1;
        }
    }
    let mut chi = 0.0;
    let mut df = 0;
    for &(c1, c2) in counts.values() {
        let total = (c1 + c2) as f64;
        if total > 0.0 {
            let diff = c1 as f64 - c2 as f64;
            chi += diff * diff / total;
            df += 1;
        }
    }
    (chi, df)
}

/// Trait-blind scripted oracle: sees the context (including both markers)
/// but not the hidden trait. From the train split it memorizes, per
/// unordered marker pair, which response words appeared most often, then
/// predicts those for every test sample. Its accuracy on the trait slots
/// is the construction's ceiling for personality-blind models.
pub fn blind_oracle_trait_accuracy(train: &[DialogueSample], test: &[DialogueSample]) -> f64 {
    let context_pair = |s: &DialogueSample| -> Option<(TraitLabel, TraitLabel)> {
        let mut markers: Vec<TraitLabel> = Vec::new();
        for turn in &s.turns {
            for t in ALL_TRAITS {
                if turn.utterance.split_whitespace().any(|w| w == trait_marker(t))
                    && !markers.contains(&t)
                {
                    markers.push(t);
                }
            }
        }
        if markers.len() == 2 {
            markers.sort();
            Some((markers[0], markers[1]))
        } else {
            None
        }
    };
    let mut counts: BTreeMap<(TraitLabel, TraitLabel), (usize, usize)> = BTreeMap::new();
    for s in train {
        let (Some(pair), Some(target)) = (context_pair(s), s.hidden_trait) else { continue };
        let entry = counts.entry(pair).or_insert((0, 0));
        if target == pair.0 {
            entry.0 += 1;
        } else {
            entry.1 += 1;
        }
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for s in test {
        let Some(pair) = context_pair(s) else { continue };
        // Deterministic tie-break toward the earlier trait.
        let guess = match counts.get(&pair) {
            Some(&(c1, c2)) if c2 > c1 => pair.1,
            _ => pair.0,
        };
        let (w1, w2) = trait_response_words(guess);
        let predicted: Vec<String> = response_tokens_with(&s.target_response, w1, w2);
        let (c, t) = score_trait_tokens(s, &predicted);
        correct += c;
        total += t;
    }
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

fn response_tokens_with(reference: &str, w1: &str, w2: &str) -> Vec<String> {
    let mut tokens: Vec<String> = reference.split_whitespace().map(str::to_string).collect();
    if tokens.len() > TRAIT_TOKEN_SLOTS[1] {
        tokens[TRAIT_TOKEN_SLOTS[0]] = w1.to_string();
        tokens[TRAIT_TOKEN_SLOTS[1]] = w2.to_string();
    }
    tokens
}

/// Trait-aware scripted oracle: reads the hidden trait and reproduces the
/// trait words exactly. Sanity ceiling of 1.0 by construction.
pub fn aware_oracle_trait_accuracy(test: &[DialogueSample]) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for s in test {
        let Some(t) = s.hidden_trait else { continue };
        let (w1, w2) = trait_response_words(t);
        let predicted = response_tokens_with(&s.target_response, w1, w2);
        let (c, n) = score_trait_tokens(s, &predicted);
        correct += c;
        total += n;
    }
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

#[cfg(test)]
mod tests;
