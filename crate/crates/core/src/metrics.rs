//! ROUGE-1/2/L and BLEU-1..4 scorers plus the evaluation harness that
//! turns per-strategy decodes into a comparison table with deltas against
//! the no-personality baseline.
//!
//! All scores are percentages. Tokenization is whatever the caller used;
//! the pipeline feeds whitespace tokens.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::error::{Error, Result};

/// Smoothing floor for BLEU precisions that would otherwise be zero.
pub const BLEU_EPSILON: f64 = 1e-9;

fn ngram_counts<'a>(tokens: &'a [String], n: usize) -> HashMap<&'a [String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n && n > 0 {
        for start in 0..=tokens.len() - n {
            *counts.entry(&tokens[start..start + n]).or_insert(0) += 1;
        }
    }
    counts
}

fn clipped_overlap(candidate: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let total: usize = cand.values().sum();
    let overlap: usize = cand
        .iter()
        .map(|(gram, &c)| c.min(refc.get(gram).copied().unwrap_or(0)))
        .sum();
    (overlap, total)
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// F1 of clipped n-gram multiset overlap, as a percentage. Zero when
/// either side has no n-grams.
pub fn rouge_n(candidate: &[String], reference: &[String], n: usize) -> f64 {
    let (overlap, cand_total) = clipped_overlap(candidate, reference, n);
    let ref_total = reference.len().saturating_sub(n.saturating_sub(1));
    if cand_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand_total as f64;
    let r = overlap as f64 / ref_total as f64;
    100.0 * f1(p, r)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            cur[j] = if a[i - 1] == b[j - 1] {
                prev[j - 1] + 1
            } else {
                prev[j].max(cur[j - 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest-common-subsequence F1, as a percentage.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    100.0 * f1(p, r)
}

/// BLEU-1..max_n with clipped modified precision, brevity penalty, and
/// add-epsilon smoothing so higher orders stay defined on short responses.
/// Each entry k is the geometric mean of precisions up to order k+1 times
/// the brevity penalty, as a percentage.
pub fn bleu(candidate: &[String], references: &[&[String]], max_n: usize) -> Result<Vec<f64>> {
    if max_n == 0 || max_n > 4 {
        return Err(Error::config(format!("bleu max_n must be 1..=4, got {max_n}")));
    }
    if references.is_empty() {
        return Err(Error::config("bleu needs at least one reference"));
    }
    let c = candidate.len();
    // Closest reference length, ties toward the shorter.
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| ((len as i64 - c as i64).abs(), len))
        .unwrap_or(0);

    let brevity = if c == 0 {
        0.0
    } else if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };

    let mut precisions = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let cand = ngram_counts(candidate, n);
        let total: usize = cand.values().sum();
        let mut overlap = 0usize;
        for (gram, &count) in &cand {
            let best = references
                .iter()
                .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            overlap += count.min(best);
        }
        let p = if total == 0 || overlap == 0 {
            BLEU_EPSILON
        } else {
            overlap as f64 / total as f64
        };
        precisions.push(p);
    }

    let mut scores = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    for (k, p) in precisions.iter().enumerate() {
        log_sum += p.ln();
        scores.push(100.0 * brevity * (log_sum / (k + 1) as f64).exp());
    }
    Ok(scores)
}

// ── corpus-level harness ─────────────────────────────────────────────

/// Kahan-compensated sum, insensitive to accumulation order at f64 scale.
pub fn compensated_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &v in values {
        let y = v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum / values.len() as f64
}

/// One decoded test sample ready for scoring.
#[derive(Debug, Clone)]
pub struct DecodedSample {
    pub speaker: String,
    pub candidate: Vec<String>,
    pub reference: Vec<String>,
}

/// Corpus-mean scores for one strategy.
#[derive(Debug, Clone, Serialize)]
pub struct StrategyScores {
    pub strategy: String,
    pub n_samples: usize,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub per_speaker_rouge1: BTreeMap<String, f64>,
}

/// Score a decoded corpus: per-sample metrics averaged with compensated
/// summation, plus a per-speaker ROUGE-1 breakdown. Errors on an empty
/// corpus rather than reporting zeros.
pub fn evaluate_decodes(strategy: &str, decodes: &[DecodedSample]) -> Result<StrategyScores> {
    if decodes.is_empty() {
        return Err(Error::data(format!(
            "strategy {strategy}: refusing to evaluate an empty test corpus"
        )));
    }
    let mut r1 = Vec::with_capacity(decodes.len());
    let mut r2 = Vec::with_capacity(decodes.len());
    let mut rl = Vec::with_capacity(decodes.len());
    let mut b: [Vec<f64>; 4] = Default::default();
    let mut by_speaker: BTreeMap<String, Vec<f64>> = BTreeMap::new();

    for d in decodes {
        let rouge1 = rouge_n(&d.candidate, &d.reference, 1);
        r1.push(rouge1);
        r2.push(rouge_n(&d.candidate, &d.reference, 2));
        rl.push(rouge_l(&d.candidate, &d.reference));
        let bl = bleu(&d.candidate, &[d.reference.as_slice()], 4)?;
        for k in 0..4 {
            b[k].push(bl[k]);
        }
        by_speaker.entry(d.speaker.clone()).or_default().push(rouge1);
    }

    Ok(StrategyScores {
        strategy: strategy.to_string(),
        n_samples: decodes.len(),
        rouge1: compensated_mean(&r1),
        rouge2: compensated_mean(&r2),
        rouge_l: compensated_mean(&rl),
        bleu1: compensated_mean(&b[0]),
        bleu2: compensated_mean(&b[1]),
        bleu3: compensated_mean(&b[2]),
        bleu4: compensated_mean(&b[3]),
        per_speaker_rouge1: by_speaker
            .into_iter()
            .map(|(s, v)| (s, compensated_mean(&v)))
            .collect(),
    })
}

impl StrategyScores {
    pub fn metric_values(&self) -> [(&'static str, f64); 7] {
        [
            ("rouge1", self.rouge1),
            ("rouge2", self.rouge2),
            ("rougeL", self.rouge_l),
            ("bleu1", self.bleu1),
            ("bleu2", self.bleu2),
            ("bleu3", self.bleu3),
            ("bleu4", self.bleu4),
        ]
    }
}

/// Strategy rows plus deltas against a designated baseline row.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub rows: Vec<StrategyScores>,
    pub baseline: Option<String>,
}

impl EvalReport {
    pub fn new(rows: Vec<StrategyScores>, baseline: Option<String>) -> Self {
        EvalReport { rows, baseline }
    }

    pub fn row(&self, strategy: &str) -> Option<&StrategyScores> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    fn baseline_row(&self) -> Option<&StrategyScores> {
        self.baseline.as_deref().and_then(|b| self.row(b))
    }

    /// (strategy, metric, value, delta-vs-baseline) tuples; delta is None
    /// for the baseline row itself or when no baseline is present.
    pub fn deltas(&self) -> Vec<(String, &'static str, f64, Option<f64>)> {
        let base = self.baseline_row().map(|r| r.metric_values());
        let mut out = Vec::new();
        for row in &self.rows {
            let is_base = Some(row.strategy.as_str()) == self.baseline.as_deref();
            for (i, (name, value)) in row.metric_values().into_iter().enumerate() {
                let delta = match (&base, is_base) {
                    (Some(b), false) => Some(value - b[i].1),
                    _ => None,
                };
                out.push((row.strategy.clone(), name, value, delta));
            }
        }
        out
    }

    /// Human-readable aligned table with green-arrow style deltas.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<14} {:>6} {:>16} {:>16} {:>16} {:>16} {:>16} {:>16} {:>16}\n",
            "strategy", "n", "R1", "R2", "RL", "B1", "B2", "B3", "B4"
        ));
        let base = self.baseline_row().map(|r| r.metric_values());
        for row in &self.rows {
            let is_base = Some(row.strategy.as_str()) == self.baseline.as_deref();
            out.push_str(&format!("{:<14} {:>6}", row.strategy, row.n_samples));
            for (i, (_, value)) in row.metric_values().into_iter().enumerate() {
                let cell = match (&base, is_base) {
                    (Some(b), false) => {
                        let d = value - b[i].1;
                        let arrow = if d >= 0.0 { '\u{2191}' } else { '\u{2193}' };
                        format!("{value:6.2} ({arrow}{:+.2})", d)
                    }
                    _ => format!("{value:6.2}"),
                };
                out.push_str(&format!(" {cell:>16}"));
            }
            out.push('\n');
        }
        out
    }

    /// Machine-readable JSON lines, one strategy row per line.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// (strategy, metric, value) triples for external plotting.
    pub fn plot_data(&self) -> Vec<(String, String, f64)> {
        self.rows
            .iter()
            .flat_map(|row| {
                row.metric_values()
                    .into_iter()
                    .map(|(m, v)| (row.strategy.clone(), m.to_string(), v))
                    .collect::<Vec<_>>()
            })
            .collect()
    }
}
