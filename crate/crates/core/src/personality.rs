//! Big Five trait labels, their templatic definitions, trait
//! distributions, and the trait classifier trained through the response
//! generation objective.
//!
//! The classifier never sees trait labels. Its logits combine a learned
//! head (zero-initialized) with a similarity term against the encoded trait
//! templates. Tying each class to its own definition text anchors class
//! identity, so the response loss pulls the classes toward their matching
//! definitions instead of an arbitrary permutation of them.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Binding, EncoderLayer, LayerNorm, ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, TensorId};

/// The five Big Five trait classes.
#[derive(Debug, Copy, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TraitLabel {
    #[serde(rename = "OPN")]
    Openness,
    #[serde(rename = "CON")]
    Conscientiousness,
    #[serde(rename = "EXT")]
    Extraversion,
    #[serde(rename = "AGR")]
    Agreeableness,
    #[serde(rename = "NEU")]
    Neuroticism,
}

pub const ALL_TRAITS: [TraitLabel; 5] = [
    TraitLabel::Openness,
    TraitLabel::Conscientiousness,
    TraitLabel::Extraversion,
    TraitLabel::Agreeableness,
    TraitLabel::Neuroticism,
];

impl TraitLabel {
    pub fn tag(&self) -> &'static str {
        match self {
            TraitLabel::Openness => "OPN",
            TraitLabel::Conscientiousness => "CON",
            TraitLabel::Extraversion => "EXT",
            TraitLabel::Agreeableness => "AGR",
            TraitLabel::Neuroticism => "NEU",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        ALL_TRAITS
            .into_iter()
            .find(|t| t.tag().eq_ignore_ascii_case(tag))
            .ok_or_else(|| Error::data(format!("unknown trait tag {tag:?}")))
    }

    pub fn index(&self) -> usize {
        ALL_TRAITS.iter().position(|t| t == self).unwrap()
    }

    /// The bare trait word used by the traits-only ablation.
    pub fn bare_word(&self) -> &'static str {
        match self {
            TraitLabel::Openness => "openness",
            TraitLabel::Conscientiousness => "conscientiousness",
            TraitLabel::Extraversion => "extraversion",
            TraitLabel::Agreeableness => "agreeableness",
            TraitLabel::Neuroticism => "neuroticism",
        }
    }
}

impl std::fmt::Display for TraitLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// A trait together with its fixed definition sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonaDefinition {
    pub trait_label: TraitLabel,
    pub template_text: String,
}

/// Template registry: one line per trait, tag and definition separated by a
/// tab. Checked into the repo and hash-pinned in tests.
pub const TEMPLATE_ASSET: &str = include_str!("../assets/trait_templates.txt");

fn registry() -> &'static [PersonaDefinition; 5] {
    static REGISTRY: OnceLock<[PersonaDefinition; 5]> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut defs: Vec<PersonaDefinition> = Vec::with_capacity(5);
        for line in TEMPLATE_ASSET.lines() {
            let (tag, text) = line
                .split_once('\t')
                .expect("template registry line must be tag<TAB>text");
            defs.push(PersonaDefinition {
                trait_label: TraitLabel::from_tag(tag).expect("valid trait tag"),
                template_text: text.to_string(),
            });
        }
        defs.try_into().expect("exactly five templates")
    })
}

/// The templatic definition for a trait.
pub fn trait_to_template(trait_label: TraitLabel) -> PersonaDefinition {
    registry()[trait_label.index()].clone()
}

/// Template token stream, or the bare trait word when `bare` is set.
pub fn template_tokens(trait_label: TraitLabel, bare: bool) -> Vec<String> {
    if bare {
        vec![trait_label.bare_word().to_string()]
    } else {
        trait_to_template(trait_label)
            .template_text
            .split_whitespace()
            .map(str::to_string)
            .collect()
    }
}

/// A normalized five-way distribution over traits.
#[derive(Debug, Clone, PartialEq)]
pub struct TraitDistribution {
    pub probs: [f64; 5],
}

impl TraitDistribution {
    pub fn new(probs: [f64; 5]) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || probs.iter().any(|&p| p < 0.0) {
            return Err(Error::data(format!(
                "trait distribution must be nonnegative and sum to 1, got {probs:?}"
            )));
        }
        Ok(TraitDistribution { probs })
    }

    pub fn uniform() -> Self {
        TraitDistribution { probs: [0.2; 5] }
    }

    pub fn one_hot(t: TraitLabel) -> Self {
        let mut probs = [0.0; 5];
        probs[t.index()] = 1.0;
        TraitDistribution { probs }
    }

    /// Predicted trait; ties break toward the earlier class for determinism.
    pub fn argmax(&self) -> TraitLabel {
        let mut best = 0;
        for i in 1..5 {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        ALL_TRAITS[best]
    }
}

// ── classifier ───────────────────────────────────────────────────────

/// Transformer encoder over the dialogue context plus a five-way head.
///
/// logits = pooled·W_head + α·(pooled·T^T)/√d, where T stacks the pooled
/// template encodings. W_head starts at zero, so the initial prediction is
/// driven entirely by similarity to the trait definitions.
#[derive(Debug, Clone)]
pub struct TraitClassifier {
    pub layers: Vec<EncoderLayer>,
    pub norm: LayerNorm,
    pub head: ParamId,
    pub sim_scale: ParamId,
    pub d: usize,
}

impl TraitClassifier {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut Rng,
        prefix: &str,
        d: usize,
        heads: usize,
        layers: usize,
    ) -> Self {
        let layers = (0..layers)
            .map(|i| EncoderLayer::new(ps, rng, &format!("{prefix}.l{i}"), d, heads, 4 * d))
            .collect();
        // The learned head starts at zero so early training is driven by
        // the template-similarity term alone. That anchors each class to
        // its own definition text, which is what stops the pseudo-task
        // from settling on a permuted class assignment.
        let _ = rng;
        TraitClassifier {
            layers,
            norm: LayerNorm::new(ps, &format!("{prefix}.norm"), d),
            head: ps.add(format!("{prefix}.head"), Tensor::zeros(vec![d, 5])),
            sim_scale: ps.add(format!("{prefix}.sim_scale"), Tensor::scalar(1.0)),
            d,
        }
    }

    /// Five logits (1×5) for an embedded context (n×d). `templates` is the
    /// 5×d matrix of pooled template encodings used by the similarity term.
    ///
    /// The summary vector is the final position's representation; the
    /// pipeline puts the target-speaker tag there, so the head reads the
    /// token whose trait is being asked about after it has attended over
    /// the context.
    pub fn logits(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        embedded: TensorId,
        templates: TensorId,
    ) -> Result<TensorId> {
        let n = tape.shape(embedded)[0];
        if n == 0 {
            return Err(Error::data("cannot classify an empty context"));
        }
        let mut x = embedded;
        for layer in &self.layers {
            x = layer.forward(tape, bind, x)?;
        }
        let x = self.norm.forward(tape, bind, x)?;
        // Final-position readout plus the context mean: the mean carries
        // the style markers scattered through the dialogue, the final
        // position carries whose trait is being asked for.
        let last = tape.slice_rows(x, n - 1, 1)?;
        let mean = tape.mean_rows(x)?;
        let pooled = tape.add(last, mean)?;

        let learned = tape.matmul(pooled, bind.id(self.head))?;
        let tt = tape.transpose(templates)?;
        let sim = tape.matmul(pooled, tt)?;
        // 1/d keeps the untrained logits small enough for a near-uniform
        // starting distribution while leaving the gradient path intact.
        let sim = tape.scale(sim, 1.0 / self.d as f64);
        let sim = tape.mul(sim, bind.id(self.sim_scale))?;
        Ok(tape.add(learned, sim)?)
    }

    /// Softmax over [`Self::logits`].
    pub fn distribution(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        embedded: TensorId,
        templates: TensorId,
    ) -> Result<TensorId> {
        let logits = self.logits(tape, bind, embedded, templates)?;
        Ok(tape.softmax_rows(logits)?)
    }
}

/// Shannon entropy of a probability row, kept on the tape so it can serve
/// as a differentiable regularizer against early classifier collapse.
pub fn distribution_entropy(tape: &mut Tape, probs: TensorId) -> Result<TensorId> {
    let logs = tape.ln(probs);
    let plogp = tape.mul(probs, logs)?;
    let neg_h = tape.sum_all(plogp);
    Ok(tape.scale(neg_h, -1.0))
}

/// Read a 1×5 tape row out into a [`TraitDistribution`].
pub fn distribution_from_tape(tape: &Tape, probs: TensorId) -> Result<TraitDistribution> {
    let data = tape.data(probs);
    if data.len() != 5 {
        return Err(Error::data(format!(
            "expected five probabilities, got {}",
            data.len()
        )));
    }
    TraitDistribution::new([data[0], data[1], data[2], data[3], data[4]])
}

/// Mix pooled template encodings (5×d_p) by a distribution and broadcast to
/// n rows: the differentiable path through the discrete trait choice.
pub fn mix_and_broadcast(
    tape: &mut Tape,
    probs: TensorId,
    pooled_templates: TensorId,
    n: usize,
) -> Result<TensorId> {
    if n == 0 {
        return Err(Error::config("persona encoding needs n >= 1"));
    }
    let mixed = tape.matmul(probs, pooled_templates)?;
    let ones = tape.constant(vec![n, 1], vec![1.0; n])?;
    Ok(tape.matmul(ones, mixed)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    #[test]
    fn template_asset_is_hash_pinned() {
        let digest = Sha256::digest(TEMPLATE_ASSET.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(
            hex,
            "4b9eebc50933401cb3ed33481312106f7234e9aab5b4d0b6f0e5cf3410406778",
            "trait template registry changed"
        );
    }

    #[test]
    fn openness_template_is_exact() {
        let def = trait_to_template(TraitLabel::Openness);
        assert_eq!(
            def.template_text,
            "The speaker has high openness trait. They embrace new ideas, are curious about \
             the world, and are often drawn to creative and unconventional pursuits."
        );
    }

    #[test]
    fn neuroticism_template_is_exact() {
        let def = trait_to_template(TraitLabel::Neuroticism);
        assert_eq!(
            def.template_text,
            "The speaker has high neuroticism trait. They have a greater tendency for \
             emotional instability, anxiety, and a propensity to experience negative \
             emotions such as fear, sadness, and anger."
        );
    }

    #[test]
    fn template_mapping_is_total_and_injective() {
        let mut seen = std::collections::BTreeSet::new();
        for t in ALL_TRAITS {
            let def = trait_to_template(t);
            assert_eq!(def.trait_label, t);
            assert!(seen.insert(def.template_text.clone()), "duplicate template");
            assert!(def.template_text.contains(t.bare_word()));
        }
        assert_eq!(seen.len(), 5);
    }

    #[test]
    fn distribution_argmax_is_scale_invariant() {
        // Scaling logits by a positive constant cannot move the argmax;
        // softmax preserves order.
        let logits = [0.3, -1.0, 2.0, 0.1, 1.9];
        let soft = |scale: f64| -> TraitDistribution {
            let exps: Vec<f64> = logits.iter().map(|&l| (l * scale).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let mut probs = [0.0; 5];
            for (i, e) in exps.iter().enumerate() {
                probs[i] = e / sum;
            }
            TraitDistribution::new(probs).unwrap()
        };
        let base = soft(1.0).argmax();
        for scale in [0.1, 2.0, 7.5] {
            assert_eq!(soft(scale).argmax(), base);
        }
    }

    #[test]
    fn distribution_rejects_bad_sums() {
        assert!(TraitDistribution::new([0.3, 0.3, 0.3, 0.3, 0.3]).is_err());
        assert!(TraitDistribution::new([1.2, -0.2, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn zeroed_head_gives_uniform_distribution() {
        let mut rng = Rng::seed_from(7);
        let mut ps = ParamSet::new();
        let clf = TraitClassifier::new(&mut ps, &mut rng, "clf", 8, 2, 1);
        // Zero both the learned head and the similarity scale.
        ps.get_mut(clf.head).value.data.fill(0.0);
        ps.get_mut(clf.sim_scale).value.data.fill(0.0);

        let mut tape = Tape::new();
        let bind = ps.bind(&mut tape, false);
        let ctx = tape
            .constant(vec![3, 8], (0..24).map(|i| (i as f64).sin()).collect())
            .unwrap();
        let templates = tape
            .constant(vec![5, 8], (0..40).map(|i| (i as f64).cos()).collect())
            .unwrap();
        let probs = clf.distribution(&mut tape, &bind, ctx, templates).unwrap();
        let dist = distribution_from_tape(&tape, probs).unwrap();
        for p in dist.probs {
            assert!((p - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_rejects_empty_context() {
        let mut rng = Rng::seed_from(8);
        let mut ps = ParamSet::new();
        let clf = TraitClassifier::new(&mut ps, &mut rng, "clf", 8, 2, 1);
        let mut tape = Tape::new();
        let bind = ps.bind(&mut tape, false);
        let ctx = tape.constant(vec![0, 8], vec![]).unwrap();
        let templates = tape.constant(vec![5, 8], vec![0.0; 40]).unwrap();
        assert!(clf.logits(&mut tape, &bind, ctx, templates).is_err());
    }

    #[test]
    fn one_hot_mixture_equals_selected_template_row() {
        let mut tape = Tape::new();
        let pooled = tape
            .constant(vec![5, 3], (0..15).map(|i| i as f64).collect())
            .unwrap();
        let probs = tape
            .constant(vec![1, 5], vec![0.0, 0.0, 1.0, 0.0, 0.0])
            .unwrap();
        let p = mix_and_broadcast(&mut tape, probs, pooled, 4).unwrap();
        assert_eq!(tape.shape(p), &[4, 3]);
        for row in 0..4 {
            assert_eq!(&tape.data(p)[row * 3..(row + 1) * 3], &[6.0, 7.0, 8.0]);
        }
    }

    #[test]
    fn uniform_mixture_is_mean_of_templates() {
        let mut tape = Tape::new();
        let pooled = tape
            .constant(vec![5, 2], vec![1.0, 0.0, 2.0, 0.0, 3.0, 0.0, 4.0, 0.0, 5.0, 10.0])
            .unwrap();
        let probs = tape.constant(vec![1, 5], vec![0.2; 5]).unwrap();
        let p = mix_and_broadcast(&mut tape, probs, pooled, 2).unwrap();
        assert_eq!(&tape.data(p)[0..2], &[3.0, 2.0]);
        assert_eq!(&tape.data(p)[2..4], &[3.0, 2.0]);
    }

    #[test]
    fn broadcast_rejects_zero_length() {
        let mut tape = Tape::new();
        let pooled = tape.constant(vec![5, 2], vec![0.0; 10]).unwrap();
        let probs = tape.constant(vec![1, 5], vec![0.2; 5]).unwrap();
        assert!(mix_and_broadcast(&mut tape, probs, pooled, 0).is_err());
    }
}
