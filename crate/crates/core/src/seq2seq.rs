//! Encoder-decoder transformer with a configurable persona-fusion
//! injection point, the joint pseudo-task training loop (classifier and
//! generator updated through one response loss), teacher-forced training,
//! greedy and beam decoding, and checkpoint io.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{speaker_tag, DialogueSample, Vocabulary, BOS_ID, EOS_ID, PAD_ID, UNK_ID};
use crate::error::{Error, Result};
use crate::fusion::{FusionStrategy, PersonaEncoding, PersonaFusion};
use crate::nn::{
    clip_global_norm, sinusoidal_positions, AdamW, Binding, DecoderLayer, EncoderLayer,
    LayerNorm, LinearLayer, ParamId, ParamSet,
};
use crate::personality::{
    distribution_entropy, distribution_from_tape, mix_and_broadcast, template_tokens,
    TraitClassifier, TraitDistribution, TraitLabel, ALL_TRAITS,
};
use crate::rng::Rng;
use crate::tensor::{io as tensor_io, Tape, Tensor, TensorId};

// ── configuration ────────────────────────────────────────────────────

/// Pipeline-level fusion strategy. `OnlyTraits` runs the full block but
/// feeds the bare trait word instead of the whole definition sentence.
#[derive(Debug, Copy, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    None,
    Sc,
    Dpa,
    Pa3NoAxial,
    Ot,
    Pa3Full,
}

pub const ALL_STRATEGIES: [Strategy; 6] = [
    Strategy::None,
    Strategy::Sc,
    Strategy::Dpa,
    Strategy::Pa3NoAxial,
    Strategy::Ot,
    Strategy::Pa3Full,
];

impl Strategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Strategy::None),
            "sc" | "simple_concat" => Ok(Strategy::Sc),
            "dpa" | "dot_product" => Ok(Strategy::Dpa),
            "pa3_no_axial" | "pa3-axial" => Ok(Strategy::Pa3NoAxial),
            "ot" | "only_traits" => Ok(Strategy::Ot),
            "pa3_full" | "pa3" => Ok(Strategy::Pa3Full),
            other => Err(Error::config(format!(
                "unknown strategy {other:?}; expected one of none, sc, dpa, pa3_no_axial, ot, pa3_full"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Sc => "sc",
            Strategy::Dpa => "dpa",
            Strategy::Pa3NoAxial => "pa3_no_axial",
            Strategy::Ot => "ot",
            Strategy::Pa3Full => "pa3_full",
        }
    }

    fn fusion_strategy(&self) -> Option<FusionStrategy> {
        match self {
            Strategy::None => None,
            Strategy::Sc => Some(FusionStrategy::SimpleConcat),
            Strategy::Dpa => Some(FusionStrategy::DotProduct),
            Strategy::Pa3NoAxial => Some(FusionStrategy::Pa3NoAxial),
            Strategy::Ot | Strategy::Pa3Full => Some(FusionStrategy::Pa3Full),
        }
    }

    /// Traits-only ablation: encode the bare trait word, not the template.
    pub fn bare_templates(&self) -> bool {
        matches!(self, Strategy::Ot)
    }
}

/// Where the fusion block sits relative to the encoder stack.
#[derive(Debug, Copy, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    /// Once, after the final encoder layer (and its closing norm).
    FinalEncoderLayer,
    /// After every encoder layer, sharing one set of fusion parameters.
    EveryEncoderLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_p: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub classifier_layers: usize,
    pub axial_groups: usize,
    pub max_len: usize,
    pub strategy: Strategy,
    pub injection: Injection,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            d_model: 128,
            d_p: 32,
            heads: 4,
            encoder_layers: 4,
            decoder_layers: 4,
            classifier_layers: 2,
            axial_groups: 4,
            max_len: 64,
            strategy: Strategy::Pa3Full,
            injection: Injection::FinalEncoderLayer,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= UNK_ID {
            return Err(Error::config(format!(
                "vocab_size {} leaves no room past the reserved ids",
                self.vocab_size
            )));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} must be positive and divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.axial_groups == 0 || self.d_model % self.axial_groups != 0 {
            return Err(Error::config(format!(
                "d_model {} must be divisible by axial_groups {}",
                self.d_model, self.axial_groups
            )));
        }
        if self.d_p == 0 {
            return Err(Error::config("d_p must be positive".to_string()));
        }
        if self.max_len < 2 {
            return Err(Error::config("max_len must be at least 2".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::config("need at least one encoder and decoder layer"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub grad_clip: f64,
    /// Weight of the entropy bonus on the classifier's distribution during
    /// joint training. Keeps the trait mixture from saturating before the
    /// decoder learns to read the persona channel; zero disables it.
    #[serde(default = "default_entropy_weight")]
    pub entropy_weight: f64,
    /// Weight of the auxiliary reconstruction term: the persona mixture,
    /// read out through the tied embedding, must score the gold response's
    /// tokens. This is the short gradient path that teaches the classifier
    /// which definition a response belongs to; zero disables it.
    #[serde(default = "default_aux_weight")]
    pub aux_weight: f64,
}

fn default_entropy_weight() -> f64 {
    0.05
}

fn default_aux_weight() -> f64 {
    0.5
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-6,
            weight_decay: 1e-4,
            batch_size: 4,
            epochs: 10,
            seed: 13,
            grad_clip: 1.0,
            entropy_weight: 0.05,
            aux_weight: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || self.weight_decay < 0.0 || self.grad_clip <= 0.0 {
            return Err(Error::config("rates must be nonnegative, grad_clip positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

// ── model ────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
struct PersonaPipeline {
    fusion: PersonaFusion,
    /// Projects pooled d_model template encodings down to d_p.
    proj: LinearLayer,
    classifier: TraitClassifier,
}

/// How the discrete trait choice enters the persona encoding.
#[derive(Debug, Copy, Clone)]
pub enum TraitMode {
    /// Soft mixture over the five templates: the differentiable training path.
    Soft,
    /// Argmax template only (inference).
    Hard,
    /// Hard forward, soft backward.
    StraightThrough,
    /// Classifier bypassed entirely; fixed one-hot trait.
    Forced(TraitLabel),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamSet,
    embed: ParamId,
    enc_layers: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    dec_layers: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    persona: Option<PersonaPipeline>,
    positions: Tensor,
}

/// Decoded output of the two-phase pipeline.
#[derive(Debug, Clone)]
pub struct Generated {
    pub trait_label: Option<TraitLabel>,
    pub distribution: Option<TraitDistribution>,
    pub tokens: Vec<String>,
    /// Length-normalized log-probability of the emitted sequence.
    pub score: f64,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let mut config = config;
        if config.vocab_size == 0 {
            config.vocab_size = vocab.len();
        }
        if config.vocab_size != vocab.len() {
            return Err(Error::config(format!(
                "config vocab_size {} disagrees with vocabulary of {}",
                config.vocab_size,
                vocab.len()
            )));
        }
        config.validate()?;
        let mut rng = Rng::seed_from(seed);
        let mut ps = ParamSet::new();
        let d = config.d_model;

        let embed = ps.add(
            "embed.tok",
            crate::nn::xavier_uniform(&mut rng, config.vocab_size, d),
        );
        let enc_layers = (0..config.encoder_layers)
            .map(|i| EncoderLayer::new(&mut ps, &mut rng, &format!("enc.l{i}"), d, config.heads, 4 * d))
            .collect();
        let enc_norm = LayerNorm::new(&mut ps, "enc.norm", d);

        let persona = match config.strategy.fusion_strategy() {
            None => None,
            Some(fs) => {
                let fusion = PersonaFusion::new(
                    &mut ps,
                    &mut rng,
                    "pa3",
                    fs,
                    d,
                    config.d_p,
                    config.axial_groups,
                )?;
                let proj = LinearLayer::new(&mut ps, &mut rng, "persona.proj", d, config.d_p, false);
                let classifier = TraitClassifier::new(
                    &mut ps,
                    &mut rng,
                    "clf",
                    d,
                    config.heads,
                    config.classifier_layers,
                );
                Some(PersonaPipeline { fusion, proj, classifier })
            }
        };

        let dec_layers = (0..config.decoder_layers)
            .map(|i| DecoderLayer::new(&mut ps, &mut rng, &format!("dec.l{i}"), d, config.heads, 4 * d))
            .collect();
        let dec_norm = LayerNorm::new(&mut ps, "dec.norm", d);
        let positions = sinusoidal_positions(config.max_len, d);

        Ok(Model {
            config,
            vocab,
            params: ps,
            embed,
            enc_layers,
            enc_norm,
            dec_layers,
            dec_norm,
            persona,
            positions,
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.config.strategy
    }

    pub fn has_persona(&self) -> bool {
        self.persona.is_some()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Binding {
        self.params.bind(tape, trainable)
    }

    // ── token plumbing ───────────────────────────────────────────────

    /// BOS-prefixed ids, truncated from the left when over max_len.
    pub fn encode_tokens(&self, tokens: &[String]) -> Vec<usize> {
        let mut ids = self.vocab.encode(tokens);
        let budget = self.config.max_len - 1;
        if ids.len() > budget {
            log::warn!(
                "input of {} tokens truncated to the most recent {budget}",
                ids.len()
            );
            ids.drain(..ids.len() - budget);
        }
        let mut out = Vec::with_capacity(ids.len() + 1);
        out.push(BOS_ID);
        out.extend(ids);
        out
    }

    fn context_ids(&self, sample: &DialogueSample) -> Vec<usize> {
        self.encode_tokens(&sample.context_tokens())
    }

    fn classifier_ids(&self, sample: &DialogueSample) -> Result<Vec<usize>> {
        if sample.turns.is_empty() {
            return Err(Error::data("cannot classify an empty context".to_string()));
        }
        let tag = speaker_tag(&sample.target_speaker);
        if self.vocab.id(&tag) == UNK_ID {
            return Err(Error::data(format!(
                "target speaker {:?} is not in the vocabulary",
                sample.target_speaker
            )));
        }
        let mut tokens = sample.context_tokens();
        tokens.push(tag);
        Ok(self.encode_tokens(&tokens))
    }

    fn embed_ids(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        ids: &[usize],
        dropout_rng: Option<&mut Rng>,
    ) -> Result<TensorId> {
        let gathered = tape.embedding(bind.id(self.embed), ids)?;
        let n = ids.len();
        let d = self.config.d_model;
        let pos = tape.constant(vec![n, d], self.positions.data[..n * d].to_vec())?;
        let mut x = tape.add(gathered, pos)?;
        if let Some(rng) = dropout_rng {
            if self.config.dropout > 0.0 {
                x = tape.dropout(x, self.config.dropout, rng);
            }
        }
        Ok(x)
    }

    // ── encoder / persona ────────────────────────────────────────────

    /// Contextual representations H for a BOS-prefixed id sequence,
    /// without any persona fusion.
    pub fn encode_ids(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        ids: &[usize],
        dropout_rng: Option<&mut Rng>,
    ) -> Result<TensorId> {
        let mut x = self.embed_ids(tape, bind, ids, dropout_rng)?;
        for layer in &self.enc_layers {
            x = layer.forward(tape, bind, x)?;
        }
        self.enc_norm.forward(tape, bind, x)
    }

    /// Encoder stack with the fusion block wired at the configured
    /// injection point. `persona` must be aligned to the input length.
    fn encode_ids_fused(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        ids: &[usize],
        persona: Option<PersonaEncoding>,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<TensorId> {
        let Some(pipeline) = &self.persona else {
            return self.encode_ids(tape, bind, ids, dropout_rng);
        };
        let Some(p) = persona else {
            return Err(Error::config(
                "persona strategy requires a persona encoding".to_string(),
            ));
        };
        let mut x = self.embed_ids(tape, bind, ids, dropout_rng)?;
        match self.config.injection {
            Injection::FinalEncoderLayer => {
                for layer in &self.enc_layers {
                    x = layer.forward(tape, bind, x)?;
                }
                x = self.enc_norm.forward(tape, bind, x)?;
                pipeline.fusion.apply(tape, bind, x, p)
            }
            Injection::EveryEncoderLayer => {
                for layer in &self.enc_layers {
                    x = layer.forward(tape, bind, x)?;
                    x = pipeline.fusion.apply(tape, bind, x, p)?;
                }
                self.enc_norm.forward(tape, bind, x)
            }
        }
    }

    /// Pooled encodings of the five trait definitions (5×d_model), shared
    /// by the classifier similarity head and the persona mixture.
    ///
    /// Each row is the mean encoder output plus the mean raw token
    /// embedding. The embedding shortcut keeps the definition's surface
    /// vocabulary directly visible to the fusion block and, through the
    /// tied output projection, to the decoder; without it every template
    /// row is an opaque learned vector and the response loss is equally
    /// happy with any permutation of the five classes.
    pub fn pooled_templates(&self, tape: &mut Tape, bind: &Binding) -> Result<TensorId> {
        let bare = self.config.strategy.bare_templates();
        let mut rows = Vec::with_capacity(5);
        for t in ALL_TRAITS {
            let tokens = template_tokens(t, bare);
            let ids = self.encode_tokens(&tokens);
            let h = self.encode_ids(tape, bind, &ids, None)?;
            let contextual = tape.mean_rows(h)?;
            let raw = tape.embedding(bind.id(self.embed), &ids)?;
            let lexical = tape.mean_rows(raw)?;
            rows.push(tape.add(contextual, lexical)?);
        }
        Ok(tape.concat_rows(&rows)?)
    }

    /// Phase 1: the classifier's five-way distribution for the sample's
    /// target speaker (1×5 on tape).
    pub fn classify(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        sample: &DialogueSample,
        templates: TensorId,
    ) -> Result<TensorId> {
        let pipeline = self
            .persona
            .as_ref()
            .ok_or_else(|| Error::config("strategy none has no classifier".to_string()))?;
        let ids = self.classifier_ids(sample)?;
        let embedded = self.embed_ids(tape, bind, &ids, None)?;
        pipeline.classifier.distribution(tape, bind, embedded, templates)
    }

    /// Persona encoding aligned to `n` positions. Soft mode mixes all five
    /// templates by the classifier's probabilities; hard mode selects one;
    /// straight-through is hard forward with the soft gradient.
    fn persona_encoding(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        templates: TensorId,
        probs: Option<TensorId>,
        mode: TraitMode,
        n: usize,
    ) -> Result<PersonaEncoding> {
        let pipeline = self
            .persona
            .as_ref()
            .ok_or_else(|| Error::config("strategy none has no persona encoder".to_string()))?;
        let one_hot = |tape: &mut Tape, t: TraitLabel| -> Result<TensorId> {
            let mut row = vec![0.0; 5];
            row[t.index()] = 1.0;
            Ok(tape.constant(vec![1, 5], row)?)
        };
        let mix = match mode {
            TraitMode::Forced(t) => one_hot(tape, t)?,
            TraitMode::Soft => probs.ok_or_else(|| {
                Error::config("soft persona encoding needs classifier output".to_string())
            })?,
            TraitMode::Hard => {
                let p = probs.ok_or_else(|| {
                    Error::config("hard persona encoding needs classifier output".to_string())
                })?;
                let dist = distribution_from_tape(tape, p)?;
                one_hot(tape, dist.argmax())?
            }
            TraitMode::StraightThrough => {
                let p = probs.ok_or_else(|| {
                    Error::config("straight-through persona encoding needs classifier output".to_string())
                })?;
                let dist = distribution_from_tape(tape, p)?;
                let hard = one_hot(tape, dist.argmax())?;
                let gap = tape.sub(hard, p)?;
                let frozen = tape.stop_gradient(gap);
                tape.add(frozen, p)?
            }
        };
        let mixed = mix_and_broadcast(tape, mix, templates, n)?;
        let p = pipeline.proj.forward(tape, bind, mixed)?;
        Ok(PersonaEncoding { p })
    }

    /// Encoder memory for one sample: classify (unless forced), build the
    /// persona encoding, and fuse. Returns the memory and the classifier
    /// distribution when one was computed.
    pub fn memory_for_sample(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        sample: &DialogueSample,
        templates: Option<TensorId>,
        mode: TraitMode,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<(TensorId, Option<TensorId>)> {
        let (memory, probs, _) =
            self.memory_probs_mixture(tape, bind, sample, templates, mode, dropout_rng)?;
        Ok((memory, probs))
    }

    fn memory_probs_mixture(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        sample: &DialogueSample,
        templates: Option<TensorId>,
        mode: TraitMode,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<(TensorId, Option<TensorId>, Option<TensorId>)> {
        let ctx = self.context_ids(sample);
        if self.persona.is_none() {
            let h = self.encode_ids(tape, bind, &ctx, dropout_rng)?;
            return Ok((h, None, None));
        }
        let templates = templates.ok_or_else(|| {
            Error::config("persona strategies need pooled templates".to_string())
        })?;
        let probs = match mode {
            TraitMode::Forced(_) => None,
            _ => Some(self.classify(tape, bind, sample, templates)?),
        };
        // Soft-mode mixture row (1×d), reused by the auxiliary readout.
        let mixture = match (mode, probs) {
            (TraitMode::Soft, Some(p)) => Some(tape.matmul(p, templates)?),
            _ => None,
        };
        let persona = self.persona_encoding(tape, bind, templates, probs, mode, ctx.len())?;
        let h = self.encode_ids_fused(tape, bind, &ctx, Some(persona), dropout_rng)?;
        Ok((h, probs, mixture))
    }

    // ── decoder ──────────────────────────────────────────────────────

    fn decoder_states(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        prefix: &[usize],
        memory: TensorId,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<TensorId> {
        let mut x = self.embed_ids(tape, bind, prefix, dropout_rng)?;
        for layer in &self.dec_layers {
            x = layer.forward(tape, bind, x, memory)?;
        }
        self.dec_norm.forward(tape, bind, x)
    }

    /// Vocabulary logits for every decoder position; the output projection
    /// is tied to the token embedding.
    fn decoder_logits(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        prefix: &[usize],
        memory: TensorId,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<TensorId> {
        let states = self.decoder_states(tape, bind, prefix, memory, dropout_rng)?;
        let et = tape.transpose(bind.id(self.embed))?;
        Ok(tape.matmul(states, et)?)
    }

    /// Teacher-forced loss for one sample under the given trait mode.
    pub fn sample_loss(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        sample: &DialogueSample,
        templates: Option<TensorId>,
        mode: TraitMode,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<TensorId> {
        Ok(self
            .sample_loss_with_probs(tape, bind, sample, templates, mode, dropout_rng)?
            .0)
    }

    fn sample_loss_with_probs(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        sample: &DialogueSample,
        templates: Option<TensorId>,
        mode: TraitMode,
        mut dropout_rng: Option<&mut Rng>,
    ) -> Result<(TensorId, Option<TensorId>, Option<TensorId>)> {
        let (memory, probs, mixture) = self.memory_probs_mixture(
            tape,
            bind,
            sample,
            templates,
            mode,
            dropout_rng.as_deref_mut(),
        )?;
        let mut resp = self.vocab.encode(&sample.response_tokens());
        let budget = self.config.max_len - 1;
        if resp.len() > budget {
            log::warn!("response of {} tokens truncated to {budget}", resp.len());
            resp.truncate(budget);
        }
        let mut prefix = Vec::with_capacity(resp.len() + 1);
        prefix.push(BOS_ID);
        prefix.extend(&resp);
        let mut targets = resp;
        targets.push(EOS_ID);

        let logits = self.decoder_logits(tape, bind, &prefix, memory, dropout_rng)?;
        let loss = tape.cross_entropy(logits, &targets, Some(PAD_ID))?;

        // Auxiliary reconstruction: the mixture row, tiled across the
        // response positions and read out through the tied embedding, must
        // assign probability to the gold tokens. Only the matching
        // definition carries the trait-specific response words, so this
        // pulls the classifier toward the planted assignment.
        let aux = match mixture {
            Some(m) => {
                let rows = targets.len();
                let ones = tape.constant(vec![rows, 1], vec![1.0; rows])?;
                let tiled = tape.matmul(ones, m)?;
                let et = tape.transpose(bind.id(self.embed))?;
                let aux_logits = tape.matmul(tiled, et)?;
                Some(tape.cross_entropy(aux_logits, &targets, Some(PAD_ID))?)
            }
            None => None,
        };
        Ok((loss, probs, aux))
    }

    /// Mean teacher-forced loss over a batch; templates are encoded once
    /// and shared by every sample. This is the pseudo-task objective: with
    /// a persona strategy and soft mode the classifier sits inside the
    /// graph and receives gradient from the response loss alone.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        batch: &[DialogueSample],
        mode: TraitMode,
        entropy_weight: f64,
        aux_weight: f64,
        mut dropout_rng: Option<&mut Rng>,
    ) -> Result<TensorId> {
        if batch.is_empty() {
            return Err(Error::data("empty batch".to_string()));
        }
        let templates = if self.persona.is_some() {
            Some(self.pooled_templates(tape, bind)?)
        } else {
            None
        };
        let mut total: Option<TensorId> = None;
        let mut extras: Vec<(TensorId, f64)> = Vec::new();
        for sample in batch {
            let (loss, probs, aux) = self.sample_loss_with_probs(
                tape,
                bind,
                sample,
                templates,
                mode,
                dropout_rng.as_deref_mut(),
            )?;
            if let Some(p) = probs {
                if entropy_weight > 0.0 {
                    extras.push((distribution_entropy(tape, p)?, -entropy_weight));
                }
            }
            if let Some(a) = aux {
                if aux_weight > 0.0 {
                    extras.push((a, aux_weight));
                }
            }
            total = Some(match total {
                None => loss,
                Some(acc) => tape.add(acc, loss)?,
            });
        }
        let mut loss = tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64);
        for (term, weight) in extras {
            let scaled = tape.scale(term, weight / batch.len() as f64);
            loss = tape.add(loss, scaled)?;
        }
        Ok(loss)
    }

    // ── generation ───────────────────────────────────────────────────

    fn last_row_log_probs(&self, tape: &Tape, logits: TensorId) -> Vec<f64> {
        let shape = tape.shape(logits);
        let (n, v) = (shape[0], shape[1]);
        let row = &tape.data(logits)[(n - 1) * v..n * v];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
        row.iter().map(|&x| x - lse).collect()
    }

    /// Two-phase generation: predict the trait (unless forced), fuse the
    /// persona, and decode. `beam_width` 1 is exact greedy decoding.
    pub fn generate(
        &self,
        sample: &DialogueSample,
        beam_width: usize,
        force_trait: Option<TraitLabel>,
    ) -> Result<Generated> {
        if beam_width == 0 {
            return Err(Error::config("beam width must be at least 1".to_string()));
        }
        let mut tape = Tape::new();
        let bind = self.bind(&mut tape, false);
        let templates = if self.persona.is_some() {
            Some(self.pooled_templates(&mut tape, &bind)?)
        } else {
            None
        };
        let mode = match force_trait {
            Some(t) if self.persona.is_some() => TraitMode::Forced(t),
            _ => TraitMode::Hard,
        };
        let (memory, probs) =
            self.memory_for_sample(&mut tape, &bind, sample, templates, mode, None)?;
        let distribution = match probs {
            Some(p) => Some(distribution_from_tape(&tape, p)?),
            None => None,
        };
        let trait_label = match (force_trait, &distribution) {
            (Some(t), _) if self.persona.is_some() => Some(t),
            (_, Some(d)) => Some(d.argmax()),
            _ => None,
        };

        let (tokens, score) = if beam_width == 1 {
            self.greedy_on_tape(&mut tape, &bind, memory)?
        } else {
            self.beam_on_tape(&mut tape, &bind, memory, beam_width)?
        };
        Ok(Generated {
            trait_label,
            distribution,
            tokens: self.vocab.decode(&tokens),
            score,
        })
    }

    fn greedy_on_tape(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        memory: TensorId,
    ) -> Result<(Vec<usize>, f64)> {
        let mut prefix = vec![BOS_ID];
        let mut emitted = Vec::new();
        let mut log_prob = 0.0;
        while emitted.len() < self.config.max_len {
            let logits = self.decoder_logits(tape, bind, &prefix, memory, None)?;
            let lp = self.last_row_log_probs(tape, logits);
            // First strict maximum, so ties resolve to the lowest id.
            let mut best = 0usize;
            for (i, &v) in lp.iter().enumerate() {
                if v > lp[best] {
                    best = i;
                }
            }
            log_prob += lp[best];
            if best == EOS_ID {
                break;
            }
            emitted.push(best);
            prefix.push(best);
        }
        let norm = log_prob / (emitted.len() + 1) as f64;
        Ok((emitted, norm))
    }

    fn beam_on_tape(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        memory: TensorId,
        width: usize,
    ) -> Result<(Vec<usize>, f64)> {
        #[derive(Clone)]
        struct Hyp {
            tokens: Vec<usize>,
            log_prob: f64,
        }
        // EOS counts toward the normalized length, matching greedy scoring.
        let norm_score = |h: &Hyp| h.log_prob / (h.tokens.len() + 1) as f64;

        let mut live = vec![Hyp { tokens: Vec::new(), log_prob: 0.0 }];
        let mut done: Vec<Hyp> = Vec::new();

        for _ in 0..self.config.max_len {
            let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
            for (hyp_idx, hyp) in live.iter().enumerate() {
                let mut prefix = Vec::with_capacity(hyp.tokens.len() + 1);
                prefix.push(BOS_ID);
                prefix.extend(&hyp.tokens);
                let logits = self.decoder_logits(tape, bind, &prefix, memory, None)?;
                let lp = self.last_row_log_probs(tape, logits);
                for (token, &p) in lp.iter().enumerate() {
                    candidates.push((hyp_idx, token, hyp.log_prob + p));
                }
            }
            // Deterministic order: score desc, then token id asc.
            candidates.sort_by(|a, b| {
                b.2.partial_cmp(&a.2)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.1.cmp(&b.1))
            });
            // Finished hypotheses occupy beam slots; with width 1 this
            // makes EOS terminate exactly like greedy decoding.
            let mut next: Vec<Hyp> = Vec::with_capacity(width);
            let mut taken = 0usize;
            for (hyp_idx, token, log_prob) in candidates {
                if taken >= width {
                    break;
                }
                taken += 1;
                let mut tokens = live[hyp_idx].tokens.clone();
                if token == EOS_ID {
                    done.push(Hyp { tokens, log_prob });
                } else {
                    tokens.push(token);
                    next.push(Hyp { tokens, log_prob });
                }
            }
            live = next;
            if live.is_empty() {
                break;
            }
        }
        done.extend(live);
        let best = done
            .into_iter()
            .map(|h| (norm_score(&h), h))
            .max_by(|a, b| {
                a.0.partial_cmp(&b.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(b.1.tokens.cmp(&a.1.tokens))
            })
            .ok_or_else(|| Error::numeric("beam search produced no hypotheses"))?;
        Ok((best.1.tokens, best.0))
    }

    /// Length-normalized log-probability of a given response, for
    /// comparing decode strategies.
    pub fn score_response(&self, sample: &DialogueSample, tokens: &[String]) -> Result<f64> {
        let mut tape = Tape::new();
        let bind = self.bind(&mut tape, false);
        let templates = if self.persona.is_some() {
            Some(self.pooled_templates(&mut tape, &bind)?)
        } else {
            None
        };
        let (memory, _) =
            self.memory_for_sample(&mut tape, &bind, sample, templates, TraitMode::Hard, None)?;
        let ids = self.vocab.encode(tokens);
        let mut prefix = vec![BOS_ID];
        prefix.extend(&ids);
        let mut targets = ids.clone();
        targets.push(EOS_ID);
        let logits = self.decoder_logits(&mut tape, &bind, &prefix, memory, None)?;
        let shape = tape.shape(logits).to_vec();
        let data = tape.data(logits);
        let mut log_prob = 0.0;
        for (row, &t) in targets.iter().enumerate() {
            let r = &data[row * shape[1]..(row + 1) * shape[1]];
            let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = r.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            log_prob += r[t] - lse;
        }
        Ok(log_prob / targets.len() as f64)
    }
}

// ── training loop ────────────────────────────────────────────────────

/// One line of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub elapsed_secs: f64,
}

pub struct Trainer {
    pub optimizer: AdamW,
    pub train_config: TrainConfig,
    shuffle_rng: Rng,
    dropout_rng: Rng,
    step: usize,
    started: std::time::Instant,
    pub records: Vec<TrainRecord>,
}

impl Trainer {
    pub fn new(model: &Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut seed_rng = Rng::seed_from(cfg.seed);
        Ok(Trainer {
            optimizer: AdamW::new(cfg.learning_rate, cfg.weight_decay, model.params.len()),
            train_config: cfg,
            shuffle_rng: seed_rng.split(),
            dropout_rng: seed_rng.split(),
            step: 0,
            started: std::time::Instant::now(),
            records: Vec::new(),
        })
    }

    /// One epoch of teacher-forced training with gradient clipping.
    /// Returns the mean loss. Aborts with a numeric error naming the batch
    /// when the loss stops being finite.
    pub fn train_epoch(
        &mut self,
        model: &mut Model,
        samples: &[DialogueSample],
        mode: TraitMode,
        epoch: usize,
    ) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::data("cannot train on an empty corpus".to_string()));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        self.shuffle_rng.shuffle(&mut order);

        let mut total = 0.0;
        let mut seen = 0usize;
        for (batch_idx, chunk) in order.chunks(self.train_config.batch_size).enumerate() {
            let batch: Vec<DialogueSample> =
                chunk.iter().map(|&i| samples[i].clone()).collect();
            let mut tape = Tape::new();
            let bind = model.bind(&mut tape, true);
            let dropout = if model.config.dropout > 0.0 {
                Some(&mut self.dropout_rng)
            } else {
                None
            };
            let loss = model.batch_loss(
                &mut tape,
                &bind,
                &batch,
                mode,
                self.train_config.entropy_weight,
                self.train_config.aux_weight,
                dropout,
            )?;
            let loss_val = tape.data(loss)[0];
            if !loss_val.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss {loss_val} in epoch {epoch} batch {batch_idx} (samples {chunk:?})"
                )));
            }
            tape.backward(loss)?;
            let mut grads = bind.gradients(&tape);
            clip_global_norm(&mut grads, self.train_config.grad_clip);
            self.optimizer.step(&mut model.params, &grads);

            self.step += 1;
            total += loss_val * batch.len() as f64;
            seen += batch.len();
            self.records.push(TrainRecord {
                epoch,
                step: self.step,
                loss: loss_val,
                lr: self.train_config.learning_rate,
                elapsed_secs: self.started.elapsed().as_secs_f64(),
            });
        }
        if !model.params.all_finite() {
            return Err(Error::numeric(format!(
                "parameters became non-finite after epoch {epoch}"
            )));
        }
        Ok(total / seen as f64)
    }
}

// ── trait identification report ──────────────────────────────────────

/// Per-speaker trait assignment counts plus accuracy against hidden
/// traits when the corpus carries them. `per_speaker` counts argmax
/// assignments; `mean_probs` averages the soft distributions, which stays
/// informative for an untrained model whose argmax is degenerate.
#[derive(Debug, Clone, Serialize)]
pub struct TraitReport {
    pub per_speaker: BTreeMap<String, [usize; 5]>,
    pub mean_probs: BTreeMap<String, [f64; 5]>,
    pub n_samples: usize,
    pub n_correct: Option<usize>,
}

impl TraitReport {
    pub fn accuracy(&self) -> Option<f64> {
        self.n_correct.map(|c| c as f64 / self.n_samples as f64)
    }

    /// Table-shaped rendering: one row per speaker, percentage per trait.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<12}", "speaker"));
        for t in ALL_TRAITS {
            out.push_str(&format!(" {:>6}", t.tag()));
        }
        out.push_str("      n\n");
        for (speaker, counts) in &self.per_speaker {
            let row_total: usize = counts.iter().sum();
            out.push_str(&format!("{speaker:<12}"));
            for c in counts {
                let pct = if row_total == 0 {
                    0.0
                } else {
                    100.0 * *c as f64 / row_total as f64
                };
                out.push_str(&format!(" {pct:>5.1}%"));
            }
            out.push_str(&format!(" {row_total:>6}\n"));
        }
        if let Some(acc) = self.accuracy() {
            out.push_str(&format!("argmax accuracy vs hidden traits: {:.1}%\n", 100.0 * acc));
        }
        out
    }
}

/// Classify every sample's target speaker and tabulate assignments per
/// speaker. Hidden traits are consulted only to report accuracy.
pub fn identify_traits(model: &Model, samples: &[DialogueSample]) -> Result<TraitReport> {
    if !model.has_persona() {
        return Err(Error::config(
            "strategy none has no classifier to run identification with".to_string(),
        ));
    }
    let mut per_speaker: BTreeMap<String, [usize; 5]> = BTreeMap::new();
    let mut prob_sums: BTreeMap<String, ([f64; 5], usize)> = BTreeMap::new();
    let mut n_correct = 0usize;
    let mut any_hidden = false;
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, false);
    let templates = model.pooled_templates(&mut tape, &bind)?;
    for sample in samples {
        let probs = model.classify(&mut tape, &bind, sample, templates)?;
        let dist = distribution_from_tape(&tape, probs)?;
        let predicted = dist.argmax();
        per_speaker.entry(sample.target_speaker.clone()).or_insert([0; 5])
            [predicted.index()] += 1;
        let entry = prob_sums
            .entry(sample.target_speaker.clone())
            .or_insert(([0.0; 5], 0));
        for (acc, p) in entry.0.iter_mut().zip(dist.probs) {
            *acc += p;
        }
        entry.1 += 1;
        if let Some(hidden) = sample.hidden_trait {
            any_hidden = true;
            if hidden == predicted {
                n_correct += 1;
            }
        }
    }
    let mean_probs = prob_sums
        .into_iter()
        .map(|(s, (sums, n))| {
            let mut mean = sums;
            for m in &mut mean {
                *m /= n as f64;
            }
            (s, mean)
        })
        .collect();
    Ok(TraitReport {
        per_speaker,
        mean_probs,
        n_samples: samples.len(),
        n_correct: any_hidden.then_some(n_correct),
    })
}

// ── checkpoints ──────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ModelConfig,
    tensors: BTreeMap<String, String>,
}

/// Write the model as a directory: `manifest.json` (config + tensor map),
/// `vocab.json`, and one flat binary file per parameter.
pub fn save_checkpoint(dir: &Path, model: &Model) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut tensors = BTreeMap::new();
    for (_, param) in model.params.iter() {
        let file = format!("{}.pa3t", param.name);
        tensor_io::save(&dir.join(&file), &param.value)?;
        tensors.insert(param.name.clone(), file);
    }
    let manifest = Manifest {
        format: "pa3-checkpoint-v1".to_string(),
        config: model.config.clone(),
        tensors,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    std::fs::write(dir.join("vocab.json"), serde_json::to_string(&model.vocab)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).map_err(
            |e| Error::data(format!("missing checkpoint at {}: {e}", dir.display())),
        )?)?;
    if manifest.format != "pa3-checkpoint-v1" {
        return Err(Error::data(format!(
            "unsupported checkpoint format {:?}",
            manifest.format
        )));
    }
    let mut vocab: Vocabulary =
        serde_json::from_str(&std::fs::read_to_string(dir.join("vocab.json"))?)?;
    vocab.reindex();
    let mut model = Model::new(manifest.config, vocab, 0)?;
    let mut values = BTreeMap::new();
    for (name, file) in &manifest.tensors {
        values.insert(name.clone(), tensor_io::load(&dir.join(file))?);
    }
    model.params.load_values(&values)?;
    Ok(model)
}

/// SHA-256 over the manifest, vocabulary, and every tensor file in sorted
/// order; identical training runs produce identical hashes.
pub fn checkpoint_hash(dir: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .map(|e| Ok(e?.file_name().to_string_lossy().into_owned()))
        .collect::<Result<Vec<_>>>()?;
    names.sort();
    let mut hasher = Sha256::new();
    for name in names {
        hasher.update(name.as_bytes());
        hasher.update(std::fs::read(dir.join(&name))?);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

#[cfg(test)]
mod tests;
