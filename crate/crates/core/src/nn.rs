//! Transformer building blocks shared by the generator, the trait
//! classifier, and the fusion block: named parameters, linear layers,
//! sinusoidal positions, scaled dot-product and multi-head attention,
//! feed-forward and layer-norm wrappers.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, TensorId};

// ── parameter registry ───────────────────────────────────────────────

/// Index of a named parameter inside a [`ParamSet`].
#[derive(Debug, Copy, Clone, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered, name-addressable collection of model parameters.
///
/// Parameter order is creation order and therefore deterministic for a
/// fixed construction path, which keeps optimizer state and checkpoint
/// bytes reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    by_name: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id.0);
        self.params.push(Param { name, value });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Load values by name, e.g. from a checkpoint. Every parameter must be
    /// present with a matching shape.
    pub fn load_values(&mut self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for p in &mut self.params {
            let v = values
                .get(&p.name)
                .ok_or_else(|| Error::data(format!("checkpoint missing parameter {}", p.name)))?;
            if v.shape != p.value.shape {
                return Err(Error::data(format!(
                    "checkpoint parameter {} has shape {:?}, expected {:?}",
                    p.name, v.shape, p.value.shape
                )));
            }
            p.value.data = v.data.clone();
        }
        Ok(())
    }

    /// Register every parameter on a fresh tape for one forward/backward pass.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Binding {
        let ids = self
            .params
            .iter()
            .map(|p| {
                let mut t = p.value.clone();
                t.requires_grad = trainable;
                tape.leaf(t)
            })
            .collect();
        Binding { ids }
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.value.data.iter().all(|v| v.is_finite()))
    }
}

/// Per-pass tape handles for a [`ParamSet`], in parameter order.
#[derive(Debug, Clone)]
pub struct Binding {
    ids: Vec<TensorId>,
}

impl Binding {
    pub fn id(&self, p: ParamId) -> TensorId {
        self.ids[p.0]
    }

    /// Collect accumulated gradients after a backward pass, in parameter order.
    pub fn gradients(&self, tape: &Tape) -> Vec<Option<Vec<f64>>> {
        self.ids
            .iter()
            .map(|&id| tape.grad(id).map(|g| g.to_vec()))
            .collect()
    }
}

// ── initialization ───────────────────────────────────────────────────

/// Xavier/Glorot uniform init for a d_in×d_out projection.
pub fn xavier_uniform(rng: &mut Rng, d_in: usize, d_out: usize) -> Tensor {
    let limit = (6.0 / (d_in + d_out) as f64).sqrt();
    let data = (0..d_in * d_out).map(|_| rng.range(-limit, limit)).collect();
    Tensor::new(vec![d_in, d_out], data).expect("shape matches data")
}

// ── layers ───────────────────────────────────────────────────────────

/// Affine map x·W (+ b). Weight is d_in×d_out; bias, when present, 1×d_out.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearLayer {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let weight = ps.add(format!("{name}.w"), xavier_uniform(rng, d_in, d_out));
        let bias = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros(vec![1, d_out])));
        LinearLayer { weight, bias, d_in, d_out }
    }

    /// Linear layer whose weight starts at an explicit value.
    pub fn with_weight(ps: &mut ParamSet, name: &str, weight: Tensor, bias: bool) -> Self {
        let (d_in, d_out) = (weight.shape[0], weight.shape[1]);
        let weight = ps.add(format!("{name}.w"), weight);
        let bias = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros(vec![1, d_out])));
        LinearLayer { weight, bias, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: TensorId) -> Result<TensorId> {
        let mut out = tape.matmul(x, bind.id(self.weight))?;
        if let Some(b) = self.bias {
            out = tape.add(out, bind.id(b))?;
        }
        Ok(out)
    }
}

/// Learned gain/shift around the tape's row-wise layer normalization.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), Tensor::full(vec![d], 1.0));
        let beta = ps.add(format!("{name}.beta"), Tensor::zeros(vec![d]));
        LayerNorm { gamma, beta, eps: 1e-5 }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: TensorId) -> Result<TensorId> {
        Ok(tape.layer_norm(x, bind.id(self.gamma), bind.id(self.beta), self.eps)?)
    }
}

/// Two-layer position-wise feed-forward block with ReLU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub lift: LinearLayer,
    pub lower: LinearLayer,
}

impl FeedForward {
    pub fn new(ps: &mut ParamSet, rng: &mut Rng, name: &str, d: usize, d_ff: usize) -> Self {
        FeedForward {
            lift: LinearLayer::new(ps, rng, &format!("{name}.lift"), d, d_ff, true),
            lower: LinearLayer::new(ps, rng, &format!("{name}.lower"), d_ff, d, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: TensorId) -> Result<TensorId> {
        let h = self.lift.forward(tape, bind, x)?;
        let h = tape.relu(h);
        self.lower.forward(tape, bind, h)
    }
}

// ── attention ────────────────────────────────────────────────────────

/// Pre-softmax additive penalty for masked positions. Finite rather than
/// -inf so a fully masked row degrades to uniform instead of NaN.
pub const MASK_PENALTY: f64 = -1e9;

/// Query/key/value triple plus an optional boolean mask (true = blocked),
/// flattened row-major with one entry per (query row, key row) pair.
#[derive(Debug, Clone)]
pub struct AttentionState {
    pub q: TensorId,
    pub k: TensorId,
    pub v: TensorId,
    pub mask: Option<Vec<bool>>,
}

/// Project an encoder representation into query/key/value vectors.
pub fn project_qkv(
    tape: &mut Tape,
    bind: &Binding,
    h: TensorId,
    wq: &LinearLayer,
    wk: &LinearLayer,
    wv: &LinearLayer,
) -> Result<AttentionState> {
    Ok(AttentionState {
        q: wq.forward(tape, bind, h)?,
        k: wk.forward(tape, bind, h)?,
        v: wv.forward(tape, bind, h)?,
        mask: None,
    })
}

/// softmax(Q·Kᵀ/√d + mask penalty)·V.
pub fn scaled_dot_attention(tape: &mut Tape, state: &AttentionState) -> Result<TensorId> {
    let d = tape.shape(state.q)[1];
    let n_q = tape.shape(state.q)[0];
    let n_k = tape.shape(state.k)[0];
    let kt = tape.transpose(state.k)?;
    let scores = tape.matmul(state.q, kt)?;
    let mut scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    if let Some(mask) = &state.mask {
        if mask.len() != n_q * n_k {
            return Err(Error::config(format!(
                "attention mask has {} entries, expected {}x{}",
                mask.len(),
                n_q,
                n_k
            )));
        }
        let penalty: Vec<f64> = mask
            .iter()
            .map(|&blocked| if blocked { MASK_PENALTY } else { 0.0 })
            .collect();
        let p = tape.constant(vec![n_q, n_k], penalty)?;
        scores = tape.add(scores, p)?;
    }
    let weights = tape.softmax_rows(scores)?;
    Ok(tape.matmul(weights, state.v)?)
}

/// Split columns into `heads` slices, attend independently, concatenate,
/// and apply the output projection.
pub fn multi_head(
    tape: &mut Tape,
    bind: &Binding,
    state: &AttentionState,
    heads: usize,
    out_proj: &LinearLayer,
) -> Result<TensorId> {
    let d = tape.shape(state.q)[1];
    if d % heads != 0 {
        return Err(Error::config(format!(
            "model width {d} is not divisible by {heads} heads"
        )));
    }
    let slice_cols = |tape: &mut Tape, x: TensorId, heads: usize| -> Result<Vec<TensorId>> {
        // n×d → h slices of n×(d/h) via reshape/permute.
        let n = tape.shape(x)[0];
        let dh = d / heads;
        let cube = tape.reshape(x, vec![n, heads, dh])?;
        let swapped = tape.permute3(cube, [1, 0, 2])?;
        let flat = tape.reshape(swapped, vec![heads * n, dh])?;
        (0..heads).map(|i| Ok(tape.slice_rows(flat, i * n, n)?)).collect()
    };
    let qs = slice_cols(tape, state.q, heads)?;
    let ks = slice_cols(tape, state.k, heads)?;
    let vs = slice_cols(tape, state.v, heads)?;

    let mut outputs = Vec::with_capacity(heads);
    for i in 0..heads {
        let head_state = AttentionState {
            q: qs[i],
            k: ks[i],
            v: vs[i],
            mask: state.mask.clone(),
        };
        outputs.push(scaled_dot_attention(tape, &head_state)?);
    }
    let n = tape.shape(state.q)[0];
    let dh = d / heads;
    let stacked = tape.concat_rows(&outputs)?;
    let cube = tape.reshape(stacked, vec![heads, n, dh])?;
    let swapped = tape.permute3(cube, [1, 0, 2])?;
    let merged = tape.reshape(swapped, vec![n, d])?;
    out_proj.forward(tape, bind, merged)
}

/// Causal mask: position i may attend to positions ≤ i.
pub fn causal_mask(n: usize) -> Vec<bool> {
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            mask[i * n + j] = true;
        }
    }
    mask
}

// ── transformer layers ───────────────────────────────────────────────

/// Pre-norm encoder layer: self-attention and feed-forward sublayers, each
/// wrapped in residual connections.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub wq: LinearLayer,
    pub wk: LinearLayer,
    pub wv: LinearLayer,
    pub wo: LinearLayer,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
    pub heads: usize,
}

impl EncoderLayer {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut Rng,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
    ) -> Self {
        EncoderLayer {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d),
            wq: LinearLayer::new(ps, rng, &format!("{name}.attn.wq"), d, d, false),
            wk: LinearLayer::new(ps, rng, &format!("{name}.attn.wk"), d, d, false),
            wv: LinearLayer::new(ps, rng, &format!("{name}.attn.wv"), d, d, false),
            wo: LinearLayer::new(ps, rng, &format!("{name}.attn.wo"), d, d, true),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d),
            ffn: FeedForward::new(ps, rng, &format!("{name}.ffn"), d, d_ff),
            heads,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: TensorId) -> Result<TensorId> {
        let normed = self.ln1.forward(tape, bind, x)?;
        let mut state = project_qkv(tape, bind, normed, &self.wq, &self.wk, &self.wv)?;
        state.mask = None;
        let attended = multi_head(tape, bind, &state, self.heads, &self.wo)?;
        let x = tape.add(x, attended)?;

        let normed = self.ln2.forward(tape, bind, x)?;
        let lifted = self.ffn.forward(tape, bind, normed)?;
        Ok(tape.add(x, lifted)?)
    }
}

/// Pre-norm decoder layer: causal self-attention, cross-attention over the
/// encoder memory, then feed-forward, all residual.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_wq: LinearLayer,
    pub self_wk: LinearLayer,
    pub self_wv: LinearLayer,
    pub self_wo: LinearLayer,
    pub ln2: LayerNorm,
    pub cross_wq: LinearLayer,
    pub cross_wk: LinearLayer,
    pub cross_wv: LinearLayer,
    pub cross_wo: LinearLayer,
    pub ln3: LayerNorm,
    pub ffn: FeedForward,
    pub heads: usize,
}

impl DecoderLayer {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut Rng,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
    ) -> Self {
        DecoderLayer {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d),
            self_wq: LinearLayer::new(ps, rng, &format!("{name}.self.wq"), d, d, false),
            self_wk: LinearLayer::new(ps, rng, &format!("{name}.self.wk"), d, d, false),
            self_wv: LinearLayer::new(ps, rng, &format!("{name}.self.wv"), d, d, false),
            self_wo: LinearLayer::new(ps, rng, &format!("{name}.self.wo"), d, d, true),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d),
            cross_wq: LinearLayer::new(ps, rng, &format!("{name}.cross.wq"), d, d, false),
            cross_wk: LinearLayer::new(ps, rng, &format!("{name}.cross.wk"), d, d, false),
            cross_wv: LinearLayer::new(ps, rng, &format!("{name}.cross.wv"), d, d, false),
            cross_wo: LinearLayer::new(ps, rng, &format!("{name}.cross.wo"), d, d, true),
            ln3: LayerNorm::new(ps, &format!("{name}.ln3"), d),
            ffn: FeedForward::new(ps, rng, &format!("{name}.ffn"), d, d_ff),
            heads,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: TensorId,
        memory: TensorId,
    ) -> Result<TensorId> {
        let n = tape.shape(x)[0];
        let normed = self.ln1.forward(tape, bind, x)?;
        let mut state =
            project_qkv(tape, bind, normed, &self.self_wq, &self.self_wk, &self.self_wv)?;
        state.mask = Some(causal_mask(n));
        let attended = multi_head(tape, bind, &state, self.heads, &self.self_wo)?;
        let x = tape.add(x, attended)?;

        let normed = self.ln2.forward(tape, bind, x)?;
        let state = AttentionState {
            q: self.cross_wq.forward(tape, bind, normed)?,
            k: self.cross_wk.forward(tape, bind, memory)?,
            v: self.cross_wv.forward(tape, bind, memory)?,
            mask: None,
        };
        let attended = multi_head(tape, bind, &state, self.heads, &self.cross_wo)?;
        let x = tape.add(x, attended)?;

        let normed = self.ln3.forward(tape, bind, x)?;
        let lifted = self.ffn.forward(tape, bind, normed)?;
        Ok(tape.add(x, lifted)?)
    }
}

// ── positions ────────────────────────────────────────────────────────

/// Sinusoidal positional encodings, shape n×d.
pub fn sinusoidal_positions(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![n, d], data).expect("shape matches data")
}

// ── optimizer ────────────────────────────────────────────────────────

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, n_params: usize) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: vec![Vec::new(); n_params],
            v: vec![Vec::new(); n_params],
        }
    }

    /// Apply one update. `grads` is parallel to the parameter order; `None`
    /// entries are skipped entirely (no decay, no moment update).
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Vec<f64>>]) {
        assert_eq!(grads.len(), params.len(), "gradient/parameter count mismatch");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let p = &mut params.params[i];
            if self.m[i].is_empty() {
                self.m[i] = vec![0.0; g.len()];
                self.v[i] = vec![0.0; g.len()];
            }
            for j in 0..g.len() {
                self.m[i][j] = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * g[j];
                self.v[i][j] = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = self.m[i][j] / bc1;
                let v_hat = self.v[i][j] / bc2;
                let w = &mut p.value.data[j];
                *w -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        for &v in g {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests;
