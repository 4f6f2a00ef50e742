//! Persona fusion: λ-gated blending of dialogue keys/values with
//! persona-derived projections, followed by two axial attention layers.
//!
//! The gate computes λ_k = σ(K·W_k1 + (P·U_k)·W_k2) per position and blends
//! K̂ = (1−λ_k)⊙K + λ_k⊙(P·U_k), likewise for values. The fused triple is
//! reshaped into an n×g×(d/g) grid; attention runs first along the sequence
//! axis, then (with fresh projections) along the group axis, with the other
//! axis treated as batch. The block output is residual-added and normalized.
//!
//! The simpler fusion strategies used for ablation comparisons live here
//! too: mean-pooled concatenation, plain cross-attention, and the gated
//! blend without the axial layers.

use crate::error::{Error, Result};
use crate::nn::{
    scaled_dot_attention, AttentionState, Binding, LayerNorm, LinearLayer, ParamId, ParamSet,
};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, TensorId};

/// Learned fusion matrices: persona projections U_k, U_v (d_p×d) and the
/// four gate columns W_k1, W_k2, W_v1, W_v2 (d×1).
#[derive(Debug, Clone)]
pub struct FusionParameters {
    pub u_k: ParamId,
    pub u_v: ParamId,
    pub w_k1: ParamId,
    pub w_k2: ParamId,
    pub w_v1: ParamId,
    pub w_v2: ParamId,
}

impl FusionParameters {
    /// Gate columns start at zero so the initial blend is an unbiased
    /// λ = σ(0) = 0.5; persona projections are Xavier-initialized.
    pub fn new(ps: &mut ParamSet, rng: &mut Rng, prefix: &str, d: usize, d_p: usize) -> Self {
        FusionParameters {
            u_k: ps.add(format!("{prefix}.u_k"), crate::nn::xavier_uniform(rng, d_p, d)),
            u_v: ps.add(format!("{prefix}.u_v"), crate::nn::xavier_uniform(rng, d_p, d)),
            w_k1: ps.add(format!("{prefix}.w_k1"), Tensor::zeros(vec![d, 1])),
            w_k2: ps.add(format!("{prefix}.w_k2"), Tensor::zeros(vec![d, 1])),
            w_v1: ps.add(format!("{prefix}.w_v1"), Tensor::zeros(vec![d, 1])),
            w_v2: ps.add(format!("{prefix}.w_v2"), Tensor::zeros(vec![d, 1])),
        }
    }
}

/// Per-position persona representation, one row per dialogue position.
#[derive(Debug, Copy, Clone)]
pub struct PersonaEncoding {
    pub p: TensorId,
}

/// Per-position mixing gates, each n×1 and strictly inside (0, 1).
#[derive(Debug, Copy, Clone)]
pub struct GateValues {
    pub lambda_k: TensorId,
    pub lambda_v: TensorId,
}

/// λ_k = σ(K·W_k1 + (P·U_k)·W_k2), λ_v analogously.
pub fn compute_gates(
    tape: &mut Tape,
    bind: &Binding,
    k: TensorId,
    v: TensorId,
    persona: PersonaEncoding,
    params: &FusionParameters,
) -> Result<GateValues> {
    let pk = tape.matmul(persona.p, bind.id(params.u_k))?;
    let pv = tape.matmul(persona.p, bind.id(params.u_v))?;
    let gate = |tape: &mut Tape, x, w1, px, w2| -> Result<TensorId> {
        let a = tape.matmul(x, w1)?;
        let b = tape.matmul(px, w2)?;
        let s = tape.add(a, b)?;
        Ok(tape.sigmoid(s))
    };
    Ok(GateValues {
        lambda_k: gate(tape, k, bind.id(params.w_k1), pk, bind.id(params.w_k2))?,
        lambda_v: gate(tape, v, bind.id(params.w_v1), pv, bind.id(params.w_v2))?,
    })
}

/// K̂ = (1−λ)⊙K + λ⊙(P·U) with λ broadcast across the feature columns.
/// Exposed separately so tests can force gate values.
pub fn blend_with_gates(
    tape: &mut Tape,
    x: TensorId,
    persona_proj: TensorId,
    lambda: TensorId,
) -> Result<TensorId> {
    let n = tape.shape(lambda)[0];
    let ones = tape.constant(vec![n, 1], vec![1.0; n])?;
    let keep = tape.sub(ones, lambda)?;
    let kept = tape.mul(keep, x)?;
    let injected = tape.mul(lambda, persona_proj)?;
    Ok(tape.add(kept, injected)?)
}

/// Personality-influenced key and value vectors (K̂, V̂).
pub fn fuse_key_value(
    tape: &mut Tape,
    bind: &Binding,
    k: TensorId,
    v: TensorId,
    persona: PersonaEncoding,
    params: &FusionParameters,
) -> Result<(TensorId, TensorId)> {
    let gates = compute_gates(tape, bind, k, v, persona, params)?;
    let pk = tape.matmul(persona.p, bind.id(params.u_k))?;
    let pv = tape.matmul(persona.p, bind.id(params.u_v))?;
    let khat = blend_with_gates(tape, k, pk, gates.lambda_k)?;
    let vhat = blend_with_gates(tape, v, pv, gates.lambda_v)?;
    Ok((khat, vhat))
}

/// Which axis of an n×g×c grid attention mixes over; the other non-channel
/// axis is treated as batch.
#[derive(Debug, Copy, Clone, PartialEq, Eq)]
pub enum AxialAxis {
    Sequence,
    Group,
}

/// Attention along one axis of an n×g×c grid with distinct query/key/value
/// grids: transpose the attended axis next to the channels, run standard
/// attention per batch slice, and revert the transpose.
pub fn axial_attention_qkv(
    tape: &mut Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    axis: AxialAxis,
) -> Result<TensorId> {
    let shape = tape.shape(q).to_vec();
    if shape.len() != 3 {
        return Err(Error::config(format!(
            "axial attention expects an n\u{d7}g\u{d7}c grid, got {shape:?}"
        )));
    }
    for other in [k, v] {
        if tape.shape(other) != shape {
            return Err(Error::config(format!(
                "axial attention grids disagree: {:?} vs {:?}",
                shape,
                tape.shape(other)
            )));
        }
    }
    let (n, g, c) = (shape[0], shape[1], shape[2]);
    let (batch, attend) = match axis {
        AxialAxis::Sequence => (g, n),
        AxialAxis::Group => (n, g),
    };
    let to_slices = |tape: &mut Tape, x: TensorId| -> Result<TensorId> {
        let flat = match axis {
            AxialAxis::Sequence => {
                let swapped = tape.permute3(x, [1, 0, 2])?;
                tape.reshape(swapped, vec![batch * attend, c])?
            }
            AxialAxis::Group => tape.reshape(x, vec![batch * attend, c])?,
        };
        Ok(flat)
    };
    let qf = to_slices(tape, q)?;
    let kf = to_slices(tape, k)?;
    let vf = to_slices(tape, v)?;

    let mut outs = Vec::with_capacity(batch);
    for b in 0..batch {
        let state = AttentionState {
            q: tape.slice_rows(qf, b * attend, attend)?,
            k: tape.slice_rows(kf, b * attend, attend)?,
            v: tape.slice_rows(vf, b * attend, attend)?,
            mask: None,
        };
        outs.push(scaled_dot_attention(tape, &state)?);
    }
    let stacked = tape.concat_rows(&outs)?;
    match axis {
        AxialAxis::Sequence => {
            let cube = tape.reshape(stacked, vec![batch, attend, c])?;
            Ok(tape.permute3(cube, [1, 0, 2])?)
        }
        AxialAxis::Group => Ok(tape.reshape(stacked, vec![batch, attend, c])?),
    }
}

/// Self-attention variant: query, key, and value all come from `x`.
pub fn axial_attention(tape: &mut Tape, x: TensorId, axis: AxialAxis) -> Result<TensorId> {
    axial_attention_qkv(tape, x, x, x, axis)
}

/// The full fusion block: QKV projection, gated persona blend, axial
/// attention over the sequence axis with (Q, K̂, V̂), a projected
/// self-attention over the group axis, then residual + layer norm.
#[derive(Debug, Clone)]
pub struct Pa3Block {
    pub wq: LinearLayer,
    pub wk: LinearLayer,
    pub wv: LinearLayer,
    pub fusion: FusionParameters,
    pub wq2: LinearLayer,
    pub wk2: LinearLayer,
    pub wv2: LinearLayer,
    pub norm: LayerNorm,
    pub d: usize,
    pub groups: usize,
}

impl Pa3Block {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut Rng,
        prefix: &str,
        d: usize,
        d_p: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || d % groups != 0 {
            return Err(Error::config(format!(
                "model width {d} is not divisible by {groups} axial groups"
            )));
        }
        let c = d / groups;
        Ok(Pa3Block {
            wq: LinearLayer::new(ps, rng, &format!("{prefix}.wq"), d, d, false),
            wk: LinearLayer::new(ps, rng, &format!("{prefix}.wk"), d, d, false),
            wv: LinearLayer::new(ps, rng, &format!("{prefix}.wv"), d, d, false),
            fusion: FusionParameters::new(ps, rng, &format!("{prefix}.gate"), d, d_p),
            wq2: LinearLayer::new(ps, rng, &format!("{prefix}.ax2.wq"), c, c, false),
            wk2: LinearLayer::new(ps, rng, &format!("{prefix}.ax2.wk"), c, c, false),
            wv2: LinearLayer::new(ps, rng, &format!("{prefix}.ax2.wv"), c, c, false),
            norm: LayerNorm::new(ps, &format!("{prefix}.norm"), d),
            d,
            groups,
        })
    }

    fn axial_stack(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        n: usize,
    ) -> Result<TensorId> {
        let (g, c) = (self.groups, self.d / self.groups);
        let qg = tape.reshape(q, vec![n, g, c])?;
        let kg = tape.reshape(k, vec![n, g, c])?;
        let vg = tape.reshape(v, vec![n, g, c])?;
        let y = axial_attention_qkv(tape, qg, kg, vg, AxialAxis::Sequence)?;

        let flat = tape.reshape(y, vec![n * g, c])?;
        let q2 = self.wq2.forward(tape, bind, flat)?;
        let k2 = self.wk2.forward(tape, bind, flat)?;
        let v2 = self.wv2.forward(tape, bind, flat)?;
        let q2g = tape.reshape(q2, vec![n, g, c])?;
        let k2g = tape.reshape(k2, vec![n, g, c])?;
        let v2g = tape.reshape(v2, vec![n, g, c])?;
        let z = axial_attention_qkv(tape, q2g, k2g, v2g, AxialAxis::Group)?;
        Ok(tape.reshape(z, vec![n, self.d])?)
    }

    /// Block body before the residual add and normalization.
    pub fn forward_core(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        h: TensorId,
        persona: PersonaEncoding,
    ) -> Result<TensorId> {
        let n = tape.shape(h)[0];
        let q = self.wq.forward(tape, bind, h)?;
        let k = self.wk.forward(tape, bind, h)?;
        let v = self.wv.forward(tape, bind, h)?;
        let (khat, vhat) = fuse_key_value(tape, bind, k, v, persona, &self.fusion)?;
        self.axial_stack(tape, bind, q, khat, vhat, n)
    }

    /// Personality-infused representation Ĥ = LN(H + core(H, P)).
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        h: TensorId,
        persona: PersonaEncoding,
    ) -> Result<TensorId> {
        let core = self.forward_core(tape, bind, h, persona)?;
        let sum = tape.add(h, core)?;
        self.norm.forward(tape, bind, sum)
    }

    /// Control path with the persona blend skipped (K̂ = K, V̂ = V).
    pub fn forward_unfused(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        h: TensorId,
    ) -> Result<TensorId> {
        let n = tape.shape(h)[0];
        let q = self.wq.forward(tape, bind, h)?;
        let k = self.wk.forward(tape, bind, h)?;
        let v = self.wv.forward(tape, bind, h)?;
        let core = self.axial_stack(tape, bind, q, k, v, n)?;
        let sum = tape.add(h, core)?;
        self.norm.forward(tape, bind, sum)
    }
}

/// Raw cross-attention used by the dot-product fusion strategy: dialogue
/// rows query the persona rows.
pub fn cross_attention(
    tape: &mut Tape,
    bind: &Binding,
    h: TensorId,
    persona: TensorId,
    wq: &LinearLayer,
    wk: &LinearLayer,
    wv: &LinearLayer,
) -> Result<TensorId> {
    let state = AttentionState {
        q: wq.forward(tape, bind, h)?,
        k: wk.forward(tape, bind, persona)?,
        v: wv.forward(tape, bind, persona)?,
        mask: None,
    };
    scaled_dot_attention(tape, &state)
}

/// Ablation fusion strategies.
#[derive(Debug, Copy, Clone, PartialEq, Eq)]
pub enum FusionStrategy {
    SimpleConcat,
    DotProduct,
    Pa3NoAxial,
    Pa3Full,
}

/// A fusion strategy together with its learned parameters.
#[derive(Debug, Clone)]
pub enum PersonaFusion {
    /// Append the mean-pooled persona vector to every position and project
    /// back to width d. The projection starts as [I; 0] so the block is an
    /// exact no-op until training moves it.
    SimpleConcat { proj: LinearLayer, d: usize, d_p: usize },
    /// Cross-attention from dialogue queries to persona keys/values,
    /// residual-added and normalized.
    DotProduct {
        wq: LinearLayer,
        wk: LinearLayer,
        wv: LinearLayer,
        norm: LayerNorm,
    },
    /// Gated blend followed by plain (non-axial) attention.
    NoAxial {
        wq: LinearLayer,
        wk: LinearLayer,
        wv: LinearLayer,
        fusion: FusionParameters,
        norm: LayerNorm,
    },
    Full(Pa3Block),
}

impl PersonaFusion {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut Rng,
        prefix: &str,
        strategy: FusionStrategy,
        d: usize,
        d_p: usize,
        groups: usize,
    ) -> Result<Self> {
        Ok(match strategy {
            FusionStrategy::SimpleConcat => {
                let mut w = Tensor::zeros(vec![d + d_p, d]);
                for i in 0..d {
                    w.data[i * d + i] = 1.0;
                }
                PersonaFusion::SimpleConcat {
                    proj: LinearLayer::with_weight(ps, &format!("{prefix}.proj"), w, false),
                    d,
                    d_p,
                }
            }
            FusionStrategy::DotProduct => PersonaFusion::DotProduct {
                wq: LinearLayer::new(ps, rng, &format!("{prefix}.wq"), d, d, false),
                wk: LinearLayer::new(ps, rng, &format!("{prefix}.wk"), d_p, d, false),
                wv: LinearLayer::new(ps, rng, &format!("{prefix}.wv"), d_p, d, false),
                norm: LayerNorm::new(ps, &format!("{prefix}.norm"), d),
            },
            FusionStrategy::Pa3NoAxial => PersonaFusion::NoAxial {
                wq: LinearLayer::new(ps, rng, &format!("{prefix}.wq"), d, d, false),
                wk: LinearLayer::new(ps, rng, &format!("{prefix}.wk"), d, d, false),
                wv: LinearLayer::new(ps, rng, &format!("{prefix}.wv"), d, d, false),
                fusion: FusionParameters::new(ps, rng, &format!("{prefix}.gate"), d, d_p),
                norm: LayerNorm::new(ps, &format!("{prefix}.norm"), d),
            },
            FusionStrategy::Pa3Full => {
                PersonaFusion::Full(Pa3Block::new(ps, rng, prefix, d, d_p, groups)?)
            }
        })
    }

    pub fn strategy(&self) -> FusionStrategy {
        match self {
            PersonaFusion::SimpleConcat { .. } => FusionStrategy::SimpleConcat,
            PersonaFusion::DotProduct { .. } => FusionStrategy::DotProduct,
            PersonaFusion::NoAxial { .. } => FusionStrategy::Pa3NoAxial,
            PersonaFusion::Full(_) => FusionStrategy::Pa3Full,
        }
    }

    /// Fuse persona information into the dialogue representation; output
    /// keeps the n×d shape of `h`.
    pub fn apply(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        h: TensorId,
        persona: PersonaEncoding,
    ) -> Result<TensorId> {
        let n = tape.shape(h)[0];
        match self {
            PersonaFusion::SimpleConcat { proj, .. } => {
                let pooled = tape.mean_rows(persona.p)?;
                let ones = tape.constant(vec![n, 1], vec![1.0; n])?;
                let tiled = tape.matmul(ones, pooled)?;
                // Column-concat via double transpose.
                let ht = tape.transpose(h)?;
                let pt = tape.transpose(tiled)?;
                let cat = tape.concat_rows(&[ht, pt])?;
                let joined = tape.transpose(cat)?;
                proj.forward(tape, bind, joined)
            }
            PersonaFusion::DotProduct { wq, wk, wv, norm } => {
                let attended = cross_attention(tape, bind, h, persona.p, wq, wk, wv)?;
                let sum = tape.add(h, attended)?;
                norm.forward(tape, bind, sum)
            }
            PersonaFusion::NoAxial { wq, wk, wv, fusion, norm } => {
                let q = wq.forward(tape, bind, h)?;
                let k = wk.forward(tape, bind, h)?;
                let v = wv.forward(tape, bind, h)?;
                let (khat, vhat) = fuse_key_value(tape, bind, k, v, persona, fusion)?;
                let state = AttentionState { q, k: khat, v: vhat, mask: None };
                let attended = scaled_dot_attention(tape, &state)?;
                let sum = tape.add(h, attended)?;
                norm.forward(tape, bind, sum)
            }
            PersonaFusion::Full(block) => block.forward(tape, bind, h, persona),
        }
    }
}
