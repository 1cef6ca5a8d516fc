//! Building blocks of the network, recorded on a tape. Activations carry a
//! leading batch axis `N` in front of the shapes documented per operation.

use super::config::{ConvLayer, ModelConfig};
use super::ModelError;
use crate::diffcore::{lstm_cell_projected, ParamStore, Real, Tape, Tensor, Var};

/// Tape plus the parameters it reads.
pub(crate) struct Scope<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
}

impl<T: Real> Scope<'_, T> {
    pub fn param(&mut self, name: &str) -> Result<Var, ModelError> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        Ok(self.tape.param(self.store, id))
    }

    fn dense(&mut self, x: Var, w: &str, b: Option<&str>) -> Result<Var, ModelError> {
        let w = self.param(w)?;
        let y = self.tape.linear(x, w)?;
        match b {
            Some(b) => {
                let b = self.param(b)?;
                Ok(self.tape.add_bias(y, b)?)
            }
            None => Ok(y),
        }
    }
}

/// `[N×A×L×2] → [N×A×L_e×C]`: pointwise projection, then strided
/// convolutions each followed by ReLU. Weights are shared over antennas.
pub(crate) fn embed<T: Real>(
    s: &mut Scope<'_, T>,
    prefix: &str,
    x: Var,
    convs: &[ConvLayer],
    pad: usize,
) -> Result<Var, ModelError> {
    let shape = s.tape.shape(x).to_vec();
    let (n, a, l) = (shape[0], shape[1], shape[2]);
    let x = s.tape.reshape(x, &[n * a, l, 2])?;
    let mut h = s.dense(
        x,
        &format!("{prefix}embed.proj.w"),
        Some(&format!("{prefix}embed.proj.b")),
    )?;
    for (i, layer) in convs.iter().enumerate() {
        let w = s.param(&format!("{prefix}embed.conv{i}.w"))?;
        let b = s.param(&format!("{prefix}embed.conv{i}.b"))?;
        let y = s.tape.conv1d(h, w, b, layer.stride, pad)?;
        h = s.tape.relu(y);
    }
    let hs = s.tape.shape(h).to_vec();
    Ok(s.tape.reshape(h, &[n, a, hs[1], hs[2]])?)
}

/// Output of one transformer block.
pub(crate) struct BlockOut {
    pub x: Var,
    /// Attention probabilities `[N·L_e·heads × A × A]`.
    pub attention: Var,
}

/// Pre-norm MHSA across the antenna axis at every time slot, then a pre-norm
/// ReGLU FFN, each with a residual. `[N×A×L_e×C]` in and out.
pub(crate) fn antenna_block<T: Real>(
    s: &mut Scope<'_, T>,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<BlockOut, ModelError> {
    let shape = s.tape.shape(x).to_vec();
    let (n, a, le, c) = (shape[0], shape[1], shape[2], shape[3]);
    if heads == 0 || c % heads != 0 {
        return Err(ModelError::Config(format!(
            "width {c} not divisible by {heads} heads"
        )));
    }
    let dh = c / heads;
    let g = n * le;

    // tokens [G×A×C], one group per (frame, time slot)
    let tokens = s.tape.permute(x, &[0, 2, 1, 3])?;
    let tokens = s.tape.reshape(tokens, &[g, a, c])?;

    let g1 = s.param(&format!("{prefix}.ln1.gamma"))?;
    let b1 = s.param(&format!("{prefix}.ln1.beta"))?;
    let h = s.tape.layer_norm(tokens, g1, b1)?;
    let split = |s: &mut Scope<'_, T>, w: &str| -> Result<Var, ModelError> {
        let y = s.dense(h, &format!("{prefix}.attn.{w}"), None)?;
        let y = s.tape.reshape(y, &[g, a, heads, dh])?;
        let y = s.tape.permute(y, &[0, 2, 1, 3])?;
        Ok(s.tape.reshape(y, &[g * heads, a, dh])?)
    };
    let q = split(s, "wq")?;
    let k = split(s, "wk")?;
    let v = split(s, "wv")?;
    let scores = s.tape.batch_matmul(q, k, true)?;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let scores = s.tape.scale(scores, scale);
    let attention = s.tape.softmax(scores)?;
    let ctx = s.tape.batch_matmul(attention, v, false)?;
    let ctx = s.tape.reshape(ctx, &[g, heads, a, dh])?;
    let ctx = s.tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = s.tape.reshape(ctx, &[g, a, c])?;
    let attn_out = s.dense(ctx, &format!("{prefix}.attn.wo"), None)?;
    let tokens = s.tape.add(tokens, attn_out)?;

    let g2 = s.param(&format!("{prefix}.ln2.gamma"))?;
    let b2 = s.param(&format!("{prefix}.ln2.beta"))?;
    let h = s.tape.layer_norm(tokens, g2, b2)?;
    let ffn = reglu_ffn(s, prefix, h)?;
    let tokens = s.tape.add(tokens, ffn)?;

    let y = s.tape.reshape(tokens, &[n, le, a, c])?;
    let y = s.tape.permute(y, &[0, 2, 1, 3])?;
    Ok(BlockOut { x: y, attention })
}

/// `(ReLU(x·W1) ⊙ (x·W2))·W3` over the last axis.
pub(crate) fn reglu_ffn<T: Real>(
    s: &mut Scope<'_, T>,
    prefix: &str,
    x: Var,
) -> Result<Var, ModelError> {
    let gate = s.dense(x, &format!("{prefix}.ffn.w1"), None)?;
    let gate = s.tape.relu(gate);
    let value = s.dense(x, &format!("{prefix}.ffn.w2"), None)?;
    let inner = s.tape.mul(gate, value)?;
    s.dense(inner, &format!("{prefix}.ffn.w3"), None)
}

/// Stacked LSTM layers along time, per antenna with shared weights.
/// `[N×A×L_e×C] → [N×A×C]`, the last layer's final hidden state.
pub(crate) fn lstm_final<T: Real>(
    s: &mut Scope<'_, T>,
    prefix: &str,
    x: Var,
    layers: usize,
) -> Result<Var, ModelError> {
    let shape = s.tape.shape(x).to_vec();
    let (n, a, le, c) = (shape[0], shape[1], shape[2], shape[3]);
    let rows = n * a;
    let mut seq = s.tape.reshape(x, &[rows, le, c])?;
    let zeros = Tensor::zeros(&[rows, c]);
    let mut last = None;
    for layer in 0..layers {
        let p = format!("{prefix}lstm{layer}");
        let w_ih = s.param(&format!("{p}.w_ih"))?;
        let w_hh = s.param(&format!("{p}.w_hh"))?;
        let bias = s.param(&format!("{p}.b"))?;
        let proj = s.tape.linear(seq, w_ih)?;
        let proj = s.tape.add_bias(proj, bias)?;
        let mut h = s.tape.constant(&zeros);
        let mut cell = s.tape.constant(&zeros);
        let keep_sequence = layer + 1 < layers;
        let mut outputs = Vec::with_capacity(if keep_sequence { le } else { 0 });
        for t in 0..le {
            let xt = s.tape.index_axis(proj, 1, t)?;
            let (h2, c2) = lstm_cell_projected(s.tape, xt, h, cell, w_hh)?;
            h = h2;
            cell = c2;
            if keep_sequence {
                outputs.push(h);
            }
        }
        if keep_sequence {
            seq = s.tape.stack(&outputs, 1)?;
        }
        last = Some(h);
    }
    let h = last.ok_or_else(|| ModelError::Config("temporal stage needs an LSTM layer".into()))?;
    Ok(s.tape.reshape(h, &[n, a, c])?)
}

/// Compensation predictor: the extractor stack at the compensation width,
/// then a shared head per receive antenna. `[N×Nr×L×2] → Ĥ [N×Nr×Nt×1×2]`,
/// the identity pattern plus the learned offset.
pub(crate) fn cc_predict<T: Real>(
    s: &mut Scope<'_, T>,
    cfg: &ModelConfig,
    r: Var,
) -> Result<(Var, Vec<Var>), ModelError> {
    let shape = s.tape.shape(r).to_vec();
    let (n, nr, nt) = (shape[0], shape[1], cfg.nt);
    let mut x = embed(s, "cc.", r, &cfg.cc_conv_stack(), cfg.padding())?;
    let mut attention = Vec::with_capacity(cfg.transformer_blocks);
    for b in 0..cfg.transformer_blocks {
        let out = antenna_block(s, &format!("cc.block{b}"), x, cfg.cc_heads)?;
        x = out.x;
        attention.push(out.attention);
    }
    let state = lstm_final(s, "cc.", x, cfg.lstm_layers)?;
    let offset = s.dense(state, "cc.head.w", Some("cc.head.b"))?;
    let offset = s.tape.reshape(offset, &[n, nr, nt, 1, 2])?;
    let mut anchor = vec![T::zero(); n * nr * nt * 2];
    for b in 0..n {
        for j in 0..nr.min(nt) {
            anchor[((b * nr + j) * nt + j) * 2] = T::one();
        }
    }
    let anchor = s.tape.constant(&Tensor::new(&[n, nr, nt, 1, 2], anchor)?);
    Ok((s.tape.add(anchor, offset)?, attention))
}

/// `[N×C] → [N×K]`.
pub(crate) fn classify<T: Real>(s: &mut Scope<'_, T>, pooled: Var) -> Result<Var, ModelError> {
    s.dense(pooled, "classifier.w", Some("classifier.b"))
}
