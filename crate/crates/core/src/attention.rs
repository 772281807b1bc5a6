//! Multi-head scaled dot-product attention and the post-norm transformer
//! decoder layer used to decode the object query against the memory.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

/// Projection weights (`D×D`, `in×out`) and biases (`D`) of one attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayerParams {
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
    pub norm1: NormParams,
    pub norm2: NormParams,
    pub norm3: NormParams,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
}

/// `softmax(q·kᵀ/√d)·v` for one head.
pub fn scaled_dot_product(g: &mut Graph<'_>, q: Var, k: Var, v: Var) -> Result<Var> {
    let d = g.value(q).dims2("attention")?.1;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    let weights = g.softmax(scores)?;
    g.matmul(weights, v)
}

/// Multi-head attention of `query: Q×D` over `context: S×D`, before the
/// output projection.
pub fn attention_heads(
    g: &mut Graph<'_>,
    query: Var,
    context: Var,
    p: &AttentionParams,
    heads: usize,
) -> Result<Var> {
    let d = g.value(query).dims2("attention")?.1;
    if g.value(context).dims2("attention")?.1 != d {
        return Err(Error::dim("attention", "query and context widths differ"));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("model width {d} not divisible by {heads} heads")));
    }
    let q = g.linear(query, p.wq, Some(p.bq))?;
    let k = g.linear(context, p.wk, Some(p.bk))?;
    let v = g.linear(context, p.wv, Some(p.bv))?;
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        outs.push(scaled_dot_product(g, qh, kh, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

pub fn multi_head_attention(
    g: &mut Graph<'_>,
    query: Var,
    context: Var,
    p: &AttentionParams,
    heads: usize,
) -> Result<Var> {
    let a = attention_heads(g, query, context, p, heads)?;
    g.linear(a, p.wo, Some(p.bo))
}

/// Self-attention, cross-attention to `memory`, then a GELU feed-forward
/// block; each sub-block is residual and followed by layer normalization.
pub fn decoder_layer(
    g: &mut Graph<'_>,
    query: Var,
    memory: Var,
    p: &DecoderLayerParams,
    heads: usize,
    eps: f64,
) -> Result<Var> {
    let sa = multi_head_attention(g, query, query, &p.self_attn, heads)?;
    let x = g.add(query, sa)?;
    let x = g.layer_norm(x, p.norm1.gamma, p.norm1.beta, eps)?;

    let ca = multi_head_attention(g, x, memory, &p.cross_attn, heads)?;
    let x = g.add(x, ca)?;
    let x = g.layer_norm(x, p.norm2.gamma, p.norm2.beta, eps)?;

    let h = g.linear(x, p.ffn_w1, Some(p.ffn_b1))?;
    let h = g.gelu(h)?;
    let f = g.linear(h, p.ffn_w2, Some(p.ffn_b2))?;
    let x = g.add(x, f)?;
    g.layer_norm(x, p.norm3.gamma, p.norm3.beta, eps)
}
