use std::borrow::Cow;

use super::config::DecoderConfig;
use super::params::{BoundParams, DecoderParams};
use crate::attention::{decoder_layer, AttentionParams, DecoderLayerParams, NormParams};
use crate::error::{Error, Result};
use crate::geometry::{encode_box, enlarge_box, BBox};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::tensor::Tensor;

/// Everything the decoder consumes for one referring query.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderInputs {
    /// One `C_l×Hm×Wm` tensor per level, top level last.
    pub vis_features: Vec<Tensor>,
    /// `Hm·Wm × mm_dim` visual embedding tokens.
    pub mm_embeddings: Tensor,
    /// `1 × seg_dim`.
    pub seg_token: Tensor,
    /// Normalized boxes; at least one.
    pub boxes: Vec<BBox>,
    /// `3×H×W` image; resized to the stem resolution when it differs.
    pub image: Tensor,
}

impl DecoderInputs {
    pub fn validate(&self, cfg: &DecoderConfig) -> Result<()> {
        let [hm, wm] = cfg.memory_grid;
        if self.vis_features.len() != cfg.num_levels() {
            return Err(Error::dim(
                "decoder inputs",
                format!("{} feature levels, expected {}", self.vis_features.len(), cfg.num_levels()),
            ));
        }
        for (l, (f, &c)) in self.vis_features.iter().zip(&cfg.vit_channels).enumerate() {
            if f.shape() != [c, hm, wm] {
                return Err(Error::dim(
                    "decoder inputs",
                    format!("level {l} has shape {:?}, expected {:?}", f.shape(), [c, hm, wm]),
                ));
            }
        }
        let (n, m) = self.mm_embeddings.dims2("decoder inputs")?;
        if n != hm * wm {
            return Err(Error::dim(
                "decoder inputs",
                format!("{n} multimodal tokens, memory grid holds {}", hm * wm),
            ));
        }
        if m != cfg.mm_dim {
            return Err(Error::dim("decoder inputs", format!("token width {m}, expected {}", cfg.mm_dim)));
        }
        if self.seg_token.shape() != [1, cfg.seg_dim] {
            return Err(Error::dim(
                "decoder inputs",
                format!("seg token shape {:?}, expected [1, {}]", self.seg_token.shape(), cfg.seg_dim),
            ));
        }
        if self.boxes.is_empty() {
            return Err(Error::Validation("at least one box is required".into()));
        }
        let (c, _, _) = self.image.dims3("decoder inputs")?;
        if c != 3 {
            return Err(Error::dim("decoder inputs", format!("image has {c} channels")));
        }
        Ok(())
    }
}

/// Graph handles of every named intermediate.
#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    pub fused: Var,
    pub memory: Var,
    pub query0: Var,
    pub query1: Var,
    pub cnn: Var,
    pub gate: Var,
    pub up: Var,
    pub pixel: Var,
    pub logits1: Var,
    pub target_feature: Var,
    pub query2: Var,
    pub logits2: Var,
    pub mask: Var,
    pub iou: Var,
}

/// Materialized intermediates of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub fused: Tensor,
    pub memory: Tensor,
    pub query0: Tensor,
    pub query1: Tensor,
    pub cnn: Tensor,
    pub gate: Tensor,
    pub up: Tensor,
    pub pixel: Tensor,
    pub logits1: Tensor,
    pub target_feature: Tensor,
    pub query2: Tensor,
    pub logits2: Tensor,
    pub mask: Tensor,
    pub iou: f64,
}

impl DecoderState {
    pub fn from_graph(g: &Graph<'_>, v: &DecoderVars) -> Self {
        let t = |x: Var| g.value(x).clone();
        Self {
            fused: t(v.fused),
            memory: t(v.memory),
            query0: t(v.query0),
            query1: t(v.query1),
            cnn: t(v.cnn),
            gate: t(v.gate),
            up: t(v.up),
            pixel: t(v.pixel),
            logits1: t(v.logits1),
            target_feature: t(v.target_feature),
            query2: t(v.query2),
            logits2: t(v.logits2),
            mask: t(v.mask),
            iou: g.value(v.iou).item(),
        }
    }

    /// `(name, min, max)` of every tensor, for divergence diagnostics.
    pub fn extrema(&self) -> Vec<(&'static str, f64, f64)> {
        let named: [(&'static str, &Tensor); 13] = [
            ("fused", &self.fused),
            ("memory", &self.memory),
            ("query0", &self.query0),
            ("query1", &self.query1),
            ("cnn", &self.cnn),
            ("gate", &self.gate),
            ("up", &self.up),
            ("pixel", &self.pixel),
            ("logits1", &self.logits1),
            ("target_feature", &self.target_feature),
            ("query2", &self.query2),
            ("logits2", &self.logits2),
            ("mask", &self.mask),
        ];
        named.iter().map(|(n, t)| (*n, t.min(), t.max())).collect()
    }
}

fn conv1x1(g: &mut Graph<'_>, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    g.conv_1x1(x, w, b)
}

fn conv3x3(g: &mut Graph<'_>, p: &BoundParams, prefix: &str, x: Var, stride: usize) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    g.conv3x3(x, w, b, stride)
}

fn linear(g: &mut Graph<'_>, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias")).ok();
    g.linear(x, w, b)
}

fn norm(p: &BoundParams, prefix: &str) -> Result<NormParams> {
    Ok(NormParams {
        gamma: p.var(&format!("{prefix}.gamma"))?,
        beta: p.var(&format!("{prefix}.beta"))?,
    })
}

fn attention(p: &BoundParams, prefix: &str) -> Result<AttentionParams> {
    let v = |proj: &str, kind: &str| p.var(&format!("{prefix}.{proj}.{kind}"));
    Ok(AttentionParams {
        wq: v("q", "weight")?,
        bq: v("q", "bias")?,
        wk: v("k", "weight")?,
        bk: v("k", "bias")?,
        wv: v("v", "weight")?,
        bv: v("v", "bias")?,
        wo: v("o", "weight")?,
        bo: v("o", "bias")?,
    })
}

/// `X₀ + s·gelu(dwconv(GN(X₀)))` with `X₀` the 1×1 projection of one level.
pub fn inject_spatial_features(
    g: &mut Graph<'_>,
    p: &BoundParams,
    cfg: &DecoderConfig,
    level: usize,
    x: Var,
) -> Result<Var> {
    let pre = format!("injector.{level}");
    let x0 = conv1x1(g, p, &format!("{pre}.proj"), x)?;
    let n = norm(p, &format!("{pre}.norm"))?;
    let h = g.group_norm(x0, cfg.norm_groups, n.gamma, n.beta, cfg.norm_eps)?;
    let h = g.dwconv_3x3(h, p.var(&format!("{pre}.dw.weight"))?, p.var(&format!("{pre}.dw.bias"))?)?;
    let h = g.gelu(h)?;
    let h = g.mul(h, p.var(&format!("{pre}.scale"))?)?;
    g.add(x0, h)
}

/// Returns `(F_fuse: D×Hm×Wm, F_mem: Hm·Wm×D)`.
pub fn build_memory(
    g: &mut Graph<'_>,
    p: &BoundParams,
    cfg: &DecoderConfig,
    levels: &[Var],
    mm_tokens: Var,
) -> Result<(Var, Var)> {
    let nl = cfg.num_levels();
    if levels.len() != nl {
        return Err(Error::dim("build_memory", format!("{} levels, expected {nl}", levels.len())));
    }
    let [hm, wm] = cfg.memory_grid;
    let d = cfg.hidden_dim;
    let (tokens, _) = g.value(mm_tokens).dims2("build_memory")?;
    if tokens != hm * wm {
        return Err(Error::dim(
            "build_memory",
            format!("{tokens} multimodal tokens, memory grid holds {}", hm * wm),
        ));
    }

    let mut projected = Vec::with_capacity(nl);
    for (l, &x) in levels[..nl - 1].iter().enumerate() {
        projected.push(inject_spatial_features(g, p, cfg, l, x)?);
    }
    projected.push(conv1x1(g, p, "top_proj", levels[nl - 1])?);
    let cat = if nl == 1 { projected[0] } else { g.concat_channels(&projected)? };

    let h = conv3x3(g, p, "fuse.conv3", cat, 1)?;
    let n = norm(p, "fuse.norm")?;
    let h = g.group_norm(h, cfg.norm_groups, n.gamma, n.beta, cfg.norm_eps)?;
    let h = g.gelu(h)?;
    let fused = conv1x1(g, p, "fuse.conv1", h)?;

    let t = g.matmul(mm_tokens, p.var("mm_proj.weight")?)?;
    let t = g.transpose(t)?;
    let t = g.reshape(t, &[d, hm, wm])?;
    let mem = g.add(t, fused)?;
    let mem = g.add(mem, p.var("pos_mem")?)?;
    let mem = g.reshape(mem, &[d, hm * wm])?;
    let mem = g.transpose(mem)?;
    Ok((fused, mem))
}

/// `LN(MLP_box(encode(hull(boxes))) + T_seg·W_seg)`.
pub fn build_query(
    g: &mut Graph<'_>,
    p: &BoundParams,
    cfg: &DecoderConfig,
    seg_token: Var,
    boxes: &[BBox],
) -> Result<Var> {
    let hull = BBox::hull(boxes)?;
    let enc = encode_box(&hull, cfg.fourier())?;
    let n = enc.len();
    let e = g.constant(Tensor::new(vec![1, n], enc)?);
    let h = linear(g, p, "box_mlp.fc1", e)?;
    let h = g.gelu(h)?;
    let h = linear(g, p, "box_mlp.fc2", h)?;
    let s = g.matmul(seg_token, p.var("seg_proj.weight")?)?;
    let q = g.add(h, s)?;
    let n = norm(p, "query_norm")?;
    g.layer_norm(q, n.gamma, n.beta, cfg.norm_eps)
}

pub fn decode_query(g: &mut Graph<'_>, p: &BoundParams, cfg: &DecoderConfig, q0: Var, memory: Var) -> Result<Var> {
    let mut q = q0;
    for i in 0..cfg.decoder_layers {
        let pre = format!("decoder.{i}");
        let lp = DecoderLayerParams {
            self_attn: attention(p, &format!("{pre}.self_attn"))?,
            cross_attn: attention(p, &format!("{pre}.cross_attn"))?,
            norm1: norm(p, &format!("{pre}.norm1"))?,
            norm2: norm(p, &format!("{pre}.norm2"))?,
            norm3: norm(p, &format!("{pre}.norm3"))?,
            ffn_w1: p.var(&format!("{pre}.ffn.fc1.weight"))?,
            ffn_b1: p.var(&format!("{pre}.ffn.fc1.bias"))?,
            ffn_w2: p.var(&format!("{pre}.ffn.fc2.weight"))?,
            ffn_b2: p.var(&format!("{pre}.ffn.fc2.bias"))?,
        };
        q = decoder_layer(g, q, memory, &lp, cfg.attention_heads, cfg.norm_eps)?;
    }
    Ok(q)
}

#[derive(Debug, Clone, Copy)]
pub struct PixelVars {
    pub cnn: Var,
    pub gate: Var,
    pub up: Var,
    pub pixel: Var,
}

/// Merged soft gate of all enlarged boxes on the pixel grid.
pub fn box_gate(g: &mut Graph<'_>, cfg: &DecoderConfig, boxes: &[BBox]) -> Result<Var> {
    if boxes.is_empty() {
        return Err(Error::Validation("at least one box is required".into()));
    }
    let [hp, wp] = cfg.pixel_grid();
    let mut gates = Vec::with_capacity(boxes.len());
    for b in boxes {
        let e = enlarge_box(b, cfg.enlarge_ratio);
        let bv = g.constant(Tensor::new(vec![4], e.to_array().to_vec())?);
        gates.push(g.soft_box_gate(bv, hp, wp, cfg.gate_alpha)?);
    }
    if gates.len() == 1 {
        Ok(gates[0])
    } else {
        g.maximum(&gates)
    }
}

/// Stem, box gate, two-stage upsampling of `F_fuse`, concatenation and channel mixing.
pub fn build_pixel_features(
    g: &mut Graph<'_>,
    p: &BoundParams,
    cfg: &DecoderConfig,
    fused: Var,
    image: Var,
    boxes: &[BBox],
) -> Result<PixelVars> {
    let mut cnn = image;
    for i in 0..cfg.stem_widths.len() {
        cnn = conv3x3(g, p, &format!("stem.{i}"), cnn, 2)?;
        cnn = g.gelu(cnn)?;
    }
    let gate = box_gate(g, cfg, boxes)?;

    let mut up = fused;
    for (i, &r) in cfg.upsample_factors.iter().enumerate() {
        up = g.pixel_shuffle(up, r)?;
        up = conv3x3(g, p, &format!("upsample.{i}"), up, 1)?;
        up = g.gelu(up)?;
    }

    let (_, uh, uw) = g.value(up).dims3("build_pixel_features")?;
    let (_, ch, cw) = g.value(cnn).dims3("build_pixel_features")?;
    if (uh, uw) != (ch, cw) {
        return Err(Error::dim(
            "build_pixel_features",
            format!("upsampled features are {uh}×{uw} but stem output is {ch}×{cw}"),
        ));
    }
    let gated = g.mul_spatial(cnn, gate)?;
    let cat = g.concat_channels(&[up, gated])?;
    let pixel = conv1x1(g, p, "mixer", cat)?;
    Ok(PixelVars { cnn, gate, up, pixel })
}

/// Dynamic 1×1 kernel `(k, b)` generated from the query, applied to every pixel.
pub fn predict_mask(g: &mut Graph<'_>, p: &BoundParams, cfg: &DecoderConfig, query: Var, pixel: Var) -> Result<Var> {
    let (c, h, w) = g.value(pixel).dims3("predict_mask")?;
    if c != cfg.pixel_dim {
        return Err(Error::dim("predict_mask", format!("pixel features have {c} channels")));
    }
    let hid = linear(g, p, "kernel_head.fc1", query)?;
    let hid = g.gelu(hid)?;
    let kb = linear(g, p, "kernel_head.fc2", hid)?;
    let k = g.slice_cols(kb, 0, c)?;
    let b = g.slice_cols(kb, c, 1)?;
    let flat = g.reshape(pixel, &[c, h * w])?;
    let logits = g.matmul(k, flat)?;
    let logits = g.add(logits, b)?;
    g.reshape(logits, &[h, w])
}

#[derive(Debug, Clone, Copy)]
pub struct RefineVars {
    pub target_feature: Var,
    pub query2: Var,
    pub logits2: Var,
}

/// Mask-weighted pooling of pixel features, query update and second mask pass.
pub fn refine(
    g: &mut Graph<'_>,
    p: &BoundParams,
    cfg: &DecoderConfig,
    query1: Var,
    logits1: Var,
    pixel: Var,
) -> Result<RefineVars> {
    let (c, h, w) = g.value(pixel).dims3("refine")?;
    if g.value(logits1).numel() != h * w {
        return Err(Error::dim("refine", "mask logits and pixel grid differ"));
    }
    let weights = g.sigmoid(logits1)?;
    let weights = g.reshape(weights, &[h * w, 1])?;
    let flat = g.reshape(pixel, &[c, h * w])?;
    let num = g.matmul(flat, weights)?;
    let den = g.sum(weights)?;
    let den = g.add_const(den, cfg.eps)?;
    let pooled = g.div(num, den)?;
    let target_feature = g.reshape(pooled, &[1, c])?;

    let r = linear(g, p, "refine_proj", target_feature)?;
    let q = g.add(query1, r)?;
    let n = norm(p, "refine_norm")?;
    let query2 = g.layer_norm(q, n.gamma, n.beta, cfg.norm_eps)?;
    let logits2 = predict_mask(g, p, cfg, query2, pixel)?;
    Ok(RefineVars {
        target_feature,
        query2,
        logits2,
    })
}

/// Confidence in `(0, 1)`.
pub fn predict_iou(g: &mut Graph<'_>, p: &BoundParams, query2: Var) -> Result<Var> {
    let s = linear(g, p, "iou_head", query2)?;
    g.sigmoid(s)
}

/// Records the full decoder on `g`, returning handles to every intermediate.
pub fn forward_graph<'a>(
    g: &mut Graph<'a>,
    p: &BoundParams,
    cfg: &DecoderConfig,
    inputs: &'a DecoderInputs,
    out_resolution: [usize; 2],
) -> Result<DecoderVars> {
    inputs.validate(cfg)?;
    if out_resolution.contains(&0) {
        return Err(Error::Validation("output resolution must be non-empty".into()));
    }
    let levels: Vec<Var> = inputs.vis_features.iter().map(|t| g.constant_ref(t)).collect();
    let mm = g.constant_ref(&inputs.mm_embeddings);
    let seg = g.constant_ref(&inputs.seg_token);
    let image = match stem_image(cfg, &inputs.image)? {
        Cow::Borrowed(t) => g.constant_ref(t),
        Cow::Owned(t) => g.constant(t),
    };

    let (fused, memory) = build_memory(g, p, cfg, &levels, mm)?;
    let query0 = build_query(g, p, cfg, seg, &inputs.boxes)?;
    let query1 = decode_query(g, p, cfg, query0, memory)?;
    let px = build_pixel_features(g, p, cfg, fused, image, &inputs.boxes)?;
    let logits1 = predict_mask(g, p, cfg, query1, px.pixel)?;
    let r = refine(g, p, cfg, query1, logits1, px.pixel)?;
    let iou = predict_iou(g, p, r.query2)?;

    let [hp, wp] = cfg.pixel_grid();
    let [oh, ow] = out_resolution;
    let m = g.reshape(r.logits2, &[1, hp, wp])?;
    let m = g.bilinear_resize(m, oh, ow)?;
    let mask = g.reshape(m, &[oh, ow])?;

    Ok(DecoderVars {
        fused,
        memory,
        query0,
        query1,
        cnn: px.cnn,
        gate: px.gate,
        up: px.up,
        pixel: px.pixel,
        logits1,
        target_feature: r.target_feature,
        query2: r.query2,
        logits2: r.logits2,
        mask,
        iou,
    })
}

fn stem_image<'t>(cfg: &DecoderConfig, image: &'t Tensor) -> Result<Cow<'t, Tensor>> {
    let [h, w] = cfg.image_size();
    if image.shape()[1..] == [h, w] {
        Ok(Cow::Borrowed(image))
    } else {
        kernels::bilinear_resize(image, h, w).map(Cow::Owned)
    }
}

/// Runs the decoder and returns every intermediate; `mask` is at `out_resolution`.
pub fn forward(
    inputs: &DecoderInputs,
    params: &DecoderParams,
    cfg: &DecoderConfig,
    out_resolution: [usize; 2],
) -> Result<DecoderState> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let v = forward_graph(&mut g, &p, cfg, inputs, out_resolution)?;
    Ok(DecoderState::from_graph(&g, &v))
}
