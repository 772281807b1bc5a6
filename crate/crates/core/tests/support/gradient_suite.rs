//! Central finite-difference checks of every differentiable kernel and of the
//! full decoder objective. Each check panics on failure.

use boxseg_core::attention::{decoder_layer, multi_head_attention, AttentionParams, DecoderLayerParams, NormParams};
use boxseg_core::decoder::{forward_graph, DecoderConfig, DecoderParams};
use boxseg_core::graph::{Graph, Var};
use boxseg_core::train::{bce_dice_loss, LossConfig, SynthConfig, SyntheticGenerator, SyntheticSample};
use boxseg_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;
const TRIALS: u64 = 10;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, falling back to the absolute gap for
/// vanishing gradients.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let denom = norm(analytic).max(norm(numeric));
    if denom < 1e-8 {
        norm(&diff)
    } else {
        norm(&diff) / denom
    }
}

/// Checks `d/dinputs Σ f(inputs) ⊙ R` for a fixed random weighting `R`.
fn check<F>(name: &str, seed: u64, inputs: Vec<Tensor>, f: F)
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let weights_seed = seed ^ 0xabcdef;
    let objective = |g: &mut Graph<'_>, vars: &[Var]| -> Result<Var> {
        let out = f(g, vars)?;
        let shape = g.value(out).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
        let r = g.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
        let prod = g.mul(out, r)?;
        g.sum(prod)
    };
    let value = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.input(t.clone())).collect();
        let loss = objective(&mut g, &vars).unwrap();
        g.value(loss).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = objective(&mut g, &vars).unwrap();
    let grads = g.backward(loss).unwrap();

    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            let mut minus = inputs.clone();
            let mut d = plus[k].data().to_vec();
            d[i] += H;
            plus[k] = Tensor::new(inputs[k].shape().to_vec(), d).unwrap();
            let mut d = minus[k].data().to_vec();
            d[i] -= H;
            minus[k] = Tensor::new(inputs[k].shape().to_vec(), d).unwrap();
            numeric.push((value(&plus) - value(&minus)) / (2.0 * H));
        }
        let err = rel_err(&analytic, &numeric);
        assert!(err < TOL, "{name} (seed {seed}) input {k}: relative error {err:e}");
    }
}

fn trials(name: &str, mut body: impl FnMut(&mut ChaCha8Rng, u64)) {
    for seed in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9) ^ name.len() as u64);
        body(&mut rng, seed);
    }
}

pub fn matmul_transpose_reshape() {
    trials("matmul", |rng, seed| {
        let a = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(rng, &[4, 2], -1.0, 1.0);
        check("matmul", seed, vec![a, b], |g, v| {
            let m = g.matmul(v[0], v[1])?;
            let t = g.transpose(m)?;
            g.reshape(t, &[6])
        });
    });
}

pub fn linear_and_row_bias() {
    trials("linear", |rng, seed| {
        let x = rand_tensor(rng, &[3, 5], -1.0, 1.0);
        let w = rand_tensor(rng, &[5, 4], -1.0, 1.0);
        let b = rand_tensor(rng, &[4], -1.0, 1.0);
        let c = rand_tensor(rng, &[4], -1.0, 1.0);
        check("linear", seed, vec![x, w, b, c], |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            g.add_row_bias(y, v[3])
        });
    });
}

pub fn elementwise_arithmetic() {
    trials("elementwise", |rng, seed| {
        let a = rand_tensor(rng, &[2, 3], -1.0, 1.0);
        let b = rand_tensor(rng, &[2, 3], -1.0, 1.0);
        let d = rand_tensor(rng, &[2, 3], 0.5, 2.0);
        let s = rand_tensor(rng, &[1], -1.0, 1.0);
        check("elementwise", seed, vec![a, b, d, s], |g, v| {
            let x = g.add(v[0], v[1])?;
            let x = g.sub(x, v[3])?;
            let x = g.mul(x, v[1])?;
            let x = g.div(x, v[2])?;
            let x = g.scale(x, 1.7)?;
            g.add_const(x, -0.3)
        });
    });
}

pub fn reductions() {
    trials("reductions", |rng, seed| {
        let a = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        check("reductions", seed, vec![a], |g, v| {
            let s = g.sum(v[0])?;
            let m = g.mean(v[0])?;
            let p = g.mul(s, m)?;
            g.add(v[0], p)
        });
    });
}

pub fn elementwise_maximum() {
    trials("maximum", |rng, seed| {
        let xs: Vec<Tensor> = (0..3).map(|_| rand_tensor(rng, &[4, 4], -1.0, 1.0)).collect();
        check("maximum", seed, xs, |g, v| g.maximum(v));
    });
}

pub fn slicing_and_concatenation() {
    trials("slicing", |rng, seed| {
        let a = rand_tensor(rng, &[3, 5], -1.0, 1.0);
        let b = rand_tensor(rng, &[3, 2], -1.0, 1.0);
        let c = rand_tensor(rng, &[2, 3, 3], -1.0, 1.0);
        let d = rand_tensor(rng, &[1, 3, 3], -1.0, 1.0);
        check("slicing", seed, vec![a, b, c, d], |g, v| {
            let s = g.slice_cols(v[0], 1, 3)?;
            let cc = g.concat_cols(&[s, v[1]])?;
            let cc = g.reshape(cc, &[15])?;
            let ch = g.concat_channels(&[v[2], v[3]])?;
            let ch = g.reshape(ch, &[27])?;
            let row = g_row(g, ch)?;
            let ch = g.slice_cols(row, 0, 15)?;
            let ch = g.reshape(ch, &[15])?;
            g.add(cc, ch)
        });
    });
}

fn g_row(g: &mut Graph<'_>, x: Var) -> Result<Var> {
    let n = g.value(x).numel();
    g.reshape(x, &[1, n])
}

pub fn spatial_gating() {
    trials("mul_spatial", |rng, seed| {
        let x = rand_tensor(rng, &[3, 4, 5], -1.0, 1.0);
        let m = rand_tensor(rng, &[4, 5], 0.0, 1.0);
        check("mul_spatial", seed, vec![x, m], |g, v| g.mul_spatial(v[0], v[1]));
    });
}

pub fn pointwise_convolution() {
    trials("conv_1x1", |rng, seed| {
        let x = rand_tensor(rng, &[3, 4, 4], -1.0, 1.0);
        let w = rand_tensor(rng, &[5, 3], -1.0, 1.0);
        let b = rand_tensor(rng, &[5], -1.0, 1.0);
        check("conv_1x1", seed, vec![x, w, b], |g, v| g.conv_1x1(v[0], v[1], v[2]));
    });
}

pub fn convolution_3x3_both_strides() {
    trials("conv3x3", |rng, seed| {
        let x = rand_tensor(rng, &[2, 6, 5], -1.0, 1.0);
        let w = rand_tensor(rng, &[3, 2, 3, 3], -1.0, 1.0);
        let b = rand_tensor(rng, &[3], -1.0, 1.0);
        let stride = 1 + (seed as usize % 2);
        check("conv3x3", seed, vec![x, w, b], |g, v| g.conv3x3(v[0], v[1], v[2], stride));
    });
}

pub fn depthwise_convolution() {
    trials("dwconv", |rng, seed| {
        let x = rand_tensor(rng, &[3, 5, 4], -1.0, 1.0);
        let w = rand_tensor(rng, &[3, 3, 3], -1.0, 1.0);
        let b = rand_tensor(rng, &[3], -1.0, 1.0);
        check("dwconv_3x3", seed, vec![x, w, b], |g, v| g.dwconv_3x3(v[0], v[1], v[2]));
    });
}

pub fn group_normalization() {
    trials("group_norm", |rng, seed| {
        let x = rand_tensor(rng, &[4, 3, 3], -2.0, 2.0);
        let gamma = rand_tensor(rng, &[4], 0.5, 1.5);
        let beta = rand_tensor(rng, &[4], -1.0, 1.0);
        check("group_norm", seed, vec![x, gamma, beta], |g, v| g.group_norm(v[0], 2, v[1], v[2], 1e-5));
    });
}

pub fn layer_normalization() {
    trials("layer_norm", |rng, seed| {
        let x = rand_tensor(rng, &[3, 6], -2.0, 2.0);
        let gamma = rand_tensor(rng, &[6], 0.5, 1.5);
        let beta = rand_tensor(rng, &[6], -1.0, 1.0);
        check("layer_norm", seed, vec![x, gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
    });
}

pub fn activations() {
    trials("activations", |rng, seed| {
        let x = rand_tensor(rng, &[3, 5], -3.0, 3.0);
        check("gelu", seed, vec![x.clone()], |g, v| g.gelu(v[0]));
        check("sigmoid", seed, vec![x.clone()], |g, v| g.sigmoid(v[0]));
        check("softmax", seed, vec![x], |g, v| g.softmax(v[0]));
    });
}

pub fn pixel_shuffle_and_resize() {
    trials("resample", |rng, seed| {
        let x = rand_tensor(rng, &[8, 3, 2], -1.0, 1.0);
        check("pixel_shuffle", seed, vec![x], |g, v| g.pixel_shuffle(v[0], 2));
        let y = rand_tensor(rng, &[2, 3, 4], -1.0, 1.0);
        let (oh, ow) = if seed % 2 == 0 { (7, 5) } else { (2, 3) };
        check("bilinear_resize", seed, vec![y], |g, v| g.bilinear_resize(v[0], oh, ow));
    });
}

pub fn soft_box_gate_wrt_box() {
    trials("gate", |rng, seed| {
        let x1 = rng.gen_range(0.05..0.45);
        let y1 = rng.gen_range(0.05..0.45);
        let b = Tensor::new(vec![4], vec![x1, y1, x1 + rng.gen_range(0.1..0.5), y1 + rng.gen_range(0.1..0.5)]).unwrap();
        check("soft_box_gate", seed, vec![b], |g, v| g.soft_box_gate(v[0], 8, 6, 20.0));
    });
}

pub fn bce_with_logits() {
    trials("bce", |rng, seed| {
        let x = rand_tensor(rng, &[4, 4], -3.0, 3.0);
        let target: Vec<f64> = (0..16).map(|_| f64::from(rng.gen_bool(0.4) as u8)).collect();
        check("bce_logits_mean", seed, vec![x], |g, v| g.bce_logits_mean(v[0], &target));
    });
}

pub fn bce_dice_objective() {
    trials("bce_dice", |rng, seed| {
        let x = rand_tensor(rng, &[6, 5], -3.0, 3.0);
        let target = boxseg_core::mask::BinaryMask::from_fn(5, 6, |_, _| rng.gen_bool(0.5));
        check("bce_dice_loss", seed, vec![x], |g, v| bce_dice_loss(g, v[0], &target, &LossConfig::default()));
    });
}

fn attention_params(vars: &[Var]) -> AttentionParams {
    AttentionParams {
        wq: vars[0],
        bq: vars[1],
        wk: vars[2],
        bk: vars[3],
        wv: vars[4],
        bv: vars[5],
        wo: vars[6],
        bo: vars[7],
    }
}

fn attention_tensors(rng: &mut ChaCha8Rng, d: usize) -> Vec<Tensor> {
    (0..4)
        .flat_map(|_| [rand_tensor(rng, &[d, d], -0.6, 0.6), rand_tensor(rng, &[d], -0.2, 0.2)])
        .collect()
}

pub fn multi_head_attention_block() {
    trials("mha", |rng, seed| {
        let mut ts = vec![rand_tensor(rng, &[2, 4], -1.0, 1.0), rand_tensor(rng, &[5, 4], -1.0, 1.0)];
        ts.extend(attention_tensors(rng, 4));
        check("multi_head_attention", seed, ts, |g, v| {
            multi_head_attention(g, v[0], v[1], &attention_params(&v[2..10]), 2)
        });
    });
}

pub fn transformer_decoder_layer() {
    trials("decoder_layer", |rng, seed| {
        let d = 4;
        let mut ts = vec![rand_tensor(rng, &[1, d], -1.0, 1.0), rand_tensor(rng, &[6, d], -1.0, 1.0)];
        ts.extend(attention_tensors(rng, d));
        ts.extend(attention_tensors(rng, d));
        for _ in 0..3 {
            ts.push(rand_tensor(rng, &[d], 0.5, 1.5));
            ts.push(rand_tensor(rng, &[d], -0.5, 0.5));
        }
        ts.push(rand_tensor(rng, &[d, 6], -0.6, 0.6));
        ts.push(rand_tensor(rng, &[6], -0.2, 0.2));
        ts.push(rand_tensor(rng, &[6, d], -0.6, 0.6));
        ts.push(rand_tensor(rng, &[d], -0.2, 0.2));
        check("decoder_layer", seed, ts, |g, v| {
            let p = DecoderLayerParams {
                self_attn: attention_params(&v[2..10]),
                cross_attn: attention_params(&v[10..18]),
                norm1: NormParams { gamma: v[18], beta: v[19] },
                norm2: NormParams { gamma: v[20], beta: v[21] },
                norm3: NormParams { gamma: v[22], beta: v[23] },
                ffn_w1: v[24],
                ffn_b1: v[25],
                ffn_w2: v[26],
                ffn_b2: v[27],
            };
            decoder_layer(g, v[0], v[1], &p, 2, 1e-5)
        });
    });
}

/// Mask losses on both passes plus a squared error on the IoU head.
fn decoder_loss<'a>(
    g: &mut Graph<'a>,
    params: &'a DecoderParams,
    cfg: &DecoderConfig,
    sample: &'a SyntheticSample,
) -> (Var, Vec<(String, Var)>) {
    let bound = params.bind(g);
    let target = &sample.target_mask;
    let res = [target.height(), target.width()];
    let v = forward_graph(g, &bound, cfg, &sample.inputs, res).unwrap();
    let loss_cfg = LossConfig::default();
    let l2 = bce_dice_loss(g, v.mask, target, &loss_cfg).unwrap();
    let [hp, wp] = cfg.pixel_grid();
    let up1 = g.reshape(v.logits1, &[1, hp, wp]).unwrap();
    let up1 = g.bilinear_resize(up1, res[0], res[1]).unwrap();
    let l1 = bce_dice_loss(g, up1, target, &loss_cfg).unwrap();
    let gap = g.add_const(v.iou, -0.6).unwrap();
    let sq = g.mul(gap, gap).unwrap();
    let sq = g.sum(sq).unwrap();
    let loss = g.add(l1, l2).unwrap();
    let loss = g.add(loss, sq).unwrap();
    (loss, bound.iter().map(|(n, v)| (n.to_owned(), v)).collect())
}

fn decoder_loss_value(params: &DecoderParams, cfg: &DecoderConfig, sample: &SyntheticSample) -> f64 {
    let mut g = Graph::new();
    let (loss, _) = decoder_loss(&mut g, params, cfg, sample);
    g.value(loss).item()
}

pub fn end_to_end_decoder_objective() {
    let cfg = DecoderConfig::micro();
    let gen = SyntheticGenerator::new(SynthConfig::for_decoder(&cfg)).unwrap();
    for trial in 0..TRIALS {
        let mut params = DecoderParams::init(&cfg, 100 + trial).unwrap();
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_owned()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(500 + trial);
        for n in &names {
            if n.ends_with(".scale") || n.ends_with(".bias") || n.ends_with(".beta") {
                params.update(n, |d| d.iter_mut().for_each(|x| *x += rng.gen_range(-0.3..0.3))).unwrap();
            }
        }
        let sample = gen.sample(77, trial).unwrap();
        let mut g = Graph::new();
        let (loss, vars) = decoder_loss(&mut g, &params, &cfg, &sample);
        let grads = g.backward(loss).unwrap();

        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for (name, var) in &vars {
            let n = params.get(name).unwrap().numel();
            let picks: Vec<usize> = (0..2.min(n)).map(|_| rng.gen_range(0..n)).collect();
            for i in picks {
                analytic.push(grads.get(*var).map_or(0.0, |t| t.data()[i]));
                let mut plus = params.clone();
                plus.update(name, |d| d[i] += H).unwrap();
                let mut minus = params.clone();
                minus.update(name, |d| d[i] -= H).unwrap();
                let fp = decoder_loss_value(&plus, &cfg, &sample);
                let fm = decoder_loss_value(&minus, &cfg, &sample);
                numeric.push((fp - fm) / (2.0 * H));
            }
        }
        let err = rel_err(&analytic, &numeric);
        assert!(err < TOL, "decoder objective trial {trial}: relative error {err:e}");
    }
}

pub const CHECKS: &[(&str, fn())] = &[
    ("matmul_transpose_reshape", matmul_transpose_reshape),
    ("linear_and_row_bias", linear_and_row_bias),
    ("elementwise_arithmetic", elementwise_arithmetic),
    ("reductions", reductions),
    ("elementwise_maximum", elementwise_maximum),
    ("slicing_and_concatenation", slicing_and_concatenation),
    ("spatial_gating", spatial_gating),
    ("pointwise_convolution", pointwise_convolution),
    ("convolution_3x3_both_strides", convolution_3x3_both_strides),
    ("depthwise_convolution", depthwise_convolution),
    ("group_normalization", group_normalization),
    ("layer_normalization", layer_normalization),
    ("activations", activations),
    ("pixel_shuffle_and_resize", pixel_shuffle_and_resize),
    ("soft_box_gate_wrt_box", soft_box_gate_wrt_box),
    ("bce_with_logits", bce_with_logits),
    ("bce_dice_objective", bce_dice_objective),
    ("multi_head_attention_block", multi_head_attention_block),
    ("transformer_decoder_layer", transformer_decoder_layer),
    ("end_to_end_decoder_objective", end_to_end_decoder_objective),
];
