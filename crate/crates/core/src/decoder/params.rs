use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::DecoderConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Uniform with variance `1/fan_in`.
    FanIn(usize),
    /// Uniform with the given standard deviation.
    Uniform(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

struct Layout(Vec<ParamSpec>);

impl Layout {
    fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) {
        self.0.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
    }

    /// Linear map stored `in×out` with a bias of `out`.
    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) {
        self.add(format!("{prefix}.weight"), &[fan_in, fan_out], Init::FanIn(fan_in));
        if bias {
            self.add(format!("{prefix}.bias"), &[fan_out], Init::Zeros);
        }
    }

    fn conv1x1(&mut self, prefix: &str, c_in: usize, c_out: usize) {
        self.add(format!("{prefix}.weight"), &[c_out, c_in], Init::FanIn(c_in));
        self.add(format!("{prefix}.bias"), &[c_out], Init::Zeros);
    }

    fn conv3x3(&mut self, prefix: &str, c_in: usize, c_out: usize) {
        self.add(format!("{prefix}.weight"), &[c_out, c_in, 3, 3], Init::FanIn(c_in * 9));
        self.add(format!("{prefix}.bias"), &[c_out], Init::Zeros);
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.add(format!("{prefix}.gamma"), &[d], Init::Ones);
        self.add(format!("{prefix}.beta"), &[d], Init::Zeros);
    }

    fn attention(&mut self, prefix: &str, d: usize) {
        for proj in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.{proj}"), d, d, true);
        }
    }
}

/// Every trainable tensor of the decoder, in a fixed order.
pub fn layout(cfg: &DecoderConfig) -> Vec<ParamSpec> {
    let d = cfg.hidden_dim;
    let levels = cfg.num_levels();
    let mut l = Layout(Vec::new());

    for (lvl, &c) in cfg.vit_channels[..levels - 1].iter().enumerate() {
        let p = format!("injector.{lvl}");
        l.conv1x1(&format!("{p}.proj"), c, d);
        l.norm(&format!("{p}.norm"), d);
        l.add(format!("{p}.dw.weight"), &[d, 3, 3], Init::FanIn(9));
        l.add(format!("{p}.dw.bias"), &[d], Init::Zeros);
        l.add(format!("{p}.scale"), &[1], Init::Constant(cfg.injector_scale_init));
    }
    l.conv1x1("top_proj", cfg.vit_channels[levels - 1], d);

    l.conv3x3("fuse.conv3", levels * d, d);
    l.norm("fuse.norm", d);
    l.conv1x1("fuse.conv1", d, d);

    l.linear("mm_proj", cfg.mm_dim, d, false);
    let [hm, wm] = cfg.memory_grid;
    l.add("pos_mem", &[d, hm, wm], Init::Uniform(0.02));

    l.linear("box_mlp.fc1", cfg.box_encoding_len(), cfg.box_mlp_hidden, true);
    l.linear("box_mlp.fc2", cfg.box_mlp_hidden, d, true);
    l.linear("seg_proj", cfg.seg_dim, d, false);
    l.norm("query_norm", d);

    for i in 0..cfg.decoder_layers {
        let p = format!("decoder.{i}");
        l.attention(&format!("{p}.self_attn"), d);
        l.norm(&format!("{p}.norm1"), d);
        l.attention(&format!("{p}.cross_attn"), d);
        l.norm(&format!("{p}.norm2"), d);
        l.linear(&format!("{p}.ffn.fc1"), d, cfg.ffn_dim, true);
        l.linear(&format!("{p}.ffn.fc2"), cfg.ffn_dim, d, true);
        l.norm(&format!("{p}.norm3"), d);
    }

    let mut c_in = 3;
    for (i, &w) in cfg.stem_widths.iter().enumerate() {
        l.conv3x3(&format!("stem.{i}"), c_in, w);
        c_in = w;
    }
    let [s0, s1] = cfg.shuffled_channels();
    l.conv3x3("upsample.0", s0, cfg.upsample_channels[0]);
    l.conv3x3("upsample.1", s1, cfg.upsample_channels[1]);
    l.conv1x1("mixer", cfg.upsample_channels[1] + cfg.stem_widths[2], cfg.pixel_dim);

    l.linear("kernel_head.fc1", d, cfg.kernel_mlp_hidden, true);
    l.linear("kernel_head.fc2", cfg.kernel_mlp_hidden, cfg.pixel_dim + 1, true);
    l.linear("refine_proj", cfg.pixel_dim, d, true);
    l.norm("refine_norm", d);
    l.linear("iou_head", d, 1, true);
    l.0
}

/// Exact number of trainable scalars for a configuration.
pub fn param_count(cfg: &DecoderConfig) -> usize {
    layout(cfg).iter().map(ParamSpec::numel).sum()
}

/// Named decoder parameters in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    tensors: IndexMap<String, Tensor>,
}

impl DecoderParams {
    pub fn init(cfg: &DecoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = IndexMap::new();
        for spec in layout(cfg) {
            let n = spec.numel();
            let data: Vec<f64> = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Constant(v) => vec![v; n],
                Init::FanIn(fan) => uniform(&mut rng, n, (3.0 / fan as f64).sqrt()),
                Init::Uniform(std) => uniform(&mut rng, n, std * 3f64.sqrt()),
            };
            tensors.insert(spec.name, Tensor::new(spec.shape, data)?);
        }
        Ok(Self { tensors })
    }

    /// Builds a parameter set from named tensors, checking them against the layout.
    pub fn from_tensors(cfg: &DecoderConfig, mut named: IndexMap<String, Tensor>) -> Result<Self> {
        let mut tensors = IndexMap::new();
        for spec in layout(cfg) {
            let t = named
                .shift_remove(&spec.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            tensors.insert(spec.name, t);
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::dim("DecoderParams::set", format!("{name} shape {:?}", value.shape())));
        }
        *slot = value;
        Ok(())
    }

    /// Applies `f` to the flat values of one tensor, re-validating finiteness.
    pub fn update(&mut self, name: &str, f: impl FnOnce(&mut [f64])) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        f(slot.data_mut());
        if slot.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "parameter update" });
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a trainable leaf of `g`.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> BoundParams {
        BoundParams {
            vars: self.tensors.iter().map(|(k, t)| (k.clone(), g.param(t))).collect(),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Graph handles for a bound parameter set.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
