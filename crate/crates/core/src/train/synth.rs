//! Seeded synthetic scenes and a fixed random-projection feature encoder
//! that stands in for backbone features.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, DecoderInputs};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

pub const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.15, 0.25, 0.90],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.98, 0.98, 0.98],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Rectangle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Rectangle, Shape::Triangle];

    fn index(self) -> usize {
        match self {
            Shape::Circle => 0,
            Shape::Rectangle => 1,
            Shape::Triangle => 2,
        }
    }
}

/// A placed shape: kind, color index and pixel bounding box `[x1, y1, x2, y2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Placed {
    shape: Shape,
    color: usize,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl Placed {
    fn contains(&self, px: f64, py: f64) -> bool {
        match self.shape {
            Shape::Rectangle => px >= self.x1 && px < self.x2 && py >= self.y1 && py < self.y2,
            Shape::Circle => {
                let (cx, cy) = ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0);
                let r = (self.x2 - self.x1) / 2.0;
                (px - cx).powi(2) + (py - cy).powi(2) <= r * r
            }
            Shape::Triangle => {
                // Apex at top center, base along the bottom edge.
                if py < self.y1 || py >= self.y2 {
                    return false;
                }
                let t = (py - self.y1) / (self.y2 - self.y1);
                let cx = (self.x1 + self.x2) / 2.0;
                let half = t * (self.x2 - self.x1) / 2.0;
                px >= cx - half && px < cx + half
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    pub memory_grid: [usize; 2],
    pub vit_channels: Vec<usize>,
    pub mm_dim: usize,
    pub seg_dim: usize,
    pub max_distractors: usize,
    /// Target area as a fraction of the image.
    pub min_area_ratio: f64,
    pub max_area_ratio: f64,
    pub noise: f64,
    /// Seed of the fixed feature projections.
    pub encoder_seed: u64,
}

impl SynthConfig {
    pub fn for_decoder(cfg: &DecoderConfig) -> Self {
        let [h, w] = cfg.image_size();
        debug_assert_eq!(h, w);
        Self {
            image_size: h,
            memory_grid: cfg.memory_grid,
            vit_channels: cfg.vit_channels.clone(),
            mm_dim: cfg.mm_dim,
            seg_dim: cfg.seg_dim,
            max_distractors: 3,
            min_area_ratio: 0.01,
            max_area_ratio: 0.5,
            noise: 0.03,
            encoder_seed: 0x5eed_f00d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [hm, wm] = self.memory_grid;
        if hm == 0 || wm == 0 || self.image_size % hm != 0 || self.image_size % wm != 0 {
            return Err(Error::Config(format!(
                "image size {} must be a multiple of the memory grid {hm}×{wm}",
                self.image_size
            )));
        }
        if !(0.0 < self.min_area_ratio && self.min_area_ratio < self.max_area_ratio && self.max_area_ratio <= 0.5) {
            return Err(Error::Config("area ratios must satisfy 0 < min < max <= 0.5".into()));
        }
        if self.max_distractors + 1 > PALETTE.len() {
            return Err(Error::Config(format!("at most {} distractors", PALETTE.len() - 1)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub target_mask: BinaryMask,
    /// Normalized tight box of `target_mask`.
    pub target_box: BBox,
    /// Pixel tight box `[x1, y1, x2, y2)`.
    pub target_box_px: [usize; 4],
    pub target_shape: Shape,
    pub target_color: usize,
    pub distractors: usize,
    pub inputs: DecoderInputs,
}

impl SyntheticSample {
    pub fn image(&self) -> &Tensor {
        &self.inputs.image
    }
}

/// Fixed random projections shared by every sample of a configuration.
#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    cfg: SynthConfig,
    /// Per level: pooling factor and a `C × 3p²` projection.
    levels: Vec<(usize, Vec<f64>)>,
    /// `mm_dim × 15` over the per-cell mean and its four quadrant means.
    mm_proj: Vec<f64>,
    seg_proj: Vec<f64>,
}

const MM_IN: usize = 15;
const SEG_IN: usize = PALETTE.len() + 3;

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let scale = 1.0 / (cols as f64).sqrt();
    (0..rows * cols)
        .map(|_| {
            // Box-Muller.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * scale
        })
        .collect()
}

impl SyntheticGenerator {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.encoder_seed);
        let cell = cfg.image_size / cfg.memory_grid[0];
        let levels = cfg
            .vit_channels
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                let p = (1usize << l.min(2)).min(cell);
                (p, gaussian_matrix(&mut rng, c, 3 * p * p))
            })
            .collect();
        let mm_proj = gaussian_matrix(&mut rng, cfg.mm_dim, MM_IN);
        let seg_proj = gaussian_matrix(&mut rng, cfg.seg_dim, SEG_IN);
        Ok(Self {
            cfg,
            levels,
            mm_proj,
            seg_proj,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    /// Sample `index` of the stream identified by `seed`.
    pub fn sample(&self, seed: u64, index: u64) -> Result<SyntheticSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        let s = self.cfg.image_size;
        let sf = s as f64;

        let mut colors: Vec<usize> = (0..PALETTE.len()).collect();
        colors.shuffle(&mut rng);
        let target_color = colors[0];
        let target_shape = Shape::ALL[rng.gen_range(0..3)];
        let n_distract = rng.gen_range(0..=self.cfg.max_distractors);

        let mut shapes = Vec::with_capacity(n_distract + 1);
        for &color in &colors[1..=n_distract] {
            let shape = Shape::ALL[rng.gen_range(0..3)];
            let ratio = rng.gen_range(self.cfg.min_area_ratio..0.15f64.max(self.cfg.min_area_ratio * 2.0));
            shapes.push(place(&mut rng, shape, color, ratio, sf));
        }
        let (lo, hi) = (self.cfg.min_area_ratio, self.target_max_ratio(target_shape));
        let side = rng.gen_range(lo.sqrt()..hi.sqrt());
        let target = place(&mut rng, target_shape, target_color, side * side, sf);
        shapes.push(target);

        let base: [f64; 3] = [
            rng.gen_range(0.25..0.45),
            rng.gen_range(0.25..0.45),
            rng.gen_range(0.25..0.45),
        ];
        let mut image = vec![0.0; 3 * s * s];
        let mut mask = BinaryMask::empty(s, s);
        for y in 0..s {
            for x in 0..s {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut rgb = base;
                let mut is_target = false;
                for (k, sh) in shapes.iter().enumerate() {
                    if sh.contains(px, py) {
                        rgb = PALETTE[sh.color];
                        is_target = k == shapes.len() - 1;
                    }
                }
                if is_target {
                    mask.set(x, y, true);
                }
                for c in 0..3 {
                    let n = rng.gen_range(-self.cfg.noise..=self.cfg.noise);
                    image[(c * s + y) * s + x] = (rgb[c] + n).clamp(0.0, 1.0);
                }
            }
        }
        let target_box_px = mask
            .bbox()
            .ok_or_else(|| Error::Validation("synthetic target rasterized to an empty mask".into()))?;
        let target_box = BBox::from_pixels(target_box_px.map(|v| v as f64), s, s)?;

        let image = Tensor::new(vec![3, s, s], image)?;
        let inputs = self.encode(&image, target_color, target_shape, target_box)?;
        Ok(SyntheticSample {
            target_mask: mask,
            target_box,
            target_box_px,
            target_shape,
            target_color,
            distractors: n_distract,
            inputs,
        })
    }

    fn target_max_ratio(&self, shape: Shape) -> f64 {
        match shape {
            // A triangle inscribed in the image covers at most half of it.
            Shape::Triangle => self.cfg.max_area_ratio.min(0.4),
            _ => self.cfg.max_area_ratio,
        }
    }

    /// Pseudo backbone outputs for an image and a referred (color, shape).
    pub fn encode(&self, image: &Tensor, color: usize, shape: Shape, target_box: BBox) -> Result<DecoderInputs> {
        let s = self.cfg.image_size;
        let [hm, wm] = self.cfg.memory_grid;
        let cell = s / hm;
        let img = image.data();
        // Mean color of a square block.
        let block_mean = |x0: usize, y0: usize, size: usize| -> [f64; 3] {
            let mut acc = [0.0; 3];
            for c in 0..3 {
                for y in y0..y0 + size {
                    let row = &img[(c * s + y) * s + x0..(c * s + y) * s + x0 + size];
                    acc[c] += row.iter().sum::<f64>();
                }
                acc[c] /= (size * size) as f64;
            }
            acc
        };

        let mut vis_features = Vec::with_capacity(self.levels.len());
        for ((p, proj), &ch) in self.levels.iter().zip(&self.cfg.vit_channels) {
            let sub = cell / p;
            let fan = 3 * p * p;
            let mut out = vec![0.0; ch * hm * wm];
            let mut v = vec![0.0; fan];
            for cy in 0..hm {
                for cx in 0..wm {
                    for by in 0..*p {
                        for bx in 0..*p {
                            let m = block_mean(cx * cell + bx * sub, cy * cell + by * sub, sub);
                            for c in 0..3 {
                                v[(by * p + bx) * 3 + c] = m[c] - 0.5;
                            }
                        }
                    }
                    for o in 0..ch {
                        let z: f64 = proj[o * fan..(o + 1) * fan].iter().zip(&v).map(|(a, b)| a * b).sum();
                        out[(o * hm + cy) * wm + cx] = (2.0 * z).tanh();
                    }
                }
            }
            vis_features.push(Tensor::new(vec![ch, hm, wm], out)?);
        }

        let mut mm = vec![0.0; hm * wm * self.cfg.mm_dim];
        let half = cell / 2;
        for cy in 0..hm {
            for cx in 0..wm {
                let mut v = [0.0; MM_IN];
                v[..3].copy_from_slice(&block_mean(cx * cell, cy * cell, cell));
                for (k, (bx, by)) in [(0, 0), (1, 0), (0, 1), (1, 1)].into_iter().enumerate() {
                    let m = block_mean(cx * cell + bx * half, cy * cell + by * half, half.max(1));
                    v[3 + 3 * k..6 + 3 * k].copy_from_slice(&m);
                }
                let tok = cy * wm + cx;
                for o in 0..self.cfg.mm_dim {
                    let z: f64 = self.mm_proj[o * MM_IN..(o + 1) * MM_IN]
                        .iter()
                        .zip(&v)
                        .map(|(a, b)| a * (b - 0.5))
                        .sum();
                    mm[tok * self.cfg.mm_dim + o] = (2.0 * z).tanh();
                }
            }
        }

        let mut code = [0.0; SEG_IN];
        code[color] = 1.0;
        code[PALETTE.len() + shape.index()] = 1.0;
        let seg: Vec<f64> = (0..self.cfg.seg_dim)
            .map(|o| self.seg_proj[o * SEG_IN..(o + 1) * SEG_IN].iter().zip(&code).map(|(a, b)| a * b).sum())
            .collect();

        Ok(DecoderInputs {
            vis_features,
            mm_embeddings: Tensor::new(vec![hm * wm, self.cfg.mm_dim], mm)?,
            seg_token: Tensor::new(vec![1, self.cfg.seg_dim], seg)?,
            boxes: vec![target_box],
            image: image.clone(),
        })
    }
}

/// Places a shape of roughly `ratio` of the image area entirely inside the image.
fn place(rng: &mut ChaCha8Rng, shape: Shape, color: usize, ratio: f64, s: f64) -> Placed {
    let area = ratio * s * s;
    let (w, h) = match shape {
        Shape::Circle => {
            let d = 2.0 * (area / std::f64::consts::PI).sqrt();
            (d, d)
        }
        Shape::Rectangle => {
            let lo = (area / (0.95 * s).powi(2)).max(0.5);
            let hi = ((0.95 * s).powi(2) / area).min(2.0);
            let r = if lo < hi { rng.gen_range(lo..hi) } else { 1.0 };
            ((area * r).sqrt(), (area / r).sqrt())
        }
        Shape::Triangle => {
            let lo = (2.0 * area / (0.95 * s).powi(2)).max(0.8);
            let hi = ((0.95 * s).powi(2) / (2.0 * area)).min(1.25);
            let k = if lo < hi { rng.gen_range(lo..hi) } else { 1.0 };
            let h = (2.0 * area / k).sqrt();
            (h * k, h)
        }
    };
    let (w, h) = (w.min(s - 2.0), h.min(s - 2.0));
    let x1 = rng.gen_range(1.0..(s - w - 1.0).max(1.0 + f64::EPSILON));
    let y1 = rng.gen_range(1.0..(s - h - 1.0).max(1.0 + f64::EPSILON));
    Placed {
        shape,
        color,
        x1,
        y1,
        x2: x1 + w,
        y2: y1 + h,
    }
}

/// `count` consecutive samples of the stream `seed`.
pub fn generate_samples(seed: u64, count: usize, cfg: &SynthConfig) -> Result<Vec<SyntheticSample>> {
    let gen = SyntheticGenerator::new(cfg.clone())?;
    (0..count as u64).map(|i| gen.sample(seed, i)).collect()
}
