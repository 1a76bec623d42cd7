use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Image family of a [`SynthDataset`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorKind {
    /// Oriented sinusoid under a Gaussian envelope. Class picks orientation
    /// and spatial frequency.
    GaborTexture,
    /// A filled shape on noise. Class picks the outline and the stripe
    /// frequency of the fill.
    ColoredShape,
}

impl GeneratorKind {
    pub fn name(self) -> &'static str {
        match self {
            GeneratorKind::GaborTexture => "gabor-texture",
            GeneratorKind::ColoredShape => "colored-shape",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gabor-texture" => Ok(GeneratorKind::GaborTexture),
            "colored-shape" => Ok(GeneratorKind::ColoredShape),
            other => Err(Error::Config(format!(
                "unknown generator `{other}`; expected gabor-texture or colored-shape"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub seed: u64,
    pub n_samples: usize,
    pub n_classes: usize,
    /// `(C, H, W)` of every image.
    pub image_dims: [usize; 3],
    pub kind: GeneratorKind,
}

/// Generated images `(N, C, H, W)` with one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let items = indices
            .iter()
            .map(|&i| self.images.sample(i))
            .collect::<Result<Vec<_>>>()?;
        Ok((Tensor::stack(&items)?, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// FNV-1a over the image bits and labels.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for v in self.images.data() {
            eat(&v.to_bits().to_le_bytes());
        }
        for &l in &self.labels {
            eat(&(l as u64).to_le_bytes());
        }
        h
    }
}

const ORIENTATIONS: usize = 4;

/// Cycles per pixel for frequency level `level`.
fn frequency(level: usize) -> f64 {
    [0.09, 0.3, 0.18, 0.4][level % 4]
}

impl SynthDataset {
    pub fn new(seed: u64, n_samples: usize, n_classes: usize, image_dims: [usize; 3], kind: GeneratorKind) -> Self {
        Self {
            seed,
            n_samples,
            n_classes,
            image_dims,
            kind,
        }
    }

    /// Labels cycle through the classes, so counts differ by at most one.
    pub fn generate(&self) -> Result<Samples> {
        if self.n_classes == 0 || self.n_samples == 0 {
            return Err(Error::Invalid(format!(
                "dataset needs samples and classes, got {} samples of {} classes",
                self.n_samples, self.n_classes
            )));
        }
        let [c, h, w] = self.image_dims;
        if c == 0 || h < 4 || w < 4 {
            return Err(Error::Invalid(format!("image dims {:?} are too small", self.image_dims)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut data = Vec::with_capacity(self.n_samples * c * h * w);
        let mut labels = Vec::with_capacity(self.n_samples);
        for i in 0..self.n_samples {
            let label = i % self.n_classes;
            let img = match self.kind {
                GeneratorKind::GaborTexture => gabor(label, c, h, w, &mut rng),
                GeneratorKind::ColoredShape => shape(label, c, h, w, &mut rng),
            };
            data.extend(img);
            labels.push(label);
        }
        Ok(Samples {
            images: Tensor::new([self.n_samples, c, h, w], data)?,
            labels,
            n_classes: self.n_classes,
        })
    }
}

fn add_noise(img: &mut [f32], std: f64, rng: &mut ChaCha8Rng) {
    let n = Normal::new(0.0, std).expect("positive std");
    for v in img {
        *v += n.sample(rng) as f32;
    }
}

fn tint(c: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..c).map(|_| rng.random_range(0.5..1.0)).collect()
}

fn gabor(label: usize, c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let theta = PI * (label % ORIENTATIONS) as f64 / ORIENTATIONS as f64 + rng.random_range(-0.1..0.1);
    let f = frequency(label / ORIENTATIONS) * rng.random_range(0.9..1.1);
    let phase = rng.random_range(0.0..2.0 * PI);
    let (cy, cx) = (
        rng.random_range(0.3..0.7) * h as f64,
        rng.random_range(0.3..0.7) * w as f64,
    );
    let sigma = rng.random_range(0.25..0.4) * h.min(w) as f64;
    let colour = tint(c, rng);
    let (ct, st) = (theta.cos(), theta.sin());
    let mut img = vec![0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let u = dx * ct + dy * st;
            let env = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            let v = env * (2.0 * PI * f * u + phase).cos();
            for (ch, k) in colour.iter().enumerate() {
                img[ch * h * w + y * w + x] = (v * k) as f32;
            }
        }
    }
    add_noise(&mut img, 0.1, rng);
    img
}

fn inside(outline: usize, dy: f64, dx: f64, r: f64) -> bool {
    match outline {
        0 => dy * dy + dx * dx <= r * r,
        1 => dy.abs() <= r * 0.85 && dx.abs() <= r * 0.85,
        2 => dy <= r * 0.7 && dy >= -r && dx.abs() <= (dy + r) * 0.6,
        _ => (dy.abs() <= r * 0.3 && dx.abs() <= r) || (dx.abs() <= r * 0.3 && dy.abs() <= r),
    }
}

fn shape(label: usize, c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let outline = label % ORIENTATIONS;
    let f = frequency(label / ORIENTATIONS) * rng.random_range(0.9..1.1);
    let r = rng.random_range(0.28..0.4) * h.min(w) as f64;
    let (cy, cx) = (
        rng.random_range(0.4..0.6) * h as f64,
        rng.random_range(0.4..0.6) * w as f64,
    );
    let theta = rng.random_range(0.0..PI);
    let (ct, st) = (theta.cos(), theta.sin());
    let phase = rng.random_range(0.0..2.0 * PI);
    let colour = tint(c, rng);
    let mut img = vec![0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            if !inside(outline, dy, dx, r) {
                continue;
            }
            let stripe = 0.5 + 0.5 * (2.0 * PI * f * (dx * ct + dy * st) + phase).cos();
            for (ch, k) in colour.iter().enumerate() {
                img[ch * h * w + y * w + x] = (k * stripe) as f32;
            }
        }
    }
    add_noise(&mut img, 0.1, rng);
    img
}
