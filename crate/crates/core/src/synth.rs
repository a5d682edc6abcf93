//! Deterministic synthetic fixtures: Gaussian-blob image streams and a separable vector
//! stream for the tree learners.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::{Dataset, Image, ImageShape, LabeledExample};

/// How one class draws its images: a blob of width `radius` whose center jitters around
/// `center` with standard deviation `sigma` (all in pixels).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassGenerator {
    /// `(row, col)`
    pub center: [f64; 2],
    pub sigma: f64,
    pub radius: f64,
    /// Peak intensity per channel.
    pub color: Vec<f64>,
}

/// Abrupt drift: from item `at` onward, classes `swap[0]` and `swap[1]` exchange generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Drift {
    pub at: usize,
    pub swap: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Stream (training) items.
    pub count: usize,
    /// Test items, drawn after the stream from the pre-drift generators.
    pub test_count: usize,
    /// Per-pixel Gaussian noise std.
    pub noise: f64,
    /// Position jitter used by the automatic generators.
    pub sigma: f64,
    /// Blob width used by the automatic generators.
    pub radius: f64,
    /// Explicit generators; when absent, centers are spread on a circle.
    pub classes: Option<Vec<ClassGenerator>>,
    pub drift: Option<Drift>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 3,
            channels: 3,
            height: 16,
            width: 16,
            count: 3000,
            test_count: 600,
            noise: 0.3,
            sigma: 3.0,
            radius: 2.0,
            classes: None,
            drift: None,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn shape(&self) -> ImageShape {
        ImageShape::new(self.channels, self.height, self.width)
    }

    /// The generators in effect: the explicit list or evenly spaced centers on a circle with a
    /// shared color.
    pub fn generators(&self) -> Result<Vec<ClassGenerator>> {
        if self.num_classes < 2 {
            return Err(Error::config(format!("a synthetic stream needs at least 2 classes, got {}", self.num_classes)));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config("synthetic image dimensions must be positive"));
        }
        if let Some(g) = &self.classes {
            if g.len() != self.num_classes || g.iter().any(|g| g.color.len() != self.channels) {
                return Err(Error::config("explicit generators must match the class and channel counts"));
            }
            return Ok(g.clone());
        }
        let (h, w) = (self.height as f64, self.width as f64);
        let ring = 0.3 * h.min(w);
        Ok((0..self.num_classes)
            .map(|c| {
                let a = std::f64::consts::TAU * c as f64 / self.num_classes as f64;
                ClassGenerator {
                    center: [(h - 1.0) / 2.0 + ring * a.sin(), (w - 1.0) / 2.0 + ring * a.cos()],
                    sigma: self.sigma,
                    radius: self.radius,
                    color: vec![0.9; self.channels],
                }
            })
            .collect())
    }
}

fn render<R: Rng>(g: &ClassGenerator, spec: &SyntheticSpec, rng: &mut R) -> Image {
    let shape = spec.shape();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let cy = g.center[0] + g.sigma * std_normal.sample(rng);
    let cx = g.center[1] + g.sigma * std_normal.sample(rng);
    let inv = 1.0 / (2.0 * g.radius.max(1e-6).powi(2));
    let mut pixels = Vec::with_capacity(shape.len());
    for ch in 0..spec.channels {
        for y in 0..spec.height {
            for x in 0..spec.width {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let mut v = g.color[ch] * (-d2 * inv).exp();
                if spec.noise > 0.0 {
                    v += spec.noise * std_normal.sample(rng);
                }
                // quantized to 8 bits so in-memory and on-disk fixtures agree exactly
                pixels.push(((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32);
            }
        }
    }
    Image::new(shape, pixels).expect("clamped pixels")
}

/// Generates `(stream, test)` datasets. Item `i` of the stream has label `i mod C`; after the
/// drift point the swapped classes draw from each other's generators.
pub fn make_synthetic_stream(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    let generators = spec.generators()?;
    if let Some(d) = &spec.drift {
        if d.swap.iter().any(|&c| c >= spec.num_classes) {
            return Err(Error::config("drift swaps a class outside the class range"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let source = |label: usize, i: usize| match &spec.drift {
        Some(d) if i >= d.at && label == d.swap[0] => d.swap[1],
        Some(d) if i >= d.at && label == d.swap[1] => d.swap[0],
        _ => label,
    };
    let stream = (0..spec.count)
        .map(|i| {
            let label = i % spec.num_classes;
            let image = render(&generators[source(label, i)], spec, &mut rng);
            LabeledExample { image, label }
        })
        .collect();
    let test = (0..spec.test_count)
        .map(|i| {
            let label = i % spec.num_classes;
            let image = render(&generators[label], spec, &mut rng);
            LabeledExample { image, label }
        })
        .collect();
    Ok((
        Dataset::new(spec.shape(), spec.num_classes, stream)?,
        Dataset::new(spec.shape(), spec.num_classes, test)?,
    ))
}

/// Noiseless separable vectors: uniform features in `[0, 1)`, label `floor(x0 · C)`.
pub fn separable_stream(n: usize, dim: usize, num_classes: usize, seed: u64) -> Vec<(Vec<f32>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x: Vec<f32> = (0..dim).map(|_| rng.random::<f32>()).collect();
            let label = ((x[0] * num_classes as f32) as usize).min(num_classes - 1);
            (x, label)
        })
        .collect()
}
