//! Seeded synthetic salient-object images.
//!
//! Every image draws from its own ChaCha8 stream: the generator is
//! `ChaCha8Rng::seed_from_u64(seed)` with `set_stream(index)`, so image `i`
//! depends only on `(seed, i)` and generation can run in any order.
//!
//! Salient blobs are smooth (low-frequency texture) and brighter than the
//! background, which carries per-pixel noise. Distractors have blob-like
//! brightness but background-like noise, so telling them apart needs texture
//! and not only intensity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GroundTruthMask, Image};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub channels: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    /// Blob radius range as a fraction of the image side.
    pub min_radius: f64,
    pub max_radius: f64,
    /// Probability that an image contains a bright, noisy distractor.
    pub distractor_rate: f64,
    pub background_level: f64,
    pub blob_level: f64,
    /// Amplitude of the per-pixel uniform noise on background and distractors.
    pub noise: f64,
    /// Amplitude of the smooth texture inside blobs.
    pub texture: f64,
    /// Bounds on the salient fraction of each mask.
    pub min_fraction: f64,
    pub max_fraction: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            channels: 3,
            min_blobs: 1,
            max_blobs: 3,
            min_radius: 0.12,
            max_radius: 0.28,
            distractor_rate: 0.2,
            background_level: 0.3,
            blob_level: 0.62,
            noise: 0.14,
            texture: 0.06,
            min_fraction: 0.05,
            max_fraction: 0.5,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self, size: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if size < 16 {
            return bad(format!("image size {size} is below 16"));
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.min_blobs == 0 || self.min_blobs > self.max_blobs {
            return bad(format!("blob count range {}..={} is empty", self.min_blobs, self.max_blobs));
        }
        if !(self.min_radius > 0.0 && self.min_radius <= self.max_radius) {
            return bad(format!("radius range {}..{} is invalid", self.min_radius, self.max_radius));
        }
        if self.max_radius > 0.5 {
            return bad(format!("blob radius {} exceeds half the image", self.max_radius));
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return bad(format!("distractor rate {} outside [0,1]", self.distractor_rate));
        }
        if !(0.0 <= self.min_fraction && self.min_fraction < self.max_fraction && self.max_fraction <= 1.0) {
            return bad("salient fraction bounds are invalid".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlobShape {
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        cos: f64,
        sin: f64,
    },
    /// Star-shaped polygon: vertices at increasing angles around a centre.
    Polygon { vertices: Vec<(f64, f64)> },
}

impl BlobShape {
    fn random(rng: &mut ChaCha8Rng, size: f64, p: &GeneratorParams) -> Self {
        let r_lo = p.min_radius * size;
        let r_hi = p.max_radius * size;
        let r = rng.gen_range(r_lo..=r_hi);
        let cy = rng.gen_range(r..=size - r);
        let cx = rng.gen_range(r..=size - r);
        if rng.gen_bool(0.5) {
            let aspect = rng.gen_range(0.6..=1.0);
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            BlobShape::Ellipse {
                cy,
                cx,
                ry: r,
                rx: r * aspect,
                cos: theta.cos(),
                sin: theta.sin(),
            }
        } else {
            let n = rng.gen_range(5..=7);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let vertices = (0..n)
                .map(|k| {
                    let a = phase + std::f64::consts::TAU * k as f64 / n as f64;
                    let rr = r * rng.gen_range(0.7..=1.0);
                    (cy + rr * a.sin(), cx + rr * a.cos())
                })
                .collect();
            BlobShape::Polygon { vertices }
        }
    }

    /// Whether the point `(y, x)` (pixel centres sit at `row + 0.5`) is inside.
    pub fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            BlobShape::Ellipse {
                cy,
                cx,
                ry,
                rx,
                cos,
                sin,
            } => {
                let (dy, dx) = (y - cy, x - cx);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            BlobShape::Polygon { vertices } => {
                // even-odd ray casting
                let mut inside = false;
                let n = vertices.len();
                for i in 0..n {
                    let (yi, xi) = vertices[i];
                    let (yj, xj) = vertices[(i + n - 1) % n];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }
}

/// One generated sample.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    pub mask: GroundTruthMask,
    pub blobs: Vec<BlobShape>,
}

const MAX_ATTEMPTS: usize = 200;

/// Generates image `index` of the stream identified by `seed`.
pub fn generate_one(seed: u64, index: u64, size: usize, p: &GeneratorParams) -> Result<Sample> {
    p.validate(size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let s = size as f64;
    let hw = size * size;

    let mut blobs = Vec::new();
    let mut mask = vec![0u8; hw];
    for attempt in 0.. {
        if attempt == MAX_ATTEMPTS {
            return Err(Error::InvalidInput(format!(
                "could not place blobs with salient fraction in [{}, {}]",
                p.min_fraction, p.max_fraction
            )));
        }
        let n = rng.gen_range(p.min_blobs..=p.max_blobs);
        blobs = (0..n).map(|_| BlobShape::random(&mut rng, s, p)).collect::<Vec<_>>();
        for (idx, m) in mask.iter_mut().enumerate() {
            let (y, x) = ((idx / size) as f64 + 0.5, (idx % size) as f64 + 0.5);
            *m = u8::from(blobs.iter().any(|b| b.contains(y, x)));
        }
        let frac = mask.iter().map(|&m| m as f64).sum::<f64>() / hw as f64;
        if (p.min_fraction..=p.max_fraction).contains(&frac) {
            break;
        }
    }

    let distractor = if rng.gen_bool(p.distractor_rate) {
        Some(BlobShape::random(&mut rng, s, p))
    } else {
        None
    };

    let c = p.channels;
    let tint = |rng: &mut ChaCha8Rng, level: f64| -> Vec<f64> {
        (0..c).map(|_| level + rng.gen_range(-0.06..=0.06)).collect()
    };
    let bg = tint(&mut rng, p.background_level);
    let fg: Vec<Vec<f64>> = blobs.iter().map(|_| tint(&mut rng, p.blob_level)).collect();
    let fd = tint(&mut rng, p.blob_level);
    // low-frequency texture: one plane wave per image
    let (fy, fx, phase) = (
        rng.gen_range(0.15..0.45),
        rng.gen_range(0.15..0.45),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    // slow illumination ramp over the whole image
    let (gy, gx) = (rng.gen_range(-0.06..=0.06), rng.gen_range(-0.06..=0.06));

    let mut data = vec![0.0; hw * c];
    for idx in 0..hw {
        let (row, col) = (idx / size, idx % size);
        let (y, x) = (row as f64 + 0.5, col as f64 + 0.5);
        let ramp = gy * (y / s - 0.5) + gx * (x / s - 0.5);
        let owner = blobs.iter().position(|b| b.contains(y, x));
        for ch in 0..c {
            let noise = rng.gen_range(-p.noise..=p.noise);
            let v = match owner {
                Some(b) => fg[b][ch] + p.texture * (fy * y + fx * x + phase).sin() + 0.15 * noise,
                None if distractor.as_ref().is_some_and(|d| d.contains(y, x)) => fd[ch] + noise,
                None => bg[ch] + noise,
            };
            data[idx * c + ch] = (v + ramp).clamp(0.0, 1.0);
        }
    }
    Ok(Sample {
        image: Image::new(size, size, c, data)?,
        mask: GroundTruthMask::new(size, size, mask)?,
        blobs,
    })
}

/// Generates `count` consecutive samples starting at stream `first_index`.
pub fn generate(seed: u64, first_index: u64, count: usize, size: usize, p: &GeneratorParams) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::InvalidInput("sample count must be at least 1".into()));
    }
    (0..count as u64)
        .map(|i| generate_one(seed, first_index + i, size, p))
        .collect()
}
