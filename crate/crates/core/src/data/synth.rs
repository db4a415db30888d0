use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::AnnotatedImage;
use crate::error::{Error, Result};
use crate::groundtruth::{in_bounds, Point};
use crate::tensor::Tensor;

/// Parameters of one clustered synthetic crowd scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub image_size: (usize, usize),
    /// Inclusive bounds on the realized head count.
    pub count_range: (usize, usize),
    pub cluster_count: usize,
    pub blob_radius: f64,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    pub fn new(image_size: (usize, usize), seed: u64) -> Self {
        Self {
            image_size,
            count_range: (10, 60),
            cluster_count: 3,
            blob_radius: 3.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        let (lo, hi) = self.count_range;
        if h == 0 || w == 0 {
            return Err(Error::arg("synthetic image size must be positive"));
        }
        if lo > hi {
            return Err(Error::arg(format!("count range ({lo}, {hi}) is empty")));
        }
        if hi > h * w {
            return Err(Error::arg(format!("{hi} heads do not fit a {h}x{w} image")));
        }
        if hi > 0 && self.cluster_count == 0 {
            return Err(Error::arg("heads need at least one cluster"));
        }
        if !(self.blob_radius > 0.0) {
            return Err(Error::arg("blob radius must be positive"));
        }
        Ok(())
    }
}

const BACKGROUND: f32 = 0.15;
const BLOB_PEAK: f32 = 0.5;

/// Clustered heads rendered as soft bright blobs on a faint textured
/// background; grayscale replicated to three channels.
pub fn synth_generate(spec: &SyntheticSceneSpec) -> Result<AnnotatedImage> {
    spec.validate()?;
    let (h, w) = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let count = rng.random_range(spec.count_range.0..=spec.count_range.1);

    let centers: Vec<Point> = (0..spec.cluster_count)
        .map(|_| Point::new(rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)))
        .collect();
    let spread = Normal::new(0.0, h.min(w) as f64 / 8.0).expect("positive spread");
    let mut points = Vec::with_capacity(count);
    while points.len() < count {
        let c = centers[rng.random_range(0..centers.len())];
        let mut p = Point::new(c.x + spread.sample(&mut rng), c.y + spread.sample(&mut rng));
        if !in_bounds(&p, h, w) {
            p = Point::new(rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        }
        points.push(p);
    }

    let (fx, fy, phase) = (
        rng.random_range(0.02..0.1),
        rng.random_range(0.02..0.1),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let mut gray: Vec<f32> = (0..h * w)
        .map(|i| {
            let (r, c) = ((i / w) as f64, (i % w) as f64);
            let texture = 0.04 * ((fx * c + fy * r + phase).sin()) as f32;
            BACKGROUND + texture + rng.random_range(-0.02f32..0.02)
        })
        .collect();

    let radius = spec.blob_radius;
    let reach = radius.ceil() as isize;
    for p in &points {
        let (cx, cy) = (p.x.floor() as isize, p.y.floor() as isize);
        for r in (cy - reach).max(0)..=(cy + reach).min(h as isize - 1) {
            for c in (cx - reach).max(0)..=(cx + reach).min(w as isize - 1) {
                let dx = c as f64 + 0.5 - p.x;
                let dy = r as f64 + 0.5 - p.y;
                let t = (dx * dx + dy * dy) / (radius * radius);
                if t < 1.0 {
                    let v = &mut gray[r as usize * w + c as usize];
                    *v += BLOB_PEAK * (1.0 - t as f32).powi(2);
                }
            }
        }
    }
    gray.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(&gray);
    }
    Ok(AnnotatedImage {
        name: format!("synth_{:06}", spec.seed),
        image: Tensor::new(&[3, h, w], data)?,
        points,
    })
}

/// `count` scenes sharing `spec` except for the seed, which runs
/// `spec.seed, spec.seed + 1, ...`.
pub fn synth_dataset(spec: &SyntheticSceneSpec, count: usize) -> Result<Vec<AnnotatedImage>> {
    (0..count as u64)
        .map(|i| {
            synth_generate(&SyntheticSceneSpec {
                seed: spec.seed.wrapping_add(i),
                ..spec.clone()
            })
        })
        .collect()
}
