//! Supervision targets derived from head-point annotations.
//!
//! Coordinates follow the pixel-area convention: pixel `(row, col)` covers
//! `[col, col+1) x [row, row+1)` and its center sits at `(col+0.5, row+0.5)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_SIGMA: f64 = 4.0;
pub const DEFAULT_ATTENTION_THRESHOLD: f64 = 1e-5;
/// Gaussian stamps are truncated at `ceil(TRUNCATE_SIGMAS * sigma)` pixels.
pub const TRUNCATE_SIGMAS: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Head centers of one image. All points lie in `[0,W) x [0,H)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadAnnotation {
    points: Vec<Point>,
    height: usize,
    width: usize,
}

impl HeadAnnotation {
    pub fn new(points: Vec<Point>, height: usize, width: usize) -> Result<Self> {
        if let Some(p) = points.iter().find(|p| !in_bounds(p, height, width)) {
            return Err(Error::Annotation {
                file: "<annotation>".into(),
                line: None,
                msg: format!("point ({}, {}) outside {height}x{width} image", p.x, p.y),
            });
        }
        Ok(Self {
            points,
            height,
            width,
        })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

pub(crate) fn in_bounds(p: &Point, height: usize, width: usize) -> bool {
    p.x >= 0.0 && p.y >= 0.0 && p.x < width as f64 && p.y < height as f64
}

/// Non-negative `[H,W]` density whose total approximates a head count.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap(Tensor<f64>);

impl DensityMap {
    pub fn new(values: Tensor<f64>) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::shape(format!("density map must be [H,W], got {:?}", values.shape())));
        }
        Ok(Self(values))
    }

    /// Converts any single-channel map (`[H,W]` or `[1,H,W]`) to a density map.
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Self> {
        let (c, h, w) = t.chw()?;
        if c != 1 {
            return Err(Error::shape(format!("density map needs one channel, got {c}")));
        }
        Self::new(Tensor::new(&[h, w], t.to_f64_vec())?)
    }

    pub fn values(&self) -> &Tensor<f64> {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn count(&self) -> f64 {
        self.0.sum()
    }
}

/// Binary foreground mask, 1 where the ground-truth density exceeds a threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask(Tensor<f64>);

impl AttentionMask {
    pub fn values(&self) -> &Tensor<f64> {
        &self.0
    }

    pub fn area(&self) -> usize {
        self.0.data().iter().filter(|&&v| v == 1.0).count()
    }
}

/// Block sums of a density map over `region x region` tiles.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalCountingMap {
    pub values: Tensor<f64>,
    pub region: usize,
}

/// Block sums of pixel-wise squared error over `region x region` tiles.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalErrorMap {
    pub values: Tensor<f64>,
    pub region: usize,
}

/// Stamps one renormalized, truncated isotropic Gaussian per head.
pub fn make_density_gt(ann: &HeadAnnotation, sigma: f64) -> Result<DensityMap> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::arg(format!("sigma must be positive, got {sigma}")));
    }
    let (h, w) = ann.size();
    let mut map = vec![0.0f64; h * w];
    let radius = (TRUNCATE_SIGMAS * sigma).ceil() as isize;
    let denom = 2.0 * sigma * sigma;
    let mut stamp = Vec::new();
    for p in ann.points() {
        if !in_bounds(p, h, w) {
            return Err(Error::Annotation {
                file: "<annotation>".into(),
                line: None,
                msg: format!("point ({}, {}) outside {h}x{w} image", p.x, p.y),
            });
        }
        let (cx, cy) = (p.x.floor() as isize, p.y.floor() as isize);
        let rows = (cy - radius).max(0)..=(cy + radius).min(h as isize - 1);
        let cols = (cx - radius).max(0)..=(cx + radius).min(w as isize - 1);
        stamp.clear();
        let mut mass = 0.0;
        for r in rows {
            for c in cols.clone() {
                let dx = c as f64 + 0.5 - p.x;
                let dy = r as f64 + 0.5 - p.y;
                let v = (-(dx * dx + dy * dy) / denom).exp();
                mass += v;
                stamp.push((r as usize * w + c as usize, v));
            }
        }
        for &(idx, v) in &stamp {
            map[idx] += v / mass;
        }
    }
    DensityMap::new(Tensor::new(&[h, w], map)?)
}

pub fn make_attention_gt(gt: &DensityMap, threshold: f64) -> Result<AttentionMask> {
    if !(threshold > 0.0) {
        return Err(Error::arg(format!("attention threshold must be positive, got {threshold}")));
    }
    let v = gt.values();
    let mask = v.data().iter().map(|&d| if d > threshold { 1.0 } else { 0.0 }).collect();
    Ok(AttentionMask(Tensor::new(v.shape(), mask)?))
}

pub fn make_local_count_map(d: &DensityMap, region: usize) -> Result<LocalCountingMap> {
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(d.values().clone());
    let x = local_count_var(&mut tape, v, region)?;
    Ok(LocalCountingMap {
        values: tape.value(x).clone(),
        region,
    })
}

/// Differentiable local counting map of a density value on a tape.
pub fn local_count_var<T: Element>(tape: &mut Tape<T>, density: Var, region: usize) -> Result<Var> {
    tape.block_sum(density, region)
}

/// Regions are ranked on this map only, so it carries no gradient.
pub fn make_local_error_map<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>, region: usize) -> Result<LocalErrorMap> {
    let (pc, ph, pw) = pred.chw()?;
    let (gc, gh, gw) = gt.chw()?;
    if (pc, ph, pw) != (gc, gh, gw) || pc != 1 {
        return Err(Error::shape(format!(
            "prediction {:?} and ground truth {:?} must be matching single-channel maps",
            pred.shape(),
            gt.shape()
        )));
    }
    let sq: Vec<f64> = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| {
            let d = p.as_f64() - g.as_f64();
            d * d
        })
        .collect();
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(Tensor::new(&[ph, pw], sq)?);
    let r = tape.block_sum(v, region)?;
    Ok(LocalErrorMap {
        values: tape.value(r).clone(),
        region,
    })
}
