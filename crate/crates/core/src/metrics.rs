//! Counting metrics: MAE, root-mean-square count error (reported as "MSE" by
//! crowd-counting convention) and the grid average mean absolute error
//! GAME(L) for L = 0..3.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groundtruth::{DensityMap, HeadAnnotation};

pub const GAME_LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub name: String,
    pub pred_count: f64,
    pub gt_count: f64,
    pub game: [f64; GAME_LEVELS],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mae: f64,
    pub mse: f64,
    pub game: [f64; GAME_LEVELS],
    pub per_image: Vec<ImageEval>,
}

#[derive(Serialize, Deserialize)]
struct Summary {
    mae: f64,
    mse: f64,
    game: [f64; GAME_LEVELS],
}

/// `(mae, rmse)` of predicted counts against annotation counts.
pub fn eval_counts(preds: &[DensityMap], gts: &[HeadAnnotation]) -> Result<(f64, f64)> {
    if preds.len() != gts.len() {
        return Err(Error::arg(format!("{} predictions for {} annotations", preds.len(), gts.len())));
    }
    let pairs: Vec<(f64, f64)> = preds.iter().zip(gts).map(|(p, g)| (p.count(), g.count() as f64)).collect();
    mae_rmse(&pairs)
}

fn mae_rmse(pairs: &[(f64, f64)]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::arg("cannot evaluate an empty image list"));
    }
    let n = pairs.len() as f64;
    let mae = pairs.iter().map(|(p, g)| (p - g).abs()).sum::<f64>() / n;
    let mse = (pairs.iter().map(|(p, g)| (p - g).powi(2)).sum::<f64>() / n).sqrt();
    Ok((mae, mse))
}

/// Cell boundaries along one axis at GAME level `level`. Cells are unions of
/// a finest grid of `2^min(3, floor(log2 len))` cells, so every level refines
/// the previous one; remainder pixels go to the last cell.
fn bounds(len: usize, level: u32) -> Vec<(usize, usize)> {
    let finest = (GAME_LEVELS as u32 - 1).min(len.ilog2());
    let unit = (len >> finest) << (finest - level);
    let cells = 1usize << level;
    (0..cells)
        .map(|i| (i * unit, if i + 1 == cells { len } else { (i + 1) * unit }))
        .collect()
}

/// Sum over a `2^L x 2^L` grid of per-cell absolute count errors.
pub fn eval_game(pred: &DensityMap, gt: &DensityMap, level: u32) -> Result<f64> {
    if level as usize >= GAME_LEVELS {
        return Err(Error::arg(format!("GAME level must be 0..=3, got {level}")));
    }
    let (h, w) = (pred.height(), pred.width());
    if (h, w) != (gt.height(), gt.width()) {
        return Err(Error::shape(format!(
            "prediction {h}x{w} vs ground truth {}x{}",
            gt.height(),
            gt.width()
        )));
    }
    let cells = 1usize << level;
    if h < cells || w < cells {
        return Err(Error::arg(format!("{h}x{w} map is smaller than a {cells}x{cells} grid")));
    }
    let (p, g) = (pred.values().data(), gt.values().data());
    let mut err = 0.0;
    for &(r0, r1) in &bounds(h, level) {
        for &(c0, c1) in &bounds(w, level) {
            let (mut sp, mut sg) = (0.0, 0.0);
            for r in r0..r1 {
                for c in c0..c1 {
                    sp += p[r * w + c];
                    sg += g[r * w + c];
                }
            }
            err += (sp - sg).abs();
        }
    }
    Ok(err)
}

impl EvalReport {
    /// Builds the report from predicted maps, ground-truth density maps and
    /// annotation counts, one entry per image.
    pub fn from_maps(
        names: &[String],
        preds: &[DensityMap],
        gt_maps: &[DensityMap],
        gt_counts: &[usize],
    ) -> Result<Self> {
        let n = preds.len();
        if names.len() != n || gt_maps.len() != n || gt_counts.len() != n {
            return Err(Error::arg("evaluation inputs must have equal lengths"));
        }
        let mut per_image = Vec::with_capacity(n);
        for i in 0..n {
            let (pred_count, gt_count) = (preds[i].count(), gt_counts[i] as f64);
            // Level 0 is the whole-image count error against the annotation.
            let mut game = [(pred_count - gt_count).abs(); GAME_LEVELS];
            for (l, g) in game.iter_mut().enumerate().skip(1) {
                *g = eval_game(&preds[i], &gt_maps[i], l as u32)?;
            }
            per_image.push(ImageEval {
                name: names[i].clone(),
                pred_count,
                gt_count,
                game,
            });
        }
        let pairs: Vec<(f64, f64)> = per_image.iter().map(|e| (e.pred_count, e.gt_count)).collect();
        let (mae, mse) = mae_rmse(&pairs)?;
        let mut game = [0.0; GAME_LEVELS];
        for (l, g) in game.iter_mut().enumerate() {
            *g = per_image.iter().map(|e| e.game[l]).sum::<f64>() / n as f64;
        }
        Ok(Self { mae, mse, game, per_image })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["image", "pred_count", "gt_count", "game0", "game1", "game2", "game3"])?;
        for e in &self.per_image {
            let mut row = vec![e.name.clone(), e.pred_count.to_string(), e.gt_count.to_string()];
            row.extend(e.game.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&Summary {
            mae: self.mae,
            mse: self.mse,
            game: self.game,
        })
        .expect("plain numbers serialize")
    }
}
