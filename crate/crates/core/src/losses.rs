//! Training losses: pixel-wise density MSE, relative local counting over
//! hard regions, gating attention cross entropy, expert importance, and the
//! composite over every supervised density output.

use crate::autodiff::{Tape, Var, SIGMOID_EPS};
use crate::backbone::{ExpertSet, GatingOutputs};
use crate::error::{Error, Result};
use crate::groundtruth::make_local_error_map;
use crate::tensor::{Element, Tensor};

/// Number of interleaved sub-lists the ranked hard regions are split into.
pub const SUBLISTS: usize = 3;
pub const DEFAULT_HARD_REGIONS: usize = 9;

/// Hard regions selected by local error and ordered by ground-truth count.
#[derive(Clone, Debug, PartialEq)]
pub struct HardRegionRanking {
    /// Flat region indices of the `S` largest local errors, largest first.
    pub selected: Vec<usize>,
    /// `selected` re-ordered by descending ground-truth count.
    pub ordered: Vec<usize>,
    /// Predicted counts read at `ordered`.
    pub lx: Vec<f64>,
    /// Positions into `lx`; sub-list `i` holds `i, i+3, i+6, ...`.
    pub sublists: [Vec<usize>; SUBLISTS],
}

fn shape_eq(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Mean over pixels of `(pred - gt)^2`.
pub fn loss_density<T: Element>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    shape_eq(tape.shape(pred), tape.shape(gt), "density loss shapes differ")?;
    let d = tape.sub(pred, gt)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Picks the `s` cells with the largest `r` (ties: lower index) and ranks
/// them by descending `xg` (stable, ties: lower index first).
pub fn select_hard_regions<T: Element>(
    x: &Tensor<T>,
    xg: &Tensor<T>,
    r: &Tensor<f64>,
    s: usize,
) -> Result<HardRegionRanking> {
    shape_eq(x.shape(), xg.shape(), "local count maps differ")?;
    if x.numel() != r.numel() {
        return Err(Error::shape(format!(
            "local error map has {} cells, counting map {}",
            r.numel(),
            x.numel()
        )));
    }
    if s == 0 {
        return Err(Error::arg("at least one hard region is required"));
    }
    let s = s.min(x.numel());
    let rv = r.data();
    let mut by_error: Vec<usize> = (0..rv.len()).collect();
    by_error.sort_by(|&a, &b| rv[b].total_cmp(&rv[a]).then(a.cmp(&b)));
    by_error.truncate(s);
    let selected = by_error;

    let g = xg.data();
    let mut ordered = selected.clone();
    ordered.sort_by(|&a, &b| g[b].as_f64().total_cmp(&g[a].as_f64()).then(a.cmp(&b)));
    let lx = ordered.iter().map(|&i| x.data()[i].as_f64()).collect();
    let sublists = std::array::from_fn(|i| (i..s).step_by(SUBLISTS).collect());
    Ok(HardRegionRanking {
        selected,
        ordered,
        lx,
        sublists,
    })
}

/// Consecutive `(earlier, later)` positions within each sub-list.
fn hinge_pairs(ranking: &HardRegionRanking) -> Vec<(usize, usize)> {
    ranking
        .sublists
        .iter()
        .flat_map(|list| list.windows(2).map(|w| (w[0], w[1])))
        .collect()
}

/// `sum max(0, x_{j+3} - x_j)` over each sub-list, on the ranking's values.
pub fn loss_relative(ranking: &HardRegionRanking) -> f64 {
    hinge_pairs(ranking)
        .into_iter()
        .map(|(a, b)| (ranking.lx[b] - ranking.lx[a]).max(0.0))
        .sum()
}

/// Differentiable relative loss; gradients reach `x` only through the
/// selected cells.
pub fn loss_relative_var<T: Element>(tape: &mut Tape<T>, x: Var, ranking: &HardRegionRanking) -> Result<Var> {
    let pairs = hinge_pairs(ranking);
    if pairs.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let earlier: Vec<usize> = pairs.iter().map(|&(a, _)| ranking.ordered[a]).collect();
    let later: Vec<usize> = pairs.iter().map(|&(_, b)| ranking.ordered[b]).collect();
    let e = tape.gather(x, &earlier)?;
    let l = tape.gather(x, &later)?;
    let d = tape.sub(l, e)?;
    let h = tape.relu(d);
    Ok(tape.sum(h))
}

/// Relative local counting loss of one predicted density map.
pub fn relative_loss_for_output<T: Element>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: Var,
    region: usize,
    hard_regions: usize,
) -> Result<Var> {
    let x = tape.block_sum(pred, region)?;
    let xg = tape.block_sum(gt, region)?;
    let r = make_local_error_map(tape.value(pred), tape.value(gt), region)?;
    let ranking = select_hard_regions(tape.value(x), tape.value(xg), &r.values, hard_regions)?;
    loss_relative_var(tape, x, &ranking)
}

/// Binary cross entropy, mean over pixels, with predictions clamped to
/// `[eps, 1-eps]`.
pub fn loss_attention<T: Element>(tape: &mut Tape<T>, pred: Var, gt_mask: Var) -> Result<Var> {
    shape_eq(tape.shape(pred), tape.shape(gt_mask), "attention shapes differ")?;
    let a = tape.clamp(pred, SIGMOID_EPS, 1.0 - SIGMOID_EPS);
    let log_a = tape.log(a);
    let neg = tape.scale(a, -1.0);
    let one_minus_a = tape.add_scalar(neg, 1.0);
    let log_1ma = tape.log(one_minus_a);
    let neg_g = tape.scale(gt_mask, -1.0);
    let one_minus_g = tape.add_scalar(neg_g, 1.0);
    let pos = tape.mul(gt_mask, log_a)?;
    let negp = tape.mul(one_minus_g, log_1ma)?;
    let ll = tape.add(pos, negp)?;
    let m = tape.mean(ll);
    Ok(tape.scale(m, -1.0))
}

/// `sum_i (sigma_i / mu_i)^2` over groups of pixel-integrated level-1 weights,
/// with the population standard deviation.
pub fn loss_expert_importance<T: Element>(tape: &mut Tape<T>, level1: &[Vec<Var>]) -> Result<Var> {
    if level1.is_empty() || level1.iter().any(Vec::is_empty) {
        return Err(Error::arg("expert importance needs non-empty groups"));
    }
    let mut terms = Vec::with_capacity(level1.len());
    for group in level1 {
        let n = group.len() as f64;
        let w: Vec<Var> = group.iter().map(|&g| tape.sum(g)).collect();
        let total = tape.add_all(&w)?;
        let mu = tape.scale(total, 1.0 / n);
        let sq = w
            .iter()
            .map(|&wi| {
                let d = tape.sub(wi, mu)?;
                Ok(tape.square(d))
            })
            .collect::<Result<Vec<_>>>()?;
        let ss = tape.add_all(&sq)?;
        let var = tape.scale(ss, 1.0 / n);
        let mu2 = tape.square(mu);
        terms.push(tape.div(var, mu2)?);
    }
    tape.add_all(&terms)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossConfig {
    /// Side of the local counting regions, in pixels.
    pub region: usize,
    pub hard_regions: usize,
}

/// Loss components summed over every supervised density output.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub density: Var,
    pub relative: Var,
    pub attention: Option<Var>,
    pub importance: Option<Var>,
}

impl LossBreakdown {
    pub fn component_names() -> [&'static str; 5] {
        ["total", "density", "relative", "attention", "importance"]
    }

    /// `(name, var)` for each present component, total first.
    pub fn components(&self) -> Vec<(&'static str, Var)> {
        let mut v = vec![("total", self.total), ("density", self.density), ("relative", self.relative)];
        if let Some(a) = self.attention {
            v.push(("attention", a));
        }
        if let Some(i) = self.importance {
            v.push(("importance", i));
        }
        v
    }
}

/// Unit-weighted sum of `L_Des + L_Rel` over all density outputs plus the
/// attention and expert-importance terms when gating is present.
pub fn loss_total<T: Element>(
    tape: &mut Tape<T>,
    outputs: &ExpertSet,
    gating: Option<&GatingOutputs>,
    gt: Var,
    gt_mask: Option<Var>,
    cfg: LossConfig,
) -> Result<LossBreakdown> {
    let mut des = Vec::new();
    let mut rel = Vec::new();
    for pred in outputs.supervised() {
        des.push(loss_density(tape, pred, gt)?);
        rel.push(relative_loss_for_output(tape, pred, gt, cfg.region, cfg.hard_regions)?);
    }
    let density = tape.add_all(&des)?;
    let relative = tape.add_all(&rel)?;
    let mut parts = vec![density, relative];

    let attention = match (gating.and_then(|g| g.attention), gt_mask) {
        (Some(a), Some(mask)) => Some(loss_attention(tape, a, mask)?),
        (Some(_), None) => return Err(Error::arg("attention output present but no ground-truth mask")),
        _ => None,
    };
    let importance = match gating {
        Some(g) if !g.level1.is_empty() => Some(loss_expert_importance(tape, &g.level1)?),
        _ => None,
    };
    parts.extend(attention);
    parts.extend(importance);
    let total = tape.add_all(&parts)?;
    Ok(LossBreakdown {
        total,
        density,
        relative,
        attention,
        importance,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, d).unwrap()
    }

    fn ranking_from_lx(lx: &[f64]) -> HardRegionRanking {
        let s = lx.len();
        HardRegionRanking {
            selected: (0..s).collect(),
            ordered: (0..s).collect(),
            lx: lx.to_vec(),
            sublists: std::array::from_fn(|i| (i..s).step_by(3).collect()),
        }
    }

    #[test]
    fn density_loss_cases() {
        let mut tape = Tape::<f64>::new();
        let gt = tape.constant(t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]));
        let same = tape.constant(t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]));
        let l = loss_density(&mut tape, same, gt).unwrap();
        assert_eq!(tape.item(l), 0.0);
        let plus = tape.constant(t(&[2, 2], &[1.1, 1.2, 1.3, 1.4]));
        let l = loss_density(&mut tape, plus, gt).unwrap();
        assert!((tape.item(l) - 1.0).abs() < 1e-12);
        let bad = tape.constant(t(&[4], &[0.0; 4]));
        assert!(matches!(loss_density(&mut tape, bad, gt), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn density_loss_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
        let g: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
        let oracle = p.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 30.0;
        let mut tape = Tape::<f64>::new();
        let pv = tape.constant(t(&[5, 6], &p));
        let gv = tape.constant(t(&[5, 6], &g));
        let l = loss_density(&mut tape, pv, gv).unwrap();
        assert!((tape.item(l) - oracle).abs() < 1e-6);
    }

    #[test]
    fn sublists_for_nine_regions() {
        let r = ranking_from_lx(&[0.0; 9]);
        assert_eq!(r.sublists, [vec![0, 3, 6], vec![1, 4, 7], vec![2, 5, 8]]);
        assert_eq!(DEFAULT_HARD_REGIONS, 9);
    }

    #[test]
    fn worked_relative_example() {
        let r = ranking_from_lx(&[1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 1.0, 1.0, 1.0]);
        assert_eq!(loss_relative(&r), 3.0);
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[9], &r.lx));
        let l = loss_relative_var(&mut tape, x, &r).unwrap();
        assert_eq!(tape.item(l), 3.0);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[-1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn descending_predictions_give_zero() {
        let r = ranking_from_lx(&[9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
        assert_eq!(loss_relative(&r), 0.0);
        for s in 1..=3 {
            assert_eq!(loss_relative(&ranking_from_lx(&vec![1.0; s].iter().enumerate().map(|(i, _)| i as f64).collect::<Vec<_>>())), 0.0);
        }
    }

    #[test]
    fn unique_error_maximum_with_one_region() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let r = t(&[2, 2], &[0.1, 0.9, 0.2, 0.3]);
        let rk = select_hard_regions(&x, &x, &r, 1).unwrap();
        assert_eq!(rk.selected, vec![1]);
        assert_eq!(rk.lx, vec![2.0]);
        let all = select_hard_regions(&x, &x, &r, 100).unwrap();
        assert_eq!(all.selected.len(), 4);
        assert!(select_hard_regions(&x, &x, &r, 0).is_err());
    }

    #[test]
    fn attention_loss_cases() {
        let mut tape = Tape::<f64>::new();
        let mask = tape.constant(t(&[2, 2], &[1.0, 0.0, 1.0, 0.0]));
        let half = tape.constant(Tensor::full(&[2, 2], 0.5).unwrap());
        let l = loss_attention(&mut tape, half, mask).unwrap();
        assert!((tape.item(l) - 2f64.ln()).abs() < 1e-12);
        let exact = tape.constant(t(&[2, 2], &[1.0, 0.0, 1.0, 0.0]));
        let l = loss_attention(&mut tape, exact, mask).unwrap();
        assert!((tape.item(l) + (1.0 - SIGMOID_EPS).ln()).abs() < 1e-12);
        assert!(tape.item(l) < 1e-6);
    }

    #[test]
    fn attention_loss_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f64> = (0..20).map(|_| rng.random_range(0.01..0.99)).collect();
        let g: Vec<f64> = (0..20).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let oracle = -a
            .iter()
            .zip(&g)
            .map(|(&a, &g)| g * a.ln() + (1.0 - g) * (1.0 - a).ln())
            .sum::<f64>()
            / 20.0;
        let mut tape = Tape::<f64>::new();
        let av = tape.constant(t(&[4, 5], &a));
        let gv = tape.constant(t(&[4, 5], &g));
        let l = loss_attention(&mut tape, av, gv).unwrap();
        assert!((tape.item(l) - oracle).abs() < 1e-6);
    }

    #[test]
    fn importance_loss_cases() {
        let mut tape = Tape::<f64>::new();
        let half = tape.constant(Tensor::full(&[4, 4], 0.5).unwrap());
        let l = loss_expert_importance(&mut tape, &[vec![half, half], vec![half, half]]).unwrap();
        assert_eq!(tape.item(l), 0.0);
        let hi = tape.constant(Tensor::full(&[4, 4], 0.75).unwrap());
        let lo = tape.constant(Tensor::full(&[4, 4], 0.25).unwrap());
        let l = loss_expert_importance(&mut tape, &[vec![hi, lo]]).unwrap();
        assert!((tape.item(l) - 0.25).abs() < 1e-12);
        // Invariant to group order and member order.
        let l2 = loss_expert_importance(&mut tape, &[vec![half, half], vec![lo, hi]]).unwrap();
        let l3 = loss_expert_importance(&mut tape, &[vec![hi, lo], vec![half, half]]).unwrap();
        assert_eq!(tape.item(l2), tape.item(l3));
        assert!((tape.item(l2) - 0.25).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn relative_loss_scales_and_shifts(seed in any::<u64>(), s in 1usize..16, c in 0.1f64..10.0, shift in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lx: Vec<f64> = (0..s).map(|_| rng.random_range(0.0..4.0)).collect();
            let base = loss_relative(&ranking_from_lx(&lx));
            let scaled = loss_relative(&ranking_from_lx(&lx.iter().map(|v| v * c).collect::<Vec<_>>()));
            let shifted = loss_relative(&ranking_from_lx(&lx.iter().map(|v| v + shift).collect::<Vec<_>>()));
            prop_assert!(base >= 0.0);
            prop_assert!((scaled - c * base).abs() < 1e-9 * (1.0 + scaled));
            prop_assert!((shifted - base).abs() < 1e-9 * (1.0 + base));
            let descending = ranking_from_lx(&lx).sublists.iter().all(|l| l.windows(2).all(|w| lx[w[0]] >= lx[w[1]]));
            prop_assert_eq!(base == 0.0, descending);
        }

        #[test]
        fn unselected_regions_do_not_affect_relative_loss(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..3.0)).collect();
            let xg: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..3.0)).collect();
            let r: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..1.0)).collect();
            let rk = select_hard_regions(&t(&[4, 4], &x), &t(&[4, 4], &xg), &t(&[4, 4], &r), 5).unwrap();
            let outside = (0..16).find(|i| !rk.selected.contains(i)).unwrap();
            let mut x2 = x.clone();
            x2[outside] += 100.0;
            let rk2 = select_hard_regions(&t(&[4, 4], &x2), &t(&[4, 4], &xg), &t(&[4, 4], &r), 5).unwrap();
            prop_assert_eq!(loss_relative(&rk), loss_relative(&rk2));
        }
    }
}
