//! Expert grouping and pixel-wise fusion of density experts.
//!
//! The hierarchical fusion is evaluated in two stages so each group output is
//! available for supervision:
//!
//! ```text
//! Gr_i  = sum_j  G1_ij * E_{groups[i][j]}
//! E_out = sum_i  G2_i  * Gr_i
//! ```

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Element;

/// All `N`-subsets of `K` experts, lexicographic, zero-based indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupPlan {
    pub k: usize,
    pub n: usize,
    pub groups: Vec<Vec<usize>>,
}

impl GroupPlan {
    pub fn m(&self) -> usize {
        self.groups.len()
    }
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

pub fn enumerate_groups(k: usize, n: usize) -> Result<GroupPlan> {
    if n == 0 || n >= k {
        return Err(Error::arg(format!("group size must satisfy 1 <= N < K, got K={k}, N={n}")));
    }
    let mut groups = Vec::with_capacity(binomial(k, n));
    let mut idx: Vec<usize> = (0..n).collect();
    loop {
        groups.push(idx.clone());
        // advance to the next combination in lexicographic order
        let Some(pos) = (0..n).rev().find(|&p| idx[p] < k - n + p) else {
            break;
        };
        idx[pos] += 1;
        for p in pos + 1..n {
            idx[p] = idx[p - 1] + 1;
        }
    }
    Ok(GroupPlan { k, n, groups })
}

fn check_same_shape<T: Element>(tape: &Tape<T>, maps: &[Var]) -> Result<()> {
    let Some(&first) = maps.first() else {
        return Ok(());
    };
    let shape = tape.shape(first);
    if let Some(&bad) = maps.iter().find(|&&m| tape.shape(m) != shape) {
        return Err(Error::shape(format!(
            "fusion inputs must share a shape: {:?} vs {:?}",
            shape,
            tape.shape(bad)
        )));
    }
    Ok(())
}

fn weighted_sum<T: Element>(tape: &mut Tape<T>, maps: &[Var], weights: &[Var]) -> Result<Var> {
    let mut all = maps.to_vec();
    all.extend_from_slice(weights);
    check_same_shape(tape, &all)?;
    let terms = maps
        .iter()
        .zip(weights)
        .map(|(&m, &g)| tape.mul(g, m))
        .collect::<Result<Vec<_>>>()?;
    tape.add_all(&terms)
}

/// Group outputs `Gr_i`; `level1[i][j]` weighs expert `plan.groups[i][j]`.
pub fn fuse_level1<T: Element>(
    tape: &mut Tape<T>,
    experts: &[Var],
    level1: &[Vec<Var>],
    plan: &GroupPlan,
) -> Result<Vec<Var>> {
    if experts.len() != plan.k {
        return Err(Error::arg(format!("plan expects {} experts, got {}", plan.k, experts.len())));
    }
    if level1.len() != plan.m() || level1.iter().any(|g| g.len() != plan.n) {
        return Err(Error::arg(format!("level-1 weights must be {}x{}", plan.m(), plan.n)));
    }
    plan.groups
        .iter()
        .zip(level1)
        .map(|(members, weights)| {
            let maps: Vec<Var> = members.iter().map(|&e| experts[e]).collect();
            weighted_sum(tape, &maps, weights)
        })
        .collect()
}

/// Final output `E_out` from group outputs and level-2 weights.
pub fn fuse_level2<T: Element>(tape: &mut Tape<T>, groups: &[Var], level2: &[Var]) -> Result<Var> {
    if groups.is_empty() || groups.len() != level2.len() {
        return Err(Error::arg(format!(
            "{} group outputs but {} level-2 weights",
            groups.len(),
            level2.len()
        )));
    }
    weighted_sum(tape, groups, level2)
}

pub fn fuse_baseline_average<T: Element>(tape: &mut Tape<T>, experts: &[Var]) -> Result<Var> {
    if experts.is_empty() {
        return Err(Error::arg("cannot average an empty expert list"));
    }
    check_same_shape(tape, experts)?;
    let total = tape.add_all(experts)?;
    Ok(tape.scale(total, 1.0 / experts.len() as f64))
}

/// Single-level mixture: `sum_k G_k * E_k`.
pub fn fuse_single_level_moe<T: Element>(tape: &mut Tape<T>, experts: &[Var], weights: &[Var]) -> Result<Var> {
    if experts.is_empty() || experts.len() != weights.len() {
        return Err(Error::shape(format!(
            "{} experts but {} weight maps",
            experts.len(),
            weights.len()
        )));
    }
    weighted_sum(tape, experts, weights)
}
