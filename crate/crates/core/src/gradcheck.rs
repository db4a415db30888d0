//! Finite-difference verification of every parameter gradient of the loss
//! components on a small 64-bit model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::backbone::{BackboneConfig, Model};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::groundtruth::{make_attention_gt, make_density_gt, HeadAnnotation, Point, DEFAULT_ATTENTION_THRESHOLD};
use crate::losses::{loss_total, LossBreakdown, LossConfig};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-3;
pub const STEP: f64 = 1e-5;
pub const INPUT_SIZE: usize = 8;
/// Narrow kernels leave part of the 8x8 attention mask at zero.
pub const SIGMA: f64 = 1.0;
/// Denominator floor of the relative error, so entries whose true gradient
/// is zero compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;
const HEADS: usize = 3;

/// Model, input and targets of one check.
pub struct Fixture {
    pub model: Model<f64>,
    pub image: Tensor<f64>,
    pub density: Tensor<f64>,
    pub mask: Tensor<f64>,
    pub loss: LossConfig,
}

/// Gradients indexed `[component][parameter][entry]`, components in
/// [`LossBreakdown::component_names`] order.
pub type Gradients = Vec<Vec<Vec<f64>>>;

#[derive(Clone, Debug, Serialize)]
pub struct ComponentReport {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub entries: usize,
    pub components: Vec<ComponentReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.max_rel_err < self.tolerance)
    }
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "gradcheck over {} parameter entries, tolerance {:e}", self.entries, self.tolerance)?;
        for c in &self.components {
            let verdict = if c.max_rel_err < self.tolerance { "ok" } else { "FAIL" };
            writeln!(
                f,
                "  {:<11} max rel err {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e}) {verdict}",
                c.name, c.max_rel_err, c.worst_param, c.worst_index, c.analytic, c.numeric
            )?;
        }
        write!(f, "{}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

impl Fixture {
    /// 8x8 model built from the config's K, N, fusion mode, S and seed, with
    /// small random biases so few ReLUs sit at their kink.
    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        if !INPUT_SIZE.is_multiple_of(cfg.w_divisor) {
            return Err(Error::Config {
                key: "w_divisor".into(),
                msg: format!("must divide the {INPUT_SIZE}px gradcheck input"),
            });
        }
        let backbone = BackboneConfig::from_preset(cfg.preset, cfg.k, cfg.n)
            .with_fusion(cfg.fusion_mode)
            .with_input_size(INPUT_SIZE, INPUT_SIZE);
        let mut model = Model::<f64>::new(backbone, cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6A09_E667_F3BC_C908);
        for p in model.params_mut() {
            if p.name.ends_with(".bias") {
                p.value.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.05..0.15));
            }
        }
        let n = INPUT_SIZE;
        let image = Tensor::new(&[3, n, n], (0..3 * n * n).map(|_| rng.random_range(0.0..1.0)).collect())?;
        let points = (0..HEADS)
            .map(|_| Point::new(rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64)))
            .collect();
        let gt = make_density_gt(&HeadAnnotation::new(points, n, n)?, SIGMA)?;
        let mask = make_attention_gt(&gt, DEFAULT_ATTENTION_THRESHOLD)?;
        Ok(Self {
            model,
            image,
            density: gt.values().clone().reshape(&[1, n, n])?,
            mask: mask.values().clone().reshape(&[1, n, n])?,
            loss: LossConfig {
                region: INPUT_SIZE / cfg.w_divisor,
                hard_regions: cfg.s,
            },
        })
    }

    /// Forward pass with parameter `perturb.0`, entry `perturb.1`, shifted by
    /// `perturb.2`.
    fn forward(&self, perturb: Option<(usize, usize, f64)>) -> Result<(Tape<f64>, Vec<crate::Var>, LossBreakdown)> {
        let mut tape = Tape::new();
        let p: Vec<_> = self
            .model
            .params()
            .iter()
            .enumerate()
            .map(|(i, q)| {
                let mut v = q.value.clone();
                if let Some((pi, e, h)) = perturb.filter(|t| t.0 == i) {
                    debug_assert_eq!(pi, i);
                    v.data_mut()[e] += h;
                }
                tape.param(v)
            })
            .collect();
        let x = tape.constant(self.image.clone());
        let out = self.model.forward(&mut tape, &p, x)?;
        let gt = tape.constant(self.density.clone());
        let mask = out.gating.as_ref().and_then(|g| g.attention).map(|_| tape.constant(self.mask.clone()));
        let parts = loss_total(&mut tape, &out.experts, out.gating.as_ref(), gt, mask, self.loss)?;
        Ok((tape, p, parts))
    }

    /// Names of the components present for this model, total first.
    pub fn component_names(&self) -> Result<Vec<&'static str>> {
        let (_, _, parts) = self.forward(None)?;
        Ok(parts.components().into_iter().map(|(n, _)| n).collect())
    }

    fn values(&self, perturb: Option<(usize, usize, f64)>) -> Result<Vec<f64>> {
        let (tape, _, parts) = self.forward(perturb)?;
        Ok(parts.components().into_iter().map(|(_, v)| tape.item(v)).collect())
    }

    /// Reverse-mode gradients, one backward pass per component.
    pub fn analytic(&self) -> Result<Gradients> {
        let (mut tape, p, parts) = self.forward(None)?;
        let mut out = Vec::new();
        for (_, root) in parts.components() {
            tape.zero_grad();
            tape.backward(root)?;
            out.push(
                p.iter()
                    .zip(self.model.params())
                    .map(|(&v, q)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; q.value.numel()]))
                    .collect(),
            );
        }
        Ok(out)
    }

    /// Central differences; each perturbed forward yields every component.
    pub fn numeric(&self) -> Result<Gradients> {
        let entries: Vec<(usize, usize)> = self
            .model
            .params()
            .iter()
            .enumerate()
            .flat_map(|(i, q)| (0..q.value.numel()).map(move |e| (i, e)))
            .collect();
        let diffs: Vec<Vec<f64>> = entries
            .par_iter()
            .map(|&(i, e)| {
                let plus = self.values(Some((i, e, STEP)))?;
                let minus = self.values(Some((i, e, -STEP)))?;
                Ok(plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * STEP)).collect())
            })
            .collect::<Result<_>>()?;
        let components = diffs.first().map_or(0, Vec::len);
        let mut out: Gradients = (0..components)
            .map(|_| self.model.params().iter().map(|q| vec![0.0; q.value.numel()]).collect())
            .collect();
        for (&(i, e), d) in entries.iter().zip(&diffs) {
            for (c, &v) in d.iter().enumerate() {
                out[c][i][e] = v;
            }
        }
        Ok(out)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` gradients against central differences.
pub fn compare(fixture: &Fixture, analytic: &Gradients, numeric: &Gradients) -> Result<GradcheckReport> {
    let names = fixture.component_names()?;
    if analytic.len() != names.len() || numeric.len() != names.len() {
        return Err(Error::arg("gradient sets do not cover every loss component"));
    }
    let params = fixture.model.params();
    let components = names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let mut worst = ComponentReport {
                name: name.to_string(),
                max_rel_err: 0.0,
                worst_param: params[0].name.clone(),
                worst_index: 0,
                analytic: 0.0,
                numeric: 0.0,
            };
            for (i, q) in params.iter().enumerate() {
                for (e, (&a, &n)) in analytic[c][i].iter().zip(&numeric[c][i]).enumerate() {
                    let err = relative_error(a, n);
                    if !(err <= worst.max_rel_err) {
                        worst = ComponentReport {
                            max_rel_err: err,
                            worst_param: q.name.clone(),
                            worst_index: e,
                            analytic: a,
                            numeric: n,
                            ..worst
                        };
                    }
                }
            }
            worst
        })
        .collect();
    Ok(GradcheckReport {
        tolerance: TOLERANCE,
        entries: fixture.model.param_count(),
        components,
    })
}

/// Full check with a caller-supplied analytic gradient source.
pub fn run_with(fixture: &Fixture, analytic: impl FnOnce(&Fixture) -> Result<Gradients>) -> Result<GradcheckReport> {
    let a = analytic(fixture)?;
    let n = fixture.numeric()?;
    compare(fixture, &a, &n)
}

/// Checks the config's model at 64-bit precision regardless of its
/// `precision` key.
pub fn run(cfg: &TrainConfig) -> Result<GradcheckReport> {
    let fixture = Fixture::from_config(cfg)?;
    run_with(&fixture, Fixture::analytic)
}
