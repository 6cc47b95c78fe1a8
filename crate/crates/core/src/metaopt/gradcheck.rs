//! Central-difference verification of [`meta_gradient`].

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{PreferencePair, SplitTag, TaskSplit};
use crate::metaopt::{meta_gradient, meta_objective, GradMode, MetaConfig};
use crate::rewardnet::ModelParams;
use crate::seeding;
use crate::{Error, Result};

/// Denominator floor for relative errors, so coordinates whose true
/// derivative is zero (e.g. output biases, which cancel in pair features)
/// are judged by absolute error.
pub const GRADCHECK_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockError {
    /// `w0` or `phi_<k>` (1-based).
    pub block: String,
    pub n_coords: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockError>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.blocks.iter().all(|b| b.max_rel_err <= tol)
    }
}

/// A small random problem for gradient checks: Gaussian embeddings, random
/// pair orientation, randomly initialized parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TinyInstance {
    #[serde(default = "three")]
    pub d: usize,
    #[serde(default = "two")]
    pub n_tasks: usize,
    #[serde(default = "three")]
    pub n_support: usize,
    #[serde(default = "three")]
    pub n_query: usize,
    #[serde(default)]
    pub seed: u64,
}

fn two() -> usize {
    2
}

fn three() -> usize {
    3
}

impl Default for TinyInstance {
    fn default() -> Self {
        TinyInstance {
            d: 3,
            n_tasks: 2,
            n_support: 3,
            n_query: 3,
            seed: 0,
        }
    }
}

impl TinyInstance {
    /// Parameters (shaped by `cfg.k`, `cfg.arch`, `cfg.hidden`) and tasks.
    pub fn build(&self, cfg: &MetaConfig) -> Result<(ModelParams, Vec<TaskSplit>)> {
        if self.d == 0 || self.n_tasks == 0 || self.n_query == 0 {
            return Err(Error::InvalidConfig("tiny instance needs d, n_tasks, n_query >= 1".into()));
        }
        let mut rng = seeding::rng_from(seeding::derive_seed(self.seed, "", "tiny"));
        let params = ModelParams::init(cfg.k, cfg.arch, self.d, cfg.hidden, &mut rng)?;
        let emb = |rng: &mut seeding::Rng| -> Vec<f64> { (0..self.d).map(|_| StandardNormal.sample(rng)).collect() };
        let tasks = (0..self.n_tasks)
            .map(|t| {
                let user_id = format!("t{t}");
                let mut pairs: Vec<PreferencePair> = (0..self.n_support + self.n_query)
                    .map(|j| PreferencePair {
                        user_id: user_id.clone(),
                        pair_id: format!("{user_id}-p{j}"),
                        emb_chosen: emb(&mut rng),
                        emb_rejected: emb(&mut rng),
                        split: SplitTag::Train,
                    })
                    .collect();
                let query = pairs.split_off(self.n_support);
                TaskSplit {
                    user_id,
                    support: pairs,
                    query,
                }
            })
            .collect();
        Ok((params, tasks))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// Compares the exact meta-gradient against central differences of the
/// composed objective on every coordinate. Aggregation weights are frozen at
/// their values for `params`, matching the gradient's semantics.
pub fn finite_difference_check(
    params: &ModelParams,
    tasks: &[TaskSplit],
    cfg: &MetaConfig,
    step: f64,
) -> Result<GradCheckReport> {
    if cfg.grad_mode != GradMode::Exact {
        return Err(Error::InvalidConfig("gradient check needs grad_mode=exact".into()));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidConfig(format!("step must be > 0, got {step}")));
    }
    let mg = meta_gradient(params, tasks, cfg)?;
    let analytic = mg.as_params().to_flat();
    let base = params.to_flat();

    let mut probe = params.clone();
    let mut eval = |x: &[f64]| -> Result<f64> {
        probe.set_flat(x);
        let v = meta_objective(&probe, tasks, cfg, &mg.rpo_weights)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("meta objective".into()))
        }
    };

    let mut x = base.clone();
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        x[i] = base[i] + step;
        let fp = eval(&x)?;
        x[i] = base[i] - step;
        let fm = eval(&x)?;
        x[i] = base[i];
        numeric.push((fp - fm) / (2.0 * step));
    }

    let mut sizes = vec![("w0".to_string(), params.k())];
    sizes.extend(
        params
            .phis
            .iter()
            .enumerate()
            .map(|(k, p)| (format!("phi_{}", k + 1), p.n_params())),
    );
    let mut offset = 0;
    let blocks = sizes
        .into_iter()
        .map(|(block, n)| {
            let range = offset..offset + n;
            offset += n;
            let (mut max_abs_err, mut max_rel_err) = (0.0f64, 0.0f64);
            for i in range {
                max_abs_err = max_abs_err.max((analytic[i] - numeric[i]).abs());
                max_rel_err = max_rel_err.max(relative_error(analytic[i], numeric[i]));
            }
            BlockError {
                block,
                n_coords: n,
                max_abs_err,
                max_rel_err,
            }
        })
        .collect();
    Ok(GradCheckReport { blocks })
}
