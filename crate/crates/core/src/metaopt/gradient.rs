//! Meta-gradient of the reweighted query objective.
//!
//! For one user with support features `f_p` and query features `g_q`, gd
//! inner steps `w_{t+1} = w_t - alpha * grad_S(w_t)` and query loss
//! `L_Q(w_n)`, the reverse pass carries `v_t = dL/dw_t`:
//!
//! ```text
//! v_n = grad_Q(w_n)
//! v_t = (I - alpha * H_S(w_t)) v_{t+1}
//! ```
//!
//! and `grad_w0 = v_0`. Base functions receive three contributions: the
//! query features directly, and through `grad_S` at every inner step both the
//! residual term and the Hessian-curvature term. In first-order mode only the
//! query path is kept and `grad_w0 = grad_Q(w_n)`.
//!
//! User weights from the robust aggregation enter as constants.

use rayon::prelude::*;

use crate::btcore::{sigmoid, softplus};
use crate::corpus::TaskSplit;
use crate::metaopt::inner::{adapt_on_features, backprop_pair, tape_pairs, InnerTrace, PairTape};
use crate::metaopt::{GradMode, MetaConfig};
use crate::rewardnet::{BaseFunction, ModelParams};
use crate::rpo;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MetaGradient {
    pub grad_w0: Vec<f64>,
    pub grad_phis: Vec<BaseFunction>,
    pub per_user_query_loss: Vec<f64>,
    pub rpo_weights: Vec<f64>,
    pub tau: f64,
    /// `sum_i c_i L_i`.
    pub objective: f64,
}

/// Euclidean norm without overflow for large finite entries.
fn l2(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc: f64, x| acc.hypot(*x))
}

impl MetaGradient {
    pub fn as_params(&self) -> ModelParams {
        ModelParams {
            w0: self.grad_w0.clone(),
            phis: self.grad_phis.clone(),
        }
    }

    pub fn norm_w0(&self) -> f64 {
        l2(&self.grad_w0)
    }

    pub fn norm_phi(&self) -> f64 {
        let mut flat = Vec::new();
        self.grad_phis.iter().for_each(|p| p.write_flat(&mut flat));
        l2(&flat)
    }

    pub fn is_finite(&self) -> bool {
        self.objective.is_finite() && self.as_params().is_finite()
    }
}

struct TaskForward<'a> {
    support: Vec<PairTape<'a>>,
    query: Vec<PairTape<'a>>,
    trace: InnerTrace,
    query_loss: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_tasks(tasks: &[TaskSplit]) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::Empty("task list"));
    }
    if let Some(t) = tasks.iter().find(|t| t.query.is_empty()) {
        return Err(Error::InvalidConfig(format!("user {} has an empty query set", t.user_id)));
    }
    Ok(())
}

fn forward_task<'a>(params: &ModelParams, task: &'a TaskSplit, cfg: &MetaConfig) -> Result<TaskForward<'a>> {
    let support = tape_pairs(params, &task.support)?;
    let query = tape_pairs(params, &task.query)?;
    let feats: Vec<Vec<f64>> = support.iter().map(|t| t.feats.clone()).collect();
    let trace = adapt_on_features(&params.w0, &feats, cfg)?;
    let w = trace.iterates.last().expect("trace holds w0");
    let query_loss = query.iter().map(|q| softplus(-dot(w, &q.feats))).sum();
    Ok(TaskForward {
        support,
        query,
        trace,
        query_loss,
    })
}

fn backward_task(params: &ModelParams, fwd: &TaskForward<'_>, weight: f64, cfg: &MetaConfig) -> ModelParams {
    let mut grad = params.zeros_like();
    if weight == 0.0 {
        return grad;
    }
    let k = params.k();
    let w_n = fwd.trace.iterates.last().expect("trace holds w0");

    // query path
    let mut v = vec![0.0; k];
    let mut up = vec![0.0; k];
    for q in &fwd.query {
        let s = sigmoid(-dot(w_n, &q.feats));
        for i in 0..k {
            v[i] -= weight * s * q.feats[i];
            up[i] = -weight * s * w_n[i];
        }
        backprop_pair(params, q, &up, &mut grad);
    }

    if cfg.grad_mode == GradMode::Exact && cfg.n_inner > 0 {
        let alpha = cfg.alpha;
        let mut support_up = vec![vec![0.0; k]; fwd.support.len()];
        for t in (0..cfg.n_inner).rev() {
            let w_t = &fwd.trace.iterates[t];
            let mut hv = vec![0.0; k];
            for (p, acc) in fwd.support.iter().zip(support_up.iter_mut()) {
                let z = dot(w_t, &p.feats);
                let s = sigmoid(-z);
                let h = sigmoid(z) * s;
                let vf = dot(&v, &p.feats);
                // d/df of <v, -alpha * grad_S(w_t)>
                for i in 0..k {
                    acc[i] -= alpha * (-s * v[i] + vf * h * w_t[i]);
                    hv[i] += h * vf * p.feats[i];
                }
            }
            for i in 0..k {
                v[i] -= alpha * hv[i];
            }
        }
        for (p, u) in fwd.support.iter().zip(&support_up) {
            backprop_pair(params, p, u, &mut grad);
        }
    }
    grad.w0 = v;
    grad
}

fn aggregate(losses: &[f64], cfg: &MetaConfig) -> Result<rpo::RpoResult> {
    rpo::aggregate(cfg.aggregate_mode, losses, cfg.rho, cfg.gamma)
}

/// Meta-gradient over a batch of tasks. Contributions are reduced in task
/// order, so the result does not depend on the thread schedule.
pub fn meta_gradient(params: &ModelParams, tasks: &[TaskSplit], cfg: &MetaConfig) -> Result<MetaGradient> {
    cfg.validate()?;
    check_tasks(tasks)?;
    let forwards = tasks
        .par_iter()
        .map(|t| forward_task(params, t, cfg))
        .collect::<Result<Vec<_>>>()?;
    let losses: Vec<f64> = forwards.iter().map(|f| f.query_loss).collect();
    if let Some(bad) = losses.iter().find(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("query loss {bad}")));
    }
    let agg = aggregate(&losses, cfg)?;
    let grads: Vec<ModelParams> = forwards
        .par_iter()
        .zip(agg.weights.par_iter())
        .map(|(f, &c)| backward_task(params, f, c, cfg))
        .collect();

    let mut total = params.zeros_like().to_flat();
    for g in &grads {
        for (acc, x) in total.iter_mut().zip(g.to_flat()) {
            *acc += x;
        }
    }
    let mut out = params.zeros_like();
    out.set_flat(&total);
    Ok(MetaGradient {
        grad_w0: out.w0,
        grad_phis: out.phis,
        per_user_query_loss: losses,
        rpo_weights: agg.weights,
        tau: agg.tau,
        objective: agg.aggregate,
    })
}

/// `sum_i weights[i] * L_Q,i(w_i(params))` with the weights held fixed.
pub fn meta_objective(params: &ModelParams, tasks: &[TaskSplit], cfg: &MetaConfig, weights: &[f64]) -> Result<f64> {
    check_tasks(tasks)?;
    if weights.len() != tasks.len() {
        return Err(Error::DimensionMismatch {
            expected: tasks.len(),
            found: weights.len(),
        });
    }
    let mut total = 0.0;
    for (t, c) in tasks.iter().zip(weights) {
        total += c * forward_task(params, t, cfg)?.query_loss;
    }
    Ok(total)
}
