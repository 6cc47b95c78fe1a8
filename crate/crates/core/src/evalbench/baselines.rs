//! Ablation variants and the non-personalized reference, trained under the
//! same epoch/batch/learning-rate budget as the full method.
//!
//! * `mrm`: meta-trained `w0` and base functions, robust aggregation.
//! * `no-rpo`: same with plain summed query losses.
//! * `per-user`: base functions and one weight vector per seen user fitted
//!   jointly on pooled training pairs, no support/query structure. Unseen
//!   users start from the uniform `1/K` weights and take the same inner
//!   steps as the full method.
//! * `single-mlp`: one tanh network whose whole parameter vector is adapted
//!   per user (first order) and meta-updated in the outer loop.
//! * `shared-bt`: one reward function fitted on pooled data, no
//!   personalization.

use std::fmt;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::btcore::{bt_grad, sigmoid, softplus};
use crate::corpus::{Corpus, Population, PreferencePair, TaskSplit, UserDataset};
use crate::evalbench::metrics::{accuracy_of, check_dim, evaluate_users, shot_prefix};
use crate::evalbench::{evaluate_adapted, evaluate_fixed, EvalReport};
use crate::metaopt::{adapt_user, build_tasks, meta_train, train_on_tasks, AdamState, GradMode, MetaConfig};
use crate::rewardnet::{param_count, Arch, BaseFunction, ModelParams};
use crate::rpo::{self, AggregateMode};
use crate::seeding;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Mrm,
    PerUser,
    NoRpo,
    SingleMlp,
    SharedBt,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Mrm,
        Variant::PerUser,
        Variant::NoRpo,
        Variant::SingleMlp,
        Variant::SharedBt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mrm => "mrm",
            Variant::PerUser => "per-user",
            Variant::NoRpo => "no-rpo",
            Variant::SingleMlp => "single-mlp",
            Variant::SharedBt => "shared-bt",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "baseline variant",
                name: s.to_string(),
            })
    }
}

/// Closed-form trainable-parameter counts.
///
/// * `mrm`/`no-rpo`: `K*size(phi) + K + n*K` (base functions, `w0`, one
///   stored weight vector per user).
/// * `shared-bt`: `size(phi) + 1`.
/// * `per-user`: `n * (K*size(phi) + K)`, a full private model per user.
/// * `single-mlp`: `(n + 1) * size(mlp)`, the initialization plus one
///   adapted network per user.
pub fn count_trainable_params(variant: Variant, n_users: usize, k: usize, d: usize, arch: Arch, hidden: usize) -> usize {
    let phi = param_count(arch, d, hidden);
    match variant {
        Variant::Mrm | Variant::NoRpo => k * phi + k + n_users * k,
        Variant::SharedBt => phi + 1,
        Variant::PerUser => n_users * (k * phi + k),
        Variant::SingleMlp => (n_users + 1) * param_count(Arch::Mlp1, d, hidden),
    }
}

fn require_tags(corpus: &Corpus) -> Result<()> {
    if corpus.users.iter().any(|u| u.population.is_none()) {
        return Err(Error::InvalidConfig(
            "baselines need seen/unseen tags; run split_population first".into(),
        ));
    }
    Ok(())
}

/// Trains `variant` on the seen users of `corpus` and evaluates every user.
pub fn run_baseline(variant: Variant, corpus: &Corpus, cfg: &MetaConfig) -> Result<EvalReport> {
    cfg.validate()?;
    require_tags(corpus)?;
    let seen = corpus.subset(Population::Seen)?;
    match variant {
        Variant::Mrm => {
            let (params, _) = meta_train(&seen, cfg)?;
            evaluate_adapted(&params, corpus, cfg)
        }
        Variant::NoRpo => {
            let cfg = MetaConfig {
                aggregate_mode: AggregateMode::Mean,
                ..cfg.clone()
            };
            let (params, _) = meta_train(&seen, &cfg)?;
            evaluate_adapted(&params, corpus, &cfg)
        }
        Variant::SharedBt => {
            let params = train_shared_bt(&seen, cfg)?;
            evaluate_fixed(&params, corpus)
        }
        Variant::PerUser => per_user(&seen, corpus, cfg),
        Variant::SingleMlp => single_mlp(&seen, corpus, cfg),
    }
}

/// One reward function (`K = 1`) fitted to every seen user's training pairs.
pub fn train_shared_bt(seen: &Corpus, cfg: &MetaConfig) -> Result<ModelParams> {
    let tasks: Vec<TaskSplit> = seen
        .users
        .iter()
        .filter(|u| u.n_train() > 0)
        .map(|u| TaskSplit {
            user_id: u.user_id.clone(),
            support: Vec::new(),
            query: u.train_pairs().cloned().collect(),
        })
        .collect();
    let pooled = MetaConfig {
        k: 1,
        n_inner: 0,
        alpha: 0.0,
        aggregate_mode: AggregateMode::Mean,
        grad_mode: GradMode::FirstOrder,
        ..cfg.clone()
    };
    train_on_tasks(&tasks, seen.dim, &pooled).map(|(p, _)| p)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Shuffled user batches, identical in shape to the meta-training schedule.
fn batches(n: usize, cfg: &MetaConfig, purpose: &str) -> Vec<Vec<Vec<usize>>> {
    let mut rng = seeding::rng_from(seeding::derive_seed(cfg.seed, "", purpose));
    (0..cfg.epochs)
        .map(|_| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            order
                .chunks(cfg.meta_batch)
                .map(|c| {
                    let mut c = c.to_vec();
                    c.sort_unstable();
                    c
                })
                .collect()
        })
        .collect()
}

fn per_user(seen: &Corpus, corpus: &Corpus, cfg: &MetaConfig) -> Result<EvalReport> {
    let users: Vec<&UserDataset> = {
        let mut u: Vec<&UserDataset> = seen.users.iter().filter(|u| u.n_train() > 0).collect();
        u.sort_by(|a, b| a.user_id.cmp(&b.user_id));
        u
    };
    if users.is_empty() {
        return Err(Error::TooFew {
            what: "trainable users",
            needed: 1,
            found: 0,
        });
    }
    let mut params = ModelParams::init(
        cfg.k,
        cfg.arch,
        corpus.dim,
        cfg.hidden,
        &mut seeding::rng_from(seeding::derive_seed(cfg.seed, "", "init")),
    )?;
    let k = cfg.k;
    let n_phi = params.n_params() - k;
    let mut weights: Vec<Vec<f64>> = vec![params.w0.clone(); users.len()];
    let train: Vec<Vec<PreferencePair>> = users.iter().map(|u| u.train_pairs().cloned().collect()).collect();
    let mut adam = AdamState::with_hyper(n_phi + k * users.len(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);

    for (epoch, epoch_batches) in batches(users.len(), cfg, "per-user").into_iter().enumerate() {
        for batch in epoch_batches {
            let grads: Vec<(Vec<f64>, ModelParams)> = batch
                .par_iter()
                .map(|&i| user_pooled_grad(&params, &weights[i], &train[i]))
                .collect();
            let mut flat_grad = vec![0.0; n_phi + k * users.len()];
            for (&i, (gw, gp)) in batch.iter().zip(&grads) {
                let gphi = &gp.to_flat()[k..];
                flat_grad[..n_phi].iter_mut().zip(gphi).for_each(|(a, b)| *a += b);
                flat_grad[n_phi + i * k..n_phi + (i + 1) * k].copy_from_slice(gw);
            }
            let mut flat: Vec<f64> = params.to_flat()[k..].to_vec();
            weights.iter().for_each(|w| flat.extend_from_slice(w));
            adam.update(&mut flat, &flat_grad, cfg.beta);
            if !adam.is_finite() || flat.iter().any(|x| !x.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch: 0,
                    last_finite: Box::new(params),
                });
            }
            let mut full = params.w0.clone();
            full.extend_from_slice(&flat[..n_phi]);
            params.set_flat(&full);
            for (i, w) in weights.iter_mut().enumerate() {
                w.copy_from_slice(&flat[n_phi + i * k..n_phi + (i + 1) * k]);
            }
        }
    }

    let index: std::collections::HashMap<&str, usize> =
        users.iter().enumerate().map(|(i, u)| (u.user_id.as_str(), i)).collect();
    check_dim(&params, corpus)?;
    evaluate_users(corpus, |u| {
        // unseen users start from the uniform weights (w0 is never trained here)
        let w = match (u.population, index.get(u.user_id.as_str())) {
            (Some(Population::Seen), Some(&i)) => weights[i].clone(),
            _ => {
                let shots = shot_prefix(u, cfg.eval_shots, cfg.seed);
                if shots.is_empty() {
                    params.w0.clone()
                } else {
                    adapt_user(&params, &shots, cfg)?.0
                }
            }
        };
        let scores = |e: &[f64]| dot(&w, &params.base_scores(e).expect("checked dims"));
        Ok(accuracy_of(u, scores))
    })
}

/// Gradient of one user's pooled loss in its weights and in the base
/// functions (the `w0` slot of the returned params is unused).
fn user_pooled_grad(params: &ModelParams, w: &[f64], pairs: &[PreferencePair]) -> (Vec<f64>, ModelParams) {
    let mut grad = params.zeros_like();
    let feats: Vec<Vec<f64>> = pairs
        .iter()
        .map(|p| {
            params
                .phis
                .iter()
                .map(|phi| phi.score(&p.emb_chosen) - phi.score(&p.emb_rejected))
                .collect()
        })
        .collect();
    let gw = bt_grad(w, &feats);
    for (p, f) in pairs.iter().zip(&feats) {
        let s = sigmoid(-dot(w, f));
        for (k, phi) in params.phis.iter().enumerate() {
            let up = -s * w[k];
            let (_, cc) = phi.forward_unchecked(&p.emb_chosen);
            let (_, cr) = phi.forward_unchecked(&p.emb_rejected);
            phi.accumulate_backward(&cc, up, &mut grad.phis[k]);
            phi.accumulate_backward(&cr, -up, &mut grad.phis[k]);
        }
    }
    (gw, grad)
}

/// BT loss of a single network and its parameter gradient.
fn net_loss_grad(net: &BaseFunction, pairs: &[PreferencePair]) -> (f64, BaseFunction) {
    let mut grad = net.zeros_like();
    let mut loss = 0.0;
    for p in pairs {
        let (sc, cc) = net.forward_unchecked(&p.emb_chosen);
        let (sr, cr) = net.forward_unchecked(&p.emb_rejected);
        let z = sc - sr;
        loss += softplus(-z);
        let s = sigmoid(-z);
        net.accumulate_backward(&cc, -s, &mut grad);
        net.accumulate_backward(&cr, s, &mut grad);
    }
    (loss, grad)
}

fn net_adapt(net: &BaseFunction, shots: &[PreferencePair], cfg: &MetaConfig) -> BaseFunction {
    let mut flat = Vec::new();
    net.write_flat(&mut flat);
    let mut cur = net.clone();
    for _ in 0..cfg.n_inner {
        let (_, g) = net_loss_grad(&cur, shots);
        let mut gf = Vec::new();
        g.write_flat(&mut gf);
        flat.iter_mut().zip(&gf).for_each(|(x, gi)| *x -= cfg.alpha * gi);
        cur.read_flat(&flat);
    }
    cur
}

fn single_mlp(seen: &Corpus, corpus: &Corpus, cfg: &MetaConfig) -> Result<EvalReport> {
    let mut tasks = build_tasks(seen, cfg);
    tasks.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    if tasks.is_empty() {
        return Err(Error::TooFew {
            what: "trainable users",
            needed: 1,
            found: 0,
        });
    }
    let mut net = BaseFunction::init(
        Arch::Mlp1,
        corpus.dim,
        cfg.hidden.max(1),
        &mut seeding::rng_from(seeding::derive_seed(cfg.seed, "", "init")),
    );
    let mut flat = Vec::new();
    net.write_flat(&mut flat);
    let mut adam = AdamState::with_hyper(flat.len(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);

    for (epoch, epoch_batches) in batches(tasks.len(), cfg, "epochs").into_iter().enumerate() {
        for batch in epoch_batches {
            // first order: query gradient at the adapted network
            let per_task: Vec<(f64, BaseFunction)> = batch
                .par_iter()
                .map(|&i| {
                    let adapted = net_adapt(&net, &tasks[i].support, cfg);
                    net_loss_grad(&adapted, &tasks[i].query)
                })
                .collect();
            let losses: Vec<f64> = per_task.iter().map(|(l, _)| *l).collect();
            let agg = rpo::aggregate(cfg.aggregate_mode, &losses, cfg.rho, cfg.gamma)?;
            let mut total = vec![0.0; flat.len()];
            for ((_, g), c) in per_task.iter().zip(&agg.weights) {
                let mut gf = Vec::new();
                g.write_flat(&mut gf);
                total.iter_mut().zip(&gf).for_each(|(a, b)| *a += c * b);
            }
            adam.update(&mut flat, &total, cfg.beta);
            if !adam.is_finite() || flat.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("single-mlp parameters at epoch {epoch}")));
            }
            net.read_flat(&flat);
        }
    }

    if net.dim() != corpus.dim {
        return Err(Error::DimensionMismatch {
            expected: net.dim(),
            found: corpus.dim,
        });
    }
    evaluate_users(corpus, |u| {
        let shots = shot_prefix(u, cfg.eval_shots, cfg.seed);
        let adapted = if shots.is_empty() { net.clone() } else { net_adapt(&net, &shots, cfg) };
        Ok(accuracy_of(u, |e| adapted.score(e)))
    })
}
