use std::io::Write;

use rand::seq::SliceRandom;

use crate::corpus::{split_support_query, Corpus, TaskSplit};
use crate::metaopt::{meta_gradient, AdamState, MetaConfig};
use crate::rewardnet::ModelParams;
use crate::seeding;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub batch: usize,
    /// Mean over the batch's users of the summed query loss.
    pub mean_query_loss: f64,
    pub tau: f64,
    pub retained_users: usize,
    pub grad_norm_w0: f64,
    pub grad_norm_phi: f64,
    pub user_losses: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    /// Mean of the per-batch mean query losses of one epoch.
    pub fn epoch_mean_loss(&self, epoch: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.epoch == epoch)
            .map(|r| r.mean_query_loss)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

fn fmt_f64(x: f64) -> String {
    if x == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{x}")
    }
}

pub fn write_log_csv(log: &TrainLog, mut out: impl Write) -> std::io::Result<()> {
    writeln!(
        out,
        "epoch,batch,mean_query_loss,tau,retained_users,grad_norm_w0,grad_norm_phi"
    )?;
    for r in &log.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.batch,
            fmt_f64(r.mean_query_loss),
            fmt_f64(r.tau),
            r.retained_users,
            fmt_f64(r.grad_norm_w0),
            fmt_f64(r.grad_norm_phi)
        )?;
    }
    Ok(())
}

/// Support/query splits for every user with at least two training pairs.
pub fn build_tasks(corpus: &Corpus, cfg: &MetaConfig) -> Vec<TaskSplit> {
    corpus
        .users
        .iter()
        .filter_map(|u| match split_support_query(u, cfg.support_fraction, cfg.seed) {
            Ok(t) => Some(t),
            Err(e) => {
                log::warn!("skipping user {}: {e}", u.user_id);
                None
            }
        })
        .collect()
}

/// Trains `w0` and the base functions on every user of `corpus`.
///
/// Each epoch visits users in a seeded random order, `meta_batch` at a time.
/// Within a batch users are sorted by id before the gradient is reduced, so
/// the result depends only on batch membership, never on corpus order.
pub fn meta_train(corpus: &Corpus, cfg: &MetaConfig) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    let tasks = if cfg.epochs == 0 { Vec::new() } else { build_tasks(corpus, cfg) };
    train_on_tasks(&tasks, corpus.dim, cfg)
}

/// Outer loop over explicit tasks. `meta_train` is this with support/query
/// splits of every user.
pub fn train_on_tasks(tasks: &[TaskSplit], dim: usize, cfg: &MetaConfig) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    let mut params = ModelParams::init(
        cfg.k,
        cfg.arch,
        dim,
        cfg.hidden,
        &mut seeding::rng_from(seeding::derive_seed(cfg.seed, "", "init")),
    )?;
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok((params, log));
    }
    if tasks.is_empty() {
        return Err(Error::TooFew {
            what: "trainable users",
            needed: 1,
            found: 0,
        });
    }

    // canonical order so shuffles do not depend on corpus order
    let mut ids: Vec<usize> = (0..tasks.len()).collect();
    ids.sort_by(|&a, &b| tasks[a].user_id.cmp(&tasks[b].user_id));

    let mut rng = seeding::rng_from(seeding::derive_seed(cfg.seed, "", "epochs"));
    let mut adam = AdamState::with_hyper(params.n_params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut flat = params.to_flat();
    for epoch in 0..cfg.epochs {
        let mut order = ids.clone();
        order.shuffle(&mut rng);
        for (batch_idx, chunk) in order.chunks(cfg.meta_batch).enumerate() {
            let mut members = chunk.to_vec();
            members.sort_by(|&a, &b| tasks[a].user_id.cmp(&tasks[b].user_id));
            let batch: Vec<TaskSplit> = members.iter().map(|&i| tasks[i].clone()).collect();

            let diverged = || Error::Diverged {
                epoch,
                batch: batch_idx,
                last_finite: Box::new(params.clone()),
            };
            let mg = match meta_gradient(&params, &batch, cfg) {
                Ok(mg) => mg,
                Err(Error::NonFinite(_)) => return Err(diverged()),
                Err(e) => return Err(e),
            };
            if !mg.is_finite() {
                return Err(diverged());
            }
            let losses = &mg.per_user_query_loss;
            let retained = losses.iter().filter(|&&l| l > mg.tau).count();
            if retained == 0 {
                log::warn!("epoch {epoch} batch {batch_idx}: no user above tau, zero update");
            }
            log.rows.push(TrainLogRow {
                epoch,
                batch: batch_idx,
                mean_query_loss: losses.iter().sum::<f64>() / losses.len() as f64,
                tau: mg.tau,
                retained_users: retained,
                grad_norm_w0: mg.norm_w0(),
                grad_norm_phi: mg.norm_phi(),
                user_losses: batch.iter().map(|t| t.user_id.clone()).zip(losses.iter().copied()).collect(),
            });

            adam.update(&mut flat, &mg.as_params().to_flat(), cfg.beta);
            if !adam.is_finite() || flat.iter().any(|x| !x.is_finite()) {
                return Err(diverged());
            }
            params.set_flat(&flat);
        }
    }
    Ok((params, log))
}
