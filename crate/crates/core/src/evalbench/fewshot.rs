use std::io::Write;

use crate::corpus::UserDataset;
use crate::evalbench::metrics::{accuracy_of, shot_prefix};
use crate::metaopt::{adapt_user, MetaConfig};
use crate::rewardnet::{reward, ModelParams};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotPoint {
    pub shots: usize,
    pub mean_accuracy: f64,
    pub n_users: usize,
}

/// Mean test accuracy after adapting on the first `s` training pairs of each
/// user's seeded order, for every `s` in `shot_counts`. Zero shots scores
/// `w0`. Users with fewer than `s` training pairs (or no test pairs) are
/// skipped for that point.
pub fn fewshot_curve(
    params: &ModelParams,
    users: &[UserDataset],
    shot_counts: &[usize],
    cfg: &MetaConfig,
) -> Result<Vec<FewShotPoint>> {
    if shot_counts.is_empty() {
        return Err(Error::Empty("shot list"));
    }
    for u in users {
        for p in &u.pairs {
            if p.dim() != params.dim() {
                return Err(Error::DimensionMismatch {
                    expected: params.dim(),
                    found: p.dim(),
                });
            }
        }
    }
    shot_counts
        .iter()
        .map(|&s| {
            let mut accs = Vec::new();
            for u in users {
                if u.test_pairs().next().is_none() {
                    continue;
                }
                if u.n_train() < s {
                    log::info!("user {} has {} train pairs < {s} shots; skipped", u.user_id, u.n_train());
                    continue;
                }
                let w = if s == 0 {
                    params.initial_weights()
                } else {
                    adapt_user(params, &shot_prefix(u, s, cfg.seed), cfg)?
                };
                accs.push(accuracy_of(u, |e| reward(params, &w, e).expect("checked dims")));
            }
            if accs.is_empty() {
                return Err(Error::InvalidConfig(format!("no user has {s} training pairs")));
            }
            Ok(FewShotPoint {
                shots: s,
                mean_accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
                n_users: accs.len(),
            })
        })
        .collect()
}

pub fn write_fewshot_csv(points: &[FewShotPoint], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "shots,mean_accuracy,n_users")?;
    for p in points {
        writeln!(out, "{},{},{}", p.shots, p.mean_accuracy, p.n_users)?;
    }
    Ok(())
}
