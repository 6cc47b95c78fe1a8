//! Synthetic preference populations with known ground truth.
//!
//! The generative model mirrors the learner: `K_true` unit-norm linear base
//! functions, per-user weights, and labels from the sign of the true reward
//! gap (or a Bradley-Terry draw), flipped with probability `label_noise`.
//! Because the truth is linear, the accuracy of the true reward on a user's
//! test pairs is an exact ceiling for any learned model.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::btcore::sigmoid;
use crate::corpus::{Corpus, PreferencePair, SplitTag, UserDataset};
use crate::seeding::{self, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    Deterministic,
    BtSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Heterogeneity {
    /// Independent standard-normal weights per user.
    GaussianWeights,
    /// A shared `w*` for the first `round(majority_frac * n)` users and `-w*`
    /// for the rest.
    TwoCluster { majority_frac: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSpec {
    pub n_users: usize,
    pub pairs_per_user: usize,
    pub d: usize,
    pub k_true: usize,
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default = "default_label_mode")]
    pub label_mode: LabelMode,
    #[serde(default = "default_heterogeneity")]
    pub heterogeneity: Heterogeneity,
    #[serde(default)]
    pub seed: u64,
}

fn default_label_mode() -> LabelMode {
    LabelMode::Deterministic
}

fn default_heterogeneity() -> Heterogeneity {
    Heterogeneity::GaussianWeights
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_users == 0 || self.pairs_per_user == 0 || self.d == 0 || self.k_true == 0 {
            return bad("n_users, pairs_per_user, d and k_true must all be >= 1".into());
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return bad(format!("label_noise must lie in [0, 0.5), got {}", self.label_noise));
        }
        if let Heterogeneity::TwoCluster { majority_frac } = self.heterogeneity {
            if !(0.0..=1.0).contains(&majority_frac) {
                return bad(format!("majority_frac must lie in [0, 1], got {majority_frac}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Weight vectors of the linear base functions (zero bias).
    pub true_phis: Vec<Vec<f64>>,
    pub true_weights: BTreeMap<String, Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl GroundTruth {
    pub fn dim(&self) -> usize {
        self.true_phis.first().map_or(0, Vec::len)
    }

    pub fn reward_with(&self, w: &[f64], emb: &[f64]) -> f64 {
        self.true_phis
            .iter()
            .zip(w)
            .map(|(a, wk)| wk * dot(a, emb))
            .sum()
    }

    pub fn reward(&self, user_id: &str, emb: &[f64]) -> Result<f64> {
        let w = self.true_weights.get(user_id).ok_or_else(|| Error::Unknown {
            kind: "user",
            name: user_id.to_string(),
        })?;
        Ok(self.reward_with(w, emb))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string(self)? + "\n";
        std::fs::write(path.as_ref(), text).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    loop {
        let v = normal_vec(rng, n);
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// True if the first item wins a Bradley-Terry draw with reward gap `gap`.
pub fn sample_bt_label(gap: f64, rng: &mut Rng) -> bool {
    rng.random::<f64>() < sigmoid(gap)
}

/// Minimum reward gap; closer pairs are redrawn.
pub const MIN_GAP: f64 = 1e-9;

pub fn gen_population(spec: &PopulationSpec) -> Result<(Corpus, GroundTruth)> {
    spec.validate()?;
    let mut rng = seeding::rng_from(seeding::derive_seed(spec.seed, "", "population"));
    let true_phis: Vec<Vec<f64>> = (0..spec.k_true).map(|_| unit_vec(&mut rng, spec.d)).collect();
    let cluster_w = match spec.heterogeneity {
        Heterogeneity::TwoCluster { .. } => Some(normal_vec(&mut rng, spec.k_true)),
        Heterogeneity::GaussianWeights => None,
    };
    let n_major = match spec.heterogeneity {
        Heterogeneity::TwoCluster { majority_frac } => (majority_frac * spec.n_users as f64).round() as usize,
        Heterogeneity::GaussianWeights => 0,
    };
    let mut truth = GroundTruth {
        true_phis,
        true_weights: BTreeMap::new(),
    };
    let width = (spec.n_users.max(2) - 1).to_string().len().max(4);
    let n_train = spec.pairs_per_user.div_ceil(2);
    let mut users = Vec::with_capacity(spec.n_users);
    for u in 0..spec.n_users {
        let user_id = format!("u{u:0width$}");
        let w = match &cluster_w {
            Some(c) if u < n_major => c.clone(),
            Some(c) => c.iter().map(|x| -x).collect(),
            None => normal_vec(&mut rng, spec.k_true),
        };
        let mut pairs = Vec::with_capacity(spec.pairs_per_user);
        for j in 0..spec.pairs_per_user {
            let (e1, e2, gap) = loop {
                let e1 = normal_vec(&mut rng, spec.d);
                let e2 = normal_vec(&mut rng, spec.d);
                let gap = truth.reward_with(&w, &e1) - truth.reward_with(&w, &e2);
                if gap.abs() >= MIN_GAP {
                    break (e1, e2, gap);
                }
            };
            let mut first_wins = match spec.label_mode {
                LabelMode::Deterministic => gap > 0.0,
                LabelMode::BtSample => sample_bt_label(gap, &mut rng),
            };
            if rng.random::<f64>() < spec.label_noise {
                first_wins = !first_wins;
            }
            let (emb_chosen, emb_rejected) = if first_wins { (e1, e2) } else { (e2, e1) };
            pairs.push(PreferencePair {
                user_id: user_id.clone(),
                pair_id: format!("{user_id}-p{j}"),
                emb_chosen,
                emb_rejected,
                split: if j < n_train { SplitTag::Train } else { SplitTag::Test },
            });
        }
        truth.true_weights.insert(user_id.clone(), w);
        users.push(UserDataset {
            user_id,
            pairs,
            population: None,
        });
    }
    Ok((Corpus { users, dim: spec.d }, truth))
}

/// Per-user test accuracy of a reward function under the strict `>` rule.
pub(crate) fn strict_accuracy<'a>(pairs: impl Iterator<Item = &'a PreferencePair>, mut reward: impl FnMut(&[f64]) -> f64) -> Option<f64> {
    let (mut correct, mut n) = (0usize, 0usize);
    for p in pairs {
        n += 1;
        if reward(&p.emb_chosen) > reward(&p.emb_rejected) {
            correct += 1;
        }
    }
    (n > 0).then(|| correct as f64 / n as f64)
}

/// Test accuracy of each user's true reward: the ceiling for learned models.
pub fn bayes_accuracy(truth: &GroundTruth, corpus: &Corpus) -> Result<Vec<(String, f64)>> {
    if truth.dim() != corpus.dim {
        return Err(Error::DimensionMismatch {
            expected: truth.dim(),
            found: corpus.dim,
        });
    }
    corpus
        .users
        .iter()
        .map(|u| {
            let w = truth.true_weights.get(&u.user_id).ok_or_else(|| Error::Unknown {
                kind: "user",
                name: u.user_id.clone(),
            })?;
            if w.len() != truth.true_phis.len() {
                return Err(Error::DimensionMismatch {
                    expected: truth.true_phis.len(),
                    found: w.len(),
                });
            }
            let acc = strict_accuracy(u.test_pairs(), |e| truth.reward_with(w, e))
                .ok_or(Error::Empty("user test set"))?;
            Ok((u.user_id.clone(), acc))
        })
        .collect()
}
