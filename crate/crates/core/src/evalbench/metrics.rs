use std::io::Write;

use rayon::prelude::*;

use crate::corpus::{shuffled_train_pairs, Corpus, Population, PreferencePair, UserDataset};
use crate::metaopt::{adapt_user, MetaConfig};
use crate::rewardnet::{reward, ModelParams, UserWeights};
use crate::synthlab::strict_accuracy;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct UserResult {
    pub user_id: String,
    pub population: Option<Population>,
    pub n_test: usize,
    pub accuracy: f64,
}

/// Fraction of pairs whose chosen response scores strictly higher. Ties
/// count as wrong.
pub fn user_accuracy(params: &ModelParams, w: &UserWeights, test_pairs: &[PreferencePair]) -> Result<UserResult> {
    let first = test_pairs.first().ok_or(Error::Empty("test set"))?;
    let mut correct = 0usize;
    for p in test_pairs {
        if reward(params, w, &p.emb_chosen)? > reward(params, w, &p.emb_rejected)? {
            correct += 1;
        }
    }
    Ok(UserResult {
        user_id: first.user_id.clone(),
        population: None,
        n_test: test_pairs.len(),
        accuracy: correct as f64 / test_pairs.len() as f64,
    })
}

/// Mean accuracy of the lowest `ceil(k_percent * n / 100)` users.
pub fn worst_k_mean(results: &[UserResult], k_percent: f64) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Empty("result list"));
    }
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::InvalidConfig(format!("k_percent must lie in (0, 100], got {k_percent}")));
    }
    let mut acc: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
    acc.sort_by(f64::total_cmp);
    let x = k_percent * acc.len() as f64 / 100.0;
    let m = ((x - 1e-9).ceil() as usize).clamp(1, acc.len());
    Ok(acc[..m].iter().sum::<f64>() / m as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub users: Vec<UserResult>,
    pub overall_mean: f64,
    /// Population standard deviation over users.
    pub overall_std: f64,
    pub worst10: f64,
    pub worst20: f64,
    pub worst50: f64,
    pub seen_mean: Option<f64>,
    pub unseen_mean: Option<f64>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

impl EvalReport {
    pub fn from_users(users: Vec<UserResult>) -> Result<Self> {
        let acc: Vec<f64> = users.iter().map(|u| u.accuracy).collect();
        let overall_mean = mean(&acc).ok_or(Error::Empty("evaluated users"))?;
        let overall_std = (acc.iter().map(|a| (a - overall_mean).powi(2)).sum::<f64>() / acc.len() as f64).sqrt();
        let pop_mean = |p: Population| {
            mean(
                &users
                    .iter()
                    .filter(|u| u.population == Some(p))
                    .map(|u| u.accuracy)
                    .collect::<Vec<_>>(),
            )
        };
        Ok(EvalReport {
            worst10: worst_k_mean(&users, 10.0)?,
            worst20: worst_k_mean(&users, 20.0)?,
            worst50: worst_k_mean(&users, 50.0)?,
            seen_mean: pop_mean(Population::Seen),
            unseen_mean: pop_mean(Population::Unseen),
            overall_mean,
            overall_std,
            users,
        })
    }

    /// Report restricted to one population.
    pub fn only(&self, population: Population) -> Result<EvalReport> {
        EvalReport::from_users(
            self.users
                .iter()
                .filter(|u| u.population == Some(population))
                .cloned()
                .collect(),
        )
    }

    pub fn summary_rows(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("overall_mean", self.overall_mean),
            ("overall_std", self.overall_std),
            ("worst10", self.worst10),
            ("worst20", self.worst20),
            ("worst50", self.worst50),
            ("seen_mean", self.seen_mean.unwrap_or(f64::NAN)),
            ("unseen_mean", self.unseen_mean.unwrap_or(f64::NAN)),
        ]
    }
}

pub fn write_report_csv(report: &EvalReport, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "user_id,population,n_test,accuracy")?;
    for u in &report.users {
        let pop = u.population.map_or_else(String::new, |p| p.to_string());
        writeln!(out, "{},{},{},{}", u.user_id, pop, u.n_test, u.accuracy)?;
    }
    Ok(())
}

pub fn write_summary_csv(report: &EvalReport, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "metric,value")?;
    for (name, v) in report.summary_rows() {
        writeln!(out, "{name},{v}")?;
    }
    Ok(())
}

/// First `shots` pairs of the user's seeded training order.
pub(crate) fn shot_prefix(user: &UserDataset, shots: usize, seed: u64) -> Vec<PreferencePair> {
    let mut pairs = shuffled_train_pairs(user, seed);
    pairs.truncate(shots);
    pairs
}

/// Evaluates every user that has test pairs with a per-user accuracy
/// closure. Users are scored in parallel and reported in corpus order.
pub(crate) fn evaluate_users<F>(corpus: &Corpus, score: F) -> Result<EvalReport>
where
    F: Fn(&UserDataset) -> Result<f64> + Sync,
{
    let rows = corpus
        .users
        .par_iter()
        .map(|u| {
            let n_test = u.test_pairs().count();
            if n_test == 0 {
                log::warn!("user {} has no test pairs; skipped", u.user_id);
                return Ok(None);
            }
            Ok(Some(UserResult {
                user_id: u.user_id.clone(),
                population: u.population,
                n_test,
                accuracy: score(u)?,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_users(rows.into_iter().flatten().collect())
}

/// Accuracy of a fixed per-user reward function.
pub(crate) fn accuracy_of(user: &UserDataset, reward_fn: impl FnMut(&[f64]) -> f64) -> f64 {
    strict_accuracy(user.test_pairs(), reward_fn).unwrap_or(0.0)
}

/// Adapts every user from `w0` on up to `cfg.eval_shots` training pairs and
/// scores the test pairs.
pub fn evaluate_adapted(params: &ModelParams, corpus: &Corpus, cfg: &MetaConfig) -> Result<EvalReport> {
    check_dim(params, corpus)?;
    evaluate_users(corpus, |u| {
        let shots = shot_prefix(u, cfg.eval_shots, cfg.seed);
        let w = if shots.is_empty() {
            params.initial_weights()
        } else {
            adapt_user(params, &shots, cfg)?
        };
        Ok(accuracy_of(u, |e| reward(params, &w, e).expect("checked dims")))
    })
}

/// Scores every user with `w0`, no adaptation.
pub fn evaluate_fixed(params: &ModelParams, corpus: &Corpus) -> Result<EvalReport> {
    check_dim(params, corpus)?;
    let w = params.initial_weights();
    evaluate_users(corpus, |u| Ok(accuracy_of(u, |e| reward(params, &w, e).expect("checked dims"))))
}

pub(crate) fn check_dim(params: &ModelParams, corpus: &Corpus) -> Result<()> {
    if params.dim() != corpus.dim {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            found: corpus.dim,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SplitTag;
    use crate::rewardnet::BaseFunction;
    use crate::seeding::rng_from;
    use proptest::prelude::*;
    use rand::Rng;

    fn result(acc: f64) -> UserResult {
        UserResult {
            user_id: "u".into(),
            population: None,
            n_test: 10,
            accuracy: acc,
        }
    }

    fn identity_model() -> ModelParams {
        ModelParams {
            w0: vec![1.0],
            phis: vec![BaseFunction::Linear {
                weight: vec![1.0],
                bias: 0.0,
            }],
        }
    }

    fn p(c: f64, r: f64) -> PreferencePair {
        PreferencePair {
            user_id: "u".into(),
            pair_id: format!("{c}/{r}"),
            emb_chosen: vec![c],
            emb_rejected: vec![r],
            split: SplitTag::Test,
        }
    }

    #[test]
    fn accuracy_counts_strictly() {
        let m = identity_model();
        let pairs = [p(2.0, 1.0), p(3.0, 0.0), p(0.0, 1.0)];
        let r = user_accuracy(&m, &UserWeights(vec![1.0]), &pairs).unwrap();
        assert_eq!(r.accuracy, 2.0 / 3.0);
        assert_eq!(r.n_test, 3);
        let zero = user_accuracy(&m, &UserWeights(vec![0.0]), &pairs).unwrap();
        assert_eq!(zero.accuracy, 0.0);
        assert!(user_accuracy(&m, &UserWeights(vec![1.0]), &[]).is_err());
    }

    #[test]
    fn worst_k_examples() {
        let rs: Vec<_> = [0.9, 0.5, 1.0, 0.7, 0.6, 0.8].into_iter().map(result).collect();
        assert!((worst_k_mean(&rs, 50.0).unwrap() - 0.6).abs() < 1e-12);
        let overall = rs.iter().map(|r| r.accuracy).sum::<f64>() / 6.0;
        assert!((worst_k_mean(&rs, 100.0).unwrap() - overall).abs() < 1e-12);
        assert_eq!(worst_k_mean(&[result(0.42)], 10.0).unwrap(), 0.42);
        assert!(worst_k_mean(&[], 10.0).is_err());
        assert!(worst_k_mean(&rs, 0.0).is_err());
    }

    #[test]
    fn summary_recomputes_from_rows() {
        let mut rs: Vec<_> = [0.2, 0.4, 0.9, 1.0].into_iter().map(result).collect();
        rs[0].population = Some(Population::Seen);
        rs[1].population = Some(Population::Unseen);
        let rep = EvalReport::from_users(rs).unwrap();
        assert!((rep.overall_mean - 0.625).abs() < 1e-12);
        assert_eq!(rep.seen_mean, Some(0.2));
        assert_eq!(rep.unseen_mean, Some(0.4));
        let var = [0.2f64, 0.4, 0.9, 1.0].iter().map(|a| (a - 0.625).powi(2)).sum::<f64>() / 4.0;
        assert!((rep.overall_std - var.sqrt()).abs() < 1e-12);
        let mut buf = Vec::new();
        write_summary_csv(&rep, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("metric,value\noverall_mean,0.625\n"));
    }

    proptest! {
        #[test]
        fn worst_k_is_monotone(accs in prop::collection::vec(0.0f64..=1.0, 1..60)) {
            let rs: Vec<_> = accs.into_iter().map(result).collect();
            let w10 = worst_k_mean(&rs, 10.0).unwrap();
            let w20 = worst_k_mean(&rs, 20.0).unwrap();
            let w50 = worst_k_mean(&rs, 50.0).unwrap();
            let all = worst_k_mean(&rs, 100.0).unwrap();
            prop_assert!(w10 <= w20 + 1e-12 && w20 <= w50 + 1e-12 && w50 <= all + 1e-12);
        }

        #[test]
        fn accuracy_is_scale_invariant(seed in 0u64..2000, c in 0.001f64..1000.0) {
            let mut rng = rng_from(seed);
            let params = ModelParams::init(2, crate::rewardnet::Arch::Linear, 3, 0, &mut rng).unwrap();
            let w = UserWeights(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            let pairs: Vec<PreferencePair> = (0..20)
                .map(|i| PreferencePair {
                    user_id: "u".into(),
                    pair_id: i.to_string(),
                    emb_chosen: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    emb_rejected: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    split: SplitTag::Test,
                })
                .collect();
            let a = user_accuracy(&params, &w, &pairs).unwrap().accuracy;
            let b = user_accuracy(&params, &w.scaled(c), &pairs).unwrap().accuracy;
            prop_assert_eq!(a, b);
        }
    }
}
