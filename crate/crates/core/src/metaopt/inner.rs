use crate::btcore::bt_grad;
use crate::corpus::PreferencePair;
use crate::metaopt::{AdamState, InnerOpt, MetaConfig};
use crate::rewardnet::{ModelParams, PhiCache, UserWeights};
use crate::{Error, Result};

/// Pair features together with the forward caches of every base function.
pub(crate) struct PairTape<'a> {
    pub feats: Vec<f64>,
    pub chosen: Vec<PhiCache<'a>>,
    pub rejected: Vec<PhiCache<'a>>,
}

pub(crate) fn tape_pairs<'a>(params: &ModelParams, pairs: &'a [PreferencePair]) -> Result<Vec<PairTape<'a>>> {
    let d = params.dim();
    pairs
        .iter()
        .map(|p| {
            for len in [p.emb_chosen.len(), p.emb_rejected.len()] {
                if len != d {
                    return Err(Error::DimensionMismatch { expected: d, found: len });
                }
            }
            let k = params.k();
            let mut feats = Vec::with_capacity(k);
            let mut chosen = Vec::with_capacity(k);
            let mut rejected = Vec::with_capacity(k);
            for phi in &params.phis {
                let (sc, cc) = phi.forward_unchecked(&p.emb_chosen);
                let (sr, cr) = phi.forward_unchecked(&p.emb_rejected);
                feats.push(sc - sr);
                chosen.push(cc);
                rejected.push(cr);
            }
            Ok(PairTape {
                feats,
                chosen,
                rejected,
            })
        })
        .collect()
}

/// Adds the parameter gradient of `<upstream, features(pair)>` into `grad`.
pub(crate) fn backprop_pair(params: &ModelParams, tape: &PairTape<'_>, upstream: &[f64], grad: &mut ModelParams) {
    for (k, phi) in params.phis.iter().enumerate() {
        phi.accumulate_backward(&tape.chosen[k], upstream[k], &mut grad.phis[k]);
        phi.accumulate_backward(&tape.rejected[k], -upstream[k], &mut grad.phis[k]);
    }
}

/// Iterates `w_0 .. w_n` of one inner run.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerTrace {
    pub iterates: Vec<Vec<f64>>,
}

impl InnerTrace {
    pub fn final_weights(&self) -> UserWeights {
        UserWeights(self.iterates.last().expect("trace holds w0").clone())
    }
}

/// Inner loop on precomputed support features.
pub(crate) fn adapt_on_features(w0: &[f64], feats: &[Vec<f64>], cfg: &MetaConfig) -> Result<InnerTrace> {
    if cfg.n_inner > 0 && feats.is_empty() {
        return Err(Error::Empty("support set"));
    }
    let mut w = w0.to_vec();
    let mut iterates = Vec::with_capacity(cfg.n_inner + 1);
    iterates.push(w.clone());
    let mut adam = (cfg.inner_opt == InnerOpt::Adam).then(|| AdamState::new(w.len()));
    for _ in 0..cfg.n_inner {
        let g = bt_grad(&w, feats);
        match adam.as_mut() {
            Some(state) => state.update(&mut w, &g, cfg.alpha),
            None => {
                for (wi, gi) in w.iter_mut().zip(&g) {
                    *wi -= cfg.alpha * gi;
                }
            }
        }
        iterates.push(w.clone());
    }
    Ok(InnerTrace { iterates })
}

/// Adapts user weights from `w0` on the support pairs.
pub fn inner_adapt(
    params: &ModelParams,
    support: &[PreferencePair],
    cfg: &MetaConfig,
) -> Result<(UserWeights, InnerTrace)> {
    let tapes = tape_pairs(params, support)?;
    let feats: Vec<Vec<f64>> = tapes.into_iter().map(|t| t.feats).collect();
    let trace = adapt_on_features(&params.w0, &feats, cfg)?;
    Ok((trace.final_weights(), trace))
}

/// Inference-time adaptation on a new user's few-shot pairs.
pub fn adapt_user(params: &ModelParams, shots: &[PreferencePair], cfg: &MetaConfig) -> Result<UserWeights> {
    if shots.is_empty() {
        return Err(Error::Empty("few-shot set"));
    }
    inner_adapt(params, shots, cfg).map(|(w, _)| w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SplitTag;
    use crate::rewardnet::BaseFunction;

    fn unit_model(w0: f64) -> ModelParams {
        ModelParams {
            w0: vec![w0],
            phis: vec![BaseFunction::Linear {
                weight: vec![1.0],
                bias: 0.0,
            }],
        }
    }

    fn pair(c: f64, r: f64) -> PreferencePair {
        PreferencePair {
            user_id: "u".into(),
            pair_id: format!("{c}-{r}"),
            emb_chosen: vec![c],
            emb_rejected: vec![r],
            split: SplitTag::Train,
        }
    }

    #[test]
    fn single_gd_step_by_hand() {
        let mut cfg = MetaConfig::new(0);
        cfg.k = 1;
        cfg.alpha = 0.5;
        let (w, trace) = inner_adapt(&unit_model(0.0), &[pair(1.0, 0.0)], &cfg).unwrap();
        // grad of -log sigmoid(w) at 0 is -0.5
        assert_eq!(w.0, vec![0.25]);
        assert_eq!(trace.iterates, vec![vec![0.0], vec![0.25]]);
    }

    #[test]
    fn zero_step_or_zero_iterations_is_identity() {
        let mut cfg = MetaConfig::new(0);
        cfg.alpha = 0.0;
        let m = unit_model(0.7);
        assert_eq!(inner_adapt(&m, &[pair(1.0, 0.0)], &cfg).unwrap().0 .0, vec![0.7]);
        cfg.alpha = 1.0;
        cfg.n_inner = 0;
        assert_eq!(inner_adapt(&m, &[], &cfg).unwrap().0 .0, vec![0.7]);
    }

    #[test]
    fn empty_support_errors() {
        let cfg = MetaConfig::new(0);
        assert!(inner_adapt(&unit_model(0.0), &[], &cfg).is_err());
        assert!(adapt_user(&unit_model(0.0), &[], &cfg).is_err());
    }

    #[test]
    fn multi_step_uses_current_iterate() {
        let mut cfg = MetaConfig::new(0);
        cfg.alpha = 0.5;
        cfg.n_inner = 2;
        let (w, _) = inner_adapt(&unit_model(0.0), &[pair(1.0, 0.0)], &cfg).unwrap();
        let s1 = 1.0 / (1.0 + 0.25f64.exp()); // sigmoid(-0.25)
        assert!((w.0[0] - (0.25 + 0.5 * s1)).abs() < 1e-15);
    }

    #[test]
    fn adam_inner_moves_by_alpha_on_first_step() {
        let mut cfg = MetaConfig::new(0);
        cfg.inner_opt = InnerOpt::Adam;
        cfg.alpha = 0.01;
        let (w, _) = inner_adapt(&unit_model(0.0), &[pair(1.0, 0.0)], &cfg).unwrap();
        assert!((w.0[0] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn adapt_user_matches_inner_adapt() {
        let cfg = MetaConfig::new(0);
        let shots = [pair(1.0, 0.0), pair(-0.5, 2.0)];
        let m = unit_model(0.2);
        assert_eq!(adapt_user(&m, &shots, &cfg).unwrap(), inner_adapt(&m, &shots, &cfg).unwrap().0);
    }
}
