//! Bradley-Terry preference probability and the per-user loss.
//!
//! With pair features `f = phi(chosen) - phi(rejected)` and `z = <w, f>` the
//! loss of a pair is `-log sigmoid(z) = softplus(-z)`. The loss is summed
//! (not averaged) over pairs. Gradient and Hessian in `w`:
//!
//! ```text
//! grad = -sum sigmoid(-z) f
//! hess =  sum sigmoid(z) sigmoid(-z) f f^T
//! ```

use crate::corpus::PreferencePair;
use crate::rewardnet::{pair_features, ModelParams, UserWeights};
use crate::{Error, Result};

/// Logistic function, stable for large `|z|`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `log sigmoid(z)`.
pub fn log_sigmoid(z: f64) -> f64 {
    -softplus(-z)
}

/// Probability that the first response is preferred.
pub fn bt_prob(r_plus: f64, r_minus: f64) -> f64 {
    sigmoid(r_plus - r_minus)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossStats {
    pub loss: f64,
    pub grad_w: Vec<f64>,
    /// Row-major `K x K`, present when requested.
    pub hess_w: Option<Vec<f64>>,
    /// `sigmoid(-z)` per pair.
    pub residuals: Vec<f64>,
}

/// Loss, gradient and optionally Hessian over precomputed pair features.
pub fn bt_loss_from_features(w: &[f64], features: &[Vec<f64>], with_hessian: bool) -> LossStats {
    let k = w.len();
    let mut loss = 0.0;
    let mut grad_w = vec![0.0; k];
    let mut hess = with_hessian.then(|| vec![0.0; k * k]);
    let mut residuals = Vec::with_capacity(features.len());
    for f in features {
        let z: f64 = w.iter().zip(f).map(|(a, b)| a * b).sum();
        loss += softplus(-z);
        let s = sigmoid(-z);
        residuals.push(s);
        for (g, fi) in grad_w.iter_mut().zip(f) {
            *g -= s * fi;
        }
        if let Some(h) = hess.as_mut() {
            let c = sigmoid(z) * s;
            for i in 0..k {
                for j in i..k {
                    let v = c * f[i] * f[j];
                    h[i * k + j] += v;
                    if j != i {
                        h[j * k + i] += v;
                    }
                }
            }
        }
    }
    LossStats {
        loss,
        grad_w,
        hess_w: hess,
        residuals,
    }
}

/// Loss only, for the inner loop and finite differences.
pub fn bt_loss_value(w: &[f64], features: &[Vec<f64>]) -> f64 {
    features
        .iter()
        .map(|f| softplus(-w.iter().zip(f).map(|(a, b)| a * b).sum::<f64>()))
        .sum()
}

/// Gradient only.
pub fn bt_grad(w: &[f64], features: &[Vec<f64>]) -> Vec<f64> {
    let mut g = vec![0.0; w.len()];
    for f in features {
        let z: f64 = w.iter().zip(f).map(|(a, b)| a * b).sum();
        let s = sigmoid(-z);
        for (gi, fi) in g.iter_mut().zip(f) {
            *gi -= s * fi;
        }
    }
    g
}

pub fn bt_loss(
    params: &ModelParams,
    w: &UserWeights,
    pairs: &[PreferencePair],
    with_hessian: bool,
) -> Result<LossStats> {
    if pairs.is_empty() {
        return Err(Error::Empty("pair list"));
    }
    if w.k() != params.k() {
        return Err(Error::DimensionMismatch {
            expected: params.k(),
            found: w.k(),
        });
    }
    let features = pairs
        .iter()
        .map(|p| pair_features(params, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(bt_loss_from_features(&w.0, &features, with_hessian))
}
