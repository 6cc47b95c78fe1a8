//! Base reward functions and the combined personalized reward.
//!
//! A user with weights `w` scores an embedding `e` as `sum_k w[k] * phi_k(e)`.
//! Each `phi_k` is either linear (`<a, e> + b`) or a one-hidden-layer tanh
//! network (`<v, tanh(W e + b)> + c`). Backward passes return gradients with
//! the same shape as the parameters so they can be accumulated in place.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::PreferencePair;
use crate::seeding::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Linear,
    Mlp1,
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Arch::Linear),
            "mlp1" => Ok(Arch::Mlp1),
            other => Err(Error::Unknown {
                kind: "architecture",
                name: other.to_string(),
            }),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Linear => "linear",
            Arch::Mlp1 => "mlp1",
        })
    }
}

pub const DEFAULT_HIDDEN: usize = 64;

/// Parameters of one base function. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BaseFunction {
    Linear {
        weight: Vec<f64>,
        bias: f64,
    },
    Mlp1 {
        /// `h x d`, row-major by hidden unit.
        w1: Vec<Vec<f64>>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: f64,
    },
}

/// Forward activations needed by [`BaseFunction::backward`].
#[derive(Debug, Clone)]
pub struct PhiCache<'a> {
    emb: &'a [f64],
    /// tanh activations, mlp1 only.
    hidden: Option<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize) -> f64 {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    rng.random_range(-a..a)
}

impl BaseFunction {
    /// Scaled-uniform weights, zero biases.
    pub fn init(arch: Arch, d: usize, hidden: usize, rng: &mut Rng) -> Self {
        match arch {
            Arch::Linear => BaseFunction::Linear {
                weight: (0..d).map(|_| glorot(rng, d, 1)).collect(),
                bias: 0.0,
            },
            Arch::Mlp1 => BaseFunction::Mlp1 {
                w1: (0..hidden)
                    .map(|_| (0..d).map(|_| glorot(rng, d, hidden)).collect())
                    .collect(),
                b1: vec![0.0; hidden],
                w2: (0..hidden).map(|_| glorot(rng, hidden, 1)).collect(),
                b2: 0.0,
            },
        }
    }

    pub fn zeros(arch: Arch, d: usize, hidden: usize) -> Self {
        match arch {
            Arch::Linear => BaseFunction::Linear {
                weight: vec![0.0; d],
                bias: 0.0,
            },
            Arch::Mlp1 => BaseFunction::Mlp1 {
                w1: vec![vec![0.0; d]; hidden],
                b1: vec![0.0; hidden],
                w2: vec![0.0; hidden],
                b2: 0.0,
            },
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.arch(), self.dim(), self.hidden())
    }

    pub fn arch(&self) -> Arch {
        match self {
            BaseFunction::Linear { .. } => Arch::Linear,
            BaseFunction::Mlp1 { .. } => Arch::Mlp1,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            BaseFunction::Linear { weight, .. } => weight.len(),
            BaseFunction::Mlp1 { w1, .. } => w1.first().map_or(0, Vec::len),
        }
    }

    /// Hidden width; 0 for linear.
    pub fn hidden(&self) -> usize {
        match self {
            BaseFunction::Linear { .. } => 0,
            BaseFunction::Mlp1 { w1, .. } => w1.len(),
        }
    }

    pub fn n_params(&self) -> usize {
        param_count(self.arch(), self.dim(), self.hidden())
    }

    fn check_shape(&self) -> Result<()> {
        if let BaseFunction::Mlp1 { w1, b1, w2, .. } = self {
            let (h, d) = (w1.len(), self.dim());
            if h == 0 || b1.len() != h || w2.len() != h || w1.iter().any(|r| r.len() != d) {
                return Err(Error::InvalidParams("inconsistent mlp1 shapes".into()));
            }
        }
        if self.dim() == 0 {
            return Err(Error::InvalidParams("input dimension must be > 0".into()));
        }
        Ok(())
    }

    fn check_input(&self, emb: &[f64]) -> Result<()> {
        if emb.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: emb.len(),
            });
        }
        Ok(())
    }

    /// Score without keeping a cache. Caller guarantees `emb.len() == dim`.
    pub fn score(&self, emb: &[f64]) -> f64 {
        match self {
            BaseFunction::Linear { weight, bias } => dot(weight, emb) + bias,
            BaseFunction::Mlp1 { w1, b1, w2, b2 } => {
                w1.iter()
                    .zip(b1)
                    .zip(w2)
                    .map(|((row, b), v)| v * (dot(row, emb) + b).tanh())
                    .sum::<f64>()
                    + b2
            }
        }
    }

    pub fn forward<'a>(&self, emb: &'a [f64]) -> Result<(f64, PhiCache<'a>)> {
        self.check_input(emb)?;
        Ok(self.forward_unchecked(emb))
    }

    pub(crate) fn forward_unchecked<'a>(&self, emb: &'a [f64]) -> (f64, PhiCache<'a>) {
        match self {
            BaseFunction::Linear { weight, bias } => (
                dot(weight, emb) + bias,
                PhiCache { emb, hidden: None },
            ),
            BaseFunction::Mlp1 { w1, b1, w2, b2 } => {
                let act: Vec<f64> = w1
                    .iter()
                    .zip(b1)
                    .map(|(row, b)| (dot(row, emb) + b).tanh())
                    .collect();
                let score = dot(w2, &act) + b2;
                (
                    score,
                    PhiCache {
                        emb,
                        hidden: Some(act),
                    },
                )
            }
        }
    }

    /// Gradients of `upstream * score` with respect to the parameters and the
    /// input embedding.
    pub fn backward(&self, cache: &PhiCache<'_>, upstream: f64) -> Result<(BaseFunction, Vec<f64>)> {
        self.check_cache(cache)?;
        let mut grad = self.zeros_like();
        self.accumulate_backward(cache, upstream, &mut grad);
        let emb_grad = match self {
            BaseFunction::Linear { weight, .. } => weight.iter().map(|a| upstream * a).collect(),
            BaseFunction::Mlp1 { w1, w2, .. } => {
                let act = cache.hidden.as_deref().unwrap_or_default();
                let mut g = vec![0.0; self.dim()];
                for ((row, v), t) in w1.iter().zip(w2).zip(act) {
                    let delta = upstream * v * (1.0 - t * t);
                    for (gj, wj) in g.iter_mut().zip(row) {
                        *gj += delta * wj;
                    }
                }
                g
            }
        };
        Ok((grad, emb_grad))
    }

    fn check_cache(&self, cache: &PhiCache<'_>) -> Result<()> {
        let ok = cache.emb.len() == self.dim()
            && match (self, &cache.hidden) {
                (BaseFunction::Linear { .. }, None) => true,
                (BaseFunction::Mlp1 { w1, .. }, Some(h)) => h.len() == w1.len(),
                _ => false,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams("cache does not match parameters".into()))
        }
    }

    /// Adds the parameter gradient of `upstream * score` into `grad`.
    pub(crate) fn accumulate_backward(&self, cache: &PhiCache<'_>, upstream: f64, grad: &mut BaseFunction) {
        if upstream == 0.0 {
            return;
        }
        match (self, grad) {
            (BaseFunction::Linear { .. }, BaseFunction::Linear { weight, bias }) => {
                for (g, x) in weight.iter_mut().zip(cache.emb) {
                    *g += upstream * x;
                }
                *bias += upstream;
            }
            (
                BaseFunction::Mlp1 { w2, .. },
                BaseFunction::Mlp1 {
                    w1: g1,
                    b1: gb1,
                    w2: g2,
                    b2: gb2,
                },
            ) => {
                let act = cache.hidden.as_deref().expect("mlp1 cache");
                *gb2 += upstream;
                for j in 0..act.len() {
                    g2[j] += upstream * act[j];
                    let delta = upstream * w2[j] * (1.0 - act[j] * act[j]);
                    gb1[j] += delta;
                    for (g, x) in g1[j].iter_mut().zip(cache.emb) {
                        *g += delta * x;
                    }
                }
            }
            _ => unreachable!("gradient block arch differs from parameters"),
        }
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        match self {
            BaseFunction::Linear { weight, bias } => {
                out.extend_from_slice(weight);
                out.push(*bias);
            }
            BaseFunction::Mlp1 { w1, b1, w2, b2 } => {
                w1.iter().for_each(|r| out.extend_from_slice(r));
                out.extend_from_slice(b1);
                out.extend_from_slice(w2);
                out.push(*b2);
            }
        }
    }

    /// Overwrites parameters from `flat`, returning the unread tail.
    pub fn read_flat<'a>(&mut self, flat: &'a [f64]) -> &'a [f64] {
        fn take<'a>(dst: &mut [f64], src: &'a [f64]) -> &'a [f64] {
            let (head, tail) = src.split_at(dst.len());
            dst.copy_from_slice(head);
            tail
        }
        match self {
            BaseFunction::Linear { weight, bias } => {
                let rest = take(weight, flat);
                *bias = rest[0];
                &rest[1..]
            }
            BaseFunction::Mlp1 { w1, b1, w2, b2 } => {
                let mut rest = flat;
                for row in w1.iter_mut() {
                    rest = take(row, rest);
                }
                rest = take(b1, rest);
                rest = take(w2, rest);
                *b2 = rest[0];
                &rest[1..]
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        let mut v = Vec::with_capacity(self.n_params());
        self.write_flat(&mut v);
        v.iter().all(|x| x.is_finite())
    }
}

/// Number of scalars in one base function.
pub fn param_count(arch: Arch, d: usize, hidden: usize) -> usize {
    match arch {
        Arch::Linear => d + 1,
        Arch::Mlp1 => hidden * d + 2 * hidden + 1,
    }
}

/// Per-user combination weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserWeights(pub Vec<f64>);

impl UserWeights {
    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn scaled(&self, c: f64) -> UserWeights {
        UserWeights(self.0.iter().map(|x| c * x).collect())
    }
}

/// Shared initialization plus the `K` base functions.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub w0: Vec<f64>,
    pub phis: Vec<BaseFunction>,
}

impl ModelParams {
    /// `w0 = 1/K` everywhere, base functions scaled-uniform.
    pub fn init(k: usize, arch: Arch, d: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if k == 0 || d == 0 || (arch == Arch::Mlp1 && hidden == 0) {
            return Err(Error::InvalidParams(format!(
                "k={k}, d={d}, hidden={hidden} is not a valid model shape"
            )));
        }
        Ok(ModelParams {
            w0: vec![1.0 / k as f64; k],
            phis: (0..k).map(|_| BaseFunction::init(arch, d, hidden, rng)).collect(),
        })
    }

    pub fn k(&self) -> usize {
        self.w0.len()
    }

    pub fn dim(&self) -> usize {
        self.phis[0].dim()
    }

    pub fn arch(&self) -> Arch {
        self.phis[0].arch()
    }

    pub fn hidden(&self) -> usize {
        self.phis[0].hidden()
    }

    pub fn validate(&self) -> Result<()> {
        if self.w0.is_empty() || self.w0.len() != self.phis.len() {
            return Err(Error::InvalidParams(format!(
                "w0 has {} entries but there are {} base functions",
                self.w0.len(),
                self.phis.len()
            )));
        }
        let (arch, d, h) = (self.arch(), self.dim(), self.hidden());
        for phi in &self.phis {
            phi.check_shape()?;
            if phi.arch() != arch || phi.dim() != d || phi.hidden() != h {
                return Err(Error::InvalidParams("base functions differ in shape".into()));
            }
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.w0.iter().all(|x| x.is_finite()) && self.phis.iter().all(BaseFunction::is_finite)
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            w0: vec![0.0; self.k()],
            phis: self.phis.iter().map(BaseFunction::zeros_like).collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.k() + self.phis.iter().map(BaseFunction::n_params).sum::<usize>()
    }

    /// `[w0, phi_1, .., phi_K]` flattened in a fixed order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.extend_from_slice(&self.w0);
        self.phis.iter().for_each(|p| p.write_flat(&mut v));
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params(), "flat length");
        let k = self.k();
        self.w0.copy_from_slice(&flat[..k]);
        let mut rest = &flat[k..];
        for phi in &mut self.phis {
            rest = phi.read_flat(rest);
        }
    }

    pub fn initial_weights(&self) -> UserWeights {
        UserWeights(self.w0.clone())
    }

    /// `phi_k(emb)` for every k.
    pub fn base_scores(&self, emb: &[f64]) -> Result<Vec<f64>> {
        if emb.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: emb.len(),
            });
        }
        Ok(self.phis.iter().map(|p| p.score(emb)).collect())
    }
}

/// `sum_k w[k] * phi_k(emb)`.
pub fn reward(params: &ModelParams, w: &UserWeights, emb: &[f64]) -> Result<f64> {
    if w.k() != params.k() {
        return Err(Error::DimensionMismatch {
            expected: params.k(),
            found: w.k(),
        });
    }
    Ok(dot(&w.0, &params.base_scores(emb)?))
}

/// `phi_k(chosen) - phi_k(rejected)` for every k. The reward gap of any
/// user is then `<w, features>`.
pub fn pair_features(params: &ModelParams, pair: &PreferencePair) -> Result<Vec<f64>> {
    let c = params.base_scores(&pair.emb_chosen)?;
    let r = params.base_scores(&pair.emb_rejected)?;
    Ok(c.iter().zip(&r).map(|(a, b)| a - b).collect())
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    k: usize,
    d: usize,
    arch: Arch,
    hidden: Option<usize>,
    w0: Vec<f64>,
    phis: Vec<BaseFunction>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_to_string(params: &ModelParams) -> Result<String> {
    params.validate()?;
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        k: params.k(),
        d: params.dim(),
        arch: params.arch(),
        hidden: (params.arch() == Arch::Mlp1).then(|| params.hidden()),
        w0: params.w0.clone(),
        phis: params.phis.clone(),
    };
    Ok(serde_json::to_string(&ck)? + "\n")
}

pub fn checkpoint_from_str(text: &str) -> Result<ModelParams> {
    let ck: Checkpoint = serde_json::from_str(text)?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::InvalidParams(format!(
            "unsupported checkpoint version {}",
            ck.version
        )));
    }
    let params = ModelParams {
        w0: ck.w0,
        phis: ck.phis,
    };
    params.validate()?;
    let header_ok = params.k() == ck.k
        && params.dim() == ck.d
        && params.arch() == ck.arch
        && (ck.arch == Arch::Linear || ck.hidden == Some(params.hidden()));
    if !header_ok {
        return Err(Error::InvalidParams(
            "checkpoint header disagrees with parameter arrays".into(),
        ));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let text = checkpoint_to_string(params)?;
    std::fs::write(path.as_ref(), text).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    checkpoint_from_str(&text)
}
