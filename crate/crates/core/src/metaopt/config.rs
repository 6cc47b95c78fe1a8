use serde::{Deserialize, Serialize};

use crate::rewardnet::{Arch, DEFAULT_HIDDEN};
use crate::rpo::AggregateMode;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// Differentiate through every inner step.
    Exact,
    /// Treat adapted weights as constants.
    FirstOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InnerOpt {
    Gd,
    Adam,
}

/// Learning-rate regimes: `prism-like` uses 1e-3 for both loops,
/// `tldr-like` 5e-3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    PrismLike,
    TldrLike,
}

impl Preset {
    pub fn learning_rate(self) -> f64 {
        match self {
            Preset::PrismLike => 1e-3,
            Preset::TldrLike => 5e-3,
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prism-like" => Ok(Preset::PrismLike),
            "tldr-like" => Ok(Preset::TldrLike),
            other => Err(Error::Unknown {
                kind: "preset",
                name: other.to_string(),
            }),
        }
    }
}

fn default_lr() -> f64 {
    1e-3
}
fn default_one() -> usize {
    1
}
fn default_k() -> usize {
    2
}
fn default_batch() -> usize {
    2
}
fn default_half() -> f64 {
    0.5
}
fn default_support() -> f64 {
    0.1
}
fn default_grad_mode() -> GradMode {
    GradMode::Exact
}
fn default_inner_opt() -> InnerOpt {
    InnerOpt::Gd
}
fn default_aggregate() -> AggregateMode {
    AggregateMode::Soft
}
fn default_arch() -> Arch {
    Arch::Linear
}
fn default_hidden() -> usize {
    DEFAULT_HIDDEN
}
fn default_eval_shots() -> usize {
    10
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

/// Hyperparameters of the bi-level loop. `epochs` has no default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    /// Inner step size.
    #[serde(default = "default_lr")]
    pub alpha: f64,
    /// Outer (Adam) step size.
    #[serde(default = "default_lr")]
    pub beta: f64,
    #[serde(default = "default_one")]
    pub n_inner: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_batch")]
    pub meta_batch: usize,
    #[serde(default = "default_half")]
    pub rho: f64,
    /// Soft-reweighting temperature; 0 selects hard filtering.
    #[serde(default = "default_half")]
    pub gamma: f64,
    #[serde(default = "default_support")]
    pub support_fraction: f64,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_grad_mode")]
    pub grad_mode: GradMode,
    #[serde(default = "default_inner_opt")]
    pub inner_opt: InnerOpt,
    #[serde(default = "default_aggregate")]
    pub aggregate_mode: AggregateMode,
    #[serde(default = "default_arch")]
    pub arch: Arch,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Adaptation pairs per user at evaluation time.
    #[serde(default = "default_eval_shots")]
    pub eval_shots: usize,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
}

impl MetaConfig {
    /// Defaults: one inner gd step, K = 2, two users per outer batch, 10%
    /// support, `alpha = beta = 1e-3`, soft reweighting with `rho = gamma = 0.5`,
    /// exact meta-gradient, linear base functions.
    pub fn new(epochs: usize) -> Self {
        MetaConfig {
            alpha: default_lr(),
            beta: default_lr(),
            n_inner: 1,
            k: 2,
            meta_batch: 2,
            rho: 0.5,
            gamma: 0.5,
            support_fraction: 0.1,
            epochs,
            seed: 0,
            grad_mode: GradMode::Exact,
            inner_opt: InnerOpt::Gd,
            aggregate_mode: AggregateMode::Soft,
            arch: Arch::Linear,
            hidden: DEFAULT_HIDDEN,
            eval_shots: 10,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }

    pub fn with_preset(mut self, preset: Preset) -> Self {
        self.alpha = preset.learning_rate();
        self.beta = preset.learning_rate();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if self.meta_batch == 0 {
            return bad("meta_batch must be >= 1".into());
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho must lie in (0, 1], got {}", self.rho));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !(self.support_fraction > 0.0 && self.support_fraction < 1.0) {
            return bad(format!(
                "support_fraction must lie in (0, 1), got {}",
                self.support_fraction
            ));
        }
        if self.arch == Arch::Mlp1 && self.hidden == 0 {
            return bad("mlp1 needs hidden >= 1".into());
        }
        if self.grad_mode == GradMode::Exact && self.inner_opt == InnerOpt::Adam {
            return bad("exact meta-gradients require gd inner steps; use grad_mode=first_order with inner_opt=adam".into());
        }
        Ok(())
    }
}
