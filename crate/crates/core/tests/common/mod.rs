#![allow(dead_code)]

use metareward::corpus::{split_population, Corpus};
use metareward::metaopt::MetaConfig;
use metareward::synthlab::{gen_population, GroundTruth, Heterogeneity, LabelMode, PopulationSpec};

pub fn spec(n_users: usize, pairs_per_user: usize, noise: f64, heterogeneity: Heterogeneity) -> PopulationSpec {
    PopulationSpec {
        n_users,
        pairs_per_user,
        d: 16,
        k_true: 2,
        label_noise: noise,
        label_mode: LabelMode::Deterministic,
        heterogeneity,
        seed: 0,
    }
}

pub fn tagged(spec: &PopulationSpec) -> (Corpus, GroundTruth) {
    let (c, t) = gen_population(spec).unwrap();
    (split_population(c, 0).unwrap(), t)
}

/// 64 seen + 64 unseen users, 30 train pairs each, 10% label noise.
pub fn standard() -> (Corpus, GroundTruth) {
    tagged(&spec(128, 60, 0.1, Heterogeneity::GaussianWeights))
}

/// Default config with an inner step large enough to move the weights.
pub fn adaptive(epochs: usize) -> MetaConfig {
    MetaConfig {
        alpha: 0.1,
        ..MetaConfig::new(epochs)
    }
}
