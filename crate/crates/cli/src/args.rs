use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use metareward::evalbench::Variant;
use metareward::metaopt::{GradMode, InnerOpt, MetaConfig, Preset};
use metareward::rewardnet::Arch;
use metareward::rpo::AggregateMode;

#[derive(Debug, Parser)]
#[command(name = "mrm", version, about = "Meta reward modeling: train, adapt and evaluate personalized reward models")]
pub struct Cli {
    /// Worker threads for per-user parallelism (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic population (corpus JSONL plus ground truth).
    Gen(GenArgs),
    /// Meta-train on the seen users of a corpus.
    Train(TrainArgs),
    /// Write adapted per-user weights.
    Adapt(AdaptArgs),
    /// Per-user accuracy report and summary, or a baseline variant.
    Eval(EvalArgs),
    /// Mean unseen accuracy as a function of the number of shots.
    Fewshot(FewshotArgs),
    /// Check the meta-gradient against finite differences on a tiny instance.
    Gradcheck(GradcheckArgs),
    /// Trainable-parameter counts as the number of users grows.
    ParamsCount(ParamsCountArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Population spec JSON.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Overrides the seed in the population file.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Config file plus per-field overrides.
#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// Training config JSON (fields of the meta config).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Learning-rate preset applied before the other overrides.
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub aggregate: Option<AggregateMode>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub n_inner: Option<usize>,
    #[arg(long)]
    pub meta_batch: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub support_fraction: Option<f64>,
    #[arg(long, value_parser = parse_grad_mode)]
    pub grad_mode: Option<GradMode>,
    #[arg(long, value_parser = parse_inner_opt)]
    pub inner_opt: Option<InnerOpt>,
    #[arg(long)]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub eval_shots: Option<usize>,
}

fn parse_grad_mode(s: &str) -> Result<GradMode, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
        .map_err(|_| format!("expected exact or first_order, got {s}"))
}

fn parse_inner_opt(s: &str) -> Result<InnerOpt, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("expected gd or adam, got {s}"))
}

impl ConfigArgs {
    pub fn apply(&self, mut cfg: MetaConfig) -> MetaConfig {
        if let Some(p) = self.preset {
            cfg = cfg.with_preset(p);
        }
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    cfg.$field = v;
                }
            )*};
        }
        set!(epochs, seed, alpha, beta, k, n_inner, meta_batch, rho, gamma, support_fraction, grad_mode, inner_opt, arch, hidden, eval_shots);
        if let Some(a) = self.aggregate {
            cfg.aggregate_mode = a;
        }
        cfg
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Receives checkpoint.json, train_log.csv and resolved_config.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Drop users with fewer training pairs before the population split.
    #[arg(long, default_value_t = 0)]
    pub min_train_pairs: usize,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// CSV of `user_id,population,n_shots,w_1..w_K`.
    #[arg(long)]
    pub out: PathBuf,
    /// Shots per user (default: the config's eval_shots).
    #[arg(long)]
    pub shots: Option<usize>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Trained checkpoint; not needed with --baseline.
    #[arg(long, required_unless_present = "baseline")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Receives report.csv, summary.csv and resolved_config.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Train and evaluate a variant instead: mrm, per-user, no-rpo, single-mlp, shared-bt.
    #[arg(long, conflicts_with = "checkpoint")]
    pub baseline: Option<Variant>,
    /// Score every user with the initialization, no adaptation.
    #[arg(long)]
    pub no_adapt: bool,
    #[arg(long, default_value_t = 0)]
    pub min_train_pairs: usize,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct FewshotArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [2, 5, 10])]
    pub shots: Vec<usize>,
    /// Include seen users too (default: unseen only).
    #[arg(long)]
    pub all_users: bool,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Instance and meta config JSON; defaults to the built-in tiny instance.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    /// Finite-difference step (overrides the config's).
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ParamsCountArgs {
    /// Comma-separated user counts.
    #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 10, 100, 1000])]
    pub users: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    #[arg(long, default_value_t = Arch::Linear)]
    pub arch: Arch,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    /// Restrict to one variant.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
