use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use metareward::corpus::{load_corpus, save_corpus, shuffled_train_pairs, split_population, Corpus, Population, UserDataset};
use metareward::evalbench::{
    count_trainable_params, evaluate_adapted, evaluate_fixed, fewshot_curve, run_baseline, write_fewshot_csv,
    write_report_csv, write_summary_csv, Variant,
};
use metareward::metaopt::{adapt_user, finite_difference_check, meta_train, write_log_csv, MetaConfig, TinyInstance};
use metareward::rewardnet::{load_checkpoint, save_checkpoint, Arch};
use metareward::synthlab::{gen_population, PopulationSpec};
use metareward::Error;

use crate::args::{
    AdaptArgs, Command, ConfigArgs, EvalArgs, FewshotArgs, GenArgs, GradcheckArgs, ParamsCountArgs, TrainArgs,
};

pub fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Adapt(a) => adapt(a),
        Command::Eval(a) => eval(a),
        Command::Fewshot(a) => fewshot(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::ParamsCount(a) => params_count(a),
    }
    .map(|()| ExitCode::SUCCESS)
    .or_else(|e| match e.downcast_ref::<GradcheckFailed>() {
        Some(_) => {
            eprintln!("{e}");
            Ok(ExitCode::from(1))
        }
        None => Err(e),
    })
}

/// 3 for numerical blow-ups, 2 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Diverged { .. } | Error::NonFinite(_)) => 3,
        _ => 2,
    }
}

#[derive(Debug, thiserror::Error)]
#[error("gradient check failed: max relative error {max_rel:e} > tolerance {tol:e}")]
struct GradcheckFailed {
    max_rel: f64,
    tol: f64,
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Config file (if any), then preset, then flag overrides. Commands that do
/// not train accept a config without `epochs`.
fn resolve_config(args: &ConfigArgs, needs_epochs: bool) -> Result<MetaConfig> {
    let mut value = match &args.config {
        Some(p) => read_json(p)?,
        None => serde_json::json!({}),
    };
    let obj = value.as_object_mut().context("config must be a JSON object")?;
    if !obj.contains_key("epochs") {
        match args.epochs {
            Some(e) => obj.insert("epochs".into(), e.into()),
            None if needs_epochs => bail!(Error::InvalidConfig("epochs is required (config field or --epochs)".into())),
            None => obj.insert("epochs".into(), 0.into()),
        };
    }
    let cfg: MetaConfig = serde_json::from_value(value).map_err(Error::from).context("invalid config")?;
    let cfg = args.apply(cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut out = create(path)?;
    f(&mut out).and_then(|()| out.flush()).with_context(|| format!("writing {}", path.display()))
}

fn echo_config(cfg: &impl Serialize, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg)?;
    write_with(path, |w| writeln!(w, "{text}"))
}

fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".config.json");
    out.with_file_name(name)
}

fn tagged_corpus(path: &Path, min_train_pairs: usize, seed: u64) -> Result<Corpus> {
    let corpus = load_corpus(path)?.filter_min_train_pairs(min_train_pairs);
    Ok(split_population(corpus, seed)?)
}

fn gen(a: GenArgs) -> Result<()> {
    let mut spec: PopulationSpec = serde_json::from_value(read_json(&a.config)?)
        .map_err(Error::from)
        .context("invalid population spec")?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let (corpus, truth) = gen_population(&spec)?;
    save_corpus(&corpus, &a.out)?;
    truth.save(&a.truth)?;
    println!("users={} pairs={} d={}", corpus.users.len(), corpus.n_pairs(), corpus.dim);
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a.cfg, true)?;
    let corpus = tagged_corpus(&a.corpus, a.min_train_pairs, cfg.seed)?;
    let seen = corpus.subset(Population::Seen)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    echo_config(&cfg, &a.out_dir.join("resolved_config.json"))?;
    let (params, log) = match meta_train(&seen, &cfg) {
        Ok(r) => r,
        Err(Error::Diverged {
            epoch,
            batch,
            last_finite,
        }) => {
            let dump = a.out_dir.join("last_finite_checkpoint.json");
            save_checkpoint(&last_finite, &dump)?;
            eprintln!("last finite parameters written to {}", dump.display());
            return Err(Error::Diverged {
                epoch,
                batch,
                last_finite,
            }
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&params, a.out_dir.join("checkpoint.json"))?;
    write_with(&a.out_dir.join("train_log.csv"), |w| write_log_csv(&log, w))?;
    let last = log.rows.last().map(|r| r.epoch).unwrap_or(0);
    println!(
        "trained on {} users, {} epochs; final epoch mean query loss {}",
        seen.users.len(),
        cfg.epochs,
        log.epoch_mean_loss(last).map_or("n/a".into(), |l| format!("{l:.6}"))
    );
    Ok(())
}

fn adapt(a: AdaptArgs) -> Result<()> {
    let cfg = resolve_config(&a.cfg, false)?;
    let params = load_checkpoint(&a.checkpoint)?;
    let corpus = tagged_corpus(&a.corpus, 0, cfg.seed)?;
    if params.dim() != corpus.dim {
        bail!(Error::DimensionMismatch {
            expected: params.dim(),
            found: corpus.dim
        });
    }
    let shots = a.shots.unwrap_or(cfg.eval_shots);
    let mut rows = Vec::with_capacity(corpus.users.len());
    for u in &corpus.users {
        let pairs: Vec<_> = shuffled_train_pairs(u, cfg.seed).into_iter().take(shots).collect();
        let w = if pairs.is_empty() {
            log::warn!("user {} has no training pairs; keeping the initialization", u.user_id);
            params.initial_weights()
        } else {
            adapt_user(&params, &pairs, &cfg)?
        };
        rows.push((u, pairs.len(), w));
    }
    write_with(&a.out, |out| {
        write!(out, "user_id,population,n_shots")?;
        for k in 1..=params.k() {
            write!(out, ",w_{k}")?;
        }
        writeln!(out)?;
        for (u, n, w) in &rows {
            write!(out, "{},{},{}", u.user_id, population_name(u), n)?;
            for x in &w.0 {
                write!(out, ",{x}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    })?;
    echo_config(&cfg, &sidecar(&a.out))
}

fn population_name(u: &UserDataset) -> String {
    u.population.map_or_else(String::new, |p| p.to_string())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = resolve_config(&a.cfg, a.baseline.is_some())?;
    let corpus = tagged_corpus(&a.corpus, a.min_train_pairs, cfg.seed)?;
    let report = match (a.baseline, &a.checkpoint) {
        (Some(v), _) => run_baseline(v, &corpus, &cfg)?,
        (None, Some(ck)) => {
            let params = load_checkpoint(ck)?;
            if a.no_adapt {
                evaluate_fixed(&params, &corpus)?
            } else {
                evaluate_adapted(&params, &corpus, &cfg)?
            }
        }
        (None, None) => bail!(Error::InvalidConfig("eval needs --checkpoint or --baseline".into())),
    };
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    write_with(&a.out_dir.join("report.csv"), |w| write_report_csv(&report, w))?;
    write_with(&a.out_dir.join("summary.csv"), |w| write_summary_csv(&report, w))?;
    echo_config(&cfg, &a.out_dir.join("resolved_config.json"))?;
    for (name, value) in report.summary_rows() {
        println!("{name}\t{value:.4}");
    }
    Ok(())
}

fn fewshot(a: FewshotArgs) -> Result<()> {
    let cfg = resolve_config(&a.cfg, false)?;
    let params = load_checkpoint(&a.checkpoint)?;
    let corpus = tagged_corpus(&a.corpus, 0, cfg.seed)?;
    let users: Vec<UserDataset> = if a.all_users {
        corpus.users
    } else {
        corpus.users_in(Population::Unseen).cloned().collect()
    };
    let points = fewshot_curve(&params, &users, &a.shots, &cfg)?;
    write_with(&a.out, |w| write_fewshot_csv(&points, w))?;
    echo_config(&cfg, &sidecar(&a.out))?;
    for p in &points {
        println!("{}\t{:.4}\t{}", p.shots, p.mean_accuracy, p.n_users);
    }
    Ok(())
}

/// Gradient-check input: the instance, the meta config and the step.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GradcheckConfig {
    #[serde(default)]
    instance: TinyInstance,
    #[serde(default = "tiny_meta")]
    meta: MetaConfig,
    #[serde(default = "default_step")]
    step: f64,
}

fn tiny_meta() -> MetaConfig {
    MetaConfig {
        alpha: 0.1,
        hidden: 4,
        ..MetaConfig::new(0)
    }
}

fn default_step() -> f64 {
    1e-5
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut gc = match &a.config {
        Some(p) => {
            let mut v = read_json(p)?;
            // the meta block may omit epochs, which gradient checks ignore
            if let Some(meta) = v.get_mut("meta").and_then(|m| m.as_object_mut()) {
                meta.entry("epochs").or_insert(0.into());
                let defaults = serde_json::to_value(tiny_meta())?;
                for (k, d) in defaults.as_object().into_iter().flatten() {
                    meta.entry(k.clone()).or_insert(d.clone());
                }
            }
            serde_json::from_value::<GradcheckConfig>(v).map_err(Error::from).context("invalid gradcheck config")?
        }
        None => GradcheckConfig {
            instance: TinyInstance::default(),
            meta: tiny_meta(),
            step: default_step(),
        },
    };
    if let Some(s) = a.step {
        gc.step = s;
    }
    if let Some(arch) = a.arch {
        gc.meta.arch = arch;
    }
    if let Some(seed) = a.seed {
        gc.instance.seed = seed;
    }
    gc.meta.validate()?;
    let (params, tasks) = gc.instance.build(&gc.meta)?;
    let report = finite_difference_check(&params, &tasks, &gc.meta, gc.step)?;
    println!("block,n_coords,max_abs_err,max_rel_err");
    for b in &report.blocks {
        println!("{},{},{:e},{:e}", b.block, b.n_coords, b.max_abs_err, b.max_rel_err);
    }
    if !report.passes(a.tol) {
        return Err(GradcheckFailed {
            max_rel: report.max_rel_err(),
            tol: a.tol,
        }
        .into());
    }
    Ok(())
}

fn params_count(a: ParamsCountArgs) -> Result<()> {
    if a.k == 0 || a.d == 0 || (a.arch == Arch::Mlp1 && a.hidden == 0) {
        bail!(Error::InvalidConfig("k, d (and hidden for mlp1) must be >= 1".into()));
    }
    let variants: Vec<Variant> = a.variant.map_or_else(|| Variant::ALL.to_vec(), |v| vec![v]);
    let mut text = String::from("variant,n_users,params\n");
    for v in variants {
        for &n in &a.users {
            let c = count_trainable_params(v, n, a.k, a.d, a.arch, a.hidden);
            text.push_str(&format!("{v},{n},{c}\n"));
        }
    }
    match &a.out {
        Some(p) => write_with(p, |w| w.write_all(text.as_bytes())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
