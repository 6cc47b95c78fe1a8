//! Accuracy metrics, robustness summaries, few-shot curves and baselines.

mod baselines;
mod fewshot;
mod metrics;

pub use baselines::{count_trainable_params, run_baseline, train_shared_bt, Variant};
pub use fewshot::{fewshot_curve, write_fewshot_csv, FewShotPoint};
pub use metrics::{
    evaluate_adapted, evaluate_fixed, user_accuracy, worst_k_mean, write_report_csv, write_summary_csv, EvalReport,
    UserResult,
};
