//! Bi-level training of the shared initialization and base functions.
//!
//! The inner loop adapts a user's weights from `w0` with a few steps on the
//! support set. The outer loop differentiates the (reweighted) query losses
//! of the adapted users with respect to `w0` and every base-function
//! parameter, either exactly through the inner trajectory or to first order.

mod adam;
mod config;
mod gradcheck;
mod gradient;
mod inner;
mod train;

pub use adam::AdamState;
pub use config::{GradMode, InnerOpt, MetaConfig, Preset};
pub use gradcheck::{finite_difference_check, relative_error, BlockError, GradCheckReport, TinyInstance, GRADCHECK_FLOOR};
pub use gradient::{meta_gradient, meta_objective, MetaGradient};
pub use inner::{adapt_user, inner_adapt, InnerTrace};
pub use train::{build_tasks, meta_train, train_on_tasks, write_log_csv, TrainLog, TrainLogRow};
