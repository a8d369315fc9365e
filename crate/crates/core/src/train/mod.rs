//! Detection loss, optimizer, learning-rate policy and the training loop.

mod dual;
mod loss;
mod optim;
mod schedule;
mod trainer;

pub use dual::Dual4;
pub use loss::{assign_targets, ciou, loss_and_grad, Assignment, LossBreakdown, LossWeights};
pub use optim::{sgd_step, OptimState, SgdConfig};
pub use schedule::{one_cycle_lr, LrSchedule};
pub use trainer::{train_loop, EpochRecord, MetricLog, TrainConfig};
