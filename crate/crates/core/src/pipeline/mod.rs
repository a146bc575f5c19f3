//! The full adaptation cycle, adversarial training, inference and the
//! finite-difference verification harness.

pub mod adapt;
pub mod checkpoint;
pub mod cycle;
pub mod gradcheck;
pub mod optim;
pub mod train;

pub use adapt::{adapt, adapt_multi, DEFAULT_NUM_VIEWS};
pub use checkpoint::Checkpoint;
pub use cycle::{forward_pass, run_cycle, CycleBundle, Direction, ForwardPass, Roles};
pub use gradcheck::{gradient_check, GradCheckEntry, GradCheckReport};
pub use optim::{Adam, AdamParams};
pub use train::{evaluate_cycles, train, transform_pair, MetricsRecord, StepMetrics, Trainer};

pub use crate::config::TrainConfig;
