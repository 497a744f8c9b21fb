//! Toy training against the reference shader.

pub mod loss;
pub mod metrics;
pub mod optim;
pub mod oracle;
mod toy;

pub use loss::{loss_on_tape, loss_total, L1Region, LossTerms, LossWeights, DICE_SMOOTH};
pub use metrics::{dice_coefficient, metrics, Metrics};
pub use optim::Adam;
pub use oracle::{oracle_render, synthetic_albedo, DEFAULT_LIGHT};
pub use toy::{
    evaluate, generate_dataset, train_toy, write_loss_csv, DatasetConfig, Evaluation, StepRecord, ToySample, TrainConfig,
    TrainReport,
};
