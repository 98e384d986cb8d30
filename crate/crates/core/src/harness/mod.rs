//! Synthetic experiments: data generation, training, reports and ablations.

pub mod ablation;
pub mod config;
pub mod data;
pub mod experiment;
pub mod model;
pub mod train;

pub use ablation::{ablation_suite, AblationCell, AblationReport};
pub use config::{Augmentation, ExperimentConfig};
pub use data::{generate_synthetic, SyntheticDataset};
pub use experiment::{discretization_floor, report_from_predictions, run_experiment, ExperimentResult, PredictionRecord};
pub use model::{read_checkpoint, write_checkpoint, CategoryModel};
pub use train::{train, train_with_seed, TrainedModel, TrainingLog};
