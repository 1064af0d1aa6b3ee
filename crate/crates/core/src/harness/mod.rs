//! Synthetic data, augmentation, optimization, training, evaluation,
//! persistence and ablation sweeps.

mod augment;
mod config;
mod io;
mod optim;
mod sweep;
mod synth;
mod train;

pub use augment::{augment, Transform, MAX_ROTATION_DEG};
pub use config::{RunConfig, TrainConfig};
pub use io::{
    image_path, mask_path, metrics_rows, read_dataset, read_pgm, read_sample, write_pgm, write_prediction,
    write_sample, METRICS_HEADER,
};
pub use optim::AdamW;
pub use sweep::{sweep, SweepAxis, SweepRow, SweepTable};
pub use synth::{class_intensity, generate_sample, Sample, SynthSpec};
pub use train::{
    evaluate, linear_slope, predict, sample_pool, stack_batch, train, training_loss, RunRecord, Snapshot, Trainer,
    HELD_OUT_OFFSET,
};
