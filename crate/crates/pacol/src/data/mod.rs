//! Datasets and benchmark task streams.

pub mod mnist;
pub mod stream;

pub use mnist::{data_dir, load_mnist, ImageSet, Mnist, DATA_DIR_VAR};
pub use stream::{
    apply_poison, build_rotation_stream, build_split_stream, even_angles, load_stream,
    rotate_bilinear, save_stream, select_carrier_indices, AttackKind, LabeledBatch,
    PoisonArtifact, PoisonPlan, Scenario, TaskData, TaskStream,
};
