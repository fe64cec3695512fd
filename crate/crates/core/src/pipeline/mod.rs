//! End-to-end training and sampling, synthetic trees and sample metrics.

mod ops;
mod run;
mod sample;
mod train;
mod trees;

pub use ops::{build_bundles, summarize_block, BeliefBlock, BlockSummary, OperatorBundle};
pub use run::{
    echo_config, inspect_precision, sample_to_dir, train_to_dir, LogRow, PrecisionReport, SampleRun, TrainSummary,
    CONFIG_ECHO,
};
pub use sample::{SampleOutcome, Sampler};
pub use train::{
    effective_schedule, load_dataset, loss_spec, predictor_config, Checkpoint, StepReport, Trainer, CHECKPOINT_VERSION,
};
pub use trees::{
    evaluate_vun, gen_random_trees, gen_tree_dataset, is_connected, is_valid_tree, prufer_to_edges, random_tree_edges,
    tree_meta, wl_hash, MetricsReport, TREE_EDGE_CLASS, WL_ROUNDS,
};
