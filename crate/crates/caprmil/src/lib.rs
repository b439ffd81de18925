//! Context-aware patch-ranking multiple-instance learning.
//!
//! (Crate-level guide is at the bottom of the build; see README and `book/`.)

#![forbid(unsafe_code)]

pub mod ablate;
pub mod attention;
pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use ablate::{run_ablation, AblationAxes, AblationCell};
pub use attention::{
    aggregate_tokens, broadcast_context, caprmil_attention, soft_cluster, token_self_attention,
    AssignmentMap, AttentionParams, AGGREGATION_EPS,
};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use cost::{
    bench_scaling, count_flops, count_params, derive_width_candidates, flops_law, CostReport,
    FlopsLaw, ParamCounts, ScalingFit, ScalingPoint, WidthCandidate,
};
pub use data::{
    generate_synthetic, generate_synthetic_traced, load_manifest, read_bag, write_bag,
    write_dataset, write_synthetic_dataset, BagRecord, DiskBagSource, ManifestEntry, Split,
    SyntheticDatasetSummary, SyntheticSampler, SyntheticSpec,
};
pub use error::{Error, ErrorCategory, Result};
pub use metrics::{
    adaptive_ece, balanced_accuracy, cohen_kappa, evaluate, roc_auc, roc_auc_macro, EvalResult,
    KappaWeighting,
};
pub use model::{forward, init_model, param_shapes, Aggregator, CaprmilConfig, ModelState};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::{cross_entropy, Tensor};
pub use train::{adamw_step, lr_at, train, BagSource, LabeledBag, OptimizerState, TrainConfig};
