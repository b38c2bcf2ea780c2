//! bdlab-core: a desk-scale decoder-transformer laboratory in 64-bit floats.
//!
//! The crate implements, from first principles, everything needed to study
//! three ways of giving a causal decoder access to right context on sequence
//! labeling tasks:
//!
//! * sequence repetition (feed the input `k = r+1` times and read predictions
//!   off the final instance),
//! * unmasking (dropping the causal mask in all or a middle band of layers),
//! * early exiting (truncating the stack at layer `L`).
//!
//! Layers: [`tensor`] (autodiff), [`attention`], [`repetition`], [`model`],
//! [`data`], [`eval`], [`train`], [`profile`]. Key types are re-exported at
//! the crate root.

pub mod attention;
pub mod data;
pub mod eval;
pub mod train;
pub mod model;
pub mod profile;
pub mod repetition;
pub mod tensor;

pub use attention::{
    attend, bidirectional_mask, causal_mask, combine_padding, AttentionMask, AttentionOutput,
    AttnProjections,
};
pub use data::{
    extract_spans, gen_leftcontext_task, gen_lookahead_task, read_conll, tags_from_spans,
    validate_iob2, write_conll, DataError, DatasetManifest, DatasetSplit, LabeledSequence, Span,
    Tag, TaskData, TaskParams, Tokenizer, ValidationMode, Vocab, PAD_ID, UNK_ID,
};
pub use eval::{
    aggregate, analytic_causal_ceiling, causal_chance_oracle, micro_f1, spearman, ChanceOracle,
    EvalError, F1Result, MetricsRecord, SeedAggregate,
};
pub use model::{
    build_mask_config, middle_unmask_interval, LayerMaskConfig, LoraMeta, LoraTarget, MaskKind,
    ModelConfig, ModelError, SLModel, Strategy, LORA_ALL_TARGETS, MAX_LEN,
};
pub use repetition::{
    bidirectional_share, classify_blocks, extract_final_instance, repeat, BlockClass, BlockReport,
    RepeatedSequence,
};
pub use profile::{
    grid_strictly_decreasing, median_seconds, profile_model, solve_cost_model, synthetic_batch,
    theory_speedup_grid, toy_exit_analogs, CostModel, ProfileError, ProfileOptions, ProfileReport,
};
pub use tensor::{backward, fd_check, no_grad, Graph, Tensor};
pub use train::{
    adamw_step, evaluate_sl, pretrain_lm, train_sl, AdamState, PretrainReport, RunManifest,
    TrainConfig, TrainError,
};
