//! Numeric core for caption-image alignment training and evaluation:
//! attention pooling, alignment losses, entropic transport, a small reverse
//! autodiff tape, a toy cross-attention captioner, the caption data
//! pipeline, and embedding-space diagnostics.

pub mod attnpool;
pub mod autodiff;
pub mod losses;
pub mod mat;
pub mod numio;
pub mod objective;
pub mod ot;
pub mod datapipe;
pub mod diagnostics;
pub mod toycap;

pub use attnpool::{
    aggregate_attention, retention_margin, softmax_scaled, topk_softmax, topk_softmax_mode,
    weighted_pool, AttentionStack, AttnError, PatchTokens, PatchWeights, RetentionMode,
};
pub use autodiff::{Gradients, NodeId, Tape, TapeError};
pub use losses::{
    cosine, infonce, masked_ce, pal_loss, LogitsBatch, LossError, PooledPairBatch, NORM_FLOOR,
};
pub use mat::Mat;
pub use objective::{
    grad_check, joint_loss, ImagePairNodes, JointBatchNodes, JointLoss, LossBreakdown,
    ObjectiveError, StopGrad,
};
pub use numio::{
    load_config, load_tensor, read_records_csv, read_records_jsonl, save_config, save_tensor,
    write_records_csv, write_records_jsonl, CaptionPairRecord, NumioError, RecordFormat, RunConfig,
    TensorData, TensorFile,
};
pub use ot::{
    cosine_cost, lp_oracle, ot_marginals, sinkhorn, sinkhorn_to_tolerance, CostMatrix, OtError,
    SinkhornSolution, TransportPlan,
};
