//! Unsupervised slot-boundary induction: a small trainable contextual
//! encoder probed with perturbed masking, recursive segmentation of the
//! resulting impact matrices, contrastive refinement of the encoder, and
//! boundary scoring in the Break-Tie schema.

pub mod bteval;
pub mod contrastive;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod probing;
pub mod synth;
pub mod tape;
pub mod trainer;

pub use bteval::{h_mean, score_bt, score_corpus, segmentation_to_bt, Aggregation, MetricsReport};
pub use contrastive::{
    crop_segments, matrix_similarity, random_segmentation, seg_cl_loss, sent_cl_loss, total_loss,
    LossWeights, SimReduction, Temperatures,
};
pub use corpus::{
    derive_bt_gold, load_jsonl, split_by_intent, BtLabel, BtSequence, Corpus, SplitSpec,
    Utterance, Vocab,
};
pub use encoder::{
    encode, init_params, load_checkpoint, save_checkpoint, EncoderConfig, EncoderParams,
};
pub use error::{Error, Result};
pub use probing::{
    branching_baseline, build_tree, cut_score, impact_matrix, pool_segments, segments_at_depth,
    BlockAgg, BranchSide, DistanceMetric, ImpactMatrix, Segmentation, SegmentMatrix,
};
pub use synth::{build_synthetic_corpus, write_synthetic_corpus};
pub use trainer::{
    evaluate_boundaries, parse_config, sample_batch, train, tune_depth, TrainConfig, TrainReport,
};
