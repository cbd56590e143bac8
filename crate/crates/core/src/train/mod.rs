//! Training, decoding, metrics and experiment harnesses.

mod decode;
mod harness;
mod loss;
mod metrics;
mod trainer;

pub use decode::{
    beam_search, generate, generate_greedy, greedy, AnswerTrie, BeamHypothesis, DecodeMode, DecodeSettings, Generation, ModelScorer,
    StepScorer,
};
pub use harness::{
    continual_vs_scratch, evaluate, grid_search, grid_search_with, map_to_class, median_steps, predict,
    score_predictions, source_digest, steps_to_target, truncation_ablation, zero_shot_eval, AblationResult,
    EvalContext, EvalRecord, EvalReport, EvalSummary, Grid, GridCell, GridResult, Metric, MetricParams, Prediction,
    TaskReport, TransferComparison,
};
pub use loss::{batch_gradients, data_parallel_gradients, example_gradients, example_loss};
pub use metrics::{
    accuracy, cider, lcs_len, metric_tokens, normalize_answer, rouge_l, rouge_l_tokens, CiderScores, RougeL,
    CIDER_MAX_N, CIDER_SCALE, ROUGE_BETA,
};
pub use trainer::{learning_rate, total_steps, train, Dataset, InitMode, TrainOutcome, TrainPlan};
