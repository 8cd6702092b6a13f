//! Losses, success criterion, degradation balls and evaluation reports.

mod graph;
mod losses;
mod metrics;

pub use graph::{continuation_logprob_var, example_loss_var, sequence_nll_var};
pub use losses::{
    combine_loss, continuation_logprob, example_loss, is_success, scoring_input, sequence_logprob, success,
};
pub use metrics::{
    corpus_fingerprint, corpus_nll, example_results, hard_negative_delta, hard_negative_deltas, sequence_nlls,
    success_rate, DegradationBall, EvalReport, ExampleResult, NllTotals, BALL_EPSILONS,
};
