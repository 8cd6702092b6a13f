//! Degradation balls, hard-negative degradation and evaluation reports.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::losses::{example_loss, is_success, sequence_logprob};
use crate::datasets::{CanonicalExample, HardNegative};
use crate::error::{Error, Result};
use crate::models::LanguageModel;

/// The three ball radii reported throughout.
pub const BALL_EPSILONS: [f64; 3] = [1e-3, 1e-4, 1e-5];

/// Summed NLL and predicted-token count over a corpus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NllTotals {
    pub total: f64,
    pub tokens: usize,
}

impl NllTotals {
    pub fn mean(&self) -> f64 {
        self.total / self.tokens as f64
    }
}

/// Per-sequence NLL, computed in parallel and returned in corpus order.
pub fn sequence_nlls<M: LanguageModel + ?Sized>(model: &M, corpus: &[Vec<usize>]) -> Result<Vec<f64>> {
    corpus
        .par_iter()
        .map(|s| {
            if s.len() < 2 {
                return Err(Error::Corpus("corpus sequences need at least two tokens".into()));
            }
            Ok(-sequence_logprob(model, &s[..1], &s[1..])?)
        })
        .collect()
}

/// Per-token NLL over every predicted position of every sequence. The sum is
/// taken sequentially so the result does not depend on thread scheduling.
pub fn corpus_nll<M: LanguageModel + ?Sized>(model: &M, corpus: &[Vec<usize>]) -> Result<NllTotals> {
    if corpus.is_empty() {
        return Err(Error::Corpus("corpus is empty".into()));
    }
    let per_seq = sequence_nlls(model, corpus)?;
    Ok(NllTotals {
        total: per_seq.iter().sum(),
        tokens: corpus.iter().map(|s| s.len() - 1).sum(),
    })
}

/// Hex SHA-256 of the token sequences, identifying a reference corpus.
pub fn corpus_fingerprint(corpus: &[Vec<usize>]) -> String {
    let mut h = Sha256::new();
    for s in corpus {
        h.update((s.len() as u64).to_le_bytes());
        for &t in s {
            h.update((t as u64).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationBall {
    pub epsilon: f64,
    /// Mean per-token NLL of the initial model on the reference corpus.
    pub base_loss: f64,
    pub corpus_ref: String,
}

impl DegradationBall {
    pub fn new(epsilon: f64, base_loss: f64, corpus_ref: impl Into<String>) -> Result<Self> {
        if !(epsilon > 0.0) || !(base_loss > 0.0) || !base_loss.is_finite() {
            return Err(Error::Config(format!(
                "ball needs epsilon > 0 and a positive base loss, got {epsilon} and {base_loss}"
            )));
        }
        Ok(DegradationBall {
            epsilon,
            base_loss,
            corpus_ref: corpus_ref.into(),
        })
    }

    /// Measures the base loss of `model` on `corpus`.
    pub fn around<M: LanguageModel + ?Sized>(model: &M, corpus: &[Vec<usize>], epsilon: f64) -> Result<Self> {
        let base = corpus_nll(model, corpus)?.mean();
        DegradationBall::new(epsilon, base, corpus_fingerprint(corpus))
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        DegradationBall::new(epsilon, self.base_loss, self.corpus_ref.clone())
    }

    pub fn ratio_of(&self, mean_loss: f64) -> f64 {
        mean_loss / self.base_loss
    }

    pub fn admits(&self, ratio: f64) -> bool {
        ratio <= 1.0 + self.epsilon
    }

    /// Loss ratio of `model` against the base loss, and whether it is a member.
    pub fn membership<M: LanguageModel + ?Sized>(&self, model: &M, corpus: &[Vec<usize>]) -> Result<(f64, bool)> {
        let ratio = self.ratio_of(corpus_nll(model, corpus)?.mean());
        Ok((ratio, self.admits(ratio)))
    }
}

/// Mean change in true-completion NLL over the hard negatives; lower is better.
pub fn hard_negative_delta<A, B>(after: &A, before: &B, hard: &[HardNegative]) -> Result<f64>
where
    A: LanguageModel + ?Sized,
    B: LanguageModel + ?Sized,
{
    let per = hard_negative_deltas(after, before, hard)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

pub fn hard_negative_deltas<A, B>(after: &A, before: &B, hard: &[HardNegative]) -> Result<Vec<f64>>
where
    A: LanguageModel + ?Sized,
    B: LanguageModel + ?Sized,
{
    if after.vocab_size() != before.vocab_size() {
        return Err(Error::Vocab("models disagree on vocabulary size".into()));
    }
    if hard.is_empty() {
        return Err(Error::Corpus("hard-negative set is empty".into()));
    }
    hard.par_iter()
        .map(|h| Ok(sequence_logprob(before, &h.prefix, &h.y)? - sequence_logprob(after, &h.prefix, &h.y)?))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleResult {
    pub id: usize,
    pub loss: f64,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub success_rate: f64,
    pub per_example: Vec<ExampleResult>,
    pub ball_ratio: Option<f64>,
    pub ball_member: Option<bool>,
    pub hard_negative_delta: Option<f64>,
}

pub fn example_results<M: LanguageModel + ?Sized>(model: &M, examples: &[CanonicalExample]) -> Result<Vec<ExampleResult>> {
    examples
        .par_iter()
        .enumerate()
        .map(|(id, ex)| {
            let loss = example_loss(model, ex)?;
            Ok(ExampleResult {
                id,
                loss,
                success: is_success(loss, ex.delta),
            })
        })
        .collect()
}

pub fn success_rate<M: LanguageModel + ?Sized>(model: &M, examples: &[CanonicalExample]) -> Result<f64> {
    Ok(EvalReport::from_results(example_results(model, examples)?)?.success_rate)
}

impl EvalReport {
    pub fn from_results(per_example: Vec<ExampleResult>) -> Result<Self> {
        if per_example.is_empty() {
            return Err(Error::Corpus("evaluation set is empty".into()));
        }
        let hits = per_example.iter().filter(|r| r.success).count();
        Ok(EvalReport {
            success_rate: hits as f64 / per_example.len() as f64,
            per_example,
            ball_ratio: None,
            ball_member: None,
            hard_negative_delta: None,
        })
    }

    /// Success on `examples`, plus ball membership on `corpus` and the
    /// hard-negative delta against `base` when those are supplied.
    pub fn evaluate<M, B>(
        model: &M,
        examples: &[CanonicalExample],
        ball: Option<(&DegradationBall, &[Vec<usize>])>,
        hard: Option<(&B, &[HardNegative])>,
    ) -> Result<Self>
    where
        M: LanguageModel + ?Sized,
        B: LanguageModel + ?Sized,
    {
        let mut r = EvalReport::from_results(example_results(model, examples)?)?;
        if let Some((ball, corpus)) = ball {
            let (ratio, member) = ball.membership(model, corpus)?;
            r.ball_ratio = Some(ratio);
            r.ball_member = Some(member);
        }
        if let Some((base, h)) = hard {
            r.hard_negative_delta = Some(hard_negative_delta(model, base, h)?);
        }
        Ok(r)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// One row per example: `example_id,loss,success`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["example_id", "loss", "success"])?;
        for r in &self.per_example {
            w.write_record([r.id.to_string(), format!("{:?}", r.loss), (r.success as u8).to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn admission_grows_with_radius(ratio in 0.99..1.01f64, base in 0.1..10.0f64) {
            let mut prev = false;
            for eps in [1e-5, 1e-4, 1e-3] {
                let now = DegradationBall::new(eps, base, "g").unwrap().admits(ratio);
                prop_assert!(!prev || now);
                prev = now;
            }
            prop_assert!(DegradationBall::new(1e-5, base, "g").unwrap().admits(1.0));
        }
    }
}
