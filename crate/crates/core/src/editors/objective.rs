//! The KL-regularized editing objective: mean canonical-example loss plus
//! λ times the mean per-position KL from the initial model on a fixed
//! sample of the regularization corpus.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datasets::CanonicalExample;
use crate::error::{Error, Result};
use crate::eval::example_loss;
use crate::models::LanguageModel;
use crate::tensor::{log_softmax_row, Tensor};

/// Fixed regularization sequences with the initial model's log-probabilities
/// at every position.
#[derive(Clone, Debug)]
pub struct RegSample {
    pub seqs: Vec<Vec<usize>>,
    pub base_logprobs: Vec<Arc<Tensor>>,
}

pub fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for r in 0..logits.rows() {
        let lp = log_softmax_row(logits.row(r));
        out.row_mut(r).copy_from_slice(&lp);
    }
    out
}

impl RegSample {
    pub fn new<M: LanguageModel + ?Sized>(base: &M, seqs: Vec<Vec<usize>>) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Corpus("regularization sample is empty".into()));
        }
        let base_logprobs = seqs
            .iter()
            .map(|s| Ok(Arc::new(log_softmax_rows(&base.logits(s)?))))
            .collect::<Result<_>>()?;
        Ok(RegSample { seqs, base_logprobs })
    }

    /// Draws `n` sequences (all of them if fewer) without replacement.
    pub fn draw<M: LanguageModel + ?Sized>(base: &M, corpus: &[Vec<usize>], n: usize, seed: u64) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Corpus("regularization corpus is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, corpus.len(), n.min(corpus.len())).into_vec();
        idx.sort_unstable();
        RegSample::new(base, idx.into_iter().map(|i| corpus[i].clone()).collect())
    }

    pub fn positions(&self) -> usize {
        self.seqs.iter().map(Vec::len).sum()
    }
}

/// `KL(softmax(logits[r]) ‖ exp(reference[r]))` for every row.
pub fn kl_rows(logits: &Tensor, reference: &Tensor) -> Result<Vec<f64>> {
    logits.expect_same_shape(reference)?;
    Ok((0..logits.rows())
        .map(|r| {
            let lp = log_softmax_row(logits.row(r));
            lp.iter().zip(reference.row(r)).map(|(l, q)| l.exp() * (l - q)).sum()
        })
        .collect())
}

/// Mean KL over every position of the sample.
pub fn mean_kl<M: LanguageModel + ?Sized>(model: &M, reg: &RegSample) -> Result<f64> {
    let mut total = 0.0;
    for (s, q) in reg.seqs.iter().zip(&reg.base_logprobs) {
        total += kl_rows(&model.logits(s)?, q)?.iter().sum::<f64>();
    }
    Ok(total / reg.positions() as f64)
}

pub(crate) fn check_kl_weight(lambda: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("KL weight must be positive, got {lambda}")));
    }
    Ok(())
}

pub fn kl_regularized_objective<M: LanguageModel + ?Sized>(
    model: &M,
    train: &[CanonicalExample],
    reg: &RegSample,
    lambda: f64,
) -> Result<f64> {
    check_kl_weight(lambda)?;
    if train.is_empty() {
        return Err(Error::Corpus("training set is empty".into()));
    }
    let mut loss = 0.0;
    for ex in train {
        loss += example_loss(model, ex)?;
    }
    Ok(loss / train.len() as f64 + lambda * mean_kl(model, reg)?)
}
