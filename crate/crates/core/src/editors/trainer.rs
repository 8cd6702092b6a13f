//! The epoch loop shared by every editing method.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::EditConfig;
use super::objective::RegSample;
use super::trace::EpochTrace;
use crate::datasets::CanonicalExample;
use crate::error::{Error, Result};
use crate::eval::{example_loss_var, DegradationBall};
use crate::tensor::{clip_global_norm, Adam, AdamConfig, CosineSchedule, Graph, Tensor, Var};

/// What an editor exposes to the epoch loop: the tensors it trains, how to
/// record a forward pass over them, and how to snapshot and score itself.
pub(crate) trait EditProblem: Sync {
    type Binding;
    type Snapshot;

    fn trainable(&self) -> Vec<&Tensor>;
    fn trainable_mut(&mut self) -> Vec<&mut Tensor>;
    /// Adds the model to `g`; returns the binding and the trainable leaves
    /// in `trainable()` order.
    fn bind(&self, g: &mut Graph) -> Result<(Self::Binding, Vec<Var>)>;
    fn forward(&self, g: &mut Graph, b: &Self::Binding, tokens: &[usize]) -> Result<Var>;
    fn snapshot(&self) -> Self::Snapshot;
    /// Mean per-token NLL on the ball's reference corpus.
    fn ball_loss(&self, corpus: &[Vec<usize>]) -> Result<f64>;
}

enum Item<'a> {
    Example(&'a CanonicalExample, f64),
    Reg(usize, f64),
}

fn item_grads<P: EditProblem>(p: &P, reg: &RegSample, item: &Item) -> Result<(f64, Vec<Option<Tensor>>)> {
    let mut g = Graph::new();
    let (b, leaves) = p.bind(&mut g)?;
    let mut fwd = |g: &mut Graph, t: &[usize]| p.forward(g, &b, t);
    let out = match *item {
        Item::Example(ex, w) => {
            let l = example_loss_var(&mut g, ex, &mut fwd)?;
            g.scale(l, w)
        }
        Item::Reg(i, w) => {
            let logits = fwd(&mut g, &reg.seqs[i])?;
            let rows = g.kl_rows(logits, reg.base_logprobs[i].clone())?;
            let s = g.sum(rows);
            g.scale(s, w)
        }
    };
    let value = g.value(out).item();
    let mut grads = g.backward(out)?;
    Ok((value, leaves.into_iter().map(|v| grads.take(v)).collect()))
}

/// Objective value and gradients on one batch: mean example loss plus λ
/// times the mean per-position KL over the whole regularization sample.
pub(crate) fn step_gradients<P: EditProblem>(
    p: &P,
    batch: &[&CanonicalExample],
    reg: &RegSample,
    lambda: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let wk = lambda / reg.positions() as f64;
    let mut items: Vec<Item> = batch.iter().map(|ex| Item::Example(ex, 1.0 / batch.len() as f64)).collect();
    items.extend((0..reg.seqs.len()).map(|i| Item::Reg(i, wk)));
    let parts: Vec<(f64, Vec<Option<Tensor>>)> = items
        .par_iter()
        .map(|it| item_grads(p, reg, it))
        .collect::<Result<_>>()?;
    let mut total: Vec<Tensor> = p.trainable().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut loss = 0.0;
    for (v, grads) in parts {
        loss += v;
        for (acc, gr) in total.iter_mut().zip(grads) {
            if let Some(gr) = gr {
                acc.add_assign(&gr)?;
            }
        }
    }
    Ok((loss, total))
}

/// Shuffles the training set each epoch, steps Adam under a cosine decay to
/// zero over all epochs, and records a snapshot and ball ratio per epoch.
pub(crate) fn run_epochs<P: EditProblem>(
    mut p: P,
    train: &[CanonicalExample],
    reg: &RegSample,
    config: &EditConfig,
    ball: &DegradationBall,
    ball_corpus: &[Vec<usize>],
) -> Result<EpochTrace<P::Snapshot>> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Corpus("training set is empty".into()));
    }
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let schedule = CosineSchedule::new(config.learning_rate, steps_per_epoch * config.epochs);
    let mut adam = Adam::new(p.trainable(), AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = EpochTrace::new(p.snapshot(), 1.0);
    let mut step = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (s, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&CanonicalExample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, mut grads) = step_gradients(&p, &batch, reg, config.kl_weight)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, step: s, loss });
            }
            clip_global_norm(&mut grads, config.clip_norm);
            adam.update(&mut p.trainable_mut(), &grads, schedule.lr(step));
            epoch_loss += loss;
            step += 1;
        }
        let ratio = ball.ratio_of(p.ball_loss(ball_corpus)?);
        if !ratio.is_finite() {
            return Err(Error::Divergence { epoch, step: steps_per_epoch, loss: ratio });
        }
        trace.push(p.snapshot(), epoch_loss / steps_per_epoch as f64, ratio);
    }
    Ok(trace)
}
