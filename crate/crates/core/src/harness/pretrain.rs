//! Next-token pretraining of the toy models on the synthetic corpus.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::edit::ModelKind;
use crate::error::{Error, Result};
use crate::eval::{corpus_nll, sequence_nll_var};
use crate::models::{Bound, TrainableLm};
use crate::tensor::{clip_global_norm, Adam, AdamConfig, CosineSchedule, Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Held-out evaluation interval, in steps.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub clip_norm: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 3000,
            batch_size: 16,
            learning_rate: 3e-3,
            eval_every: 100,
            patience: 5,
            clip_norm: 1.0,
        }
    }
}

impl PretrainConfig {
    /// Schedule used for the toy models of each kind.
    pub fn for_kind(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Backpack => PretrainConfig {
                steps: 6000,
                learning_rate: 1e-2,
                eval_every: 250,
                patience: 24,
                ..PretrainConfig::default()
            },
            ModelKind::Host => PretrainConfig {
                steps: 3000,
                learning_rate: 3e-3,
                eval_every: 250,
                patience: 12,
                ..PretrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Mean per-token training NLL since the previous point.
    pub train_nll: Option<f64>,
    pub heldout_nll: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome<M> {
    /// Parameters at the best held-out evaluation.
    pub model: M,
    pub curve: Vec<CurvePoint>,
    pub initial_heldout_nll: f64,
    pub best_heldout_nll: f64,
    pub best_step: usize,
}

/// Summed NLL, token count and per-parameter gradients for one batch. Each
/// sequence gets its own graph; gradients are summed in batch order.
pub(crate) fn batch_gradients<M: TrainableLm>(
    model: &M,
    batch: &[&[usize]],
    trainable: &(dyn Fn(&str) -> bool + Sync),
) -> Result<(f64, usize, Vec<Tensor>)> {
    let per_seq: Vec<(f64, Vec<Option<Tensor>>)> = batch
        .par_iter()
        .map(|seq| {
            let mut g = Graph::new();
            let b = Bound::bind(&mut g, model.params(), trainable);
            let nll = sequence_nll_var(&mut g, seq, &mut |g, t| model.forward_graph(g, &b, t))?;
            let value = g.value(nll).item();
            let mut grads = g.backward(nll)?;
            let out = model
                .params()
                .names()
                .filter(|n| trainable(n))
                .map(|n| b.var(n).map(|v| grads.take(v)))
                .collect::<Result<Vec<_>>>()?;
            Ok((value, out))
        })
        .collect::<Result<_>>()?;
    let mut total: Vec<Tensor> = model
        .params()
        .iter()
        .filter(|(n, _)| trainable(n))
        .map(|(_, t)| Tensor::zeros(t.shape()))
        .collect();
    let mut loss = 0.0;
    for (value, grads) in per_seq {
        loss += value;
        for (acc, gr) in total.iter_mut().zip(grads) {
            if let Some(gr) = gr {
                acc.add_assign(&gr)?;
            }
        }
    }
    let tokens = batch.iter().map(|s| s.len() - 1).sum();
    Ok((loss, tokens, total))
}

/// Trains every parameter by next-token NLL. Stops early once held-out NLL
/// has not improved for `patience` evaluations and returns the best model.
pub fn pretrain<M: TrainableLm>(
    model: M,
    corpus: &[Vec<usize>],
    heldout: &[Vec<usize>],
    config: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome<M>> {
    if corpus.is_empty() || heldout.is_empty() {
        return Err(Error::Corpus("pretraining and held-out corpora must be non-empty".into()));
    }
    if config.batch_size == 0 || config.eval_every == 0 || !(config.learning_rate >= 0.0) {
        return Err(Error::Config("batch_size and eval_every must be positive, learning_rate non-negative".into()));
    }
    let initial = corpus_nll(&model, heldout)?.mean();
    let mut curve = vec![CurvePoint {
        step: 0,
        train_nll: None,
        heldout_nll: initial,
    }];
    let mut best = (initial, 0usize, model.clone());
    let mut model = model;
    let all = |_: &str| true;
    let mut adam = Adam::new(model.params().iter().map(|(_, t)| t), AdamConfig::default());
    let schedule = CosineSchedule::new(config.learning_rate, config.steps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut run_loss, mut run_tokens, mut stale) = (0.0, 0usize, 0usize);

    for step in 0..config.steps {
        let picks = sample(&mut rng, corpus.len(), config.batch_size.min(corpus.len()));
        let batch: Vec<&[usize]> = picks.iter().map(|i| corpus[i].as_slice()).collect();
        let (loss, tokens, mut grads) = batch_gradients(&model, &batch, &all)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch: 0, step, loss });
        }
        for gr in &mut grads {
            gr.scale_assign(1.0 / tokens as f64);
        }
        clip_global_norm(&mut grads, config.clip_norm);
        let mut params: Vec<&mut Tensor> = model.params_mut().iter_mut_where(all).into_iter().map(|(_, t)| t).collect();
        adam.update(&mut params, &grads, schedule.lr(step));
        run_loss += loss;
        run_tokens += tokens;

        let done = step + 1;
        if done % config.eval_every == 0 || done == config.steps {
            let held = corpus_nll(&model, heldout)?.mean();
            if !held.is_finite() {
                return Err(Error::Divergence { epoch: 0, step, loss: held });
            }
            curve.push(CurvePoint {
                step: done,
                train_nll: Some(run_loss / run_tokens as f64),
                heldout_nll: held,
            });
            (run_loss, run_tokens) = (0.0, 0);
            if held < best.0 {
                best = (held, done, model.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    break;
                }
            }
        }
    }
    Ok(PretrainOutcome {
        model: best.2,
        curve,
        initial_heldout_nll: initial,
        best_heldout_nll: best.0,
        best_step: best.1,
    })
}
