//! Differentiable forms of the sequence scores and example losses.

use super::losses::scoring_input;
use crate::datasets::{CanonicalExample, LossKind};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Sum of teacher-forced log-probabilities of `y` as a `[1]` node, given
/// the logits node of the scoring input.
pub fn continuation_logprob_var(g: &mut Graph, logits: Var, prefix_len: usize, y: &[usize]) -> Result<Var> {
    if prefix_len == 0 || y.is_empty() {
        return Err(Error::Schema("prefix and continuation must be non-empty".into()));
    }
    let cols = g.value(logits).cols();
    let lsm = g.log_softmax(logits);
    let idx: Vec<usize> = y.iter().enumerate().map(|(i, &t)| (prefix_len - 1 + i) * cols + t).collect();
    if let Some(&bad) = y.iter().find(|&&t| t >= cols) {
        return Err(Error::Vocab(format!("token id {bad} outside vocabulary of {cols}")));
    }
    let picked = g.select(lsm, &idx)?;
    Ok(g.sum(picked))
}

/// Summed NLL over every predicted position of `seq`.
pub fn sequence_nll_var<F>(g: &mut Graph, seq: &[usize], forward: &mut F) -> Result<Var>
where
    F: FnMut(&mut Graph, &[usize]) -> Result<Var>,
{
    if seq.len() < 2 {
        return Err(Error::Corpus("corpus sequences need at least two tokens".into()));
    }
    let logits = forward(g, &seq[..seq.len() - 1])?;
    let lp = continuation_logprob_var(g, logits, 1, &seq[1..])?;
    Ok(g.neg(lp))
}

/// Example loss as a graph node. `forward` maps an input sequence to its
/// logits node; continuations that share a scoring input share one call.
pub fn example_loss_var<F>(g: &mut Graph, ex: &CanonicalExample, forward: &mut F) -> Result<Var>
where
    F: FnMut(&mut Graph, &[usize]) -> Result<Var>,
{
    ex.validate()?;
    let mut cache: Option<(Vec<usize>, Var)> = None;
    let mut score = |g: &mut Graph, y: &[usize]| -> Result<Var> {
        let input = scoring_input(&ex.prefix, y);
        let logits = match &cache {
            Some((seq, v)) if *seq == input => *v,
            _ => {
                let v = forward(g, &input)?;
                cache = Some((input, v));
                v
            }
        };
        continuation_logprob_var(g, logits, ex.prefix.len(), y)
    };
    let a = if ex.loss.needs_a() {
        Some(score(g, ex.y_a.as_deref().expect("validated"))?)
    } else {
        None
    };
    let b = if ex.loss.needs_b() {
        Some(score(g, ex.y_b.as_deref().expect("validated"))?)
    } else {
        None
    };
    Ok(match (ex.loss, a, b) {
        (LossKind::NllGood, Some(a), _) => g.neg(a),
        (LossKind::SuppressBad, _, Some(b)) => b,
        (LossKind::AbsBalance, Some(a), Some(b)) => {
            let d = g.sub(b, a)?;
            g.abs(d)
        }
        (LossKind::PreferAOverB, Some(a), Some(b)) => g.sub(b, a)?,
        _ => unreachable!("validated examples carry the continuations their loss needs"),
    })
}
