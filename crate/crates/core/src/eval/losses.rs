//! Per-example losses and the strict success criterion.

use crate::datasets::{CanonicalExample, LossKind};
use crate::error::{Error, Result};
use crate::models::LanguageModel;
use crate::tensor::{log_softmax_row, Tensor};

/// Teacher-forced log-probability of `y` given `prefix`, read from logits of
/// the concatenated sequence. Row `t` of `logits` predicts token `t + 1`.
pub fn continuation_logprob(logits: &Tensor, prefix_len: usize, y: &[usize]) -> Result<f64> {
    if prefix_len == 0 {
        return Err(Error::Schema("prefix must be non-empty".into()));
    }
    if logits.rows() < prefix_len + y.len() - 1 {
        return Err(Error::Dimension(format!(
            "{} logit rows cannot score a {}-token continuation after {prefix_len} tokens",
            logits.rows(),
            y.len()
        )));
    }
    let mut total = 0.0;
    for (i, &tok) in y.iter().enumerate() {
        let row = log_softmax_row(logits.row(prefix_len - 1 + i));
        total += *row
            .get(tok)
            .ok_or_else(|| Error::Vocab(format!("token id {tok} outside vocabulary of {}", row.len())))?;
    }
    Ok(total)
}

/// Input tokens needed to score `y`: the prefix plus all but the last
/// continuation token.
pub fn scoring_input(prefix: &[usize], y: &[usize]) -> Vec<usize> {
    let mut seq = prefix.to_vec();
    seq.extend_from_slice(&y[..y.len().saturating_sub(1)]);
    seq
}

pub fn sequence_logprob<M: LanguageModel + ?Sized>(model: &M, prefix: &[usize], y: &[usize]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::Schema("continuation must be non-empty".into()));
    }
    let logits = model.logits(&scoring_input(prefix, y))?;
    continuation_logprob(&logits, prefix.len(), y)
}

/// Combines continuation log-probabilities into a loss.
pub fn combine_loss(kind: LossKind, logp_a: Option<f64>, logp_b: Option<f64>) -> Result<f64> {
    let need = |v: Option<f64>, which: &str| {
        v.ok_or_else(|| Error::Schema(format!("{kind} requires {which}")))
    };
    Ok(match kind {
        LossKind::NllGood => -need(logp_a, "y_a")?,
        LossKind::SuppressBad => need(logp_b, "y_b")?,
        LossKind::AbsBalance => (need(logp_b, "y_b")? - need(logp_a, "y_a")?).abs(),
        LossKind::PreferAOverB => -(need(logp_a, "y_a")? - need(logp_b, "y_b")?),
    })
}

pub fn example_loss<M: LanguageModel + ?Sized>(model: &M, ex: &CanonicalExample) -> Result<f64> {
    ex.validate()?;
    let lp = |y: &Option<Vec<usize>>| y.as_deref().map(|y| sequence_logprob(model, &ex.prefix, y)).transpose();
    let a = if ex.loss.needs_a() { lp(&ex.y_a)? } else { None };
    let b = if ex.loss.needs_b() { lp(&ex.y_b)? } else { None };
    combine_loss(ex.loss, a, b)
}

/// Strictly below threshold.
pub fn is_success(loss: f64, delta: f64) -> bool {
    loss < delta
}

pub fn success<M: LanguageModel + ?Sized>(model: &M, ex: &CanonicalExample) -> Result<bool> {
    Ok(is_success(example_loss(model, ex)?, ex.delta))
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn loss_kinds_have_their_symmetries(a in -30.0..0.0f64, b in -30.0..0.0f64) {
            let bal = combine_loss(LossKind::AbsBalance, Some(a), Some(b)).unwrap();
            prop_assert!(bal >= 0.0);
            prop_assert_eq!(bal, combine_loss(LossKind::AbsBalance, Some(b), Some(a)).unwrap());
            let ab = combine_loss(LossKind::PreferAOverB, Some(a), Some(b)).unwrap();
            prop_assert_eq!(ab, -combine_loss(LossKind::PreferAOverB, Some(b), Some(a)).unwrap());
            prop_assert_eq!(combine_loss(LossKind::NllGood, Some(a), None).unwrap(), -a);
            prop_assert_eq!(combine_loss(LossKind::SuppressBad, None, Some(b)).unwrap(), b);
        }

        #[test]
        fn success_is_strictly_below_threshold(loss in -10.0..10.0f64, delta in -10.0..10.0f64) {
            prop_assert_eq!(is_success(loss, delta), loss < delta);
            prop_assert!(!is_success(delta, delta));
        }
    }
}
