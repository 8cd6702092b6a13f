//! Toy Backpack LM, host Transformer LM, and checkpoint I/O.

mod backpack;
pub mod checkpoint;
mod config;
mod host;
pub mod layers;
mod params;

pub(crate) use backpack::{sense_sum_numeric, stack_senses};
pub use backpack::{AlphaTensor, BackpackModel, ParamGroup, SenseBank, SENSES, OUTPUT_EMBEDDING};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::ModelConfig;
pub use host::HostTransformerLM;
pub use params::{AdapterVars, Bound, ParamSet};

use crate::error::{Error, Result};
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, Graph, Tensor, Var};

/// Anything that maps a token sequence to one logit row per position.
pub trait LanguageModel: Send + Sync {
    fn vocab_size(&self) -> usize;
    fn max_len(&self) -> usize;
    /// `T×|V|` logits; row `t` predicts token `t + 1`.
    fn logits(&self, tokens: &[usize]) -> Result<Tensor>;
}

/// A language model whose forward pass can be recorded on a [`Graph`].
pub trait TrainableLm: LanguageModel + Clone {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn forward_graph(&self, g: &mut Graph, b: &Bound, tokens: &[usize]) -> Result<Var>;
    /// Number of Transformer blocks carrying LoRA-targetable MLPs.
    fn mlp_layers(&self) -> usize;
    /// Parameter-name prefix of those blocks.
    fn mlp_prefix(&self) -> &'static str;
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn max_len(&self) -> usize {
        (**self).max_len()
    }
    fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        (**self).logits(tokens)
    }
}

/// Finite-difference check of `loss` with respect to every parameter of
/// `model`. `loss` records its forward pass through the given binding.
pub fn grad_check_model<M: TrainableLm>(
    model: &M,
    loss: impl Fn(&mut Graph, &Bound) -> Result<Var>,
    tol: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let names: Vec<String> = model.params().names().map(String::from).collect();
    let tensors: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
    grad_check(
        |g, vars| {
            let b = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()));
            loss(g, &b)
        },
        &tensors,
        tol,
        opts,
    )
}

pub(crate) fn check_tokens(tokens: &[usize], vocab: usize, max_len: usize) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Length { len: 0, max: max_len });
    }
    if tokens.len() > max_len {
        return Err(Error::Length {
            len: tokens.len(),
            max: max_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::Vocab(format!("token id {bad} outside vocabulary of {vocab}")));
    }
    Ok(())
}

pub(crate) fn graph_logits<M: TrainableLm>(model: &M, tokens: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = Bound::constants(&mut g, model.params());
    let out = model.forward_graph(&mut g, &b, tokens)?;
    Ok(g.value(out).clone())
}
