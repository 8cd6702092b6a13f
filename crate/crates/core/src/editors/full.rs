//! Full finetuning: every parameter is trainable.

use super::config::{EditConfig, Method};
use super::objective::RegSample;
use super::trace::EpochTrace;
use super::trainer::{run_epochs, EditProblem};
use crate::datasets::CanonicalExample;
use crate::error::{Error, Result};
use crate::eval::{corpus_nll, DegradationBall};
use crate::models::{Bound, TrainableLm};
use crate::tensor::{Graph, Tensor, Var};

struct FullProblem<M> {
    model: M,
}

impl<M: TrainableLm> EditProblem for FullProblem<M> {
    type Binding = Bound;
    type Snapshot = M;

    fn trainable(&self) -> Vec<&Tensor> {
        self.model.params().iter().map(|(_, t)| t).collect()
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        self.model.params_mut().iter_mut_where(|_| true).into_iter().map(|(_, t)| t).collect()
    }

    fn bind(&self, g: &mut Graph) -> Result<(Bound, Vec<Var>)> {
        let b = Bound::bind(g, self.model.params(), |_| true);
        let vars = self.model.params().names().map(|n| b.var(n)).collect::<Result<_>>()?;
        Ok((b, vars))
    }

    fn forward(&self, g: &mut Graph, b: &Bound, tokens: &[usize]) -> Result<Var> {
        self.model.forward_graph(g, b, tokens)
    }

    fn snapshot(&self) -> M {
        self.model.clone()
    }

    fn ball_loss(&self, corpus: &[Vec<usize>]) -> Result<f64> {
        Ok(corpus_nll(&self.model, corpus)?.mean())
    }
}

pub(crate) fn expect_method(config: &EditConfig, method: Method) -> Result<()> {
    if config.method != method {
        return Err(Error::Config(format!(
            "{} editor given a {} config",
            method.as_str(),
            config.method.as_str()
        )));
    }
    config.validate()
}

/// Finetunes all parameters under the KL-regularized objective. Snapshot 0
/// is the unedited model.
pub fn full_finetune<M: TrainableLm>(
    model: &M,
    train: &[CanonicalExample],
    reg: &RegSample,
    config: &EditConfig,
    ball: &DegradationBall,
    ball_corpus: &[Vec<usize>],
) -> Result<EpochTrace<M>> {
    expect_method(config, Method::Full)?;
    run_epochs(FullProblem { model: model.clone() }, train, reg, config, ball, ball_corpus)
}
