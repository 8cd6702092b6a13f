use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{embed, init_stack, stack_forward, StackShape, INIT_STD};
use super::params::{Bound, ParamSet};
use super::{check_tokens, graph_logits, LanguageModel, ModelConfig, TrainableLm};
use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Decoder-only Transformer LM used as the large host model and as a
/// target for full and low-rank finetuning.
#[derive(Clone, Debug)]
pub struct HostTransformerLM {
    config: ModelConfig,
    params: ParamSet,
}

impl HostTransformerLM {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d) = (config.vocab_size, config.host_dim);
        let mut params = ParamSet::new();
        params.insert("embed", Tensor::randn(&[v, d], INIT_STD, &mut rng));
        params.insert("pos", Tensor::randn(&[config.max_len, d], INIT_STD, &mut rng));
        init_stack(&mut params, "", Self::shape_of(&config), &mut rng);
        params.insert("lm_head", Tensor::randn(&[v, d], INIT_STD, &mut rng));
        Ok(HostTransformerLM { config, params })
    }

    pub(crate) fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let reference = HostTransformerLM::new(config.clone(), 0)?;
        super::checkpoint::expect_same_layout(&reference.params, &params)?;
        Ok(HostTransformerLM { config, params })
    }

    fn shape_of(config: &ModelConfig) -> StackShape {
        StackShape {
            layers: config.host_layers,
            dim: config.host_dim,
            heads: config.host_heads,
            mlp_dim: config.host_mlp_dim,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
}

impl LanguageModel for HostTransformerLM {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        graph_logits(self, tokens)
    }
}

impl TrainableLm for HostTransformerLM {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward_graph(&self, g: &mut Graph, b: &Bound, tokens: &[usize]) -> Result<Var> {
        check_tokens(tokens, self.config.vocab_size, self.config.max_len)?;
        let x = embed(g, b, "embed", "pos", tokens)?;
        let h = stack_forward(g, b, "", Self::shape_of(&self.config), x)?;
        g.matmul_bt(h, b.var("lm_head")?)
    }

    fn mlp_layers(&self) -> usize {
        self.config.host_layers
    }

    fn mlp_prefix(&self) -> &'static str {
        ""
    }
}
