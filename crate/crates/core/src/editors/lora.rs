//! Low-rank adapters on the MLP up- and down-projections of a centred,
//! contiguous block of layers. The base weights stay frozen.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{EditConfig, Method};
use super::full::expect_method;
use super::objective::RegSample;
use super::trace::EpochTrace;
use super::trainer::{run_epochs, EditProblem};
use crate::datasets::CanonicalExample;
use crate::error::{Error, Result};
use crate::eval::{corpus_nll, DegradationBall};
use crate::models::checkpoint::{read_container, write_container};
use crate::models::layers::{mlp_down_name, mlp_up_name};
use crate::models::{AdapterVars, Bound, LanguageModel, TrainableLm};
use crate::tensor::{matmul, Graph, Tensor, Var};

const R_INIT_STD: f64 = 0.02;
pub const LORA_KIND: &str = "lora";

/// Factors `q` (`in×rank`) and `r` (`rank×out`) for one weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactor {
    pub weight: String,
    pub q: Tensor,
    pub r: Tensor,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct LoraAdapters {
    pub factors: Vec<LoraFactor>,
}

/// Contiguous range of `count` layers centred in a stack of `total`.
pub fn centred_layers(total: usize, count: usize) -> Result<std::ops::Range<usize>> {
    if count == 0 || count > total {
        return Err(Error::Config(format!("cannot adapt {count} of {total} layers")));
    }
    let start = (total - count) / 2;
    Ok(start..start + count)
}

impl LoraAdapters {
    /// Zero `q` and small random `r`, so the adapted model starts out equal
    /// to the base.
    pub fn init<M: TrainableLm>(model: &M, rank: usize, layers: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prefix = model.mlp_prefix();
        let mut factors = Vec::new();
        for i in centred_layers(model.mlp_layers(), layers)? {
            for name in [mlp_up_name(prefix, i), mlp_down_name(prefix, i)] {
                let w = model.params().get(&name)?;
                let (fan_in, fan_out) = (w.rows(), w.cols());
                if rank == 0 || rank > fan_in.min(fan_out) {
                    return Err(Error::Config(format!(
                        "lora rank {rank} exceeds min dimension of {name} ({fan_in}x{fan_out})"
                    )));
                }
                factors.push(LoraFactor {
                    weight: name,
                    q: Tensor::zeros(&[fan_in, rank]),
                    r: Tensor::randn(&[rank, fan_out], R_INIT_STD, &mut rng),
                });
            }
        }
        Ok(LoraAdapters { factors })
    }

    pub fn attach(&self, g: &mut Graph, b: &mut Bound, trainable: bool) -> Vec<Var> {
        let mut leaves = Vec::with_capacity(2 * self.factors.len());
        for f in &self.factors {
            let q = g.leaf(Arc::new(f.q.clone()), trainable);
            let r = g.leaf(Arc::new(f.r.clone()), trainable);
            b.attach_adapter(f.weight.clone(), AdapterVars { q, r });
            leaves.extend([q, r]);
        }
        leaves
    }

    /// Base model with every `M` replaced by `M + q·r`.
    pub fn merge<M: TrainableLm>(&self, model: &M) -> Result<M> {
        let mut out = model.clone();
        for f in &self.factors {
            let low = matmul(&f.q, &f.r)?;
            out.params_mut().get_mut(&f.weight)?.add_assign(&low)?;
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let names: Vec<(String, &Tensor)> = self
            .factors
            .iter()
            .flat_map(|f| [(format!("lora/{}/q", f.weight), &f.q), (format!("lora/{}/r", f.weight), &f.r)])
            .collect();
        write_container(dir, LORA_KIND, serde_json::Value::Null, names.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let c = read_container(dir)?;
        if c.kind != LORA_KIND {
            return Err(Error::Format(format!("expected a lora container, found {:?}", c.kind)));
        }
        let mut factors = Vec::new();
        let mut it = c.tensors.into_iter();
        while let Some((qn, q)) = it.next() {
            let (rn, r) = it
                .next()
                .ok_or_else(|| Error::Format(format!("{qn} has no matching r factor")))?;
            let weight = qn
                .strip_prefix("lora/")
                .and_then(|s| s.strip_suffix("/q"))
                .ok_or_else(|| Error::Format(format!("unexpected tensor name {qn:?}")))?;
            if rn != format!("lora/{weight}/r") {
                return Err(Error::Format(format!("expected r factor for {weight}, found {rn:?}")));
            }
            factors.push(LoraFactor {
                weight: weight.to_string(),
                q,
                r,
            });
        }
        Ok(LoraAdapters { factors })
    }
}

/// Base model run in adapter form, `x·M + (x·q)·r`.
#[derive(Clone, Copy, Debug)]
pub struct AdaptedModel<'a, M> {
    pub base: &'a M,
    pub adapters: &'a LoraAdapters,
}

impl<M: TrainableLm> LanguageModel for AdaptedModel<'_, M> {
    fn vocab_size(&self) -> usize {
        self.base.vocab_size()
    }

    fn max_len(&self) -> usize {
        self.base.max_len()
    }

    fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Bound::constants(&mut g, self.base.params());
        self.adapters.attach(&mut g, &mut b, false);
        let out = self.base.forward_graph(&mut g, &b, tokens)?;
        Ok(g.value(out).clone())
    }
}

struct LoraProblem<'a, M> {
    base: &'a M,
    adapters: LoraAdapters,
}

impl<M: TrainableLm> EditProblem for LoraProblem<'_, M> {
    type Binding = Bound;
    type Snapshot = LoraAdapters;

    fn trainable(&self) -> Vec<&Tensor> {
        self.adapters.factors.iter().flat_map(|f| [&f.q, &f.r]).collect()
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        self.adapters.factors.iter_mut().flat_map(|f| [&mut f.q, &mut f.r]).collect()
    }

    fn bind(&self, g: &mut Graph) -> Result<(Bound, Vec<Var>)> {
        let mut b = Bound::constants(g, self.base.params());
        let leaves = self.adapters.attach(g, &mut b, true);
        Ok((b, leaves))
    }

    fn forward(&self, g: &mut Graph, b: &Bound, tokens: &[usize]) -> Result<Var> {
        self.base.forward_graph(g, b, tokens)
    }

    fn snapshot(&self) -> LoraAdapters {
        self.adapters.clone()
    }

    fn ball_loss(&self, corpus: &[Vec<usize>]) -> Result<f64> {
        let m = AdaptedModel {
            base: self.base,
            adapters: &self.adapters,
        };
        Ok(corpus_nll(&m, corpus)?.mean())
    }
}

/// Trains only the adapter factors. Snapshot 0 holds the initial adapters,
/// whose product is zero.
pub fn lora_finetune<M: TrainableLm>(
    model: &M,
    train: &[CanonicalExample],
    reg: &RegSample,
    config: &EditConfig,
    ball: &DegradationBall,
    ball_corpus: &[Vec<usize>],
) -> Result<EpochTrace<LoraAdapters>> {
    expect_method(config, Method::Lora)?;
    let rank = config.lora_rank.expect("validated");
    let layers = config.lora_layers.expect("validated");
    let adapters = LoraAdapters::init(model, rank, layers, config.seed)?;
    run_epochs(LoraProblem { base: model, adapters }, train, reg, config, ball, ball_corpus)
}
