//! The Backpack language model.
//!
//! Every word owns `k` sense vectors. A causal Transformer (the
//! contextualizer) produces non-negative weights `α[t][j][ℓ]` over the senses
//! of the prefix, and the prediction at position `t` is
//! `softmax(E · Σ_{j≤t} Σ_ℓ α[t][j][ℓ] c(x_j)_ℓ)`.
//!
//! The weights come from one joint softmax over all `(j ≤ t, ℓ)` pairs, so
//! for each prediction position they are non-negative, causally masked and
//! sum to one.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{embed, init_stack, stack_forward, StackShape, INIT_STD};
use super::params::{Bound, ParamSet};
use super::{check_tokens, LanguageModel, ModelConfig, TrainableLm};
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_bt, Graph, Tensor, Var};

/// Sense table parameter, `(|V|·k)×d`, row `w·k + ℓ`.
pub const SENSES: &str = "senses";
/// Softmax matrix `E`, `|V|×d`.
pub const OUTPUT_EMBEDDING: &str = "output_embedding";
const CTX: &str = "ctx.";
const ALPHA_QUERY: &str = "alpha.query.weight";
const ALPHA_KEY: &str = "alpha.key.weight";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Senses,
    OutputEmbedding,
    /// Everything that participates in computing `α`.
    Contextualizer,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        match name {
            SENSES => ParamGroup::Senses,
            OUTPUT_EMBEDDING => ParamGroup::OutputEmbedding,
            _ => ParamGroup::Contextualizer,
        }
    }
}

/// Contextualization weights for one prefix of length `T`, stored as a
/// `T×(k·T)` matrix whose column `ℓ·T + j` holds `α[t][j][ℓ]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaTensor {
    len: usize,
    senses: usize,
    weights: Tensor,
}

impl AlphaTensor {
    pub fn from_matrix(len: usize, senses: usize, weights: Tensor) -> Result<Self> {
        if weights.shape() != [len, senses * len] {
            return Err(Error::Dimension(format!(
                "alpha for T={len}, k={senses} must be {len}x{}, got {:?}",
                senses * len,
                weights.shape()
            )));
        }
        Ok(AlphaTensor { len, senses, weights })
    }

    /// Builds `α` from a function of `(t, j, ℓ)`.
    pub fn from_fn(len: usize, senses: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut w = Tensor::zeros(&[len, senses * len]);
        for t in 0..len {
            for l in 0..senses {
                for j in 0..len {
                    w.row_mut(t)[l * len + j] = f(t, j, l);
                }
            }
        }
        AlphaTensor { len, senses, weights: w }
    }

    pub fn zeros(len: usize, senses: usize) -> Self {
        AlphaTensor::from_fn(len, senses, |_, _, _| 0.0)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn senses(&self) -> usize {
        self.senses
    }

    pub fn get(&self, t: usize, j: usize, l: usize) -> f64 {
        self.weights.at(t, l * self.len + j)
    }

    pub fn matrix(&self) -> &Tensor {
        &self.weights
    }

    /// Total weight on sense `ℓ` of word `word` when predicting at `t`,
    /// summed over every prefix position holding that word.
    pub fn sense_mass(&self, tokens: &[usize], t: usize, word: usize, l: usize) -> f64 {
        (0..=t.min(self.len - 1))
            .filter(|&j| tokens[j] == word)
            .map(|j| self.get(t, j, l))
            .sum()
    }

    /// Non-negativity, causal masking and per-position normalization.
    pub fn check_invariants(&self, tol: f64) -> Result<()> {
        for t in 0..self.len {
            let mut total = 0.0;
            for l in 0..self.senses {
                for j in 0..self.len {
                    let a = self.get(t, j, l);
                    if a < 0.0 {
                        return Err(Error::Evaluation(format!("alpha[{t}][{j}][{l}] = {a} < 0")));
                    }
                    if j > t && a != 0.0 {
                        return Err(Error::Evaluation(format!(
                            "alpha[{t}][{j}][{l}] = {a} breaks the causal mask"
                        )));
                    }
                    total += a;
                }
            }
            if (total - 1.0).abs() > tol {
                return Err(Error::Evaluation(format!("alpha row {t} sums to {total}")));
            }
        }
        Ok(())
    }
}

/// A copy of the `|V|×k×d` sense vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct SenseBank {
    senses: usize,
    table: Tensor,
}

impl SenseBank {
    pub fn vocab_size(&self) -> usize {
        self.table.rows() / self.senses
    }

    pub fn senses(&self) -> usize {
        self.senses
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn get(&self, word: usize, l: usize) -> &[f64] {
        self.table.row(word * self.senses + l)
    }

    pub fn get_mut(&mut self, word: usize, l: usize) -> &mut [f64] {
        self.table.row_mut(word * self.senses + l)
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn bit_eq(&self, other: &SenseBank) -> bool {
        self.senses == other.senses && self.table.bit_eq(&other.table)
    }
}

#[derive(Debug, Default)]
struct CallCounter(AtomicUsize);

impl Clone for CallCounter {
    fn clone(&self) -> Self {
        CallCounter::default()
    }
}

#[derive(Clone, Debug)]
pub struct BackpackModel {
    config: ModelConfig,
    params: ParamSet,
    frozen: BTreeSet<ParamGroup>,
    contextualizer_calls: CallCounter,
}

impl BackpackModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, k, d) = (config.vocab_size, config.sense_count, config.model_dim);
        let mut params = ParamSet::new();
        params.insert(SENSES, Tensor::randn(&[v * k, config.sense_dim], INIT_STD, &mut rng));
        params.insert(OUTPUT_EMBEDDING, Tensor::randn(&[v, config.sense_dim], INIT_STD, &mut rng));
        params.insert("ctx.embed", Tensor::randn(&[v, d], INIT_STD, &mut rng));
        params.insert("ctx.pos", Tensor::randn(&[config.max_len, d], INIT_STD, &mut rng));
        init_stack(&mut params, CTX, Self::shape_of(&config), &mut rng);
        params.insert(ALPHA_QUERY, Tensor::randn(&[d, k * d], INIT_STD, &mut rng));
        params.insert(ALPHA_KEY, Tensor::randn(&[d, k * d], INIT_STD, &mut rng));
        Ok(BackpackModel {
            config,
            params,
            frozen: BTreeSet::new(),
            contextualizer_calls: CallCounter::default(),
        })
    }

    pub(crate) fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let reference = BackpackModel::new(config.clone(), 0)?;
        super::checkpoint::expect_same_layout(&reference.params, &params)?;
        Ok(BackpackModel {
            config,
            params,
            frozen: BTreeSet::new(),
            contextualizer_calls: CallCounter::default(),
        })
    }

    fn shape_of(config: &ModelConfig) -> StackShape {
        StackShape {
            layers: config.ctx_layers,
            dim: config.model_dim,
            heads: config.ctx_heads,
            mlp_dim: config.ctx_mlp_dim,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn sense_count(&self) -> usize {
        self.config.sense_count
    }

    pub fn freeze(&mut self, group: ParamGroup) {
        self.frozen.insert(group);
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.frozen.contains(&group)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !self.frozen.contains(&ParamGroup::of(name))
    }

    pub fn sense_bank(&self) -> SenseBank {
        SenseBank {
            senses: self.config.sense_count,
            table: self.params.get(SENSES).expect("sense table").clone(),
        }
    }

    pub fn set_sense_bank(&mut self, bank: SenseBank) -> Result<()> {
        if bank.senses != self.config.sense_count {
            return Err(Error::Dimension("sense count of replacement bank".into()));
        }
        self.params.set(SENSES, bank.table)
    }

    pub fn sense(&self, word: usize, l: usize) -> &[f64] {
        self.params
            .get(SENSES)
            .expect("sense table")
            .row(word * self.config.sense_count + l)
    }

    pub fn output_embedding(&self) -> &Tensor {
        self.params.get(OUTPUT_EMBEDDING).expect("output embedding")
    }

    /// How many times the contextualizer has run on this instance.
    pub fn contextualizer_calls(&self) -> usize {
        self.contextualizer_calls.0.load(Ordering::Relaxed)
    }

    /// Records the contextualizer and returns `α` as a `T×(k·T)` node.
    pub fn contextualize_graph(&self, g: &mut Graph, b: &Bound, tokens: &[usize]) -> Result<Var> {
        check_tokens(tokens, self.config.vocab_size, self.config.max_len)?;
        self.contextualizer_calls.0.fetch_add(1, Ordering::Relaxed);
        let (k, d) = (self.config.sense_count, self.config.model_dim);
        let n = tokens.len();
        let x = embed(g, b, "ctx.embed", "ctx.pos", tokens)?;
        let h = stack_forward(g, b, CTX, Self::shape_of(&self.config), x)?;
        let q = g.matmul(h, b.var(ALPHA_QUERY)?)?;
        let kk = g.matmul(h, b.var(ALPHA_KEY)?)?;
        let scale = 1.0 / (d as f64).sqrt();
        let mut blocks = Vec::with_capacity(k);
        for l in 0..k {
            let ql = g.slice_cols(q, l * d, d)?;
            let kl = g.slice_cols(kk, l * d, d)?;
            let s = g.matmul_bt(ql, kl)?;
            blocks.push(g.scale(s, scale));
        }
        let scores = if k == 1 { blocks[0] } else { g.concat_cols(&blocks)? };
        let keep: Vec<bool> = (0..n)
            .flat_map(|t| (0..k * n).map(move |c| c % n <= t))
            .collect();
        g.masked_softmax(scores, &keep)
    }

    /// Row indices into the sense table for the `(ℓ, j)` layout of `α`.
    pub fn sense_rows(&self, tokens: &[usize]) -> Vec<Option<usize>> {
        let k = self.config.sense_count;
        (0..k)
            .flat_map(|l| tokens.iter().map(move |&w| Some(w * k + l)))
            .collect()
    }

    /// `logits = (α · S) · Eᵀ` where `S` stacks the prefix's sense vectors.
    pub fn sense_sum_graph(
        &self,
        g: &mut Graph,
        senses: Var,
        output_embedding: Var,
        tokens: &[usize],
        alpha: Var,
    ) -> Result<Var> {
        let stacked = g.gather_rows(senses, &self.sense_rows(tokens))?;
        let h = g.matmul(alpha, stacked)?;
        g.matmul_bt(h, output_embedding)
    }

    pub fn forward_parts(&self, g: &mut Graph, b: &Bound, tokens: &[usize]) -> Result<(Var, Var)> {
        let alpha = self.contextualize_graph(g, b, tokens)?;
        let logits =
            self.sense_sum_graph(g, b.var(SENSES)?, b.var(OUTPUT_EMBEDDING)?, tokens, alpha)?;
        Ok((alpha, logits))
    }

    /// Full forward pass: logits per position and the `α` that produced them.
    pub fn backpack_forward(&self, tokens: &[usize]) -> Result<(Tensor, AlphaTensor)> {
        let mut g = Graph::new();
        let b = Bound::constants(&mut g, &self.params);
        let (alpha, logits) = self.forward_parts(&mut g, &b, tokens)?;
        let a = AlphaTensor::from_matrix(tokens.len(), self.config.sense_count, g.value(alpha).clone())?;
        Ok((g.value(logits).clone(), a))
    }

    pub fn alpha(&self, tokens: &[usize]) -> Result<AlphaTensor> {
        let mut g = Graph::new();
        let b = Bound::constants(&mut g, &self.params);
        let alpha = self.contextualize_graph(&mut g, &b, tokens)?;
        AlphaTensor::from_matrix(tokens.len(), self.config.sense_count, g.value(alpha).clone())
    }

    /// Sense sum and output projection only, reusing a precomputed `α`.
    pub fn forward_with_alpha(&self, tokens: &[usize], alpha: &AlphaTensor) -> Result<Tensor> {
        check_tokens(tokens, self.config.vocab_size, self.config.max_len)?;
        if alpha.len() != tokens.len() || alpha.senses() != self.config.sense_count {
            return Err(Error::Dimension(format!(
                "alpha is for T={}, k={} but input has T={}, k={}",
                alpha.len(),
                alpha.senses(),
                tokens.len(),
                self.config.sense_count
            )));
        }
        let stacked = stack_senses(self.params.get(SENSES)?, &self.sense_rows(tokens))?;
        sense_sum_numeric(alpha.matrix(), &stacked, self.output_embedding())
    }
}

/// Numeric counterpart of the graph gather used by the sense sum.
pub(crate) fn stack_senses(table: &Tensor, rows: &[Option<usize>]) -> Result<Tensor> {
    let d = table.cols();
    let mut out = Tensor::zeros(&[rows.len(), d]);
    for (i, r) in rows.iter().enumerate() {
        if let Some(r) = *r {
            if r >= table.rows() {
                return Err(Error::Index(format!("sense row {r}")));
            }
            out.row_mut(i).copy_from_slice(table.row(r));
        }
    }
    Ok(out)
}

impl LanguageModel for BackpackModel {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        Ok(self.backpack_forward(tokens)?.0)
    }
}

impl TrainableLm for BackpackModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward_graph(&self, g: &mut Graph, b: &Bound, tokens: &[usize]) -> Result<Var> {
        Ok(self.forward_parts(g, b, tokens)?.1)
    }

    fn mlp_layers(&self) -> usize {
        self.config.ctx_layers
    }

    fn mlp_prefix(&self) -> &'static str {
        CTX
    }
}

/// Shares the numeric sense-sum with the sense editor so cached and full
/// forwards agree bit for bit.
pub(crate) fn sense_sum_numeric(alpha: &Tensor, stacked: &Tensor, output_embedding: &Tensor) -> Result<Tensor> {
    let h = matmul(alpha, stacked)?;
    matmul_bt(&h, output_embedding)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            sense_count: 3,
            model_dim: 8,
            sense_dim: 10,
            ctx_layers: 2,
            ctx_heads: 2,
            ctx_mlp_dim: 16,
            max_len: 12,
            host_layers: 2,
            host_heads: 2,
            host_dim: 8,
            host_mlp_dim: 16,
        }
    }

    #[test]
    fn forward_shapes_and_alpha_invariants() {
        let m = BackpackModel::new(tiny(), 3).unwrap();
        let tokens = [1, 4, 4, 9, 0];
        let (logits, alpha) = m.backpack_forward(&tokens).unwrap();
        assert_eq!(logits.shape(), &[5, 11]);
        alpha.check_invariants(1e-9).unwrap();
    }

    #[test]
    fn degenerate_weighting_selects_own_first_sense() {
        let mut cfg = tiny();
        cfg.sense_count = 1;
        let m = BackpackModel::new(cfg, 1).unwrap();
        let tokens = [2, 7, 5];
        let alpha = AlphaTensor::from_fn(3, 1, |t, j, _| if j == t { 1.0 } else { 0.0 });
        let logits = m.forward_with_alpha(&tokens, &alpha).unwrap();
        let e = m.output_embedding();
        for (t, &w) in tokens.iter().enumerate() {
            let c = m.sense(w, 0);
            for v in 0..11 {
                let want: f64 = e.row(v).iter().zip(c).map(|(a, b)| a * b).sum();
                assert!((logits.at(t, v) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn cached_alpha_reproduces_full_forward() {
        let m = BackpackModel::new(tiny(), 5).unwrap();
        let tokens = [3, 1, 4, 1, 5, 9, 2, 6];
        let (logits, alpha) = m.backpack_forward(&tokens).unwrap();
        let again = m.forward_with_alpha(&tokens, &alpha).unwrap();
        assert!(logits.bit_eq(&again));
        let zero = m.forward_with_alpha(&tokens, &AlphaTensor::zeros(8, 3)).unwrap();
        assert!(zero.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn determinism_and_errors() {
        let m = BackpackModel::new(tiny(), 5).unwrap();
        let a = m.logits(&[1, 2, 3]).unwrap();
        let b = m.logits(&[1, 2, 3]).unwrap();
        assert!(a.bit_eq(&b));
        assert!(matches!(m.logits(&[1, 11]), Err(Error::Vocab(_))));
        assert!(matches!(m.logits(&[0; 13]), Err(Error::Length { .. })));
        let alpha = AlphaTensor::zeros(2, 3);
        assert!(matches!(
            m.forward_with_alpha(&[1, 2, 3], &alpha),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn logits_are_alpha_weighted_sums_of_projected_senses() {
        let m = BackpackModel::new(tiny(), 8).unwrap();
        let tokens = [2, 5, 2, 7];
        let (logits, alpha) = m.backpack_forward(&tokens).unwrap();
        let e = m.output_embedding();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        for t in 0..tokens.len() {
            for v in 0..11 {
                let mut want = 0.0;
                for (j, &w) in tokens.iter().enumerate().take(t + 1) {
                    for l in 0..3 {
                        want += alpha.get(t, j, l) * dot(e.row(v), m.sense(w, l));
                    }
                }
                assert!((logits.at(t, v) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hand_built_two_token_two_sense_case() {
        let cfg = ModelConfig {
            vocab_size: 3,
            sense_count: 2,
            sense_dim: 2,
            ..tiny()
        };
        let mut m = BackpackModel::new(cfg, 0).unwrap();
        let senses = vec![1.0, 0.0, 0.0, 1.0, 9.0, 9.0, 9.0, 9.0, 2.0, 1.0, -1.0, 3.0];
        m.params_mut().set(SENSES, Tensor::matrix(6, 2, senses).unwrap()).unwrap();
        let e = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        m.params_mut().set(OUTPUT_EMBEDDING, Tensor::matrix(3, 2, e).unwrap()).unwrap();
        let w = [[[0.25, 0.75], [0.0, 0.0]], [[0.1, 0.2], [0.3, 0.4]]];
        let alpha = AlphaTensor::from_fn(2, 2, |t, j, l| w[t][j][l]);
        let logits = m.forward_with_alpha(&[0, 2], &alpha).unwrap();
        let want = [[0.25, 0.75, 1.0], [0.3, 1.7, 2.0]];
        for t in 0..2 {
            for v in 0..3 {
                assert!((logits.at(t, v) - want[t][v]).abs() < 1e-15, "t={t} v={v}");
            }
        }
    }

    #[test]
    fn changing_one_sense_shifts_logits_by_its_weighted_projection() {
        let mut m = BackpackModel::new(tiny(), 9).unwrap();
        let tokens = [4, 1, 4, 6];
        let (before, alpha) = m.backpack_forward(&tokens).unwrap();
        let (w, l) = (4, 2);
        let delta: Vec<f64> = (0..10).map(|i| 0.1 * i as f64 - 0.3).collect();
        let row = w * 3 + l;
        let table = m.params_mut().get_mut(SENSES).unwrap();
        for (x, d) in table.row_mut(row).iter_mut().zip(&delta) {
            *x += d;
        }
        let after = m.forward_with_alpha(&tokens, &alpha).unwrap();
        assert!(m.alpha(&tokens).unwrap().matrix().bit_eq(alpha.matrix()));
        let e = m.output_embedding();
        for t in 0..tokens.len() {
            let mass: f64 = (0..=t).filter(|&j| tokens[j] == w).map(|j| alpha.get(t, j, l)).sum();
            for v in 0..11 {
                let proj: f64 = e.row(v).iter().zip(&delta).map(|(a, b)| a * b).sum();
                assert!((after.at(t, v) - before.at(t, v) - mass * proj).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nll_gradient_matches_differences() {
        use crate::eval::sequence_nll_var;
        use crate::models::grad_check_model;
        use crate::tensor::GradCheckOptions;
        let m = BackpackModel::new(tiny(), 6).unwrap();
        let seq = [1, 0, 7, 7, 3];
        let opts = GradCheckOptions {
            max_coords: Some(300),
            ..GradCheckOptions::default()
        };
        let r = grad_check_model(&m, |g, b| sequence_nll_var(g, &seq, &mut |g, t| m.forward_graph(g, b, t)), 1e-5, &opts)
            .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn contextualizer_calls_are_counted() {
        let m = BackpackModel::new(tiny(), 5).unwrap();
        m.logits(&[1, 2]).unwrap();
        m.alpha(&[1, 2]).unwrap();
        assert_eq!(m.contextualizer_calls(), 2);
        assert_eq!(m.clone().contextualizer_calls(), 0);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn alpha_is_a_causal_distribution(tokens in prop::collection::vec(0usize..11, 1..12), seed in 0u64..50) {
            let cfg = ModelConfig {
                vocab_size: 11, sense_count: 3, model_dim: 8, sense_dim: 6, ctx_layers: 1, ctx_heads: 2,
                ctx_mlp_dim: 8, max_len: 12, host_layers: 1, host_heads: 1, host_dim: 4, host_mlp_dim: 8,
            };
            let m = BackpackModel::new(cfg, seed).unwrap();
            let a = m.alpha(&tokens).unwrap();
            prop_assert!(a.check_invariants(1e-9).is_ok());
            for t in 0..tokens.len() {
                for j in t + 1..tokens.len() {
                    for l in 0..3 {
                        prop_assert_eq!(a.get(t, j, l), 0.0);
                    }
                }
            }
        }
    }
}
