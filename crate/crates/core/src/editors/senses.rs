//! Sense finetuning for the Backpack: pick the senses a canonical example
//! leans on more than ordinary text does, then train an additive delta on
//! just those senses. The contextualizer and output embedding never change,
//! so `α` is computed once per input and reused.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use super::config::{EditConfig, Method};
use super::full::expect_method;
use super::objective::RegSample;
use super::trace::EpochTrace;
use super::trainer::{run_epochs, EditProblem};
use crate::datasets::CanonicalExample;
use crate::error::{Error, Result};
use crate::eval::{continuation_logprob, scoring_input, DegradationBall};
use crate::models::checkpoint::{read_container, write_container};
use crate::models::{sense_sum_numeric, stack_senses, AlphaTensor, BackpackModel, LanguageModel, SenseBank};
use crate::tensor::{softmax_row, Graph, Tensor, Var};

pub const SENSE_DELTA_KIND: &str = "sense_delta";

/// Chosen `(word, sense)` pairs and the score of every sense per example,
/// indexed `word·k + ℓ`.
#[derive(Clone, Debug, PartialEq)]
pub struct SenseSelection {
    pub pairs: BTreeSet<(usize, usize)>,
    pub scores: Vec<Vec<f64>>,
}

/// Adds the `α` mass each sense receives at positions `targets` of `tokens`.
fn add_sense_mass(scores: &mut [f64], alpha: &AlphaTensor, tokens: &[usize], targets: std::ops::Range<usize>, w: f64) {
    let k = alpha.senses();
    for t in targets {
        for (j, &word) in tokens.iter().enumerate().take(t + 1) {
            for l in 0..k {
                scores[word * k + l] += w * alpha.get(t, j, l);
            }
        }
    }
}

/// Mean over sequences of the total `α` mass per sense across all positions.
pub fn regularization_mass(model: &BackpackModel, seqs: &[Vec<usize>]) -> Result<Vec<f64>> {
    if seqs.is_empty() {
        return Err(Error::Corpus("regularization sample is empty".into()));
    }
    let k = model.sense_count();
    let mut mass = vec![0.0; model.vocab_size() * k];
    let alphas: Vec<AlphaTensor> = seqs.par_iter().map(|s| model.alpha(s)).collect::<Result<_>>()?;
    for (s, a) in seqs.iter().zip(&alphas) {
        add_sense_mass(&mut mass, a, s, 0..s.len(), 1.0 / seqs.len() as f64);
    }
    Ok(mass)
}

/// Score of every sense for one example: mass at the positions predicting
/// each continuation, minus `λ_sel` times the regularization mass.
pub fn sense_importance(model: &BackpackModel, ex: &CanonicalExample, reg_mass: &[f64], lambda_sel: f64) -> Result<Vec<f64>> {
    if ex.prefix.is_empty() {
        return Err(Error::Schema("example prefix contains no tokens".into()));
    }
    let mut scores: Vec<f64> = reg_mass.iter().map(|m| -lambda_sel * m).collect();
    let mut target = vec![0.0; scores.len()];
    for y in [ex.y_a.as_deref(), ex.y_b.as_deref()].into_iter().flatten() {
        let input = scoring_input(&ex.prefix, y);
        let alpha = model.alpha(&input)?;
        let p = ex.prefix.len();
        add_sense_mass(&mut target, &alpha, &input, p - 1..p - 1 + y.len(), 1.0);
    }
    for (s, t) in scores.iter_mut().zip(target) {
        *s += t;
    }
    Ok(scores)
}

/// Indices of the `k` largest scores; ties go to the lower index.
fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn select_senses(
    model: &BackpackModel,
    examples: &[CanonicalExample],
    reg_seqs: &[Vec<usize>],
    k_sel: usize,
    lambda_sel: f64,
) -> Result<SenseSelection> {
    if k_sel == 0 {
        return Err(Error::Config("k_sel must be at least 1".into()));
    }
    let reg_mass = regularization_mass(model, reg_seqs)?;
    let k = model.sense_count();
    let mut pairs = BTreeSet::new();
    let mut scores = Vec::with_capacity(examples.len());
    for ex in examples {
        let s = sense_importance(model, ex, &reg_mass, lambda_sel)?;
        pairs.extend(top_k(&s, k_sel).into_iter().map(|i| (i / k, i % k)));
        scores.push(s);
    }
    Ok(SenseSelection { pairs, scores })
}

/// Independent additive updates to a set of sense vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct SenseDelta {
    pub dim: usize,
    pub entries: BTreeMap<(usize, usize), Vec<f64>>,
}

impl SenseDelta {
    pub fn zeros(pairs: impl IntoIterator<Item = (usize, usize)>, dim: usize) -> Self {
        SenseDelta {
            dim,
            entries: pairs.into_iter().map(|p| (p, vec![0.0; dim])).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.entries.values().all(|v| v.iter().all(|&x| x == 0.0))
    }

    fn check(&self, bank: &SenseBank) -> Result<()> {
        if bank.dim() != self.dim {
            return Err(Error::Dimension(format!("delta dim {} vs sense dim {}", self.dim, bank.dim())));
        }
        for &(w, l) in self.entries.keys() {
            if w >= bank.vocab_size() || l >= bank.senses() {
                return Err(Error::Index(format!("sense ({w}, {l}) out of range")));
            }
        }
        Ok(())
    }

    /// A copy of `bank` with the delta added to its selected senses.
    pub fn apply(&self, bank: &SenseBank) -> Result<SenseBank> {
        self.check(bank)?;
        let mut out = bank.clone();
        for (&(w, l), d) in &self.entries {
            for (x, dx) in out.get_mut(w, l).iter_mut().zip(d) {
                *x += dx;
            }
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let tensors: Vec<(String, Tensor)> = self
            .entries
            .iter()
            .map(|(&(w, l), d)| (format!("sense_delta/{w}/{l}"), Tensor::vector(d.clone()).expect("vector")))
            .collect();
        let meta = serde_json::json!({ "dim": self.dim });
        write_container(dir, SENSE_DELTA_KIND, meta, tensors.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let c = read_container(dir)?;
        if c.kind != SENSE_DELTA_KIND {
            return Err(Error::Format(format!("expected a sense delta, found {:?}", c.kind)));
        }
        let dim = c
            .meta
            .get("dim")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format("sense delta has no dim".into()))? as usize;
        let mut entries = BTreeMap::new();
        for (name, t) in c.tensors {
            let parsed = name
                .strip_prefix("sense_delta/")
                .and_then(|s| s.split_once('/'))
                .and_then(|(w, l)| Some((w.parse().ok()?, l.parse().ok()?)));
            let key = parsed.ok_or_else(|| Error::Format(format!("unexpected tensor name {name:?}")))?;
            if t.len() != dim {
                return Err(Error::Format(format!("{name} has {} values, expected {dim}", t.len())));
            }
            entries.insert(key, t.into_data());
        }
        Ok(SenseDelta { dim, entries })
    }
}

/// A Backpack with a sense delta laid over its untouched base bank.
/// Dropping the overlay gives back the original bank exactly.
#[derive(Clone, Debug)]
pub struct SenseEditedModel {
    base: BackpackModel,
    delta: SenseDelta,
    edited: Tensor,
}

impl SenseEditedModel {
    pub fn new(base: &BackpackModel, delta: SenseDelta) -> Result<Self> {
        let edited = delta.apply(&base.sense_bank())?.table().clone();
        Ok(SenseEditedModel {
            base: base.clone(),
            delta,
            edited,
        })
    }

    pub fn base(&self) -> &BackpackModel {
        &self.base
    }

    pub fn delta(&self) -> &SenseDelta {
        &self.delta
    }

    /// The original bank, which the overlay never writes to.
    pub fn remove(&self) -> SenseBank {
        self.base.sense_bank()
    }

    /// A plain Backpack carrying the edited bank.
    pub fn materialize(&self) -> Result<BackpackModel> {
        let mut m = self.base.clone();
        let bank = self.delta.apply(&self.base.sense_bank())?;
        m.set_sense_bank(bank)?;
        Ok(m)
    }

    pub fn edited_sense(&self, word: usize, l: usize) -> &[f64] {
        self.edited.row(word * self.base.sense_count() + l)
    }

    pub fn logits_with_alpha(&self, tokens: &[usize], alpha: &AlphaTensor) -> Result<Tensor> {
        let stacked = stack_senses(&self.edited, &self.base.sense_rows(tokens))?;
        sense_sum_numeric(alpha.matrix(), &stacked, self.base.output_embedding())
    }
}

impl LanguageModel for SenseEditedModel {
    fn vocab_size(&self) -> usize {
        self.base.vocab_size()
    }

    fn max_len(&self) -> usize {
        self.base.max_len()
    }

    fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        let alpha = self.base.alpha(tokens)?;
        self.logits_with_alpha(tokens, &alpha)
    }
}

/// Gradient of `−log p(y_a | prefix)` with respect to every sense in the
/// input, in closed form: at each target position `t` with target `y`,
/// `−Σ_{j≤t, x_j=w} α[t][j][ℓ] (E_y − Σ_v p(v) E_v)`.
pub fn analytic_nll_sense_gradient(model: &BackpackModel, prefix: &[usize], y: &[usize]) -> Result<BTreeMap<(usize, usize), Vec<f64>>> {
    if prefix.is_empty() || y.is_empty() {
        return Err(Error::Schema("prefix and continuation must be non-empty".into()));
    }
    let input = scoring_input(prefix, y);
    let (logits, alpha) = model.backpack_forward(&input)?;
    let e = model.output_embedding();
    let (k, d) = (model.sense_count(), e.cols());
    let mut grad: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for (i, &target) in y.iter().enumerate() {
        let t = prefix.len() - 1 + i;
        let p = softmax_row(logits.row(t));
        let mut err = e.row(target).to_vec();
        for (v, pv) in p.iter().enumerate() {
            for (x, ev) in err.iter_mut().zip(e.row(v)) {
                *x -= pv * ev;
            }
        }
        for (j, &w) in input.iter().enumerate().take(t + 1) {
            for l in 0..k {
                let a = alpha.get(t, j, l);
                let slot = grad.entry((w, l)).or_insert_with(|| vec![0.0; d]);
                for (g, x) in slot.iter_mut().zip(&err) {
                    *g -= a * x;
                }
            }
        }
    }
    Ok(grad)
}

pub(crate) struct SenseProblem<'a> {
    model: &'a BackpackModel,
    table: Arc<Tensor>,
    output: Arc<Tensor>,
    pairs: Vec<(usize, usize)>,
    /// Delta row for every sense-table row, if selected.
    slot: Vec<Option<usize>>,
    delta: Tensor,
    alphas: HashMap<Vec<usize>, Arc<Tensor>>,
}

pub(crate) struct SenseBinding {
    delta: Var,
    table: Var,
    output: Var,
}

impl<'a> SenseProblem<'a> {
    pub(crate) fn new(model: &'a BackpackModel, pairs: &BTreeSet<(usize, usize)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Config("sense selection is empty".into()));
        }
        let (v, k) = (model.vocab_size(), model.sense_count());
        let mut slot = vec![None; v * k];
        for (i, &(w, l)) in pairs.iter().enumerate() {
            if w >= v || l >= k {
                return Err(Error::Index(format!("sense ({w}, {l}) out of range for |V|={v}, k={k}")));
            }
            slot[w * k + l] = Some(i);
        }
        let bank = model.sense_bank();
        Ok(SenseProblem {
            model,
            table: Arc::new(bank.table().clone()),
            output: Arc::new(model.output_embedding().clone()),
            pairs: pairs.iter().copied().collect(),
            slot,
            delta: Tensor::zeros(&[pairs.len(), bank.dim()]),
            alphas: HashMap::new(),
        })
    }

    /// Runs the contextualizer once for every input the objective will see.
    pub(crate) fn cache_inputs(&mut self, inputs: impl IntoIterator<Item = Vec<usize>>) -> Result<()> {
        let todo: Vec<Vec<usize>> = inputs
            .into_iter()
            .filter(|i| !self.alphas.contains_key(i))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let alphas: Vec<Tensor> = todo
            .par_iter()
            .map(|t| Ok(self.model.alpha(t)?.matrix().clone()))
            .collect::<Result<_>>()?;
        self.alphas.extend(todo.into_iter().zip(alphas.into_iter().map(Arc::new)));
        Ok(())
    }

    fn alpha(&self, tokens: &[usize]) -> Result<Arc<Tensor>> {
        match self.alphas.get(tokens) {
            Some(a) => Ok(Arc::clone(a)),
            None => Ok(Arc::new(self.model.alpha(tokens)?.matrix().clone())),
        }
    }

    fn current(&self) -> SenseDelta {
        SenseDelta {
            dim: self.delta.cols(),
            entries: self
                .pairs
                .iter()
                .enumerate()
                .map(|(i, &p)| (p, self.delta.row(i).to_vec()))
                .collect(),
        }
    }
}

impl EditProblem for SenseProblem<'_> {
    type Binding = SenseBinding;
    type Snapshot = SenseDelta;

    fn trainable(&self) -> Vec<&Tensor> {
        vec![&self.delta]
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.delta]
    }

    fn bind(&self, g: &mut Graph) -> Result<(SenseBinding, Vec<Var>)> {
        let delta = g.param(Arc::new(self.delta.clone()));
        let table = g.constant(Arc::clone(&self.table));
        let output = g.constant(Arc::clone(&self.output));
        Ok((SenseBinding { delta, table, output }, vec![delta]))
    }

    fn forward(&self, g: &mut Graph, b: &SenseBinding, tokens: &[usize]) -> Result<Var> {
        let rows = self.model.sense_rows(tokens);
        let alpha = g.constant(self.alpha(tokens)?);
        let base = g.gather_rows(b.table, &rows)?;
        let idx: Vec<Option<usize>> = rows.iter().map(|r| r.and_then(|r| self.slot[r])).collect();
        let shift = g.gather_rows(b.delta, &idx)?;
        let stacked = g.add(base, shift)?;
        let h = g.matmul(alpha, stacked)?;
        g.matmul_bt(h, b.output)
    }

    fn snapshot(&self) -> SenseDelta {
        self.current()
    }

    fn ball_loss(&self, corpus: &[Vec<usize>]) -> Result<f64> {
        if corpus.is_empty() {
            return Err(Error::Corpus("corpus is empty".into()));
        }
        let edited = SenseEditedModel::new(self.model, self.current())?;
        let nlls: Vec<f64> = corpus
            .par_iter()
            .map(|s| {
                if s.len() < 2 {
                    return Err(Error::Corpus("corpus sequences need at least two tokens".into()));
                }
                let input = &s[..s.len() - 1];
                let alpha = AlphaTensor::from_matrix(input.len(), self.model.sense_count(), (*self.alpha(input)?).clone())?;
                let logits = edited.logits_with_alpha(input, &alpha)?;
                Ok(-continuation_logprob(&logits, 1, &s[1..])?)
            })
            .collect::<Result<_>>()?;
        let tokens: usize = corpus.iter().map(|s| s.len() - 1).sum();
        Ok(nlls.iter().sum::<f64>() / tokens as f64)
    }
}

/// Trains a delta on the selected senses only. Snapshot 0 is the zero delta.
pub fn sense_finetune(
    model: &BackpackModel,
    selection: &SenseSelection,
    train: &[CanonicalExample],
    reg: &RegSample,
    config: &EditConfig,
    ball: &DegradationBall,
    ball_corpus: &[Vec<usize>],
) -> Result<EpochTrace<SenseDelta>> {
    expect_method(config, Method::Senses)?;
    let mut p = SenseProblem::new(model, &selection.pairs)?;
    let mut inputs: Vec<Vec<usize>> = Vec::new();
    for ex in train {
        for y in [ex.y_a.as_deref(), ex.y_b.as_deref()].into_iter().flatten() {
            inputs.push(scoring_input(&ex.prefix, y));
        }
    }
    inputs.extend(reg.seqs.iter().cloned());
    inputs.extend(ball_corpus.iter().filter(|s| s.len() >= 2).map(|s| s[..s.len() - 1].to_vec()));
    p.cache_inputs(inputs)?;
    run_epochs(p, train, reg, config, ball, ball_corpus)
}

/// Selection on the regularization sample followed by sense finetuning.
pub fn sense_edit(
    model: &BackpackModel,
    train: &[CanonicalExample],
    reg: &RegSample,
    config: &EditConfig,
    ball: &DegradationBall,
    ball_corpus: &[Vec<usize>],
) -> Result<(SenseSelection, EpochTrace<SenseDelta>)> {
    expect_method(config, Method::Senses)?;
    let selection = select_senses(
        model,
        train,
        &reg.seqs,
        config.sense_k_sel.expect("validated"),
        config.sense_reg.expect("validated"),
    )?;
    let trace = sense_finetune(model, &selection, train, reg, config, ball, ball_corpus)?;
    Ok((selection, trace))
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::models::ModelConfig;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn removing_a_delta_restores_the_bank_exactly(
            entries in prop::collection::btree_map((0usize..9, 0usize..2), prop::collection::vec(-3.0..3.0f64, 5), 0..6),
            seed in 0u64..100,
        ) {
            let cfg = ModelConfig {
                vocab_size: 9, sense_count: 2, model_dim: 4, sense_dim: 5, ctx_layers: 1, ctx_heads: 1,
                ctx_mlp_dim: 8, max_len: 8, host_layers: 1, host_heads: 1, host_dim: 4, host_mlp_dim: 8,
            };
            let bp = BackpackModel::new(cfg, seed).unwrap();
            let delta = SenseDelta { dim: 5, entries };
            let edited = SenseEditedModel::new(&bp, delta.clone()).unwrap();
            prop_assert!(edited.remove().bit_eq(&bp.sense_bank()));
            let m = edited.materialize().unwrap();
            for w in 0..9 {
                for l in 0..2 {
                    if !delta.entries.contains_key(&(w, l)) {
                        prop_assert_eq!(m.sense(w, l), bp.sense(w, l));
                    }
                }
            }
        }
    }
}
