//! Logit-difference ensembles: a host model steered by the change a sense
//! edit made to a small Backpack, `host + β·(log p_ft − log p_pre)`.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::editors::{log_softmax_rows, SenseDelta};
use crate::error::{Error, Result};
use crate::eval::{corpus_nll, DegradationBall};
use crate::models::{checkpoint, BackpackModel, HostTransformerLM, LanguageModel, ParamGroup, TrainableLm};
use crate::tensor::Tensor;

/// Candidate weights tried by [`calibrate_beta`], largest first.
pub const BETA_GRID: [f64; 10] = [1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1];

#[derive(Clone, Debug)]
pub struct EnsembleSpec<H = HostTransformerLM> {
    pub host: H,
    pub bp_pre: BackpackModel,
    pub bp_ft: BackpackModel,
    pub beta: f64,
    cacheable: bool,
}

/// True when the two Backpacks differ at most in their sense vectors.
pub fn shares_contextualizer(a: &BackpackModel, b: &BackpackModel) -> bool {
    a.config() == b.config()
        && a.params().len() == b.params().len()
        && a.params().iter().zip(b.params().iter()).all(|((na, ta), (nb, tb))| {
            na == nb && (ParamGroup::of(na) == ParamGroup::Senses || ta.bit_eq(tb))
        })
}

impl<H: LanguageModel> EnsembleSpec<H> {
    pub fn new(host: H, bp_pre: BackpackModel, bp_ft: BackpackModel, beta: f64) -> Result<Self> {
        if bp_pre.vocab_size() != bp_ft.vocab_size() || host.vocab_size() != bp_pre.vocab_size() {
            return Err(Error::Vocab(format!(
                "host has {} tokens, backpacks have {} and {}",
                host.vocab_size(),
                bp_pre.vocab_size(),
                bp_ft.vocab_size()
            )));
        }
        if bp_pre.config() != bp_ft.config() {
            return Err(Error::Config("pretrained and edited backpacks have different configs".into()));
        }
        check_beta(beta)?;
        let cacheable = shares_contextualizer(&bp_pre, &bp_ft);
        Ok(EnsembleSpec {
            host,
            bp_pre,
            bp_ft,
            beta,
            cacheable,
        })
    }

    /// Ensemble whose edited Backpack is `bp_pre` with `delta` applied.
    pub fn from_delta(host: H, bp_pre: BackpackModel, delta: &SenseDelta, beta: f64) -> Result<Self> {
        let mut bp_ft = bp_pre.clone();
        bp_ft.set_sense_bank(delta.apply(&bp_pre.sense_bank())?)?;
        EnsembleSpec::new(host, bp_pre, bp_ft, beta)
    }

    pub fn with_beta(&self, beta: f64) -> Result<Self>
    where
        H: Clone,
    {
        check_beta(beta)?;
        Ok(EnsembleSpec { beta, ..self.clone() })
    }

    /// Whether the single-contextualizer path is available.
    pub fn cacheable(&self) -> bool {
        self.cacheable
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("beta must lie in [0, 1], got {beta}")));
    }
    Ok(())
}

fn combine(host: Tensor, ft: &Tensor, pre: &Tensor, beta: f64) -> Result<Tensor> {
    let diff = log_softmax_rows(ft).zip_map(&log_softmax_rows(pre), |a, b| a - b)?;
    host.zip_map(&diff, |h, d| h + beta * d)
}

/// Unnormalized ensemble logits, running each Backpack in full.
pub fn ensemble_logits<H: LanguageModel>(spec: &EnsembleSpec<H>, tokens: &[usize]) -> Result<Tensor> {
    let host = spec.host.logits(tokens)?;
    let ft = spec.bp_ft.logits(tokens)?;
    let pre = spec.bp_pre.logits(tokens)?;
    combine(host, &ft, &pre, spec.beta)
}

/// Same result as [`ensemble_logits`] with one contextualizer pass shared by
/// both Backpacks.
pub fn ensemble_logits_cached<H: LanguageModel>(spec: &EnsembleSpec<H>, tokens: &[usize]) -> Result<Tensor> {
    if !spec.cacheable {
        return Err(Error::CacheInvalid(
            "the edited backpack changes parameters outside the sense vectors".into(),
        ));
    }
    let host = spec.host.logits(tokens)?;
    let (pre, alpha) = spec.bp_pre.backpack_forward(tokens)?;
    let ft = spec.bp_ft.forward_with_alpha(tokens, &alpha)?;
    combine(host, &ft, &pre, spec.beta)
}

impl<H: LanguageModel> LanguageModel for EnsembleSpec<H> {
    fn vocab_size(&self) -> usize {
        self.host.vocab_size()
    }

    fn max_len(&self) -> usize {
        self.host.max_len().min(self.bp_pre.max_len())
    }

    fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        if self.cacheable {
            ensemble_logits_cached(self, tokens)
        } else {
            ensemble_logits(self, tokens)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaCandidate {
    pub beta: f64,
    pub ratio: f64,
    pub member: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaCalibration {
    /// Largest admissible grid value, or 0 when none is.
    pub beta: f64,
    pub admissible: bool,
    pub epsilon: f64,
    pub candidates: Vec<BetaCandidate>,
}

impl BetaCalibration {
    /// Picks the first member in grid order from precomputed ratios.
    pub fn from_ratios(ball: &DegradationBall, ratios: &[(f64, f64)]) -> Self {
        let candidates: Vec<BetaCandidate> = ratios
            .iter()
            .map(|&(beta, ratio)| BetaCandidate {
                beta,
                ratio,
                member: ball.admits(ratio),
            })
            .collect();
        let best = candidates.iter().find(|c| c.member).map(|c| c.beta);
        BetaCalibration {
            beta: best.unwrap_or(0.0),
            admissible: best.is_some(),
            epsilon: ball.epsilon,
            candidates,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Largest β on [`BETA_GRID`] keeping the ensemble inside `ball`, measured
/// on `corpus`. `ball` must be centred on the host's loss on `corpus`.
pub fn calibrate_beta<H: LanguageModel + Clone>(
    spec: &EnsembleSpec<H>,
    ball: &DegradationBall,
    corpus: &[Vec<usize>],
) -> Result<BetaCalibration> {
    if corpus.is_empty() {
        return Err(Error::Corpus("calibration corpus is empty".into()));
    }
    let ratios = BETA_GRID
        .par_iter()
        .map(|&beta| {
            let candidate = spec.with_beta(beta)?;
            Ok((beta, ball.ratio_of(corpus_nll(&candidate, corpus)?.mean())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BetaCalibration::from_ratios(ball, &ratios))
}

/// JSON description of an ensemble: checkpoints plus an optional fixed β.
/// The edited Backpack is either a full checkpoint or a sense delta.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleDoc {
    pub host: PathBuf,
    pub bp_pre: PathBuf,
    #[serde(default)]
    pub bp_ft: Option<PathBuf>,
    #[serde(default)]
    pub sense_delta: Option<PathBuf>,
    #[serde(default)]
    pub beta: Option<f64>,
}

impl EnsembleDoc {
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: EnsembleDoc = serde_json::from_str(text)?;
        if doc.bp_ft.is_some() == doc.sense_delta.is_some() {
            return Err(Error::Config("give exactly one of bp_ft and sense_delta".into()));
        }
        Ok(doc)
    }

    /// Loads every checkpoint, resolving relative paths against `base`.
    /// Without a fixed β the spec carries β = 1 until calibrated.
    pub fn load(&self, base: &Path) -> Result<EnsembleSpec> {
        let host = checkpoint::load_host(&base.join(&self.host))?;
        let bp_pre = checkpoint::load_backpack(&base.join(&self.bp_pre))?;
        let beta = self.beta.unwrap_or(1.0);
        match (&self.bp_ft, &self.sense_delta) {
            (Some(ft), None) => EnsembleSpec::new(host, bp_pre, checkpoint::load_backpack(&base.join(ft))?, beta),
            (None, Some(d)) => {
                let delta = SenseDelta::load(&base.join(d))?;
                EnsembleSpec::from_delta(host, bp_pre, &delta, beta)
            }
            _ => Err(Error::Config("give exactly one of bp_ft and sense_delta".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelConfig, SENSES};
    use crate::tensor::log_softmax_row;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            sense_count: 2,
            model_dim: 4,
            sense_dim: 5,
            ctx_layers: 1,
            ctx_heads: 1,
            ctx_mlp_dim: 8,
            max_len: 8,
            host_layers: 1,
            host_heads: 2,
            host_dim: 4,
            host_mlp_dim: 8,
        }
    }

    fn perturbed(bp: &BackpackModel, seed: u64, scale: f64) -> BackpackModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ft = bp.clone();
        for x in ft.params_mut().get_mut(SENSES).unwrap().data_mut() {
            *x += scale * rng.random_range(-1.0..1.0);
        }
        ft
    }

    fn spec(vocab: usize, beta: f64) -> EnsembleSpec {
        let c = cfg(vocab);
        let host = HostTransformerLM::new(c.clone(), 1).unwrap();
        let pre = BackpackModel::new(c, 2).unwrap();
        let ft = perturbed(&pre, 3, 0.5);
        EnsembleSpec::new(host, pre, ft, beta).unwrap()
    }

    #[test]
    fn matches_direct_arithmetic_on_three_tokens() {
        let s = spec(3, 0.7);
        let toks = [0, 2, 1, 1];
        let got = ensemble_logits(&s, &toks).unwrap();
        let (h, f, p) = (
            s.host.logits(&toks).unwrap(),
            s.bp_ft.logits(&toks).unwrap(),
            s.bp_pre.logits(&toks).unwrap(),
        );
        for t in 0..toks.len() {
            let lf = log_softmax_row(f.row(t));
            let lp = log_softmax_row(p.row(t));
            for v in 0..3 {
                let want = h.at(t, v) + 0.7 * (lf[v] - lp[v]);
                assert!((got.at(t, v) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_beta_and_unedited_reproduce_host() {
        let toks = [1, 4, 0, 3];
        let s = spec(6, 0.0);
        assert!(ensemble_logits(&s, &toks).unwrap().bit_eq(&s.host.logits(&toks).unwrap()));
        let same = EnsembleSpec::new(s.host.clone(), s.bp_pre.clone(), s.bp_pre.clone(), 0.8).unwrap();
        assert!(ensemble_logits_cached(&same, &toks).unwrap().bit_eq(&s.host.logits(&toks).unwrap()));
    }

    #[test]
    fn cached_path_agrees_and_runs_contextualizer_once() {
        let s = spec(6, 0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let n = rng.random_range(1..=8);
            let toks: Vec<usize> = (0..n).map(|_| rng.random_range(0..6)).collect();
            let before = s.bp_pre.contextualizer_calls() + s.bp_ft.contextualizer_calls();
            let cached = ensemble_logits_cached(&s, &toks).unwrap();
            let after = s.bp_pre.contextualizer_calls() + s.bp_ft.contextualizer_calls();
            assert_eq!(after - before, 1);
            let plain = ensemble_logits(&s, &toks).unwrap();
            assert!(cached.max_abs_diff(&plain).unwrap() < 1e-10);
        }
    }

    #[test]
    fn changed_contextualizer_invalidates_cache() {
        let s = spec(6, 0.5);
        let mut ft = s.bp_ft.clone();
        let name = ft.params().names().find(|n| n.starts_with("ctx.")).unwrap().to_string();
        ft.params_mut().get_mut(&name).unwrap().data_mut()[0] += 1e-3;
        let bad = EnsembleSpec::new(s.host.clone(), s.bp_pre.clone(), ft, 0.5).unwrap();
        assert!(!bad.cacheable());
        assert!(matches!(ensemble_logits_cached(&bad, &[1, 2]), Err(Error::CacheInvalid(_))));
        assert!(ensemble_logits(&bad, &[1, 2]).is_ok());
    }

    #[test]
    fn vocab_mismatch_is_rejected() {
        let host = HostTransformerLM::new(cfg(7), 1).unwrap();
        let pre = BackpackModel::new(cfg(6), 2).unwrap();
        assert!(matches!(EnsembleSpec::new(host, pre.clone(), pre, 1.0), Err(Error::Vocab(_))));
    }

    #[test]
    fn calibration_picks_first_member() {
        let ball = DegradationBall::new(1e-3, 2.0, "g").unwrap();
        let ratios: Vec<(f64, f64)> = BETA_GRID.iter().map(|&b| (b, 1.0 + 0.004 * b)).collect();
        let c = BetaCalibration::from_ratios(&ball, &ratios);
        assert_eq!(c.beta, 0.2);
        assert!(c.admissible);
        let none: Vec<(f64, f64)> = BETA_GRID.iter().map(|&b| (b, 1.1)).collect();
        let c = BetaCalibration::from_ratios(&ball, &none);
        assert_eq!((c.beta, c.admissible), (0.0, false));
    }

    #[test]
    fn unedited_ensemble_calibrates_to_one() {
        let s = spec(6, 1.0);
        let same = EnsembleSpec::new(s.host.clone(), s.bp_pre.clone(), s.bp_pre.clone(), 1.0).unwrap();
        let g = vec![vec![1, 2, 3], vec![0, 5, 4, 4]];
        let ball = DegradationBall::around(&s.host, &g, 1e-5).unwrap();
        let c = calibrate_beta(&same, &ball, &g).unwrap();
        assert_eq!(c.beta, 1.0);
        assert!(c.candidates.iter().all(|x| x.ratio == 1.0));
        assert!(matches!(calibrate_beta(&same, &ball, &[]), Err(Error::Corpus(_))));
    }

    #[test]
    fn doc_requires_one_edited_source() {
        assert!(EnsembleDoc::from_json(r#"{"host":"h","bp_pre":"p","bp_ft":"f"}"#).is_ok());
        assert!(EnsembleDoc::from_json(r#"{"host":"h","bp_pre":"p"}"#).is_err());
        assert!(EnsembleDoc::from_json(r#"{"host":"h","bp_pre":"p","bp_ft":"f","sense_delta":"d"}"#).is_err());
    }
}
