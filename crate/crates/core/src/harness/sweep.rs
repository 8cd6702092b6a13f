//! Random hyperparameter search on a validation bundle, then seed-averaged
//! test runs of the winning configuration.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::check_pair;
use super::edit::{run_edit, score_epoch, score_epochs, BaseModel, EpochScore, ModelKind};
use super::stats::{mean, std_of_mean};
use crate::datasets::{CorpusSplit, TaskBundle};
use crate::editors::{select_epoch_index, EditConfig, Method, SenseDelta, MAX_EPOCHS};
use crate::error::{Error, Result};
use crate::eval::{success_rate, DegradationBall};
use crate::models::ModelConfig;

/// Sweep distributions: `LogUniform` draws `10^U[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dist {
    Fixed { value: f64 },
    Uniform { lo: f64, hi: f64 },
    LogUniform { lo: f64, hi: f64 },
    IntUniform { lo: i64, hi: i64 },
}

impl Dist {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Dist::Fixed { value } => value,
            Dist::Uniform { lo, hi } => rng.random_range(lo..=hi),
            Dist::LogUniform { lo, hi } => 10f64.powf(rng.random_range(lo..=hi)),
            Dist::IntUniform { lo, hi } => rng.random_range(lo..=hi) as f64,
        }
    }

    pub fn describe(&self) -> String {
        match *self {
            Dist::Fixed { value } => format!("{value}"),
            Dist::Uniform { lo, hi } => format!("U[{lo}, {hi}]"),
            Dist::LogUniform { lo, hi } => format!("10^U[{lo}, {hi}]"),
            Dist::IntUniform { lo, hi } => format!("U{{{lo}, ..., {hi}}}"),
        }
    }
}

/// Per-hyperparameter distributions. LoRA rank and layer percentage are
/// stated at full scale and mapped onto the toy model when sampled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub learning_rate: Dist,
    pub kl_weight: Dist,
    #[serde(default)]
    pub lora_rank: Option<Dist>,
    #[serde(default)]
    pub lora_layer_percent: Option<Dist>,
    #[serde(default)]
    pub sense_k_sel: Option<Dist>,
    #[serde(default)]
    pub sense_reg: Option<Dist>,
}

/// Full-scale rank range the LoRA distribution is written against.
pub const PAPER_MAX_RANK: i64 = 256;

impl SearchSpace {
    pub fn for_method(method: Method) -> Self {
        let kl_weight = Dist::LogUniform { lo: -1.0, hi: 0.0 };
        match method {
            Method::Full => SearchSpace {
                learning_rate: Dist::LogUniform { lo: -8.5, hi: -4.0 },
                kl_weight,
                lora_rank: None,
                lora_layer_percent: None,
                sense_k_sel: None,
                sense_reg: None,
            },
            Method::Lora => SearchSpace {
                learning_rate: Dist::LogUniform { lo: -6.5, hi: -2.0 },
                kl_weight,
                lora_rank: Some(Dist::IntUniform { lo: 1, hi: PAPER_MAX_RANK }),
                lora_layer_percent: Some(Dist::Uniform { lo: 10.0, hi: 90.0 }),
                sense_k_sel: None,
                sense_reg: None,
            },
            Method::Senses => SearchSpace {
                learning_rate: Dist::LogUniform { lo: -4.0, hi: -1.5 },
                kl_weight,
                lora_rank: None,
                lora_layer_percent: None,
                sense_k_sel: Some(Dist::IntUniform { lo: 5, hi: 12 }),
                sense_reg: Some(Dist::Fixed { value: 1000.0 }),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub method: Method,
    pub model: ModelKind,
    pub trial_count: usize,
    pub seed: u64,
    /// Seeds for the test reruns are `seed, seed + 1, ...`.
    pub test_seeds: usize,
    pub space: SearchSpace,
}

impl SweepSpec {
    /// Ten trials on the host, twenty-five on the Backpack, ten test seeds.
    pub fn new(method: Method, model: ModelKind, seed: u64) -> Self {
        SweepSpec {
            method,
            model,
            trial_count: match model {
                ModelKind::Host => 10,
                ModelKind::Backpack => 25,
            },
            seed,
            test_seeds: 10,
            space: SearchSpace::for_method(method),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trial_count == 0 || self.test_seeds == 0 {
            return Err(Error::Config("trial_count and test_seeds must be positive".into()));
        }
        if self.method == Method::Senses && self.model != ModelKind::Backpack {
            return Err(Error::Config("sense finetuning needs a backpack".into()));
        }
        let need = |d: &Option<Dist>, name: &str, wanted: bool| match (d.is_some(), wanted) {
            (true, false) => Err(Error::Config(format!("{name} is only sampled for its own method"))),
            (false, true) => Err(Error::Config(format!("{name} needs a distribution"))),
            _ => Ok(()),
        };
        let s = &self.space;
        need(&s.lora_rank, "lora_rank", self.method == Method::Lora)?;
        need(&s.lora_layer_percent, "lora_layer_percent", self.method == Method::Lora)?;
        need(&s.sense_k_sel, "sense_k_sel", self.method == Method::Senses)?;
        need(&s.sense_reg, "sense_reg", self.method == Method::Senses)
    }

    pub fn test_seed_list(&self) -> Vec<u64> {
        (0..self.test_seeds as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }
}

/// How LoRA's full-scale rank and layer share map onto a toy model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraScale {
    /// Smallest side of the adapted MLP matrices.
    pub max_rank: usize,
    pub layers: usize,
}

impl LoraScale {
    pub fn of(kind: ModelKind, config: &ModelConfig) -> Self {
        match kind {
            ModelKind::Host => LoraScale {
                max_rank: config.host_dim.min(config.host_mlp_dim),
                layers: config.host_layers,
            },
            ModelKind::Backpack => LoraScale {
                max_rank: config.model_dim.min(config.ctx_mlp_dim),
                layers: config.ctx_layers,
            },
        }
    }

    /// Rank `u` out of 256 becomes `ceil(u · max_rank / 256)`.
    pub fn rank(&self, sampled: f64) -> usize {
        ((sampled * self.max_rank as f64 / PAPER_MAX_RANK as f64).ceil() as usize).clamp(1, self.max_rank)
    }

    /// Percent of layers, rounded to a count of at least one.
    pub fn layers(&self, percent: f64) -> usize {
        ((percent / 100.0 * self.layers as f64).round() as usize).clamp(1, self.layers)
    }

    pub fn describe(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            (
                "lora_rank".to_string(),
                format!(
                    "U{{1, ..., {PAPER_MAX_RANK}}} mapped to ceil(u * {} / {PAPER_MAX_RANK}), range 1..={}",
                    self.max_rank, self.max_rank
                ),
            ),
            (
                "lora_layers".to_string(),
                format!(
                    "percent of {} layers, rounded, at least 1, centred on the middle layer",
                    self.layers
                ),
            ),
        ])
    }
}

/// Samples `trial_count` configurations, each with its own seed.
pub fn sample_configs(spec: &SweepSpec, model: &ModelConfig) -> Result<Vec<EditConfig>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scale = LoraScale::of(spec.model, model);
    let s = &spec.space;
    (0..spec.trial_count)
        .map(|_| {
            let lr = s.learning_rate.sample(&mut rng);
            let kl = s.kl_weight.sample(&mut rng);
            let mut c = match spec.method {
                Method::Full => EditConfig::full(lr, kl, 0),
                Method::Lora => {
                    let rank = scale.rank(s.lora_rank.as_ref().expect("validated").sample(&mut rng));
                    let layers = scale.layers(s.lora_layer_percent.as_ref().expect("validated").sample(&mut rng));
                    EditConfig::lora(lr, kl, rank, layers, 0)
                }
                Method::Senses => {
                    let k = s.sense_k_sel.as_ref().expect("validated").sample(&mut rng) as usize;
                    let reg = s.sense_reg.as_ref().expect("validated").sample(&mut rng);
                    EditConfig::senses(lr, kl, k, reg, 0)
                }
            };
            c.epochs = MAX_EPOCHS;
            c.seed = rng.random_range(0..1u64 << 32);
            c.validate()?;
            Ok(c)
        })
        .collect()
}

/// Index of the best trial: highest validation success, then lower ball
/// ratio, then lower config seed.
pub fn select_winner(candidates: &[(f64, f64, u64)]) -> Option<usize> {
    (0..candidates.len()).min_by(|&a, &b| {
        let (sa, ra, ea) = candidates[a];
        let (sb, rb, eb) = candidates[b];
        sb.total_cmp(&sa).then(ra.total_cmp(&rb)).then(ea.cmp(&eb))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial: usize,
    pub config: EditConfig,
    /// Selected `(word, sense)` pairs for sense finetuning.
    #[serde(default)]
    pub senses: Option<Vec<(usize, usize)>>,
    pub epochs: Vec<EpochScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub trial: usize,
    pub config: EditConfig,
    pub chosen_epoch: usize,
    pub ball_ratio: f64,
    pub val_success: f64,
    pub hard_negative_delta: f64,
    #[serde(default)]
    pub test_success: Option<f64>,
    #[serde(default)]
    pub test_std_of_mean: Option<f64>,
    #[serde(default)]
    pub test_seeds: Option<Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestRun {
    pub seed: u64,
    pub chosen_epoch: usize,
    /// Ratio recorded during training.
    pub trace_ratio: f64,
    /// Ratio re-measured on the chosen snapshot.
    pub verified_ratio: f64,
    pub member: bool,
    pub success: f64,
    pub hard_negative_delta: f64,
    #[serde(skip)]
    pub delta: Option<SenseDelta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestSummary {
    pub runs: Vec<TestRun>,
    pub mean_success: f64,
    pub std_of_mean: f64,
    pub mean_hard_negative_delta: f64,
    pub all_members: bool,
}

impl TestSummary {
    pub fn from_runs(runs: Vec<TestRun>) -> Self {
        let succ: Vec<f64> = runs.iter().map(|r| r.success).collect();
        let hn: Vec<f64> = runs.iter().map(|r| r.hard_negative_delta).collect();
        TestSummary {
            mean_success: mean(&succ),
            std_of_mean: std_of_mean(&succ),
            mean_hard_negative_delta: mean(&hn),
            all_members: runs.iter().all(|r| r.member),
            runs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub val_success: f64,
    pub test_success: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallResult {
    pub epsilon: f64,
    pub winner: usize,
    /// Epoch the winner chose on validation; caps the test runs.
    pub val_epoch: usize,
    /// No trial left epoch 0 inside the ball; the test numbers are the
    /// unedited model's.
    pub no_edit: bool,
    pub test: TestSummary,
    pub records: Vec<RunRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub task: String,
    pub spec: SweepSpec,
    pub base_loss: f64,
    #[serde(default)]
    pub baseline: Option<Baseline>,
    #[serde(default)]
    pub rescaling: BTreeMap<String, String>,
    pub trials: Vec<TrialSummary>,
    pub balls: Vec<BallResult>,
}

impl SweepResult {
    pub fn ball(&self, epsilon: f64) -> Option<&BallResult> {
        self.balls.iter().find(|b| b.epsilon == epsilon)
    }
}

/// Runs the sweep on `val`, selects a winner per ball, and reruns each
/// winner on `test` under every test seed with its validation epoch as cap.
pub fn run_sweep(
    base: &BaseModel,
    task: &str,
    val: &TaskBundle,
    test: &TaskBundle,
    corpora: &CorpusSplit,
    spec: &SweepSpec,
    epsilons: &[f64],
) -> Result<SweepResult> {
    check_pair(val, test)?;
    if spec.model != base.kind() {
        return Err(Error::Config(format!(
            "sweep is for a {} model but got a {}",
            spec.model.as_str(),
            base.kind().as_str()
        )));
    }
    if epsilons.is_empty() {
        return Err(Error::Config("no ball radius given".into()));
    }
    let configs = sample_configs(spec, base.config())?;
    let ball = DegradationBall::around(base.lm(), &corpora.ball_ref, epsilons[0])?;

    let trials = configs
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let run = run_edit(base, val, corpora, &ball, c)?;
            Ok(TrialSummary {
                trial: i,
                config: c.clone(),
                senses: run.selection().map(|s| s.pairs.iter().copied().collect()),
                epochs: score_epochs(&run, base, val)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let baseline = Baseline {
        val_success: success_rate(base.lm(), &val.eval)?,
        test_success: success_rate(base.lm(), &test.eval)?,
    };

    struct Pick {
        epsilon: f64,
        winner: usize,
        val_epoch: usize,
        no_edit: bool,
        records: Vec<RunRecord>,
    }
    let picks: Vec<Pick> = epsilons
        .iter()
        .map(|&epsilon| {
            let records: Vec<RunRecord> = trials
                .iter()
                .map(|t| {
                    let ratios: Vec<f64> = t.epochs.iter().map(|e| e.ball_ratio).collect();
                    let e = &t.epochs[select_epoch_index(&ratios, epsilon, None)];
                    RunRecord {
                        trial: t.trial,
                        config: t.config.clone(),
                        chosen_epoch: e.epoch,
                        ball_ratio: e.ball_ratio,
                        val_success: e.success,
                        hard_negative_delta: e.hard_negative_delta,
                        test_success: None,
                        test_std_of_mean: None,
                        test_seeds: None,
                    }
                })
                .collect();
            let keys: Vec<(f64, f64, u64)> = records.iter().map(|r| (r.val_success, r.ball_ratio, r.config.seed)).collect();
            let winner = select_winner(&keys).expect("at least one trial");
            Pick {
                epsilon,
                winner,
                val_epoch: records[winner].chosen_epoch,
                no_edit: records.iter().all(|r| r.chosen_epoch == 0),
                records,
            }
        })
        .collect();

    let seeds = spec.test_seed_list();
    let mut runs_by_ball: Vec<Vec<TestRun>> = vec![Vec::new(); picks.len()];
    let winners: std::collections::BTreeSet<usize> = picks.iter().filter(|p| !p.no_edit).map(|p| p.winner).collect();
    for w in winners {
        let per_seed = seeds
            .par_iter()
            .map(|&seed| {
                let config = EditConfig { seed, ..configs[w].clone() };
                let run = run_edit(base, test, corpora, &ball, &config)?;
                picks
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| !p.no_edit && p.winner == w)
                    .map(|(bi, p)| {
                        let b = ball.with_epsilon(p.epsilon)?;
                        let chosen = select_epoch_index(&run.ratios(), p.epsilon, Some(p.val_epoch));
                        let score = score_epoch(&run, base, test, chosen)?;
                        let (verified, member) = b.membership(&*run.model_at(chosen)?, &corpora.ball_ref)?;
                        Ok((
                            bi,
                            TestRun {
                                seed,
                                chosen_epoch: chosen,
                                trace_ratio: score.ball_ratio,
                                verified_ratio: verified,
                                member,
                                success: score.success,
                                hard_negative_delta: score.hard_negative_delta,
                                delta: run.sense_delta(chosen).cloned(),
                            },
                        ))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        for (bi, r) in per_seed.into_iter().flatten() {
            runs_by_ball[bi].push(r);
        }
    }

    let balls = picks
        .into_iter()
        .zip(runs_by_ball)
        .map(|(p, runs)| {
            let runs = if p.no_edit {
                unedited_runs(&seeds, baseline.test_success)
            } else {
                runs
            };
            let test = TestSummary::from_runs(runs);
            let mut records = p.records;
            let r = &mut records[p.winner];
            r.test_success = Some(test.mean_success);
            r.test_std_of_mean = Some(test.std_of_mean);
            r.test_seeds = Some(seeds.clone());
            BallResult {
                epsilon: p.epsilon,
                winner: p.winner,
                val_epoch: p.val_epoch,
                no_edit: p.no_edit,
                test,
                records,
            }
        })
        .collect();
    Ok(SweepResult {
        task: task.to_string(),
        spec: spec.clone(),
        base_loss: ball.base_loss,
        baseline: Some(baseline),
        rescaling: if spec.method == Method::Lora {
            LoraScale::of(spec.model, base.config()).describe()
        } else {
            BTreeMap::new()
        },
        trials,
        balls,
    })
}

fn unedited_runs(seeds: &[u64], success: f64) -> Vec<TestRun> {
    seeds
        .iter()
        .map(|&seed| TestRun {
            seed,
            chosen_epoch: 0,
            trace_ratio: 1.0,
            verified_ratio: 1.0,
            member: true,
            success,
            hard_negative_delta: 0.0,
            delta: None,
        })
        .collect()
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn samples_stay_in_their_ranges(seed in 0u64..10_000, method in prop::sample::select(vec![Method::Full, Method::Lora, Method::Senses])) {
            let model = if method == Method::Senses { ModelKind::Backpack } else { ModelKind::Host };
            let spec = SweepSpec { trial_count: 4, ..SweepSpec::new(method, model, seed) };
            let cfg = ModelConfig::default();
            for c in sample_configs(&spec, &cfg).unwrap() {
                let lr = c.learning_rate.log10();
                let (lo, hi) = match method {
                    Method::Full => (-8.5, -4.0),
                    Method::Lora => (-6.5, -2.0),
                    Method::Senses => (-4.0, -1.5),
                };
                prop_assert!(lr >= lo - 1e-12 && lr <= hi + 1e-12);
                prop_assert!(c.kl_weight >= 0.1 - 1e-12 && c.kl_weight <= 1.0 + 1e-12);
                prop_assert!(c.validate().is_ok());
            }
        }
    }
}
