//! Command-line front end. Every command reads an optional JSON config,
//! writes its outputs under `--out`, and finishes with a `manifest.json`
//! listing each output file with its SHA-256 hash.
//!
//! Relative paths inside a config are resolved against the config file's
//! directory.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::datasets::{generate_synthetic_tasks, GenSizes, SeedLedger, TaskBundle};
use crate::editors::{select_epoch_index, EditConfig, Method, SenseDelta};
use crate::ensemble::EnsembleDoc;
use crate::error::{Error, Result};
use crate::eval::{EvalReport, DegradationBall, BALL_EPSILONS};
use crate::harness::manifest::{read_json, write_json};
use crate::harness::{
    ensemble_runs, entries_from_sweep, entry_from_ensemble, load_edited, pretrain, run_edit, run_sweep, score_epochs,
    BaseModel, DataDir, EnsembleSummary, ModelKind, PretrainConfig, ReportTable, RunManifest, SearchSpace, SweepResult,
    SweepSpec,
};
use crate::models::checkpoint::{load_backpack, load_host, save_checkpoint};
use crate::models::{BackpackModel, HostTransformerLM, LanguageModel, ModelConfig};

/// Seed ledger kept next to generated data.
pub const SEEDS_FILE: &str = "seeds.json";

#[derive(Debug, Parser)]
#[command(name = "canonedit", version, about = "Edit toy language models with canonical examples")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic world: vocabulary, corpora and task bundles.
    GenData(CommonArgs),
    /// Pretrain a Backpack or host model on a generated corpus.
    Pretrain(CommonArgs),
    /// Run one editing configuration and keep the ball-selected snapshot.
    Edit(CommonArgs),
    /// Score a model, edited snapshot or ensemble on a bundle.
    Evaluate(CommonArgs),
    /// Hyperparameter sweep on validation, rerun on test under several seeds.
    Sweep(CommonArgs),
    /// Ensemble a host with sense-edited Backpacks, calibrating β.
    Ensemble(CommonArgs),
    /// Build the results table and plots from sweep and ensemble outputs.
    Report(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Degradation ball radius ε.
    #[arg(long)]
    pub ball: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Pretrain(_) => "pretrain",
            Command::Edit(_) => "edit",
            Command::Evaluate(_) => "evaluate",
            Command::Sweep(_) => "sweep",
            Command::Ensemble(_) => "ensemble",
            Command::Report(_) => "report",
        }
    }

    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::GenData(a)
            | Command::Pretrain(a)
            | Command::Edit(a)
            | Command::Evaluate(a)
            | Command::Sweep(a)
            | Command::Ensemble(a)
            | Command::Report(a) => a,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainJob {
    pub data: PathBuf,
    pub model: ModelKind,
    #[serde(default)]
    pub model_config: Option<ModelConfig>,
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditJob {
    pub data: PathBuf,
    pub model: PathBuf,
    pub bundle: String,
    pub edit: EditConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateJob {
    pub data: PathBuf,
    pub bundle: String,
    /// Base checkpoint; required unless `ensemble` is given.
    #[serde(default)]
    pub model: Option<PathBuf>,
    /// Snapshot written by `edit`, applied over `model`.
    #[serde(default)]
    pub edited: Option<PathBuf>,
    /// Ensemble description file.
    #[serde(default)]
    pub ensemble: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepJob {
    pub data: PathBuf,
    pub model: PathBuf,
    pub task: String,
    pub method: Method,
    #[serde(default)]
    pub trial_count: Option<usize>,
    #[serde(default)]
    pub test_seeds: Option<usize>,
    #[serde(default)]
    pub space: Option<SearchSpace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleJob {
    pub data: PathBuf,
    pub bundle: String,
    pub host: PathBuf,
    pub backpack: PathBuf,
    /// Sense-delta directories, or directories holding `seed_<n>` deltas.
    pub sense_deltas: Vec<PathBuf>,
    /// Fixed β; calibrated on the ball corpus when absent.
    #[serde(default)]
    pub beta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportJob {
    /// `sweep.json` files or the sweep output directories holding them.
    #[serde(default)]
    pub sweeps: Vec<PathBuf>,
    /// `ensemble.json` files or their output directories.
    #[serde(default)]
    pub ensembles: Vec<PathBuf>,
}

/// A parsed config and the directory its relative paths are resolved in.
struct Loaded<T> {
    job: T,
    base: PathBuf,
}

impl<T> Loaded<T> {
    fn path(&self, p: &Path) -> PathBuf {
        self.base.join(p)
    }
}

fn load_config<T: DeserializeOwned>(args: &CommonArgs) -> Result<Option<Loaded<T>>> {
    let Some(path) = &args.config else { return Ok(None) };
    let job = read_json(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Some(Loaded { job, base }))
}

fn require_config<T: DeserializeOwned>(args: &CommonArgs, command: &str) -> Result<Loaded<T>> {
    load_config(args)?.ok_or_else(|| Error::Config(format!("{command} needs --config")))
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn check_epsilon(eps: f64) -> Result<f64> {
    if eps.is_finite() && eps > 0.0 {
        Ok(eps)
    } else {
        Err(Error::Config(format!("ball radius must be positive, got {eps}")))
    }
}

/// Runs one command and returns the manifest it wrote.
pub fn run(cli: &Cli) -> Result<RunManifest> {
    let args = cli.command.args();
    create_out(&args.out)?;
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Edit(a) => edit_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Ensemble(a) => ensemble_cmd(a),
        Command::Report(a) => report_cmd(a),
    }
}

fn gen_data(a: &CommonArgs) -> Result<RunManifest> {
    let sizes: GenSizes = load_config(a)?.map(|l| l.job).unwrap_or_default();
    sizes.validate()?;
    let seed = a.seed.unwrap_or(0);
    let ledger_path = a.out.join(SEEDS_FILE);
    let mut ledger = SeedLedger::load_or_default(&ledger_path)?;
    ledger.register(seed, &sizes)?;
    let data = generate_synthetic_tasks(seed, &sizes)?;
    data.write(&a.out)?;
    ledger.save(&ledger_path)?;
    let mut m = RunManifest::new("gen-data", Some(seed), None, serde_json::to_value(&sizes)?);
    m.note("vocab_size", data.vocab.len())?;
    m.note("bundles", data.bundles.iter().map(|b| b.name.clone()).collect::<Vec<_>>())?;
    m.finish(&a.out)
}

fn pretrain_cmd(a: &CommonArgs) -> Result<RunManifest> {
    let l: Loaded<PretrainJob> = require_config(a, "pretrain")?;
    let job = &l.job;
    let data = DataDir::load(&l.path(&job.data))?;
    let (pre, held) = data.pretraining()?;
    let seed = a.seed.unwrap_or(0);
    let model_config = job.model_config.clone().unwrap_or_default().with_vocab(data.vocab.len());
    model_config.validate()?;
    let schedule = job.pretrain.clone().unwrap_or_else(|| PretrainConfig::for_kind(job.model));
    let dir = a.out.join("model");
    let (curve, initial, best, step) = match job.model {
        ModelKind::Backpack => {
            let o = pretrain(BackpackModel::new(model_config.clone(), seed)?, &pre, &held, &schedule, seed)?;
            save_checkpoint(&o.model, &dir)?;
            (o.curve, o.initial_heldout_nll, o.best_heldout_nll, o.best_step)
        }
        ModelKind::Host => {
            let o = pretrain(HostTransformerLM::new(model_config.clone(), seed)?, &pre, &held, &schedule, seed)?;
            save_checkpoint(&o.model, &dir)?;
            (o.curve, o.initial_heldout_nll, o.best_heldout_nll, o.best_step)
        }
    };
    write_json(&a.out.join("curve.json"), &curve)?;
    let resolved = PretrainJob {
        model_config: Some(model_config),
        pretrain: Some(schedule),
        ..job.clone()
    };
    let mut m = RunManifest::new("pretrain", Some(seed), None, serde_json::to_value(&resolved)?);
    m.note("initial_heldout_nll", initial)?;
    m.note("best_heldout_nll", best)?;
    m.note("best_step", step)?;
    m.finish(&a.out)
}

fn eval_report(
    model: &dyn LanguageModel,
    base: &dyn LanguageModel,
    bundle: &TaskBundle,
    ball: &DegradationBall,
    g: &[Vec<usize>],
) -> Result<EvalReport> {
    EvalReport::evaluate(model, &bundle.eval, Some((ball, g)), Some((base, bundle.hard_neg.as_slice())))
}

fn edit_cmd(a: &CommonArgs) -> Result<RunManifest> {
    let l: Loaded<EditJob> = require_config(a, "edit")?;
    let mut job = l.job.clone();
    if let Some(seed) = a.seed {
        job.edit.seed = seed;
    }
    let eps = check_epsilon(a.ball.unwrap_or(1e-4))?;
    let data = DataDir::load(&l.path(&job.data))?;
    let base = BaseModel::load(&l.path(&job.model))?;
    let bundle = data.bundle(&job.bundle, base.config().max_len)?;
    let g = &data.corpora.ball_ref;
    let ball = DegradationBall::around(base.lm(), g, eps)?;
    let run = run_edit(&base, &bundle, &data.corpora, &ball, &job.edit)?;
    let chosen = select_epoch_index(&run.ratios(), eps, None);
    run.save_snapshot(chosen, &a.out.join("snapshot"))?;
    write_json(&a.out.join("trace.json"), &run.summary(chosen))?;
    write_json(&a.out.join("scores.json"), &score_epochs(&run, &base, &bundle)?)?;
    if let Some(sel) = run.selection() {
        let pairs: Vec<(String, usize)> = sel
            .pairs
            .iter()
            .map(|&(w, s)| Ok((data.vocab.word(w)?.to_string(), s)))
            .collect::<Result<_>>()?;
        write_json(&a.out.join("senses.json"), &pairs)?;
    }
    let report = eval_report(&*run.model_at(chosen)?, base.lm(), &bundle, &ball, g)?;
    report.write_json(&a.out.join("eval.json"))?;
    let mut m = RunManifest::new("edit", Some(job.edit.seed), Some(eps), serde_json::to_value(&job)?);
    m.note("chosen_epoch", chosen)?;
    m.note("success_rate", report.success_rate)?;
    m.finish(&a.out)
}

fn evaluate_cmd(a: &CommonArgs) -> Result<RunManifest> {
    let l: Loaded<EvaluateJob> = require_config(a, "evaluate")?;
    let job = &l.job;
    let eps = check_epsilon(a.ball.unwrap_or(1e-4))?;
    let data = DataDir::load(&l.path(&job.data))?;
    let g = &data.corpora.ball_ref;
    let report = match (&job.ensemble, &job.model) {
        (Some(doc_path), None) => {
            if job.edited.is_some() {
                return Err(Error::Config("edited applies to model, not to an ensemble".into()));
            }
            let doc_path = l.path(doc_path);
            let text = fs::read_to_string(&doc_path).map_err(|e| Error::io(&doc_path, e))?;
            let spec = EnsembleDoc::from_json(&text)?.load(doc_path.parent().unwrap_or(Path::new("")))?;
            let bundle = data.bundle(&job.bundle, spec.host.config().max_len)?;
            let ball = DegradationBall::around(&spec.host, g, eps)?;
            eval_report(&spec, &spec.host, &bundle, &ball, g)?
        }
        (None, Some(model)) => {
            let base = BaseModel::load(&l.path(model))?;
            let bundle = data.bundle(&job.bundle, base.config().max_len)?;
            let ball = DegradationBall::around(base.lm(), g, eps)?;
            match &job.edited {
                Some(dir) => {
                    let edited = load_edited(&base, &l.path(dir))?;
                    eval_report(&*edited, base.lm(), &bundle, &ball, g)?
                }
                None => eval_report(base.lm(), base.lm(), &bundle, &ball, g)?,
            }
        }
        _ => return Err(Error::Config("give exactly one of model and ensemble".into())),
    };
    report.write_json(&a.out.join("eval.json"))?;
    report.write_csv(&a.out.join("eval.csv"))?;
    let mut m = RunManifest::new("evaluate", None, Some(eps), serde_json::to_value(job)?);
    m.note("success_rate", report.success_rate)?;
    m.finish(&a.out)
}

/// Directory name of the sense deltas kept for ball `eps`.
pub fn delta_dir_name(eps: f64) -> String {
    format!("eps_{eps:e}")
}

fn sweep_cmd(a: &CommonArgs) -> Result<RunManifest> {
    let l: Loaded<SweepJob> = require_config(a, "sweep")?;
    let job = &l.job;
    let data = DataDir::load(&l.path(&job.data))?;
    let base = BaseModel::load(&l.path(&job.model))?;
    let (val, test) = data.bundle_pair(&job.task, base.config().max_len)?;
    let mut spec = SweepSpec::new(job.method, base.kind(), a.seed.unwrap_or(0));
    if let Some(n) = job.trial_count {
        spec.trial_count = n;
    }
    if let Some(n) = job.test_seeds {
        spec.test_seeds = n;
    }
    if let Some(space) = &job.space {
        spec.space = space.clone();
    }
    let epsilons: Vec<f64> = match a.ball {
        Some(eps) => vec![check_epsilon(eps)?],
        None => BALL_EPSILONS.to_vec(),
    };
    let result = run_sweep(&base, &job.task, &val, &test, &data.corpora, &spec, &epsilons)?;
    write_json(&a.out.join("sweep.json"), &result)?;
    for b in &result.balls {
        for r in &b.test.runs {
            if let Some(d) = &r.delta {
                d.save(&a.out.join("deltas").join(delta_dir_name(b.epsilon)).join(format!("seed_{}", r.seed)))?;
            }
        }
    }
    let mut m = RunManifest::new("sweep", Some(spec.seed), a.ball, serde_json::to_value(job)?);
    m.note("rescaling", &result.rescaling)?;
    for b in &result.balls {
        m.note(&format!("test_success_{:e}", b.epsilon), b.test.mean_success)?;
    }
    m.finish(&a.out)
}

/// Expands each path into `(seed, delta)` pairs: a delta directory counts
/// once, a directory of `seed_<n>` subdirectories contributes each of them.
fn collect_deltas(l: &Loaded<EnsembleJob>) -> Result<Vec<(u64, SenseDelta)>> {
    let mut out = Vec::new();
    for p in &l.job.sense_deltas {
        let dir = l.path(p);
        if dir.join(crate::harness::manifest::MANIFEST_FILE).is_file() {
            out.push((out.len() as u64, SenseDelta::load(&dir)?));
            continue;
        }
        let mut seeded = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(seed) = name.strip_prefix("seed_").and_then(|s| s.parse::<u64>().ok()) {
                seeded.push((seed, entry.path()));
            }
        }
        if seeded.is_empty() {
            return Err(Error::Config(format!("{} holds no sense delta", dir.display())));
        }
        seeded.sort();
        for (seed, path) in seeded {
            out.push((seed, SenseDelta::load(&path)?));
        }
    }
    Ok(out)
}

fn ensemble_cmd(a: &CommonArgs) -> Result<RunManifest> {
    let l: Loaded<EnsembleJob> = require_config(a, "ensemble")?;
    let job = &l.job;
    let eps = check_epsilon(a.ball.unwrap_or(1e-5))?;
    let data = DataDir::load(&l.path(&job.data))?;
    let host = load_host(&l.path(&job.host))?;
    let bp = load_backpack(&l.path(&job.backpack))?;
    let bundle = data.bundle(&job.bundle, host.config().max_len)?;
    let task = job.bundle.rsplit_once('_').map_or(job.bundle.as_str(), |(t, _)| t);
    let deltas = collect_deltas(&l)?;
    let summary = ensemble_runs(&host, &bp, &deltas, task, &bundle, &data.corpora, eps, job.beta)?;
    write_json(&a.out.join("ensemble.json"), &summary)?;
    let mut m = RunManifest::new("ensemble", None, Some(eps), serde_json::to_value(job)?);
    m.note("host_success", summary.host_success)?;
    m.note("mean_success", summary.mean_success)?;
    m.note("betas", summary.runs.iter().map(|r| r.beta).collect::<Vec<_>>())?;
    m.finish(&a.out)
}

fn resolve_file(p: PathBuf, name: &str) -> PathBuf {
    if p.is_dir() {
        p.join(name)
    } else {
        p
    }
}

fn report_cmd(a: &CommonArgs) -> Result<RunManifest> {
    let l: Loaded<ReportJob> = require_config(a, "report")?;
    let mut entries = Vec::new();
    for p in &l.job.sweeps {
        let s: SweepResult = read_json(&resolve_file(l.path(p), "sweep.json"))?;
        entries.extend(entries_from_sweep(&s));
    }
    for p in &l.job.ensembles {
        let e: EnsembleSummary = read_json(&resolve_file(l.path(p), "ensemble.json"))?;
        entries.push(entry_from_ensemble(&e));
    }
    let table = ReportTable::build(&entries)?;
    table.write_all(&a.out)?;
    let mut m = RunManifest::new("report", None, None, serde_json::to_value(&l.job)?);
    m.note("rows", table.rows.len())?;
    m.finish(&a.out)
}
