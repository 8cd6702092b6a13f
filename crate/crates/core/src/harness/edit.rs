//! One editing run on either toy model, with every epoch scored.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{CorpusSplit, TaskBundle};
use crate::editors::{
    full_finetune, lora_finetune, sense_edit, AdaptedModel, EditConfig, EpochRecord, EpochSummary, LoraAdapters,
    Method, RegSample, SenseDelta, SenseEditedModel, SenseSelection, REG_SAMPLE,
};
use crate::error::{Error, Result};
use crate::eval::{hard_negative_delta, success_rate, DegradationBall};
use crate::models::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::models::{BackpackModel, HostTransformerLM, LanguageModel, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Host,
    Backpack,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Host => "host",
            ModelKind::Backpack => "backpack",
        }
    }
}

/// A pretrained model of either kind.
#[derive(Clone, Debug)]
pub enum BaseModel {
    Host(HostTransformerLM),
    Backpack(BackpackModel),
}

impl BaseModel {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(match load_checkpoint(dir)? {
            Checkpoint::Host(m) => BaseModel::Host(m),
            Checkpoint::Backpack(m) => BaseModel::Backpack(m),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        match self {
            BaseModel::Host(m) => save_checkpoint(m, dir),
            BaseModel::Backpack(m) => save_checkpoint(m, dir),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            BaseModel::Host(_) => ModelKind::Host,
            BaseModel::Backpack(_) => ModelKind::Backpack,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            BaseModel::Host(m) => m.config(),
            BaseModel::Backpack(m) => m.config(),
        }
    }

    pub fn lm(&self) -> &dyn LanguageModel {
        match self {
            BaseModel::Host(m) => m,
            BaseModel::Backpack(m) => m,
        }
    }

    /// Whether `method` can edit this kind of model.
    pub fn supports(&self, method: Method) -> bool {
        method != Method::Senses || self.kind() == ModelKind::Backpack
    }
}

/// Snapshots of one run, in the representation each method trains.
#[derive(Clone, Debug)]
pub enum EditOutcome {
    HostFull(Vec<HostTransformerLM>),
    BackpackFull(Vec<BackpackModel>),
    HostLora(HostTransformerLM, Vec<LoraAdapters>),
    BackpackLora(BackpackModel, Vec<LoraAdapters>),
    Senses(BackpackModel, SenseSelection, Vec<SenseDelta>),
}

#[derive(Clone, Debug)]
pub struct EditRun {
    pub outcome: EditOutcome,
    pub records: Vec<EpochRecord>,
}

/// Runs `config` on `bundle.train`, measuring every epoch against `ball`
/// on the ball-reference corpus. The KL sample is drawn with the config seed.
pub fn run_edit(
    base: &BaseModel,
    bundle: &TaskBundle,
    corpora: &CorpusSplit,
    ball: &DegradationBall,
    config: &EditConfig,
) -> Result<EditRun> {
    config.validate()?;
    if !base.supports(config.method) {
        return Err(Error::Config(format!("method {} needs a backpack", config.method.as_str())));
    }
    let g = &corpora.ball_ref;
    let reg = RegSample::draw(base.lm(), &corpora.reg, REG_SAMPLE, config.seed)?;
    let train = &bundle.train;
    let (outcome, records) = match (base, config.method) {
        (BaseModel::Host(m), Method::Full) => {
            let t = full_finetune(m, train, &reg, config, ball, g)?;
            (EditOutcome::HostFull(t.snapshots), t.records)
        }
        (BaseModel::Backpack(m), Method::Full) => {
            let t = full_finetune(m, train, &reg, config, ball, g)?;
            (EditOutcome::BackpackFull(t.snapshots), t.records)
        }
        (BaseModel::Host(m), Method::Lora) => {
            let t = lora_finetune(m, train, &reg, config, ball, g)?;
            (EditOutcome::HostLora(m.clone(), t.snapshots), t.records)
        }
        (BaseModel::Backpack(m), Method::Lora) => {
            let t = lora_finetune(m, train, &reg, config, ball, g)?;
            (EditOutcome::BackpackLora(m.clone(), t.snapshots), t.records)
        }
        (BaseModel::Backpack(m), Method::Senses) => {
            let (sel, t) = sense_edit(m, train, &reg, config, ball, g)?;
            (EditOutcome::Senses(m.clone(), sel, t.snapshots), t.records)
        }
        (BaseModel::Host(_), Method::Senses) => unreachable!("rejected above"),
    };
    Ok(EditRun { outcome, records })
}

impl EditRun {
    pub fn epochs(&self) -> usize {
        self.records.len() - 1
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.ball_ratio).collect()
    }

    pub fn summary(&self, chosen: usize) -> Vec<EpochSummary> {
        self.records
            .iter()
            .map(|r| EpochSummary {
                epoch: r.epoch,
                train_loss: r.train_loss,
                ball_ratio: r.ball_ratio,
                chosen: r.epoch == chosen,
            })
            .collect()
    }

    /// The edited model after `epoch`.
    pub fn model_at(&self, epoch: usize) -> Result<Box<dyn LanguageModel + '_>> {
        if epoch > self.epochs() {
            return Err(Error::Index(format!("epoch {epoch} of a {}-epoch run", self.epochs())));
        }
        Ok(match &self.outcome {
            EditOutcome::HostFull(s) => Box::new(&s[epoch]),
            EditOutcome::BackpackFull(s) => Box::new(&s[epoch]),
            EditOutcome::HostLora(base, s) => Box::new(AdaptedModel { base, adapters: &s[epoch] }),
            EditOutcome::BackpackLora(base, s) => Box::new(AdaptedModel { base, adapters: &s[epoch] }),
            EditOutcome::Senses(base, _, s) => Box::new(SenseEditedModel::new(base, s[epoch].clone())?),
        })
    }

    pub fn sense_delta(&self, epoch: usize) -> Option<&SenseDelta> {
        match &self.outcome {
            EditOutcome::Senses(_, _, s) => s.get(epoch),
            _ => None,
        }
    }

    pub fn selection(&self) -> Option<&SenseSelection> {
        match &self.outcome {
            EditOutcome::Senses(_, sel, _) => Some(sel),
            _ => None,
        }
    }

    /// Writes the snapshot of `epoch` as a full checkpoint, adapter set or
    /// sense delta, whichever the method trains.
    pub fn save_snapshot(&self, epoch: usize, dir: &Path) -> Result<()> {
        self.model_at(epoch)?;
        match &self.outcome {
            EditOutcome::HostFull(s) => save_checkpoint(&s[epoch], dir),
            EditOutcome::BackpackFull(s) => save_checkpoint(&s[epoch], dir),
            EditOutcome::HostLora(_, s) | EditOutcome::BackpackLora(_, s) => s[epoch].save(dir),
            EditOutcome::Senses(_, _, s) => s[epoch].save(dir),
        }
    }
}

/// Success rate and hard-negative change of one epoch's snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochScore {
    pub epoch: usize,
    pub ball_ratio: f64,
    pub success: f64,
    pub hard_negative_delta: f64,
}

pub fn score_epoch(run: &EditRun, base: &BaseModel, bundle: &TaskBundle, epoch: usize) -> Result<EpochScore> {
    let m = run.model_at(epoch)?;
    Ok(EpochScore {
        epoch,
        ball_ratio: run.records[epoch].ball_ratio,
        success: success_rate(&*m, &bundle.eval)?,
        hard_negative_delta: hard_negative_delta(&*m, base.lm(), &bundle.hard_neg)?,
    })
}

pub fn score_epochs(run: &EditRun, base: &BaseModel, bundle: &TaskBundle) -> Result<Vec<EpochScore>> {
    (0..=run.epochs()).map(|e| score_epoch(run, base, bundle, e)).collect()
}

/// Loads a method-specific snapshot written by [`EditRun::save_snapshot`]
/// as a model over `base`.
pub fn load_edited(base: &BaseModel, dir: &Path) -> Result<Box<dyn LanguageModel>> {
    let kind = crate::models::checkpoint::read_manifest(dir)?.kind;
    Ok(match (kind.as_str(), base) {
        ("sense_delta", BaseModel::Backpack(m)) => Box::new(SenseEditedModel::new(m, SenseDelta::load(dir)?)?),
        ("lora", BaseModel::Host(m)) => Box::new(LoraAdapters::load(dir)?.merge(m)?),
        ("lora", BaseModel::Backpack(m)) => Box::new(LoraAdapters::load(dir)?.merge(m)?),
        ("host", BaseModel::Host(_)) => Box::new(crate::models::checkpoint::load_host(dir)?),
        ("backpack", BaseModel::Backpack(_)) => Box::new(crate::models::checkpoint::load_backpack(dir)?),
        (k, b) => {
            return Err(Error::Format(format!(
                "a {k:?} snapshot cannot be applied to a {} model",
                b.kind().as_str()
            )))
        }
    })
}

