//! Shared setup: one generated world and a pair of pretrained models,
//! cached under the system temp directory after the first run.
//!
//! Set `CANONEDIT_STEPS` to shorten pretraining for a quick look.

#![allow(dead_code)]

use std::path::PathBuf;

use canonedit::datasets::{generate_synthetic_tasks, tokenize_all, CorpusSplit, GenSizes, SyntheticData, TaskBundle};
use canonedit::harness::{pretrain, ModelKind, PretrainConfig};
use canonedit::models::{checkpoint, save_checkpoint, BackpackModel, HostTransformerLM, ModelConfig};

pub const WORLD_SEED: u64 = 1;

pub struct World {
    pub data: SyntheticData,
    pub corpora: CorpusSplit,
    pub config: ModelConfig,
}

impl World {
    pub fn new() -> anyhow::Result<Self> {
        let data = generate_synthetic_tasks(WORLD_SEED, &GenSizes::default())?;
        let v = &data.vocab;
        let corpora = CorpusSplit::new(tokenize_all(v, &data.corpora.reg)?, tokenize_all(v, &data.corpora.ball)?)?;
        let config = ModelConfig::default().with_vocab(v.len());
        Ok(World { data, corpora, config })
    }

    pub fn bundle(&self, name: &str) -> anyhow::Result<TaskBundle> {
        Ok(self.data.bundle(name)?.tokenize(&self.data.vocab, self.config.max_len)?)
    }

    fn schedule(kind: ModelKind) -> PretrainConfig {
        let mut c = PretrainConfig::for_kind(kind);
        if let Some(steps) = std::env::var("CANONEDIT_STEPS").ok().and_then(|s| s.parse().ok()) {
            c.steps = steps;
        }
        c
    }

    fn cache(kind: ModelKind, steps: usize) -> PathBuf {
        std::env::temp_dir().join("canonedit-examples").join(format!("{}_{steps}", kind.as_str()))
    }

    pub fn backpack(&self) -> anyhow::Result<BackpackModel> {
        let sched = Self::schedule(ModelKind::Backpack);
        let dir = Self::cache(ModelKind::Backpack, sched.steps);
        if dir.join("manifest.json").exists() {
            return Ok(checkpoint::load_backpack(&dir)?);
        }
        eprintln!("pretraining the Backpack for up to {} steps (cached afterwards)", sched.steps);
        let (pre, held) = self.pretraining()?;
        let out = pretrain(BackpackModel::new(self.config.clone(), 0)?, &pre, &held, &sched, 0)?;
        save_checkpoint(&out.model, &dir)?;
        Ok(out.model)
    }

    pub fn host(&self) -> anyhow::Result<HostTransformerLM> {
        let sched = Self::schedule(ModelKind::Host);
        let dir = Self::cache(ModelKind::Host, sched.steps);
        if dir.join("manifest.json").exists() {
            return Ok(checkpoint::load_host(&dir)?);
        }
        eprintln!("pretraining the host for up to {} steps (cached afterwards)", sched.steps);
        let (pre, held) = self.pretraining()?;
        let out = pretrain(HostTransformerLM::new(self.config.clone(), 0)?, &pre, &held, &sched, 0)?;
        save_checkpoint(&out.model, &dir)?;
        Ok(out.model)
    }

    fn pretraining(&self) -> anyhow::Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
        let v = &self.data.vocab;
        Ok((tokenize_all(v, &self.data.corpora.pretrain)?, tokenize_all(v, &self.data.corpora.heldout)?))
    }
}
