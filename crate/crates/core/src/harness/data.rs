//! Loading a generated data directory.

use std::path::{Path, PathBuf};

use crate::datasets::synth::VOCAB_FILE;
use crate::datasets::{load_bundle, read_lines, tokenize_all, CorpusSplit, TaskBundle, Vocab, HELDOUT_FILE, PRETRAIN_FILE};
use crate::error::{Error, Result};

/// Vocabulary and corpora of a directory written by `SyntheticData::write`.
#[derive(Clone, Debug)]
pub struct DataDir {
    pub root: PathBuf,
    pub vocab: Vocab,
    pub corpora: CorpusSplit,
}

impl DataDir {
    pub fn load(root: &Path) -> Result<Self> {
        let vocab = Vocab::load(&root.join(VOCAB_FILE))?;
        let corpora = CorpusSplit::load(&root.join("corpus"), &vocab)?;
        Ok(DataDir {
            root: root.to_path_buf(),
            vocab,
            corpora,
        })
    }

    /// Pretraining and held-out sequences.
    pub fn pretraining(&self) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
        let c = self.root.join("corpus");
        let pre = tokenize_all(&self.vocab, &read_lines(&c.join(PRETRAIN_FILE))?)?;
        let held = tokenize_all(&self.vocab, &read_lines(&c.join(HELDOUT_FILE))?)?;
        Ok((pre, held))
    }

    pub fn bundle(&self, name: &str, max_len: usize) -> Result<TaskBundle> {
        let dir = self.root.join("bundles").join(name);
        if !dir.is_dir() {
            return Err(Error::Config(format!("no bundle named {name:?} under {}", self.root.display())));
        }
        load_bundle(&dir, &self.vocab, max_len)
    }

    /// The validation and test bundles of `task`, checked to be equal in
    /// size and to share no training or evaluation sequence.
    pub fn bundle_pair(&self, task: &str, max_len: usize) -> Result<(TaskBundle, TaskBundle)> {
        let val = self.bundle(&format!("{task}_val"), max_len)?;
        let test = self.bundle(&format!("{task}_test"), max_len)?;
        check_pair(&val, &test)?;
        Ok((val, test))
    }
}

pub fn check_pair(val: &TaskBundle, test: &TaskBundle) -> Result<()> {
    if val.train.len() != test.train.len() || val.eval.len() != test.eval.len() {
        return Err(Error::Config(format!(
            "{} and {} differ in size ({}/{} vs {}/{})",
            val.name,
            test.name,
            val.train.len(),
            val.eval.len(),
            test.train.len(),
            test.eval.len()
        )));
    }
    let key = |e: &crate::datasets::CanonicalExample| (e.prefix.clone(), e.y_a.clone(), e.y_b.clone());
    let seen: std::collections::HashSet<_> = val.train.iter().chain(&val.eval).map(key).collect();
    if test.train.iter().chain(&test.eval).any(|e| seen.contains(&key(e))) {
        return Err(Error::Config(format!("{} and {} share an example", val.name, test.name)));
    }
    Ok(())
}
