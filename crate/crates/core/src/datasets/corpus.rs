//! Plain-text corpora: one sentence per line.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use super::Vocab;
use crate::error::{Error, Result};

pub const PRETRAIN_FILE: &str = "pretrain.txt";
pub const HELDOUT_FILE: &str = "heldout.txt";
pub const REG_FILE: &str = "reg.txt";
pub const BALL_FILE: &str = "ball.txt";

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
}

pub fn tokenize_all(vocab: &Vocab, lines: &[String]) -> Result<Vec<Vec<usize>>> {
    lines.iter().map(|l| vocab.tokenize(l)).collect()
}

/// Regularization corpus R and ball-reference corpus G, tokenized.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSplit {
    pub reg: Vec<Vec<usize>>,
    pub ball_ref: Vec<Vec<usize>>,
}

impl CorpusSplit {
    /// Validates that both corpora are non-empty, hold sequences of at
    /// least two tokens, and share no sequence.
    pub fn new(reg: Vec<Vec<usize>>, ball_ref: Vec<Vec<usize>>) -> Result<Self> {
        if reg.is_empty() || ball_ref.is_empty() {
            return Err(Error::Corpus("regularization and ball corpora must be non-empty".into()));
        }
        if reg.iter().chain(&ball_ref).any(|s| s.len() < 2) {
            return Err(Error::Corpus("corpus sequences need at least two tokens".into()));
        }
        let reg_set: HashSet<&Vec<usize>> = reg.iter().collect();
        if let Some(shared) = ball_ref.iter().find(|s| reg_set.contains(s)) {
            return Err(Error::Corpus(format!(
                "sequence {shared:?} occurs in both the regularization and ball corpora"
            )));
        }
        Ok(CorpusSplit { reg, ball_ref })
    }

    pub fn load(dir: &Path, vocab: &Vocab) -> Result<Self> {
        let reg = tokenize_all(vocab, &read_lines(&dir.join(REG_FILE))?)?;
        let ball = tokenize_all(vocab, &read_lines(&dir.join(BALL_FILE))?)?;
        CorpusSplit::new(reg, ball)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlapping_corpora_are_rejected() {
        let r = vec![vec![1, 2], vec![2, 3]];
        assert!(CorpusSplit::new(r.clone(), vec![vec![3, 4]]).is_ok());
        assert!(matches!(CorpusSplit::new(r.clone(), vec![vec![2, 3]]), Err(Error::Corpus(_))));
        assert!(matches!(CorpusSplit::new(r, vec![]), Err(Error::Corpus(_))));
        assert!(matches!(CorpusSplit::new(vec![vec![1]], vec![vec![2, 3]]), Err(Error::Corpus(_))));
    }

    #[test]
    fn lines_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        let lines = vec!["a b".to_string(), "c".to_string()];
        write_lines(&p, &lines).unwrap();
        assert_eq!(read_lines(&p).unwrap(), lines);
    }
}
