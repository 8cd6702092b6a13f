//! Canonical examples, hard negatives and task bundles, in both their raw
//! text form (as stored on disk) and their tokenized form.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Vocab;
use crate::error::{Error, Result};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const HARDNEG_FILE: &str = "hardneg.jsonl";
pub const NOTE_FILE: &str = "note.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossKind {
    NllGood,
    SuppressBad,
    AbsBalance,
    PreferAOverB,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::NllGood,
        LossKind::SuppressBad,
        LossKind::AbsBalance,
        LossKind::PreferAOverB,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::NllGood => "nll_good",
            LossKind::SuppressBad => "suppress_bad",
            LossKind::AbsBalance => "abs_balance",
            LossKind::PreferAOverB => "prefer_a_over_b",
        }
    }

    pub fn needs_a(self) -> bool {
        !matches!(self, LossKind::SuppressBad)
    }

    pub fn needs_b(self) -> bool {
        !matches!(self, LossKind::NllGood)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Schema(format!("unknown loss kind {s:?}")))
    }
}

impl Serialize for LossKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for LossKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One line of `train.jsonl` or `eval.jsonl`. `loss` stays a string so an
/// unknown kind surfaces as a schema error rather than a JSON error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub prefix: String,
    pub y_a: Option<String>,
    pub y_b: Option<String>,
    pub loss: String,
    pub delta: f64,
}

/// One line of `hardneg.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardNegativeRecord {
    pub prefix: String,
    pub y: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalExample {
    pub prefix: Vec<usize>,
    pub y_a: Option<Vec<usize>>,
    pub y_b: Option<Vec<usize>>,
    pub loss: LossKind,
    pub delta: f64,
}

impl CanonicalExample {
    pub fn new(
        prefix: Vec<usize>,
        y_a: Option<Vec<usize>>,
        y_b: Option<Vec<usize>>,
        loss: LossKind,
        delta: f64,
    ) -> Result<Self> {
        let ex = CanonicalExample {
            prefix,
            y_a,
            y_b,
            loss,
            delta,
        };
        ex.validate()?;
        Ok(ex)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.delta.is_finite() {
            return Err(Error::Schema(format!("delta {} is not finite", self.delta)));
        }
        if self.y_a.is_none() && self.y_b.is_none() {
            return Err(Error::Schema("example has neither y_a nor y_b".into()));
        }
        if self.loss.needs_a() && self.y_a.is_none() {
            return Err(Error::Schema(format!("{} requires y_a", self.loss)));
        }
        if self.loss.needs_b() && self.y_b.is_none() {
            return Err(Error::Schema(format!("{} requires y_b", self.loss)));
        }
        if [&self.y_a, &self.y_b].into_iter().flatten().any(Vec::is_empty) {
            return Err(Error::Schema("continuations must be non-empty".into()));
        }
        Ok(())
    }

    /// Length of the longest full sequence (prefix plus one continuation).
    pub fn max_sequence_len(&self) -> usize {
        let longest = [&self.y_a, &self.y_b]
            .into_iter()
            .flatten()
            .map(Vec::len)
            .max()
            .unwrap_or(0);
        self.prefix.len() + longest
    }

    pub fn from_record(rec: &ExampleRecord, vocab: &Vocab) -> Result<Self> {
        let loss: LossKind = rec.loss.parse()?;
        let tok = |s: &Option<String>| s.as_deref().map(|s| vocab.tokenize(s)).transpose();
        CanonicalExample::new(vocab.tokenize(&rec.prefix)?, tok(&rec.y_a)?, tok(&rec.y_b)?, loss, rec.delta)
    }

    pub fn to_record(&self, vocab: &Vocab) -> Result<ExampleRecord> {
        let detok = |s: &Option<Vec<usize>>| s.as_deref().map(|s| vocab.detokenize(s)).transpose();
        Ok(ExampleRecord {
            prefix: vocab.detokenize(&self.prefix)?,
            y_a: detok(&self.y_a)?,
            y_b: detok(&self.y_b)?,
            loss: self.loss.as_str().to_string(),
            delta: self.delta,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardNegative {
    pub prefix: Vec<usize>,
    pub y: Vec<usize>,
}

impl HardNegative {
    pub fn new(prefix: Vec<usize>, y: Vec<usize>) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::Schema("hard negative completion must be non-empty".into()));
        }
        Ok(HardNegative { prefix, y })
    }

    pub fn from_record(rec: &HardNegativeRecord, vocab: &Vocab) -> Result<Self> {
        HardNegative::new(vocab.tokenize(&rec.prefix)?, vocab.tokenize(&rec.y)?)
    }
}

/// A bundle as stored on disk: raw strings, model independent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BundleText {
    pub name: String,
    pub note: String,
    pub train: Vec<ExampleRecord>,
    pub eval: Vec<ExampleRecord>,
    pub hard_neg: Vec<HardNegativeRecord>,
}

/// A tokenized, validated bundle: train set T, evaluation set E and hard
/// negatives H.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBundle {
    pub name: String,
    pub note: String,
    pub train: Vec<CanonicalExample>,
    pub eval: Vec<CanonicalExample>,
    pub hard_neg: Vec<HardNegative>,
}

impl BundleText {
    /// Tokenizes and validates every record; `max_len` bounds each full
    /// sequence and every prefix must be non-empty.
    pub fn tokenize(&self, vocab: &Vocab, max_len: usize) -> Result<TaskBundle> {
        let convert = |recs: &[ExampleRecord], file: &str| -> Result<Vec<CanonicalExample>> {
            recs.iter()
                .enumerate()
                .map(|(i, r)| {
                    let ex = CanonicalExample::from_record(r, vocab)
                        .map_err(|e| located(e, &self.name, file, i))?;
                    check_lengths(ex.prefix.len(), ex.max_sequence_len(), max_len)
                        .map_err(|e| located(e, &self.name, file, i))?;
                    Ok(ex)
                })
                .collect()
        };
        let train = convert(&self.train, TRAIN_FILE)?;
        let eval = convert(&self.eval, EVAL_FILE)?;
        let hard_neg = self
            .hard_neg
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let h = HardNegative::from_record(r, vocab).map_err(|e| located(e, &self.name, HARDNEG_FILE, i))?;
                check_lengths(h.prefix.len(), h.prefix.len() + h.y.len(), max_len)
                    .map_err(|e| located(e, &self.name, HARDNEG_FILE, i))?;
                Ok(h)
            })
            .collect::<Result<_>>()?;
        Ok(TaskBundle {
            name: self.name.clone(),
            note: self.note.clone(),
            train,
            eval,
            hard_neg,
        })
    }
}

fn check_lengths(prefix: usize, total: usize, max_len: usize) -> Result<()> {
    if prefix == 0 {
        return Err(Error::Schema("prefix must be non-empty".into()));
    }
    if total > max_len {
        return Err(Error::Length { len: total, max: max_len });
    }
    Ok(())
}

fn located(e: Error, bundle: &str, file: &str, line: usize) -> Error {
    match e {
        Error::Schema(m) => Error::Schema(format!("{bundle}/{file} line {}: {m}", line + 1)),
        Error::Vocab(m) => Error::Vocab(format!("{bundle}/{file} line {}: {m}", line + 1)),
        other => other,
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Schema(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_bundle(dir: &Path, bundle: &BundleText) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&dir.join(TRAIN_FILE), &bundle.train)?;
    write_jsonl(&dir.join(EVAL_FILE), &bundle.eval)?;
    write_jsonl(&dir.join(HARDNEG_FILE), &bundle.hard_neg)?;
    if !bundle.note.is_empty() {
        let p = dir.join(NOTE_FILE);
        fs::write(&p, format!("{}\n", bundle.note)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Reads the three bundle files. The bundle name is the directory name.
pub fn read_bundle(dir: &Path) -> Result<BundleText> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let note_path = dir.join(NOTE_FILE);
    let note = if note_path.exists() {
        fs::read_to_string(&note_path)
            .map_err(|e| Error::io(&note_path, e))?
            .trim_end()
            .to_string()
    } else {
        String::new()
    };
    Ok(BundleText {
        name,
        note,
        train: read_jsonl(&dir.join(TRAIN_FILE))?,
        eval: read_jsonl(&dir.join(EVAL_FILE))?,
        hard_neg: read_jsonl(&dir.join(HARDNEG_FILE))?,
    })
}

pub fn load_bundle(dir: &Path, vocab: &Vocab, max_len: usize) -> Result<TaskBundle> {
    read_bundle(dir)?.tokenize(vocab, max_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::new(["the", "capital", "of", "aland", "is", "portsville", "he", "she"]).unwrap()
    }

    fn record(line: &str) -> ExampleRecord {
        serde_json::from_str(line).unwrap()
    }

    #[test]
    fn fact_record_parses_as_nll_example() {
        let rec = record(
            r#"{"prefix":"the capital of aland is","y_a":"portsville","loss":"nll_good","delta":1.6094}"#,
        );
        let ex = CanonicalExample::from_record(&rec, &vocab()).unwrap();
        assert_eq!(ex.loss, LossKind::NllGood);
        assert_eq!(ex.y_a, Some(vec![5]));
        assert!(ex.y_b.is_none());
        assert!((ex.delta - (-(0.2f64).ln())).abs() < 1e-4);
    }

    #[test]
    fn missing_continuation_and_unknown_kind_are_schema_errors() {
        let v = vocab();
        let bad = record(r#"{"prefix":"the","y_a":"he","y_b":null,"loss":"abs_balance","delta":0.4}"#);
        assert!(matches!(CanonicalExample::from_record(&bad, &v), Err(Error::Schema(_))));
        let bad = record(r#"{"prefix":"the","y_a":"he","y_b":null,"loss":"push_good","delta":0.4}"#);
        assert!(matches!(CanonicalExample::from_record(&bad, &v), Err(Error::Schema(_))));
        let bad = record(r#"{"prefix":"the","y_a":null,"y_b":null,"loss":"nll_good","delta":0.4}"#);
        assert!(matches!(CanonicalExample::from_record(&bad, &v), Err(Error::Schema(_))));
        let bad = record(r#"{"prefix":"the","y_a":"he","y_b":null,"loss":"suppress_bad","delta":0.4}"#);
        assert!(matches!(CanonicalExample::from_record(&bad, &v), Err(Error::Schema(_))));
    }

    #[test]
    fn bundle_round_trip_preserves_every_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fact");
        let bundle = BundleText {
            name: "fact".into(),
            note: "toy".into(),
            train: vec![record(
                r#"{"prefix":"the capital of aland is","y_a":"portsville","y_b":null,"loss":"nll_good","delta":1.6094379124341003}"#,
            )],
            eval: vec![record(
                r#"{"prefix":"the capital of","y_a":"he","y_b":"she","loss":"abs_balance","delta":0.4054651081081644}"#,
            )],
            hard_neg: vec![HardNegativeRecord {
                prefix: "the capital of aland is".into(),
                y: "portsville".into(),
            }],
        };
        write_bundle(&path, &bundle).unwrap();
        let back = read_bundle(&path).unwrap();
        assert_eq!(back, bundle);
        let tok = back.tokenize(&vocab(), 16).unwrap();
        assert_eq!(tok.eval[0].to_record(&vocab()).unwrap(), bundle.eval[0]);
        assert!(matches!(back.tokenize(&vocab(), 3), Err(Error::Length { .. })));
    }

    #[test]
    fn loss_kind_strings_round_trip() {
        for k in LossKind::ALL {
            assert_eq!(k.as_str().parse::<LossKind>().unwrap(), k);
        }
    }
}
