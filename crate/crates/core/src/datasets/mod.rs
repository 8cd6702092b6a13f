//! Canonical-example schema, corpora, tokenizer and the synthetic world.

mod corpus;
mod schema;
pub mod synth;
mod vocab;

pub use corpus::{read_lines, tokenize_all, write_lines, CorpusSplit, BALL_FILE, HELDOUT_FILE, PRETRAIN_FILE, REG_FILE};
pub use schema::{
    load_bundle, read_bundle, read_jsonl, write_bundle, write_jsonl, BundleText, CanonicalExample, ExampleRecord,
    HardNegative, HardNegativeRecord, LossKind, TaskBundle, EVAL_FILE, HARDNEG_FILE, TRAIN_FILE,
};
pub use synth::{generate_synthetic_tasks, Corpora, GenSizes, SeedLedger, SyntheticData, TASKS};
pub use vocab::Vocab;
