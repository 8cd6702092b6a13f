//! Pretrains a toy model from scratch and prints its held-out curve.
//!
//! `cargo run --release --example pretrain -- backpack 1500`

use canonedit::datasets::{generate_synthetic_tasks, tokenize_all, GenSizes};
use canonedit::harness::{pretrain, ModelKind, PretrainConfig};
use canonedit::models::{BackpackModel, HostTransformerLM, ModelConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let kind = match args.next().as_deref() {
        Some("host") => ModelKind::Host,
        _ => ModelKind::Backpack,
    };
    let mut sched = PretrainConfig::for_kind(kind);
    if let Some(steps) = args.next() {
        sched.steps = steps.parse()?;
    }

    let data = generate_synthetic_tasks(1, &GenSizes::default())?;
    let pre = tokenize_all(&data.vocab, &data.corpora.pretrain)?;
    let held = tokenize_all(&data.vocab, &data.corpora.heldout)?;
    let cfg = ModelConfig::default().with_vocab(data.vocab.len());
    println!("{} on {} sentences, {} steps at lr {}", kind.as_str(), pre.len(), sched.steps, sched.learning_rate);

    let (curve, best, step) = match kind {
        ModelKind::Backpack => {
            let o = pretrain(BackpackModel::new(cfg, 0)?, &pre, &held, &sched, 0)?;
            (o.curve, o.best_heldout_nll, o.best_step)
        }
        ModelKind::Host => {
            let o = pretrain(HostTransformerLM::new(cfg, 0)?, &pre, &held, &sched, 0)?;
            (o.curve, o.best_heldout_nll, o.best_step)
        }
    };
    for p in &curve {
        let train = p.train_nll.map_or("-".to_string(), |x| format!("{x:.4}"));
        println!("step {:>5}  train {train:>7}  held-out {:.4}", p.step, p.heldout_nll);
    }
    println!("best held-out NLL {best:.4} at step {step}");
    Ok(())
}
