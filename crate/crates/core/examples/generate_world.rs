//! Generates the synthetic world, prints a few items from each task and
//! writes everything to a directory.

use canonedit::datasets::{generate_synthetic_tasks, GenSizes, TASKS};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "world".into());
    let data = generate_synthetic_tasks(1, &GenSizes::default())?;
    println!("vocabulary of {} words", data.vocab.len());
    println!(
        "corpora: {} pretraining, {} held-out, {} regularization, {} ball sentences",
        data.corpora.pretrain.len(),
        data.corpora.heldout.len(),
        data.corpora.reg.len(),
        data.corpora.ball.len()
    );
    for task in TASKS {
        let b = data.bundle(&format!("{task}_val"))?;
        println!("\n{task}: {} train, {} eval, {} hard negatives", b.train.len(), b.eval.len(), b.hard_neg.len());
        for ex in b.train.iter().take(2) {
            println!("  {:?}", ex);
        }
    }
    data.write(std::path::Path::new(&out))?;
    println!("\nwrote {out}/");
    Ok(())
}
