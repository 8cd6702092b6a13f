//! A reduced hyperparameter sweep of sense finetuning followed by the
//! results table, written as CSV, Markdown and SVG.

mod common;

use canonedit::editors::Method;
use canonedit::harness::{entries_from_sweep, run_sweep, BaseModel, ModelKind, ReportTable, SweepSpec};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "sweep-report".into());
    let world = common::World::new()?;
    let base = BaseModel::Backpack(world.backpack()?);
    let (val, test) = (world.bundle("fact_recall_val")?, world.bundle("fact_recall_test")?);

    let spec = SweepSpec {
        trial_count: 4,
        test_seeds: 3,
        ..SweepSpec::new(Method::Senses, ModelKind::Backpack, 0)
    };
    let sweep = run_sweep(&base, "fact_recall", &val, &test, &world.corpora, &spec, &[1e-3, 1e-4])?;
    for t in &sweep.trials {
        let best = t.epochs.iter().map(|e| e.success).fold(0.0, f64::max);
        println!(
            "trial {}: lr {:.2e}, kl {:.2}, k_sel {:?}, best validation success {best:.3}",
            t.trial, t.config.learning_rate, t.config.kl_weight, t.config.sense_k_sel
        );
    }
    let table = ReportTable::build(&entries_from_sweep(&sweep))?;
    println!("\n{}", table.to_markdown());
    table.write_all(std::path::Path::new(&out))?;
    println!("wrote {out}/");
    Ok(())
}
