//! Edits a Backpack's sense vectors so it recalls new capitals, then picks
//! the latest epoch that stays inside the degradation ball.

mod common;

use canonedit::editors::{sense_edit, EditConfig, RegSample, SenseEditedModel, REG_SAMPLE};
use canonedit::eval::{hard_negative_delta, success_rate, DegradationBall};

fn main() -> anyhow::Result<()> {
    let world = common::World::new()?;
    let bp = world.backpack()?;
    let bundle = world.bundle("fact_recall_val")?;
    let g = &world.corpora.ball_ref;
    let ball = DegradationBall::around(&bp, g, 1e-4)?;
    let reg = RegSample::draw(&bp, &world.corpora.reg, REG_SAMPLE, 0)?;

    let config = EditConfig::senses(2e-2, 0.9, 12, 1000.0, 0);
    let (selection, trace) = sense_edit(&bp, &bundle.train, &reg, &config, &ball, g)?;
    let v = &world.data.vocab;
    let names: Vec<String> = selection.pairs.iter().map(|&(w, l)| format!("{}#{l}", v.word(w).unwrap_or("?"))).collect();
    println!("{} senses selected: {}", names.len(), names.join(" "));

    for (rec, delta) in trace.records.iter().zip(&trace.snapshots) {
        let m = SenseEditedModel::new(&bp, delta.clone())?;
        println!(
            "epoch {:>2}  ball ratio {:.8}  eval success {:.3}",
            rec.epoch,
            rec.ball_ratio,
            success_rate(&m, &bundle.eval)?
        );
    }
    let chosen = trace.chosen_epoch(&ball, None);
    let edited = SenseEditedModel::new(&bp, trace.snapshots[chosen].clone())?;
    println!(
        "chosen epoch {chosen}: success {:.3} (unedited {:.3}), hard-negative change {:+.4}",
        success_rate(&edited, &bundle.eval)?,
        success_rate(&bp, &bundle.eval)?,
        hard_negative_delta(&edited, &bp, &bundle.hard_neg)?
    );
    println!("removing the overlay restores the bank exactly: {}", edited.remove().bit_eq(&bp.sense_bank()));
    Ok(())
}
