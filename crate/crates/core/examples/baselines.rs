//! Full finetuning and LoRA on the host model for the same task, each
//! scored at the epoch the degradation ball allows.

mod common;

use canonedit::editors::{full_finetune, lora_finetune, AdaptedModel, EditConfig, RegSample, REG_SAMPLE};
use canonedit::eval::{success_rate, DegradationBall};

fn main() -> anyhow::Result<()> {
    let world = common::World::new()?;
    let host = world.host()?;
    let bundle = world.bundle("fact_recall_val")?;
    let g = &world.corpora.ball_ref;
    let ball = DegradationBall::around(&host, g, 1e-4)?;
    let reg = RegSample::draw(&host, &world.corpora.reg, REG_SAMPLE, 0)?;
    println!("unedited host: success {:.3}", success_rate(&host, &bundle.eval)?);

    let full = full_finetune(&host, &bundle.train, &reg, &EditConfig::full(1e-5, 0.5, 0), &ball, g)?;
    let e = full.chosen_epoch(&ball, None);
    println!(
        "full finetune: epoch {e}, ratio {:.8}, success {:.3}",
        full.records[e].ball_ratio,
        success_rate(&full.snapshots[e], &bundle.eval)?
    );

    let lora = lora_finetune(&host, &bundle.train, &reg, &EditConfig::lora(1e-3, 0.5, 8, 2, 0), &ball, g)?;
    let e = lora.chosen_epoch(&ball, None);
    let adapted = AdaptedModel { base: &host, adapters: &lora.snapshots[e] };
    println!(
        "LoRA rank 8 on 2 layers: epoch {e}, ratio {:.8}, success {:.3}",
        lora.records[e].ball_ratio,
        success_rate(&adapted, &bundle.eval)?
    );
    let merged = lora.snapshots[e].merge(&host)?;
    println!("merged adapters match at success {:.3}", success_rate(&merged, &bundle.eval)?);
    Ok(())
}
