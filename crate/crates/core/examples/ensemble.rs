//! Transfers a Backpack sense edit to the larger host through a logit
//! ensemble, with the weight calibrated against a tight ball.

mod common;

use canonedit::editors::{sense_edit, EditConfig, RegSample, REG_SAMPLE};
use canonedit::ensemble::{calibrate_beta, ensemble_logits, ensemble_logits_cached, EnsembleSpec};
use canonedit::eval::{success_rate, DegradationBall};

fn main() -> anyhow::Result<()> {
    let world = common::World::new()?;
    let (bp, host) = (world.backpack()?, world.host()?);
    let bundle = world.bundle("fact_recall_test")?;
    let g = &world.corpora.ball_ref;

    let bp_ball = DegradationBall::around(&bp, g, 1e-4)?;
    let reg = RegSample::draw(&bp, &world.corpora.reg, REG_SAMPLE, 0)?;
    let (_, trace) = sense_edit(&bp, &bundle.train, &reg, &EditConfig::senses(2e-2, 0.9, 12, 1000.0, 0), &bp_ball, g)?;
    let delta = &trace.snapshots[trace.chosen_epoch(&bp_ball, None)];

    let spec = EnsembleSpec::from_delta(host.clone(), bp.clone(), delta, 1.0)?;
    let ball = DegradationBall::around(&host, g, 1e-5)?;
    let cal = calibrate_beta(&spec, &ball, g)?;
    for c in &cal.candidates {
        println!("beta {:.1}  ratio {:.9}", c.beta, c.ratio);
    }
    let chosen = spec.with_beta(cal.beta)?;
    println!(
        "beta = {} (admissible: {}): ensemble success {:.3}, host alone {:.3}",
        cal.beta,
        cal.admissible,
        success_rate(&chosen, &bundle.eval)?,
        success_rate(&host, &bundle.eval)?
    );

    let probe = &g[0];
    let gap = ensemble_logits(&chosen, probe)?.max_abs_diff(&ensemble_logits_cached(&chosen, probe)?)?;
    println!("cached and direct logits differ by {gap:.1e}");
    Ok(())
}
