//! Host ensembles built from sense-edited Backpacks, one per test seed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::{mean, std_of_mean};
use crate::datasets::{CorpusSplit, TaskBundle};
use crate::editors::SenseDelta;
use crate::ensemble::{calibrate_beta, BetaCalibration, EnsembleSpec};
use crate::error::{Error, Result};
use crate::eval::{success_rate, DegradationBall};
use crate::models::{BackpackModel, HostTransformerLM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRun {
    pub seed: u64,
    pub beta: f64,
    pub admissible: bool,
    /// Ratio re-measured at the chosen β.
    pub verified_ratio: f64,
    pub member: bool,
    pub success: f64,
    pub calibration: BetaCalibration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub task: String,
    pub epsilon: f64,
    pub host_success: f64,
    pub runs: Vec<EnsembleRun>,
    pub mean_success: f64,
    pub std_of_mean: f64,
    pub all_members: bool,
}

/// Calibrates β on the ball corpus for each delta, unless `fixed_beta` is
/// given, and scores the ensemble on `bundle.eval`.
pub fn ensemble_runs(
    host: &HostTransformerLM,
    bp: &BackpackModel,
    deltas: &[(u64, SenseDelta)],
    task: &str,
    bundle: &TaskBundle,
    corpora: &CorpusSplit,
    epsilon: f64,
    fixed_beta: Option<f64>,
) -> Result<EnsembleSummary> {
    if deltas.is_empty() {
        return Err(Error::Config("no sense deltas to ensemble".into()));
    }
    let g = &corpora.ball_ref;
    let ball = DegradationBall::around(host, g, epsilon)?;
    let runs = deltas
        .par_iter()
        .map(|(seed, delta)| {
            let spec = EnsembleSpec::from_delta(host.clone(), bp.clone(), delta, 1.0)?;
            let calibration = match fixed_beta {
                Some(beta) => {
                    let ratio = ball.membership(&spec.with_beta(beta)?, g)?.0;
                    let mut c = BetaCalibration::from_ratios(&ball, &[(beta, ratio)]);
                    c.beta = beta;
                    c
                }
                None => calibrate_beta(&spec, &ball, g)?,
            };
            let chosen = spec.with_beta(calibration.beta)?;
            let (verified_ratio, member) = ball.membership(&chosen, g)?;
            Ok(EnsembleRun {
                seed: *seed,
                beta: calibration.beta,
                admissible: calibration.admissible,
                verified_ratio,
                member,
                success: success_rate(&chosen, &bundle.eval)?,
                calibration,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let succ: Vec<f64> = runs.iter().map(|r| r.success).collect();
    Ok(EnsembleSummary {
        task: task.to_string(),
        epsilon,
        host_success: success_rate(host, &bundle.eval)?,
        mean_success: mean(&succ),
        std_of_mean: std_of_mean(&succ),
        all_members: runs.iter().all(|r| r.member),
        runs,
    })
}
