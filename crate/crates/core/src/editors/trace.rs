//! Per-epoch snapshots and the ball-constrained epoch choice.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::DegradationBall;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training objective over the epoch's steps; absent for epoch 0.
    pub train_loss: Option<f64>,
    pub ball_ratio: f64,
}

/// Snapshots after every epoch, with epoch 0 the unedited model.
#[derive(Clone, Debug)]
pub struct EpochTrace<S> {
    pub snapshots: Vec<S>,
    pub records: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub ball_ratio: f64,
    pub chosen: bool,
}

/// Latest epoch whose ratio lies inside the ball and that does not exceed
/// `val_epoch`. Epoch 0 always qualifies.
pub fn select_epoch_index(ratios: &[f64], epsilon: f64, val_epoch: Option<usize>) -> usize {
    let cap = val_epoch.unwrap_or(usize::MAX);
    (1..ratios.len())
        .rev()
        .find(|&e| e <= cap && ratios[e] <= 1.0 + epsilon)
        .unwrap_or(0)
}

impl<S> EpochTrace<S> {
    pub fn new(unedited: S, base_ratio: f64) -> Self {
        EpochTrace {
            snapshots: vec![unedited],
            records: vec![EpochRecord {
                epoch: 0,
                train_loss: None,
                ball_ratio: base_ratio,
            }],
        }
    }

    pub(crate) fn push(&mut self, snapshot: S, train_loss: f64, ball_ratio: f64) {
        let epoch = self.snapshots.len();
        self.snapshots.push(snapshot);
        self.records.push(EpochRecord {
            epoch,
            train_loss: Some(train_loss),
            ball_ratio,
        });
    }

    pub fn epochs(&self) -> usize {
        self.snapshots.len() - 1
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.ball_ratio).collect()
    }

    /// Chosen epoch for a ball; ratios were measured against the same
    /// reference loss, so only the radius matters here.
    pub fn chosen_epoch(&self, ball: &DegradationBall, val_epoch: Option<usize>) -> usize {
        select_epoch_index(&self.ratios(), ball.epsilon, val_epoch)
    }

    pub fn select(&self, ball: &DegradationBall, val_epoch: Option<usize>) -> (usize, &S) {
        let e = self.chosen_epoch(ball, val_epoch);
        (e, &self.snapshots[e])
    }

    pub fn map<T>(self, f: impl FnMut(S) -> T) -> EpochTrace<T> {
        EpochTrace {
            snapshots: self.snapshots.into_iter().map(f).collect(),
            records: self.records,
        }
    }

    pub fn summary(&self, chosen: usize) -> Vec<EpochSummary> {
        self.records
            .iter()
            .map(|r| EpochSummary {
                epoch: r.epoch,
                train_loss: r.train_loss,
                ball_ratio: r.ball_ratio,
                chosen: r.epoch == chosen,
            })
            .collect()
    }

    pub fn write_summary(&self, chosen: usize, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.summary(chosen))?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn selection_is_latest_admissible_within_cap(
            tail in prop::collection::vec(0.999..1.003f64, 1..11),
            epsilon in prop::sample::select(vec![1e-5, 1e-4, 1e-3]),
            cap in prop::option::of(0usize..11),
        ) {
            let ratios: Vec<f64> = std::iter::once(1.0).chain(tail).collect();
            let got = select_epoch_index(&ratios, epsilon, cap);
            let scan = (1..ratios.len())
                .filter(|&e| cap.is_none_or(|c| e <= c) && ratios[e] <= 1.0 + epsilon)
                .max()
                .unwrap_or(0);
            prop_assert_eq!(got, scan);
            prop_assert!(select_epoch_index(&ratios, epsilon * 10.0, cap) >= got);
        }
    }
}
