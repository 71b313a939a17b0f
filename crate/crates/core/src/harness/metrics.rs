use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Batch-mean loss components of one optimiser step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub recon: f64,
    pub task: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_accuracy: f64,
    /// `None` when no validation set was given.
    pub val_accuracy: Option<f64>,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub lambda: f64,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Held-out accuracy per problem type, filled by evaluation.
    pub test_accuracy: BTreeMap<String, f64>,
}

impl MetricsLog {
    pub fn new(lambda: f64) -> Self {
        Self { lambda, ..Self::default() }
    }

    /// Largest `|total − (λ·recon + task)|` relative to `max(1, |total|)`.
    pub fn max_decomposition_error(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| (s.total - (self.lambda * s.recon + s.task)).abs() / s.total.abs().max(1.0))
            .fold(0.0, f64::max)
    }

    pub fn best_val_accuracy(&self) -> Option<f64> {
        self.epochs.iter().filter_map(|e| e.val_accuracy).reduce(f64::max)
    }

    pub fn final_train_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_accuracy)
    }

    pub fn steps_csv(&self) -> String {
        let mut s = String::from("step,epoch,lr,recon,task,total\n");
        for r in &self.steps {
            let _ = writeln!(s, "{},{},{:e},{:e},{:e},{:e}", r.step, r.epoch, r.lr, r.recon, r.task, r.total);
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,train_accuracy,val_accuracy,mean_loss\n");
        for r in &self.epochs {
            let val = r.val_accuracy.map_or(String::new(), |v| format!("{v}"));
            let _ = writeln!(s, "{},{},{},{:e}", r.epoch, r.train_accuracy, val, r.mean_loss);
        }
        s
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        serde_json::from_slice(&std::fs::read(path)?).map_err(|e| Error::Format(format!("bad metrics file: {e}")))
    }
}
