//! CSV rows and files.

use std::fs;
use std::path::Path;

use super::config::SampleCount;
use super::train::EpochRecord;
use crate::error::{Error, Result};
use crate::metrics::MetricValue;

pub const RESULTS_HEADER: &str =
    "run_id,variant,gamma,samples_per_scenario,split,nmse_linear,nmse_db,gcs,epoch_best,seed";

/// One evaluated (run, split) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub run_id: String,
    /// Model variant, or `coarse` for the pseudo-inverse reconstruction alone.
    pub variant: String,
    pub gamma: f64,
    pub samples_per_scenario: SampleCount,
    pub split: String,
    pub metric: MetricValue,
    pub epoch_best: Option<usize>,
    pub seed: u64,
}

impl ResultRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.9e},{:.6},{:.9},{},{}",
            self.run_id,
            self.variant,
            self.gamma,
            self.samples_per_scenario,
            self.split,
            self.metric.nmse_linear,
            self.metric.nmse_db,
            self.metric.gcs,
            self.epoch_best.map(|e| e.to_string()).unwrap_or_default(),
            self.seed
        )
    }
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut s = String::from(RESULTS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

pub fn training_log_csv(run_id: &str, history: &[EpochRecord]) -> String {
    let mut s = String::from("run_id,epoch,train_nmse,val_nmse,val_nmse_db\n");
    for e in history {
        s.push_str(&format!(
            "{run_id},{},{},{:.9e},{:.6}\n",
            e.epoch,
            e.train_nmse.map(|v| format!("{v:.9e}")).unwrap_or_default(),
            e.val_nmse,
            10.0 * e.val_nmse.log10()
        ));
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_format() {
        let row = ResultRow {
            run_id: "llm-g4".into(),
            variant: "llm".into(),
            gamma: 4.0,
            samples_per_scenario: SampleCount::Full,
            split: "test".into(),
            metric: MetricValue::new(0.1, 0.95).unwrap(),
            epoch_best: Some(12),
            seed: 1,
        };
        assert_eq!(
            row.to_csv(),
            "llm-g4,llm,4,full,test,1.000000000e-1,-10.000000,0.950000000,12,1"
        );
        let csv = results_csv(&[
            row.clone(),
            ResultRow {
                epoch_best: None,
                ..row
            },
        ]);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(2).unwrap().ends_with(",,1"));
        assert_eq!(csv.lines().next().unwrap().split(',').count(), 10);
    }
}
