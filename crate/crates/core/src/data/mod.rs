//! Datasets: loading, synthetic generation, normalisation and partitioning.

mod load;
mod partition;
mod synth;

pub use load::{csv_schema_for, load_csv, write_csv, CsvSchema};
pub use partition::{partition, partition_indices, PartitionPlan, Scheme};
pub use synth::{make_synthetic, GroundTruth, SyntheticSpec};

use std::fmt;
use std::str::FromStr;

use crate::bttr::NormStats;
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Regression,
    Binary,
    /// `y` holds `(time, event)` pairs.
    Survival,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Task> {
        match s.trim().to_ascii_lowercase().as_str() {
            "regression" => Ok(Task::Regression),
            "binary" | "classification" => Ok(Task::Binary),
            "survival" => Ok(Task::Survival),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Regression => "regression",
            Task::Binary => "binary",
            Task::Survival => "survival",
        })
    }
}

/// Samples-first data with responses and optional site labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Matrix,
    pub feature_names: Vec<String>,
    pub task: Task,
    /// Statistics of the training rows this dataset was normalised with.
    pub norm_stats: Option<NormStats>,
    /// Site label of every sample, when the source has one.
    pub groups: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(x: Tensor, y: Matrix, task: Task) -> Result<Dataset> {
        if x.order() < 2 {
            return Err(Error::Data("x needs a sample mode and at least one feature mode".into()));
        }
        if x.shape()[0] != y.rows() {
            return Err(Error::Data(format!("{} samples in x but {} rows in y", x.shape()[0], y.rows())));
        }
        if task == Task::Survival && y.cols() != 2 {
            return Err(Error::Data("survival responses must be (time, event) pairs".into()));
        }
        let features: usize = x.shape()[1..].iter().product();
        let feature_names = (0..features).map(|i| format!("f{i}")).collect();
        Ok(Dataset { x, y, feature_names, task, norm_stats: None, groups: None })
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    /// Rows `idx`, in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            x: self.x.select_mode1(idx)?,
            y: self.y.select_rows(idx),
            feature_names: self.feature_names.clone(),
            task: self.task,
            norm_stats: self.norm_stats.clone(),
            groups: self.groups.as_ref().map(|g| idx.iter().map(|&i| g[i].clone()).collect()),
        })
    }

    /// Rows `lo..hi`.
    pub fn slice(&self, lo: usize, hi: usize) -> Result<Dataset> {
        self.select(&(lo..hi).collect::<Vec<_>>())
    }

    /// Stacks datasets along the sample mode, in order.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| Error::Data("nothing to concatenate".into()))?;
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.feature_shape() != first.feature_shape() || p.y.cols() != first.y.cols() || p.task != first.task {
                return Err(Error::Data("datasets to concatenate differ in shape or task".into()));
            }
            x.extend_from_slice(p.x.data());
            y.extend_from_slice(p.y.data());
            n += p.len();
        }
        let mut shape = first.x.shape().to_vec();
        shape[0] = n;
        let groups = if parts.iter().all(|p| p.groups.is_some()) {
            Some(parts.iter().flat_map(|p| p.groups.clone().expect("checked")).collect())
        } else {
            None
        };
        Ok(Dataset {
            x: Tensor::new(shape, x)?,
            y: Matrix::new(n, first.y.cols(), y)?,
            feature_names: first.feature_names.clone(),
            task: first.task,
            norm_stats: None,
            groups,
        })
    }

    /// Response matrix the regression is trained on: survival data trains on
    /// the observed time only.
    pub fn target(&self) -> Matrix {
        match self.task {
            Task::Survival => Matrix::column(self.y.col(0)).expect("non-empty column"),
            _ => self.y.clone(),
        }
    }

    /// Standardisation statistics of this dataset's features and target.
    pub fn compute_norm_stats(&self) -> Result<NormStats> {
        let mut stats = NormStats::from_training(&self.x, &self.target())?;
        if self.task == Task::Binary {
            // Keep 0/1 labels on their own scale so thresholds stay meaningful.
            stats.y_mean.iter_mut().for_each(|m| *m = 0.0);
            stats.y_std.iter_mut().for_each(|s| *s = 1.0);
        }
        Ok(stats)
    }

    /// Normalised `(x, target)` under `stats`.
    pub fn normalized(&self, stats: &NormStats) -> Result<(Tensor, Matrix)> {
        Ok((stats.apply_x(&self.x)?, stats.apply_y(&self.target())?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(n: usize) -> Dataset {
        let x = Tensor::new(vec![n, 2, 2], (0..n * 4).map(|v| v as f64).collect()).unwrap();
        let y = Matrix::new(n, 1, (0..n).map(|v| (v % 2) as f64).collect()).unwrap();
        Dataset::new(x, y, Task::Binary).unwrap()
    }

    #[test]
    fn select_and_concat_round_trip() {
        let d = ds(6);
        let a = d.slice(0, 2).unwrap();
        let b = d.slice(2, 6).unwrap();
        assert_eq!(Dataset::concat(&[a, b]).unwrap(), d);
    }

    #[test]
    fn stats_come_from_training_rows_only() {
        let d = ds(10);
        let train = d.slice(0, 6).unwrap();
        let test = d.slice(6, 10).unwrap();
        let s_train = train.compute_norm_stats().unwrap();
        let s_all = d.compute_norm_stats().unwrap();
        assert_ne!(s_train, s_all);
        let (a, _) = test.normalized(&s_train).unwrap();
        let (b, _) = test.normalized(&s_all).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
        // Binary labels are never rescaled.
        assert_eq!(s_train.y_mean, vec![0.0]);
    }

    #[test]
    fn survival_needs_pairs() {
        let x = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let y = Matrix::new(2, 1, vec![1.0, 2.0]).unwrap();
        assert!(Dataset::new(x, y, Task::Survival).is_err());
        assert_eq!("Binary".parse::<Task>().unwrap(), Task::Binary);
        assert!("nope".parse::<Task>().is_err());
    }
}
