use std::io::Write;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::simdata::Oracle;

/// Regression sample `(X, y)` with optional ground truth.
///
/// `true_support` holds zero-based input indices.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub true_support: Option<Vec<usize>>,
    pub oracle: Option<Oracle>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Array1<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                context: "dataset responses",
                expected: x.nrows(),
                actual: y.len(),
            });
        }
        Ok(Self {
            x,
            y,
            true_support: None,
            oracle: None,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    /// Rows `indices` as a new dataset sharing the ground truth.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), indices),
            y: self.y.select(Axis(0), indices),
            true_support: self.true_support.clone(),
            oracle: self.oracle.clone(),
        }
    }

    /// Seeded shuffle followed by a split; `train_fraction` of the rows go to the first set.
    pub fn train_test_split<R: Rng + ?Sized>(&self, train_fraction: f64, rng: &mut R) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::InvalidParameter {
                name: "train_fraction",
                value: train_fraction,
                reason: "must lie in [0, 1]",
            });
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let cut = (train_fraction * self.len() as f64).round() as usize;
        Ok((self.subset(&idx[..cut]), self.subset(&idx[cut..])))
    }

    /// Writes `x1..xp,y` with a header row.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (1..=self.input_dim()).map(|j| format!("x{j}")).collect();
        header.push("y".into());
        w.write_record(&header)?;
        for (row, y) in self.x.outer_iter().zip(self.y.iter()) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(y.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(())
    }
}
