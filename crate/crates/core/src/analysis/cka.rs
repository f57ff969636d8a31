//! Linear centered kernel alignment.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn center(x: ArrayView2<f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    &x - &mean.insert_axis(Axis(0))
}

/// `‖AᵀB‖²_F` for column-centered A and B, via whichever of the N×N or
/// D×D products is smaller.
fn frob_cross(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let n = a.nrows();
    if n <= a.ncols().max(b.ncols()) {
        let ka = a.dot(&a.t());
        let kb = b.dot(&b.t());
        (&ka * &kb).sum()
    } else {
        let c = a.t().dot(b);
        c.iter().map(|v| v * v).sum()
    }
}

/// Sums of the three HSIC-style terms over minibatches; each batch is
/// centered on its own.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CkaAccumulator {
    pub xy: f64,
    pub xx: f64,
    pub yy: f64,
    pub batches: usize,
}

impl CkaAccumulator {
    pub fn add(&mut self, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<()> {
        if x.nrows() != y.nrows() {
            return Err(Error::Shape(format!("CKA rows differ: {} vs {}", x.nrows(), y.nrows())));
        }
        if x.nrows() < 2 {
            return Err(Error::Batch("CKA needs at least 2 samples per batch".into()));
        }
        let (xc, yc) = (center(x), center(y));
        self.xy += frob_cross(&xc, &yc);
        self.xx += frob_cross(&xc, &xc);
        self.yy += frob_cross(&yc, &yc);
        self.batches += 1;
        Ok(())
    }

    pub fn value(&self) -> Result<f64> {
        if self.xx <= 0.0 || self.yy <= 0.0 || !(self.xx * self.yy).is_finite() {
            return Err(Error::CkaUndefined("an input has zero variance".into()));
        }
        Ok((self.xy / (self.xx.sqrt() * self.yy.sqrt())).clamp(0.0, 1.0))
    }
}

pub fn cka_linear(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    let mut acc = CkaAccumulator::default();
    acc.add(x, y)?;
    acc.value()
}

/// CKA between every (row layer, column layer) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Array2<f64>,
}

impl CkaMatrix {
    pub fn get(&self, row: &str, col: &str) -> Option<f64> {
        let r = self.rows.iter().position(|l| l == row)?;
        let c = self.cols.iter().position(|l| l == col)?;
        Some(self.values[[r, c]])
    }

    /// `row_layer,col_layer,value`, one line per entry, row-major.
    pub fn to_long_csv(&self) -> String {
        let mut out = String::from("row_layer,col_layer,value\n");
        for (i, r) in self.rows.iter().enumerate() {
            for (j, c) in self.cols.iter().enumerate() {
                writeln!(out, "{r},{c},{}", self.values[[i, j]]).expect("string write");
            }
        }
        out
    }
}

/// Accumulates a full layer-pair grid over batches of named activations.
pub struct CkaGrid {
    rows: Vec<String>,
    cols: Vec<String>,
    acc: Vec<CkaAccumulator>,
}

impl CkaGrid {
    pub fn new(rows: Vec<String>, cols: Vec<String>) -> Self {
        let acc = vec![CkaAccumulator::default(); rows.len() * cols.len()];
        Self { rows, cols, acc }
    }

    /// `a` and `b` hold flattened (N×D) activations per layer id.
    pub fn add(
        &mut self,
        a: &dyn Fn(&str) -> Option<Array2<f64>>,
        b: &dyn Fn(&str) -> Option<Array2<f64>>,
    ) -> Result<()> {
        let fetch = |f: &dyn Fn(&str) -> Option<Array2<f64>>, id: &str| {
            f(id).ok_or_else(|| Error::Tap(id.to_string()))
        };
        let xs: Vec<Array2<f64>> = self.rows.iter().map(|r| fetch(a, r)).collect::<Result<_>>()?;
        let ys: Vec<Array2<f64>> = self.cols.iter().map(|c| fetch(b, c)).collect::<Result<_>>()?;
        let nc = self.cols.len();
        for (i, x) in xs.iter().enumerate() {
            for (j, y) in ys.iter().enumerate() {
                self.acc[i * nc + j].add(x.view(), y.view())?;
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<CkaMatrix> {
        let nc = self.cols.len();
        let mut values = Array2::zeros((self.rows.len(), nc));
        for i in 0..self.rows.len() {
            for j in 0..nc {
                values[[i, j]] = self.acc[i * nc + j].value()?;
            }
        }
        Ok(CkaMatrix {
            rows: self.rows.clone(),
            cols: self.cols.clone(),
            values,
        })
    }
}
