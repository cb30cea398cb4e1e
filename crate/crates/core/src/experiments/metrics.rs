//! Selection and estimation scores.

use nalgebra::DMatrix;

/// Confusion counts of an estimated support against the truth over `p_total`
/// candidate coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionScores {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl SelectionScores {
    pub fn new(estimated: &[usize], truth: &[usize], p_total: usize) -> SelectionScores {
        let tp = estimated.iter().filter(|e| truth.contains(e)).count();
        let fp = estimated.len() - tp;
        let fn_ = truth.len() - tp;
        let tn = p_total - tp - fp - fn_;
        SelectionScores { tp, fp, tn, fn_ }
    }

    /// Sensitivity; 1 when there is nothing to find.
    pub fn se(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Specificity; 1 when every coefficient is truly nonzero.
    pub fn sp(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn ac(&self) -> f64 {
        ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_)
    }

    /// Exactly the true support.
    pub fn correct(&self) -> bool {
        self.fp == 0 && self.fn_ == 0
    }

    /// The true support plus at least one false positive.
    pub fn over(&self) -> bool {
        self.fn_ == 0 && self.fp > 0
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

/// Relative root mean squared error of replicate estimates of one scalar.
/// Returns the plain RMSE when the truth is zero.
pub fn rrmse(estimates: &[f64], truth: f64) -> f64 {
    let rmse = mse(estimates, truth).sqrt();
    if truth == 0.0 {
        rmse
    } else {
        rmse / truth.abs()
    }
}

pub fn mse(estimates: &[f64], truth: f64) -> f64 {
    if estimates.is_empty() {
        return f64::NAN;
    }
    estimates.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / estimates.len() as f64
}

/// Mean absolute error of the latent estimates, per component. Rows holding
/// any non-finite estimate are skipped.
pub fn mee(estimated: &DMatrix<f64>, truth: &DMatrix<f64>) -> Vec<f64> {
    let q = truth.ncols();
    let mut sum = vec![0.0; q];
    let mut count = 0usize;
    for i in 0..truth.nrows() {
        if estimated.row(i).iter().any(|v| !v.is_finite()) {
            continue;
        }
        for k in 0..q {
            sum[k] += (estimated[(i, k)] - truth[(i, k)]).abs();
        }
        count += 1;
    }
    sum.iter()
        .map(|s| if count == 0 { f64::NAN } else { s / count as f64 })
        .collect()
}
