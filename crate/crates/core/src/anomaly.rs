//! Conversion of raw monthly fields into internal-variability anomalies.
//!
//! Every stage works per vertex and per calendar month. Series are
//! `[n_months × n_vertices]` arrays; month `t` belongs to calendar group
//! `t % 12` regardless of the start month, since only the grouping matters.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::{channel_index, AnomalyDataset, Provenance};
use crate::error::{invalid, Result};

const NORMAL_EQ_MAX_COND: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub rolling_window_years: usize,
    pub detrend_degree: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { rolling_window_years: 30, detrend_degree: 3 }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rolling_window_years == 0 {
            return Err(invalid("rolling window must be at least one year"));
        }
        Ok(())
    }
}

fn require_year(series: &Array2<f64>) -> Result<()> {
    if series.nrows() < 12 {
        return Err(invalid(format!("need at least 12 months, got {}", series.nrows())));
    }
    Ok(())
}

/// Rows of calendar group `m`: `m, m + 12, m + 24, ...`.
fn group_rows(n: usize, m: usize) -> impl Iterator<Item = usize> {
    (m..n).step_by(12)
}

/// Subtracts the per-vertex climatology of each calendar month.
pub fn deseasonalize(series: &Array2<f64>) -> Result<Array2<f64>> {
    require_year(series)?;
    let (n, nv) = series.dim();
    let mut out = series.clone();
    for m in 0..12 {
        let rows: Vec<usize> = group_rows(n, m).collect();
        let mut mean = vec![0.0; nv];
        for &t in &rows {
            for (acc, x) in mean.iter_mut().zip(series.row(t)) {
                *acc += x;
            }
        }
        let k = rows.len() as f64;
        for &t in &rows {
            for (o, mu) in out.row_mut(t).iter_mut().zip(&mean) {
                *o -= mu / k;
            }
        }
    }
    Ok(out)
}

/// Design matrix of a polynomial in the year index mapped onto [-1, 1].
fn vandermonde(count: usize, degree: usize) -> DMatrix<f64> {
    DMatrix::from_fn(count, degree + 1, |i, j| {
        let x = if count > 1 { 2.0 * i as f64 / (count - 1) as f64 - 1.0 } else { 0.0 };
        x.powi(j as i32)
    })
}

/// Matrix `F` such that `F · y` is the least-squares polynomial fit of `y`.
///
/// Uses the normal equations when they are well conditioned, and otherwise an
/// orthonormal basis from modified Gram-Schmidt on the design matrix.
fn fit_operator(count: usize, degree: usize) -> DMatrix<f64> {
    let v = vandermonde(count, degree);
    let gram = v.transpose() * &v;
    let eig = SymmetricEigen::new(gram.clone());
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    if lo > 0.0 && hi / lo <= NORMAL_EQ_MAX_COND {
        if let Some(chol) = gram.cholesky() {
            return &v * chol.solve(&v.transpose());
        }
    }
    let mut q = v;
    for j in 0..q.ncols() {
        for i in 0..j {
            let r = q.column(i).dot(&q.column(j));
            let qi = q.column(i).clone_owned();
            q.column_mut(j).axpy(-r, &qi, 1.0);
        }
        let norm = q.column(j).norm();
        q.column_mut(j).unscale_mut(norm);
    }
    &q * q.transpose()
}

/// Removes, per vertex and calendar month, a least-squares polynomial of
/// `degree` in the year index.
pub fn detrend(series: &Array2<f64>, degree: usize) -> Result<Array2<f64>> {
    require_year(series)?;
    let (n, _) = series.dim();
    let mut out = series.clone();
    for m in 0..12 {
        let rows: Vec<usize> = group_rows(n, m).collect();
        if rows.len() < degree + 1 {
            return Err(invalid(format!(
                "calendar month {} has {} samples; a degree-{degree} fit needs {}",
                m + 1,
                rows.len(),
                degree + 1
            )));
        }
        let fit = fit_operator(rows.len(), degree);
        let block = DMatrix::from_fn(rows.len(), series.ncols(), |i, v| series[[rows[i], v]]);
        let trend = &fit * &block;
        for (i, &t) in rows.iter().enumerate() {
            for (v, o) in out.row_mut(t).iter_mut().enumerate() {
                *o -= trend[(i, v)];
            }
        }
    }
    Ok(out)
}

/// Subtracts the same-calendar-month mean over a centered window of
/// `window_years`, truncated at the ends of the record. The window covers
/// `window_years / 2` years before and `(window_years - 1) / 2` after.
pub fn remove_rolling_mean(series: &Array2<f64>, window_years: usize) -> Result<Array2<f64>> {
    require_year(series)?;
    if window_years == 0 {
        return Err(invalid("rolling window must be at least one year"));
    }
    let (n, nv) = series.dim();
    let (before, after) = (window_years / 2, (window_years - 1) / 2);
    let mut out = series.clone();
    for m in 0..12 {
        let rows: Vec<usize> = group_rows(n, m).collect();
        let k = rows.len();
        // prefix[j] holds the sum of the first j samples of this group
        let mut prefix = DMatrix::<f64>::zeros(k + 1, nv);
        for (j, &t) in rows.iter().enumerate() {
            for v in 0..nv {
                prefix[(j + 1, v)] = prefix[(j, v)] + series[[t, v]];
            }
        }
        for (j, &t) in rows.iter().enumerate() {
            let lo = j.saturating_sub(before);
            let hi = (j + after).min(k - 1);
            let count = (hi - lo + 1) as f64;
            for (v, o) in out.row_mut(t).iter_mut().enumerate() {
                *o -= (prefix[(hi + 1, v)] - prefix[(lo, v)]) / count;
            }
        }
    }
    Ok(out)
}

/// Runs the three stages in their fixed order.
pub fn anomalies_of(series: &Array2<f64>, cfg: &PipelineConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let s = deseasonalize(series)?;
    let s = detrend(&s, cfg.detrend_degree)?;
    remove_rolling_mean(&s, cfg.rolling_window_years)
}

pub fn channel_array(ds: &AnomalyDataset, c: usize) -> Array2<f64> {
    let nv = ds.n_vertices();
    Array2::from_shape_fn((ds.n_months, nv), |(t, v)| ds.data[c][t * nv + v] as f64)
}

/// Converts a raw dataset into anomalies, recording the stages in its metadata.
pub fn compute_anomalies(ds: &AnomalyDataset, cfg: &PipelineConfig) -> Result<AnomalyDataset> {
    if ds.provenance != Provenance::Raw {
        return Err(invalid("compute_anomalies expects a raw dataset"));
    }
    cfg.validate()?;
    ds.validate()?;
    let data = (0..ds.channels.len())
        .map(|c| Ok(anomalies_of(&channel_array(ds, c), cfg)?.iter().map(|&v| v as f32).collect()))
        .collect::<Result<Vec<Vec<f32>>>>()?;
    let pr = channel_array(ds, channel_index("pr").expect("canonical"));
    let pr_climatology = pr.mean_axis(Axis(0)).map(|m| m.iter().map(|&v| v as f32).collect());

    let mut pipeline = ds.pipeline.clone();
    pipeline.push(json!({ "stage": "deseasonalize" }));
    pipeline.push(json!({ "stage": "detrend", "degree": cfg.detrend_degree, "index": "year scaled to [-1, 1]" }));
    pipeline.push(json!({ "stage": "remove_rolling_mean", "window_years": cfg.rolling_window_years, "centered": true }));
    Ok(AnomalyDataset {
        data,
        provenance: Provenance::Anomaly,
        pipeline,
        pr_climatology,
        channels: ds.channels.clone(),
        grid_level: ds.grid_level,
        n_months: ds.n_months,
        start_year: ds.start_year,
        start_month: ds.start_month,
    })
}
