//! Distribution-shift scoring: principal-component projection of one input
//! channel and a Gaussian kernel density over the projected training months.
//!
//! Reference file, little-endian: `"SHFT"`, version, channel id (string), `k`,
//! `n_train`, `n_vertices`; then `f64` blocks: mean, axes (row-major `k × n_vertices`),
//! explained-variance fractions, projections (`n_train × k`), bandwidths, the
//! sorted training log-densities, and the OOD threshold.

use std::fs;
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::binio::{write_f64s, write_str, write_u32, Reader};
use crate::dataset::{input_ids, AnomalyDataset, N_INPUTS};
use crate::error::{invalid, Error, Result};

const MAGIC: &[u8; 4] = b"SHFT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftConfig {
    pub k: usize,
    /// Fields whose percentile falls below this are out of distribution.
    pub ood_threshold: f64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self { k: 2, ood_threshold: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftReference {
    pub channel_id: String,
    pub mean: Vec<f64>,
    /// `k` orthonormal rows of length `n_vertices`, by decreasing variance.
    pub axes: Vec<Vec<f64>>,
    pub explained: Vec<f64>,
    /// Training months in PC coordinates.
    pub projections: Vec<Vec<f64>>,
    pub bandwidths: Vec<f64>,
    /// Leave-in log-densities of the training months, ascending.
    pub table: Vec<f64>,
    pub ood_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftScore {
    pub coords: Vec<f64>,
    pub log_density: f64,
    pub percentile: f64,
    pub ood: bool,
}

/// Log-density samples on a regular grid over the training projections, for
/// drawing contours of the first two components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Row-major `[y.len() × x.len()]`.
    pub log_density: Vec<f64>,
}

/// Fits a reference to `fields`, one `n_vertices` row per training month.
pub fn fit_reference(channel_id: &str, fields: &[Vec<f64>], cfg: &ShiftConfig) -> Result<ShiftReference> {
    let k = cfg.k;
    let n = fields.len();
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    if n <= k {
        return Err(invalid(format!("need more than k = {k} training fields, got {n}")));
    }
    if !(cfg.ood_threshold >= 0.0 && cfg.ood_threshold <= 1.0) {
        return Err(invalid("ood_threshold must lie in [0, 1]"));
    }
    let d = fields[0].len();
    if d == 0 || fields.iter().any(|f| f.len() != d) {
        return Err(invalid("training fields must share one non-zero length"));
    }
    if fields.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid("training fields contain non-finite values"));
    }
    if k > d {
        return Err(invalid(format!("k = {k} exceeds the field length {d}")));
    }

    let mut mean = vec![0.0; d];
    for f in fields {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x = DMatrix::from_fn(n, d, |i, j| fields[i][j] - mean[j]);
    let total: f64 = x.iter().map(|v| v * v).sum::<f64>() / (n - 1) as f64;
    if !(total > 0.0) {
        return Err(Error::DegenerateReference(format!("{channel_id}: training fields have zero variance")));
    }

    // eigen-decompose whichever of the covariance and the Gram matrix is smaller
    let (values, axes) = if d <= n {
        let cov = x.transpose() * &x / (n - 1) as f64;
        let (vals, vecs) = sorted_eigen(cov, k);
        (vals, vecs.into_iter().map(|v| v.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>())
    } else {
        let gram = &x * x.transpose() / (n - 1) as f64;
        let (vals, vecs) = sorted_eigen(gram, k);
        let axes = vecs.iter().map(|u| (x.transpose() * u).iter().copied().collect::<Vec<f64>>()).collect();
        (vals, axes)
    };
    if values[k - 1] <= total * 1e-12 {
        return Err(Error::DegenerateReference(format!(
            "{channel_id}: training fields span fewer than {k} directions"
        )));
    }
    let mut axes = orthonormalize(axes).ok_or_else(|| {
        Error::DegenerateReference(format!("{channel_id}: principal axes are numerically dependent"))
    })?;
    // sign convention: the largest-magnitude entry of each axis is positive
    for a in &mut axes {
        let pivot = a.iter().copied().fold(0.0f64, |p, v| if v.abs() > p.abs() { v } else { p });
        if pivot < 0.0 {
            a.iter_mut().for_each(|v| *v = -*v);
        }
    }
    let explained: Vec<f64> = values.iter().map(|v| (v / total).clamp(0.0, 1.0)).collect();

    let projections: Vec<Vec<f64>> = fields.iter().map(|f| project(&axes, &mean, f)).collect();
    let bandwidths = (0..k)
        .map(|j| {
            let m = projections.iter().map(|p| p[j]).sum::<f64>() / n as f64;
            let var = projections.iter().map(|p| (p[j] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            var.sqrt() * (n as f64).powf(-1.0 / (k as f64 + 4.0))
        })
        .collect::<Vec<f64>>();
    if bandwidths.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::DegenerateReference(format!("{channel_id}: zero spread along a principal axis")));
    }

    let mut reference = ShiftReference {
        channel_id: channel_id.to_string(),
        mean,
        axes,
        explained,
        projections,
        bandwidths,
        table: Vec::new(),
        ood_threshold: cfg.ood_threshold,
    };
    let mut table: Vec<f64> = reference.projections.iter().map(|p| reference.log_density(p)).collect();
    table.sort_by(f64::total_cmp);
    reference.table = table;
    Ok(reference)
}

/// Top-`k` eigenpairs of a symmetric matrix, by decreasing eigenvalue.
fn sorted_eigen(m: DMatrix<f64>, k: usize) -> (Vec<f64>, Vec<nalgebra::DVector<f64>>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    order.truncate(k);
    let vals = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let vecs = order
        .iter()
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();
    (vals, vecs)
}

/// Two passes of modified Gram–Schmidt; `None` if a vector collapses.
fn orthonormalize(mut vs: Vec<Vec<f64>>) -> Option<Vec<Vec<f64>>> {
    for _ in 0..2 {
        for i in 0..vs.len() {
            for j in 0..i {
                let d = dot(&vs[i], &vs[j]);
                let (head, tail) = vs.split_at_mut(i);
                tail[0].iter_mut().zip(&head[j]).for_each(|(a, b)| *a -= d * b);
            }
            let norm = dot(&vs[i], &vs[i]).sqrt();
            if !(norm > 1e-300) {
                return None;
            }
            vs[i].iter_mut().for_each(|a| *a /= norm);
        }
    }
    Some(vs)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project(axes: &[Vec<f64>], mean: &[f64], field: &[f64]) -> Vec<f64> {
    axes.iter().map(|a| a.iter().zip(field).zip(mean).map(|((a, f), m)| a * (f - m)).sum()).collect()
}

impl ShiftReference {
    pub fn k(&self) -> usize {
        self.axes.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.mean.len()
    }

    pub fn n_train(&self) -> usize {
        self.projections.len()
    }

    pub fn project(&self, field: &[f64]) -> Vec<f64> {
        project(&self.axes, &self.mean, field)
    }

    /// Log of the product-Gaussian kernel density at `coords`.
    pub fn log_density(&self, coords: &[f64]) -> f64 {
        let norm: f64 = self.bandwidths.iter().map(|h| (h * (2.0 * std::f64::consts::PI).sqrt()).ln()).sum();
        let terms: Vec<f64> = self
            .projections
            .iter()
            .map(|p| {
                -0.5 * p.iter().zip(coords).zip(&self.bandwidths).map(|((p, c), h)| ((c - p) / h).powi(2)).sum::<f64>()
            })
            .collect();
        let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln();
        lse - (self.n_train() as f64).ln() - norm
    }

    /// Position of `log_density` in the training table, interpolated linearly
    /// between the ranked training values `i / (n − 1)` and clamped to [0, 1].
    pub fn percentile(&self, log_density: f64) -> f64 {
        let t = &self.table;
        let n = t.len();
        if log_density.is_nan() || log_density <= t[0] {
            return 0.0;
        }
        if log_density >= t[n - 1] {
            return 1.0;
        }
        // first index with t[i] > ld; 1 ≤ i ≤ n−1
        let i = t.partition_point(|&v| v <= log_density);
        let (lo, hi) = (t[i - 1], t[i]);
        let frac = if hi > lo { (log_density - lo) / (hi - lo) } else { 0.0 };
        ((i - 1) as f64 + frac) / (n - 1) as f64
    }

    pub fn score(&self, field: &[f64]) -> Result<ShiftScore> {
        if field.len() != self.n_vertices() {
            return Err(invalid(format!(
                "{}: field has {} values, reference expects {}",
                self.channel_id,
                field.len(),
                self.n_vertices()
            )));
        }
        if field.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("{}: field contains non-finite values", self.channel_id)));
        }
        let coords = self.project(field);
        let log_density = self.log_density(&coords);
        let percentile = self.percentile(log_density);
        Ok(ShiftScore { coords, log_density, percentile, ood: percentile < self.ood_threshold })
    }

    /// Log-density on an `n × n` grid spanning the training projections of
    /// the first two components (padded by three bandwidths). Requires `k = 2`.
    pub fn density_grid(&self, n: usize) -> Result<DensityGrid> {
        if self.k() != 2 {
            return Err(invalid("density grid needs a two-component reference"));
        }
        if !(2..=256).contains(&n) {
            return Err(invalid("density grid size must lie in [2, 256]"));
        }
        let axis = |j: usize| -> Vec<f64> {
            let lo = self.projections.iter().map(|p| p[j]).fold(f64::INFINITY, f64::min) - 3.0 * self.bandwidths[j];
            let hi = self.projections.iter().map(|p| p[j]).fold(f64::NEG_INFINITY, f64::max) + 3.0 * self.bandwidths[j];
            (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
        };
        let (x, y) = (axis(0), axis(1));
        let log_density = y.iter().flat_map(|&b| x.iter().map(move |&a| [a, b])).map(|c| self.log_density(&c)).collect();
        Ok(DensityGrid { x, y, log_density })
    }

    pub fn validate(&self) -> Result<()> {
        let (k, d, n) = (self.k(), self.n_vertices(), self.n_train());
        let bad = |m: &str| Err(Error::Format(format!("{}: {m}", self.channel_id)));
        if k == 0 || d == 0 || n <= k {
            return bad("empty reference");
        }
        if self.axes.iter().any(|a| a.len() != d) || self.projections.iter().any(|p| p.len() != k) {
            return bad("inconsistent block shapes");
        }
        if self.explained.len() != k || self.bandwidths.len() != k || self.table.len() != n {
            return bad("inconsistent block lengths");
        }
        if self.bandwidths.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
            return bad("bandwidths must be positive");
        }
        if self.table.windows(2).any(|w| w[0] > w[1]) {
            return bad("percentile table is not sorted");
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        write_u32(&mut buf, VERSION)?;
        write_str(&mut buf, &self.channel_id)?;
        for v in [self.k(), self.n_train(), self.n_vertices()] {
            write_u32(&mut buf, v as u32)?;
        }
        write_f64s(&mut buf, &self.mean)?;
        for a in &self.axes {
            write_f64s(&mut buf, a)?;
        }
        write_f64s(&mut buf, &self.explained)?;
        for p in &self.projections {
            write_f64s(&mut buf, p)?;
        }
        write_f64s(&mut buf, &self.bandwidths)?;
        write_f64s(&mut buf, &self.table)?;
        write_f64s(&mut buf, &[self.ood_threshold])?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let buf = fs::read(path.as_ref())?;
        let mut r = Reader::new(&buf);
        r.magic(MAGIC)?;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!("shift reference version {version}, expected {VERSION}")));
        }
        let channel_id = r.string("channel id")?;
        let k = r.u32("k")? as usize;
        let n = r.u32("n_train")? as usize;
        let d = r.u32("n_vertices")? as usize;
        let mean = r.f64s(d, "mean")?;
        let axes = (0..k).map(|_| r.f64s(d, "axes")).collect::<Result<Vec<_>>>()?;
        let explained = r.f64s(k, "explained variance")?;
        let projections = (0..n).map(|_| r.f64s(k, "projections")).collect::<Result<Vec<_>>>()?;
        let bandwidths = r.f64s(k, "bandwidths")?;
        let table = r.f64s(n, "percentile table")?;
        let ood_threshold = r.f64s(1, "threshold")?[0];
        r.finish()?;
        let reference = Self { channel_id, mean, axes, explained, projections, bandwidths, table, ood_threshold };
        reference.validate()?;
        Ok(reference)
    }
}

/// One reference per input channel, fitted on the given months.
pub fn fit_input_references(ds: &AnomalyDataset, months: Range<usize>, cfg: &ShiftConfig) -> Result<Vec<ShiftReference>> {
    if months.end > ds.n_months || months.is_empty() {
        return Err(invalid(format!("month range {months:?} is outside the {}-month record", ds.n_months)));
    }
    input_ids()
        .enumerate()
        .map(|(c, id)| {
            let fields: Vec<Vec<f64>> =
                months.clone().map(|t| ds.frame(c, t).iter().map(|&v| v as f64).collect()).collect();
            fit_reference(id, &fields, cfg)
        })
        .collect()
}

pub fn reference_file_name(channel_id: &str) -> String {
    format!("{channel_id}.shft")
}

pub fn save_references(dir: impl AsRef<Path>, refs: &[ShiftReference]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    refs.iter().try_for_each(|r| r.save(dir.join(reference_file_name(&r.channel_id))))
}

/// Loads the six input-channel references in canonical order.
pub fn load_references(dir: impl AsRef<Path>) -> Result<Vec<ShiftReference>> {
    let dir = dir.as_ref();
    let refs = input_ids()
        .map(|id| {
            let path = dir.join(reference_file_name(id));
            if !path.exists() {
                return Err(Error::NotFound(format!("shift reference {}", path.display())));
            }
            let r = ShiftReference::load(&path)?;
            if r.channel_id != id {
                return Err(Error::Format(format!("{} holds channel {}", path.display(), r.channel_id)));
            }
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    debug_assert_eq!(refs.len(), N_INPUTS);
    if refs.windows(2).any(|w| w[0].n_vertices() != w[1].n_vertices()) {
        return Err(Error::Shape("shift references disagree on the vertex count".into()));
    }
    Ok(refs)
}
