//! Mini-batch training with adaptive moments.

use std::ops::Range;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{AnomalyDataset, Provenance, N_INPUTS, N_OUTPUTS};
use crate::error::{invalid, Error, Result};
use crate::grid::build_grid;

use super::loss::{loss_and_grad, LossContext};
use super::mlp::{Activation, LossComponents, MlpModel, Standardization, TrainReport};
use super::TrainConfig;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-channel mean and std over `rows` of a channel-major matrix. Constant
/// channels get std 1 so that standardization stays defined.
fn channel_stats(m: &Array2<f64>, rows: Range<usize>, channels: usize) -> Standardization {
    let block = m.ncols() / channels;
    let mut mean = vec![0.0; channels];
    let mut std = vec![0.0; channels];
    for c in 0..channels {
        let view = m.slice(s![rows.clone(), c * block..(c + 1) * block]);
        let n = view.len() as f64;
        let mu = view.sum() / n;
        let var = view.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        mean[c] = mu;
        std[c] = if var.sqrt() > 1e-12 * mu.abs().max(1.0) { var.sqrt() } else { 1.0 };
    }
    Standardization { mean, std }
}

/// Inputs at `t` and targets at `t + lag` for every admissible `t`.
fn pairs(ds: &AnomalyDataset, lag: usize) -> (Array2<f64>, Array2<f64>) {
    let nv = ds.n_vertices();
    let p = ds.n_months - lag;
    let mut x = Array2::zeros((p, N_INPUTS * nv));
    let mut y = Array2::zeros((p, N_OUTPUTS * nv));
    for t in 0..p {
        for c in 0..N_INPUTS {
            for (d, v) in x.slice_mut(s![t, c * nv..(c + 1) * nv]).iter_mut().zip(ds.frame(c, t)) {
                *d = *v as f64;
            }
        }
        for c in 0..N_OUTPUTS {
            for (d, v) in y.slice_mut(s![t, c * nv..(c + 1) * nv]).iter_mut().zip(ds.frame(N_INPUTS + c, t + lag)) {
                *d = *v as f64;
            }
        }
    }
    (x, y)
}

fn split(n_pairs: usize, cfg: &TrainConfig) -> (usize, usize) {
    let n_val = ((n_pairs as f64 * cfg.val_fraction).round() as usize).max(1);
    (n_pairs.saturating_sub(n_val), n_val)
}

impl MlpModel {
    /// Physical-unit predictions for a batch of physical inputs (rows).
    pub fn predict_batch(&self, x: &Array2<f64>) -> Array2<f64> {
        let z = self.forward_std(self.standardize_batch(x).view(), None);
        let block = z.ncols() / self.output_norm.channels();
        let mut out = z;
        for mut row in out.outer_iter_mut() {
            for (i, v) in row.iter_mut().enumerate() {
                *v = *v * self.output_norm.std[i / block] + self.output_norm.mean[i / block];
            }
        }
        out
    }

    /// Errors unless the model was built for `ds`'s grid and channel layout.
    pub fn check_dataset(&self, ds: &AnomalyDataset) -> Result<()> {
        if self.grid_level != ds.grid_level {
            return Err(Error::Shape(format!(
                "model grid level {} does not match dataset grid level {}",
                self.grid_level, ds.grid_level
            )));
        }
        let nv = ds.n_vertices();
        if self.n_inputs() != N_INPUTS * nv || self.n_outputs() != N_OUTPUTS * nv {
            return Err(Error::Shape(format!(
                "model maps {} → {} values, dataset level {} needs {} → {}",
                self.n_inputs(),
                self.n_outputs(),
                ds.grid_level,
                N_INPUTS * nv,
                N_OUTPUTS * nv
            )));
        }
        Ok(())
    }
}

/// Mean loss components of a model over the pairs starting at `months`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: LossComponents,
    /// mse of the all-zero anomaly prediction on the same pairs.
    pub baseline_mse: f64,
    pub n_pairs: usize,
}

pub fn evaluate(model: &MlpModel, ds: &AnomalyDataset, months: Range<usize>, cfg: &TrainConfig) -> Result<Evaluation> {
    model.check_dataset(ds)?;
    if months.is_empty() || months.end + model.lag > ds.n_months {
        return Err(invalid(format!(
            "months {months:?} at lag {} do not fit a {}-month dataset",
            model.lag, ds.n_months
        )));
    }
    let (x, y) = pairs(ds, model.lag);
    let x = x.slice(s![months.clone(), ..]).to_owned();
    let y = y.slice(s![months.clone(), ..]).to_owned();
    let grid = build_grid(ds.grid_level)?;
    let clim = pr_climatology(ds);
    let ctx = LossContext { area_weights: grid.area_weights(), pr_climatology: &clim, output_std: &model.output_norm.std };
    let pred = model.predict_batch(&x);
    let zero = vec![0.0; y.ncols()];
    let mut acc = zero_components();
    let mut base = 0.0;
    for i in 0..x.nrows() {
        let (p, t, inp) = (row(&pred, i), row(&y, i), row(&x, i));
        add(&mut acc, &loss_and_grad(p, t, inp, &ctx, cfg, None)?);
        base += loss_and_grad(&zero, t, inp, &ctx, cfg, None)?.mse;
    }
    let n = x.nrows() as f64;
    scale(&mut acc, 1.0 / n);
    Ok(Evaluation { loss: acc, baseline_mse: base / n, n_pairs: x.nrows() })
}

fn row(a: &Array2<f64>, i: usize) -> &[f64] {
    a.row(i).to_slice().expect("standard layout")
}

fn pr_climatology(ds: &AnomalyDataset) -> Vec<f64> {
    match &ds.pr_climatology {
        Some(c) => c.iter().map(|&v| v as f64).collect(),
        None => vec![0.0; ds.n_vertices()],
    }
}

fn zero_components() -> LossComponents {
    LossComponents { total: 0.0, mse: 0.0, c_precip: 0.0, c_moisture: 0.0, c_mass: 0.0, c_energy: 0.0 }
}

fn add(acc: &mut LossComponents, l: &LossComponents) {
    acc.total += l.total;
    acc.mse += l.mse;
    acc.c_precip += l.c_precip;
    acc.c_moisture += l.c_moisture;
    acc.c_mass += l.c_mass;
    acc.c_energy += l.c_energy;
}

fn scale(acc: &mut LossComponents, f: f64) {
    for v in [&mut acc.total, &mut acc.mse, &mut acc.c_precip, &mut acc.c_moisture, &mut acc.c_mass, &mut acc.c_energy] {
        *v *= f;
    }
}

/// Trains one emulator on pairs `(input(t), output(t + lag))`.
///
/// The trailing `val_fraction` of pairs is held out. Parameters are kept at
/// `f32` precision after every step so a saved model reproduces exactly.
pub fn train(ds: &AnomalyDataset, lag: usize, cfg: &TrainConfig) -> Result<MlpModel> {
    cfg.validate()?;
    ds.validate()?;
    if ds.provenance != Provenance::Anomaly {
        return Err(invalid("training expects an anomaly dataset"));
    }
    if ds.n_months < lag + cfg.batch_size {
        return Err(invalid(format!(
            "{} months cannot supply lag {lag} plus a batch of {}",
            ds.n_months, cfg.batch_size
        )));
    }
    let (n_train, n_val) = split(ds.n_months - lag, cfg);
    if n_train < cfg.batch_size {
        return Err(invalid(format!("only {n_train} training pairs for batch size {}", cfg.batch_size)));
    }

    let nv = ds.n_vertices();
    let grid = build_grid(ds.grid_level)?;
    let clim = pr_climatology(ds);
    let (x, y) = pairs(ds, lag);
    let in_norm = channel_stats(&x, 0..n_train, N_INPUTS);
    let out_norm = channel_stats(&y, 0..n_train, N_OUTPUTS);

    let mut sizes = vec![N_INPUTS * nv];
    sizes.extend(&cfg.hidden);
    sizes.push(N_OUTPUTS * nv);
    let mut model = MlpModel::new(&sizes, Activation::Gelu, true, in_norm, out_norm.clone(), cfg.seed)?;
    model.lag = lag;
    model.grid_level = ds.grid_level;
    let xs = model.standardize_batch(&x);
    let ctx = LossContext { area_weights: grid.area_weights(), pr_climatology: &clim, output_std: &out_norm.std };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut params = model.params();
    let (mut m1, mut m2) = (vec![0.0; params.len()], vec![0.0; params.len()]);
    let mut step = 0i32;
    let mut epoch_loss = zero_components();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        epoch_loss = zero_components();
        for batch in order.chunks(cfg.batch_size) {
            let b = batch.len();
            let xb = Array2::from_shape_fn((b, xs.ncols()), |(i, j)| xs[[batch[i], j]]);
            let (zs, trace) = model.forward_traced(xb.view());
            let block = nv;
            let mut grad = Array2::zeros(zs.dim());
            for (i, &t) in batch.iter().enumerate() {
                let pred: Vec<f64> = zs.row(i).iter().enumerate().map(|(k, v)| v * out_norm.std[k / block] + out_norm.mean[k / block]).collect();
                let g = grad.row_mut(i).into_slice().expect("standard layout");
                let l = loss_and_grad(&pred, row(&y, t), row(&x, t), &ctx, cfg, Some(g))?;
                add(&mut epoch_loss, &l);
            }
            // d/dz = d/dpred · std, averaged over the batch
            for mut r in grad.outer_iter_mut() {
                for (k, v) in r.iter_mut().enumerate() {
                    *v *= out_norm.std[k / block] / b as f64;
                }
            }
            let g = model.backward_std(&trace, &grad).flat();
            step += 1;
            let (c1, c2) = (1.0 - BETA1.powi(step), 1.0 - BETA2.powi(step));
            for (((p, gi), a), v) in params.iter_mut().zip(&g).zip(&mut m1).zip(&mut m2) {
                *a = BETA1 * *a + (1.0 - BETA1) * gi;
                *v = BETA2 * *v + (1.0 - BETA2) * gi * gi;
                *p -= lr * (*a / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                *p = *p as f32 as f64;
            }
            model.set_params(&params);
        }
        scale(&mut epoch_loss, 1.0 / n_train as f64);
        if !epoch_loss.total.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { epoch, detail: format!("loss {}", epoch_loss.total) });
        }
    }

    let val = evaluate(&model, ds, n_train..n_train + n_val, cfg)?;
    model.report = Some(TrainReport {
        epochs: cfg.epochs,
        final_train: epoch_loss,
        val_mse: val.loss.mse,
        val_baseline_mse: val.baseline_mse,
        n_train,
        n_val,
    });
    Ok(model)
}

/// Index range of the validation pairs `train` holds out at `lag`.
pub fn validation_range(n_months: usize, lag: usize, cfg: &TrainConfig) -> Range<usize> {
    let (n_train, n_val) = split(n_months - lag, cfg);
    n_train..n_train + n_val
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_holds_out_a_trailing_fraction() {
        let cfg = TrainConfig::default();
        assert_eq!(split(100, &cfg), (80, 20));
        assert_eq!(validation_range(103, 3, &cfg), 80..100);
    }

    #[test]
    fn raw_data_is_rejected() {
        let ds = AnomalyDataset::zeros(0, 200, Provenance::Raw);
        assert!(train(&ds, 1, &TrainConfig { hidden: vec![4], ..Default::default() }).is_err());
    }

    #[test]
    fn too_few_months_is_rejected() {
        let ds = AnomalyDataset::zeros(0, 40, Provenance::Anomaly);
        let cfg = TrainConfig { hidden: vec![4], batch_size: 32, ..Default::default() };
        assert!(matches!(train(&ds, 9, &cfg), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn lr_schedule_is_exponential_in_epochs() {
        let cfg = TrainConfig { initial_lr: 1e-3, lr_decay_per_epoch: 0.5, ..Default::default() };
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert!((cfg.lr_at(2) - 1e-3 * (-1.0f64).exp()).abs() < 1e-18);
    }
}
