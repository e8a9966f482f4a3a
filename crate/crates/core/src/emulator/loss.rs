//! Mean-squared error plus soft conservation penalties.
//!
//! The penalty forms are stand-ins for the named budgets: non-negative total
//! precipitation, zero global-mean precipitation (moisture) and sea-level
//! pressure (mass) anomalies, and global-mean temperature tied to global-mean
//! TOA net radiation (energy).

use crate::dataset::{input_index, output_index};
use crate::error::{invalid, Result};

use super::mlp::LossComponents;
use super::TrainConfig;

/// Fixed per-grid quantities the penalties need.
#[derive(Debug, Clone, Copy)]
pub struct LossContext<'a> {
    pub area_weights: &'a [f64],
    /// Climatological precipitation (mm day⁻¹) that anomalies are added to.
    pub pr_climatology: &'a [f64],
    /// Per-output-channel std; the mse is taken in standardized units.
    pub output_std: &'a [f64],
}

impl LossContext<'_> {
    fn check(&self, pred: &[f64], target: &[f64], input: &[f64]) -> Result<usize> {
        let nv = self.area_weights.len();
        if pred.len() != 3 * nv || target.len() != 3 * nv || input.len() != 6 * nv {
            return Err(invalid(format!(
                "loss shapes: pred {}, target {}, input {} for {nv} vertices",
                pred.len(),
                target.len(),
                input.len()
            )));
        }
        if self.pr_climatology.len() != nv || self.output_std.len() != 3 {
            return Err(invalid("loss context does not match the grid"));
        }
        Ok(nv)
    }
}

fn weighted(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

pub fn physics_loss(
    pred: &[f64],
    target: &[f64],
    input: &[f64],
    ctx: &LossContext,
    cfg: &TrainConfig,
) -> Result<LossComponents> {
    loss_and_grad(pred, target, input, ctx, cfg, None)
}

/// Loss components for one sample; when `grad` is given, the gradient of
/// `total` with respect to the physical prediction is accumulated into it.
pub(crate) fn loss_and_grad(
    pred: &[f64],
    target: &[f64],
    input: &[f64],
    ctx: &LossContext,
    cfg: &TrainConfig,
    grad: Option<&mut [f64]>,
) -> Result<LossComponents> {
    let nv = ctx.check(pred, target, input)?;
    let w = ctx.area_weights;
    let block = |c: usize| c * nv..(c + 1) * nv;
    let (psl, pr, tas) = (
        block(output_index("psl").expect("canonical")),
        block(output_index("pr").expect("canonical")),
        block(output_index("tas").expect("canonical")),
    );

    let n_out = pred.len() as f64;
    let mut mse = 0.0;
    for (i, (p, t)) in pred.iter().zip(target).enumerate() {
        let d = (p - t) / ctx.output_std[i / nv];
        mse += d * d;
    }
    mse /= n_out;

    let deficit: Vec<f64> = pred[pr.clone()]
        .iter()
        .zip(ctx.pr_climatology)
        .map(|(p, c)| (-(c + p)).max(0.0))
        .collect();
    let c_precip = deficit.iter().map(|d| d * d).sum::<f64>() / nv as f64;

    let mass = weighted(w, &pred[psl.clone()]);
    let moisture = weighted(w, &pred[pr.clone()]);
    let net_toa: f64 = ["sw_cre_toa", "lw_cre_toa", "net_clearsky_toa"]
        .iter()
        .map(|id| weighted(w, &input[block(input_index(id).expect("canonical"))]))
        .sum();
    let energy = weighted(w, &pred[tas.clone()]) - cfg.c_energy * net_toa;

    let c = LossComponents {
        mse,
        c_precip,
        c_moisture: moisture * moisture,
        c_mass: mass * mass,
        c_energy: energy * energy,
        total: 0.0,
    };
    let total = c.mse
        + cfg.lambda_precip * c.c_precip
        + cfg.lambda_moisture * c.c_moisture
        + cfg.lambda_mass * c.c_mass
        + cfg.lambda_energy * c.c_energy;

    if let Some(g) = grad {
        for (i, (p, t)) in pred.iter().zip(target).enumerate() {
            let s = ctx.output_std[i / nv];
            g[i] += 2.0 * (p - t) / (s * s * n_out);
        }
        for v in 0..nv {
            g[pr.start + v] += -2.0 * cfg.lambda_precip * deficit[v] / nv as f64
                + 2.0 * cfg.lambda_moisture * moisture * w[v];
            g[psl.start + v] += 2.0 * cfg.lambda_mass * mass * w[v];
            g[tas.start + v] += 2.0 * cfg.lambda_energy * energy * w[v];
        }
    }
    Ok(LossComponents { total, ..c })
}
