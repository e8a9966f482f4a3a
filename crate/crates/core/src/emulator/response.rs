//! Linear-response probes of a trained emulator.

use crate::dataset::{input_index, N_INPUTS};
use crate::error::{invalid, Result};

use super::MlpModel;

/// Response of `model` per unit of an input perturbation `delta` on one
/// channel, by central difference about the zero-anomaly state:
/// `(f(+h·δ) − f(−h·δ)) / 2h`. Channel-major `[3 × n_vertices]`.
pub fn unit_response(model: &MlpModel, input: &str, delta: &[f64], h: f64) -> Result<Vec<f64>> {
    let c = input_index(input).ok_or_else(|| invalid(format!("`{input}` is not an input channel")))?;
    let nv = model.n_inputs() / N_INPUTS;
    if delta.len() != nv {
        return Err(invalid(format!("perturbation has {} values, model expects {nv}", delta.len())));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(invalid("probe amplitude must be positive"));
    }
    let mut plus = vec![0.0; model.n_inputs()];
    let mut minus = plus.clone();
    for (v, d) in delta.iter().enumerate() {
        plus[c * nv + v] = h * d;
        minus[c * nv + v] = -h * d;
    }
    let (a, b) = (model.forward(&plus)?, model.forward(&minus)?);
    Ok(a.iter().zip(&b).map(|(p, m)| (p - m) / (2.0 * h)).collect())
}

/// Area-weighted centered pattern correlation. `None` when either field is
/// constant under the weights.
pub fn pattern_correlation(a: &[f64], b: &[f64], weights: &[f64]) -> Option<f64> {
    assert!(a.len() == b.len() && a.len() == weights.len(), "pattern lengths differ");
    let w: f64 = weights.iter().sum();
    let ma = a.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() / w;
    let mb = b.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() / w;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for ((x, y), w) in a.iter().zip(b).zip(weights) {
        let (dx, dy) = (x - ma, y - mb);
        sab += w * dx * dy;
        saa += w * dx * dx;
        sbb += w * dy * dy;
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}
