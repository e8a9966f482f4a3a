//! Region-masked perturbations of the input radiation anomalies and the
//! lag-aggregated before/after response of an emulator suite.
//!
//! Summing the lagged emulator outputs over `τ ≤ 12 · duration_years` is a
//! discrete step-response integral: each lag model estimates the response
//! `τ` months after a forcing, and a sustained forcing is their sum.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{input_ids, input_index, AnomalyDataset, N_INPUTS};
use crate::emulator::LagSuite;
use crate::error::{invalid, invalid_field, Error, Result};
use crate::grid::{angular_distance, region_mask_with, IcosahedralGrid, RegionCatalog, RegionSpec};

const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbMode {
    /// `x + value` (W m⁻²)
    Add,
    /// `x · value`
    Scale,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub mode: PerturbMode,
    pub value: f64,
}

impl Perturbation {
    pub fn is_identity(&self) -> bool {
        match self.mode {
            PerturbMode::Add => self.value == 0.0,
            PerturbMode::Scale => self.value == 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionScenario {
    pub region: RegionSpec,
    pub duration_years: u32,
    /// Input channel id → perturbation.
    pub perturbations: BTreeMap<String, Perturbation>,
    /// Month index of the baseline input field.
    #[serde(default)]
    pub reference_time: usize,
    /// Lags to aggregate; defaults to every suite lag `≤ 12 · duration_years`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lag_set: Option<Vec<usize>>,
    #[serde(default)]
    pub aggregation: Aggregation,
    /// Use an all-zero (climatological) baseline instead of the field at
    /// `reference_time`.
    #[serde(default)]
    pub climatological_baseline: bool,
    /// Width of an optional cosine taper outside the region, in km.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taper_km: Option<f64>,
}

impl InterventionScenario {
    /// Checks the scenario on its own; errors carry the offending field path.
    pub fn validate(&self) -> Result<()> {
        self.region.validate().map_err(|e| invalid_field("region", e.to_string()))?;
        if self.duration_years == 0 {
            return Err(invalid_field("duration_years", "must be at least 1"));
        }
        if self.perturbations.is_empty() {
            return Err(invalid_field("perturbations", "at least one perturbation is required"));
        }
        for (id, p) in &self.perturbations {
            let path = format!("perturbations.{id}");
            if input_index(id).is_none() {
                let known: Vec<&str> = input_ids().collect();
                return Err(invalid_field(path, format!("`{id}` is not an input channel (expected one of {})", known.join(", "))));
            }
            if !p.value.is_finite() {
                return Err(invalid_field(format!("{path}.value"), "must be finite"));
            }
        }
        if let Some(lags) = &self.lag_set {
            if lags.is_empty() {
                return Err(invalid_field("lag_set", "must not be empty"));
            }
            let mut sorted = lags.clone();
            sorted.sort_unstable();
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return Err(invalid_field("lag_set", "contains duplicate lags"));
            }
        }
        if let Some(w) = self.taper_km {
            if !(w.is_finite() && w > 0.0) {
                return Err(invalid_field("taper_km", "must be positive"));
            }
        }
        Ok(())
    }

    /// Lags to aggregate, in increasing order.
    pub fn resolve_lags(&self, suite: &LagSuite) -> Result<Vec<usize>> {
        let available = suite.lags();
        match &self.lag_set {
            Some(lags) => {
                let mut lags = lags.clone();
                lags.sort_unstable();
                if let Some(missing) = lags.iter().find(|l| !available.contains(l)) {
                    return Err(Error::NotFound(format!("lag {missing} is not in the suite {available:?}")));
                }
                Ok(lags)
            }
            None => {
                let horizon = 12 * self.duration_years as usize;
                let lags: Vec<usize> = available.into_iter().filter(|&l| l <= horizon).collect();
                if lags.is_empty() {
                    return Err(Error::NotFound(format!("no suite lag within {horizon} months")));
                }
                Ok(lags)
            }
        }
    }

    /// Per-vertex forcing weights: 1 inside the region, a cosine taper of
    /// `taper_km` outside it when configured, else 0.
    pub fn forcing_weights(&self, grid: &IcosahedralGrid, catalog: &RegionCatalog) -> Result<Vec<f64>> {
        let mask = region_mask_with(grid, &self.region, catalog).map_err(|e| match e {
            Error::NotFound(msg) => invalid_field("region.name", msg),
            other => other,
        })?;
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyRegion(format!("region selects no vertex at grid level {}", grid.level())));
        }
        let Some(width) = self.taper_km else {
            return Ok(mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect());
        };
        let inside: Vec<usize> = (0..grid.len()).filter(|&v| mask[v]).collect();
        let pts = grid.unit_xyz();
        Ok((0..grid.len())
            .map(|v| {
                if mask[v] {
                    return 1.0;
                }
                let d = inside.iter().map(|&u| angular_distance(pts[v], pts[u])).fold(f64::INFINITY, f64::min)
                    * EARTH_RADIUS_KM;
                if d < width {
                    0.5 * (1.0 + (std::f64::consts::PI * d / width).cos())
                } else {
                    0.0
                }
            })
            .collect())
    }

    /// Baseline input `[6 × n_vertices]` for this scenario.
    pub fn baseline(&self, ds: &AnomalyDataset) -> Result<Vec<f64>> {
        if self.climatological_baseline {
            return Ok(vec![0.0; N_INPUTS * ds.n_vertices()]);
        }
        if self.reference_time >= ds.n_months {
            return Err(invalid_field(
                "reference_time",
                format!("month {} is outside the {}-month record", self.reference_time, ds.n_months),
            ));
        }
        Ok(ds.input_frame(self.reference_time))
    }
}

/// Applies the scenario's perturbations inside `mask`.
pub fn apply_perturbation(x: &[f64], scenario: &InterventionScenario, mask: &[bool]) -> Result<Vec<f64>> {
    let w: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    apply_weighted(x, scenario, &w)
}

/// Like [`apply_perturbation`] with fractional forcing weights: `add` adds
/// `w · value`, `scale` multiplies by `1 + w · (value − 1)`. Weights of
/// exactly 0 and 1 reproduce the masked definition bit for bit.
pub fn apply_weighted(x: &[f64], scenario: &InterventionScenario, weights: &[f64]) -> Result<Vec<f64>> {
    let nv = weights.len();
    if x.len() != N_INPUTS * nv {
        return Err(invalid(format!("input has {} values, expected {} for {nv} vertices", x.len(), N_INPUTS * nv)));
    }
    let mut out = x.to_vec();
    for (id, p) in &scenario.perturbations {
        let c = input_index(id).ok_or_else(|| invalid_field(format!("perturbations.{id}"), "not an input channel"))?;
        if !p.value.is_finite() {
            return Err(invalid_field(format!("perturbations.{id}.value"), "must be finite"));
        }
        if p.is_identity() {
            continue;
        }
        for (v, &w) in weights.iter().enumerate() {
            let o = &mut out[c * nv + v];
            if w == 0.0 {
                continue;
            }
            *o = match (p.mode, w == 1.0) {
                (PerturbMode::Add, true) => *o + p.value,
                (PerturbMode::Scale, true) => *o * p.value,
                (PerturbMode::Add, false) => *o + w * p.value,
                (PerturbMode::Scale, false) => *o * (1.0 + w * (p.value - 1.0)),
            };
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagComponent {
    pub lag: usize,
    pub before: Vec<f64>,
    pub after: Vec<f64>,
}

/// Aggregated outputs `[3 × n_vertices]` without and with the intervention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseBundle {
    pub lags: Vec<usize>,
    pub aggregation: Aggregation,
    pub before: Vec<f64>,
    pub after: Vec<f64>,
    /// `after − before`, element by element.
    pub diff: Vec<f64>,
    pub per_lag: Vec<LagComponent>,
}

/// Runs every selected lag model on the baseline and the perturbed input and
/// aggregates the outputs in increasing lag order.
pub fn aggregate_response(
    suite: &LagSuite,
    scenario: &InterventionScenario,
    baseline_x: &[f64],
    weights: &[f64],
) -> Result<ResponseBundle> {
    let lags = scenario.resolve_lags(suite)?;
    let perturbed = apply_weighted(baseline_x, scenario, weights)?;
    let mut per_lag = Vec::with_capacity(lags.len());
    for &lag in &lags {
        let m = suite.get(lag).expect("resolved");
        per_lag.push(LagComponent { lag, before: m.forward(baseline_x)?, after: m.forward(&perturbed)? });
    }
    let n_out = per_lag[0].before.len();
    let mut before = vec![0.0; n_out];
    let mut after = vec![0.0; n_out];
    for c in &per_lag {
        for i in 0..n_out {
            before[i] += c.before[i];
            after[i] += c.after[i];
        }
    }
    if scenario.aggregation == Aggregation::Mean {
        let k = per_lag.len() as f64;
        before.iter_mut().chain(after.iter_mut()).for_each(|v| *v /= k);
    }
    let diff = after.iter().zip(&before).map(|(a, b)| a - b).collect();
    Ok(ResponseBundle { lags, aggregation: scenario.aggregation, before, after, diff, per_lag })
}

/// Everything one scenario run produces before scoring and risk assessment.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRun {
    pub baseline: Vec<f64>,
    pub perturbed: Vec<f64>,
    pub weights: Vec<f64>,
    pub bundle: ResponseBundle,
}

pub fn run_scenario(
    ds: &AnomalyDataset,
    suite: &LagSuite,
    grid: &IcosahedralGrid,
    catalog: &RegionCatalog,
    scenario: &InterventionScenario,
) -> Result<ScenarioRun> {
    scenario.validate()?;
    suite.check_dataset(ds)?;
    if grid.level() != ds.grid_level {
        return Err(Error::Shape(format!("grid level {} but dataset level {}", grid.level(), ds.grid_level)));
    }
    let weights = scenario.forcing_weights(grid, catalog)?;
    let baseline = scenario.baseline(ds)?;
    let bundle = aggregate_response(suite, scenario, &baseline, &weights)?;
    let perturbed = apply_weighted(&baseline, scenario, &weights)?;
    Ok(ScenarioRun { baseline, perturbed, weights, bundle })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;

    fn scenario(json: &str) -> InterventionScenario {
        serde_json::from_str(json).unwrap()
    }

    #[test]
    fn json_defaults_and_round_trip() {
        let s = scenario(
            r#"{"region":{"kind":"named","name":"SEP"},"duration_years":2,
                "perturbations":{"sw_cre_toa":{"mode":"add","value":-10}}}"#,
        );
        assert_eq!(s.aggregation, Aggregation::Sum);
        assert_eq!(s.reference_time, 0);
        assert!(s.lag_set.is_none() && !s.climatological_baseline);
        let back: InterventionScenario = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn unknown_channel_reports_its_path() {
        let s = scenario(
            r#"{"region":{"kind":"named","name":"SEP"},"duration_years":1,
                "perturbations":{"tas":{"mode":"add","value":1}}}"#,
        );
        match s.validate() {
            Err(Error::InvalidField { path, .. }) => assert_eq!(path, "perturbations.tas"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_perturbations_and_zero_duration_are_rejected() {
        let s = scenario(r#"{"region":{"kind":"named","name":"SEP"},"duration_years":0,"perturbations":{}}"#);
        assert!(s.validate().is_err());
    }

    #[test]
    fn taper_decays_from_one_to_zero() {
        let g = build_grid(3).unwrap();
        let mut s = scenario(
            r#"{"region":{"kind":"named","name":"SEP"},"duration_years":1,
                "perturbations":{"sw_cre_toa":{"mode":"add","value":-10}},"taper_km":1500}"#,
        );
        let cat = RegionCatalog::default();
        let w = s.forcing_weights(&g, &cat).unwrap();
        s.taper_km = None;
        let hard = s.forcing_weights(&g, &cat).unwrap();
        assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(w.iter().zip(&hard).all(|(a, b)| a >= b));
        assert!(w.iter().any(|&v| v > 0.0 && v < 1.0));
        // vertices far away (opposite hemisphere) get nothing
        let far = g.vertices().iter().position(|p| p.lat > 45.0).unwrap();
        assert_eq!(w[far], 0.0);
    }

    #[test]
    fn empty_region_is_reported() {
        let g = build_grid(0).unwrap();
        let s = scenario(
            r#"{"region":{"kind":"latlon_box","box":{"lat_min":10,"lat_max":11,"lon_min":5,"lon_max":6}},
                "duration_years":1,"perturbations":{"sw_cre_toa":{"mode":"add","value":1}}}"#,
        );
        assert!(matches!(s.forcing_weights(&g, &RegionCatalog::default()), Err(Error::EmptyRegion(_))));
    }
}
