//! Tipping-point risk flags: percent change of the area-weighted site means
//! of the aggregated outputs, tested against per-site rules.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::N_OUTPUTS;
use crate::error::{invalid, invalid_field, Error, Result};
use crate::grid::{IcosahedralGrid, LatLon};
use crate::intervention::ResponseBundle;

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const SITES_SCHEMA_VERSION: u32 = 1;

/// Shipped default configuration; every rule in it is a placeholder.
pub const DEFAULT_SITES_JSON: &str = include_str!("../config/tipping_sites.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variable {
    Psl,
    Pr,
    Tas,
}

impl Variable {
    pub const ALL: [Variable; N_OUTPUTS] = [Variable::Psl, Variable::Pr, Variable::Tas];

    /// Position among the output channels.
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = "<")]
    Lt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub variable: Variable,
    pub comparator: Comparator,
    pub threshold_percent: f64,
}

impl Rule {
    /// Strict comparison: a change equal to the threshold never fires.
    pub fn fires(&self, change: &PercentChange) -> bool {
        let v = change.get(self.variable);
        match self.comparator {
            Comparator::Gt => v > self.threshold_percent,
            Comparator::Lt => v < self.threshold_percent,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    #[default]
    Any,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TippingSite {
    pub id: String,
    pub display_name: String,
    pub center: LatLon,
    pub radius_km: f64,
    pub rules: Vec<Rule>,
    #[serde(default)]
    pub combine: Combine,
}

impl TippingSite {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(invalid("site id is empty"));
        }
        let c = self.center;
        if !(c.lat.is_finite() && c.lon.is_finite() && c.lat.abs() <= 90.0) {
            return Err(invalid(format!("site `{}` has an invalid centre", self.id)));
        }
        if !(self.radius_km.is_finite() && self.radius_km > 0.0) {
            return Err(invalid(format!("site `{}` radius must be positive", self.id)));
        }
        if self.rules.is_empty() {
            return Err(invalid(format!("site `{}` has no rules", self.id)));
        }
        if self.rules.iter().any(|r| !r.threshold_percent.is_finite()) {
            return Err(invalid(format!("site `{}` has a non-finite threshold", self.id)));
        }
        Ok(())
    }

    /// Vertices within `radius_km` great-circle distance of the centre.
    pub fn membership(&self, grid: &IcosahedralGrid) -> Vec<bool> {
        grid.vertices().iter().map(|&v| haversine_km(self.center, v) <= self.radius_km).collect()
    }
}

/// Denominator floors guarding near-zero baselines, in output units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Floors {
    pub psl: f64,
    pub pr: f64,
    pub tas: f64,
}

impl Default for Floors {
    fn default() -> Self {
        Self { psl: 10.0, pr: 0.05, tas: 0.05 }
    }
}

impl Floors {
    pub fn get(&self, v: Variable) -> f64 {
        match v {
            Variable::Psl => self.psl,
            Variable::Pr => self.pr,
            Variable::Tas => self.tas,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SitesConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
    #[serde(default)]
    pub floors: Floors,
    pub sites: Vec<TippingSite>,
}

impl SitesConfig {
    pub fn default_sites() -> Self {
        serde_json::from_str(DEFAULT_SITES_JSON).expect("shipped site config parses")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| invalid_field(e.path().to_string(), e.inner().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SITES_SCHEMA_VERSION {
            return Err(Error::Format(format!("sites schema version {}", self.schema_version)));
        }
        let f = self.floors;
        if [f.psl, f.pr, f.tas].iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(invalid("denominator floors must be positive"));
        }
        for (i, s) in self.sites.iter().enumerate() {
            s.validate()?;
            if self.sites[..i].iter().any(|o| o.id == s.id) {
                return Err(invalid(format!("duplicate site id `{}`", s.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PercentChange {
    pub psl: f64,
    pub pr: f64,
    pub tas: f64,
}

impl PercentChange {
    pub fn get(&self, v: Variable) -> f64 {
        match v {
            Variable::Psl => self.psl,
            Variable::Pr => self.pr,
            Variable::Tas => self.tas,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteAssessment {
    pub site_id: String,
    pub percent_change: PercentChange,
    pub at_risk: bool,
    /// Indices into the site's rule list.
    pub triggered_rules: Vec<usize>,
}

/// Great-circle distance on a 6371 km sphere.
pub fn haversine_km(a: LatLon, b: LatLon) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Percent change of the area-weighted site means, `100 (A − B) / max(|B|, ε)`.
pub fn site_metrics(bundle: &ResponseBundle, site: &TippingSite, grid: &IcosahedralGrid, floors: &Floors) -> Result<PercentChange> {
    let nv = grid.len();
    if bundle.before.len() != N_OUTPUTS * nv || bundle.after.len() != N_OUTPUTS * nv {
        return Err(Error::Shape(format!(
            "response has {} values, grid level {} needs {}",
            bundle.before.len(),
            grid.level(),
            N_OUTPUTS * nv
        )));
    }
    let member = site.membership(grid);
    let w = grid.area_weights();
    let total: f64 = (0..nv).filter(|&v| member[v]).map(|v| w[v]).sum();
    if !member.iter().any(|&m| m) {
        return Err(Error::EmptySite { site: site.id.clone(), level: grid.level() });
    }
    let mean = |field: &[f64], c: usize| -> f64 {
        (0..nv).filter(|&v| member[v]).map(|v| w[v] * field[c * nv + v]).sum::<f64>() / total
    };
    let pct = |v: Variable| {
        let b = mean(&bundle.before, v.index());
        let a = mean(&bundle.after, v.index());
        100.0 * (a - b) / b.abs().max(floors.get(v))
    };
    Ok(PercentChange { psl: pct(Variable::Psl), pr: pct(Variable::Pr), tas: pct(Variable::Tas) })
}

/// Evaluates every site in order.
pub fn assess(bundle: &ResponseBundle, cfg: &SitesConfig, grid: &IcosahedralGrid) -> Result<Vec<SiteAssessment>> {
    cfg.sites
        .iter()
        .map(|site| {
            let change = site_metrics(bundle, site, grid, &cfg.floors)?;
            let triggered: Vec<usize> = (0..site.rules.len()).filter(|&i| site.rules[i].fires(&change)).collect();
            let at_risk = match site.combine {
                Combine::Any => !triggered.is_empty(),
                Combine::All => triggered.len() == site.rules.len(),
            };
            Ok(SiteAssessment { site_id: site.id.clone(), percent_change: change, at_risk, triggered_rules: triggered })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;

    #[test]
    fn shipped_config_is_valid_with_seven_sites() {
        let cfg = SitesConfig::default_sites();
        cfg.validate().unwrap();
        assert_eq!(cfg.sites.len(), 7);
        assert_eq!(cfg.floors, Floors::default());
        assert!(cfg.note.contains("PLACEHOLDER"));
    }

    #[test]
    fn default_sites_are_nonempty_from_level_two() {
        let cfg = SitesConfig::default_sites();
        for level in 2..=5 {
            let g = build_grid(level).unwrap();
            for s in &cfg.sites {
                assert!(s.membership(&g).iter().any(|&m| m), "{} empty at L{level}", s.id);
            }
        }
    }

    #[test]
    fn comparator_serializes_as_symbol() {
        let r: Rule = serde_json::from_str(r#"{"variable":"pr","comparator":"<","threshold_percent":-5}"#).unwrap();
        assert_eq!(r.comparator, Comparator::Lt);
        assert!(serde_json::to_string(&r).unwrap().contains(r#""comparator":"<""#));
    }

    #[test]
    fn bad_config_reports_path() {
        let text = r#"{"schema_version":1,"sites":[{"id":"a","display_name":"A","center":{"lat":0,"lon":0},
            "radius_km":100,"rules":[{"variable":"wind","comparator":">","threshold_percent":1}]}]}"#;
        match SitesConfig::from_json(text) {
            Err(Error::InvalidField { path, .. }) => assert_eq!(path, "sites[0].rules[0].variable"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn haversine_quarter_meridian() {
        let d = haversine_km(LatLon { lat: 0.0, lon: 0.0 }, LatLon { lat: 90.0, lon: 0.0 });
        assert!((d - EARTH_RADIUS_KM * std::f64::consts::FRAC_PI_2).abs() < 1e-9);
    }
}
