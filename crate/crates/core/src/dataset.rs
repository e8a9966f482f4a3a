//! Multi-channel monthly fields on an icosahedral grid.
//!
//! On disk a dataset is a directory holding `meta.json` and one raw
//! little-endian `f32` file per channel, row-major `[month][vertex]`.
//! Real archives enter through [`crate::grid::resample_latlon`]; this module
//! also generates synthetic data with a planted lagged response.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{build_grid, vertex_count, IcosahedralGrid, MAX_LEVEL};

pub const SCHEMA_VERSION: u32 = 1;
pub const N_INPUTS: usize = 6;
pub const N_OUTPUTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Input,
    Output,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldChannel {
    pub id: String,
    pub role: Role,
    pub units: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub long_name: String,
}

const CANONICAL: [(&str, Role, &str, &str); N_INPUTS + N_OUTPUTS] = [
    ("sw_cre_toa", Role::Input, "W m-2", "shortwave cloud radiative effect, top of atmosphere"),
    ("lw_cre_toa", Role::Input, "W m-2", "longwave cloud radiative effect, top of atmosphere"),
    ("sw_cre_surf", Role::Input, "W m-2", "shortwave cloud radiative effect, surface"),
    ("lw_cre_surf", Role::Input, "W m-2", "longwave cloud radiative effect, surface"),
    ("net_clearsky_toa", Role::Input, "W m-2", "net clear-sky radiation, top of atmosphere"),
    ("net_clearsky_surf", Role::Input, "W m-2", "net clear-sky radiation, surface"),
    ("psl", Role::Output, "Pa", "sea-level pressure"),
    ("pr", Role::Output, "mm day-1", "precipitation"),
    ("tas", Role::Output, "K", "near-surface air temperature"),
];

/// The six input and three output channels, in canonical order.
pub fn canonical_channels() -> Vec<FieldChannel> {
    CANONICAL
        .iter()
        .map(|&(id, role, units, long_name)| FieldChannel {
            id: id.into(),
            role,
            units: units.into(),
            long_name: long_name.into(),
        })
        .collect()
}

pub fn input_ids() -> impl Iterator<Item = &'static str> {
    CANONICAL[..N_INPUTS].iter().map(|c| c.0)
}

pub fn output_ids() -> impl Iterator<Item = &'static str> {
    CANONICAL[N_INPUTS..].iter().map(|c| c.0)
}

/// Position of a channel in the canonical order (inputs 0..6, outputs 6..9).
pub fn channel_index(id: &str) -> Option<usize> {
    CANONICAL.iter().position(|c| c.0 == id)
}

pub fn input_index(id: &str) -> Option<usize> {
    channel_index(id).filter(|&i| i < N_INPUTS)
}

pub fn output_index(id: &str) -> Option<usize> {
    channel_index(id).filter(|&i| i >= N_INPUTS).map(|i| i - N_INPUTS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Raw,
    Anomaly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyDataset {
    pub grid_level: usize,
    pub n_months: usize,
    pub start_year: i32,
    pub start_month: u32,
    pub channels: Vec<FieldChannel>,
    /// One `[n_months × n_vertices]` array per channel, canonical order.
    pub data: Vec<Vec<f32>>,
    pub provenance: Provenance,
    /// Applied preprocessing stages with their parameters.
    pub pipeline: Vec<serde_json::Value>,
    /// Time-mean of the raw precipitation field, carried through preprocessing
    /// so the non-negative-precipitation constraint can be evaluated.
    pub pr_climatology: Option<Vec<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    schema_version: u32,
    grid_level: usize,
    n_months: usize,
    start_year: i32,
    start_month: u32,
    channels: Vec<FieldChannel>,
    provenance: Provenance,
    pipeline: Vec<serde_json::Value>,
    #[serde(default)]
    pr_climatology: bool,
}

impl AnomalyDataset {
    /// An all-zero dataset with the canonical channels.
    pub fn zeros(grid_level: usize, n_months: usize, provenance: Provenance) -> Self {
        let nv = vertex_count(grid_level);
        Self {
            grid_level,
            n_months,
            start_year: 1850,
            start_month: 1,
            channels: canonical_channels(),
            data: vec![vec![0.0; n_months * nv]; N_INPUTS + N_OUTPUTS],
            provenance,
            pipeline: Vec::new(),
            pr_climatology: None,
        }
    }

    pub fn n_vertices(&self) -> usize {
        vertex_count(self.grid_level)
    }

    pub fn channel(&self, id: &str) -> Option<&[f32]> {
        channel_index(id).map(|i| self.data[i].as_slice())
    }

    /// One month of one channel.
    pub fn frame(&self, channel: usize, t: usize) -> &[f32] {
        let nv = self.n_vertices();
        &self.data[channel][t * nv..(t + 1) * nv]
    }

    /// The six input fields at month `t`, flattened channel-major.
    pub fn input_frame(&self, t: usize) -> Vec<f64> {
        (0..N_INPUTS).flat_map(|c| self.frame(c, t).iter().map(|&v| v as f64)).collect()
    }

    /// The three output fields at month `t`, flattened channel-major.
    pub fn output_frame(&self, t: usize) -> Vec<f64> {
        (N_INPUTS..N_INPUTS + N_OUTPUTS)
            .flat_map(|c| self.frame(c, t).iter().map(|&v| v as f64))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_level > MAX_LEVEL {
            return Err(invalid(format!("grid level {} out of range", self.grid_level)));
        }
        if !(1..=12).contains(&self.start_month) {
            return Err(invalid(format!("start month {} out of range", self.start_month)));
        }
        check_channels(&self.channels)?;
        let expect = self.n_months * self.n_vertices();
        for (c, d) in self.channels.iter().zip(&self.data) {
            if d.len() != expect {
                return Err(Error::Shape(format!(
                    "channel {} has {} values, expected {expect}",
                    c.id,
                    d.len()
                )));
            }
            if d.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("channel {} contains non-finite values", c.id)));
            }
        }
        if let Some(clim) = &self.pr_climatology {
            if clim.len() != self.n_vertices() {
                return Err(Error::Shape("precipitation climatology length".into()));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let meta = Meta {
            schema_version: SCHEMA_VERSION,
            grid_level: self.grid_level,
            n_months: self.n_months,
            start_year: self.start_year,
            start_month: self.start_month,
            channels: self.channels.clone(),
            provenance: self.provenance,
            pipeline: self.pipeline.clone(),
            pr_climatology: self.pr_climatology.is_some(),
        };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
        for (c, d) in self.channels.iter().zip(&self.data) {
            fs::write(dir.join(format!("{}.f32", c.id)), f32_bytes(d))?;
        }
        if let Some(clim) = &self.pr_climatology {
            fs::write(dir.join("pr_climatology.f32"), f32_bytes(clim))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_text = fs::read_to_string(dir.join("meta.json"))?;
        let meta: Meta = serde_json::from_str(&meta_text).map_err(|e| Error::Format(format!("meta.json: {e}")))?;
        if meta.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "dataset schema version {}, expected {SCHEMA_VERSION}",
                meta.schema_version
            )));
        }
        check_channels(&meta.channels)?;
        if meta.grid_level > MAX_LEVEL {
            return Err(Error::Format(format!("grid level {} out of range", meta.grid_level)));
        }
        let nv = vertex_count(meta.grid_level);
        let expect = meta.n_months * nv;
        let read = |name: &str, n: usize| -> Result<Vec<f32>> {
            let bytes = fs::read(dir.join(name))?;
            if bytes.len() != n * 4 {
                return Err(Error::CorruptFile(format!(
                    "{name}: {} bytes, expected {} ({n} float32 values)",
                    bytes.len(),
                    n * 4
                )));
            }
            Ok(bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect())
        };
        let data = meta
            .channels
            .iter()
            .map(|c| read(&format!("{}.f32", c.id), expect))
            .collect::<Result<Vec<_>>>()?;
        let pr_climatology = if meta.pr_climatology {
            Some(read("pr_climatology.f32", nv)?)
        } else {
            None
        };
        let ds = Self {
            grid_level: meta.grid_level,
            n_months: meta.n_months,
            start_year: meta.start_year,
            start_month: meta.start_month,
            channels: meta.channels,
            data,
            provenance: meta.provenance,
            pipeline: meta.pipeline,
            pr_climatology,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn f32_bytes(d: &[f32]) -> Vec<u8> {
    d.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Rejects any channel list that is not exactly the canonical 6 + 3 in order.
fn check_channels(channels: &[FieldChannel]) -> Result<()> {
    for (id, role, _, _) in CANONICAL {
        match channels.iter().find(|c| c.id == id) {
            None => {
                let kind = if role == Role::Input { "input" } else { "output" };
                return Err(Error::Format(format!("missing {kind} channel `{id}`")));
            }
            Some(c) if c.role != role => {
                return Err(Error::Format(format!("channel `{id}` has the wrong role")));
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = channels.iter().find(|c| channel_index(&c.id).is_none()) {
        return Err(Error::Format(format!("unknown channel `{}`", extra.id)));
    }
    if channels.len() != CANONICAL.len() || channels.iter().zip(CANONICAL).any(|(c, k)| c.id != k.0) {
        return Err(Error::Format("channels are not in canonical order".into()));
    }
    Ok(())
}

/// Per-channel generator parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSynth {
    /// Amplitude of the 12-month cycle; scaled by `1 + 0.5·sin(lat)` in space.
    pub seasonal_amplitude: f64,
    /// Coefficients `c0..c3` of the secular trend in centuries since start.
    pub trend: [f64; 4],
    /// Lag-one autocorrelation of the monthly red noise.
    pub rho: f64,
    /// Stationary standard deviation of the red noise.
    pub sigma: f64,
}

/// One planted gain: `output(t) += gain · smooth(noise_input)(t − lag)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedGain {
    pub lag: usize,
    pub output: String,
    pub input: String,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_months: usize,
    pub grid_level: usize,
    pub start_year: i32,
    pub start_month: u32,
    /// Channel id → generator parameters; absent channels are identically zero.
    pub channels: BTreeMap<String, ChannelSynth>,
    pub planted: Vec<PlantedGain>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_months: 1200,
            grid_level: 3,
            start_year: 1850,
            start_month: 1,
            channels: BTreeMap::new(),
            planted: Vec::new(),
        }
    }
}

impl SyntheticSpec {
    /// An ESM-like configuration: seasonal cycles, cubic trends, and red noise
    /// on every channel, with `planted` as the lagged response operator.
    pub fn esm_like(seed: u64, n_months: usize, grid_level: usize, planted: Vec<PlantedGain>) -> Self {
        let mut channels = BTreeMap::new();
        let inputs = [
            ("sw_cre_toa", 30.0, [-45.0, -2.0, 1.0, 0.5], 8.0),
            ("lw_cre_toa", 10.0, [25.0, 1.0, -0.5, 0.2], 5.0),
            ("sw_cre_surf", 35.0, [-50.0, -2.5, 1.2, 0.4], 9.0),
            ("lw_cre_surf", 8.0, [30.0, 0.8, 0.3, -0.2], 4.0),
            ("net_clearsky_toa", 40.0, [60.0, 1.5, -0.8, 0.3], 6.0),
            ("net_clearsky_surf", 45.0, [110.0, 2.0, 0.5, -0.5], 7.0),
        ];
        for (id, amp, trend, sigma) in inputs {
            channels.insert(id.to_string(), ChannelSynth { seasonal_amplitude: amp, trend, rho: 0.5, sigma });
        }
        let outputs = [
            ("psl", 300.0, [101_325.0, 20.0, -10.0, 5.0], 10.0),
            ("pr", 1.0, [2.8, 0.1, -0.05, 0.02], 0.1),
            ("tas", 8.0, [287.0, 0.8, 0.6, 0.3], 0.1),
        ];
        for (id, amp, trend, sigma) in outputs {
            channels.insert(id.to_string(), ChannelSynth { seasonal_amplitude: amp, trend, rho: 0.3, sigma });
        }
        Self { seed, n_months, grid_level, channels, planted, ..Self::default() }
    }

    pub fn max_lag(&self) -> usize {
        self.planted.iter().map(|p| p.lag).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_level > MAX_LEVEL {
            return Err(invalid(format!("grid level {} out of range", self.grid_level)));
        }
        if !(1..=12).contains(&self.start_month) {
            return Err(invalid(format!("start month {} out of range", self.start_month)));
        }
        if self.n_months < self.max_lag() + 24 {
            return Err(invalid(format!(
                "n_months {} must be at least max lag {} + 24",
                self.n_months,
                self.max_lag()
            )));
        }
        for (id, c) in &self.channels {
            if channel_index(id).is_none() {
                return Err(invalid(format!("unknown channel `{id}`")));
            }
            if !(0.0..1.0).contains(&c.rho) {
                return Err(invalid(format!("channel {id}: rho {} must lie in [0, 1)", c.rho)));
            }
            let finite = [c.seasonal_amplitude, c.sigma].iter().chain(&c.trend).all(|v| v.is_finite());
            if !finite || c.sigma < 0.0 {
                return Err(invalid(format!("channel {id}: parameters must be finite with sigma >= 0")));
            }
        }
        for p in &self.planted {
            if input_index(&p.input).is_none() {
                return Err(invalid(format!("planted gain input `{}` is not an input channel", p.input)));
            }
            if output_index(&p.output).is_none() {
                return Err(invalid(format!("planted gain output `{}` is not an output channel", p.output)));
            }
            if !p.gain.is_finite() {
                return Err(invalid("planted gain must be finite"));
            }
        }
        Ok(())
    }
}

/// The generator spec recorded in a dataset's pipeline, if it is synthetic.
pub fn synthetic_spec_of(ds: &AnomalyDataset) -> Option<SyntheticSpec> {
    let entry = ds.pipeline.iter().find(|e| e["stage"] == "synthetic")?;
    serde_json::from_value(entry["spec"].clone()).ok()
}

/// Expected output response to an input perturbation `delta` under the
/// planted operator at `lag`: `gain · smooth(delta)` on each gained output.
/// Returned channel-major, `[3 × n_vertices]`.
pub fn planted_response(grid: &IcosahedralGrid, planted: &[PlantedGain], lag: usize, input: &str, delta: &[f64]) -> Vec<f64> {
    let nv = grid.len();
    let mut out = vec![0.0; N_OUTPUTS * nv];
    let smoothed = grid.smooth_once(delta);
    for g in planted.iter().filter(|g| g.lag == lag && g.input == input) {
        let o = output_index(&g.output).expect("validated output");
        for (dst, s) in out[o * nv..(o + 1) * nv].iter_mut().zip(&smoothed) {
            *dst += g.gain * s;
        }
    }
    out
}

/// Stochastic parts of a synthetic dataset, kept for oracle checks.
#[derive(Debug, Clone)]
pub struct SyntheticParts {
    /// Red noise of each input channel, `[n_months × n_vertices]`.
    pub input_noise: Vec<Vec<f64>>,
    /// Everything except seasonal cycle and trend, for all nine channels.
    pub stochastic: Vec<Vec<f64>>,
}

fn red_noise(rng: &mut ChaCha8Rng, len: usize, nv: usize, rho: f64, sigma: f64) -> Vec<f64> {
    let mut out = vec![0.0; len * nv];
    if sigma == 0.0 {
        return out;
    }
    let innov = sigma * (1.0 - rho * rho).sqrt();
    for v in 0..nv {
        let z: f64 = StandardNormal.sample(rng);
        out[v] = sigma * z;
    }
    for t in 1..len {
        for v in 0..nv {
            let z: f64 = StandardNormal.sample(rng);
            out[t * nv + v] = rho * out[(t - 1) * nv + v] + innov * z;
        }
    }
    out
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<AnomalyDataset> {
    generate_synthetic_with_parts(spec).map(|(ds, _)| ds)
}

/// Builds a raw dataset from `spec` and returns its stochastic components.
///
/// Each channel draws from its own random stream, so editing one channel's
/// parameters leaves the others unchanged.
pub fn generate_synthetic_with_parts(spec: &SyntheticSpec) -> Result<(AnomalyDataset, SyntheticParts)> {
    spec.validate()?;
    let grid = build_grid(spec.grid_level)?;
    let (n, nv) = (spec.n_months, grid.len());
    let history = spec.max_lag();
    let len = n + history;
    let params = |id: &str| spec.channels.get(id).copied().unwrap_or_default();

    // Input noise, including `history` months before the record starts.
    let mut full_noise = Vec::with_capacity(N_INPUTS);
    for (c, id) in input_ids().enumerate() {
        let p = params(id);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(c as u64);
        full_noise.push(red_noise(&mut rng, len, nv, p.rho, p.sigma));
    }
    let smoothed: Vec<Option<Vec<f64>>> = (0..N_INPUTS)
        .map(|c| {
            spec.planted
                .iter()
                .any(|p| input_index(&p.input) == Some(c))
                .then(|| smooth_series(&grid, &full_noise[c], len))
        })
        .collect();

    let mut stochastic = Vec::with_capacity(N_INPUTS + N_OUTPUTS);
    for noise in &full_noise {
        stochastic.push(noise[history * nv..].to_vec());
    }
    for (o, id) in output_ids().enumerate() {
        let p = params(id);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream((N_INPUTS + o) as u64);
        let mut s = red_noise(&mut rng, n, nv, p.rho, p.sigma);
        for g in spec.planted.iter().filter(|g| g.output == id) {
            let src = smoothed[input_index(&g.input).expect("validated")].as_ref().expect("smoothed");
            for t in 0..n {
                let from = (t + history - g.lag) * nv;
                for v in 0..nv {
                    s[t * nv + v] += g.gain * src[from + v];
                }
            }
        }
        stochastic.push(s);
    }

    let mut data = Vec::with_capacity(N_INPUTS + N_OUTPUTS);
    for (c, id) in CANONICAL.iter().map(|k| k.0).enumerate() {
        let p = params(id);
        let det = deterministic_part(&grid, &p, n, spec.start_month);
        data.push(det.iter().zip(&stochastic[c]).map(|(a, b)| (a + b) as f32).collect());
    }

    let ds = AnomalyDataset {
        grid_level: spec.grid_level,
        n_months: n,
        start_year: spec.start_year,
        start_month: spec.start_month,
        channels: canonical_channels(),
        data,
        provenance: Provenance::Raw,
        pipeline: vec![serde_json::json!({ "stage": "synthetic", "spec": spec })],
        pr_climatology: None,
    };
    let input_noise = stochastic[..N_INPUTS].to_vec();
    Ok((ds, SyntheticParts { input_noise, stochastic }))
}

fn smooth_series(grid: &IcosahedralGrid, series: &[f64], len: usize) -> Vec<f64> {
    let nv = grid.len();
    (0..len).flat_map(|t| grid.smooth_once(&series[t * nv..(t + 1) * nv])).collect()
}

fn deterministic_part(grid: &IcosahedralGrid, p: &ChannelSynth, n: usize, start_month: u32) -> Vec<f64> {
    let pattern: Vec<f64> = grid.vertices().iter().map(|v| 1.0 + 0.5 * v.lat.to_radians().sin()).collect();
    let mut out = Vec::with_capacity(n * grid.len());
    for t in 0..n {
        let cal = ((start_month as usize - 1 + t) % 12) as f64;
        let season = p.seasonal_amplitude * (std::f64::consts::TAU * cal / 12.0).cos();
        let s = t as f64 / 1200.0;
        let trend = p.trend[0] + s * (p.trend[1] + s * (p.trend[2] + s * p.trend[3]));
        out.extend(pattern.iter().map(|w| season * w + trend));
    }
    out
}
