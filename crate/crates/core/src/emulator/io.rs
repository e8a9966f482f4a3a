//! Model files and the lag-suite directory.
//!
//! Model file, little-endian: `"MLPM"`, version, lag, grid level, layer
//! count, sizes, activation tag, layer-norm flag, input and output channel
//! counts; then `f32` parameters in [`MlpModel::params`] order; then the
//! `f64` standardization vectors; then the training report as a JSON string
//! (empty when absent).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::binio::{write_f32s, write_f64s, write_str, write_u32, Reader};
use crate::dataset::AnomalyDataset;
use crate::error::{invalid, Error, Result};

use super::mlp::{Activation, Layer, MlpModel, Standardization};
use super::train::train;
use super::TrainConfig;

const MAGIC: &[u8; 4] = b"MLPM";
const VERSION: u32 = 1;
pub const SUITE_MANIFEST: &str = "suite.json";
const SUITE_SCHEMA: u32 = 1;

pub fn save_model(model: &MlpModel, path: impl AsRef<Path>) -> Result<()> {
    model.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    for v in [VERSION, model.lag as u32, model.grid_level as u32, model.layers.len() as u32] {
        write_u32(&mut buf, v)?;
    }
    for &s in &model.sizes {
        write_u32(&mut buf, s as u32)?;
    }
    write_u32(&mut buf, model.activation.tag())?;
    write_u32(&mut buf, model.layer_norm as u32)?;
    write_u32(&mut buf, model.input_norm.channels() as u32)?;
    write_u32(&mut buf, model.output_norm.channels() as u32)?;
    write_f32s(&mut buf, model.params().into_iter().map(|p| p as f32))?;
    for v in [&model.input_norm.mean, &model.input_norm.std, &model.output_norm.mean, &model.output_norm.std] {
        write_f64s(&mut buf, v)?;
    }
    let report = match &model.report {
        Some(r) => serde_json::to_string(r)?,
        None => String::new(),
    };
    write_str(&mut buf, &report)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MlpModel> {
    let path = path.as_ref();
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);
    r.magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("{}: model version {version}, expected {VERSION}", path.display())));
    }
    let lag = r.u32("lag")? as usize;
    let grid_level = r.u32("grid level")? as usize;
    let n_layers = r.u32("layer count")? as usize;
    if n_layers == 0 || n_layers > 64 {
        return Err(Error::Format(format!("implausible layer count {n_layers}")));
    }
    let sizes = (0..=n_layers).map(|_| r.u32("sizes").map(|s| s as usize)).collect::<Result<Vec<_>>>()?;
    let activation = Activation::from_tag(r.u32("activation")?)?;
    let layer_norm = match r.u32("layer-norm flag")? {
        0 => false,
        1 => true,
        f => return Err(Error::Format(format!("bad layer-norm flag {f}"))),
    };
    let in_ch = r.u32("input channels")? as usize;
    let out_ch = r.u32("output channels")? as usize;

    let mut layers = Vec::with_capacity(n_layers);
    let mut n_params = 0usize;
    for i in 0..n_layers {
        let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
        let ln = if layer_norm && i + 1 < n_layers { fan_out } else { 0 };
        n_params = fan_in
            .checked_mul(fan_out)
            .and_then(|w| n_params.checked_add(w + fan_out + 2 * ln))
            .ok_or_else(|| Error::Format("parameter count overflows".into()))?;
        layers.push(Layer {
            weight: Array2::zeros((0, 0)),
            bias: Array1::zeros(0),
            ln_gain: Array1::zeros(0),
            ln_offset: Array1::zeros(0),
        });
    }
    let flat = r.f32s(n_params, "parameters")?;
    let mut it = flat.into_iter().map(|v| v as f64);
    let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
    for (i, l) in layers.iter_mut().enumerate() {
        let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
        let ln = if layer_norm && i + 1 < n_layers { fan_out } else { 0 };
        l.weight = Array2::from_shape_vec((fan_out, fan_in), take(fan_in * fan_out)).expect("counted");
        l.bias = Array1::from(take(fan_out));
        l.ln_gain = Array1::from(take(ln));
        l.ln_offset = Array1::from(take(ln));
    }
    let input_norm = Standardization { mean: r.f64s(in_ch, "input mean")?, std: r.f64s(in_ch, "input std")? };
    let output_norm = Standardization { mean: r.f64s(out_ch, "output mean")?, std: r.f64s(out_ch, "output std")? };
    let report_json = r.string("training report")?;
    r.finish()?;
    let report = if report_json.is_empty() {
        None
    } else {
        Some(serde_json::from_str(&report_json).map_err(|e| Error::Format(format!("training report: {e}")))?)
    };
    let model = MlpModel { lag, grid_level, sizes, layers, activation, layer_norm, input_norm, output_norm, report };
    model.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(model)
}

/// Emulators keyed by lag, all on one grid with one channel layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LagSuite {
    models: BTreeMap<usize, MlpModel>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SuiteEntry {
    lag: usize,
    file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    val_mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    val_baseline_mse: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SuiteManifest {
    schema_version: u32,
    grid_level: usize,
    models: Vec<SuiteEntry>,
}

impl LagSuite {
    pub fn new(models: Vec<MlpModel>) -> Result<Self> {
        let first = models.first().ok_or_else(|| invalid("a lag suite needs at least one model"))?;
        let (level, n_in, n_out) = (first.grid_level, first.n_inputs(), first.n_outputs());
        let mut map = BTreeMap::new();
        for m in models {
            if m.grid_level != level || m.n_inputs() != n_in || m.n_outputs() != n_out {
                return Err(Error::Shape(format!(
                    "lag {} model (level {}, {} → {}) does not match level {level}, {n_in} → {n_out}",
                    m.lag,
                    m.grid_level,
                    m.n_inputs(),
                    m.n_outputs()
                )));
            }
            let lag = m.lag;
            if map.insert(lag, m).is_some() {
                return Err(invalid(format!("duplicate lag {lag}")));
            }
        }
        Ok(Self { models: map })
    }

    /// Lags in increasing order.
    pub fn lags(&self) -> Vec<usize> {
        self.models.keys().copied().collect()
    }

    pub fn get(&self, lag: usize) -> Option<&MlpModel> {
        self.models.get(&lag)
    }

    pub fn models(&self) -> impl Iterator<Item = &MlpModel> {
        self.models.values()
    }

    pub fn grid_level(&self) -> usize {
        self.models.values().next().expect("non-empty").grid_level
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (lag, m) in &self.models {
            let file = format!("lag_{lag:03}.mlpm");
            save_model(m, dir.join(&file))?;
            entries.push(SuiteEntry {
                lag: *lag,
                file,
                val_mse: m.report.as_ref().map(|r| r.val_mse),
                val_baseline_mse: m.report.as_ref().map(|r| r.val_baseline_mse),
            });
        }
        let manifest = SuiteManifest { schema_version: SUITE_SCHEMA, grid_level: self.grid_level(), models: entries };
        fs::write(dir.join(SUITE_MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join(SUITE_MANIFEST))?;
        let manifest: SuiteManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{SUITE_MANIFEST}: {e}")))?;
        if manifest.schema_version != SUITE_SCHEMA {
            return Err(Error::Format(format!("suite schema version {}", manifest.schema_version)));
        }
        let mut models = Vec::new();
        for e in manifest.models {
            let m = load_model(dir.join(&e.file))?;
            if m.lag != e.lag {
                return Err(Error::Format(format!("{} holds lag {}, manifest says {}", e.file, m.lag, e.lag)));
            }
            models.push(m);
        }
        let suite = Self::new(models)?;
        if suite.grid_level() != manifest.grid_level {
            return Err(Error::Shape(format!(
                "suite manifest grid level {} but models are level {}",
                manifest.grid_level,
                suite.grid_level()
            )));
        }
        Ok(suite)
    }

    /// Errors unless every model fits `ds`.
    pub fn check_dataset(&self, ds: &AnomalyDataset) -> Result<()> {
        self.models.values().try_for_each(|m| m.check_dataset(ds))
    }
}

/// Trains one model per lag, each independently with the same config.
pub fn train_lag_suite(ds: &AnomalyDataset, lags: &[usize], cfg: &TrainConfig) -> Result<LagSuite> {
    if lags.is_empty() {
        return Err(invalid("no lags requested"));
    }
    let mut seen = lags.to_vec();
    seen.sort_unstable();
    if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
        return Err(invalid(format!("duplicate lag {}", w[0])));
    }
    if let Some(&max) = seen.last() {
        if max >= ds.n_months {
            return Err(invalid(format!("lag {max} exceeds the {}-month record", ds.n_months)));
        }
    }
    let models = seen.iter().map(|&lag| train(ds, lag, cfg)).collect::<Result<Vec<_>>>()?;
    LagSuite::new(models)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(lag: usize) -> MlpModel {
        let mut m = MlpModel::new(&[6, 5, 3], Activation::Gelu, true, Standardization::identity(6), Standardization::identity(3), 4).unwrap();
        m.lag = lag;
        m
    }

    #[test]
    fn model_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = toy(2);
        m.input_norm.mean[1] = 0.3;
        m.output_norm.std[2] = 1.7;
        save_model(&m, dir.path().join("m.mlpm")).unwrap();
        let back = load_model(dir.path().join("m.mlpm")).unwrap();
        assert_eq!(back, m);
        let x = [0.1, -0.4, 2.0, 0.0, 1.5, -3.0];
        let (a, b) = (m.forward(&x).unwrap(), back.forward(&x).unwrap());
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn truncated_and_wrong_version_files_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mlpm");
        save_model(&toy(0), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_model(&p), Err(Error::Format(_))));
        let mut v = bytes.clone();
        v[4] = 9;
        fs::write(&p, &v).unwrap();
        assert!(matches!(load_model(&p), Err(Error::Format(m)) if m.contains("version")));
        let mut extra = bytes;
        extra.push(0);
        fs::write(&p, &extra).unwrap();
        assert!(matches!(load_model(&p), Err(Error::Format(_))));
    }

    #[test]
    fn suite_rejects_duplicates_and_round_trips() {
        assert!(LagSuite::new(vec![toy(1), toy(1)]).is_err());
        let suite = LagSuite::new(vec![toy(3), toy(0), toy(1)]).unwrap();
        assert_eq!(suite.lags(), vec![0, 1, 3]);
        let dir = tempfile::tempdir().unwrap();
        suite.save(dir.path()).unwrap();
        assert_eq!(LagSuite::load(dir.path()).unwrap(), suite);
    }
}
