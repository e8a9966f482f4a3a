//! Flag > config file > default.
//!
//! The config file is JSON with one object per subcommand whose keys are the
//! flag names without dashes, e.g. `{"train": {"epochs": 5, "lags": [1, 2]}}`.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

pub const SECTIONS: [&str; 6] = ["synth", "preprocess", "train", "shift-fit", "evaluate", "serve"];

/// Reads a config file and checks its section names.
pub fn load_file(path: &Path) -> CliResult<Map<String, Value>> {
    if !path.exists() {
        return Err(CliError::missing(format!("config file {} does not exist", path.display())));
    }
    let text = std::fs::read_to_string(path)?;
    let value: Value = serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("config file: {e}")))?;
    let Value::Object(map) = value else {
        return Err(CliError::invalid("config file must hold a JSON object"));
    };
    if let Some(bad) = map.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
        return Err(CliError::invalid(format!("config file: unknown section `{bad}`")));
    }
    Ok(map)
}

/// Overlays the flags that were given onto the file's section for `command`.
pub fn layered<T: Serialize + DeserializeOwned>(command: &str, flags: &T, file: Option<&Map<String, Value>>) -> CliResult<T> {
    let mut merged = match file.and_then(|f| f.get(command)) {
        Some(Value::Object(section)) => section.clone(),
        Some(_) => return Err(CliError::invalid(format!("config file: section `{command}` must be an object"))),
        None => Map::new(),
    };
    let Value::Object(given) = serde_json::to_value(flags).expect("flags serialize") else {
        unreachable!("flag structs serialize to objects")
    };
    for (k, v) in given {
        let empty_list = matches!(&v, Value::Array(a) if a.is_empty());
        if !v.is_null() && !empty_list {
            merged.insert(k, v);
        }
    }
    serde_path_to_error::deserialize(Value::Object(merged))
        .map_err(|e| CliError::invalid(format!("config `{command}.{}`: {}", e.path(), e.inner())))
}

#[cfg(test)]
mod tests {
    use serde::Deserialize;

    use super::*;

    #[derive(Debug, Serialize, Deserialize, PartialEq, Default)]
    #[serde(deny_unknown_fields, rename_all = "kebab-case")]
    struct Flags {
        epochs: Option<usize>,
        initial_lr: Option<f64>,
        #[serde(default)]
        lags: Vec<usize>,
    }

    fn file(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let f = file(serde_json::json!({"train": {"epochs": 4, "initial-lr": 0.5, "lags": [2]}}));
        let flags = Flags { epochs: Some(9), ..Default::default() };
        let got: Flags = layered("train", &flags, Some(&f)).unwrap();
        assert_eq!(got, Flags { epochs: Some(9), initial_lr: Some(0.5), lags: vec![2] });
        let got: Flags = layered("train", &Flags::default(), None).unwrap();
        assert_eq!(got, Flags::default());
    }

    #[test]
    fn unknown_file_keys_are_rejected_with_their_path() {
        let f = file(serde_json::json!({"train": {"epoch": 4}}));
        let err = layered::<Flags>("train", &Flags::default(), Some(&f)).unwrap_err();
        assert_eq!(err.exit, crate::error::EXIT_INVALID);
        assert!(err.message.contains("epoch"), "{}", err.message);
    }
}
