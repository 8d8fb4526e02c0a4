//! JSON configs layered as: defaults, then the config file, then `--override`.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// Deep merge: objects are merged key by key, anything else is replaced.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Key of `map` equal to `key`, or equal ignoring ASCII case.
fn resolve_key(map: &Map<String, Value>, key: &str) -> Option<String> {
    if map.contains_key(key) {
        return Some(key.to_string());
    }
    map.keys().find(|k| k.eq_ignore_ascii_case(key)).cloned()
}

/// Parses `a.b.c=value`; the value is read as JSON and falls back to a string.
pub fn parse_override(spec: &str) -> Result<(Vec<String>, Value), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{spec}` is not of the form key=value")))?;
    let path: Vec<String> = path.trim().split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("override `{spec}` has an empty key")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    Ok((path, value))
}

/// Sets `path` in `root`. Every key must already exist in the defaults; keys
/// match case-insensitively, so `training.N_rep` finds `training.n_rep`.
pub fn apply_override(root: &mut Value, path: &[String], value: Value) -> Result<(), CliError> {
    let mut node = root;
    for (depth, key) in path.iter().enumerate() {
        let dotted = path[..=depth].join(".");
        let map = node
            .as_object_mut()
            .ok_or_else(|| CliError::Usage(format!("`{dotted}`: parent is not an object")))?;
        let found = resolve_key(map, key).ok_or_else(|| CliError::Usage(format!("unknown config key `{dotted}`")))?;
        node = map.get_mut(&found).expect("resolved above");
    }
    *node = value;
    Ok(())
}

/// Defaults, then the optional file, then the overrides, deserialized with
/// the path of any offending field in the error.
pub fn load<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: Option<&Path>,
    overrides: &[String],
) -> Result<T, CliError> {
    let mut value = serde_json::to_value(defaults).map_err(|e| CliError::Data(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        let parsed: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        merge(&mut value, parsed);
    }
    for spec in overrides {
        let (path, v) = parse_override(spec)?;
        apply_override(&mut value, &path, v)?;
    }
    from_value(value)
}

pub fn from_value<T: DeserializeOwned>(value: Value) -> Result<T, CliError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        CliError::Data(format!("config field `{path}`: {}", e.into_inner()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;
    use serde_json::json;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct Inner {
        n_rep: usize,
        snr_db: f64,
    }

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct Outer {
        name: String,
        training: Inner,
    }

    fn defaults() -> Outer {
        Outer {
            name: "x".into(),
            training: Inner { n_rep: 1, snr_db: 0.0 },
        }
    }

    #[test]
    fn overrides_match_case_insensitively() {
        let c: Outer = load(&defaults(), None, &["training.N_rep=10".into(), "name=abc".into()]).unwrap();
        assert_eq!(c.training.n_rep, 10);
        assert_eq!(c.name, "abc");
    }

    #[test]
    fn unknown_keys_and_bad_syntax_are_usage_errors() {
        assert!(matches!(load(&defaults(), None, &["training.nope=1".into()]), Err(CliError::Usage(_))));
        assert!(matches!(load(&defaults(), None, &["training".into()]), Err(CliError::Usage(_))));
        assert!(matches!(load(&defaults(), None, &["name.x=1".into()]), Err(CliError::Usage(_))));
    }

    #[test]
    fn type_errors_name_the_field() {
        let err = load(&defaults(), None, &["training.n_rep=\"ten\"".into()]).unwrap_err();
        match err {
            CliError::Data(m) => assert!(m.contains("training.n_rep"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn file_merges_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"training": {"snr_db": 5}}"#).unwrap();
        let c: Outer = load(&defaults(), Some(&p), &[]).unwrap();
        assert_eq!(c.training, Inner { n_rep: 1, snr_db: 5.0 });
        let mut v = json!({"a": {"b": 1, "c": 2}});
        merge(&mut v, json!({"a": {"c": 3}}));
        assert_eq!(v, json!({"a": {"b": 1, "c": 3}}));
    }
}
