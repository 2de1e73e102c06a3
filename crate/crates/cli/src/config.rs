//! Config resolution: defaults, then the `--config` file, then subcommand flags, then
//! `--set` overrides.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use pearl::train::apply_overrides;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    pearl::Error::Config(msg.into()).into()
}

/// Parse `key=value`.
pub fn parse_key_value(raw: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = raw
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got `{raw}`"))?;
    if k.trim().is_empty() {
        return Err(format!("empty key in `{raw}`"));
    }
    Ok((k.trim().to_string(), v.to_string()))
}

/// Read a JSON or TOML (by extension) config file into a JSON value.
pub fn read_config_file(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let is_toml = path.extension().is_some_and(|e| e == "toml");
    let value = if is_toml {
        let t: toml::Value = toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        serde_json::to_value(t)?
    } else {
        serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?
    };
    if !value.is_object() {
        return Err(config_error(format!("{}: top level must be a table", path.display())));
    }
    Ok(value)
}

fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// A field set from a subcommand flag, as a dotted key and a JSON value.
pub type FlagValue = (String, Value);

pub fn flag(key: &str, value: impl Serialize) -> FlagValue {
    (key.to_string(), serde_json::to_value(value).expect("flag values serialize"))
}

pub fn resolve<T: Serialize + DeserializeOwned + Default>(
    file: Option<&Path>,
    flags: Vec<FlagValue>,
    sets: &[(String, String)],
) -> Result<T> {
    let mut value = serde_json::to_value(T::default())?;
    if let Some(path) = file {
        merge(&mut value, read_config_file(path)?);
    }
    let base: T = serde_json::from_value(value).map_err(|e| config_error(format!("config file: {e}")))?;
    let flag_pairs: Vec<(String, String)> = flags.into_iter().map(|(k, v)| (k, v.to_string())).collect();
    let with_flags = apply_overrides(&base, &flag_pairs)?;
    Ok(apply_overrides(&with_flags, sets)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pearl::data::SyntheticConfig;

    #[test]
    fn sets_win_over_flags_and_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"num_clips": 3, "height": 24}"#).unwrap();
        let cfg: SyntheticConfig = resolve(
            Some(&p),
            vec![flag("num_clips", 5)],
            &[("num-clips".into(), "7".into())],
        )
        .unwrap();
        assert_eq!((cfg.num_clips, cfg.height, cfg.width), (7, 24, 64));
    }

    #[test]
    fn toml_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "num_clips = 4\nshape_size_range = [4, 6]\n").unwrap();
        let cfg: SyntheticConfig = resolve(Some(&p), vec![], &[]).unwrap();
        assert_eq!((cfg.num_clips, cfg.shape_size_range), (4, [4, 6]));
        let bad = resolve::<SyntheticConfig>(None, vec![], &[("num_clipz".into(), "1".into())]);
        assert!(bad.is_err());
    }

    #[test]
    fn key_value_parsing() {
        assert_eq!(parse_key_value("a.b=1").unwrap(), ("a.b".into(), "1".into()));
        assert!(parse_key_value("novalue").is_err());
        assert!(parse_key_value("=3").is_err());
    }
}
