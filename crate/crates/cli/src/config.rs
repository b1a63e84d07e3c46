//! Flat dotted-key configuration: `model.*`, `train.*` and `gen.*` keys from a
//! JSON file, then `key=value` overrides on top.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use bot_core::data::GeneratorConfig;
use bot_core::model::ModelConfig;
use bot_core::train::TrainConfig;
use serde_json::{Map, Value};

#[derive(Debug, Clone)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gen: GeneratorConfig,
}

/// Reads a JSON object of dotted keys.
pub fn read_file(path: &Path) -> Result<Vec<(String, Value)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let Value::Object(map) = v else {
        bail!("config {} must be a JSON object of dotted keys", path.display());
    };
    Ok(map.into_iter().collect())
}

/// `key=value`; the value is JSON if it parses, a bare string otherwise.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| anyhow!("override `{s}` is not key=value"))?;
    let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), v))
}

fn set_path(root: &mut Value, path: &[&str], v: Value, full: &str) -> Result<()> {
    let mut cur = root;
    for (i, p) in path.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| anyhow!("`{full}` does not name a config field"))?;
        let slot = obj.get_mut(*p).ok_or_else(|| anyhow!("unknown config key `{full}`"))?;
        if i + 1 == path.len() {
            *slot = v;
            return Ok(());
        }
        cur = slot;
    }
    unreachable!("empty key path")
}

/// Applies `entries` in order; `model.preset` is applied first regardless of position.
pub fn build(entries: &[(String, Value)]) -> Result<Settings> {
    let preset = entries
        .iter()
        .rev()
        .find(|(k, _)| k == "model.preset")
        .map(|(_, v)| v.as_str().map(str::to_string).ok_or_else(|| anyhow!("model.preset must be a string")))
        .transpose()?
        .unwrap_or_else(|| "desk".to_string());
    let model = ModelConfig::preset(&preset)?;
    let train = if preset == "paper" { TrainConfig::paper() } else { TrainConfig::desk() };
    let gen = GeneratorConfig {
        width: model.image_w,
        height: model.image_h,
        frame_w: model.frame_w,
        frame_h: model.frame_h,
        n_obs: model.n_obs,
        horizon: model.horizon,
        ..GeneratorConfig::default()
    };
    let mut roots = Map::new();
    roots.insert("model".into(), serde_json::to_value(&model)?);
    roots.insert("train".into(), serde_json::to_value(&train)?);
    roots.insert("gen".into(), serde_json::to_value(&gen)?);
    let mut root = Value::Object(roots);
    for (k, v) in entries {
        if k == "model.preset" {
            continue;
        }
        let parts: Vec<&str> = k.split('.').collect();
        if parts.len() < 2 {
            bail!("config key `{k}` needs a section prefix (model., train. or gen.)");
        }
        set_path(&mut root, &parts, v.clone(), k)?;
    }
    let Value::Object(mut m) = root else { unreachable!() };
    let model: ModelConfig = serde_json::from_value(m.remove("model").unwrap()).context("invalid model config")?;
    let train: TrainConfig = serde_json::from_value(m.remove("train").unwrap()).context("invalid train config")?;
    let gen: GeneratorConfig = serde_json::from_value(m.remove("gen").unwrap()).context("invalid gen config")?;
    model.validate()?;
    train.validate()?;
    gen.validate()?;
    Ok(Settings { model, train, gen })
}

/// Rounds every float to 9 significant digits so printed output is stable.
pub fn fixed(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().unwrap();
            let r: f64 = format!("{x:.8e}").parse().unwrap();
            serde_json::Number::from_f64(r).map_or(Value::Null, Value::Number)
        }
        Value::Array(a) => Value::Array(a.into_iter().map(fixed).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, fixed(v))).collect()),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_in_order() {
        let e = vec![
            parse_override("train.lr=0.5").unwrap(),
            parse_override("model.recon.depth=3").unwrap(),
            parse_override("model.joint_mode=individual").unwrap(),
            parse_override("train.lr=0.25").unwrap(),
        ];
        let s = build(&e).unwrap();
        assert_eq!(s.train.lr, 0.25);
        assert_eq!(s.model.recon.depth, 3);
        assert_eq!(s.model.joint_mode.as_str(), "individual");
    }

    #[test]
    fn preset_sets_generator_dims() {
        let s = build(&[parse_override("model.preset=tiny").unwrap()]).unwrap();
        assert_eq!((s.gen.frame_w, s.gen.width), (16, 64));
    }

    #[test]
    fn bad_keys_rejected() {
        assert!(build(&[parse_override("train.nope=1").unwrap()]).is_err());
        assert!(build(&[parse_override("lr=1").unwrap()]).is_err());
        assert!(build(&[parse_override("train.lr=\"x\"").unwrap()]).is_err());
        assert!(build(&[parse_override("model.joint_mode=sideways").unwrap()]).is_err());
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn fixed_precision() {
        let v = fixed(serde_json::json!({"a": 0.1234567891234, "b": [1, 2.0], "c": "s"}));
        assert_eq!(v.to_string(), r#"{"a":0.123456789,"b":[1,2.0],"c":"s"}"#);
    }
}
