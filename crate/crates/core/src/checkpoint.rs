//! Canonical JSON documents and model checkpoints.
//!
//! Canonical form: object keys sorted, no whitespace, floats written with 17
//! significant digits in exponent notation. Reading a canonical document and
//! writing it again yields the same bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::encoders::{Dims, Model, ModelKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_value(v: &Value, out: &mut String) -> Result<()> {
    match v {
        Value::Null | Value::Bool(_) | Value::String(_) => out.push_str(&serde_json::to_string(v)?),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                let f = n.as_f64().expect("json number");
                out.push_str(&format_f64(f));
            }
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out)?;
            }
            out.push(']');
        }
        Value::Object(map) => {
            let sorted: BTreeMap<&String, &Value> = map.iter().collect();
            out.push('{');
            for (i, (k, item)) in sorted.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k)?);
                out.push(':');
                write_value(item, out)?;
            }
            out.push('}');
        }
    }
    Ok(())
}

pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut out = String::new();
    write_value(&v, &mut out)?;
    out.push('\n');
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_kind: ModelKind,
    pub dims: Dims,
    pub seed: u64,
    pub params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, seed: u64) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            model_kind: model.kind,
            dims: model.dims,
            seed,
            params: model.params.clone(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        for (name, t) in &self.params {
            // Deserialisation bypasses the Tensor constructor.
            Tensor::new(t.shape().to_vec(), t.data().to_vec())
                .map_err(|e| Error::InvalidConfig(format!("parameter `{name}`: {e}")))?;
        }
        Model::from_params(self.model_kind, self.dims, self.params)
    }

    pub fn to_json(&self) -> Result<String> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::InvalidConfig(format!("unsupported checkpoint version {}", self.format_version)));
        }
        to_canonical_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text)?;
        if c.format_version != CHECKPOINT_VERSION {
            return Err(Error::InvalidConfig(format!("unsupported checkpoint version {}", c.format_version)));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn checkpoint_round_trip_is_byte_exact() {
        let model = Model::new(ModelKind::BiAttention, Dims { m: 6, n: 4, r: 3 }, 17).unwrap();
        let ck = Checkpoint::from_model(&model, 17);
        let first = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&first).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_json().unwrap(), first);
        assert_eq!(back.into_model().unwrap(), model);
    }

    #[test]
    fn keys_are_sorted() {
        let model = Model::zeros(ModelKind::Linear, Dims { m: 2, n: 2, r: 2 });
        let json = Checkpoint::from_model(&model, 0).to_json().unwrap();
        let i_dims = json.find("\"dims\"").unwrap();
        let i_fmt = json.find("\"format_version\"").unwrap();
        let i_params = json.find("\"params\"").unwrap();
        assert!(i_dims < i_fmt && i_fmt < i_params);
        assert!(json.contains("\"M\":2"));
        assert!(json.contains("0.0000000000000000e0"));
    }

    #[test]
    fn corrupt_layout_rejected() {
        let model = Model::zeros(ModelKind::Linear, Dims { m: 2, n: 2, r: 2 });
        let json = Checkpoint::from_model(&model, 0).to_json().unwrap();
        let broken = json.replacen("\"shape\":[2]", "\"shape\":[3]", 1);
        assert!(Checkpoint::from_json(&broken).unwrap().into_model().is_err());
    }

    proptest! {
        #[test]
        fn floats_survive_canonical_form(xs in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 1..20)) {
            let text = to_canonical_json(&xs).unwrap();
            let back: Vec<f64> = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(&back, &xs);
            prop_assert_eq!(to_canonical_json(&back).unwrap(), text);
        }
    }
}
