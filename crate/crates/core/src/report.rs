//! JSON helpers shared by all reports.
//!
//! Floats are written with 17 significant digits so they round-trip exactly;
//! non-finite values become `null`.

use serde_json::{Map, Number, Value};
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

pub fn num(x: f64) -> Value {
    if !x.is_finite() {
        return Value::Null;
    }
    let s = format!("{x:.16e}");
    Value::Number(s.parse::<Number>().expect("formatted float is valid JSON"))
}

pub fn num_vec(v: &[f64]) -> Value {
    Value::Array(v.iter().copied().map(num).collect())
}

pub fn num_matrix(t: &Tensor) -> Value {
    Value::Array((0..t.rows()).map(|i| num_vec(t.row_slice(i))).collect())
}

/// Hex SHA-256 (first 16 characters) of the canonical, key-sorted JSON text.
pub fn config_hash(config: &Value) -> String {
    let text = serde_json::to_string(&sorted(config)).expect("json values serialize");
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn sorted(v: &Value) -> Value {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<_> = m.keys().collect();
            keys.sort();
            let mut out = Map::new();
            for k in keys {
                out.insert(k.clone(), sorted(&m[k]));
            }
            Value::Object(out)
        }
        Value::Array(a) => Value::Array(a.iter().map(sorted).collect()),
        other => other.clone(),
    }
}

pub fn to_pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
    s.push('\n');
    s
}
