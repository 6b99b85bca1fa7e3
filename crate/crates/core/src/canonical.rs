//! Canonical JSON rendering: sorted object keys, compact separators and a
//! fixed number of decimals for every non-integral number.
//!
//! All persisted documents (graphs, sessions, corpora, trajectories, batches)
//! go through [`to_string`] so that identical values always produce identical
//! bytes.

use serde::Serialize;
use serde_json::Value;

/// Decimal places used for floats in persisted documents.
pub const PERSIST_DECIMALS: usize = 6;

/// Serialize `value` canonically with [`PERSIST_DECIMALS`] float digits.
pub fn to_string<T: Serialize + ?Sized>(value: &T) -> Result<String, serde_json::Error> {
    to_string_with(value, PERSIST_DECIMALS)
}

/// Serialize `value` canonically, printing floats with `decimals` digits.
pub fn to_string_with<T: Serialize + ?Sized>(
    value: &T,
    decimals: usize,
) -> Result<String, serde_json::Error> {
    let value = serde_json::to_value(value)?;
    let mut out = String::new();
    write_value(&mut out, &value, decimals);
    Ok(out)
}

/// Render an already-built [`Value`] canonically.
pub fn value_to_string(value: &Value, decimals: usize) -> String {
    let mut out = String::new();
    write_value(&mut out, value, decimals);
    out
}

fn write_value(out: &mut String, value: &Value, decimals: usize) {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else {
                let f = n.as_f64().unwrap_or(0.0);
                out.push_str(&format_float(f, decimals));
            }
        }
        Value::String(s) => write_str(out, s),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(out, item, decimals);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_str(out, key);
                out.push(':');
                write_value(out, &map[key], decimals);
            }
            out.push('}');
        }
    }
}

fn write_str(out: &mut String, s: &str) {
    // serde_json's string escaping cannot fail for &str.
    out.push_str(&serde_json::to_string(s).expect("string escaping"));
}

/// Fixed-point float formatting; `-0` collapses to `0`.
pub fn format_float(f: f64, decimals: usize) -> String {
    let s = format!("{:.*}", decimals, f);
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}
