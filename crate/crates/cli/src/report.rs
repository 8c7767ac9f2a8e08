//! Deterministic report serialization: JSON with sorted keys and a fixed
//! 17-significant-digit float format, CSV with the same float format, and
//! the run manifest.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};

/// 17 significant digits: round-trips every f64 bit pattern.
pub fn float_cell(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_json_value(out: &mut String, v: &Value, indent: usize) {
    let pad = "  ".repeat(indent);
    let pad_in = "  ".repeat(indent + 1);
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                out.push_str(&float_cell(n.as_f64().expect("finite float")));
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("string encodes")),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                out.push_str(&pad_in);
                write_json_value(out, item, indent + 1);
                if i + 1 < items.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            out.push_str(&pad);
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            // serde_json's default map is a BTreeMap: keys iterate sorted.
            out.push_str("{\n");
            for (i, (k, item)) in map.iter().enumerate() {
                out.push_str(&pad_in);
                out.push_str(&serde_json::to_string(k).expect("key encodes"));
                out.push_str(": ");
                write_json_value(out, item, indent + 1);
                if i + 1 < map.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            out.push_str(&pad);
            out.push('}');
        }
    }
}

/// Canonical text form: sorted keys, fixed float format, trailing newline.
pub fn canonical_json(v: &Value) -> String {
    let mut out = String::new();
    write_json_value(&mut out, v, 0);
    out.push('\n');
    out
}

/// Hex SHA-256 of the canonical form; changes iff the resolved
/// configuration changes.
pub fn config_hash(v: &Value) -> String {
    let mut hasher = Sha256::new();
    hasher.update(canonical_json(v).as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_json(path: &Path, v: &Value) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut file = fs::File::create(path)?;
    file.write_all(canonical_json(v).as_bytes())
}

/// Write a CSV of float rows under a fixed header.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<f64>]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|x| float_cell(*x)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out)
}

/// Column labels for a row-major matrix block, `P_00, P_01, ...`.
pub fn matrix_labels(name: &str, nrows: usize, ncols: usize) -> Vec<String> {
    let mut labels = Vec::with_capacity(nrows * ncols);
    for i in 0..nrows {
        for j in 0..ncols {
            labels.push(format!("{name}_{i}{j}"));
        }
    }
    labels
}

pub fn vector_labels(name: &str, len: usize) -> Vec<String> {
    (0..len).map(|i| format!("{name}_{i}")).collect()
}
