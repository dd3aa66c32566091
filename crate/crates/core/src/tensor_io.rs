//! Weight files and matrix dumps.
//!
//! Weights are stored as two files: `<name>.bin`, the tensors back to back
//! as little-endian IEEE-754 `f32` in row-major order, and `<name>.json`,
//! a sidecar listing each tensor:
//!
//! ```text
//! {"dtype": "f32le", "tensors": [{"name": "layers.0.w_q", "shape": [8, 8], "offset": 0}, ...]}
//! ```
//!
//! `offset` is in bytes from the start of the `.bin` file. Relation-module
//! weights use the names `layers.<i>.w_q`, `layers.<i>.w_k`, `head.w1`,
//! `head.b1`, `head.w2`, `head.b2`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relation::{ClassifierHead, IcmmParams, RelationLayer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Writes named tensors to `bin` and its `.json` sidecar. Values are
/// narrowed to `f32`.
pub fn save_tensors(bin: impl AsRef<Path>, tensors: &[(String, ArrayD<f64>)]) -> Result<()> {
    let bin = bin.as_ref();
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: bytes.len() as u64,
        });
        for &v in t.iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(bin, &bytes).map_err(|e| Error::io(bin, e))?;
    let side = Sidecar {
        dtype: "f32le".into(),
        tensors: entries,
    };
    let sp = sidecar_path(bin);
    let json = serde_json::to_string_pretty(&side).expect("sidecar serialises");
    std::fs::write(&sp, json).map_err(|e| Error::io(&sp, e))
}

/// Reads every tensor listed in the sidecar of `bin`.
pub fn load_tensors(bin: impl AsRef<Path>) -> Result<BTreeMap<String, ArrayD<f64>>> {
    let bin = bin.as_ref();
    let sp = sidecar_path(bin);
    let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let side: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: sp.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if side.dtype != "f32le" {
        return Err(Error::Validation(format!("unsupported dtype {}", side.dtype)));
    }
    let bytes = std::fs::read(bin).map_err(|e| Error::io(bin, e))?;
    let mut out = BTreeMap::new();
    for t in side.tensors {
        let count: usize = t.shape.iter().product();
        let start = t.offset as usize;
        let end = start + 4 * count;
        let raw = bytes.get(start..end).ok_or_else(|| {
            Error::Validation(format!("tensor {} runs past the end of {}", t.name, bin.display()))
        })?;
        let vals: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&t.shape), vals).expect("length checked");
        out.insert(t.name, arr);
    }
    Ok(out)
}

pub fn save_icmm_params(bin: impl AsRef<Path>, params: &IcmmParams) -> Result<()> {
    let mut tensors = Vec::new();
    for (i, l) in params.layers.iter().enumerate() {
        tensors.push((format!("layers.{i}.w_q"), l.w_q.clone().into_dyn()));
        tensors.push((format!("layers.{i}.w_k"), l.w_k.clone().into_dyn()));
    }
    let h = &params.head;
    tensors.push(("head.w1".into(), h.w1.clone().into_dyn()));
    tensors.push(("head.b1".into(), h.b1.clone().into_dyn()));
    tensors.push(("head.w2".into(), h.w2.clone().into_dyn()));
    tensors.push(("head.b2".into(), h.b2.clone().into_dyn()));
    save_tensors(bin, &tensors)
}

pub fn load_icmm_params(bin: impl AsRef<Path>) -> Result<IcmmParams> {
    let mut t = load_tensors(bin)?;
    let mut take2 = |name: &str| -> Result<Array2<f64>> {
        t.remove(name)
            .ok_or_else(|| Error::Validation(format!("missing tensor {name}")))?
            .into_dimensionality()
            .map_err(|_| Error::shape(format!("{name} must be 2-D")))
    };
    let head_w1 = take2("head.w1")?;
    let head_w2 = take2("head.w2")?;
    let mut layers = Vec::new();
    while let (Ok(w_q), Ok(w_k)) = (
        take2(&format!("layers.{}.w_q", layers.len())),
        take2(&format!("layers.{}.w_k", layers.len())),
    ) {
        layers.push(RelationLayer { w_q, w_k });
    }
    let mut take1 = |name: &str| -> Result<Array1<f64>> {
        t.remove(name)
            .ok_or_else(|| Error::Validation(format!("missing tensor {name}")))?
            .into_dimensionality()
            .map_err(|_| Error::shape(format!("{name} must be 1-D")))
    };
    let params = IcmmParams {
        layers,
        head: ClassifierHead {
            w1: head_w1,
            b1: take1("head.b1")?,
            w2: head_w2,
            b2: take1("head.b2")?,
        },
    };
    params.validate()?;
    Ok(params)
}

/// Comma-separated rows, full `f64` round-trip precision.
pub fn write_matrix_csv<T: std::fmt::Display>(mut out: impl Write, m: &Array2<T>) -> std::io::Result<()> {
    for row in m.outer_iter() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

/// Parses a headerless numeric CSV matrix. Every row must have the same width.
pub fn read_matrix_csv(text: &str, name: &str) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |message: String| Error::Parse {
            path: name.to_owned(),
            line: i + 1,
            message,
        };
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f64>().map_err(|e| at(format!("{e}: {f:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(at("non-finite value".into()));
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(at(format!("expected {} columns, found {}", first.len(), row.len())));
            }
        }
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Array2::from_shape_vec((rows.len(), cols), flat).expect("rectangular"))
}
