//! Dense tensors, kernels, and execution of programs.

pub mod access;
pub mod exec;
pub mod kernels;
pub mod oracle;
pub mod tensor;

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::pdg::PdgError;
use crate::symexpr::SymError;
use kernels::KernelError;
use tensor::Tensor;

/// Largest value a dynamic bound may take.
pub const DYNAMIC_BOUND_CAP: i64 = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuntimeError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Sym(#[from] SymError),
    #[error(transparent)]
    Pdg(#[from] PdgError),
    #[error("`{tensor}` is undefined at {point:?}")]
    Undefined { tensor: String, point: Vec<i64> },
    #[error("`{tensor}` depends on itself at {point:?}")]
    Cycle { tensor: String, point: Vec<i64> },
    #[error("bound `{0}` did not terminate within {DYNAMIC_BOUND_CAP} steps")]
    NoTermination(String),
    #[error("out of device memory: {need} bytes requested, {live} live, capacity {capacity}")]
    OutOfMemory { need: u64, live: u64, capacity: u64 },
    #[error("`{tensor}` at {point:?} is not resident")]
    NotResident { tensor: String, point: Vec<i64> },
    #[error("{0}")]
    Other(String),
}

/// Every point of one output tensor.
pub type PointMap = BTreeMap<Vec<i64>, Tensor>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outputs {
    /// Final value of every bound, including dynamic ones.
    pub bounds: BTreeMap<String, i64>,
    pub values: BTreeMap<String, PointMap>,
}

/// First mismatch between two output sets. Integer and boolean tensors
/// must agree exactly; floats within `rel`. Bounds added by rewrites may
/// appear only in `b`.
pub fn compare_outputs(a: &Outputs, b: &Outputs, rel: f64) -> Result<(), Mismatch> {
    if a.bounds.iter().any(|(k, v)| b.bounds.get(k) != Some(v)) {
        return Err(Mismatch(format!("bounds differ: {:?} vs {:?}", a.bounds, b.bounds)));
    }
    for (name, pa) in &a.values {
        let pb = b.values.get(name).ok_or_else(|| Mismatch(format!("missing output `{name}`")))?;
        if pa.len() != pb.len() {
            return Err(Mismatch(format!("`{name}`: {} points vs {}", pa.len(), pb.len())));
        }
        for (pt, x) in pa {
            let y = pb.get(pt).ok_or_else(|| Mismatch(format!("`{name}` missing point {pt:?}")))?;
            let exact = !x.dtype.is_float() || !y.dtype.is_float();
            let d = x.rel_diff(y);
            if (exact && d != 0.0) || d > rel {
                return Err(Mismatch(format!("`{name}` at {pt:?}: {:?} vs {:?} (rel {d:e})", x.data, y.data)));
            }
        }
    }
    if let Some(extra) = b.values.keys().find(|k| !a.values.contains_key(*k)) {
        return Err(Mismatch(format!("unexpected output `{extra}`")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch(pub String);

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Outputs {
    /// `{"bounds": {..}, "values": {name: [{"point", "shape", "dtype", "data"}]}}`.
    pub fn to_json(&self) -> serde_json::Value {
        let values: serde_json::Map<String, serde_json::Value> = self
            .values
            .iter()
            .map(|(name, pts)| {
                let rows = pts
                    .iter()
                    .map(|(p, t)| serde_json::json!({ "point": p, "shape": t.shape, "dtype": t.dtype.to_string(), "data": t.data }))
                    .collect();
                (name.clone(), serde_json::Value::Array(rows))
            })
            .collect();
        serde_json::json!({ "bounds": self.bounds, "values": values })
    }

    /// One line per output point.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.bounds {
            s.push_str(&format!("bound {k} = {v}\n"));
        }
        for (name, pts) in &self.values {
            for (p, t) in pts {
                let idx: Vec<String> = p.iter().map(|v| v.to_string()).collect();
                s.push_str(&format!("{name}[{}] {} {:?} = {:?}\n", idx.join(","), t.dtype, t.shape, t.data));
            }
        }
        s
    }
}
