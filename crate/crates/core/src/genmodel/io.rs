//! `data.csv` + `meta.json` dataset files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassMode, Dataset, GenError, GenerativeSpec};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub spec: GenerativeSpec,
    pub spec_hash: String,
    pub seed: u64,
    #[serde(rename = "N")]
    pub n_samples: usize,
    pub mode: ClassMode,
    pub has_latents: bool,
    /// Free-form assumption-check results attached by the caller.
    #[serde(default)]
    pub checks: serde_json::Value,
}

pub fn write_dataset(
    dir: &Path,
    data: &Dataset,
    spec: &GenerativeSpec,
    seed: u64,
    checks: serde_json::Value,
) -> Result<(), GenError> {
    fs::create_dir_all(dir).map_err(|e| GenError::Io(format!("{}: {e}", dir.display())))?;
    let (m, u) = (data.x.cols(), data.c.cols());
    let n = data.z.as_ref().map_or(0, Tensor::cols);
    let mut header: Vec<String> = (1..=m).map(|k| format!("x{k}")).collect();
    header.extend((1..=u).map(|k| format!("c{k}")));
    header.extend((1..=n).map(|k| format!("z{k}")));
    let mut out = header.join(",");
    out.push('\n');
    for r in 0..data.len() {
        let mut first = true;
        let mut push = |v: String| {
            if !first {
                out.push(',');
            }
            first = false;
            out.push_str(&v);
        };
        for &v in data.x.row(r) {
            push(format!("{v:.16e}"));
        }
        for &v in data.c.row(r) {
            push(format!("{}", v as u8));
        }
        if let Some(z) = &data.z {
            for &v in z.row(r) {
                push(format!("{v:.16e}"));
            }
        }
        out.push('\n');
    }
    fs::write(dir.join("data.csv"), out).map_err(|e| GenError::Io(e.to_string()))?;
    let meta = DatasetMeta {
        spec: spec.clone(),
        spec_hash: spec.hash(),
        seed,
        n_samples: data.len(),
        mode: data.mode,
        has_latents: data.z.is_some(),
        checks,
    };
    let mut json = serde_json::to_string_pretty(&meta).map_err(|e| GenError::Io(e.to_string()))?;
    let _ = writeln!(json);
    fs::write(dir.join("meta.json"), json).map_err(|e| GenError::Io(e.to_string()))?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<(Dataset, DatasetMeta), GenError> {
    let io = |e: std::io::Error| GenError::Io(format!("{}: {e}", dir.display()));
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json")).map_err(io)?)
        .map_err(|e| GenError::Io(format!("meta.json: {e}")))?;
    let text = fs::read_to_string(dir.join("data.csv")).map_err(io)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| GenError::Io("data.csv is empty".into()))?
        .split(',')
        .collect();
    let count = |p: char| header.iter().filter(|h| h.starts_with(p)).count();
    let (m, u, n) = (count('x'), count('c'), count('z'));
    if m + u + n != header.len() || m != meta.spec.m || u != meta.spec.u {
        return Err(GenError::Io("data.csv header disagrees with meta.json".into()));
    }
    let (mut x, mut c, mut z) = (Vec::new(), Vec::new(), Vec::new());
    for (k, line) in lines.enumerate() {
        let vals: Vec<f64> = line
            .split(',')
            .map(str::parse::<f64>)
            .collect::<Result<_, _>>()
            .map_err(|e| GenError::Io(format!("data.csv line {}: {e}", k + 2)))?;
        if vals.len() != header.len() {
            return Err(GenError::Io(format!("data.csv line {}: wrong field count", k + 2)));
        }
        x.extend_from_slice(&vals[..m]);
        c.extend_from_slice(&vals[m..m + u]);
        z.extend_from_slice(&vals[m + u..]);
    }
    let rows = x.len() / m.max(1);
    let data = Dataset {
        x: Tensor::matrix(rows, m, x)?,
        c: Tensor::matrix(rows, u, c)?,
        z: if n > 0 { Some(Tensor::matrix(rows, n, z)?) } else { None },
        spec_hash: meta.spec_hash.clone(),
        seed: meta.seed,
        mode: meta.mode,
    };
    Ok((data, meta))
}
