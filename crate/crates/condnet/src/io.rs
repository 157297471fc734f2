//! Persistence: the little-endian tensor binary format, parameter
//! checkpoints with JSON manifests, run manifests, and the CSV emitters
//! for reports and curves.
//!
//! Tensor binary layout: rank as u64, then each dim as u64, then the raw
//! element values little-endian. The element width is ambient (one
//! precision per run) and recorded in the enclosing manifest.

use crate::cost::{CostReport, CurvePoint};
use crate::search::SearchResult;
use crate::tape::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::train::{EpochStats, TrainConfig};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const CKPT_MAGIC: &[u8; 4] = b"CNET";
const CKPT_VERSION: u32 = 1;

pub fn write_tensor<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    w.write_all(&(t.rank() as u64).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * T::BYTES);
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<T: Scalar>(r: &mut impl Read) -> Result<Tensor<T>> {
    let rank = read_u64(r)? as usize;
    if rank == 0 || rank > 32 {
        return Err(Error::Format(format!(
            "tensor rank {rank} out of range (1..=32)"
        )));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * T::BYTES];
    r.read_exact(&mut bytes).map_err(|e| {
        Error::Format(format!(
            "tensor data truncated (expected {} value bytes): {e}",
            n * T::BYTES
        ))
    })?;
    let data: Vec<T> = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(shape, data)
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

pub fn save_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write_tensor(&mut f, t)
}

pub fn load_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut f = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let t = read_tensor(&mut f)?;
    let mut rest = [0u8; 1];
    if f.read(&mut rest)? != 0 {
        return Err(Error::Format(format!(
            "{}: trailing bytes after tensor payload",
            path.display()
        )));
    }
    Ok(t)
}

/// Sidecar manifest describing a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub arch_name: String,
    pub dtype: String,
    pub seed: u64,
    pub iteration: u64,
    pub train_config: Option<TrainConfig>,
    pub param_names: Vec<String>,
}

/// Write parameters as `<path>` (binary) plus `<path>.manifest.json`.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    params: &ParamStore<T>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&CKPT_VERSION.to_le_bytes())?;
    f.write_all(&[T::BYTES as u8])?;
    f.write_all(&(params.len() as u64).to_le_bytes())?;
    for p in params.iter() {
        let name = p.name.as_bytes();
        f.write_all(&(name.len() as u64).to_le_bytes())?;
        f.write_all(name)?;
        write_tensor(&mut f, &p.value)?;
    }
    let mut meta = meta.clone();
    meta.dtype = T::NAME.to_string();
    meta.param_names = params.iter().map(|p| p.name.clone()).collect();
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Format(format!("cannot emit manifest: {e}")))?;
    std::fs::write(manifest_path(path), json)?;
    Ok(())
}

pub fn manifest_path(ckpt: &Path) -> std::path::PathBuf {
    let mut os = ckpt.as_os_str().to_os_string();
    os.push(".manifest.json");
    std::path::PathBuf::from(os)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, CheckpointMeta)> {
    let mut f = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let mut ver = [0u8; 4];
    f.read_exact(&mut ver)?;
    let version = u32::from_le_bytes(ver);
    if version != CKPT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut dtype = [0u8; 1];
    f.read_exact(&mut dtype)?;
    if dtype[0] as usize != T::BYTES {
        return Err(Error::Format(format!(
            "checkpoint stores {}-byte values but this run uses {} ({})",
            dtype[0],
            T::BYTES,
            T::NAME
        )));
    }
    let count = read_u64(&mut f)? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u64(&mut f)? as usize;
        if name_len > 4096 {
            return Err(Error::Format(format!(
                "parameter name length {name_len} is implausible"
            )));
        }
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let value = read_tensor::<T>(&mut f)?;
        params.add(&name, value)?;
    }
    let meta_text = std::fs::read_to_string(manifest_path(path))
        .map_err(|e| Error::Data(format!("missing checkpoint manifest: {e}")))?;
    let meta: CheckpointMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::Format(format!("bad checkpoint manifest: {e}")))?;
    Ok((params, meta))
}

/// Manifest of one CLI run. Free of timestamps so re-runs are
/// bit-identical.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config_hash: String,
    pub seed: u64,
    pub engine_version: String,
    pub outputs: Vec<String>,
}

pub fn write_run_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Format(format!("cannot emit run manifest: {e}")))?;
    std::fs::write(dir.join("run_manifest.json"), json)?;
    Ok(())
}

pub fn sha256_hex(parts: &[&[u8]]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().iter().fold(String::new(), |mut s, b| {
        s.push_str(&format!("{b:02x}"));
        s
    })
}

// ── CSV emitters ─────────────────────────────────────────────────────

pub fn write_cost_csv(path: &Path, report: &CostReport) -> Result<()> {
    let mut out = String::from("node_id,kind,macs,params\n");
    for n in &report.per_node {
        out.push_str(&format!("{},{},{},{}\n", n.id, n.kind, n.macs, n.params));
    }
    out.push_str(&format!(
        "total,,{},{}\n",
        report.total_macs, report.total_params
    ));
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_cost_json(path: &Path, report: &CostReport) -> Result<()> {
    #[derive(Serialize)]
    struct NodeJson<'a> {
        id: &'a str,
        kind: &'a str,
        macs: u64,
        params: u64,
    }
    #[derive(Serialize)]
    struct ReportJson<'a> {
        per_node: Vec<NodeJson<'a>>,
        total_macs: u64,
        total_params: u64,
        #[serde(skip_serializing_if = "Option::is_none")]
        amortized_macs: Option<f64>,
    }
    let j = ReportJson {
        per_node: report
            .per_node
            .iter()
            .map(|n| NodeJson {
                id: &n.id,
                kind: n.kind,
                macs: n.macs,
                params: n.params,
            })
            .collect(),
        total_macs: report.total_macs,
        total_params: report.total_params,
        amortized_macs: report.amortized_macs,
    };
    let json = serde_json::to_string_pretty(&j)
        .map_err(|e| Error::Format(format!("cannot emit cost report: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

/// τ-sweep curve: one row per τ.
pub fn write_tau_curve_csv(
    path: &Path,
    rows: &[(usize, f64, f64, u64)], // (tau, error, amortized_macs, params)
) -> Result<()> {
    let mut out = String::from("tau,error,amortized_macs,params\n");
    for (tau, err, macs, params) in rows {
        out.push_str(&format!("{tau},{err},{macs},{params}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_acc,lr\n");
    for e in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch, e.train_loss, e.val_acc, e.lr
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Search log: route/filter vectors are `x`-separated so the CSV stays
/// single-delimiter.
pub fn write_search_csv(path: &Path, results: &[SearchResult]) -> Result<()> {
    let mut out = String::from("config_id,routes,filters,accuracy,params,macs,alpha\n");
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.config_id,
            join_x(&r.routes),
            join_x(&r.filters),
            r.accuracy,
            r.params,
            r.macs,
            r.alpha
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn join_x(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

/// Ensemble sweep: one row per operating threshold.
pub fn write_ensemble_curve_csv(path: &Path, rows: &[(f64, CurvePoint)]) -> Result<()> {
    let mut out = String::from("theta_op,error,amortized_macs,model_size\n");
    for (theta, p) in rows {
        out.push_str(&format!(
            "{theta},{},{},{}\n",
            p.error, p.expected_cost, p.model_size
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_baseline_csv(path: &Path, rows: &[(f64, f64, f64)]) -> Result<()> {
    let mut out = String::from("p,error,cost\n");
    for (p, err, cost) in rows {
        out.push_str(&format!("{p},{err},{cost}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Λ as CSV (plain numeric grid, row per layer-i unit).
pub fn write_matrix_csv(path: &Path, m: &Tensor<f64>) -> Result<()> {
    let (rows, cols) = m.dims2()?;
    let mut out = String::new();
    for r in 0..rows {
        let row: Vec<String> = (0..cols)
            .map(|c| m.data()[r * cols + c].to_string())
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Block assignment: `side,block,unit` rows plus permutation rows.
pub fn write_blocks_csv(path: &Path, blocks: &crate::analysis::BlockAssignment) -> Result<()> {
    let mut out = String::from("side,block,unit\n");
    for (b, members) in blocks.row_blocks.iter().enumerate() {
        for &u in members {
            out.push_str(&format!("row,{b},{u}\n"));
        }
    }
    for (b, members) in blocks.col_blocks.iter().enumerate() {
        for &u in members {
            out.push_str(&format!("col,{b},{u}\n"));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_layer_breakdown_csv(
    path: &Path,
    raw: &[(usize, u64)],
    normalized: &[(usize, f64)],
) -> Result<()> {
    let mut out = String::from("layer,macs,max_normalized\n");
    for ((layer, macs), (_, norm)) in raw.iter().zip(normalized) {
        out.push_str(&format!("{layer},{macs},{norm}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}
