//! Dataset-bundle ingestion, model checkpoints, and result serialization.
//!
//! A dataset lives in a directory holding `edges.tsv` (one undirected
//! edge per line), node features (`features.csv`, or `features.f32` — a
//! little-endian binary with a 12-byte header), `labels.csv`
//! (`node,class` lines), and `meta.json` with the expected counts.
//! Checkpoints and run reports are versioned JSON documents; sweep
//! results are CSV with floats printed to 17 significant digits so they
//! re-parse to the bit they were written from.

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::complexity::ComplexityReport;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::models::Model;
use crate::tensor::DenseMatrix;
use crate::train::{EpochRecord, TrainConfig};

/// Checkpoint schema version this build reads and writes.
pub const CHECKPOINT_VERSION: u32 = 1;
/// Run-report schema version this build reads and writes.
pub const RUN_REPORT_VERSION: u32 = 1;
/// Magic bytes opening a binary feature file.
const FEATURE_MAGIC: &[u8; 4] = b"GSF1";

/// Expected dataset counts, stored as `meta.json` in a bundle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// Node count.
    pub n: usize,
    /// Feature dimension.
    pub d: usize,
    /// Class count.
    pub c: usize,
    /// Human-readable dataset name.
    pub name: String,
}

/// A parsed bundle: the validated graph plus any ingestion warnings
/// (skipped self-loops, collapsed duplicate edges). The library leaves
/// deciding what to do with warnings to the caller.
#[derive(Debug)]
pub struct LoadedDataset {
    /// Validated graph.
    pub graph: Graph,
    /// The bundle's own metadata record.
    pub meta: DatasetMeta,
    /// Human-readable notes about repaired input.
    pub warnings: Vec<String>,
}

/// On-disk encoding for node features written by [`save_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureFormat {
    /// `features.csv`, floats at 17 significant digits (lossless for f64).
    Csv,
    /// `features.f32`, binary single precision with the `GSF1` header.
    F32,
}

fn data_err(file: &str, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::data(format!("{file}:{line}: {msg}"))
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))
}

/// Loads a dataset bundle from `dir`.
///
/// Duplicate and reverse-orientation edges are collapsed, and
/// self-loops are skipped; both leave a note in
/// [`LoadedDataset::warnings`]. Binary features are preferred when both
/// encodings are present.
///
/// # Errors
///
/// Returns [`Error::Data`] with file and line number on malformed
/// input, on ids outside `[0, n)`, and on any count that disagrees with
/// `meta.json`.
pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let meta: DatasetMeta = serde_json::from_str(&read_to_string(&dir.join("meta.json"))?)
        .map_err(|e| Error::data(format!("meta.json: {e}")))?;
    if meta.n == 0 || meta.d == 0 || meta.c == 0 {
        return Err(Error::data(format!(
            "meta.json: n={}, d={}, c={} must all be positive",
            meta.n, meta.d, meta.c
        )));
    }
    let mut warnings = Vec::new();

    // Edges: two integer columns per line.
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for (i, line) in read_to_string(&dir.join("edges.tsv"))?.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split_whitespace();
        let (a, b) = match (cols.next(), cols.next(), cols.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => {
                return Err(data_err(
                    "edges.tsv",
                    lineno,
                    format!("expected two integer columns, got {line:?}"),
                ))
            }
        };
        let a: usize = a
            .parse()
            .map_err(|e| data_err("edges.tsv", lineno, format!("bad node id {a:?}: {e}")))?;
        let b: usize = b
            .parse()
            .map_err(|e| data_err("edges.tsv", lineno, format!("bad node id {b:?}: {e}")))?;
        if a >= meta.n || b >= meta.n {
            return Err(data_err(
                "edges.tsv",
                lineno,
                format!("edge ({a}, {b}) out of range for n={}", meta.n),
            ));
        }
        if a == b {
            warnings.push(format!("edges.tsv:{lineno}: skipped self-loop on node {a}"));
            continue;
        }
        edges.push((a.min(b), a.max(b)));
    }
    edges.sort_unstable();
    let before = edges.len();
    edges.dedup();
    if edges.len() < before {
        warnings.push(format!(
            "edges.tsv: collapsed {} duplicate/reverse edge lines",
            before - edges.len()
        ));
    }

    // Features: binary wins when both files exist.
    let f32_path = dir.join("features.f32");
    let features = if f32_path.exists() {
        read_features_f32(&f32_path, meta.n, meta.d)?
    } else {
        read_features_csv(&dir.join("features.csv"), meta.n, meta.d)?
    };

    // Labels: one `node,class` line per node, ids dense in [0, n).
    let mut labels = vec![usize::MAX; meta.n];
    let label_text = read_to_string(&dir.join("labels.csv"))?;
    for (i, line) in label_text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (id, class) = line.split_once(',').ok_or_else(|| {
            data_err("labels.csv", lineno, format!("expected `node,class`, got {line:?}"))
        })?;
        let id: usize = id
            .trim()
            .parse()
            .map_err(|e| data_err("labels.csv", lineno, format!("bad node id {id:?}: {e}")))?;
        let class: usize = class.trim().parse().map_err(|e| {
            data_err("labels.csv", lineno, format!("bad class id {class:?}: {e}"))
        })?;
        if id >= meta.n {
            return Err(data_err(
                "labels.csv",
                lineno,
                format!("node id {id} out of range for n={}", meta.n),
            ));
        }
        if class >= meta.c {
            return Err(data_err(
                "labels.csv",
                lineno,
                format!("class id {class} out of range for c={}", meta.c),
            ));
        }
        if labels[id] != usize::MAX {
            return Err(data_err("labels.csv", lineno, format!("node {id} labeled twice")));
        }
        labels[id] = class;
    }
    if let Some(v) = labels.iter().position(|&y| y == usize::MAX) {
        return Err(Error::data(format!("labels.csv: node {v} has no label")));
    }

    let graph = Graph::new(features, edges, labels, meta.c)?;
    Ok(LoadedDataset {
        graph,
        meta,
        warnings,
    })
}

fn read_features_csv(path: &Path, n: usize, d: usize) -> Result<DenseMatrix> {
    let text = read_to_string(path)?;
    let mut rows: Vec<f64> = Vec::with_capacity(n * d);
    let mut n_rows = 0usize;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut count = 0usize;
        for field in line.split(',') {
            let x: f64 = field.trim().parse().map_err(|e| {
                data_err("features.csv", lineno, format!("bad float {field:?}: {e}"))
            })?;
            rows.push(x);
            count += 1;
        }
        if count != d {
            return Err(data_err(
                "features.csv",
                lineno,
                format!("expected {d} columns, got {count}"),
            ));
        }
        n_rows += 1;
    }
    if n_rows != n {
        return Err(Error::data(format!(
            "features.csv: {n_rows} rows, meta.json says n={n}"
        )));
    }
    DenseMatrix::from_vec(n, d, rows)
}

fn read_features_f32(path: &Path, n: usize, d: usize) -> Result<DenseMatrix> {
    let bytes =
        fs::read(path).map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::data(
            "features.f32: missing GSF1 header".to_string(),
        ));
    }
    let hn = u32::from_le_bytes(bytes[4..8].try_into().expect("4-byte slice")) as usize;
    let hd = u32::from_le_bytes(bytes[8..12].try_into().expect("4-byte slice")) as usize;
    if hn != n || hd != d {
        return Err(Error::data(format!(
            "features.f32: header says {hn}x{hd}, meta.json says {n}x{d}"
        )));
    }
    let expected = 12 + 4 * n * d;
    if bytes.len() != expected {
        return Err(Error::data(format!(
            "features.f32: {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(n * d);
    for chunk in bytes[12..].chunks_exact(4) {
        data.push(f64::from(f32::from_le_bytes(
            chunk.try_into().expect("4-byte chunk"),
        )));
    }
    DenseMatrix::from_vec(n, d, data)
}

/// Prints a float with 17 significant digits, enough to reproduce the
/// exact f64 bit pattern on re-parse.
#[must_use]
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes a graph out as a dataset bundle in `dir` (created if absent).
///
/// # Errors
///
/// Returns [`Error::Io`] on filesystem failures.
pub fn save_dataset(g: &Graph, name: &str, dir: &Path, format: FeatureFormat) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = DatasetMeta {
        n: g.n_nodes(),
        d: g.feature_dim(),
        c: g.num_classes(),
        name: name.to_string(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;

    let mut edges = String::new();
    for &(a, b) in g.edges() {
        edges.push_str(&format!("{a}\t{b}\n"));
    }
    fs::write(dir.join("edges.tsv"), edges)?;

    let mut labels = String::new();
    for (v, &y) in g.labels().iter().enumerate() {
        labels.push_str(&format!("{v},{y}\n"));
    }
    fs::write(dir.join("labels.csv"), labels)?;

    // A bundle carries exactly one feature encoding; drop any stale
    // sibling so the loader's binary-first preference cannot resurrect
    // an old file.
    let stale = match format {
        FeatureFormat::Csv => dir.join("features.f32"),
        FeatureFormat::F32 => dir.join("features.csv"),
    };
    if stale.exists() {
        fs::remove_file(stale)?;
    }

    let x = g.features();
    match format {
        FeatureFormat::Csv => {
            let mut out = String::new();
            for v in 0..x.rows() {
                let fields: Vec<String> = x.row(v).iter().map(|&f| format_float(f)).collect();
                out.push_str(&fields.join(","));
                out.push('\n');
            }
            fs::write(dir.join("features.csv"), out)?;
        }
        FeatureFormat::F32 => {
            let mut bytes = Vec::with_capacity(12 + 4 * x.rows() * x.cols());
            bytes.extend_from_slice(FEATURE_MAGIC);
            bytes.extend_from_slice(&u32::try_from(x.rows()).expect("node count fits u32").to_le_bytes());
            bytes.extend_from_slice(&u32::try_from(x.cols()).expect("feature dim fits u32").to_le_bytes());
            for &f in x.data() {
                bytes.extend_from_slice(&(f as f32).to_le_bytes());
            }
            fs::write(dir.join("features.f32"), bytes)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------

/// Construction dimensions a checkpoint needs to rebuild its model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CheckpointDims {
    /// Input feature dimension.
    pub in_dim: usize,
    /// Output class count.
    pub out_dim: usize,
    /// Undirected edge count (for learnable edge masks).
    pub n_undirected: usize,
}

#[derive(Serialize, Deserialize)]
struct StoredParam {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    config: TrainConfig,
    config_hash: String,
    dims: CheckpointDims,
    params: Vec<StoredParam>,
}

/// FNV-1a hash of the canonical JSON encoding of a config, hex-encoded.
/// Stored inside checkpoints so a tampered or mismatched config is
/// caught at load time.
///
/// # Errors
///
/// Propagates JSON encoding failures.
pub fn config_hash(config: &TrainConfig) -> Result<String> {
    let json = serde_json::to_string(config)?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in json.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    Ok(format!("{h:016x}"))
}

/// Serializes a model, its training config, and its construction
/// dimensions to a versioned JSON checkpoint.
///
/// # Errors
///
/// Returns [`Error::Io`] or [`Error::Json`] on write failures.
pub fn save_checkpoint(
    model: &dyn Model,
    config: &TrainConfig,
    dims: &CheckpointDims,
    path: &Path,
) -> Result<()> {
    let params = model
        .param_names()
        .iter()
        .zip(model.params())
        .map(|(name, p)| StoredParam {
            name: name.clone(),
            rows: p.rows(),
            cols: p.cols(),
            data: p.data().to_vec(),
        })
        .collect();
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        config: config.clone(),
        config_hash: config_hash(config)?,
        dims: *dims,
        params,
    };
    let mut out = fs::File::create(path)?;
    out.write_all(serde_json::to_string(&file)?.as_bytes())?;
    Ok(())
}

/// Rebuilds a model from a checkpoint written by [`save_checkpoint`],
/// restoring every parameter bit-exactly.
///
/// # Errors
///
/// Returns [`Error::Data`] on a version or config-hash mismatch, or
/// when stored parameters disagree with the rebuilt model's names or
/// shapes.
pub fn load_checkpoint(path: &Path) -> Result<(Box<dyn Model>, TrainConfig, CheckpointDims)> {
    let file: CheckpointFile = serde_json::from_str(&read_to_string(path)?)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(Error::data(format!(
            "checkpoint format version {}, this build reads {CHECKPOINT_VERSION}",
            file.format_version
        )));
    }
    let expected = config_hash(&file.config)?;
    if file.config_hash != expected {
        return Err(Error::data(format!(
            "checkpoint config hash {} does not match its config (expected {expected})",
            file.config_hash
        )));
    }
    let mut model = file.config.model.build(
        file.dims.in_dim,
        file.dims.out_dim,
        file.dims.n_undirected,
        file.config.dropout,
        file.config.seed,
    )?;
    let names = model.param_names();
    if names.len() != file.params.len() {
        return Err(Error::data(format!(
            "checkpoint holds {} parameters, model expects {}",
            file.params.len(),
            names.len()
        )));
    }
    for (stored, (name, param)) in file
        .params
        .iter()
        .zip(names.iter().zip(model.params_mut()))
    {
        if &stored.name != name {
            return Err(Error::data(format!(
                "checkpoint parameter {:?} where model expects {name:?}",
                stored.name
            )));
        }
        if stored.rows != param.rows()
            || stored.cols != param.cols()
            || stored.data.len() != stored.rows * stored.cols
        {
            return Err(Error::data(format!(
                "parameter {name:?}: stored {}x{} ({} values), model expects {}x{}",
                stored.rows,
                stored.cols,
                stored.data.len(),
                param.rows(),
                param.cols()
            )));
        }
        param.data_mut().copy_from_slice(&stored.data);
    }
    Ok((model, file.config, file.dims))
}

// ---------------------------------------------------------------------
// CSV and JSON-lines emitters
// ---------------------------------------------------------------------

/// Writes a CSV of float rows under a fixed header, 17 significant
/// digits per value. An empty row set produces a header-only file.
///
/// # Errors
///
/// Returns [`Error::Invalid`] when a row's width disagrees with the
/// header, [`Error::Io`] on write failures.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(Error::invalid(format!(
                "CSV row {i} has {} values under a {}-column header",
                row.len(),
                header.len()
            )));
        }
        let fields: Vec<String> = row.iter().map(|&x| format_float(x)).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parses a CSV written by [`write_csv`] back into header and rows.
///
/// # Errors
///
/// Returns [`Error::Data`] with a line number on malformed content.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header_line) = lines
        .next()
        .ok_or_else(|| Error::data("CSV file is empty".to_string()))?;
    let header: Vec<String> = header_line.split(',').map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::with_capacity(header.len());
        for field in line.split(',') {
            row.push(field.trim().parse::<f64>().map_err(|e| {
                data_err("csv", i + 1, format!("bad float {field:?}: {e}"))
            })?);
        }
        if row.len() != header.len() {
            return Err(data_err(
                "csv",
                i + 1,
                format!("{} values under a {}-column header", row.len(), header.len()),
            ));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// Writes one JSON document per line (e.g., per-epoch records).
///
/// # Errors
///
/// Returns [`Error::Io`] or [`Error::Json`] on failures.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a JSON-lines file written by [`write_jsonl`].
///
/// # Errors
///
/// Returns [`Error::Data`] with the line number on a malformed line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = read_to_string(path)?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        items.push(
            serde_json::from_str(line).map_err(|e| data_err("jsonl", i + 1, e))?,
        );
    }
    Ok(items)
}

// ---------------------------------------------------------------------
// Run reports
// ---------------------------------------------------------------------

/// Headline numbers of a finished run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalMetrics {
    /// Training accuracy of the returned snapshot.
    pub train_acc: f64,
    /// Validation accuracy of the returned snapshot.
    pub val_acc: f64,
    /// Test accuracy of the returned snapshot.
    pub test_acc: f64,
    /// |test error − train error| of the snapshot.
    pub generalization_gap: f64,
    /// Epoch the snapshot was taken at.
    pub best_epoch: usize,
    /// Epochs actually executed (early stopping may cut the cap short).
    pub epochs_run: usize,
}

/// One generalization-bound evaluation, labeled by which bound it is.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundEvaluation {
    /// Which bound ("gcn", "gcn-sqrt", "gat", "gat-multihead", "gt").
    pub bound: String,
    /// Effective-edge counts fed into it, layer by layer.
    pub eta: Vec<usize>,
    /// The bound's value.
    pub value: f64,
}

/// Everything a training run leaves behind, as one JSON document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    /// Schema version ([`RUN_REPORT_VERSION`]).
    pub schema_version: u32,
    /// Exact configuration of the run.
    pub config: TrainConfig,
    /// Per-epoch trace.
    pub records: Vec<EpochRecord>,
    /// Snapshot metrics.
    pub final_metrics: FinalMetrics,
    /// Structural-complexity summary of the snapshot's forward pass.
    pub complexity: ComplexityReport,
    /// Closed-form bound evaluations, when requested.
    pub bounds: Vec<BoundEvaluation>,
}

/// Writes a run report, first checking that every float in it is
/// finite — a report with NaN/∞ in it indicates an upstream bug and is
/// rejected rather than persisted.
///
/// # Errors
///
/// Returns [`Error::Invalid`] naming the offending field when a
/// non-finite float appears, otherwise I/O and JSON errors.
pub fn write_run_report(report: &RunReport, path: &Path) -> Result<()> {
    let value = serde_json::to_value(report)?;
    let mut trail = String::from("$");
    assert_finite_json(&value, &mut trail)?;
    fs::write(path, serde_json::to_string_pretty(&value)?)?;
    Ok(())
}

/// Reads a run report, enforcing the schema version.
///
/// # Errors
///
/// Returns [`Error::Data`] on a version mismatch or malformed JSON.
pub fn read_run_report(path: &Path) -> Result<RunReport> {
    let report: RunReport = serde_json::from_str(&read_to_string(path)?)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    if report.schema_version != RUN_REPORT_VERSION {
        return Err(Error::data(format!(
            "run-report schema version {}, this build reads {RUN_REPORT_VERSION}",
            report.schema_version
        )));
    }
    Ok(report)
}

fn assert_finite_json(value: &serde_json::Value, trail: &mut String) -> Result<()> {
    match value {
        serde_json::Value::Number(x) => {
            // serde_json stores non-finite floats as null, so a Number is
            // finite by construction; guard anyway for forward-compat.
            if x.as_f64().is_some_and(|f| !f.is_finite()) {
                return Err(Error::invalid(format!("non-finite value at {trail}")));
            }
            Ok(())
        }
        serde_json::Value::Null => Err(Error::invalid(format!(
            "null at {trail} (a non-finite float serializes as null)"
        ))),
        serde_json::Value::Array(items) => {
            for (i, item) in items.iter().enumerate() {
                let len = trail.len();
                trail.push_str(&format!("[{i}]"));
                assert_finite_json(item, trail)?;
                trail.truncate(len);
            }
            Ok(())
        }
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                let len = trail.len();
                trail.push_str(&format!(".{k}"));
                assert_finite_json(v, trail)?;
                trail.truncate(len);
            }
            Ok(())
        }
        _ => Ok(()),
    }
}
