//! File formats around the core: CSV rows in, encoded caches, metrics,
//! checkpoints, audit lines. Column kinds follow the usual CTR layout:
//! `I*` headers are numeric fields, `C*` are categorical, `label` is the
//! click bit, and an optional `seg` column carries the segment id.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ussr_core::checkpoint::Checkpoint;
use ussr_core::encoding::{Dataset, FeatureStats, RawRow};
use ussr_core::tensor::Tensor;

enum ColumnKind {
    Dense,
    Sparse,
    Label,
    Segment,
}

fn classify_header(name: &str) -> Result<ColumnKind> {
    if name == "label" {
        Ok(ColumnKind::Label)
    } else if name == "seg" {
        Ok(ColumnKind::Segment)
    } else if name.starts_with('I') {
        Ok(ColumnKind::Dense)
    } else if name.starts_with('C') {
        Ok(ColumnKind::Sparse)
    } else {
        bail!("unknown column '{name}' (expected I*, C*, label, or seg)")
    }
}

pub fn read_rows(path: &Path) -> Result<Vec<RawRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;

    let mut dense_cols = Vec::new();
    let mut sparse_cols = Vec::new();
    let mut label_col = None;
    let mut seg_col = None;
    for (i, name) in reader.headers()?.iter().enumerate() {
        match classify_header(name).with_context(|| format!("{}", path.display()))? {
            ColumnKind::Dense => dense_cols.push(i),
            ColumnKind::Sparse => sparse_cols.push(i),
            ColumnKind::Label => label_col = Some(i),
            ColumnKind::Segment => seg_col = Some(i),
        }
    }
    let label_col =
        label_col.ok_or_else(|| anyhow::anyhow!("{}: no label column", path.display()))?;

    let mut rows = Vec::new();
    for (no, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("{} row {}", path.display(), no + 1))?;
        let cell = |i: usize| record.get(i).unwrap_or("");
        let mut dense = Vec::with_capacity(dense_cols.len());
        for &i in &dense_cols {
            let raw = cell(i);
            // Missing numeric fields read as zero, matching common CTR dumps.
            let v = if raw.is_empty() {
                0.0
            } else {
                raw.parse::<f64>().with_context(|| {
                    format!("{} row {}: bad numeric value '{raw}'", path.display(), no + 1)
                })?
            };
            dense.push(v);
        }
        let sparse = sparse_cols.iter().map(|&i| cell(i).to_string()).collect();
        let label: u8 = cell(label_col).parse().with_context(|| {
            format!("{} row {}: bad label '{}'", path.display(), no + 1, cell(label_col))
        })?;
        if label > 1 {
            bail!("{} row {}: label must be 0 or 1, got {label}", path.display(), no + 1);
        }
        let segment = match seg_col {
            None => 0,
            Some(i) => cell(i).parse().with_context(|| {
                format!("{} row {}: bad segment '{}'", path.display(), no + 1, cell(i))
            })?,
        };
        rows.push(RawRow { dense, sparse, label, segment });
    }
    if rows.is_empty() {
        bail!("{}: no data rows", path.display());
    }
    Ok(rows)
}

/// Reads segment feature vectors: header `seg,u_0,...`, one row per
/// segment, ids covering `0..n` with no gaps.
pub fn read_segment_features(path: &Path, d_u: usize) -> Result<Vec<Tensor>> {
    let mut reader = csv::ReaderBuilder::new()
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let headers = reader.headers()?.clone();
    if headers.get(0) != Some("seg") {
        bail!("{}: first column must be seg", path.display());
    }
    if headers.len() != d_u + 1 {
        bail!("{}: expected {} feature columns, found {}", path.display(), d_u, headers.len() - 1);
    }
    for (j, name) in headers.iter().skip(1).enumerate() {
        let want = format!("u_{j}");
        if name != want {
            bail!("{}: column {} named '{name}', expected '{want}'", path.display(), j + 1);
        }
    }

    let mut by_id: Vec<(u32, Vec<f64>)> = Vec::new();
    for (no, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("{} row {}", path.display(), no + 1))?;
        let id: u32 = record
            .get(0)
            .unwrap_or("")
            .parse()
            .with_context(|| format!("{} row {}: bad segment id", path.display(), no + 1))?;
        let mut u = Vec::with_capacity(d_u);
        for j in 0..d_u {
            let raw = record.get(j + 1).unwrap_or("");
            u.push(raw.parse::<f64>().with_context(|| {
                format!("{} row {}: bad value '{raw}'", path.display(), no + 1)
            })?);
        }
        by_id.push((id, u));
    }
    by_id.sort_by_key(|&(id, _)| id);
    let mut out = Vec::with_capacity(by_id.len());
    for (want, (id, u)) in by_id.into_iter().enumerate() {
        if id as usize != want {
            bail!("{}: segment ids must cover 0..n, missing {want}", path.display());
        }
        out.push(Tensor::new(vec![1, d_u], u)?);
    }
    if out.is_empty() {
        bail!("{}: no segments", path.display());
    }
    Ok(out)
}

/// Writes via a sibling temp file and rename, so a crash never leaves a
/// half-written artifact under the final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_atomic(path, &ds.to_bytes())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Dataset::from_bytes(&bytes)?)
}

pub fn save_stats(path: &Path, stats: &FeatureStats) -> Result<()> {
    write_atomic(path, &stats.to_bytes())
}

pub fn load_stats(path: &Path) -> Result<FeatureStats> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(FeatureStats::from_bytes(&bytes)?)
}

pub fn encode_rows(stats: &FeatureStats, rows: &[RawRow]) -> Result<Dataset> {
    let mut examples = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        examples.push(stats.transform(row, i)?);
    }
    Ok(Dataset::new(stats.n_dense(), stats.n_sparse(), examples)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub phase: String,
    pub loss: f64,
    pub val_auc: f64,
    pub wall_seconds: f64,
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::from("epoch,phase,loss,val_auc,wall_seconds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.phase, r.loss, r.val_auc, r.wall_seconds
        ));
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_scores(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some("score") {
        bail!("{}: expected a score header line", path.display());
    }
    let mut out = Vec::new();
    for (no, line) in lines.enumerate() {
        out.push(
            line.parse::<f64>()
                .with_context(|| format!("{} line {}: bad score", path.display(), no + 2))?,
        );
    }
    Ok(out)
}

pub fn write_scores(path: &Path, scores: &[f64]) -> Result<()> {
    let mut out = String::from("score\n");
    for s in scores {
        out.push_str(&format!("{s}\n"));
    }
    write_atomic(path, out.as_bytes())
}

/// Appends one timestamped line to the run's audit log.
pub fn append_audit(path: &Path, line: &str) -> Result<()> {
    use std::io::Write;
    let stamp = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    writeln!(f, "{stamp} {line}")?;
    Ok(())
}
