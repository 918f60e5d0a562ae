//! On-disk artifact formats: embedding exports, cluster assignments and the
//! ground-truth group file used to recompute reports offline.
//!
//! An embedding export is a pair of files: `<stem>.ids.txt`, whose first line
//! is `COLORVAR-EMB v1 N D normalized={0|1}` followed by one id per line, and
//! `<stem>.f32`, the N×D values as row-major little-endian 32-bit floats.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterAssignment;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::EmbeddingMatrix;

const EMB_MAGIC: &str = "COLORVAR-EMB v1";

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `<stem>.ids.txt` and `<stem>.f32`; returns both paths.
pub fn write_embeddings(emb: &EmbeddingMatrix, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let ids_path = with_suffix(stem, ".ids.txt");
    let bin_path = with_suffix(stem, ".f32");
    let mut ids = format!("{EMB_MAGIC} {} {} normalized={}\n", emb.len(), emb.dim(), u8::from(emb.normalized));
    for id in &emb.ids {
        if id.contains('\n') {
            return Err(Error::validation("id", format!("{id:?} contains a newline")));
        }
        ids.push_str(id);
        ids.push('\n');
    }
    fs::write(&ids_path, ids).map_err(|e| Error::io(&ids_path, e))?;
    let bytes: Vec<u8> = emb.values.as_slice().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))?;
    Ok((ids_path, bin_path))
}

/// Reads an export back, given the stem used to write it.
pub fn read_embeddings(stem: &Path) -> Result<EmbeddingMatrix> {
    let ids_path = with_suffix(stem, ".ids.txt");
    let bin_path = with_suffix(stem, ".f32");
    let text = fs::read_to_string(&ids_path).map_err(|e| Error::io(&ids_path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let bad = |m: &str| Error::parse(ids_path.display().to_string(), m.to_string());
    let rest = header.strip_prefix(EMB_MAGIC).ok_or_else(|| bad("missing COLORVAR-EMB v1 header"))?;
    let fields: Vec<&str> = rest.split_whitespace().collect();
    let [n, d, flag] = fields[..] else {
        return Err(bad("header needs N, D and normalized flag"));
    };
    let n: usize = n.parse().map_err(|_| bad("N is not an integer"))?;
    let d: usize = d.parse().map_err(|_| bad("D is not an integer"))?;
    let normalized = match flag {
        "normalized=1" => true,
        "normalized=0" => false,
        _ => return Err(bad("normalized flag must be 0 or 1")),
    };
    let ids: Vec<String> = lines.map(str::to_string).collect();
    if ids.len() != n {
        return Err(bad(&format!("header says {n} ids, found {}", ids.len())));
    }
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if bytes.len() != n * d * 4 {
        return Err(Error::parse(bin_path.display().to_string(), format!("expected {} bytes, found {}", n * d * 4, bytes.len())));
    }
    let values: Vec<f64> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Ok(EmbeddingMatrix { ids, values: Matrix::from_vec(n, d, values)?, normalized })
}

#[derive(Serialize, Deserialize)]
struct AssignmentLine<'a> {
    id: std::borrow::Cow<'a, str>,
    cluster: i64,
}

fn write_lines<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(&item).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::parse(format!("{} line {}", path.display(), n + 1), e.to_string()))?;
        out.push(item);
    }
    Ok(out)
}

/// JSON lines `{"id": ..., "cluster": ...}` in row order.
pub fn write_assignments(path: &Path, assignment: &ClusterAssignment) -> Result<()> {
    write_lines(
        path,
        assignment.ids.iter().zip(&assignment.labels).map(|(id, &cluster)| AssignmentLine { id: id.as_str().into(), cluster }),
    )
}

pub fn read_assignments(path: &Path) -> Result<Vec<(String, i64)>> {
    let lines: Vec<AssignmentLine<'static>> = read_lines(path)?;
    Ok(lines.into_iter().map(|l| (l.id.into_owned(), l.cluster)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthLine {
    pub id: String,
    pub group: Option<String>,
}

/// JSON lines `{"id": ..., "group": ...}`; `group` is null when unlabeled.
pub fn write_truth(path: &Path, ids: &[String], groups: &[Option<String>]) -> Result<()> {
    if ids.len() != groups.len() {
        return Err(Error::Shape(format!("{} ids vs {} groups", ids.len(), groups.len())));
    }
    write_lines(path, ids.iter().zip(groups).map(|(id, g)| TruthLine { id: id.clone(), group: g.clone() }))
}

pub fn read_truth(path: &Path) -> Result<Vec<TruthLine>> {
    read_lines(path)
}

/// Aligns assignments to truth by id and returns (groups, labels) in truth order.
pub fn align_by_id(truth: &[TruthLine], assigned: &[(String, i64)]) -> Result<(Vec<Option<String>>, Vec<i64>)> {
    let mut map = std::collections::HashMap::new();
    for (id, c) in assigned {
        if map.insert(id.as_str(), *c).is_some() {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    if map.len() != truth.len() {
        return Err(Error::Shape(format!("{} assignments for {} truth records", map.len(), truth.len())));
    }
    let mut labels = Vec::with_capacity(truth.len());
    for t in truth {
        let c = map.get(t.id.as_str()).ok_or_else(|| Error::validation("assignments", format!("no cluster for id `{}`", t.id)))?;
        labels.push(*c);
    }
    Ok((truth.iter().map(|t| t.group.clone()).collect(), labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let values = Matrix::from_rows(&[vec![0.6, 0.8], vec![1.0, 0.0], vec![0.0, -1.0]]).unwrap();
        let emb = EmbeddingMatrix::new(vec!["a".into(), "b".into(), "c d".into()], values.clone(), true).unwrap();
        let stem = dir.path().join("emb");
        let (ids, bin) = write_embeddings(&emb, &stem).unwrap();
        let head = fs::read_to_string(&ids).unwrap();
        assert!(head.starts_with("COLORVAR-EMB v1 3 2 normalized=1\n"));
        assert_eq!(fs::metadata(bin).unwrap().len(), 24);
        let back = read_embeddings(&stem).unwrap();
        assert_eq!(back.ids, emb.ids);
        assert!(back.normalized);
        for (x, y) in back.values.as_slice().iter().zip(values.as_slice()) {
            assert!((x - y).abs() < 1e-7);
        }
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let emb = EmbeddingMatrix::new(vec!["a".into()], Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap(), false).unwrap();
        let stem = dir.path().join("e");
        let (_, bin) = write_embeddings(&emb, &stem).unwrap();
        fs::write(&bin, [0u8; 5]).unwrap();
        assert!(matches!(read_embeddings(&stem), Err(Error::Parse { .. })));
    }

    #[test]
    fn assignments_and_truth_align() {
        let dir = tempfile::tempdir().unwrap();
        let a = ClusterAssignment {
            ids: vec!["x".into(), "y".into(), "z".into()],
            labels: vec![0, -1, 0],
            algorithm: "dbscan".into(),
            params: serde_json::json!({}),
            converged: true,
        };
        let ap = dir.path().join("a.jsonl");
        write_assignments(&ap, &a).unwrap();
        assert_eq!(fs::read_to_string(&ap).unwrap().lines().next().unwrap(), r#"{"id":"x","cluster":0}"#);
        let tp = dir.path().join("t.jsonl");
        write_truth(&tp, &["z".into(), "x".into(), "y".into()], &[Some("g".into()), Some("g".into()), None]).unwrap();
        let (groups, labels) = align_by_id(&read_truth(&tp).unwrap(), &read_assignments(&ap).unwrap()).unwrap();
        assert_eq!(labels, vec![0, 0, -1]);
        assert_eq!(groups[2], None);
    }
}
