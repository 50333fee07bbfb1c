//! On-disk formats.
//!
//! Embedding and logits files come in two flavours:
//!
//! * text: comma-separated values, one sample per line, optionally preceded
//!   by a single header line starting with `#`;
//! * binary: `b"PNML"`, version byte `0x01`, row count `N` and column count
//!   `M` as little-endian `u64`, then `N*M` little-endian `f32` values in
//!   row-major order.
//!
//! Training statistics are stored as `b"PNST"`, version `0x01`, `M: u64`,
//! `M` eigenvalues, `M*M` eigenvector entries (row-major, eigenvectors are
//! columns), `n_train: u64`, a flags byte and `rank: u64`. All floats in the
//! stats file are little-endian `f64`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::erm::{softmax, LabelMatrix};
use crate::error::{invalid, Error, Result};
use crate::linalg::{build_stats, EigenBasis, EmbeddingMatrix, PnmlStats};
use crate::metrics::DetectionReport;
use crate::regret::{ProbVector, RegretScore};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"PNML";
pub const STATS_MAGIC: &[u8; 4] = b"PNST";
pub const FORMAT_VERSION: u8 = 0x01;

const EMBEDDING_HEADER_LEN: usize = 4 + 1 + 8 + 8;
const FLAG_NORMALIZED: u8 = 0b1;

/// Significant digits kept in text output.
pub const TEXT_DIGITS: usize = 12;

fn format_err<T>(location: impl Into<String>, message: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        location: location.into(),
        message: message.into(),
    })
}

fn at_offset(offset: usize) -> String {
    format!("byte offset {offset}")
}

/// Shortest decimal that round-trips the value rounded to 12 significant
/// digits.
pub fn format_float(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    let rounded: f64 = format!("{:.*e}", TEXT_DIGITS - 1, v)
        .parse()
        .expect("formatted float parses");
    let mag = rounded.abs();
    if rounded == 0.0 || (1e-5..1e15).contains(&mag) {
        format!("{rounded}")
    } else {
        format!("{rounded:e}")
    }
}

/// Encoding used when writing matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Text,
    Binary,
}

impl MatrixFormat {
    /// Binary for `.pnml`/`.bin` extensions, text otherwise.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("pnml") | Some("bin") => Self::Binary,
            _ => Self::Text,
        }
    }
}

/// Raw row-major matrix as read from a file, before domain validation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Parses either format, picking binary when the data starts with the magic.
pub fn parse_matrix(bytes: &[u8]) -> Result<RawMatrix> {
    if bytes.starts_with(EMBEDDING_MAGIC) {
        parse_binary_matrix(bytes)
    } else {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::Format {
            location: at_offset(e.valid_up_to()),
            message: "text file is not valid UTF-8".into(),
        })?;
        parse_text_matrix(text)
    }
}

fn read_u64(bytes: &[u8], offset: usize, what: &str) -> Result<u64> {
    match bytes.get(offset..offset + 8) {
        Some(b) => Ok(u64::from_le_bytes(b.try_into().expect("8 bytes"))),
        None => format_err(at_offset(offset), format!("truncated header: missing {what}")),
    }
}

fn parse_binary_matrix(bytes: &[u8]) -> Result<RawMatrix> {
    match bytes.get(4) {
        None => return format_err(at_offset(4), "truncated header: missing version byte"),
        Some(&v) if v != FORMAT_VERSION => {
            return format_err(at_offset(4), format!("unsupported format version 0x{v:02x}"))
        }
        _ => {}
    }
    let rows = read_u64(bytes, 5, "row count")? as usize;
    let cols = read_u64(bytes, 13, "column count")? as usize;
    let payload = &bytes[EMBEDDING_HEADER_LEN..];
    let expected = rows.checked_mul(cols).and_then(|n| n.checked_mul(4));
    if expected != Some(payload.len()) {
        return format_err(
            at_offset(EMBEDDING_HEADER_LEN),
            format!(
                "header declares {rows}x{cols} values but payload holds {} bytes",
                payload.len()
            ),
        );
    }
    let mut data = Vec::with_capacity(rows * cols);
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return format_err(at_offset(EMBEDDING_HEADER_LEN + 4 * k), "non-finite value");
        }
        data.push(f64::from(v));
    }
    Ok(RawMatrix { rows, cols, data })
}

fn parse_text_matrix(text: &str) -> Result<RawMatrix> {
    let mut cols = None;
    let mut rows = 0;
    let mut data = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim();
        if idx == 0 && line.starts_with('#') {
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let mut n = 0;
        for (k, field) in line.split(',').enumerate() {
            let v: f64 = field.trim().parse().or_else(|_| {
                format_err(
                    format!("line {lineno}, column {}", k + 1),
                    format!("cannot parse {:?} as a number", field.trim()),
                )
            })?;
            if !v.is_finite() {
                return format_err(format!("line {lineno}, column {}", k + 1), "non-finite value");
            }
            data.push(v);
            n += 1;
        }
        match cols {
            None => cols = Some(n),
            Some(c) if c != n => {
                return format_err(
                    format!("line {lineno}"),
                    format!("row has {n} values, expected {c}"),
                )
            }
            _ => {}
        }
        rows += 1;
    }
    match cols {
        Some(cols) => Ok(RawMatrix { rows, cols, data }),
        None => format_err("line 1", "file contains no data rows"),
    }
}

pub fn encode_text_matrix(rows: usize, cols: usize, data: &[f64]) -> Vec<u8> {
    let mut out = String::new();
    for r in 0..rows {
        let line: Vec<String> = data[r * cols..(r + 1) * cols]
            .iter()
            .map(|&v| format_float(v))
            .collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out.into_bytes()
}

pub fn encode_binary_matrix(rows: usize, cols: usize, data: &[f64]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(EMBEDDING_HEADER_LEN + 4 * data.len());
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for (k, &v) in data.iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return invalid(format!("value {v} at position {k} does not fit in 32-bit float"));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_matrix(m: &EmbeddingMatrix, format: MatrixFormat) -> Result<Vec<u8>> {
    match format {
        MatrixFormat::Text => Ok(encode_text_matrix(m.rows(), m.cols(), m.data())),
        MatrixFormat::Binary => encode_binary_matrix(m.rows(), m.cols(), m.data()),
    }
}

pub fn parse_embeddings(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    let raw = parse_matrix(bytes)?;
    EmbeddingMatrix::new(raw.rows, raw.cols, raw.data)
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    parse_embeddings(&std::fs::read(path)?)
}

/// Parses a logits file and applies softmax row by row.
pub fn parse_logits(bytes: &[u8]) -> Result<Vec<ProbVector>> {
    let raw = parse_matrix(bytes)?;
    if raw.cols < 2 {
        return invalid(format!("logits need at least 2 classes, got {}", raw.cols));
    }
    raw.data.chunks_exact(raw.cols).map(softmax).collect()
}

pub fn read_logits(path: &Path) -> Result<Vec<ProbVector>> {
    parse_logits(&std::fs::read(path)?)
}

/// Class labels, one non-negative integer per line; optional `#` header.
pub fn parse_labels(text: &str) -> Result<LabelMatrix> {
    let mut classes = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (idx == 0 && line.starts_with('#')) {
            continue;
        }
        let c: usize = line.parse().or_else(|_| {
            format_err(format!("line {}", idx + 1), format!("cannot parse {line:?} as a class index"))
        })?;
        classes.push(c);
    }
    let n_classes = classes.iter().max().map_or(0, |m| m + 1);
    LabelMatrix::from_indices(classes, n_classes.max(2))
}

pub fn read_labels(path: &Path) -> Result<LabelMatrix> {
    let bytes = std::fs::read(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Format {
        location: at_offset(e.valid_up_to()),
        message: "labels file is not valid UTF-8".into(),
    })?;
    parse_labels(text)
}

pub fn encode_stats(stats: &PnmlStats) -> Vec<u8> {
    let basis = stats.basis();
    let m = basis.dim();
    let mut out = Vec::with_capacity(4 + 1 + 8 + 8 * m * (m + 1) + 8 + 1 + 8);
    out.extend_from_slice(STATS_MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(m as u64).to_le_bytes());
    for v in basis.eigvals() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for r in 0..m {
        for c in 0..m {
            out.extend_from_slice(&basis.eigvecs()[(r, c)].to_le_bytes());
        }
    }
    out.extend_from_slice(&(stats.n_train() as u64).to_le_bytes());
    let flags = if stats.normalized_inputs() { FLAG_NORMALIZED } else { 0 };
    out.push(flags);
    out.extend_from_slice(&(stats.rank() as u64).to_le_bytes());
    out
}

pub fn decode_stats(bytes: &[u8]) -> Result<PnmlStats> {
    if !bytes.starts_with(STATS_MAGIC) {
        return format_err(at_offset(0), "missing PNST magic");
    }
    match bytes.get(4) {
        None => return format_err(at_offset(4), "truncated header: missing version byte"),
        Some(&v) if v != FORMAT_VERSION => {
            return format_err(at_offset(4), format!("unsupported format version 0x{v:02x}"))
        }
        _ => {}
    }
    let m = read_u64(bytes, 5, "dimension")? as usize;
    let floats = m
        .checked_mul(m + 1)
        .filter(|&n| n.checked_mul(8).is_some())
        .ok_or_else(|| Error::Format {
            location: at_offset(5),
            message: format!("dimension {m} is too large"),
        })?;
    let expected = 13 + 8 * floats + 8 + 1 + 8;
    if bytes.len() != expected {
        return format_err(
            at_offset(bytes.len().min(expected)),
            format!("stats file should be {expected} bytes for dimension {m}, found {}", bytes.len()),
        );
    }
    let f = |k: usize| f64::from_le_bytes(bytes[13 + 8 * k..21 + 8 * k].try_into().expect("8 bytes"));
    let eigvals: Vec<f64> = (0..m).map(f).collect();
    let eigvecs = DMatrix::from_row_iterator(m, m, (m..m * (m + 1)).map(f));
    let tail = 13 + 8 * floats;
    let n_train = read_u64(bytes, tail, "training count")? as usize;
    let flags = bytes[tail + 8];
    if flags & !FLAG_NORMALIZED != 0 {
        return format_err(at_offset(tail + 8), format!("unknown flags 0x{flags:02x}"));
    }
    let rank = read_u64(bytes, tail + 9, "rank")? as usize;
    let basis = EigenBasis::from_parts(eigvecs, eigvals, rank).map_err(|e| Error::Format {
        location: at_offset(13),
        message: e.to_string(),
    })?;
    Ok(build_stats(basis, n_train).with_normalized_inputs(flags & FLAG_NORMALIZED != 0))
}

pub fn read_stats(path: &Path) -> Result<PnmlStats> {
    decode_stats(&std::fs::read(path)?)
}

/// SHA-256 of the serialized stats, hex encoded.
pub fn stats_fingerprint(stats: &PnmlStats) -> String {
    hex::encode(Sha256::digest(encode_stats(stats)))
}

/// Per-sample score table: `index,xtg,regret,baseline,pnml_max`.
pub fn encode_score_csv(scores: &[RegretScore]) -> Vec<u8> {
    let mut out = String::from("index,xtg,regret,baseline,pnml_max\n");
    for (i, s) in scores.iter().enumerate() {
        out.push_str(&format!(
            "{i},{},{},{},{}\n",
            format_float(s.xtg),
            format_float(s.regret),
            format_float(s.baseline),
            format_float(s.pnml_posterior.max())
        ));
    }
    out.into_bytes()
}

/// CSV with a header line and one formatted row per record.
pub fn encode_csv<const N: usize>(header: [&str; N], rows: impl IntoIterator<Item = [f64; N]>) -> Vec<u8> {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|&v| format_float(v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out.into_bytes()
}

/// Evaluation report. The top-level metrics describe the first scorer; with
/// several scorers every one of them also appears under `methods`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    #[serde(flatten)]
    pub primary: DetectionReport,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub methods: BTreeMap<String, DetectionReport>,
}

impl ReportFile {
    pub fn to_json(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("report serializes");
        v.push(b'\n');
        v
    }
}

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place, so a failed write never leaves a partial output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{decompose, DEFAULT_RANK_TOL_FACTOR};
    use proptest::prelude::*;

    #[test]
    fn float_formatting() {
        assert_eq!(format_float(0.5), "0.5");
        assert_eq!(format_float(1.0), "1");
        assert_eq!(format_float(0.0), "0");
        assert_eq!(format_float(1.0 / 3.0), "0.333333333333");
        assert_eq!(format_float(2.0 / 3.0), "0.666666666667");
        assert_eq!(format_float(1e-20), "1e-20");
        assert_eq!(format_float(-123_456_789.123_456_79), "-123456789.123");
    }

    #[test]
    fn text_with_header() {
        let m = parse_matrix(b"# a,b\n1,2\n3.5, -4\n\n").unwrap();
        assert_eq!((m.rows, m.cols), (2, 2));
        assert_eq!(m.data, vec![1.0, 2.0, 3.5, -4.0]);
    }

    #[test]
    fn text_errors_name_position() {
        let e = parse_matrix(b"1,2\n3,x\n").unwrap_err().to_string();
        assert!(e.contains("line 2, column 2"), "{e}");
        let e = parse_matrix(b"1,2\n3\n").unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");
        let e = parse_matrix(b"1,nan\n").unwrap_err().to_string();
        assert!(e.contains("non-finite"), "{e}");
        assert!(parse_matrix(b"# only a header\n").is_err());
    }

    #[test]
    fn binary_errors_name_offset() {
        let e = parse_matrix(b"PNML").unwrap_err().to_string();
        assert!(e.contains("byte offset 4"), "{e}");
        let e = parse_matrix(b"PNML\x02").unwrap_err().to_string();
        assert!(e.contains("byte offset 4") && e.contains("0x02"), "{e}");
        let e = parse_matrix(b"PNML\x01\x01\x00").unwrap_err().to_string();
        assert!(e.contains("byte offset 5"), "{e}");
        let mut ok = encode_binary_matrix(1, 2, &[1.0, 2.0]).unwrap();
        ok.pop();
        let e = parse_matrix(&ok).unwrap_err().to_string();
        assert!(e.contains("byte offset 21"), "{e}");
        let nan = encode_binary_matrix(1, 2, &[1.0, f64::NAN]);
        assert!(nan.is_err());
    }

    #[test]
    fn logits_become_probabilities() {
        let p = parse_logits(b"0,0\n1000,0\n").unwrap();
        assert_eq!(p[0].probs(), &[0.5, 0.5]);
        assert_eq!(p[1].probs(), &[1.0, 0.0]);
        assert!(parse_logits(b"1\n2\n").is_err());
    }

    #[test]
    fn labels_parse() {
        let l = parse_labels("# class\n0\n1\n1\n").unwrap();
        assert_eq!(l.classes(), &[0, 1, 1]);
        assert!(parse_labels("0\nx\n").unwrap_err().to_string().contains("line 2"));
    }

    fn sample_stats() -> PnmlStats {
        let e = EmbeddingMatrix::from_rows(&[[1.0, 2.0, 0.5], [0.1, -1.0, 3.0], [2.0, 2.0, 2.0]]).unwrap();
        build_stats(decompose(&e, DEFAULT_RANK_TOL_FACTOR).unwrap(), 3).with_normalized_inputs(true)
    }

    #[test]
    fn stats_round_trip_is_bit_exact() {
        let s = sample_stats();
        let bytes = encode_stats(&s);
        let back = decode_stats(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode_stats(&back), bytes);
        assert_eq!(stats_fingerprint(&back), stats_fingerprint(&s));
    }

    #[test]
    fn stats_decode_errors() {
        let bytes = encode_stats(&sample_stats());
        assert!(decode_stats(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_stats(&bad).unwrap_err().to_string().contains("byte offset 0"));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode_stats(&bad).unwrap_err().to_string().contains("byte offset 4"));
    }

    #[test]
    fn score_csv_layout() {
        let p = ProbVector::new(vec![0.5, 0.5]).unwrap();
        let s = RegretScore::compute(&p, 1.0).unwrap();
        let csv = String::from_utf8(encode_score_csv(&[s])).unwrap();
        assert_eq!(csv, "index,xtg,regret,baseline,pnml_max\n0,1,0.287682072452,0.5,0.5\n");
    }

    #[test]
    fn report_json_shape() {
        let r = DetectionReport {
            auroc: 0.75,
            tnr_at_tpr95: 0.5,
            detection_accuracy: 0.75,
            n_ind: 2,
            n_ood: 2,
            threshold_at_tpr95: 0.4,
        };
        let single = ReportFile { primary: r.clone(), methods: BTreeMap::new() };
        let v: serde_json::Value = serde_json::from_slice(&single.to_json()).unwrap();
        assert_eq!(v["auroc"], 0.75);
        assert!(v.get("methods").is_none());
        let multi = ReportFile {
            primary: r.clone(),
            methods: [("regret".to_string(), r)].into_iter().collect(),
        };
        let v: serde_json::Value = serde_json::from_slice(&multi.to_json()).unwrap();
        assert_eq!(v["methods"]["regret"]["n_ood"], 2);
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    proptest! {
        #[test]
        fn binary_round_trip_at_f32(vals in prop::collection::vec(-1e6f64..1e6, 1..60), cols in 1usize..6) {
            let rows = vals.len() / cols;
            prop_assume!(rows >= 1);
            let data: Vec<f64> = vals[..rows * cols].iter().map(|&v| f64::from(v as f32)).collect();
            let bytes = encode_binary_matrix(rows, cols, &data).unwrap();
            let back = parse_matrix(&bytes).unwrap();
            prop_assert_eq!(&back.data, &data);
            prop_assert_eq!(encode_binary_matrix(back.rows, back.cols, &back.data).unwrap(), bytes);
        }

        #[test]
        fn text_round_trip_to_12_digits(vals in prop::collection::vec(-1e8f64..1e8, 1..40)) {
            let bytes = encode_text_matrix(vals.len(), 1, &vals);
            let back = parse_matrix(&bytes).unwrap();
            for (a, b) in vals.iter().zip(&back.data) {
                prop_assert!((a - b).abs() <= 1e-11 * a.abs().max(1e-300));
            }
            prop_assert_eq!(encode_text_matrix(back.rows, 1, &back.data), bytes);
        }
    }
}
