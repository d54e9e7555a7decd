//! Logit/label data: loading, validation, random calibration splits and
//! report persistence.
//!
//! Two on-disk encodings are supported. The binary one is authoritative for
//! large data and is little-endian throughout:
//!
//! ```text
//! logits: "CPLT" | u32 version=1 | u64 N | u32 K | N*K f32, row-major
//! labels: "CPLB" | u32 version=1 | u64 N | u32 K | N u32
//! ```
//!
//! The CSV alternative stores one example per line with `K` floats separated
//! by commas or whitespace, and labels as one integer per line.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOGIT_MAGIC: &[u8; 4] = b"CPLT";
pub const LABEL_MAGIC: &[u8; 4] = b"CPLB";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// N×K raw logits with one true label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitDataset {
    logits: Array2<f64>,
    labels: Vec<usize>,
}

impl LogitDataset {
    /// Validates shape, finiteness and label range.
    pub fn new(logits: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        let (n, k) = logits.dim();
        if n == 0 {
            return Err(Error::InvalidDataset("no examples".into()));
        }
        if k < 2 {
            return Err(Error::InvalidDataset(format!("need at least 2 labels, got {k}")));
        }
        if labels.len() != n {
            return Err(Error::InvalidDataset(format!(
                "{n} logit rows but {} labels",
                labels.len()
            )));
        }
        for ((row, column), z) in logits.indexed_iter() {
            if !z.is_finite() {
                return Err(Error::NonFiniteLogit { row, column });
            }
        }
        for (row, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::LabelOutOfRange {
                    row,
                    label: label as i64,
                    classes: k,
                });
            }
        }
        Ok(Self { logits, labels })
    }

    pub fn logits(&self) -> ArrayView2<'_, f64> {
        self.logits.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.logits.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Number of examples N.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of labels K.
    pub fn classes(&self) -> usize {
        self.logits.ncols()
    }

    /// Copies the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> LogitDataset {
        LogitDataset {
            logits: self.logits.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Fraction of rows whose highest logit (first on ties) is the true label.
    pub fn top1_accuracy(&self) -> f64 {
        let hits = self
            .logits
            .rows()
            .into_iter()
            .zip(&self.labels)
            .filter(|(row, &y)| argmax(row.iter().copied()) == y)
            .count();
        hits as f64 / self.len() as f64
    }

    /// Loads logits and labels, sniffing each file's encoding when `format`
    /// is `None`.
    pub fn load(
        logits_path: impl AsRef<Path>,
        labels_path: impl AsRef<Path>,
        format: Option<DataFormat>,
    ) -> Result<Self> {
        load_logits(logits_path.as_ref(), labels_path.as_ref(), format)
    }

    /// Writes both files in the binary encoding.
    pub fn write_binary(&self, logits_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
        let (n, k) = self.logits.dim();
        let mut buf = Vec::with_capacity(HEADER_LEN + 4 * n * k);
        buf.extend_from_slice(LOGIT_MAGIC);
        write_header(&mut buf, n, k);
        for z in self.logits.iter() {
            buf.extend_from_slice(&(*z as f32).to_le_bytes());
        }
        write_file(logits_path.as_ref(), &buf)?;

        let mut buf = Vec::with_capacity(HEADER_LEN + 4 * n);
        buf.extend_from_slice(LABEL_MAGIC);
        write_header(&mut buf, n, k);
        for &y in &self.labels {
            buf.extend_from_slice(&(y as u32).to_le_bytes());
        }
        write_file(labels_path.as_ref(), &buf)
    }

    /// Writes both files as CSV at full `f64` precision.
    pub fn write_csv(&self, logits_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
        let mut text = String::new();
        for row in self.logits.rows() {
            let line: Vec<String> = row.iter().map(|z| z.to_string()).collect();
            text.push_str(&line.join(","));
            text.push('\n');
        }
        write_file(logits_path.as_ref(), text.as_bytes())?;
        let labels: String = self.labels.iter().map(|y| format!("{y}\n")).collect();
        write_file(labels_path.as_ref(), labels.as_bytes())
    }

    /// Writes using the encoding implied by the extension (`.csv` or `.txt`
    /// for CSV, anything else binary).
    pub fn write(&self, logits_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
        match DataFormat::from_extension(logits_path.as_ref()) {
            DataFormat::Csv => self.write_csv(logits_path, labels_path),
            DataFormat::Binary => self.write_binary(logits_path, labels_path),
        }
    }
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_value {
            best = i;
            best_value = v;
        }
    }
    best
}

/// On-disk encoding of logit and label files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Binary,
    Csv,
}

impl DataFormat {
    /// Binary when the file starts with a known magic, CSV otherwise.
    pub fn sniff(path: &Path) -> Result<DataFormat> {
        let mut head = [0u8; 4];
        let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut filled = 0;
        while filled < 4 {
            match file.read(&mut head[filled..]).map_err(|e| Error::io(path, e))? {
                0 => break,
                read => filled += read,
            }
        }
        if filled == 4 && (&head == LOGIT_MAGIC || &head == LABEL_MAGIC) {
            Ok(DataFormat::Binary)
        } else {
            Ok(DataFormat::Csv)
        }
    }

    pub fn from_extension(path: &Path) -> DataFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") || ext.eq_ignore_ascii_case("txt") => DataFormat::Csv,
            _ => DataFormat::Binary,
        }
    }
}

/// Loads and validates a logit/label pair.
pub fn load_logits(logits_path: &Path, labels_path: &Path, format: Option<DataFormat>) -> Result<LogitDataset> {
    let logit_format = match format {
        Some(f) => f,
        None => DataFormat::sniff(logits_path)?,
    };
    let label_format = match format {
        Some(f) => f,
        None => DataFormat::sniff(labels_path)?,
    };
    let logits = match logit_format {
        DataFormat::Binary => read_binary_logits(logits_path)?,
        DataFormat::Csv => read_csv_logits(logits_path)?,
    };
    let (n, k) = logits.dim();
    let raw_labels = match label_format {
        DataFormat::Binary => read_binary_labels(labels_path, k)?,
        DataFormat::Csv => read_csv_labels(labels_path)?,
    };
    if raw_labels.len() != n {
        return Err(Error::malformed(
            labels_path,
            format!("{} labels for {n} logit rows", raw_labels.len()),
        ));
    }
    for (row, z) in logits.rows().into_iter().enumerate() {
        if let Some(column) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLogit { row, column });
        }
    }
    let mut labels = Vec::with_capacity(n);
    for (row, &label) in raw_labels.iter().enumerate() {
        if label < 0 || label as u64 >= k as u64 {
            return Err(Error::LabelOutOfRange { row, label, classes: k });
        }
        labels.push(label as usize);
    }
    LogitDataset::new(logits, labels)
}

/// Reads only a logit file (no labels), e.g. for prediction on unlabeled data.
pub fn load_logit_matrix(path: &Path, format: Option<DataFormat>) -> Result<Array2<f64>> {
    let format = match format {
        Some(f) => f,
        None => DataFormat::sniff(path)?,
    };
    let logits = match format {
        DataFormat::Binary => read_binary_logits(path)?,
        DataFormat::Csv => read_csv_logits(path)?,
    };
    for ((row, column), z) in logits.indexed_iter() {
        if !z.is_finite() {
            return Err(Error::NonFiniteLogit { row, column });
        }
    }
    Ok(logits)
}

fn write_header(buf: &mut Vec<u8>, n: usize, k: usize) {
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&(k as u32).to_le_bytes());
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(bytes).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses the shared 20-byte header, returning (N, K).
fn parse_header(path: &Path, bytes: &[u8], magic: &[u8; 4]) -> Result<(usize, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::malformed(path, "truncated header"));
    }
    if &bytes[0..4] != magic {
        return Err(Error::malformed(path, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::malformed(path, format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let k = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    if n == 0 {
        return Err(Error::malformed(path, "N = 0"));
    }
    if k < 2 {
        return Err(Error::malformed(path, format!("K = {k}, need at least 2")));
    }
    let n = usize::try_from(n).map_err(|_| Error::malformed(path, "N does not fit in memory"))?;
    Ok((n, k))
}

fn read_binary_logits(path: &Path) -> Result<Array2<f64>> {
    let bytes = read_bytes(path)?;
    let (n, k) = parse_header(path, &bytes, LOGIT_MAGIC)?;
    let expected = n
        .checked_mul(k)
        .and_then(|c| c.checked_mul(4))
        .and_then(|c| c.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::malformed(path, "shape overflows"))?;
    if bytes.len() != expected {
        return Err(Error::malformed(
            path,
            format!("expected {expected} bytes for {n}x{k}, found {}", bytes.len()),
        ));
    }
    let values: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Array2::from_shape_vec((n, k), values).expect("length checked against header"))
}

fn read_binary_labels(path: &Path, classes: usize) -> Result<Vec<i64>> {
    let bytes = read_bytes(path)?;
    let (n, k) = parse_header(path, &bytes, LABEL_MAGIC)?;
    if k != classes {
        return Err(Error::malformed(
            path,
            format!("label file declares K={k} but logits have K={classes}"),
        ));
    }
    let expected = HEADER_LEN + 4 * n;
    if bytes.len() != expected {
        return Err(Error::malformed(
            path,
            format!("expected {expected} bytes for {n} labels, found {}", bytes.len()),
        ));
    }
    Ok(bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as i64)
        .collect())
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes).map_err(|_| Error::malformed(path, "not UTF-8 text"))
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn read_csv_logits(path: &Path) -> Result<Array2<f64>> {
    let text = read_text(path)?;
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (line_no, line) in data_lines(&text) {
        let mut count = 0;
        for field in line.split(|c: char| c == ',' || c.is_whitespace()).filter(|f| !f.is_empty()) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::malformed(path, format!("line {line_no}: cannot parse {field:?}")))?;
            if !v.is_finite() {
                return Err(Error::NonFiniteLogit { row: rows, column: count });
            }
            values.push(v);
            count += 1;
        }
        match width {
            None => width = Some(count),
            Some(w) if w != count => {
                return Err(Error::malformed(
                    path,
                    format!("line {line_no}: {count} values, expected {w}"),
                ))
            }
            _ => {}
        }
        rows += 1;
    }
    let k = width.unwrap_or(0);
    if rows == 0 {
        return Err(Error::malformed(path, "N = 0"));
    }
    if k < 2 {
        return Err(Error::malformed(path, format!("K = {k}, need at least 2")));
    }
    Ok(Array2::from_shape_vec((rows, k), values).expect("rows have uniform width"))
}

fn read_csv_labels(path: &Path) -> Result<Vec<i64>> {
    let text = read_text(path)?;
    data_lines(&text)
        .map(|(line_no, line)| {
            line.parse::<i64>()
                .map_err(|_| Error::malformed(path, format!("line {line_no}: cannot parse label {line:?}")))
        })
        .collect()
}

/// Parameters of one random calibration/validation partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub calibration_fraction: f64,
    pub seed: u64,
    pub trial_index: u64,
}

impl SplitSpec {
    pub fn new(calibration_fraction: f64, seed: u64, trial_index: u64) -> Self {
        Self {
            calibration_fraction,
            seed,
            trial_index,
        }
    }

    /// Calibration size `floor(N*f + 0.5)`.
    pub fn calibration_size(&self, n: usize) -> usize {
        (n as f64 * self.calibration_fraction + 0.5).floor() as usize
    }

    /// Partitions `0..n`. The permutation is drawn from a ChaCha stream keyed
    /// by `(seed, trial_index)`, so any trial can be reproduced on its own.
    pub fn split(&self, n: usize) -> Result<SplitIndices> {
        let f = self.calibration_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "calibration fraction must lie in (0, 1), got {f}"
            )));
        }
        let n_cal = self.calibration_size(n);
        if n_cal == 0 || n_cal >= n {
            return Err(Error::DegenerateSplit { examples: n, fraction: f });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.trial_index);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut calibration = perm[..n_cal].to_vec();
        let mut validation = perm[n_cal..].to_vec();
        calibration.sort_unstable();
        validation.sort_unstable();
        Ok(SplitIndices { calibration, validation })
    }
}

/// Disjoint calibration and validation row indices covering `0..N`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub calibration: Vec<usize>,
    pub validation: Vec<usize>,
}

pub fn split(dataset: &LogitDataset, spec: &SplitSpec) -> Result<SplitIndices> {
    spec.split(dataset.len())
}

/// Encoding for report files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

/// Writes a table of records. Floats are written in shortest round-trip
/// form, so every numeric field reloads bit-exactly.
pub fn save_report<T: Serialize>(rows: &[T], path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    let encoding = |reason: String| Error::Encoding {
        path: path.to_path_buf(),
        reason,
    };
    match format {
        ReportFormat::Csv => {
            let file = File::create(path).map_err(|e| Error::io(path, e))?;
            let mut writer = csv::Writer::from_writer(BufWriter::new(file));
            for row in rows {
                writer.serialize(row).map_err(|e| encoding(e.to_string()))?;
            }
            writer.flush().map_err(|e| Error::io(path, e))
        }
        ReportFormat::Json => save_json(&rows, path),
    }
}

/// Reads a table written by [`save_report`].
pub fn load_report<T: DeserializeOwned>(path: impl AsRef<Path>, format: ReportFormat) -> Result<Vec<T>> {
    let path = path.as_ref();
    let encoding = |reason: String| Error::Encoding {
        path: path.to_path_buf(),
        reason,
    };
    match format {
        ReportFormat::Csv => {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            let mut reader = csv::Reader::from_reader(file);
            reader
                .deserialize()
                .collect::<std::result::Result<Vec<T>, _>>()
                .map_err(|e| encoding(e.to_string()))
        }
        ReportFormat::Json => load_json(path),
    }
}

/// Pretty-printed JSON for a single structured record.
pub fn save_json<T: Serialize + ?Sized>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Encoding {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Encoding {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
