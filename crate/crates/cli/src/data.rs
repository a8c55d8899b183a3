//! Dataset ingestion: IDX image/label files and numeric CSV.

use std::path::Path;

use effectppl::tensor::Tensor;
use thiserror::Error;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad IDX magic: expected 0x{IMAGE_MAGIC:08x} (images) or 0x{LABEL_MAGIC:08x} (labels), found 0x{actual:08x}")]
    BadMagic { actual: u32 },
    #[error("truncated IDX file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("IDX file has trailing data: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: usize, actual: usize },
    #[error("CSV row {row}: expected {expected} columns, found {actual}")]
    Ragged { row: usize, expected: usize, actual: usize },
    #[error("CSV row {row}, column {col}: cannot parse `{cell}` as a number")]
    BadCell { row: usize, col: usize, cell: String },
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0} contains no data rows")]
    Empty(String),
}

/// Raw contents of an IDX file with unsigned-byte payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxFile {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

fn rank_for(magic: u32) -> Option<usize> {
    match magic {
        IMAGE_MAGIC => Some(3),
        LABEL_MAGIC => Some(1),
        _ => None,
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

impl IdxFile {
    pub fn parse(bytes: &[u8]) -> Result<Self, DataError> {
        if bytes.len() < 4 {
            return Err(DataError::Truncated {
                expected: 4,
                actual: bytes.len(),
            });
        }
        let magic = be_u32(bytes, 0);
        let rank = rank_for(magic).ok_or(DataError::BadMagic { actual: magic })?;
        let header = 4 + 4 * rank;
        if bytes.len() < header {
            return Err(DataError::Truncated {
                expected: header,
                actual: bytes.len(),
            });
        }
        let dims: Vec<usize> = (0..rank).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
        let expected = header + dims.iter().product::<usize>();
        if bytes.len() < expected {
            return Err(DataError::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(DataError::TrailingBytes {
                expected,
                actual: bytes.len(),
            });
        }
        Ok(Self {
            magic,
            dims,
            payload: bytes[header..].to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.payload.len());
        out.extend(self.magic.to_be_bytes());
        for &d in &self.dims {
            out.extend((d as u32).to_be_bytes());
        }
        out.extend(&self.payload);
        out
    }

    /// Images become `[N, rows*cols]` scaled to `[0, 1]`; labels become `[N]`.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.dims[0];
        if self.magic == IMAGE_MAGIC {
            let width = self.dims[1] * self.dims[2];
            let data = self.payload.iter().map(|&b| b as f64 / 255.0).collect();
            Tensor::new(data, &[n, width]).expect("sized by header")
        } else {
            Tensor::new(self.payload.iter().map(|&b| b as f64).collect(), &[n]).expect("sized by header")
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn parse_idx(path: impl AsRef<Path>) -> Result<Tensor, DataError> {
    Ok(IdxFile::parse(&read(path.as_ref())?)?.to_tensor())
}

/// Parses a rectangular numeric CSV into `[rows, cols]`. Rows are numbered
/// by their line in the input.
pub fn parse_csv_str(text: &str, has_header: bool) -> Result<Tensor, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for record in reader.records() {
        let record = record?;
        let row = record.position().map_or(rows + 1, |p| p.line() as usize);
        let width = *cols.get_or_insert(record.len());
        if record.len() != width {
            return Err(DataError::Ragged {
                row,
                expected: width,
                actual: record.len(),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| DataError::BadCell {
                row,
                col: j + 1,
                cell: cell.to_string(),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| DataError::Empty("CSV input".into()))?;
    Ok(Tensor::new(data, &[rows, cols]).expect("rectangular"))
}

pub fn parse_csv(path: impl AsRef<Path>, has_header: bool) -> Result<Tensor, DataError> {
    let bytes = read(path.as_ref())?;
    parse_csv_str(&String::from_utf8_lossy(&bytes), has_header)
}

/// Maps values `>= threshold` to 1 and the rest to 0.
pub fn binarize(t: &Tensor, threshold: f64) -> Tensor {
    let data = t.data().iter().map(|&v| (v >= threshold) as u8 as f64).collect();
    Tensor::new(data, t.shape()).expect("same shape")
}

/// Loads a dataset by extension: `.csv` as CSV, anything else as IDX.
pub fn load_matrix(path: impl AsRef<Path>, csv_header: bool) -> Result<Tensor, DataError> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        parse_csv(path, csv_header)
    } else {
        parse_idx(path)
    }
}
