//! File formats: raw dense binary, Matrix Market coordinate, and the
//! factor output files.
//!
//! Dense matrices use a 16-byte header (8-byte magic, u32 rows, u32
//! cols, both little-endian) followed by row-major little-endian f64
//! payload. Sparse matrices use Matrix Market `coordinate real general`
//! with 1-based indices, entries sorted by (row, column).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{CsrMatrix, DenseMatrix, DenseVector, SvdFactors};

pub const DENSE_MAGIC: [u8; 8] = *b"OOMSVD\x01\x00";

/// Either input representation, as read back from disk.
pub enum MatrixData {
    Dense(DenseMatrix),
    Sparse(CsrMatrix),
}

impl MatrixData {
    pub fn rows(&self) -> usize {
        match self {
            MatrixData::Dense(m) => m.rows(),
            MatrixData::Sparse(m) => m.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            MatrixData::Dense(m) => m.cols(),
            MatrixData::Sparse(m) => m.cols(),
        }
    }
}

pub fn write_dense_matrix(path: &Path, m: &DenseMatrix) -> Result<()> {
    if m.rows() > u32::MAX as usize || m.cols() > u32::MAX as usize {
        return Err(Error::Config(format!(
            "dense header carries u32 dimensions; {}x{} does not fit",
            m.rows(),
            m.cols()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&DENSE_MAGIC)?;
    w.write_all(&(m.rows() as u32).to_le_bytes())?;
    w.write_all(&(m.cols() as u32).to_le_bytes())?;
    for x in m.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dense_matrix(path: &Path) -> Result<DenseMatrix> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 16];
    r.read_exact(&mut header)
        .map_err(|_| Error::Parse(format!("{}: missing dense header", path.display())))?;
    if header[..8] != DENSE_MAGIC {
        return Err(Error::Parse(format!(
            "{}: bad magic, not a dense matrix file",
            path.display()
        )));
    }
    let rows = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let mut payload = vec![0u8; rows * cols * 8];
    r.read_exact(&mut payload)
        .map_err(|_| Error::Parse(format!("{}: truncated dense payload", path.display())))?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    DenseMatrix::new(rows, cols, data)
}

pub fn write_matrix_market(path: &Path, m: &CsrMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
    writeln!(w, "{} {} {}", m.rows(), m.cols(), m.nnz())?;
    for r in 0..m.rows() {
        for (c, v) in m.row_entries(r) {
            writeln!(w, "{} {} {}", r + 1, c + 1, v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_market(path: &Path) -> Result<CsrMatrix> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("{}: empty file", path.display())))??;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() < 5
        || fields[0] != "%%MatrixMarket"
        || fields[1] != "matrix"
        || fields[2] != "coordinate"
        || fields[3] != "real"
        || fields[4] != "general"
    {
        return Err(Error::Parse(format!(
            "{}: expected `%%MatrixMarket matrix coordinate real general`, got `{header}`",
            path.display()
        )));
    }

    let mut dims: Option<(usize, usize, usize)> = None;
    let mut entries: Vec<(usize, usize, f64)> = Vec::new();
    for line in lines {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('%') {
            continue;
        }
        let parts: Vec<&str> = t.split_whitespace().collect();
        match dims {
            None => {
                if parts.len() != 3 {
                    return Err(Error::Parse(format!("bad size line `{t}`")));
                }
                let m: usize = parse_num(parts[0])?;
                let n: usize = parse_num(parts[1])?;
                let nnz: usize = parse_num(parts[2])?;
                entries.reserve(nnz);
                dims = Some((m, n, nnz));
            }
            Some(_) => {
                if parts.len() != 3 {
                    return Err(Error::Parse(format!("bad entry line `{t}`")));
                }
                let i: usize = parse_num(parts[0])?;
                let j: usize = parse_num(parts[1])?;
                let v: f64 = parts[2]
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad value `{}`", parts[2])))?;
                if i == 0 || j == 0 {
                    return Err(Error::Parse("matrix market indices are 1-based".into()));
                }
                entries.push((i - 1, j - 1, v));
            }
        }
    }
    let (m, n, nnz) = dims.ok_or_else(|| Error::Parse("missing size line".into()))?;
    if entries.len() != nnz {
        return Err(Error::Parse(format!(
            "size line promises {nnz} entries, found {}",
            entries.len()
        )));
    }
    CsrMatrix::from_triplets(m, n, entries)
}

fn parse_num(s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::Parse(format!("bad integer `{s}`")))
}

/// Sniffs the on-disk format: dense binary by magic, otherwise Matrix
/// Market.
pub fn read_matrix(path: &Path) -> Result<MatrixData> {
    let mut head = [0u8; 8];
    let n = File::open(path)?.read(&mut head)?;
    if n == 8 && head == DENSE_MAGIC {
        Ok(MatrixData::Dense(read_dense_matrix(path)?))
    } else {
        Ok(MatrixData::Sparse(read_matrix_market(path)?))
    }
}

/// Writes `U.bin`, `sigma.txt` (one value per line) and `V.bin` into
/// `dir`.
pub fn write_factors(dir: &Path, f: &SvdFactors) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    if f.k > 0 {
        write_dense_matrix(&dir.join("U.bin"), &f.u)?;
        write_dense_matrix(&dir.join("V.bin"), &f.v)?;
    }
    let mut w = BufWriter::new(File::create(dir.join("sigma.txt"))?);
    for s in f.sigma.as_slice() {
        writeln!(w, "{s}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sigma(path: &Path) -> Result<DenseVector> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        out.push(
            t.parse::<f64>()
                .map_err(|_| Error::Parse(format!("bad singular value `{t}`")))?,
        );
    }
    Ok(DenseVector::new(out))
}
