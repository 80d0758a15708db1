//! Bit-packed binary codes, XOR/popcount Hamming distance, and exhaustive
//! ranked retrieval.
//!
//! Code `i` occupies `ceil(r / 64)` consecutive 64-bit words; bit `j` is 1
//! iff entry `j` of the code is +1. Padding bits beyond `r` are zero, so
//! distances never need masking.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::dataio::format::{check_magic, check_version, read_u32, read_u64, FORMAT_VERSION};
use crate::error::{Error, Result};

pub(crate) const CODES_MAGIC: [u8; 4] = *b"PWB1";

/// `n` binary codes of `r` bits each, packed into 64-bit words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryCodes {
    code_len: usize,
    count: usize,
    words_per_code: usize,
    words: Vec<u64>,
}

impl BinaryCodes {
    /// Packs an `r x n` matrix with entries exactly +-1.
    pub fn pack(codes: &DMatrix<f64>) -> Result<Self> {
        let r = codes.nrows();
        let n = codes.ncols();
        let words_per_code = r.div_ceil(64);
        let mut words = vec![0u64; n * words_per_code];
        for i in 0..n {
            for j in 0..r {
                let v = codes[(j, i)];
                if v == 1.0 {
                    words[i * words_per_code + j / 64] |= 1u64 << (j % 64);
                } else if v != -1.0 {
                    return Err(Error::InvalidInput(format!(
                        "code entry ({j}, {i}) is {v}, expected +1 or -1"
                    )));
                }
            }
        }
        Ok(BinaryCodes {
            code_len: r,
            count: n,
            words_per_code,
            words,
        })
    }

    /// Inverse of [`pack`](Self::pack).
    pub fn unpack(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.code_len, self.count);
        for i in 0..self.count {
            let w = self.word_slice(i);
            for j in 0..self.code_len {
                m[(j, i)] = if w[j / 64] >> (j % 64) & 1 == 1 { 1.0 } else { -1.0 };
            }
        }
        m
    }

    pub fn code_len(&self) -> usize {
        self.code_len
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn word_slice(&self, i: usize) -> &[u64] {
        &self.words[i * self.words_per_code..(i + 1) * self.words_per_code]
    }

    pub fn bit(&self, i: usize, j: usize) -> bool {
        self.word_slice(i)[j / 64] >> (j % 64) & 1 == 1
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(&CODES_MAGIC).map_err(io)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.code_len as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.count as u64).to_le_bytes()).map_err(io)?;
        for word in &self.words {
            w.write_all(&word.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        check_magic(&mut r, &CODES_MAGIC, path)?;
        check_version(&mut r, path)?;
        let code_len = read_u32(&mut r, path, "code length")? as usize;
        let count = read_u64(&mut r, path, "count")? as usize;
        if code_len == 0 {
            return Err(Error::format(path, "header", "zero code length".to_string()));
        }
        let words_per_code = code_len.div_ceil(64);
        let mut words = vec![0u64; count * words_per_code];
        let mut buf = [0u8; 8];
        for w in &mut words {
            use std::io::Read;
            r.read_exact(&mut buf)
                .map_err(|e| Error::format(path, "words", format!("truncated: {e}")))?;
            *w = u64::from_le_bytes(buf);
        }
        let tail_mask = if code_len % 64 == 0 {
            u64::MAX
        } else {
            (1u64 << (code_len % 64)) - 1
        };
        for i in 0..count {
            let last = words[i * words_per_code + words_per_code - 1];
            if last & !tail_mask != 0 {
                return Err(Error::format(
                    path,
                    format!("code {i}"),
                    "nonzero padding bits".to_string(),
                ));
            }
        }
        Ok(BinaryCodes {
            code_len,
            count,
            words_per_code,
            words,
        })
    }
}

#[inline]
fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(&x, &y)| (x ^ y).count_ones()).sum()
}

/// Hamming distance between code `i` of `a` and code `j` of `b`.
pub fn hamming_distance(a: &BinaryCodes, i: usize, b: &BinaryCodes, j: usize) -> Result<u32> {
    if a.code_len != b.code_len {
        return Err(Error::shape("hamming code length", a.code_len, b.code_len));
    }
    Ok(hamming_words(a.word_slice(i), b.word_slice(j)))
}

/// Exhaustive retrieval output: for each query, every database index with
/// its distance, sorted ascending with ties broken by database index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedResult {
    pub neighbors: Vec<Vec<(usize, u32)>>,
}

impl RankedResult {
    pub fn num_queries(&self) -> usize {
        self.neighbors.len()
    }
}

/// Ranks the whole database for every query by Hamming distance.
pub fn retrieve(queries: &BinaryCodes, database: &BinaryCodes) -> Result<RankedResult> {
    if queries.code_len != database.code_len {
        return Err(Error::shape(
            "retrieve code length",
            database.code_len,
            queries.code_len,
        ));
    }
    let neighbors: Vec<Vec<(usize, u32)>> = (0..queries.count)
        .into_par_iter()
        .map(|q| {
            let qw = queries.word_slice(q);
            let mut ranked: Vec<(usize, u32)> = (0..database.count)
                .map(|i| (i, hamming_words(qw, database.word_slice(i))))
                .collect();
            ranked.sort_unstable_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
            ranked
        })
        .collect();
    Ok(RankedResult { neighbors })
}
