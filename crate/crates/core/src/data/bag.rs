//! `MHBG` bag files: `"MHBG" | version u32 | n u32 | d u32 | n*d f32`,
//! little-endian, row-major.

use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::EmbeddingBag;
use crate::numerics::DenseMatrix;

const MAGIC: &[u8; 4] = b"MHBG";
const VERSION: u32 = 1;
const HEADER_LEN: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BagHeader {
    pub n: usize,
    pub d: usize,
}

fn parse_header(bytes: &[u8]) -> Result<BagHeader> {
    if bytes.len() < HEADER_LEN as usize {
        return Err(Error::format(bytes.len() as u64, "truncated bag header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(0, "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    if word(4) != VERSION {
        return Err(Error::format(4, format!("unsupported bag version {}", word(4))));
    }
    let (n, d) = (word(8) as usize, word(12) as usize);
    if n == 0 {
        return Err(Error::format(8, "bag has no patches"));
    }
    if d == 0 {
        return Err(Error::format(12, "bag has zero dimension"));
    }
    Ok(BagHeader { n, d })
}

/// Serialises a bag. Values are stored as f32, so only f32-representable
/// inputs survive a roundtrip bit-exactly.
pub fn encode_bag(features: &DenseMatrix) -> Result<Vec<u8>> {
    if features.rows() == 0 {
        return Err(Error::Domain("refusing to write an empty bag".into()));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN as usize + 4 * features.as_slice().len());
    buf.extend_from_slice(MAGIC);
    for v in [VERSION, features.rows() as u32, features.cols() as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in features.as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_bag(bytes: &[u8]) -> Result<DenseMatrix> {
    let BagHeader { n, d } = parse_header(bytes)?;
    let body = &bytes[HEADER_LEN as usize..];
    let want = n * d * 4;
    if body.len() < want {
        return Err(Error::format(
            HEADER_LEN + body.len() as u64,
            format!("truncated bag body: need {want} bytes, found {}", body.len()),
        ));
    }
    if body.len() > want {
        return Err(Error::format(HEADER_LEN + want as u64, "trailing bytes after bag body"));
    }
    let mut values = Vec::with_capacity(n * d);
    for (i, c) in body.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(c.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(HEADER_LEN + 4 * i as u64, "non-finite value"));
        }
        values.push(f64::from(v));
    }
    DenseMatrix::new(n, d, values)
}

pub fn write_bag(bag: &EmbeddingBag, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_bag(&bag.features)?).map_err(|e| Error::io(path, e))
}

/// Loads a whole bag; the patient id is the file stem.
pub fn load_bag(path: impl AsRef<Path>) -> Result<EmbeddingBag> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    EmbeddingBag::new(id, decode_bag(&bytes)?)
}

/// Random access to the rows of a bag file without loading all of it.
pub struct BagReader {
    file: File,
    header: BagHeader,
}

impl BagReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut head = [0u8; HEADER_LEN as usize];
        let got = read_up_to(&mut file, &mut head).map_err(|e| Error::io(path, e))?;
        let header = parse_header(&head[..got])?;
        let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        let want = HEADER_LEN + (header.n * header.d * 4) as u64;
        if len != want {
            return Err(Error::format(
                len.min(want),
                format!("bag file is {len} bytes, header implies {want}"),
            ));
        }
        Ok(Self { file, header })
    }

    pub fn header(&self) -> BagHeader {
        self.header
    }

    /// Reads the given rows (repeats allowed) in the given order.
    pub fn read_rows(&mut self, indices: &[usize]) -> Result<DenseMatrix> {
        let d = self.header.d;
        let mut row = vec![0u8; d * 4];
        let mut values = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= self.header.n {
                return Err(Error::Domain(format!(
                    "row {i} out of range for {} patches",
                    self.header.n
                )));
            }
            let offset = HEADER_LEN + (i * d * 4) as u64;
            self.file
                .seek(SeekFrom::Start(offset))
                .and_then(|_| self.file.read_exact(&mut row))
                .map_err(|_| Error::format(offset, "short read"))?;
            values.extend(
                row.chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))),
            );
        }
        DenseMatrix::new(indices.len(), d, values)
    }
}

fn read_up_to(file: &mut File, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match file.read(&mut buf[got..])? {
            0 => break,
            k => got += k,
        }
    }
    Ok(got)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn random_f32_matrix(n: usize, d: usize, seed: u64) -> DenseMatrix {
        let mut rng = RngStream::new(seed, "synth");
        let v = (0..n * d).map(|_| f64::from(rng.normal() as f32)).collect();
        DenseMatrix::new(n, d, v).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = random_f32_matrix(5, 8, 1);
        let back = decode_bag(&encode_bag(&m).unwrap()).unwrap();
        assert!(m
            .as_slice()
            .iter()
            .zip(back.as_slice())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn truncation_and_magic_errors() {
        let bytes = encode_bag(&random_f32_matrix(3, 4, 2)).unwrap();
        assert!(matches!(
            decode_bag(&bytes[..bytes.len() - 3]),
            Err(Error::Format { .. })
        ));
        assert!(matches!(decode_bag(&bytes[..10]), Err(Error::Format { offset: 10, .. })));
        let mut bad = bytes.clone();
        bad[1] = b'?';
        assert!(matches!(decode_bag(&bad), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn empty_bag_rejected_at_write() {
        assert!(matches!(
            encode_bag(&DenseMatrix::zeros(0, 4)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn reader_seeks_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p1.mhbg");
        let m = random_f32_matrix(6, 3, 3);
        write_bag(&EmbeddingBag::new("p1", m.clone()).unwrap(), &path).unwrap();
        let mut r = BagReader::open(&path).unwrap();
        assert_eq!(r.header(), BagHeader { n: 6, d: 3 });
        let rows = r.read_rows(&[4, 0, 4]).unwrap();
        assert_eq!(rows, m.select_rows(&[4, 0, 4]));
        assert!(r.read_rows(&[6]).is_err());
        assert_eq!(load_bag(&path).unwrap().patient_id, "p1");
    }
}
