//! Fixed-stride binary embedding store.
//!
//! ```text
//! header (34 bytes, little-endian)
//!   magic        [u8; 4]  "PEMB"
//!   version      u32      1
//!   dim          u32      D
//!   s_t          u32      time patches
//!   s_f          u32      frequency patches
//!   classes      u32      C
//!   record_count u64
//!   dtype_code   u8       0 = f32
//!   flags        u8       bit 0: records may carry an all-zero label vector
//! records (record_count x stride)
//!   id           u64
//!   labels       ceil(C/8) bytes, class c at byte c/8, bit c%8 (LSB first)
//!   cls          D x f32
//!   tokens       D*S_t*S_f x f32 in (D, S_t, S_f) row-major order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{EmbeddingRecord, StoreError, TokenMap};

pub const MAGIC: &[u8; 4] = b"PEMB";
pub const VERSION: u32 = 1;
pub const HEADER_SIZE: u64 = 34;
pub const DTYPE_F32: u8 = 0;
const FLAG_ALLOW_EMPTY: u8 = 0x01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreHeader {
    pub version: u32,
    pub dim: u32,
    pub s_t: u32,
    pub s_f: u32,
    pub classes: u32,
    pub record_count: u64,
    pub dtype_code: u8,
    pub allow_empty: bool,
}

impl StoreHeader {
    pub fn new(dim: u32, s_t: u32, s_f: u32, classes: u32) -> Self {
        Self {
            version: VERSION,
            dim,
            s_t,
            s_f,
            classes,
            record_count: 0,
            dtype_code: DTYPE_F32,
            allow_empty: false,
        }
    }

    pub fn with_allow_empty(mut self, allow: bool) -> Self {
        self.allow_empty = allow;
        self
    }

    pub fn tokens(&self) -> usize {
        self.s_t as usize * self.s_f as usize
    }

    pub fn label_bytes(&self) -> usize {
        (self.classes as usize).div_ceil(8)
    }

    /// Bytes per record.
    pub fn record_size(&self) -> u64 {
        let d = self.dim as u64;
        8 + self.label_bytes() as u64 + 4 * d + 4 * d * self.tokens() as u64
    }

    pub fn record_offset(&self, index: u64) -> u64 {
        HEADER_SIZE + index * self.record_size()
    }

    fn validate(&self) -> Result<(), StoreError> {
        if self.version != VERSION {
            return Err(StoreError::Format(format!("unsupported version {}", self.version)));
        }
        if self.dtype_code != DTYPE_F32 {
            return Err(StoreError::Format(format!("unsupported dtype code {}", self.dtype_code)));
        }
        if self.dim == 0 || self.s_t == 0 || self.s_f == 0 || self.classes == 0 {
            return Err(StoreError::Format(format!(
                "dimensions must be positive: D={} S_t={} S_f={} C={}",
                self.dim, self.s_t, self.s_f, self.classes
            )));
        }
        Ok(())
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(self.version)?;
        w.write_u32::<LittleEndian>(self.dim)?;
        w.write_u32::<LittleEndian>(self.s_t)?;
        w.write_u32::<LittleEndian>(self.s_f)?;
        w.write_u32::<LittleEndian>(self.classes)?;
        w.write_u64::<LittleEndian>(self.record_count)?;
        w.write_u8(self.dtype_code)?;
        w.write_u8(if self.allow_empty { FLAG_ALLOW_EMPTY } else { 0 })
    }

    fn read_from<R: Read>(r: &mut R) -> Result<Self, StoreError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| StoreError::Format("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(StoreError::Format(format!("bad magic {magic:?}")));
        }
        let read = |r: &mut R| -> std::io::Result<Self> {
            Ok(Self {
                version: r.read_u32::<LittleEndian>()?,
                dim: r.read_u32::<LittleEndian>()?,
                s_t: r.read_u32::<LittleEndian>()?,
                s_f: r.read_u32::<LittleEndian>()?,
                classes: r.read_u32::<LittleEndian>()?,
                record_count: r.read_u64::<LittleEndian>()?,
                dtype_code: r.read_u8()?,
                allow_empty: r.read_u8()? & FLAG_ALLOW_EMPTY != 0,
            })
        };
        let header = read(r).map_err(|_| StoreError::Format("truncated header".into()))?;
        header.validate()?;
        Ok(header)
    }

    /// Checks a record against this header's dimensions and label policy.
    pub fn check_record(&self, index: usize, rec: &EmbeddingRecord) -> Result<(), StoreError> {
        let mismatch = |detail: String| StoreError::DimensionMismatch { index, detail };
        if rec.labels.len() != self.classes as usize {
            return Err(mismatch(format!("{} labels, header C={}", rec.labels.len(), self.classes)));
        }
        if rec.cls.len() != self.dim as usize {
            return Err(mismatch(format!("cls length {}, header D={}", rec.cls.len(), self.dim)));
        }
        let t = &rec.tokens;
        if (t.dim, t.s_t, t.s_f) != (self.dim as usize, self.s_t as usize, self.s_f as usize) {
            return Err(mismatch(format!(
                "token map {}x{}x{}, header {}x{}x{}",
                t.dim, t.s_t, t.s_f, self.dim, self.s_t, self.s_f
            )));
        }
        if !self.allow_empty && !rec.labels.iter().any(|&l| l) {
            return Err(StoreError::EmptyLabels { index });
        }
        if rec.cls.iter().chain(&t.data).any(|x| !x.is_finite()) {
            return Err(StoreError::NonFinite { index });
        }
        Ok(())
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `records` under `header`'s dimensions (its `record_count` is
/// replaced by `records.len()`) and returns the number of bytes written.
pub fn write_store(
    path: impl AsRef<Path>,
    header: &StoreHeader,
    records: &[EmbeddingRecord],
) -> Result<u64, StoreError> {
    let path = path.as_ref();
    let mut header = *header;
    header.record_count = records.len() as u64;
    header.validate()?;
    for (i, rec) in records.iter().enumerate() {
        header.check_record(i, rec)?;
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    header.write_to(&mut w).map_err(io_err(path))?;
    let mut label_buf = vec![0u8; header.label_bytes()];
    for rec in records {
        write_record(&mut w, rec, &mut label_buf).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(HEADER_SIZE + header.record_count * header.record_size())
}

fn write_record<W: Write>(w: &mut W, rec: &EmbeddingRecord, label_buf: &mut [u8]) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(rec.id)?;
    label_buf.fill(0);
    for (c, _) in rec.labels.iter().enumerate().filter(|(_, &on)| on) {
        label_buf[c / 8] |= 1 << (c % 8);
    }
    w.write_all(label_buf)?;
    for &x in rec.cls.iter().chain(&rec.tokens.data) {
        w.write_f32::<LittleEndian>(x)?;
    }
    Ok(())
}

/// Random-access reader over a store file.
#[derive(Debug)]
pub struct StoreReader {
    path: PathBuf,
    header: StoreHeader,
    file: BufReader<File>,
}

impl StoreReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(io_err(&path))?;
        let len = file.metadata().map_err(io_err(&path))?.len();
        let mut file = BufReader::new(file);
        let header = StoreHeader::read_from(&mut file)?;
        let expected = header
            .record_count
            .checked_mul(header.record_size())
            .and_then(|b| b.checked_add(HEADER_SIZE))
            .ok_or_else(|| StoreError::Format("record count overflows".into()))?;
        if len != expected {
            return Err(StoreError::Format(format!(
                "file length {len} does not match {} records of {} bytes",
                header.record_count,
                header.record_size()
            )));
        }
        Ok(Self { path, header, file })
    }

    pub fn header(&self) -> &StoreHeader {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.header.record_count as usize
    }

    pub fn is_empty(&self) -> bool {
        self.header.record_count == 0
    }

    pub fn read_record(&mut self, index: u64) -> Result<EmbeddingRecord, StoreError> {
        if index >= self.header.record_count {
            return Err(StoreError::OutOfRange {
                index,
                count: self.header.record_count,
            });
        }
        self.file
            .seek(SeekFrom::Start(self.header.record_offset(index)))
            .map_err(io_err(&self.path))?;
        self.next_record(index)
    }

    /// Reads every record sequentially from the start of the payload.
    pub fn read_all(&mut self) -> Result<Vec<EmbeddingRecord>, StoreError> {
        self.file
            .seek(SeekFrom::Start(HEADER_SIZE))
            .map_err(io_err(&self.path))?;
        (0..self.header.record_count)
            .map(|i| self.next_record(i))
            .collect()
    }

    fn next_record(&mut self, index: u64) -> Result<EmbeddingRecord, StoreError> {
        let h = self.header;
        let path = self.path.clone();
        let r = &mut self.file;
        let id = r.read_u64::<LittleEndian>().map_err(io_err(&path))?;
        let mut label_buf = vec![0u8; h.label_bytes()];
        r.read_exact(&mut label_buf).map_err(io_err(&path))?;
        let labels = (0..h.classes as usize)
            .map(|c| label_buf[c / 8] >> (c % 8) & 1 == 1)
            .collect();
        let mut cls = vec![0f32; h.dim as usize];
        r.read_f32_into::<LittleEndian>(&mut cls).map_err(io_err(&path))?;
        let mut data = vec![0f32; h.dim as usize * h.tokens()];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(io_err(&path))?;
        let rec = EmbeddingRecord {
            id,
            labels,
            cls,
            tokens: TokenMap {
                dim: h.dim as usize,
                s_t: h.s_t as usize,
                s_f: h.s_f as usize,
                data,
            },
        };
        h.check_record(index as usize, &rec)?;
        Ok(rec)
    }
}

pub fn read_record(path: impl AsRef<Path>, index: u64) -> Result<EmbeddingRecord, StoreError> {
    StoreReader::open(path)?.read_record(index)
}

pub fn read_store(path: impl AsRef<Path>) -> Result<(StoreHeader, Vec<EmbeddingRecord>), StoreError> {
    let mut reader = StoreReader::open(path)?;
    let records = reader.read_all()?;
    Ok((*reader.header(), records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use proptest::prelude::*;

    fn random_record(rng: &mut RngStream, id: u64, h: &StoreHeader) -> EmbeddingRecord {
        let d = h.dim as usize;
        let mut labels: Vec<bool> = (0..h.classes).map(|_| rng.uniform() < 0.4).collect();
        let pick = rng.below(labels.len());
        labels[pick] = true;
        EmbeddingRecord {
            id,
            labels,
            cls: (0..d).map(|_| rng.gaussian() as f32).collect(),
            tokens: TokenMap {
                dim: d,
                s_t: h.s_t as usize,
                s_f: h.s_f as usize,
                data: (0..d * h.tokens()).map(|_| rng.gaussian() as f32).collect(),
            },
        }
    }

    #[test]
    fn empty_store_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.pemb");
        let n = write_store(&path, &StoreHeader::new(4, 2, 2, 3), &[]).unwrap();
        assert_eq!(n, HEADER_SIZE);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), HEADER_SIZE);
        let reader = StoreReader::open(&path).unwrap();
        assert_eq!(reader.header().record_count, 0);
    }

    #[test]
    fn single_record_payload_layout() {
        let h = StoreHeader::new(2, 1, 1, 3);
        // id + ceil(3/8) label byte + 2 cls floats + 2 token floats
        assert_eq!(h.record_size(), 8 + 1 + 8 + 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.pemb");
        let rec = EmbeddingRecord {
            id: 7,
            labels: vec![true, false, true],
            cls: vec![1.5, -2.0],
            tokens: TokenMap {
                dim: 2,
                s_t: 1,
                s_f: 1,
                data: vec![0.25, 4.0],
            },
        };
        let n = write_store(&path, &h, std::slice::from_ref(&rec)).unwrap();
        assert_eq!(n, HEADER_SIZE + 25);
        let bytes = std::fs::read(&path).unwrap();
        let payload = &bytes[HEADER_SIZE as usize..];
        assert_eq!(&payload[..8], &7u64.to_le_bytes());
        assert_eq!(payload[8], 0b101);
        assert_eq!(&payload[9..13], &1.5f32.to_le_bytes());
        assert_eq!(read_record(&path, 0).unwrap(), rec);
    }

    #[test]
    fn out_of_range_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.pemb");
        let h = StoreHeader::new(3, 2, 1, 2);
        let mut rng = RngStream::new(1, 0);
        let recs: Vec<_> = (0..3).map(|i| random_record(&mut rng, i, &h)).collect();
        write_store(&path, &h, &recs).unwrap();
        assert!(matches!(
            read_record(&path, 3),
            Err(StoreError::OutOfRange { index: 3, count: 3 })
        ));
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_record(&path, 0), Err(StoreError::Format(_))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pemb");
        let h = StoreHeader::new(3, 2, 1, 2);
        let mut rng = RngStream::new(2, 0);
        let recs: Vec<_> = (0..2).map(|i| random_record(&mut rng, i, &h)).collect();
        write_store(&path, &h, &recs).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(StoreReader::open(&path), Err(StoreError::Format(_))));
    }

    #[test]
    fn dimension_mismatch_is_index_tagged() {
        let dir = tempfile::tempdir().unwrap();
        let h = StoreHeader::new(3, 2, 1, 2);
        let mut rng = RngStream::new(3, 0);
        let mut recs: Vec<_> = (0..4).map(|i| random_record(&mut rng, i, &h)).collect();
        recs[2].cls.push(0.0);
        let err = write_store(dir.path().join("x.pemb"), &h, &recs).unwrap_err();
        assert!(matches!(err, StoreError::DimensionMismatch { index: 2, .. }), "{err}");
    }

    #[test]
    fn empty_labels_need_flag() {
        let dir = tempfile::tempdir().unwrap();
        let h = StoreHeader::new(2, 1, 1, 2);
        let rec = EmbeddingRecord {
            id: 0,
            labels: vec![false, false],
            cls: vec![1.0, 1.0],
            tokens: TokenMap {
                dim: 2,
                s_t: 1,
                s_f: 1,
                data: vec![1.0, 1.0],
            },
        };
        let path = dir.path().join("e.pemb");
        assert!(matches!(
            write_store(&path, &h, std::slice::from_ref(&rec)),
            Err(StoreError::EmptyLabels { index: 0 })
        ));
        write_store(&path, &h.with_allow_empty(true), std::slice::from_ref(&rec)).unwrap();
        assert_eq!(read_record(&path, 0).unwrap(), rec);
    }

    #[test]
    fn hundred_record_round_trip_and_stride() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.pemb");
        let h = StoreHeader::new(5, 3, 2, 11);
        let mut rng = RngStream::new(4, 0);
        let recs: Vec<_> = (0..100).map(|i| random_record(&mut rng, 1000 + i, &h)).collect();
        write_store(&path, &h, &recs).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut reader = StoreReader::open(&path).unwrap();
        assert_eq!(reader.read_all().unwrap(), recs);
        for _ in 0..20 {
            let k = rng.below(100) as u64;
            let off = (HEADER_SIZE + k * h.record_size()) as usize;
            assert_eq!(&bytes[off..off + 8], &(1000 + k).to_le_bytes());
            assert_eq!(reader.read_record(k).unwrap(), recs[k as usize]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn round_trip_is_bit_identical(
            seed in any::<u64>(),
            dim in 1u32..6, s_t in 1u32..4, s_f in 1u32..3, classes in 1u32..20, n in 0usize..12,
        ) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.pemb");
            let h = StoreHeader::new(dim, s_t, s_f, classes);
            let mut rng = RngStream::new(seed, 0);
            let recs: Vec<_> = (0..n as u64).map(|i| random_record(&mut rng, i, &h)).collect();
            write_store(&path, &h, &recs).unwrap();
            let (h2, back) = read_store(&path).unwrap();
            prop_assert_eq!(h2.record_count as usize, n);
            for (a, b) in recs.iter().zip(&back) {
                prop_assert_eq!(a.id, b.id);
                prop_assert_eq!(&a.labels, &b.labels);
                let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(&a.cls), bits(&b.cls));
                prop_assert_eq!(bits(&a.tokens.data), bits(&b.tokens.data));
            }
            // random access equals sequential access
            let mut reader = StoreReader::open(&path).unwrap();
            for i in (0..n).rev() {
                prop_assert_eq!(&reader.read_record(i as u64).unwrap(), &back[i]);
            }
        }
    }
}
