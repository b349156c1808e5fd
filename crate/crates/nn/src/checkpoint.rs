//! Named-tensor container with a fixed little-endian binary layout:
//! magic `XEDT`, u32 version, then records of
//! `u32 name_len | name | u32 rank | u64 dims[rank] | f32 payload`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{NnError, Result};

pub const MAGIC: &[u8; 4] = b"XEDT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    records: Vec<Record>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a record, keeping first-insertion order.
    pub fn put(&mut self, name: &str, dims: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        let rec = Record { name: name.to_string(), dims, data };
        match self.records.iter_mut().find(|r| r.name == name) {
            Some(slot) => *slot = rec,
            None => self.records.push(rec),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    /// Stores a UTF-8 string, one byte per element.
    pub fn put_text(&mut self, name: &str, text: &str) {
        let bytes: Vec<f32> = text.bytes().map(f32::from).collect();
        self.put(name, vec![bytes.len()], bytes);
    }

    pub fn get_text(&self, name: &str) -> Option<String> {
        let rec = self.get(name)?;
        let bytes: Option<Vec<u8>> = rec
            .data
            .iter()
            .map(|&x| ((0.0..=255.0).contains(&x) && x.fract() == 0.0).then_some(x as u8))
            .collect();
        String::from_utf8(bytes?).ok()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
            for &d in &r.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &r.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |reason: String| NnError::Checkpoint { path: origin.to_path_buf(), reason };
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4).map_err(&fail)? != MAGIC {
            return Err(fail("bad magic, not a checkpoint file".into()));
        }
        let version = cur.u32().map_err(&fail)?;
        if version != VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let mut ckpt = Checkpoint::new();
        while cur.pos < bytes.len() {
            let len = cur.u32().map_err(&fail)? as usize;
            let name = std::str::from_utf8(cur.take(len).map_err(&fail)?)
                .map_err(|_| fail("record name is not UTF-8".into()))?
                .to_string();
            let rank = cur.u32().map_err(&fail)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(cur.u64().map_err(&fail)? as usize);
            }
            let n: usize = dims.iter().product();
            let payload = cur.take(n * 4).map_err(&fail)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if ckpt.get(&name).is_some() {
                return Err(fail(format!("duplicate record {name}")));
            }
            ckpt.records.push(Record { name, dims, data });
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| NnError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| NnError::Io { path: PathBuf::from(path), source })?;
        Self::from_bytes(&bytes, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_of_a_single_record() {
        let mut c = Checkpoint::new();
        c.put("w", vec![2], vec![1.0, -2.5]);
        let b = c.to_bytes();
        assert_eq!(&b[..4], b"XEDT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(b[12], b'w');
        assert_eq!(b.len(), 4 + 4 + 4 + 1 + 4 + 8 + 8);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut c = Checkpoint::new();
        c.put("w", vec![3], vec![1.0, 2.0, 3.0]);
        let b = c.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1], Path::new("x")).is_err());
        assert!(Checkpoint::from_bytes(b"NOPE\x01\0\0\0", Path::new("x")).is_err());
    }

    #[test]
    fn text_records() {
        let mut c = Checkpoint::new();
        c.put_text("meta/technique", "reverse layup");
        assert_eq!(c.get_text("meta/technique").unwrap(), "reverse layup");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.xedt");
        let mut c = Checkpoint::new();
        c.put("a/b", vec![2, 2], vec![0.5, f32::MIN_POSITIVE, -0.0, 7.0]);
        c.put("scalar", vec![], vec![3.0]);
        c.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    proptest! {
        #[test]
        fn bytes_round_trip_bit_exact(
            recs in prop::collection::vec(("[a-z/]{1,12}", prop::collection::vec(any::<u32>(), 0..20)), 0..6)
        ) {
            let mut c = Checkpoint::new();
            for (name, bits) in &recs {
                let data: Vec<f32> = bits.iter().map(|b| f32::from_bits(*b)).collect();
                c.put(name, vec![data.len()], data);
            }
            let bytes = c.to_bytes();
            let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
