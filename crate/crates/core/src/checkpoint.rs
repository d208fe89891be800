//! KFORGE1 checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   7 bytes  "KFORGE1" (the trailing digit is the format version)
//! count   u32      number of entries
//! entry   repeated: name_len u32, name bytes (UTF-8),
//!                   ndim u32, dims u64 x ndim,
//!                   offset u64 (in f64 elements, into the payload)
//! payload u64      total element count, then that many f64 values
//! ```
//!
//! Files are written to a temporary sibling and renamed into place, so a
//! crashed writer never leaves a truncated checkpoint behind.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{KforgeError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 7] = b"KFORGE1";

/// An in-memory checkpoint: named shaped arrays.
#[derive(Debug, Default)]
pub struct Checkpoint {
    entries: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.insert(name.into(), (shape.to_vec(), data));
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.insert(name, &t.shape(), t.to_vec());
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.entries
            .get(name)
            .map(|(s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Copy the named entry into `t`, which must already have the shape.
    pub fn load_into(&self, path: &Path, name: &str, t: &Tensor) -> Result<()> {
        let (shape, data) = self.get(name).ok_or_else(|| KforgeError::Checkpoint {
            path: path.display().to_string(),
            detail: format!("missing entry {name}"),
        })?;
        if shape != t.shape() {
            return Err(KforgeError::Checkpoint {
                path: path.display().to_string(),
                detail: format!(
                    "entry {name} has shape {shape:?}, expected {:?}",
                    t.shape()
                ),
            });
        }
        t.copy_from(data);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let err = |e| KforgeError::io(tmp.display().to_string(), e);
        let mut w = BufWriter::new(fs::File::create(&tmp).map_err(err)?);
        let write = |w: &mut BufWriter<fs::File>, bytes: &[u8]| -> Result<()> {
            w.write_all(bytes)
                .map_err(|e| KforgeError::io(tmp.display().to_string(), e))
        };

        write(&mut w, MAGIC)?;
        write(&mut w, &(self.entries.len() as u32).to_le_bytes())?;
        let mut offset = 0u64;
        for (name, (shape, data)) in &self.entries {
            write(&mut w, &(name.len() as u32).to_le_bytes())?;
            write(&mut w, name.as_bytes())?;
            write(&mut w, &(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                write(&mut w, &(d as u64).to_le_bytes())?;
            }
            write(&mut w, &offset.to_le_bytes())?;
            offset += data.len() as u64;
        }
        write(&mut w, &offset.to_le_bytes())?;
        for (_, (_, data)) in &self.entries {
            for &v in data {
                write(&mut w, &v.to_le_bytes())?;
            }
        }
        w.flush()
            .map_err(|e| KforgeError::io(tmp.display().to_string(), e))?;
        drop(w);
        fs::rename(&tmp, path).map_err(|e| KforgeError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes =
            fs::read(path).map_err(|e| KforgeError::io(path.display().to_string(), e))?;
        let fail = |detail: String| KforgeError::Checkpoint {
            path: path.display().to_string(),
            detail,
        };
        let mut cur = Cursor { bytes: &bytes, pos: 0 };

        let magic = cur.take(7).ok_or_else(|| fail("truncated magic".into()))?;
        if &magic[..6] != b"KFORGE" {
            return Err(fail(format!("bad magic {:?}", &magic)));
        }
        if magic[6] != b'1' {
            return Err(fail(format!(
                "unsupported version {:?}",
                char::from(magic[6])
            )));
        }
        let count = cur.u32().ok_or_else(|| fail("truncated count".into()))?;
        let mut manifest = Vec::with_capacity(count as usize);
        for i in 0..count {
            let trunc = || fail(format!("truncated manifest entry {i}"));
            let name_len = cur.u32().ok_or_else(trunc)? as usize;
            let name_bytes = cur.take(name_len).ok_or_else(trunc)?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| fail(format!("entry {i} name is not UTF-8")))?
                .to_string();
            let ndim = cur.u32().ok_or_else(trunc)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u64().ok_or_else(trunc)? as usize);
            }
            let offset = cur.u64().ok_or_else(trunc)? as usize;
            manifest.push((name, shape, offset));
        }
        let payload_len = cur
            .u64()
            .ok_or_else(|| fail("truncated payload length".into()))? as usize;
        let payload_bytes = cur
            .take(payload_len * 8)
            .ok_or_else(|| fail("truncated payload".into()))?;
        if cur.pos != bytes.len() {
            return Err(fail("trailing bytes after payload".into()));
        }
        let payload: Vec<f64> = payload_bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let mut ck = Checkpoint::new();
        let mut covered = 0usize;
        for (name, shape, offset) in manifest {
            let numel: usize = shape.iter().product();
            if offset + numel > payload_len {
                return Err(fail(format!(
                    "entry {name} spans [{offset}, {}) beyond payload of {payload_len}",
                    offset + numel
                )));
            }
            covered += numel;
            ck.insert(name, &shape, payload[offset..offset + numel].to_vec());
        }
        if covered != payload_len {
            return Err(fail(format!(
                "manifest covers {covered} elements, payload holds {payload_len}"
            )));
        }
        Ok(ck)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return None;
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}
