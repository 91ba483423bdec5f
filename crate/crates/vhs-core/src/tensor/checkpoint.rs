//! Versioned binary checkpoint archive.
//!
//! Layout: magic "VHSC", format version u32, entry count u32, then per entry
//! name length (u32) + UTF-8 name, dtype tag (u8: 0 = f32, 1 = u64), rank
//! (u32), dims (u64 each), raw little-endian payload. Round-trips bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"VHSC";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes (not a checkpoint file)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("corrupt entry: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    U64(Vec<u64>),
}

impl EntryData {
    fn dtype_tag(&self) -> u8 {
        match self {
            EntryData::F32(_) => 0,
            EntryData::U64(_) => 1,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            EntryData::F32(v) => v.len(),
            EntryData::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match self {
            EntryData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u64(&self) -> Option<&[u64]> {
        match self {
            EntryData::U64(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: EntryData,
}

impl Entry {
    pub fn f32(name: impl Into<String>, dims: Vec<u64>, data: Vec<f32>) -> Entry {
        Entry {
            name: name.into(),
            dims,
            data: EntryData::F32(data),
        }
    }

    pub fn u64(name: impl Into<String>, dims: Vec<u64>, data: Vec<u64>) -> Entry {
        Entry {
            name: name.into(),
            dims,
            data: EntryData::U64(data),
        }
    }
}

pub fn save_checkpoint(path: &Path, entries: &[Entry]) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in entries {
        let expected: u64 = e.dims.iter().product();
        if expected != e.data.len() as u64 {
            return Err(CheckpointError::Corrupt(format!(
                "entry {}: dims {:?} do not match {} values",
                e.name,
                e.dims,
                e.data.len()
            )));
        }
        let name = e.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[e.data.dtype_tag()])?;
        w.write_all(&(e.dims.len() as u32).to_le_bytes())?;
        for d in &e.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        match &e.data {
            EntryData::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            EntryData::U64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_buf<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>, CheckpointError> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<Entry>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let name = String::from_utf8(read_exact_buf(&mut r, name_len)?)
            .map_err(|e| CheckpointError::Corrupt(format!("entry name not UTF-8: {e}")))?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let rank = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(&mut r)?);
        }
        let numel = dims.iter().product::<u64>() as usize;
        let data = match tag[0] {
            0 => {
                let raw = read_exact_buf(&mut r, numel * 4)?;
                EntryData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                )
            }
            1 => {
                let raw = read_exact_buf(&mut r, numel * 8)?;
                EntryData::U64(
                    raw.chunks_exact(8)
                        .map(|c| {
                            u64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
                        })
                        .collect(),
                )
            }
            t => return Err(CheckpointError::Corrupt(format!("unknown dtype tag {t}"))),
        };
        entries.push(Entry { name, dims, data });
    }
    Ok(entries)
}
