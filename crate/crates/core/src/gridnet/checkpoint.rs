//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "GNET" | version u32 | id_len u32 | id bytes
//! n_layers u32 | (in_ch u32, out_ch u32) * n_layers
//! seed u64 | update_count u64 | n_params u64 | params f64 * n_params
//! crc32 u32 over everything before it
//! ```
//!
//! Each layer contributes `out*in*9` weights (out-major, then in, then the
//! 3x3 kernel row-major) followed by `out` biases.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{GridNet, LayerShape};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GNET";
const VERSION: u32 = 1;

pub fn encode(model: &GridNet) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.write_u32::<LittleEndian>(VERSION).unwrap();
    let id = model.architecture_id().as_bytes();
    buf.write_u32::<LittleEndian>(id.len() as u32).unwrap();
    buf.extend_from_slice(id);
    buf.write_u32::<LittleEndian>(model.layers().len() as u32).unwrap();
    for l in model.layers() {
        buf.write_u32::<LittleEndian>(l.in_ch as u32).unwrap();
        buf.write_u32::<LittleEndian>(l.out_ch as u32).unwrap();
    }
    buf.write_u64::<LittleEndian>(model.seed()).unwrap();
    buf.write_u64::<LittleEndian>(model.update_count()).unwrap();
    buf.write_u64::<LittleEndian>(model.params().len() as u64).unwrap();
    for &p in model.params() {
        buf.write_f64::<LittleEndian>(p).unwrap();
    }
    let crc = crc32fast::hash(&buf);
    buf.write_u32::<LittleEndian>(crc).unwrap();
    buf
}

pub fn decode(bytes: &[u8]) -> Result<GridNet> {
    if bytes.len() < 8 {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: "truncated checkpoint".into(),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum {
            path: "<checkpoint>".into(),
            stored,
            computed,
        });
    }
    let mut cur = Cursor::new(body);
    let fail = |cur: &Cursor<&[u8]>, msg: &str| Error::Parse {
        offset: cur.position() as usize,
        message: msg.into(),
    };
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| fail(&cur, "missing magic"))?;
    if &magic != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "bad magic".into(),
        });
    }
    let version = cur.read_u32::<LittleEndian>().map_err(|_| fail(&cur, "missing version"))?;
    if version != VERSION {
        return Err(fail(&cur, &format!("unsupported version {version}")));
    }
    let id_len = cur.read_u32::<LittleEndian>().map_err(|_| fail(&cur, "missing id length"))? as usize;
    let mut id = vec![0u8; id_len];
    cur.read_exact(&mut id).map_err(|_| fail(&cur, "truncated id"))?;
    let id = String::from_utf8(id).map_err(|_| fail(&cur, "id is not utf-8"))?;
    let n_layers = cur.read_u32::<LittleEndian>().map_err(|_| fail(&cur, "missing layer count"))?;
    let mut layers = Vec::with_capacity(n_layers as usize);
    for _ in 0..n_layers {
        let in_ch = cur.read_u32::<LittleEndian>().map_err(|_| fail(&cur, "truncated layer"))? as usize;
        let out_ch = cur.read_u32::<LittleEndian>().map_err(|_| fail(&cur, "truncated layer"))? as usize;
        layers.push(LayerShape { in_ch, out_ch });
    }
    let seed = cur.read_u64::<LittleEndian>().map_err(|_| fail(&cur, "missing seed"))?;
    let updates = cur.read_u64::<LittleEndian>().map_err(|_| fail(&cur, "missing update count"))?;
    let n = cur.read_u64::<LittleEndian>().map_err(|_| fail(&cur, "missing param count"))? as usize;
    if n > body.len() / 8 {
        return Err(fail(&cur, "parameter count exceeds payload"));
    }
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        params.push(cur.read_f64::<LittleEndian>().map_err(|_| fail(&cur, "truncated parameters"))?);
    }
    if (cur.position() as usize) != body.len() {
        return Err(fail(&cur, "trailing bytes"));
    }
    GridNet::from_parts(id, layers, params, seed, updates)
}

pub fn write_checkpoint(model: &GridNet, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<GridNet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checksum { stored, computed, .. } => Error::Checksum {
            path: path.to_path_buf(),
            stored,
            computed,
        },
        other => other,
    })
}
