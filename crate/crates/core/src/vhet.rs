//! The `VHET` tensor file format and the `VHEC` checkpoint container.
//!
//! Tensor record: magic `VHET`, version byte, dtype byte (0 = f32 LE,
//! 1 = f64 LE), rank byte, rank x u64 LE dims, then the payload row-major.
//!
//! Container: magic `VHEC`, version byte, u32 LE section count, then
//! sections of `[u16 name_len, name, u8 kind, u64 payload_len, payload]`.
//! Kind 0 wraps a tensor record, kind 1 a table of named u64 metadata
//! (step counter, seed, optimizer step counts). Any unknown kind aborts the
//! load; nothing is returned partially.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::Error;
use crate::tensor::{Dtype, Element, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"VHET";
pub const CONTAINER_MAGIC: &[u8; 4] = b"VHEC";
pub const VERSION: u8 = 1;

fn dtype_size(d: Dtype) -> usize {
    match d {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    }
}

pub fn write_tensor<E: Element, W: Write>(w: &mut W, t: &Tensor<E>) -> std::io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[VERSION, E::DTYPE as u8, t.rank() as u8])?;
    for &d in t.dims() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes_vec())?;
    }
    Ok(())
}

pub fn read_tensor<E: Element, R: Read>(r: &mut R) -> crate::Result<Tensor<E>> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    let io_err = |e: std::io::Error| Error::Checkpoint(format!("tensor read: {e}"));
    let mut head = [0u8; 7];
    r.read_exact(&mut head).map_err(io_err)?;
    if &head[..4] != TENSOR_MAGIC {
        return Err(bad("bad tensor magic"));
    }
    if head[4] != VERSION {
        return Err(bad("unsupported tensor version"));
    }
    let dtype = match head[5] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        other => return Err(Error::Checkpoint(format!("unknown dtype byte {other}"))),
    };
    if dtype != E::DTYPE {
        return Err(Error::Checkpoint(format!(
            "dtype mismatch: file has {:?}, expected {:?}",
            dtype,
            E::DTYPE
        )));
    }
    let rank = head[6] as usize;
    if !(1..=4).contains(&rank) {
        return Err(bad("tensor rank outside 1..=4"));
    }
    let mut dims = vec![0usize; rank];
    for d in dims.iter_mut() {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(io_err)?;
        *d = u64::from_le_bytes(b) as usize;
    }
    let count: usize = dims.iter().product();
    let esz = dtype_size(dtype);
    let mut payload = vec![0u8; count * esz];
    r.read_exact(&mut payload).map_err(io_err)?;
    let data: Vec<E> = payload.chunks_exact(esz).map(E::from_le_slice).collect();
    Tensor::new(&dims, data)
}

pub fn write_tensor_file<E: Element>(path: &Path, t: &Tensor<E>) -> crate::Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensor(&mut f, t).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file<E: Element>(path: &Path) -> crate::Result<Tensor<E>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(&mut f)
}

/// Named tensors plus named u64 metadata, written as one container file.
/// Sections carry their own dtype, so f32 parameters and f64 topic matrices
/// coexist in one checkpoint.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub t32: BTreeMap<String, Tensor<f32>>,
    pub t64: BTreeMap<String, Tensor<f64>>,
    pub meta: BTreeMap<String, u64>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn tensor_names(&self) -> Vec<&String> {
        self.t32.keys().chain(self.t64.keys()).collect()
    }

    pub fn write_to(&self, path: &Path) -> crate::Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CONTAINER_MAGIC);
        buf.push(VERSION);
        let count = self.t32.len() + self.t64.len() + usize::from(!self.meta.is_empty());
        buf.extend_from_slice(&(count as u32).to_le_bytes());
        for (name, t) in &self.t32 {
            let mut payload = Vec::new();
            write_tensor(&mut payload, t).expect("in-memory write");
            push_section(&mut buf, name, 0, &payload);
        }
        for (name, t) in &self.t64 {
            let mut payload = Vec::new();
            write_tensor(&mut payload, t).expect("in-memory write");
            push_section(&mut buf, name, 0, &payload);
        }
        if !self.meta.is_empty() {
            let mut payload = Vec::new();
            payload.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
            for (k, v) in &self.meta {
                payload.extend_from_slice(&(k.len() as u16).to_le_bytes());
                payload.extend_from_slice(k.as_bytes());
                payload.extend_from_slice(&v.to_le_bytes());
            }
            push_section(&mut buf, "meta", 1, &payload);
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_from(path: &Path) -> crate::Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
        if bytes.len() < 9 || &bytes[..4] != CONTAINER_MAGIC {
            return Err(bad("bad container magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(bad("unsupported container version".into()));
        }
        let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let mut pos = 9usize;
        let mut out = Container::new();
        for _ in 0..count {
            if pos + 2 > bytes.len() {
                return Err(bad("truncated section header".into()));
            }
            let name_len = u16::from_le_bytes(bytes[pos..pos + 2].try_into().unwrap()) as usize;
            pos += 2;
            if pos + name_len + 9 > bytes.len() {
                return Err(bad("truncated section".into()));
            }
            let name = String::from_utf8(bytes[pos..pos + name_len].to_vec())
                .map_err(|_| bad("section name not UTF-8".into()))?;
            pos += name_len;
            let kind = bytes[pos];
            pos += 1;
            let plen = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) as usize;
            pos += 8;
            if pos + plen > bytes.len() {
                return Err(bad(format!("section {name} overruns file")));
            }
            let payload = &bytes[pos..pos + plen];
            pos += plen;
            match kind {
                0 => {
                    if payload.len() < 6 {
                        return Err(bad(format!("truncated tensor section {name}")));
                    }
                    match payload[5] {
                        0 => {
                            let t = read_tensor::<f32, _>(&mut &payload[..])?;
                            out.t32.insert(name, t);
                        }
                        1 => {
                            let t = read_tensor::<f64, _>(&mut &payload[..])?;
                            out.t64.insert(name, t);
                        }
                        other => {
                            return Err(bad(format!("unknown dtype byte {other} in {name}")));
                        }
                    }
                }
                1 => {
                    if payload.len() < 4 {
                        return Err(bad("truncated meta".into()));
                    }
                    let n = u32::from_le_bytes(payload[..4].try_into().unwrap()) as usize;
                    let mut mp = 4usize;
                    for _ in 0..n {
                        let klen =
                            u16::from_le_bytes(payload[mp..mp + 2].try_into().unwrap()) as usize;
                        mp += 2;
                        let key = String::from_utf8(payload[mp..mp + klen].to_vec())
                            .map_err(|_| bad("meta key not UTF-8".into()))?;
                        mp += klen;
                        let val = u64::from_le_bytes(payload[mp..mp + 8].try_into().unwrap());
                        mp += 8;
                        out.meta.insert(key, val);
                    }
                }
                other => {
                    return Err(bad(format!("unknown section kind {other} ({name})")));
                }
            }
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after last section".into()));
        }
        Ok(out)
    }
}

fn push_section(buf: &mut Vec<u8>, name: &str, kind: u8, payload: &[u8]) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(kind);
    buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    buf.extend_from_slice(payload);
}
