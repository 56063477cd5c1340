//! Checkpoint archive: a single little-endian binary file holding the
//! iteration counter, a verbatim config echo, every named parameter tensor
//! (network weights and running statistics), and the optimizer's momentum
//! buffers. Values are stored as f32 bit patterns, so a save/load round
//! trip reproduces forward passes bitwise.

use super::{Result, TrainError};
use crate::netcore::Parameterized;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"NSEGCKPT";
const VERSION: u32 = 1;
/// Refuse to allocate for absurd length fields when reading foreign files.
const MAX_LEN: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    /// The experiment config document, echoed verbatim so a checkpoint is
    /// self-describing and the run is reproducible from the file alone.
    pub config_echo: String,
    pub tensors: BTreeMap<String, Vec<f32>>,
    pub optimizer_buffers: BTreeMap<String, Vec<f32>>,
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_map<W: Write>(w: &mut W, map: &BTreeMap<String, Vec<f32>>) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(map.len() as u64)?;
    for (name, values) in map {
        w.write_u64::<LittleEndian>(name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        w.write_u64::<LittleEndian>(values.len() as u64)?;
        for &v in values {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

fn read_len<R: Read>(r: &mut R, what: &str) -> Result<usize> {
    let len = r
        .read_u64::<LittleEndian>()
        .map_err(|e| TrainError::Checkpoint(format!("truncated while reading {what}: {e}")))?;
    if len > MAX_LEN {
        return Err(TrainError::Checkpoint(format!("unreasonable {what} length {len}")));
    }
    Ok(len as usize)
}

fn read_map<R: Read>(r: &mut R, what: &str) -> Result<BTreeMap<String, Vec<f32>>> {
    let count = read_len(r, what)?;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_len(r, "tensor name")?;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|e| TrainError::Checkpoint(format!("truncated tensor name: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| TrainError::Checkpoint("tensor name is not UTF-8".into()))?;
        let value_len = read_len(r, "tensor data")?;
        let mut values = Vec::with_capacity(value_len);
        for _ in 0..value_len {
            values.push(
                r.read_f32::<LittleEndian>()
                    .map_err(|e| TrainError::Checkpoint(format!("truncated tensor {name}: {e}")))?,
            );
        }
        if map.insert(name.clone(), values).is_some() {
            return Err(TrainError::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    Ok(map)
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
        let mut w = BufWriter::new(file);
        let inner = (|| -> std::io::Result<()> {
            w.write_all(MAGIC)?;
            w.write_u32::<LittleEndian>(VERSION)?;
            w.write_u64::<LittleEndian>(self.iteration)?;
            w.write_u64::<LittleEndian>(self.config_echo.len() as u64)?;
            w.write_all(self.config_echo.as_bytes())?;
            write_map(&mut w, &self.tensors)?;
            write_map(&mut w, &self.optimizer_buffers)?;
            w.flush()
        })();
        inner.map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
        if &magic != MAGIC {
            return Err(TrainError::Checkpoint(format!(
                "{}: not a checkpoint file (bad magic)",
                path.display()
            )));
        }
        let version = r
            .read_u32::<LittleEndian>()
            .map_err(|e| TrainError::Checkpoint(format!("truncated version: {e}")))?;
        if version != VERSION {
            return Err(TrainError::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let iteration = r
            .read_u64::<LittleEndian>()
            .map_err(|e| TrainError::Checkpoint(format!("truncated iteration: {e}")))?;
        let echo_len = read_len(&mut r, "config echo")?;
        let mut echo = vec![0u8; echo_len];
        r.read_exact(&mut echo)
            .map_err(|e| TrainError::Checkpoint(format!("truncated config echo: {e}")))?;
        let config_echo = String::from_utf8(echo)
            .map_err(|_| TrainError::Checkpoint("config echo is not UTF-8".into()))?;
        let tensors = read_map(&mut r, "tensor table")?;
        let optimizer_buffers = read_map(&mut r, "optimizer table")?;
        Ok(Self {
            iteration,
            config_echo,
            tensors,
            optimizer_buffers,
        })
    }
}

/// Copies every parameter and state slot of `net` (prefixed) into `out`.
pub fn collect_params<N: Parameterized<f32>>(
    net: &mut N,
    prefix: &str,
    out: &mut BTreeMap<String, Vec<f32>>,
) {
    net.visit_params(prefix, &mut |slot| {
        out.insert(slot.name, slot.value.to_vec());
    });
}

/// Restores every slot of `net` from the map; every visited slot must be
/// present with the right length.
pub fn apply_params<N: Parameterized<f32>>(
    net: &mut N,
    prefix: &str,
    tensors: &BTreeMap<String, Vec<f32>>,
) -> Result<()> {
    let mut missing = Vec::new();
    net.visit_params(prefix, &mut |slot| match tensors.get(&slot.name) {
        Some(values) if values.len() == slot.value.len() => {
            slot.value.copy_from_slice(values);
        }
        Some(values) => missing.push(format!(
            "{} has {} values, checkpoint holds {}",
            slot.name,
            slot.value.len(),
            values.len()
        )),
        None => missing.push(format!("{} absent from checkpoint", slot.name)),
    });
    if missing.is_empty() {
        Ok(())
    } else {
        Err(TrainError::Checkpoint(missing.join("; ")))
    }
}
