//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian `u64` unless noted:
//!
//! ```text
//! magic "VQCSICKP" | u32 version | config length | config TOML bytes
//! | tensor count | per tensor: name length, UTF-8 name, rank, dims, f64 payload
//! ```
//!
//! Writes go to a temporary sibling file that is renamed into place.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor_io::{read_tensor, read_u64, write_tensor};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"VQCSICKP";
const VERSION: u32 = 1;

pub fn save(path: &Path, cfg: &TrainConfig, model: &Model) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut out = BufWriter::new(std::fs::File::create(&tmp)?);
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        let text = cfg.to_toml();
        out.write_all(&(text.len() as u64).to_le_bytes())?;
        out.write_all(text.as_bytes())?;
        let names = model.param_names();
        out.write_all(&(names.len() as u64).to_le_bytes())?;
        for (name, t) in names.iter().zip(model.params()) {
            out.write_all(&(name.len() as u64).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            write_tensor(&mut out, &[t.rows(), t.cols()], t.data())?;
        }
        out.flush()?;
        out.get_ref().sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint back into its configuration and parameters.
pub fn load(path: &Path) -> Result<(TrainConfig, Model)> {
    let file =
        std::fs::File::open(path).map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let mut input = BufReader::new(file);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let mut version = [0u8; 4];
    input.read_exact(&mut version)?;
    let version = u32::from_le_bytes(version);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let text = read_string(&mut input, 1 << 24)?;
    let cfg = TrainConfig::from_toml(&text)?;
    let mut model = Model::init(&cfg)?;
    let names = model.param_names();
    let count = read_u64(&mut input)? as usize;
    if count != names.len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, configuration needs {}",
            names.len()
        )));
    }
    for (expected, slot) in names.iter().zip(model.params_mut()) {
        let name = read_string(&mut input, 1024)?;
        if &name != expected {
            return Err(Error::Checkpoint(format!("found tensor {name}, expected {expected}")));
        }
        let (dims, data) = read_tensor(&mut input)?;
        if dims != [slot.rows(), slot.cols()] {
            return Err(Error::Checkpoint(format!("{name} stored with dims {dims:?}")));
        }
        slot.data_mut().copy_from_slice(&data);
    }
    Ok((cfg, model))
}

fn read_string<R: Read>(input: &mut R, limit: usize) -> Result<String> {
    let len = read_u64(input)? as usize;
    if len > limit {
        return Err(Error::Checkpoint(format!("implausible string length {len}")));
    }
    let mut buf = vec![0u8; len];
    input.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
}
