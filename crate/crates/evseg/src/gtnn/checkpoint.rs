//! Checkpoint file format.
//!
//! Layout: magic `GTNN`, a little-endian u32 format version, a u32 header
//! length, a UTF-8 text header (`config key value` lines followed by one
//! `tensor name rows cols` line per state tensor), then the tensor values
//! as little-endian f32 in header order. Loading validates the magic, the
//! version, and the total byte length.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{GtnnConfig, GtnnModel};

const MAGIC: &[u8; 4] = b"GTNN";
const VERSION: u32 = 1;

fn header_text(model: &GtnnModel) -> String {
    let mut header = String::new();
    for line in model.config.to_text().lines() {
        let (k, v) = line.split_once('=').expect("config text is key=value");
        header.push_str(&format!("config {k} {v}\n"));
    }
    model.visit_state(&mut |name, t| {
        header.push_str(&format!("tensor {name} {} {}\n", t.rows(), t.cols()));
    });
    header
}

pub fn save_checkpoint(model: &GtnnModel, path: &Path) -> Result<()> {
    let header = header_text(model);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    let mut io_err: Option<std::io::Error> = None;
    model.visit_state(&mut |_, t| {
        if io_err.is_some() {
            return;
        }
        for &v in t.data() {
            if let Err(e) = w.write_all(&(v as f32).to_le_bytes()) {
                io_err = Some(e);
                return;
            }
        }
    });
    if let Some(e) = io_err {
        return Err(e.into());
    }
    w.flush()?;
    Ok(())
}

struct Parsed {
    config: GtnnConfig,
    tensors: Vec<(String, usize, usize)>,
    payload_offset: usize,
    bytes: Vec<u8>,
}

fn parse_file(path: &Path) -> Result<Parsed> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(Error::CorruptCheckpoint("file shorter than the fixed header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(Error::CorruptCheckpoint("truncated header".into()));
    }
    let header = std::str::from_utf8(&bytes[12..12 + header_len])
        .map_err(|_| Error::CorruptCheckpoint("header is not UTF-8".into()))?;

    let mut config_text = String::new();
    let mut tensors = Vec::new();
    for line in header.lines() {
        if let Some(rest) = line.strip_prefix("config ") {
            let (k, v) = rest
                .split_once(' ')
                .ok_or_else(|| Error::CorruptCheckpoint(format!("bad config line {line:?}")))?;
            config_text.push_str(&format!("{k}={v}\n"));
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::CorruptCheckpoint(format!("bad tensor line {line:?}")));
            }
            let rows: usize = parts[1]
                .parse()
                .map_err(|_| Error::CorruptCheckpoint(format!("bad rows in {line:?}")))?;
            let cols: usize = parts[2]
                .parse()
                .map_err(|_| Error::CorruptCheckpoint(format!("bad cols in {line:?}")))?;
            tensors.push((parts[0].to_string(), rows, cols));
        } else if !line.trim().is_empty() {
            return Err(Error::CorruptCheckpoint(format!("unknown header line {line:?}")));
        }
    }
    let config = GtnnConfig::from_text(&config_text)
        .map_err(|e| Error::CorruptCheckpoint(format!("bad embedded config: {e}")))?;

    let expected: usize = tensors.iter().map(|(_, r, c)| r * c * 4).sum();
    let payload_offset = 12 + header_len;
    if bytes.len() != payload_offset + expected {
        return Err(Error::CorruptCheckpoint(format!(
            "payload length {} does not match header ({} expected)",
            bytes.len() - payload_offset,
            expected
        )));
    }
    Ok(Parsed { config, tensors, payload_offset, bytes })
}

fn fill_model(model: &mut GtnnModel, parsed: &Parsed) -> Result<()> {
    // Expected state layout of this model.
    let mut expected: Vec<(String, usize, usize)> = Vec::new();
    model.visit_state(&mut |name, t| expected.push((name.to_string(), t.rows(), t.cols())));
    if expected.len() != parsed.tensors.len() {
        return Err(Error::ConfigMismatch(format!(
            "model has {} state tensors, checkpoint has {}",
            expected.len(),
            parsed.tensors.len()
        )));
    }
    for (e, g) in expected.iter().zip(&parsed.tensors) {
        if e != g {
            return Err(Error::ConfigMismatch(format!(
                "expected tensor {} {}x{}, found {} {}x{}",
                e.0, e.1, e.2, g.0, g.1, g.2
            )));
        }
    }
    let mut offset = parsed.payload_offset;
    let mut fill_err: Option<Error> = None;
    model.visit_state_mut(&mut |t: &mut Tensor| {
        if fill_err.is_some() {
            return;
        }
        for v in t.data_mut() {
            let raw: [u8; 4] = parsed.bytes[offset..offset + 4].try_into().unwrap();
            *v = f32::from_le_bytes(raw) as f64;
            offset += 4;
        }
        if !t.all_finite() {
            fill_err = Some(Error::CorruptCheckpoint("non-finite parameter value".into()));
        }
    });
    match fill_err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Rebuild a model from a checkpoint, using the configuration embedded in
/// its header.
pub fn load_checkpoint(path: &Path) -> Result<GtnnModel> {
    let parsed = parse_file(path)?;
    let mut model = GtnnModel::new(parsed.config.clone(), 0)?;
    fill_model(&mut model, &parsed)?;
    Ok(model)
}

impl GtnnModel {
    /// Load parameters into this model, validating that the checkpoint was
    /// written by an identically configured one.
    pub fn load_params(&mut self, path: &Path) -> Result<()> {
        let parsed = parse_file(path)?;
        if parsed.config != self.config {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint config {:?} differs from model config {:?}",
                parsed.config, self.config
            )));
        }
        fill_model(self, &parsed)
    }
}
