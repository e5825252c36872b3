//! Binary PGM (P5, 8-bit) image I/O.
//!
//! Frames and masks live in per-kind directories as `<timestamp_us>.pgm`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32) -> Self {
        GrayImage { width, height, pixels: vec![0; (width * height) as usize] }
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        self.pixels[(y * self.width + x) as usize] = v;
    }
}

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", image.width, image.height)?;
    w.write_all(&image.pixels)?;
    w.flush()?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let err = |msg: &str| Error::Parse { line: 0, msg: format!("{}: {msg}", path.display()) };

    // Header tokens: magic, width, height, maxval; whitespace separated
    // with optional `#` comments.
    let mut pos = 0usize;
    let mut tokens: Vec<String> = Vec::new();
    while tokens.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens.len() < 4 || tokens[0] != "P5" {
        return Err(err("not a binary PGM (P5) file"));
    }
    let width: u32 = tokens[1].parse().map_err(|_| err("bad width"))?;
    let height: u32 = tokens[2].parse().map_err(|_| err("bad height"))?;
    let maxval: u32 = tokens[3].parse().map_err(|_| err("bad maxval"))?;
    if maxval != 255 {
        return Err(err("only 8-bit PGM is supported"));
    }
    pos += 1; // single whitespace after maxval
    let expected = (width * height) as usize;
    if bytes.len() < pos + expected {
        return Err(err("truncated pixel payload"));
    }
    Ok(GrayImage { width, height, pixels: bytes[pos..pos + expected].to_vec() })
}

/// List `<timestamp_us>.pgm` files in ascending timestamp order.
pub fn list_timestamped(dir: &Path) -> Result<Vec<(i64, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("pgm") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Parse { line: 0, msg: format!("bad file name {path:?}") })?;
        let t: i64 = stem.parse().map_err(|_| Error::Parse {
            line: 0,
            msg: format!("file stem {stem:?} is not a microsecond timestamp"),
        })?;
        out.push((t, path));
    }
    out.sort_by_key(|&(t, _)| t);
    Ok(out)
}
