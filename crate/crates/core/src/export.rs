//! Image outputs: binary greyscale PGM (P5) files and their JSON legends.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EscError, Result};

/// Writes an 8-bit greyscale image, row-major.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(EscError::Shape(format!(
            "{} pixels cannot fill a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| EscError::io(path, e))
}

/// Reads a P5 file written by [`write_pgm`]: `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| EscError::io(path, e))?;
    let bad = || EscError::Invalid(format!("{} is not an 8-bit P5 image", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad());
    if fields[0] != "P5" || parse(&fields[3])? != 255 {
        return Err(bad());
    }
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let pixels = bytes.get(pos..pos + w * h).ok_or_else(bad)?.to_vec();
    Ok((w, h, pixels))
}

/// Meaning of one grey level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LegendEntry {
    pub value: u8,
    pub label: String,
}

/// Sidecar describing the grey levels of one or more PGM files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Legend {
    pub images: Vec<String>,
    pub entries: Vec<LegendEntry>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

impl Legend {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| EscError::io(path, e))
    }
}
