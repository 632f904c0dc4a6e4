//! Binary portable graymap (P5) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graymap {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Row-major samples, each ≤ `maxval`.
    pub samples: Vec<u16>,
}

impl Graymap {
    pub fn new(width: usize, height: usize, maxval: u16, samples: Vec<u16>) -> Result<Self> {
        if samples.len() != width * height || maxval == 0 {
            return Err(Error::Data(format!(
                "graymap {width}x{height} (maxval {maxval}) got {} samples",
                samples.len()
            )));
        }
        Ok(Graymap {
            width,
            height,
            maxval,
            samples,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval > 255 {
            for &s in &self.samples {
                out.extend_from_slice(&s.to_be_bytes());
            }
        } else {
            out.extend(self.samples.iter().map(|&s| s as u8));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // whitespace and comments
            while pos < bytes.len() {
                if bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                } else if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    break;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?);
        }
        if fields[0] != "P5" {
            return Err(format!("unsupported magic {:?}", fields[0]));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|e| format!("bad header field {s:?}: {e}"));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
            return Err(format!("invalid header {width}x{height} maxval {maxval}"));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let n = width * height;
        let wide = maxval > 255;
        let need = if wide { 2 * n } else { n };
        let raster = bytes.get(pos..).unwrap_or(&[]);
        if raster.len() != need {
            return Err(format!("raster has {} bytes, expected {need}", raster.len()));
        }
        let samples: Vec<u16> = if wide {
            raster
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect()
        } else {
            raster.iter().map(|&b| b as u16).collect()
        };
        if samples.iter().any(|&s| s as usize > maxval) {
            return Err("sample exceeds maxval".into());
        }
        Ok(Graymap {
            width,
            height,
            maxval: maxval as u16,
            samples,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|reason| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}
