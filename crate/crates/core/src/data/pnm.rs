//! Binary PGM (P5) and PPM (P6) with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved 8-bit raster, 1 (gray) or 3 (RGB) channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image8 {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Data(format!("PNM supports 1 or 3 channels, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Data(format!(
                "{}x{}x{} image needs {} bytes, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        Ok(Image8 {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Image {
            path: path.to_path_buf(),
            detail,
        };
        let mut pos = 0;
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => return Err(bad("not a binary PGM (P5) or PPM (P6) file".to_string())),
        };
        pos += 2;
        let mut fields = [0usize; 3];
        for (i, field) in fields.iter_mut().enumerate() {
            loop {
                match bytes.get(pos) {
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(c) if c.is_ascii_whitespace() => pos += 1,
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            let names = ["width", "height", "maxval"];
            *field = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(format!("malformed {} in header", names[i])))?;
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(bad("header not terminated by whitespace".to_string()));
        }
        pos += 1;
        let [width, height, maxval] = fields;
        if width == 0 || height == 0 {
            return Err(bad("zero image dimension".to_string()));
        }
        if maxval != 255 {
            return Err(bad(format!("only 8-bit images with maxval 255 are supported, got {maxval}")));
        }
        let need = width * height * channels;
        let data = bytes
            .get(pos..pos + need)
            .ok_or_else(|| bad(format!("expected {need} pixel bytes, found {}", bytes.len() - pos)))?;
        Ok(Image8 {
            width,
            height,
            channels,
            data: data.to_vec(),
        })
    }
}

pub fn read_pnm(path: &Path) -> Result<Image8> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Image8::decode(&bytes, path)
}

pub fn write_pnm(path: &Path, image: &Image8) -> Result<()> {
    fs::write(path, image.encode()).map_err(|e| Error::io(path, e))
}
