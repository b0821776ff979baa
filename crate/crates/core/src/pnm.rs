//! Binary PGM (P5) and PPM (P6) reading and writing, maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit raster with 1 (PGM) or 3 (PPM) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl PnmImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Validation(format!(
                "pnm images have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Validation(format!(
                "pnm buffer holds {} bytes, expected {}",
                data.len(),
                width * height * channels
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn magic(&self) -> &'static str {
        if self.channels == 1 {
            "P5"
        } else {
            "P6"
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("{}\n{} {}\n255\n", self.magic(), self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        parse(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse { offset: self.pos, message: message.into() })
    }

    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            self.pos = start;
            return self.err(format!("expected {what}"));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        match text.parse::<usize>() {
            Ok(v) => Ok(v),
            Err(_) => {
                self.pos = start;
                self.err(format!("{what} out of range"))
            }
        }
    }
}

/// Parses a binary P5 or P6 image.
pub fn parse(bytes: &[u8]) -> Result<PnmImage> {
    let mut cur = Cursor { bytes, pos: 0 };
    if bytes.len() < 2 || bytes[0] != b'P' {
        return cur.err("missing P5/P6 magic");
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        _ => return cur.err("unsupported magic, expected P5 or P6"),
    };
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let max_pos = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        cur.pos = max_pos;
        return cur.err(format!("maxval must be 255, got {maxval}"));
    }
    if width == 0 || height == 0 {
        return cur.err("zero-sized image");
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return cur.err("expected single whitespace before raster"),
    }
    let need = width * height * channels;
    let available = bytes.len() - cur.pos;
    if available < need {
        cur.pos = bytes.len();
        return cur.err(format!("raster truncated: need {need} bytes, found {available}"));
    }
    let data = bytes[cur.pos..cur.pos + need].to_vec();
    PnmImage::new(width, height, channels, data)
}
