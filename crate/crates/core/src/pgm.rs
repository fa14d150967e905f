//! Binary PGM (P5) reading and writing.
//!
//! Images are stored with maxval 255, quantized as `floor(v * 255 + 0.5)`.
//! Label maps are stored with maxval 65535, two bytes per sample, most
//! significant byte first as the Netpbm format requires.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Image, LabelMap};

pub const IMAGE_MAXVAL: u16 = 255;
pub const LABEL_MAXVAL: u16 = 65535;

/// Raw decoded samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn encode(pgm: &Pgm) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", pgm.width, pgm.height, pgm.maxval).into_bytes();
    if pgm.maxval < 256 {
        out.extend(pgm.samples.iter().map(|&s| s as u8));
    } else {
        for &s in &pgm.samples {
            out.extend_from_slice(&s.to_be_bytes());
        }
    }
    out
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
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
            return Err(Error::format(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::format(start, format!("{what} out of range")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Pgm> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let offset = if bytes.first() == Some(&b'P') { 1 } else { 0 };
        return Err(Error::format(offset, "not a binary PGM (expected magic P5)"));
    }
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval_at = r.pos;
    let maxval = r.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::format(maxval_at, "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(maxval_at, format!("maxval {maxval} outside 1..=65535")));
    }
    // exactly one whitespace byte separates the header from the raster
    if r.pos >= bytes.len() || !bytes[r.pos].is_ascii_whitespace() {
        return Err(Error::format(r.pos, "missing whitespace after maxval"));
    }
    let start = r.pos + 1;
    let bytes_per_sample = if maxval < 256 { 1 } else { 2 };
    let need = width * height * bytes_per_sample;
    let raster = &bytes[start..];
    if raster.len() < need {
        return Err(Error::format(
            bytes.len(),
            format!("truncated raster: {} of {need} bytes", raster.len()),
        ));
    }
    let samples: Vec<u16> = if bytes_per_sample == 1 {
        raster[..need].iter().map(|&b| b as u16).collect()
    } else {
        raster[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    if let Some(i) = samples.iter().position(|&s| s as usize > maxval) {
        return Err(Error::format(start + i * bytes_per_sample, "sample exceeds maxval"));
    }
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        samples,
    })
}

/// Writes through a temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Writes channel 0 of `image`.
pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    if image.channels() != 1 {
        return Err(Error::Shape(format!(
            "PGM holds one channel, image has {}",
            image.channels()
        )));
    }
    let pgm = Pgm {
        width: image.width(),
        height: image.height(),
        maxval: IMAGE_MAXVAL,
        samples: image.data().iter().map(|&v| quantize(v) as u16).collect(),
    };
    write_atomic(path, &encode(&pgm))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let pgm = read_pgm(path)?;
    let scale = pgm.maxval as f64;
    Image::new(
        pgm.height,
        pgm.width,
        1,
        pgm.samples.iter().map(|&s| s as f64 / scale).collect(),
    )
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let pgm = Pgm {
        width: labels.width(),
        height: labels.height(),
        maxval: LABEL_MAXVAL,
        samples: labels.data().to_vec(),
    };
    write_atomic(path, &encode(&pgm))
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let pgm = read_pgm(path)?;
    LabelMap::new(pgm.height, pgm.width, pgm.samples)
}
