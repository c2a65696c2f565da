//! 8-bit retinal images: binary PGM/PPM and a restricted PNG subset
//! (8-bit, non-interlaced, grayscale or RGB).

use std::fs;
use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::write_atomic;

/// Imaging modality. FA is grayscale, CFP is color.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "FA")]
    Fa,
    #[serde(rename = "CFP")]
    Cfp,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Fa => 1,
            Modality::Cfp => 3,
        }
    }

    pub fn from_channels(channels: usize) -> Option<Self> {
        match channels {
            1 => Some(Modality::Fa),
            3 => Some(Modality::Cfp),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetinalImage {
    width: usize,
    height: usize,
    modality: Modality,
    /// Interleaved, row-major.
    pixels: Vec<u8>,
}

impl RetinalImage {
    pub fn new(width: usize, height: usize, modality: Modality, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::UnsupportedImage(format!("empty image {width}×{height}")));
        }
        let expected = width * height * modality.channels();
        if pixels.len() != expected {
            return Err(Error::UnsupportedImage(format!(
                "{width}×{height} {modality:?} image needs {expected} bytes, got {}",
                pixels.len()
            )));
        }
        Ok(Self { width, height, modality, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.modality.channels()
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize, channel: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels() + channel]
    }

    /// Luma for color images (integer BT.601 weights, rounded), identity for gray.
    pub fn gray(&self, x: usize, y: usize) -> u8 {
        match self.modality {
            Modality::Fa => self.pixel(x, y, 0),
            Modality::Cfp => {
                let (r, g, b) = (
                    self.pixel(x, y, 0) as u32,
                    self.pixel(x, y, 1) as u32,
                    self.pixel(x, y, 2) as u32,
                );
                ((299 * r + 587 * g + 114 * b + 500) / 1000) as u8
            }
        }
    }

    /// Bilinear resample to `width × height` using pixel-center alignment.
    /// Returns planar `channels × height × width` values scaled to [0, 1].
    pub fn resized_planar(&self, width: usize, height: usize) -> Vec<f64> {
        let c = self.channels();
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = vec![0.0; c * width * height];
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                for ch in 0..c {
                    let p = |xx, yy| self.pixel(xx, yy, ch) as f64;
                    let top = p(x0, y0) * (1.0 - tx) + p(x1, y0) * tx;
                    let bottom = p(x0, y1) * (1.0 - tx) + p(x1, y1) * tx;
                    out[(ch * height + y) * width + x] = (top * (1.0 - ty) + bottom * ty) / 255.0;
                }
            }
        }
        out
    }

    /// Converts between gray and color: luma for color→gray, channel
    /// replication for gray→color.
    pub fn with_modality(self, modality: Modality) -> RetinalImage {
        if modality == self.modality {
            return self;
        }
        let mut pixels = Vec::with_capacity(self.width * self.height * modality.channels());
        for y in 0..self.height {
            for x in 0..self.width {
                match modality {
                    Modality::Fa => pixels.push(self.gray(x, y)),
                    Modality::Cfp => pixels.extend_from_slice(&[self.pixel(x, y, 0); 3]),
                }
            }
        }
        RetinalImage { width: self.width, height: self.height, modality, pixels }
    }

    /// Binary PGM (gray) or PPM (color).
    pub fn to_netpbm(&self) -> Vec<u8> {
        let magic = match self.modality {
            Modality::Fa => "P5",
            Modality::Cfp => "P6",
        };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        encode_png(self.width, self.height, self.channels(), &self.pixels)
    }

    /// Writes PGM/PPM or PNG depending on the file extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        let bytes = if is_png { self.to_png()? } else { self.to_netpbm() };
        write_atomic(path, &bytes)
    }
}

/// 8-bit PNG from interleaved gray (1) or RGB (3) samples.
pub fn encode_png(width: usize, height: usize, channels: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    let color = match channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        n => return Err(Error::UnsupportedImage(format!("cannot encode {n}-channel PNG"))),
    };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::UnsupportedImage(format!("png encode: {e}")))?;
        writer
            .write_image_data(pixels)
            .map_err(|e| Error::UnsupportedImage(format!("png encode: {e}")))?;
    }
    Ok(out)
}

pub fn load_image(path: &Path) -> Result<RetinalImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

pub fn decode_image(bytes: &[u8]) -> Result<RetinalImage> {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        decode_png(bytes)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode_netpbm(bytes)
    } else if bytes.len() < 2 {
        Err(Error::ImageDecode { offset: bytes.len(), detail: "file too short for a format signature".into() })
    } else {
        Err(Error::UnsupportedImage("unrecognised format (expected P5, P6 or PNG)".into()))
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            let detail = if self.pos >= self.bytes.len() {
                format!("header truncated while reading {what}")
            } else {
                format!("expected {what}, found byte 0x{:02x}", self.bytes[self.pos])
            };
            return Err(Error::ImageDecode { offset: self.pos, detail });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::ImageDecode { offset: start, detail: format!("{what} out of range") })
    }
}

fn decode_netpbm(bytes: &[u8]) -> Result<RetinalImage> {
    let modality = if bytes[1] == b'5' { Modality::Fa } else { Modality::Cfp };
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval = r.number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::UnsupportedImage(format!("maxval {maxval}: only 8-bit samples are supported")));
    }
    if r.pos >= bytes.len() || !bytes[r.pos].is_ascii_whitespace() {
        return Err(Error::ImageDecode { offset: r.pos, detail: "header truncated before raster".into() });
    }
    let start = r.pos + 1;
    let needed = width * height * modality.channels();
    if width == 0 || height == 0 {
        return Err(Error::UnsupportedImage(format!("empty image {width}×{height}")));
    }
    if bytes.len() < start + needed {
        return Err(Error::ImageDecode {
            offset: bytes.len(),
            detail: format!("raster truncated: need {needed} bytes from offset {start}"),
        });
    }
    RetinalImage::new(width, height, modality, bytes[start..start + needed].to_vec())
}

fn decode_png(bytes: &[u8]) -> Result<RetinalImage> {
    let map = |e: png::DecodingError| match e {
        png::DecodingError::IoError(io) => Error::ImageDecode { offset: bytes.len(), detail: format!("png: {io}") },
        other => Error::UnsupportedImage(format!("png: {other}")),
    };
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(map)?;
    let info = reader.info();
    let (width, height) = (info.width as usize, info.height as usize);
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedImage(format!("png bit depth {:?}: only 8-bit supported", info.bit_depth)));
    }
    if info.interlaced {
        return Err(Error::UnsupportedImage("interlaced png not supported".into()));
    }
    let modality = match info.color_type {
        png::ColorType::Grayscale => Modality::Fa,
        png::ColorType::Rgb => Modality::Cfp,
        other => return Err(Error::UnsupportedImage(format!("png color type {other:?} not supported"))),
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::UnsupportedImage("png too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(map)?;
    buf.truncate(frame.buffer_size());
    RetinalImage::new(width, height, modality, buf)
}
