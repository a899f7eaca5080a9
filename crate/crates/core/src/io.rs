//! On-disk formats.
//!
//! * Images: 8-bit grayscale PNG, intensities scaled from `[0, 1]`.
//! * Label maps: 16-bit grayscale PNG of instance ids (0 = stuff).
//! * Float maps: a small little-endian container. The 16-byte header is
//!
//!   | bytes  | field                          |
//!   |--------|--------------------------------|
//!   | 0..4   | magic `b"CITF"`                |
//!   | 4..6   | dtype code, `u16` (1 = `f32`)  |
//!   | 6..10  | height `H`, `u32`              |
//!   | 10..14 | width `W`, `u32`               |
//!   | 14..16 | channels `C`, `u16`            |
//!
//!   followed by `H·W·C` row-major (`H`, then `W`, then `C`) `f32` values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use image::{ImageBuffer, Luma};
use ndarray::{Array2, Array3};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const FLOAT_MAP_MAGIC: [u8; 4] = *b"CITF";
pub const DTYPE_F32: u16 = 1;
pub const HEADER_LEN: usize = 16;

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

pub fn save_gray_png(path: &Path, image: &Array2<f32>) -> Result<()> {
    ensure_parent(path)?;
    let (h, w) = image.dim();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = image[[y as usize, x as usize]].clamp(0.0, 1.0);
        Luma([(v * 255.0).round() as u8])
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

pub fn load_gray_png(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        f32::from(img.get_pixel(x as u32, y as u32).0[0]) / 255.0
    }))
}

pub fn save_u16_png(path: &Path, values: &Array2<u32>) -> Result<()> {
    ensure_parent(path)?;
    if let Some(&big) = values.iter().find(|&&v| v > u32::from(u16::MAX)) {
        return Err(Error::format(path, format!("value {big} exceeds 16 bits")));
    }
    let (h, w) = values.dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            Luma([values[[y as usize, x as usize]] as u16])
        });
    buf.save(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

pub fn load_u16_png(path: &Path) -> Result<Array2<u32>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })?;
    let img = match img {
        image::DynamicImage::ImageLuma16(buf) => buf,
        other => other.into_luma16(),
    };
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        u32::from(img.get_pixel(x as u32, y as u32).0[0])
    }))
}

/// Serialize an `H × W × C` map into the float container.
pub fn encode_float_map(map: &Array3<f32>) -> Result<Vec<u8>> {
    let (h, w, c) = map.dim();
    let c16 = u16::try_from(c).map_err(|_| Error::shape(format!("{c} channels")))?;
    let h32 = u32::try_from(h).map_err(|_| Error::shape(format!("height {h}")))?;
    let w32 = u32::try_from(w).map_err(|_| Error::shape(format!("width {w}")))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * map.len());
    out.extend_from_slice(&FLOAT_MAP_MAGIC);
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&h32.to_le_bytes());
    out.extend_from_slice(&w32.to_le_bytes());
    out.extend_from_slice(&c16.to_le_bytes());
    for v in map.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parse one float container from the front of `bytes`; returns the map and
/// the number of bytes consumed.
pub fn decode_float_map(bytes: &[u8], path: &Path) -> Result<(Array3<f32>, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "truncated header"));
    }
    if bytes[0..4] != FLOAT_MAP_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let dtype = u16::from_le_bytes([bytes[4], bytes[5]]);
    if dtype != DTYPE_F32 {
        return Err(Error::format(path, format!("unsupported dtype code {dtype}")));
    }
    let h = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let c = u16::from_le_bytes([bytes[14], bytes[15]]) as usize;
    let n = h * w * c;
    let end = HEADER_LEN + 4 * n;
    if bytes.len() < end {
        return Err(Error::format(
            path,
            format!("expected {n} floats, file is too short"),
        ));
    }
    let data: Vec<f32> = bytes[HEADER_LEN..end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let map = Array3::from_shape_vec((h, w, c), data).expect("length checked");
    Ok((map, end))
}

pub fn write_float_map(path: &Path, map: &Array3<f32>) -> Result<()> {
    ensure_parent(path)?;
    let bytes = encode_float_map(map)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_float_map(path: &Path) -> Result<Array3<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let (map, used) = decode_float_map(&bytes, path)?;
    if used != bytes.len() {
        return Err(Error::format(path, "trailing bytes after float map"));
    }
    Ok(map)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })
}

/// Append-only JSON-lines writer.
pub struct JsonLines {
    file: fs::File,
    path: std::path::PathBuf,
}

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self> {
        ensure_parent(path)?;
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(JsonLines {
            file,
            path: path.into(),
        })
    }

    pub fn push<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|source| Error::Json {
            path: self.path.clone(),
            source,
        })?;
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
