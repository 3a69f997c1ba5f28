//! Raster and volume-stack files.
//!
//! Volume stacks are a 32-byte little-endian header
//! (`"MDVO"`, version, slice count, height, width, dtype code, 8 reserved
//! bytes) followed by row-major `u16` slices, also little-endian.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::preprocess::{RasterImage16, RasterImage8};

pub const VOLUME_MAGIC: &[u8; 4] = b"MDVO";
pub const VOLUME_VERSION: u32 = 1;
pub const VOLUME_HEADER_LEN: usize = 32;
pub const DTYPE_U16: u32 = 1;

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::InvalidImage(format!("{}: {other}", path.display())),
    }
}

/// Reads a grayscale PGM or PNG. 8-bit samples are widened by `v * 257`,
/// which leaves min-max normalization unchanged.
pub fn read_gray16(path: &Path) -> Result<RasterImage16> {
    let img = image::ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = match img {
        DynamicImage::ImageLuma16(buf) => buf.into_raw(),
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| u16::from(v) * 257).collect(),
        other => {
            return Err(Error::InvalidImage(format!(
                "{}: expected single-channel grayscale, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    RasterImage16::new(h, w, pixels)
}

fn pnm_encoder<W: Write>(w: W) -> PnmEncoder<W> {
    PnmEncoder::new(w).with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
}

pub fn write_pgm8(path: &Path, img: &RasterImage8) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, img.pixels().to_vec())
            .ok_or_else(|| Error::InvalidImage("raster size overflow".into()))?;
    let file = BufWriter::new(fs::File::create(path)?);
    DynamicImage::ImageLuma8(buf)
        .write_with_encoder(pnm_encoder(file))
        .map_err(|e| image_err(path, e))
}

/// Binary PGM with maxval 65535; the PNM encoder only handles 8-bit gray.
pub fn write_pgm16(path: &Path, img: &RasterImage16) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write!(out, "P5\n{} {}\n65535\n", img.width(), img.height())?;
    for v in img.pixels() {
        out.write_all(&v.to_be_bytes())?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VolumeHeader {
    pub slices: u32,
    pub height: u32,
    pub width: u32,
    pub dtype: u32,
}

impl VolumeHeader {
    pub fn encode(&self) -> [u8; VOLUME_HEADER_LEN] {
        let mut out = [0u8; VOLUME_HEADER_LEN];
        out[..4].copy_from_slice(VOLUME_MAGIC);
        for (i, v) in [VOLUME_VERSION, self.slices, self.height, self.width, self.dtype]
            .into_iter()
            .enumerate()
        {
            out[4 + 4 * i..8 + 4 * i].copy_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < VOLUME_HEADER_LEN {
            return Err(Error::Format(format!("volume header needs {VOLUME_HEADER_LEN} bytes")));
        }
        if &bytes[..4] != VOLUME_MAGIC {
            return Err(Error::Format("bad volume magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        if word(0) != VOLUME_VERSION {
            return Err(Error::Format(format!("unsupported volume version {}", word(0))));
        }
        let header = Self {
            slices: word(1),
            height: word(2),
            width: word(3),
            dtype: word(4),
        };
        if header.dtype != DTYPE_U16 {
            return Err(Error::Format(format!("unsupported volume dtype {}", header.dtype)));
        }
        if header.slices == 0 || header.height == 0 || header.width == 0 {
            return Err(Error::Format("volume has a zero dimension".into()));
        }
        Ok(header)
    }

    pub fn payload_len(&self) -> Option<usize> {
        (self.slices as usize)
            .checked_mul(self.height as usize)?
            .checked_mul(self.width as usize)?
            .checked_mul(2)
    }
}

pub fn write_volume_stack(path: &Path, slices: &[RasterImage16]) -> Result<()> {
    let first = slices.first().ok_or(Error::EmptyInput)?;
    if slices
        .iter()
        .any(|s| s.height() != first.height() || s.width() != first.width())
    {
        return Err(Error::ShapeMismatch("volume slices differ in size".into()));
    }
    let header = VolumeHeader {
        slices: slices.len() as u32,
        height: first.height() as u32,
        width: first.width() as u32,
        dtype: DTYPE_U16,
    };
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(&header.encode())?;
    for s in slices {
        for v in s.pixels() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_volume_stack(path: &Path) -> Result<Vec<RasterImage16>> {
    let bytes = fs::read(path)?;
    let header = VolumeHeader::decode(&bytes)?;
    let expected = header
        .payload_len()
        .ok_or_else(|| Error::Format("volume dimensions overflow".into()))?;
    if bytes.len() - VOLUME_HEADER_LEN != expected {
        return Err(Error::Format(format!(
            "volume payload is {} bytes, header implies {expected}",
            bytes.len() - VOLUME_HEADER_LEN
        )));
    }
    let (h, w) = (header.height as usize, header.width as usize);
    bytes[VOLUME_HEADER_LEN..]
        .chunks_exact(h * w * 2)
        .map(|chunk| {
            let px = chunk
                .chunks_exact(2)
                .map(|b| u16::from_le_bytes([b[0], b[1]]))
                .collect();
            RasterImage16::new(h, w, px)
        })
        .collect()
}

fn is_slice_file(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("pgm" | "png")
    )
}

/// Slice files of a directory volume, in filename order.
pub fn slice_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_file() && is_slice_file(p))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads a stack file or a directory of per-slice images.
pub fn read_volume(path: &Path) -> Result<Vec<RasterImage16>> {
    if path.is_dir() {
        let files = slice_files(path)?;
        if files.is_empty() {
            return Err(Error::Format(format!("{} holds no slice images", path.display())));
        }
        files.iter().map(|f| read_gray16(f)).collect()
    } else {
        read_volume_stack(path)
    }
}

/// Slice count without reading pixel data.
pub fn probe_volume(path: &Path) -> Result<usize> {
    if path.is_dir() {
        return Ok(slice_files(path)?.len());
    }
    let mut header = [0u8; VOLUME_HEADER_LEN];
    use std::io::Read;
    fs::File::open(path)?.read_exact(&mut header)?;
    Ok(VolumeHeader::decode(&header)?.slices as usize)
}
