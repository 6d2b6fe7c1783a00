//! Real-valued images: phase maps and their on-disk formats.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("{0}")]
    Shape(String),
    #[error("not a phase raster: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, RasterError>;

/// Row-major real image, values in radians for phase maps.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl PhaseImage {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(RasterError::Shape(format!(
                "{} values for {width}x{height}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RasterError::Shape("non-finite phase value".into()));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Copy of the `w x h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(RasterError::Shape(format!(
                "window {w}x{h}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut values = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            values.extend_from_slice(&self.values[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(Self {
            width: w,
            height: h,
            values,
        })
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }

    pub fn range(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

const MAGIC: &[u8; 8] = b"FPMPHS\0\x01";

/// Float32 raster: magic (8 bytes, last byte = version), width, height, r as
/// little-endian u32, then `width * height` little-endian f32 values.
pub fn write_phase<W: Write>(mut out: W, image: &PhaseImage, r: u32) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(image.width as u32)?;
    out.write_u32::<LittleEndian>(image.height as u32)?;
    out.write_u32::<LittleEndian>(r)?;
    for &v in &image.values {
        out.write_f32::<LittleEndian>(v as f32)?;
    }
    Ok(())
}

/// Returns the image and its stored resolution factor.
pub fn read_phase<R: Read>(mut input: R) -> Result<(PhaseImage, u32)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(RasterError::Format("bad magic or version".into()));
    }
    let width = input.read_u32::<LittleEndian>()? as usize;
    let height = input.read_u32::<LittleEndian>()? as usize;
    let r = input.read_u32::<LittleEndian>()?;
    let mut values = vec![0.0; width * height];
    for v in values.iter_mut() {
        *v = input.read_f32::<LittleEndian>()? as f64;
    }
    Ok((PhaseImage::new(width, height, values)?, r))
}

pub fn save_phase(path: &Path, image: &PhaseImage, r: u32) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_phase(file, image, r)
}

pub fn load_phase(path: &Path) -> Result<(PhaseImage, u32)> {
    read_phase(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// 8-bit grayscale preview, linearly mapped from the image's own range.
pub fn save_preview(path: &Path, image: &PhaseImage) -> Result<()> {
    let (lo, hi) = image.range();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let bytes: Vec<u8> = image
        .values
        .iter()
        .map(|v| (((v - lo) / span) * 255.0).round() as u8)
        .collect();
    image::save_buffer(
        path,
        &bytes,
        image.width as u32,
        image.height as u32,
        image::ColorType::L8,
    )?;
    Ok(())
}

/// 16-bit grayscale PNG with `value * scale` rounded and saturated.
pub fn save_gray16(
    path: &Path,
    width: usize,
    height: usize,
    values: &[f64],
    scale: f64,
) -> Result<()> {
    let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> = image::ImageBuffer::from_raw(
        width as u32,
        height as u32,
        values
            .iter()
            .map(|v| (v * scale).round().clamp(0.0, 65535.0) as u16)
            .collect(),
    )
    .ok_or_else(|| RasterError::Shape("buffer size".into()))?;
    buf.save(path)?;
    Ok(())
}

/// Inverse of [`save_gray16`]: `(width, height, values / scale)`.
pub fn load_gray16(path: &Path, scale: f64) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    Ok((
        w as usize,
        h as usize,
        img.into_raw()
            .into_iter()
            .map(|v| v as f64 / scale)
            .collect(),
    ))
}
