//! On-disk intensity stacks: one 16-bit grayscale PNG per LED plus a JSON
//! manifest carrying the illumination and the intensity scale.

use crate::optics::{IlluminationPattern, IntensityStack, Led};
use crate::raster::{load_gray16, save_gray16, RasterError};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum StackIoError {
    #[error("stack manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StackIoError>;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackManifest {
    pub version: u32,
    pub width: usize,
    pub height: usize,
    /// Camera pixel (um).
    pub pixel_um: f64,
    /// Upsampling factor of the matching high-res object.
    pub r: usize,
    /// Stored counts are `round(intensity * scale)`.
    pub scale: f64,
    pub wavelength: f64,
    pub na_objective: f64,
    pub leds: Vec<Led>,
    pub files: Vec<String>,
}

impl StackManifest {
    pub fn pattern(&self) -> IlluminationPattern {
        IlluminationPattern {
            leds: self.leds.clone(),
            wavelength: self.wavelength,
            na_objective: self.na_objective,
        }
    }
}

pub fn frame_file_name(i: usize) -> String {
    format!("frame_{i:03}.png")
}

/// Largest scale that keeps the brightest sample inside 16 bits.
pub fn full_range_scale(stack: &IntensityStack) -> f64 {
    let max = stack.frames.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        65535.0 / max
    } else {
        1.0
    }
}

pub fn save_stack(
    dir: &Path,
    stack: &IntensityStack,
    pattern: &IlluminationPattern,
    pixel_um: f64,
    r: usize,
) -> Result<StackManifest> {
    if pattern.alpha() != stack.alpha {
        return Err(StackIoError::Manifest {
            path: dir.to_path_buf(),
            reason: format!("{} LEDs for {} frames", pattern.alpha(), stack.alpha),
        });
    }
    std::fs::create_dir_all(dir)?;
    let scale = full_range_scale(stack);
    let mut files = Vec::with_capacity(stack.alpha);
    for i in 0..stack.alpha {
        let name = frame_file_name(i);
        save_gray16(
            &dir.join(&name),
            stack.width,
            stack.height,
            stack.frame(i),
            scale,
        )?;
        files.push(name);
    }
    let manifest = StackManifest {
        version: FORMAT_VERSION,
        width: stack.width,
        height: stack.height,
        pixel_um,
        r,
        scale,
        wavelength: pattern.wavelength,
        na_objective: pattern.na_objective,
        leds: pattern.leds.clone(),
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(dir.join(MANIFEST_NAME), text)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<StackManifest> {
    let path = dir.join(MANIFEST_NAME);
    let bad = |reason: String| StackIoError::Manifest {
        path: path.clone(),
        reason,
    };
    let text = std::fs::read_to_string(&path).map_err(|e| bad(e.to_string()))?;
    let m: StackManifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if m.version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {}", m.version)));
    }
    if m.files.len() != m.leds.len() || m.files.is_empty() {
        return Err(bad(format!(
            "{} files for {} LEDs",
            m.files.len(),
            m.leds.len()
        )));
    }
    if !(m.scale > 0.0 && m.scale.is_finite()) || m.r == 0 {
        return Err(bad("scale and r must be positive".into()));
    }
    Ok(m)
}

pub fn load_stack(dir: &Path) -> Result<(IntensityStack, StackManifest)> {
    let m = load_manifest(dir)?;
    let mut frames = Vec::with_capacity(m.width * m.height * m.files.len());
    for name in &m.files {
        let (w, h, values) = load_gray16(&dir.join(name), m.scale)?;
        if (w, h) != (m.width, m.height) {
            return Err(StackIoError::Manifest {
                path: dir.join(name),
                reason: format!("{w}x{h} image in a {}x{} stack", m.width, m.height),
            });
        }
        frames.extend(values);
    }
    let stack = IntensityStack::new(m.width, m.height, m.files.len(), frames).map_err(|e| {
        StackIoError::Manifest {
            path: dir.to_path_buf(),
            reason: e.to_string(),
        }
    })?;
    Ok((stack, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::{build_pattern, LedGrid, PatternDescriptor, Preset};

    #[test]
    fn round_trip_is_within_one_count() {
        let pattern = build_pattern(&PatternDescriptor::Preset {
            preset: Preset::P1,
            grid: LedGrid::default(),
        })
        .unwrap();
        let (w, h, a) = (5, 4, pattern.alpha());
        let frames: Vec<f64> = (0..w * h * a)
            .map(|i| 0.5 + (i as f64 * 0.37).sin().abs())
            .collect();
        let stack = IntensityStack::new(w, h, a, frames).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = save_stack(dir.path(), &stack, &pattern, 1.2, 4).unwrap();
        let (back, m2) = load_stack(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(m2.pattern(), pattern);
        for (x, y) in stack.frames.iter().zip(&back.frames) {
            assert!((x - y).abs() <= 0.5 / m.scale + 1e-15);
        }
    }

    #[test]
    fn missing_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_stack(dir.path()),
            Err(StackIoError::Manifest { .. })
        ));
    }
}
