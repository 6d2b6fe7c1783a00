//! Synthetic frames end to end: object, capture, preprocessing, label.

use crate::optics::{
    build_pattern, forward_capture, make_pupil, ComplexField, IlluminationPattern, IntensityStack,
    Label, Lattice, LedGrid, NoiseConfig, OpticsError, PatternDescriptor, Preset, PupilMask,
};
use crate::oracle::{fpm_reconstruct, phase_extract, OracleConfig, OracleError};
use crate::pipeline::{preprocess, Calibration, PipelineError};
use crate::raster::PhaseImage;
use crate::trainer::{Frame, TrainError};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error(transparent)]
    Optics(#[from] OpticsError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, SceneError>;

/// Where training labels come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LabelSource {
    /// Phase of the simulated object.
    Truth,
    /// Model-based reconstruction from a dense capture of the same object.
    Oracle {
        pattern: PatternDescriptor,
        config: OracleConfig,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// High-res object pixel (um).
    pub pixel: f64,
    pub r: usize,
    pub wavelength: f64,
    pub na_objective: f64,
    /// Network input illumination.
    pub pattern: PatternDescriptor,
    pub noise: NoiseConfig,
    pub label: LabelSource,
}

impl SceneConfig {
    pub fn desk(preset: Preset) -> Self {
        Self {
            pixel: 0.3,
            r: 4,
            wavelength: 0.514,
            na_objective: 0.2,
            pattern: PatternDescriptor::Preset {
                preset,
                grid: LedGrid::default(),
            },
            noise: NoiseConfig::disabled(),
            label: LabelSource::Truth,
        }
    }

    pub fn pupil(&self, low_w: usize, low_h: usize) -> Result<PupilMask> {
        let lattice = Lattice {
            width: low_w,
            height: low_h,
            pixel_size: self.pixel * self.r as f64,
        };
        Ok(make_pupil(self.na_objective, self.wavelength, lattice)?)
    }

    pub fn input_pattern(&self) -> Result<IlluminationPattern> {
        Ok(build_pattern(&self.pattern)?)
    }
}

/// Raw capture of `object` under the input pattern.
pub fn capture(
    cfg: &SceneConfig,
    object: &ComplexField,
    frame_seed: u64,
) -> Result<(IntensityStack, Vec<Label>)> {
    let pattern = cfg.input_pattern()?;
    let pupil = cfg.pupil(object.width() / cfg.r, object.height() / cfg.r)?;
    let noise = NoiseConfig {
        seed: cfg.noise.seed.wrapping_add(frame_seed),
        ..cfg.noise
    };
    let stack = forward_capture(object, &pattern, &pupil, cfg.r, &noise)?;
    let labels = pattern.leds.iter().map(|l| l.label).collect();
    Ok((stack, labels))
}

pub fn label_for(cfg: &SceneConfig, object: &ComplexField) -> Result<PhaseImage> {
    Ok(match &cfg.label {
        LabelSource::Truth => phase_extract(object, false),
        LabelSource::Oracle { pattern, config } => {
            let pattern = build_pattern(pattern)?;
            let pupil = cfg.pupil(object.width() / cfg.r, object.height() / cfg.r)?;
            let stack = forward_capture(object, &pattern, &pupil, cfg.r, &NoiseConfig::disabled())?;
            let rec = fpm_reconstruct(
                &stack,
                &pattern,
                &pupil,
                &OracleConfig {
                    r: cfg.r,
                    ..*config
                },
            )?;
            phase_extract(&rec.field, false)
        }
    })
}

/// Preprocessed network frame, labelled when `with_label`.
pub fn make_frame(
    cfg: &SceneConfig,
    id: usize,
    object: &ComplexField,
    with_label: bool,
) -> Result<Frame> {
    let (stack, labels) = capture(cfg, object, id as u64)?;
    let stack = preprocess(&stack, &labels, &Calibration::default())?;
    let label = if with_label {
        Some(label_for(cfg, object)?)
    } else {
        None
    };
    Ok(Frame::new(id, &stack, label, cfg.r)?)
}
