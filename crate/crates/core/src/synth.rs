//! Synthetic phase objects drawn from seeded texture ensembles.
//!
//! Objects are sums of Gaussian features. The default ensembles are smooth
//! enough that their spectra decay inside every preset's synthetic
//! aperture; the granular one carries detail beyond the brightfield
//! (2 x NA) cutoff that only darkfield frames can resolve. A time
//! series moves and morphs one population of cells; every frame is a draw
//! from the same ensemble.

use crate::optics::ComplexField;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    /// Rounded cells with a nucleus and granules.
    Cells,
    /// Elongated fibres with a ridge profile.
    Fibres,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub family: Family,
    /// Mean number of features per 100 x 100 um^2.
    pub density: f64,
    /// Feature radius range in um.
    pub radius: (f64, f64),
    /// Peak phase in radians.
    pub phase_peak: f64,
    /// Amplitude loss per radian of phase.
    pub absorption: f64,
    /// Granule Gaussian width range in um.
    pub granule_sd: (f64, f64),
    /// Granule peak phase range, relative to the feature's peak.
    pub granule_height: (f64, f64),
    /// Granules per feature are drawn from `0..=max_granules`.
    pub max_granules: usize,
    /// Total phase is squashed as `L tanh(phase / L)` when finite, keeping
    /// overlapping features from wrapping.
    pub phase_limit: f64,
}

impl Ensemble {
    pub fn cells() -> Self {
        Self {
            family: Family::Cells,
            density: 55.0,
            radius: (2.5, 5.0),
            phase_peak: 1.2,
            absorption: 0.04,
            granule_sd: (0.6, 0.9),
            granule_height: (0.2, 0.45),
            max_granules: 3,
            phase_limit: f64::INFINITY,
        }
    }

    /// Flat cells packed with sub-micron granules: detail between the
    /// brightfield cutoff and the darkfield synthetic aperture.
    pub fn granular() -> Self {
        Self {
            phase_peak: 0.5,
            granule_sd: (0.18, 0.28),
            granule_height: (1.0, 2.0),
            max_granules: 120,
            phase_limit: 2.8,
            ..Self::cells()
        }
    }

    pub fn fibres() -> Self {
        Self {
            family: Family::Fibres,
            density: 30.0,
            radius: (1.2, 2.2),
            phase_peak: 1.6,
            absorption: 0.03,
            granule_sd: (0.6, 0.9),
            granule_height: (0.3, 0.6),
            max_granules: 1,
            phase_limit: f64::INFINITY,
        }
    }
}

#[derive(Clone, Debug)]
struct Feature {
    x: f64,
    y: f64,
    a: f64,
    b: f64,
    angle: f64,
    height: f64,
    vx: f64,
    vy: f64,
    growth: f64,
    spin: f64,
    details: Vec<(f64, f64, f64, f64)>,
}

fn population(ens: &Ensemble, extent_x: f64, extent_y: f64, rng: &mut ChaCha8Rng) -> Vec<Feature> {
    let expected = ens.density * extent_x * extent_y / 1e4;
    let count = (expected + rng.random_range(-0.5..0.5) * expected.sqrt())
        .round()
        .max(1.0) as usize;
    (0..count)
        .map(|_| {
            let r = rng.random_range(ens.radius.0..ens.radius.1);
            let (a, b) = match ens.family {
                Family::Cells => (r, r * rng.random_range(0.7..1.0)),
                Family::Fibres => (r * rng.random_range(3.5..5.5), r),
            };
            let n_details = match ens.family {
                Family::Cells => 1 + rng.random_range(0..ens.max_granules + 1),
                Family::Fibres => rng.random_range(0..ens.max_granules + 1),
            };
            let details = (0..n_details)
                .map(|k| {
                    // the first cell detail is a nucleus; the rest are granules
                    let (s, h) = match (ens.family, k) {
                        (Family::Cells, 0) => (0.45 * b, 0.5),
                        (_, _) => (
                            rng.random_range(ens.granule_sd.0..ens.granule_sd.1),
                            rng.random_range(ens.granule_height.0..ens.granule_height.1),
                        ),
                    };
                    let spread = if k == 0 { 0.25 } else { 0.6 };
                    (
                        rng.random_range(-spread..spread) * a,
                        rng.random_range(-spread..spread) * b,
                        s,
                        h,
                    )
                })
                .collect();
            Feature {
                x: rng.random_range(0.0..extent_x),
                y: rng.random_range(0.0..extent_y),
                a,
                b,
                angle: rng.random_range(0.0..PI),
                height: ens.phase_peak * rng.random_range(0.5..1.0),
                vx: rng.random_range(-0.6..0.6),
                vy: rng.random_range(-0.6..0.6),
                growth: rng.random_range(-0.04..0.04),
                spin: rng.random_range(-0.08..0.08),
                details,
            }
        })
        .collect()
}

fn render(
    features: &[Feature],
    ens: &Ensemble,
    t: f64,
    width: usize,
    height: usize,
    pixel: f64,
) -> ComplexField {
    let family = ens.family;
    let (ex, ey) = (width as f64 * pixel, height as f64 * pixel);
    let mut phase = vec![0.0; width * height];
    for f in features {
        let scale = (1.0 + f.growth * t).max(0.5);
        let (a, b) = (f.a * scale, f.b * scale);
        let angle = f.angle + f.spin * t;
        let (c, s) = (angle.cos(), angle.sin());
        // periodic wrap keeps the field seamless under the FFT model
        let cx = (f.x + f.vx * t).rem_euclid(ex);
        let cy = (f.y + f.vy * t).rem_euclid(ey);
        let reach = 3.0 * a.max(b);
        let (x_lo, x_hi) = (
            ((cx - reach) / pixel).floor() as isize,
            ((cx + reach) / pixel).ceil() as isize,
        );
        let (y_lo, y_hi) = (
            ((cy - reach) / pixel).floor() as isize,
            ((cy + reach) / pixel).ceil() as isize,
        );
        for py in y_lo..=y_hi {
            let yy = py.rem_euclid(height as isize) as usize;
            let dy = py as f64 * pixel - cy;
            for px in x_lo..=x_hi {
                let xx = px.rem_euclid(width as isize) as usize;
                let dx = px as f64 * pixel - cx;
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                let body = match family {
                    Family::Cells => (-(u * u / (a * a) + v * v / (b * b))).exp(),
                    Family::Fibres => (-(u * u / (a * a)).powi(2) - v * v / (b * b)).exp(),
                };
                let mut value = f.height * body;
                for &(ox, oy, sd, h) in &f.details {
                    let (gu, gv) = (u - ox * scale, v - oy * scale);
                    value += f.height * h * (-(gu * gu + gv * gv) / (2.0 * sd * sd)).exp();
                }
                phase[yy * width + xx] += value;
            }
        }
    }
    if ens.phase_limit.is_finite() {
        let l = ens.phase_limit;
        phase.iter_mut().for_each(|p| *p = l * (*p / l).tanh());
    }
    let values = phase
        .iter()
        .map(|&p| Complex64::from_polar((1.0 - ens.absorption * p).max(0.05), p))
        .collect();
    ComplexField::new(width, height, pixel, values).expect("rendered field is finite")
}

/// One object from the ensemble.
pub fn sample_object(
    ens: &Ensemble,
    width: usize,
    height: usize,
    pixel: f64,
    seed: u64,
) -> ComplexField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feats = population(ens, width as f64 * pixel, height as f64 * pixel, &mut rng);
    render(&feats, ens, 0.0, width, height, pixel)
}

/// Frame 0 plus `frames - 1` later states of the same population, one time
/// unit apart. Features drift, rotate and grow; frame 0 is the seed state.
pub fn time_series(
    ens: &Ensemble,
    frames: usize,
    width: usize,
    height: usize,
    pixel: f64,
    seed: u64,
) -> Vec<ComplexField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feats = population(ens, width as f64 * pixel, height as f64 * pixel, &mut rng);
    (0..frames)
        .map(|t| render(&feats, ens, 4.0 * t as f64, width, height, pixel))
        .collect()
}

/// Flat unit-amplitude, zero-phase object.
pub fn flat_object(width: usize, height: usize, pixel: f64) -> ComplexField {
    ComplexField::new(
        width,
        height,
        pixel,
        vec![Complex64::new(1.0, 0.0); width * height],
    )
    .expect("flat field")
}
