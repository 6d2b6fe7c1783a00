//! Model-based reconstruction used to produce ground-truth phase.
//!
//! Sequential spectrum replacement: for every LED (ascending NA) the current
//! high-resolution spectrum is cropped through the shifted pupil, the
//! low-resolution field's modulus is replaced by the measured amplitude, and
//! the change is written back with relaxation `step_size`.

use crate::fft::{bin_of, signed_index, Fft2};
use crate::optics::{
    check_geometry, crop_spectrum, fourier_overlap, led_shift, ComplexField, IlluminationPattern,
    IntensityStack, Lattice, OpticsError, PupilMask,
};
use crate::pipeline::bilinear_resize;
use crate::raster::PhaseImage;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error(transparent)]
    Geometry(#[from] OpticsError),
    #[error("invalid oracle config: {0}")]
    Config(String),
    #[error("non-finite value during reconstruction at iteration {0}")]
    NonFinite(usize),
}

pub type Result<T> = std::result::Result<T, OracleError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    /// Upsampled square root of the on-axis frame, zero phase.
    OnAxisAmplitude,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub r: usize,
    pub init: Init,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            step_size: 0.5,
            r: 4,
            init: Init::OnAxisAmplitude,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub field: ComplexField,
    /// Data residual after initialization, then after each sweep.
    pub residuals: Vec<f64>,
    /// Residual rose on three consecutive sweeps.
    pub diverging: bool,
    /// Pattern misses the neighbour-overlap requirement.
    pub overlap_warning: bool,
}

struct Problem<'a> {
    object: Lattice,
    pupil: &'a PupilMask,
    shifts: Vec<(isize, isize)>,
    amplitudes: Vec<Vec<f64>>,
    small: Fft2,
    scale: f64,
}

impl Problem<'_> {
    fn residual(&self, spectrum: &[Complex64]) -> f64 {
        let mut total = 0.0;
        for (shift, amp) in self.shifts.iter().zip(&self.amplitudes) {
            let mut sub = crop_spectrum(spectrum, &self.object, self.pupil, *shift, self.scale);
            self.small.inverse(&mut sub);
            total += sub
                .iter()
                .zip(amp)
                .map(|(c, a)| (c.norm() - a).powi(2))
                .sum::<f64>();
        }
        total
    }
}

/// Bins of the object grid reached by at least one shifted pupil.
pub fn synthetic_aperture(
    object: &Lattice,
    pupil: &PupilMask,
    shifts: &[(isize, isize)],
) -> Vec<bool> {
    let low = &pupil.lattice;
    let mut mask = vec![false; object.width * object.height];
    for &(sx, sy) in shifts {
        for v in 0..low.height {
            for u in 0..low.width {
                if !pupil.inside(v, u) {
                    continue;
                }
                let fy = signed_index(v, low.height) - sy;
                let fx = signed_index(u, low.width) - sx;
                if let (Some(bv), Some(bu)) = (bin_of(fy, object.height), bin_of(fx, object.width))
                {
                    mask[bv * object.width + bu] = true;
                }
            }
        }
    }
    mask
}

pub fn fpm_reconstruct(
    stack: &IntensityStack,
    pattern: &IlluminationPattern,
    pupil: &PupilMask,
    cfg: &OracleConfig,
) -> Result<Reconstruction> {
    if cfg.iterations == 0 || cfg.r == 0 {
        return Err(OracleError::Config("iterations and r must be >= 1".into()));
    }
    if !(cfg.step_size > 0.0 && cfg.step_size <= 1.0) {
        return Err(OracleError::Config(format!(
            "step size {} outside (0, 1]",
            cfg.step_size
        )));
    }
    if stack.alpha != pattern.alpha() {
        return Err(OpticsError::Geometry(format!(
            "stack has {} frames, pattern {} LEDs",
            stack.alpha,
            pattern.alpha()
        ))
        .into());
    }
    let r = cfg.r;
    let object = Lattice {
        width: stack.width * r,
        height: stack.height * r,
        pixel_size: pupil.lattice.pixel_size / r as f64,
    };
    check_geometry(&object, pupil, r)?;
    if stack.width != pupil.lattice.width || stack.height != pupil.lattice.height {
        return Err(OpticsError::Geometry("stack and pupil grids differ".into()).into());
    }

    let overlap_warning =
        pattern.alpha() >= 2 && !fourier_overlap(pattern, pupil.support_radius).compatible();
    if overlap_warning {
        log::warn!("illumination pattern is below the Fourier-overlap threshold");
    }

    let order = pattern.ascending_na();
    let problem = Problem {
        object,
        pupil,
        shifts: order
            .iter()
            .map(|&i| led_shift(&pattern.leds[i], &object))
            .collect(),
        amplitudes: order
            .iter()
            .map(|&i| stack.frame(i).iter().map(|v| v.max(0.0).sqrt()).collect())
            .collect(),
        small: Fft2::new(stack.height, stack.width),
        scale: 1.0 / r as f64,
    };

    let Init::OnAxisAmplitude = cfg.init;
    let on_axis = stack.frame(pattern.on_axis_index());
    let amp_low: Vec<f64> = on_axis.iter().map(|v| v.max(0.0).sqrt()).collect();
    let amp = bilinear_resize(
        &amp_low,
        stack.width,
        stack.height,
        1,
        object.width,
        object.height,
    );
    let mut spectrum: Vec<Complex64> = amp.iter().map(|&a| Complex64::new(a, 0.0)).collect();
    let big = Fft2::new(object.height, object.width);
    big.forward(&mut spectrum);
    let aperture = synthetic_aperture(&object, pupil, &problem.shifts);
    for (s, inside) in spectrum.iter_mut().zip(&aperture) {
        if !inside {
            *s = Complex64::new(0.0, 0.0);
        }
    }

    let low = pupil.lattice;
    let mut residuals = vec![problem.residual(&spectrum)];
    let mut rising = 0;
    let mut diverging = false;
    for it in 0..cfg.iterations {
        for (shift, meas) in problem.shifts.iter().zip(&problem.amplitudes) {
            let sub = crop_spectrum(&spectrum, &object, pupil, *shift, problem.scale);
            let mut field = sub.clone();
            problem.small.inverse(&mut field);
            for (f, a) in field.iter_mut().zip(meas) {
                let n = f.norm();
                *f = if n > 0.0 {
                    *f * (a / n)
                } else {
                    Complex64::new(*a, 0.0)
                };
            }
            problem.small.forward(&mut field);
            for v in 0..low.height {
                for u in 0..low.width {
                    let p = pupil.values[v * low.width + u];
                    if p == Complex64::new(0.0, 0.0) {
                        continue;
                    }
                    let fy = signed_index(v, low.height) - shift.1;
                    let fx = signed_index(u, low.width) - shift.0;
                    if let (Some(bv), Some(bu)) =
                        (bin_of(fy, object.height), bin_of(fx, object.width))
                    {
                        let k = v * low.width + u;
                        let delta = (field[k] - sub[k]) * p.conj() / p.norm_sqr();
                        spectrum[bv * object.width + bu] += delta * (cfg.step_size * r as f64);
                    }
                }
            }
        }
        let res = problem.residual(&spectrum);
        if !res.is_finite() {
            return Err(OracleError::NonFinite(it));
        }
        if res > *residuals.last().unwrap() {
            rising += 1;
            if rising >= 3 && !diverging {
                diverging = true;
                log::warn!("reconstruction residual rose on three consecutive sweeps");
            }
        } else {
            rising = 0;
        }
        residuals.push(res);
    }

    big.inverse(&mut spectrum);
    let field = ComplexField::new(object.width, object.height, object.pixel_size, spectrum)?;
    Ok(Reconstruction {
        field,
        residuals,
        diverging,
        overlap_warning,
    })
}

fn wrap(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y <= -PI {
        y + 2.0 * PI
    } else {
        y
    }
}

/// Most frequent phase value on the circle: histogram peak refined by a
/// circular mean shift.
pub fn modal_phase(phase: &[f64]) -> f64 {
    const BINS: usize = 64;
    let width = 2.0 * PI / BINS as f64;
    let mut hist = [0usize; BINS];
    for &p in phase {
        hist[(((p + PI) / width) as usize).min(BINS - 1)] += 1;
    }
    let peak = (0..BINS)
        .max_by_key(|&b| (hist[b], std::cmp::Reverse(b)))
        .unwrap_or(0);
    let mut centre = -PI + (peak as f64 + 0.5) * width;
    let window = 1.5 * width;
    for _ in 0..50 {
        let acc: Complex64 = phase
            .iter()
            .filter(|&&p| wrap(p - centre).abs() <= window)
            .map(|&p| Complex64::from_polar(1.0, p))
            .sum();
        if acc.norm() == 0.0 {
            break;
        }
        let next = acc.arg();
        let moved = wrap(next - centre).abs();
        centre = next;
        if moved < 1e-14 {
            break;
        }
    }
    centre
}

/// Row-then-column path unwrapping anchored at pixel (0, 0).
pub fn unwrap_2d(width: usize, height: usize, wrapped: &[f64]) -> Vec<f64> {
    let mut out = wrapped.to_vec();
    for y in 1..height {
        let prev = out[(y - 1) * width];
        out[y * width] = prev + wrap(wrapped[y * width] - prev);
    }
    for y in 0..height {
        for x in 1..width {
            let prev = out[y * width + x - 1];
            out[y * width + x] = prev + wrap(wrapped[y * width + x] - prev);
        }
    }
    out
}

/// Phase map with the modal background offset removed.
pub fn phase_extract(field: &ComplexField, unwrap: bool) -> PhaseImage {
    let offset = modal_phase(&field.phase());
    let rot = Complex64::from_polar(1.0, -offset);
    let mut phase: Vec<f64> = field
        .values()
        .iter()
        .map(|v| wrap((v * rot).arg()))
        .collect();
    if unwrap {
        phase = unwrap_2d(field.width(), field.height(), &phase);
    }
    PhaseImage {
        width: field.width(),
        height: field.height(),
        values: phase,
    }
}

/// Pearson correlation of two equally sized maps.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(w: usize, h: usize, f: impl Fn(usize, usize) -> Complex64) -> ComplexField {
        let values = (0..w * h).map(|i| f(i % w, i / w)).collect();
        ComplexField::new(w, h, 0.3, values).unwrap()
    }

    #[test]
    fn global_offset_is_removed() {
        let f = field(8, 8, |_, _| Complex64::from_polar(1.0, 0.3));
        assert!(phase_extract(&f, false)
            .values
            .iter()
            .all(|v| v.abs() < 1e-12));
        let g = field(8, 8, |x, y| Complex64::new(0.5 + (x * y) as f64, 0.0));
        assert!(phase_extract(&g, false)
            .values
            .iter()
            .all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn ramp_unwraps_continuously() {
        let f = field(40, 6, |x, _| Complex64::from_polar(1.0, 0.3 * x as f64));
        let p = phase_extract(&f, true);
        for y in 0..6 {
            for x in 1..40 {
                assert!((p.at(y, x) - p.at(y, x - 1)).abs() < PI);
            }
        }
        let span = p.at(0, 39) - p.at(0, 0);
        assert!((span - 0.3 * 39.0).abs() < 1e-9);
    }

    #[test]
    fn offset_removal_is_gauge_invariant() {
        let f = field(32, 32, |x, y| {
            let bump = if (x as f64 - 16.0).hypot(y as f64 - 16.0) < 6.0 {
                1.1
            } else {
                0.0
            };
            Complex64::from_polar(1.0, bump + 0.02 * ((x * 7 + y * 3) % 5) as f64)
        });
        let base = phase_extract(&f, false);
        for theta in [0.4, 2.9, -3.0, PI] {
            let rotated = phase_extract(&f.rotated(theta), false);
            for (a, b) in base.values.iter().zip(&rotated.values) {
                assert!((a - b).abs() < 1e-9, "theta {theta}: {a} vs {b}");
            }
        }
    }
}
