//! Angled plane-wave illumination, coherent pupil low-pass and intensity capture.
//!
//! Spatial frequencies are in cycles/um, lengths in um unless a name says
//! otherwise. A low-resolution frame for LED `i` is
//! `|ifft( (1/r) * O(k - k_i) * P(k) )|^2` where `O` is the unitary spectrum of
//! the high-resolution object cropped to the camera band. The `1/r` factor
//! makes a flat unit object produce intensity exactly 1.

use crate::fft::{bin_of, signed_index, Fft2};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, thiserror::Error)]
pub enum OpticsError {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("pupil sampling: {0}")]
    Sampling(String),
    #[error("invalid field: {0}")]
    Field(String),
}

pub type Result<T> = std::result::Result<T, OpticsError>;

/// Complex object or field on a square-pixel grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexField {
    width: usize,
    height: usize,
    pixel_size: f64,
    values: Vec<Complex64>,
}

impl ComplexField {
    pub fn new(
        width: usize,
        height: usize,
        pixel_size: f64,
        values: Vec<Complex64>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(OpticsError::Field("empty grid".into()));
        }
        if values.len() != width * height {
            return Err(OpticsError::Field(format!(
                "{} values for a {width}x{height} grid",
                values.len()
            )));
        }
        if !(pixel_size > 0.0 && pixel_size.is_finite()) {
            return Err(OpticsError::Field(format!("pixel size {pixel_size}")));
        }
        if values
            .iter()
            .any(|v| !v.re.is_finite() || !v.im.is_finite())
        {
            return Err(OpticsError::Field("non-finite sample".into()));
        }
        Ok(Self {
            width,
            height,
            pixel_size,
            values,
        })
    }

    pub fn from_amplitude_phase(
        width: usize,
        height: usize,
        pixel_size: f64,
        amplitude: &[f64],
        phase: &[f64],
    ) -> Result<Self> {
        if amplitude.len() != phase.len() {
            return Err(OpticsError::Field(
                "amplitude and phase lengths differ".into(),
            ));
        }
        if amplitude.iter().any(|a| *a < 0.0) {
            return Err(OpticsError::Field("negative amplitude".into()));
        }
        let values = amplitude
            .iter()
            .zip(phase)
            .map(|(&a, &p)| Complex64::from_polar(a, p))
            .collect();
        Self::new(width, height, pixel_size, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn amplitude(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.norm()).collect()
    }

    /// Wrapped argument in `(-pi, pi]`.
    pub fn phase(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|v| {
                let a = v.arg();
                if a <= -PI {
                    a + 2.0 * PI
                } else {
                    a
                }
            })
            .collect()
    }

    /// Multiplies every sample by `exp(i theta)`.
    pub fn rotated(&self, theta: f64) -> Self {
        let w = Complex64::from_polar(1.0, theta);
        Self {
            values: self.values.iter().map(|v| v * w).collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    BF,
    DF,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Led {
    pub kx: f64,
    pub ky: f64,
    pub na_ill: f64,
    pub label: Label,
}

/// Ordered LED set: brightfield first, then darkfield by increasing `na_ill`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IlluminationPattern {
    pub leds: Vec<Led>,
    pub wavelength: f64,
    pub na_objective: f64,
}

impl IlluminationPattern {
    pub fn alpha(&self) -> usize {
        self.leds.len()
    }

    pub fn bf_count(&self) -> usize {
        self.leds.iter().filter(|l| l.label == Label::BF).count()
    }

    pub fn df_count(&self) -> usize {
        self.alpha() - self.bf_count()
    }

    pub fn max_na(&self) -> f64 {
        self.leds.iter().map(|l| l.na_ill).fold(0.0, f64::max)
    }

    /// Index of the LED closest to the optical axis.
    pub fn on_axis_index(&self) -> usize {
        (0..self.leds.len())
            .min_by(|&a, &b| self.leds[a].na_ill.total_cmp(&self.leds[b].na_ill))
            .unwrap_or(0)
    }

    /// LED indices in ascending illumination NA (ties keep pattern order).
    pub fn ascending_na(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.leds.len()).collect();
        idx.sort_by(|&a, &b| self.leds[a].na_ill.total_cmp(&self.leds[b].na_ill));
        idx
    }
}

/// Planar square LED array above the sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedGrid {
    pub pitch_mm: f64,
    /// LEDs per side; the array is centred on the optical axis.
    pub count: usize,
    pub height_mm: f64,
    pub wavelength: f64,
    pub na_objective: f64,
}

impl Default for LedGrid {
    fn default() -> Self {
        Self {
            pitch_mm: 4.0,
            count: 32,
            height_mm: 67.5,
            wavelength: 0.514,
            na_objective: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    P1,
    P2,
    P3,
    P4,
}

impl Preset {
    /// (brightfield count, darkfield count, maximum illumination NA).
    pub fn composition(self) -> (usize, usize, f64) {
        match self {
            Preset::P1 => (13, 0, 0.2),
            Preset::P2 => (13, 36, 0.6),
            Preset::P3 => (13, 10, 0.25),
            Preset::P4 => (9, 20, 0.4),
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name.to_ascii_uppercase().as_str() {
            "P1" => Some(Preset::P1),
            "P2" => Some(Preset::P2),
            "P3" => Some(Preset::P3),
            "P4" => Some(Preset::P4),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PatternDescriptor {
    /// One of the four named subsets of the grid.
    Preset { preset: Preset, grid: LedGrid },
    /// Every grid LED with `na_ill <= max_na`.
    Full { max_na: f64, grid: LedGrid },
    /// The whole square grid.
    Grid(LedGrid),
    /// Explicit k-vectors in cycles/um.
    Explicit {
        k: Vec<(f64, f64)>,
        wavelength: f64,
        na_objective: f64,
    },
}

fn make_led(kx: f64, ky: f64, wavelength: f64, na_objective: f64) -> Led {
    let na_ill = wavelength * (kx * kx + ky * ky).sqrt();
    // small slack so grid points computed through trigonometry stay brightfield
    let label = if na_ill <= na_objective + 1e-12 {
        Label::BF
    } else {
        Label::DF
    };
    Led {
        kx,
        ky,
        na_ill,
        label,
    }
}

fn grid_leds(grid: &LedGrid) -> Vec<Led> {
    let n = grid.count as isize;
    let mut leds = Vec::with_capacity(grid.count * grid.count);
    for j in 0..n {
        for i in 0..n {
            let x = (i as f64 - (n - 1) as f64 / 2.0) * grid.pitch_mm;
            let y = (j as f64 - (n - 1) as f64 / 2.0) * grid.pitch_mm;
            let dist = (x * x + y * y + grid.height_mm * grid.height_mm).sqrt();
            let (sx, sy) = (x / dist, y / dist);
            leds.push(make_led(
                sx / grid.wavelength,
                sy / grid.wavelength,
                grid.wavelength,
                grid.na_objective,
            ));
        }
    }
    leds
}

/// Odd-sized view of the grid used by the presets, so the axis hosts an LED.
fn centred_grid(grid: &LedGrid) -> LedGrid {
    let count = if grid.count.is_multiple_of(2) {
        grid.count + 1
    } else {
        grid.count
    };
    LedGrid { count, ..*grid }
}

fn by_na_then_angle(a: &Led, b: &Led) -> std::cmp::Ordering {
    a.na_ill
        .total_cmp(&b.na_ill)
        .then(a.ky.atan2(a.kx).total_cmp(&b.ky.atan2(b.kx)))
}

/// Greedy farthest-point subset in k-space, seeded at the largest-NA candidate.
fn farthest_point(candidates: &[Led], count: usize) -> Vec<Led> {
    if count == 0 || candidates.is_empty() {
        return Vec::new();
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_by(by_na_then_angle);
    let mut chosen = vec![sorted.len() - 1];
    let mut dist: Vec<f64> = vec![f64::INFINITY; sorted.len()];
    while chosen.len() < count.min(sorted.len()) {
        let last = sorted[*chosen.last().unwrap()];
        for (d, c) in dist.iter_mut().zip(&sorted) {
            *d = d.min((c.kx - last.kx).hypot(c.ky - last.ky));
        }
        for &c in &chosen {
            dist[c] = -1.0;
        }
        // first maximum in sorted order keeps ties deterministic
        let mut best = 0;
        for i in 1..sorted.len() {
            if dist[i] > dist[best] + 1e-12 {
                best = i;
            }
        }
        chosen.push(best);
    }
    chosen.into_iter().map(|i| sorted[i]).collect()
}

fn finish(mut leds: Vec<Led>, wavelength: f64, na_objective: f64) -> Result<IlluminationPattern> {
    if leds.is_empty() {
        return Err(OpticsError::Geometry("pattern has no LEDs".into()));
    }
    if let Some(bad) = leds
        .iter()
        .find(|l| l.na_ill > 1.0 || !l.na_ill.is_finite())
    {
        return Err(OpticsError::Geometry(format!(
            "illumination NA {} exceeds 1",
            bad.na_ill
        )));
    }
    leds.sort_by(|a, b| {
        (a.label == Label::DF)
            .cmp(&(b.label == Label::DF))
            .then(by_na_then_angle(a, b))
    });
    Ok(IlluminationPattern {
        leds,
        wavelength,
        na_objective,
    })
}

pub fn build_pattern(desc: &PatternDescriptor) -> Result<IlluminationPattern> {
    match desc {
        PatternDescriptor::Grid(grid) => {
            finish(grid_leds(grid), grid.wavelength, grid.na_objective)
        }
        PatternDescriptor::Full { max_na, grid } => {
            let leds = grid_leds(&centred_grid(grid))
                .into_iter()
                .filter(|l| l.na_ill <= max_na + 1e-12)
                .collect();
            finish(leds, grid.wavelength, grid.na_objective)
        }
        PatternDescriptor::Explicit {
            k,
            wavelength,
            na_objective,
        } => {
            let leds = k
                .iter()
                .map(|&(kx, ky)| make_led(kx, ky, *wavelength, *na_objective))
                .collect();
            finish(leds, *wavelength, *na_objective)
        }
        PatternDescriptor::Preset { preset, grid } => {
            let (n_bf, n_df, max_na) = preset.composition();
            let all = grid_leds(&centred_grid(grid));
            let mut bf: Vec<Led> = all
                .iter()
                .copied()
                .filter(|l| l.label == Label::BF)
                .collect();
            bf.sort_by(by_na_then_angle);
            if bf.len() < n_bf {
                return Err(OpticsError::Geometry(format!(
                    "grid offers {} brightfield LEDs, {preset:?} needs {n_bf}",
                    bf.len()
                )));
            }
            bf.truncate(n_bf);
            let df_pool: Vec<Led> = all
                .into_iter()
                .filter(|l| l.label == Label::DF && l.na_ill <= max_na + 1e-12)
                .collect();
            if df_pool.len() < n_df {
                return Err(OpticsError::Geometry(format!(
                    "grid offers {} darkfield LEDs within NA {max_na}, {preset:?} needs {n_df}",
                    df_pool.len()
                )));
            }
            bf.extend(farthest_point(&df_pool, n_df));
            finish(bf, grid.wavelength, grid.na_objective)
        }
    }
}

/// Regular sampling of a `height x width` real-space grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub width: usize,
    pub height: usize,
    pub pixel_size: f64,
}

impl Lattice {
    pub fn dkx(&self) -> f64 {
        1.0 / (self.width as f64 * self.pixel_size)
    }

    pub fn dky(&self) -> f64 {
        1.0 / (self.height as f64 * self.pixel_size)
    }

    pub fn nyquist(&self) -> f64 {
        0.5 / self.pixel_size
    }

    /// Physical frequency of bin `(v, u)` in standard FFT order.
    pub fn frequency(&self, v: usize, u: usize) -> (f64, f64) {
        (
            signed_index(u, self.width) as f64 * self.dkx(),
            signed_index(v, self.height) as f64 * self.dky(),
        )
    }
}

/// Coherent transfer function sampled on a low-resolution frequency grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PupilMask {
    pub lattice: Lattice,
    pub support_radius: f64,
    pub values: Vec<Complex64>,
}

impl PupilMask {
    /// Applies the mask to a spectrum on the same grid.
    pub fn apply(&self, spectrum: &mut [Complex64]) {
        for (s, p) in spectrum.iter_mut().zip(&self.values) {
            *s *= p;
        }
    }

    pub fn inside(&self, v: usize, u: usize) -> bool {
        self.values[v * self.lattice.width + u] != Complex64::new(0.0, 0.0)
    }
}

/// Ideal circular pupil of radius `na/wavelength`, with an optional apodization.
pub fn make_pupil(na_objective: f64, wavelength: f64, lattice: Lattice) -> Result<PupilMask> {
    make_pupil_with(na_objective, wavelength, lattice, |_, _| {
        Complex64::new(1.0, 0.0)
    })
}

pub fn make_pupil_with(
    na_objective: f64,
    wavelength: f64,
    lattice: Lattice,
    apodize: impl Fn(f64, f64) -> Complex64,
) -> Result<PupilMask> {
    if !(na_objective > 0.0 && na_objective < 1.0) {
        return Err(OpticsError::Geometry(format!(
            "objective NA {na_objective} outside (0, 1)"
        )));
    }
    if lattice.width == 0 || lattice.height == 0 || lattice.pixel_size <= 0.0 {
        return Err(OpticsError::Geometry("degenerate pupil lattice".into()));
    }
    let radius = na_objective / wavelength;
    if radius >= lattice.nyquist() {
        return Err(OpticsError::Sampling(format!(
            "pupil radius {radius:.4} cycles/um reaches the grid Nyquist {:.4}",
            lattice.nyquist()
        )));
    }
    let mut values = vec![Complex64::new(0.0, 0.0); lattice.width * lattice.height];
    for v in 0..lattice.height {
        for u in 0..lattice.width {
            let (fx, fy) = lattice.frequency(v, u);
            if fx.hypot(fy) <= radius {
                let a = apodize(fx, fy);
                values[v * lattice.width + u] = if a.norm() > 1.0 { a / a.norm() } else { a };
            }
        }
    }
    Ok(PupilMask {
        lattice,
        support_radius: radius,
        values,
    })
}

/// Low-resolution intensity frames, frame-major: `frames[i * h * w + y * w + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityStack {
    pub width: usize,
    pub height: usize,
    pub alpha: usize,
    pub frames: Vec<f64>,
    pub bit_depth: u32,
}

impl IntensityStack {
    pub fn new(width: usize, height: usize, alpha: usize, frames: Vec<f64>) -> Result<Self> {
        if frames.len() != width * height * alpha {
            return Err(OpticsError::Geometry(format!(
                "{} samples for {alpha} frames of {width}x{height}",
                frames.len()
            )));
        }
        Ok(Self {
            width,
            height,
            alpha,
            frames,
            bit_depth: 16,
        })
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.frames[i * n..(i + 1) * n]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.width * self.height;
        &mut self.frames[i * n..(i + 1) * n]
    }

    /// Channel-last copy (`[y][x][frame]`), the layout the networks consume.
    pub fn to_hwc(&self) -> Vec<f64> {
        let n = self.width * self.height;
        let mut out = vec![0.0; n * self.alpha];
        for a in 0..self.alpha {
            for p in 0..n {
                out[p * self.alpha + a] = self.frames[a * n + p];
            }
        }
        out
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut frames = Vec::with_capacity(indices.len() * self.width * self.height);
        for &i in indices {
            frames.extend_from_slice(self.frame(i));
        }
        Self {
            width: self.width,
            height: self.height,
            alpha: indices.len(),
            frames,
            bit_depth: self.bit_depth,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub dark: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn is_active(&self) -> bool {
        self.dark != 0.0 || self.sigma != 0.0
    }
}

/// Spectrum shift of an LED in bins of the object grid.
pub fn led_shift(led: &Led, object: &Lattice) -> (isize, isize) {
    (
        (led.kx / object.dkx()).round() as isize,
        (led.ky / object.dky()).round() as isize,
    )
}

/// Checks that object, pupil and `r` describe one consistent capture geometry.
pub fn check_geometry(object: &Lattice, pupil: &PupilMask, r: usize) -> Result<Lattice> {
    if r == 0 || !object.width.is_multiple_of(r) || !object.height.is_multiple_of(r) {
        return Err(OpticsError::Geometry(format!(
            "object {}x{} is not divisible by r = {r}",
            object.width, object.height
        )));
    }
    let low = Lattice {
        width: object.width / r,
        height: object.height / r,
        pixel_size: object.pixel_size * r as f64,
    };
    let p = &pupil.lattice;
    if p.width != low.width || p.height != low.height {
        return Err(OpticsError::Geometry(format!(
            "pupil grid {}x{} does not match the {}x{} camera grid",
            p.width, p.height, low.width, low.height
        )));
    }
    if (p.pixel_size - low.pixel_size).abs() > 1e-9 * low.pixel_size {
        return Err(OpticsError::Geometry(format!(
            "pupil pixel {} um does not match camera pixel {} um",
            p.pixel_size, low.pixel_size
        )));
    }
    Ok(low)
}

/// Gathers the pupil-filtered, LED-shifted sub-spectrum onto the camera grid.
/// Bins outside the object band contribute zero.
pub fn crop_spectrum(
    spectrum: &[Complex64],
    object: &Lattice,
    pupil: &PupilMask,
    shift: (isize, isize),
    scale: f64,
) -> Vec<Complex64> {
    let low = &pupil.lattice;
    let mut out = vec![Complex64::new(0.0, 0.0); low.width * low.height];
    for v in 0..low.height {
        for u in 0..low.width {
            let p = pupil.values[v * low.width + u];
            if p == Complex64::new(0.0, 0.0) {
                continue;
            }
            let fy = signed_index(v, low.height) - shift.1;
            let fx = signed_index(u, low.width) - shift.0;
            if let (Some(bv), Some(bu)) = (bin_of(fy, object.height), bin_of(fx, object.width)) {
                out[v * low.width + u] = spectrum[bv * object.width + bu] * p * scale;
            }
        }
    }
    out
}

/// Simulated capture of every LED in `pattern`.
pub fn forward_capture(
    object: &ComplexField,
    pattern: &IlluminationPattern,
    pupil: &PupilMask,
    r: usize,
    noise: &NoiseConfig,
) -> Result<IntensityStack> {
    let obj = Lattice {
        width: object.width,
        height: object.height,
        pixel_size: object.pixel_size,
    };
    let low = check_geometry(&obj, pupil, r)?;
    let mut spectrum = object.values.clone();
    Fft2::new(obj.height, obj.width).forward(&mut spectrum);
    let small = Fft2::new(low.height, low.width);
    let n = low.width * low.height;
    let mut frames = Vec::with_capacity(n * pattern.alpha());
    for (i, led) in pattern.leds.iter().enumerate() {
        let mut sub = crop_spectrum(&spectrum, &obj, pupil, led_shift(led, &obj), 1.0 / r as f64);
        small.inverse(&mut sub);
        let start = frames.len();
        frames.extend(sub.iter().map(|c| c.norm_sqr()));
        if noise.is_active() {
            add_noise(&mut frames[start..], noise, i as u64)?;
        }
    }
    IntensityStack::new(low.width, low.height, pattern.alpha(), frames)
}

fn add_noise(frame: &mut [f64], noise: &NoiseConfig, index: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    rng.set_stream(index);
    let normal = Normal::new(0.0, noise.sigma.abs())
        .map_err(|e| OpticsError::Geometry(format!("noise sigma {}: {e}", noise.sigma)))?;
    for v in frame.iter_mut() {
        *v = (*v + noise.dark + normal.sample(&mut rng)).max(0.0);
    }
    Ok(())
}

/// Area of the intersection of two radius-`rho` discs at centre distance `d`,
/// as a fraction of one disc.
pub fn lens_overlap(d: f64, rho: f64) -> f64 {
    if d >= 2.0 * rho {
        return 0.0;
    }
    if d <= 0.0 {
        return 1.0;
    }
    let area =
        2.0 * rho * rho * (d / (2.0 * rho)).acos() - 0.5 * d * (4.0 * rho * rho - d * d).sqrt();
    area / (PI * rho * rho)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlapReport {
    /// Per LED, the largest overlap with any other LED's pupil circle.
    pub per_led: Vec<f64>,
    pub threshold: f64,
}

impl OverlapReport {
    pub fn min(&self) -> f64 {
        self.per_led.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn compatible(&self) -> bool {
        self.per_led.iter().all(|&v| v >= self.threshold)
    }
}

pub const OVERLAP_THRESHOLD: f64 = 0.65;

pub fn fourier_overlap(pattern: &IlluminationPattern, support_radius: f64) -> OverlapReport {
    let leds = &pattern.leds;
    let per_led = leds
        .iter()
        .enumerate()
        .map(|(i, a)| {
            leds.iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, b)| lens_overlap((a.kx - b.kx).hypot(a.ky - b.ky), support_radius))
                .fold(0.0, f64::max)
        })
        .collect();
    OverlapReport {
        per_led,
        threshold: OVERLAP_THRESHOLD,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_pupil(n: usize) -> PupilMask {
        make_pupil(
            0.2,
            0.514,
            Lattice {
                width: n,
                height: n,
                pixel_size: 1.2,
            },
        )
        .unwrap()
    }

    #[test]
    fn preset_counts() {
        for (p, bf, df, na) in [
            (Preset::P1, 13, 0, 0.2),
            (Preset::P2, 13, 36, 0.6),
            (Preset::P3, 13, 10, 0.25),
            (Preset::P4, 9, 20, 0.4),
        ] {
            let pat = build_pattern(&PatternDescriptor::Preset {
                preset: p,
                grid: LedGrid::default(),
            })
            .unwrap();
            assert_eq!((pat.bf_count(), pat.df_count()), (bf, df), "{p:?}");
            assert!(pat.max_na() <= na + 1e-12);
            let first_df = pat.bf_count();
            assert!(pat.leds[..first_df].iter().all(|l| l.label == Label::BF));
            assert!(pat.leds[first_df..]
                .windows(2)
                .all(|w| w[0].na_ill <= w[1].na_ill));
        }
    }

    #[test]
    fn grid_has_37_brightfield_leds() {
        let pat = build_pattern(&PatternDescriptor::Full {
            max_na: 0.6,
            grid: LedGrid::default(),
        })
        .unwrap();
        assert_eq!(pat.bf_count(), 37);
    }

    #[test]
    fn single_on_axis_led() {
        let pat = build_pattern(&PatternDescriptor::Explicit {
            k: vec![(0.0, 0.0)],
            wavelength: 0.514,
            na_objective: 0.2,
        })
        .unwrap();
        assert_eq!(pat.alpha(), 1);
        assert_eq!(pat.leds[0].label, Label::BF);
        assert_eq!(pat.leds[0].na_ill, 0.0);
    }

    #[test]
    fn invalid_patterns_are_rejected() {
        let empty = PatternDescriptor::Explicit {
            k: vec![],
            wavelength: 0.5,
            na_objective: 0.2,
        };
        assert!(build_pattern(&empty).is_err());
        let steep = PatternDescriptor::Explicit {
            k: vec![(2.5, 0.0)],
            wavelength: 0.5,
            na_objective: 0.2,
        };
        assert!(build_pattern(&steep).is_err());
    }

    #[test]
    fn flat_object_gives_unit_intensity() {
        let n = 32;
        let obj = ComplexField::new(n, n, 0.3, vec![Complex64::new(1.0, 0.0); n * n]).unwrap();
        let pat = build_pattern(&PatternDescriptor::Explicit {
            k: vec![(0.0, 0.0)],
            wavelength: 0.514,
            na_objective: 0.2,
        })
        .unwrap();
        let stack =
            forward_capture(&obj, &pat, &desk_pupil(n / 4), 4, &NoiseConfig::disabled()).unwrap();
        assert!(stack.frames.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn geometry_mismatch_is_reported() {
        let obj = ComplexField::new(30, 30, 0.3, vec![Complex64::new(1.0, 0.0); 900]).unwrap();
        let pat = build_pattern(&PatternDescriptor::Preset {
            preset: Preset::P1,
            grid: LedGrid::default(),
        })
        .unwrap();
        assert!(forward_capture(&obj, &pat, &desk_pupil(8), 4, &NoiseConfig::disabled()).is_err());
        let obj = ComplexField::new(32, 32, 0.3, vec![Complex64::new(1.0, 0.0); 1024]).unwrap();
        assert!(forward_capture(&obj, &pat, &desk_pupil(16), 4, &NoiseConfig::disabled()).is_err());
    }

    #[test]
    fn pupil_area_matches_disc() {
        let lat = Lattice {
            width: 256,
            height: 256,
            pixel_size: 0.5,
        };
        let p = make_pupil(0.2, 0.514, lat).unwrap();
        assert!((p.support_radius - 0.389).abs() < 1e-3);
        let count = p.values.iter().filter(|v| v.norm() > 0.0).count() as f64;
        let disc = PI * p.support_radius.powi(2) / (lat.dkx() * lat.dky());
        assert!((count / disc - 1.0).abs() < 0.02);
        for v in 0..256 {
            for u in 0..256 {
                let (fx, fy) = lat.frequency(v, u);
                if fx.hypot(fy) > p.support_radius {
                    assert_eq!(p.values[v * 256 + u].norm(), 0.0);
                }
            }
        }
        let mut s: Vec<Complex64> = (0..256 * 256)
            .map(|i| Complex64::new(i as f64, 1.0))
            .collect();
        p.apply(&mut s);
        let once = s.clone();
        p.apply(&mut s);
        assert_eq!(s, once);
    }

    #[test]
    fn pupil_at_nyquist_is_rejected() {
        let lat = Lattice {
            width: 64,
            height: 64,
            pixel_size: 0.5,
        };
        assert!(matches!(
            make_pupil(0.514, 0.514, lat),
            Err(OpticsError::Sampling(_))
        ));
        assert!(make_pupil(1.2, 0.514, lat).is_err());
    }

    #[test]
    fn overlap_limits() {
        assert_eq!(lens_overlap(0.0, 1.0), 1.0);
        assert_eq!(lens_overlap(2.0, 1.0), 0.0);
        assert!((lens_overlap(1.0, 1.0) - 0.391).abs() < 1e-3);
    }
}
