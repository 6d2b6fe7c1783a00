//! Training losses on the autodiff graph and plain-f64 evaluation metrics.
//!
//! Mixed generator loss:
//! `l = l1 * (b1 * l_mae + b2 * l_fmae) + l2 * l_g + l3 * l_reg`.
//! Terms with zero weight are not built and report 0.

use crate::autodiff::{AutodiffError, Graph, Ops, ParamId, ParamKind, ParamStore, Tensor, Var};
use crate::fft::{fft2_real, fftshift, Fft2};
use image::{Rgb, RgbImage};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid loss weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

/// Floor applied inside every log.
pub const LOG_FLOOR: f64 = 1e-12;
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl LossWeights {
    pub fn phase1() -> Self {
        Self {
            lambda1: 1e2,
            beta1: 1.0,
            beta2: 0.0,
            lambda2: 1.0,
            lambda3: 1e-5,
        }
    }

    pub fn phase2() -> Self {
        Self {
            lambda1: 1e2,
            beta1: 0.95,
            beta2: 0.05,
            lambda2: 1.0,
            lambda3: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda1,
            self.beta1,
            self.beta2,
            self.lambda2,
            self.lambda3,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(ObjectiveError::Weights(format!(
                "{self:?} must be finite and non-negative"
            )));
        }
        Ok(())
    }

    /// Per-term coefficients (mae, fmae, adversarial, regularizer).
    pub fn coefficients(&self) -> [f64; 4] {
        [
            self.lambda1 * self.beta1,
            self.lambda1 * self.beta2,
            self.lambda2,
            self.lambda3,
        ]
    }

    /// Total for given components, in the same evaluation order as the graph.
    pub fn combine(&self, mae: f64, fmae: f64, adv: f64, reg: f64) -> f64 {
        let c = self.coefficients();
        let mut acc = 0.0;
        for (w, v) in c.iter().zip([mae, fmae, adv, reg]) {
            if *w != 0.0 {
                acc += w * v;
            }
        }
        acc
    }
}

/// Component values of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mae: f64,
    pub fmae: f64,
    pub adv: f64,
    pub reg: f64,
}

pub struct MixedLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

fn check_same(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(ObjectiveError::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// `mean(| |truth| - |pred| |)`, or `mean(|truth - pred|)` when `signed`.
pub fn loss_mae(g: &mut Graph, pred: Var, truth: &Tensor, signed: bool) -> Result<Var> {
    check_same(g.value(pred).shape(), truth.shape(), "loss_mae")?;
    let (p, t) = if signed {
        (pred, truth.clone())
    } else {
        let t = Tensor::new(
            truth.shape(),
            truth.data().iter().map(|v| v.abs()).collect(),
        )?;
        (g.abs(pred)?, t)
    };
    let t = g.input(t);
    let d = g.sub(t, p)?;
    let a = g.abs(d)?;
    Ok(g.mean(a)?)
}

/// Unitary FFT magnitudes of `[N, H, W, 1]` or `[H, W]` data.
pub fn fft_magnitude(values: &Tensor) -> Result<Tensor> {
    let s = values.shape();
    let (h, w) = match s {
        [h, w] => (*h, *w),
        [_, h, w, 1] => (*h, *w),
        _ => {
            return Err(ObjectiveError::Shape(format!(
                "expected [H,W] or [N,H,W,1], got {s:?}"
            )))
        }
    };
    let plan = Fft2::new(h, w);
    let mut out = Vec::with_capacity(values.len());
    for img in values.data().chunks(h * w) {
        let mut buf: Vec<Complex64> = img.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        plan.forward(&mut buf);
        out.extend(buf.iter().map(|c| c.norm()));
    }
    Ok(Tensor::new(s, out)?)
}

/// `mean(| |F truth| - |F pred| |)` with unitary transforms.
pub fn loss_fmae(g: &mut Graph, pred: Var, truth: &Tensor) -> Result<Var> {
    check_same(g.value(pred).shape(), truth.shape(), "loss_fmae")?;
    let ft = g.input(fft_magnitude(truth)?);
    let fp = g.fft2_mag(pred)?;
    let d = g.sub(ft, fp)?;
    let a = g.abs(d)?;
    Ok(g.mean(a)?)
}

/// `-mean(log p_real)` of the discriminator's score for generated pairs.
pub fn loss_adversarial_g(g: &mut Graph, p_real: Var) -> Result<Var> {
    let l = g.log_clamped(p_real, LOG_FLOOR)?;
    let m = g.mean(l)?;
    Ok(g.affine(m, -1.0, 0.0)?)
}

/// Weight-kind parameters under `prefix` (biases and BN excluded).
pub fn regularized_params(store: &ParamStore, prefix: &str) -> Vec<ParamId> {
    store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Weight && p.name.starts_with(prefix))
        .map(|(id, _)| id)
        .collect()
}

/// L1 norm of the given parameters.
pub fn loss_weight_reg(g: &mut Graph, params: &[ParamId]) -> Result<Var> {
    let mut terms = Vec::with_capacity(params.len());
    for &id in params {
        let p = g.param(id);
        terms.push((g.sum_abs(p)?, 1.0));
    }
    if terms.is_empty() {
        return Ok(g.input(Tensor::scalar(0.0)));
    }
    Ok(g.weighted_sum(&terms)?)
}

/// Mixed generator loss. `p_real` is the discriminator's real-class score
/// for the generated pairs; it may be `None` only when `lambda2 == 0`.
pub fn loss_mixed(
    g: &mut Graph,
    pred: Var,
    truth: &Tensor,
    p_real: Option<Var>,
    reg_params: &[ParamId],
    w: &LossWeights,
    signed: bool,
) -> Result<MixedLoss> {
    w.validate()?;
    let c = w.coefficients();
    let mut terms = Vec::new();
    let mut bd = LossBreakdown::default();
    if c[0] != 0.0 {
        let v = loss_mae(g, pred, truth, signed)?;
        bd.mae = g.value(v).item();
        terms.push((v, c[0]));
    }
    if c[1] != 0.0 {
        let v = loss_fmae(g, pred, truth)?;
        bd.fmae = g.value(v).item();
        terms.push((v, c[1]));
    }
    if c[2] != 0.0 {
        let p = p_real.ok_or_else(|| {
            ObjectiveError::Weights("adversarial weight set without a discriminator score".into())
        })?;
        let v = loss_adversarial_g(g, p)?;
        bd.adv = g.value(v).item();
        terms.push((v, c[2]));
    }
    if c[3] != 0.0 {
        let v = loss_weight_reg(g, reg_params)?;
        bd.reg = g.value(v).item();
        terms.push((v, c[3]));
    }
    let total = if terms.is_empty() {
        g.input(Tensor::scalar(0.0))
    } else {
        g.weighted_sum(&terms)?
    };
    bd.total = g.value(total).item();
    Ok(MixedLoss {
        total,
        breakdown: bd,
    })
}

/// `-mean(log D(real)) - mean(log(1 - D(fake)))`.
pub fn loss_discriminator(g: &mut Graph, p_real_on_real: Var, p_real_on_fake: Var) -> Result<Var> {
    let lr = g.log_clamped(p_real_on_real, LOG_FLOOR)?;
    let mr = g.mean(lr)?;
    let q = g.affine(p_real_on_fake, -1.0, 1.0)?;
    let lf = g.log_clamped(q, LOG_FLOOR)?;
    let mf = g.mean(lf)?;
    Ok(g.weighted_sum(&[(mr, -1.0), (mf, -1.0)])?)
}

// ---- metrics on plain images ----

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub fm: f64,
}

pub fn mae(pred: &[f64], truth: &[f64], signed: bool) -> f64 {
    assert_eq!(pred.len(), truth.len(), "mae of unequal images");
    let s: f64 = if signed {
        pred.iter().zip(truth).map(|(p, t)| (t - p).abs()).sum()
    } else {
        pred.iter()
            .zip(truth)
            .map(|(p, t)| (t.abs() - p.abs()).abs())
            .sum()
    };
    s / pred.len() as f64
}

fn value_range(v: &[f64]) -> f64 {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    hi - lo
}

/// Dynamic range used by PSNR and SSIM: the truth's max - min, or 1 for a
/// constant truth.
pub fn dynamic_range(truth: &[f64]) -> f64 {
    let r = value_range(truth);
    if r > 0.0 {
        r
    } else {
        1.0
    }
}

pub fn psnr(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "psnr of unequal images");
    let mse = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64;
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    let range = dynamic_range(truth);
    (10.0 * (range * range / mse).log10()).min(PSNR_CAP_DB)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable 'valid' filtering with a 1D kernel along both axes.
fn filter_valid(img: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; oh * w];
    for y in 0..oh {
        for x in 0..w {
            rows[y * w + x] = (0..n).map(|i| k[i] * img[(y + i) * w + x]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[y * w + x + i]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM over all full 11x11 Gaussian windows (sigma 1.5). Images
/// smaller than the window use one window covering the whole image.
pub fn ssim(a: &[f64], b: &[f64], w: usize, h: usize, range: f64) -> f64 {
    assert_eq!(a.len(), w * h, "ssim image size");
    assert_eq!(b.len(), w * h, "ssim image size");
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let n = SSIM_WINDOW.min(w).min(h);
    let k = gaussian_kernel(n, SSIM_SIGMA);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
    };
    let (mu_a, ow, oh) = filter_valid(a, w, h, &k);
    let (mu_b, _, _) = filter_valid(b, w, h, &k);
    let (e_aa, _, _) = filter_valid(&prod(&|x, _| x * x), w, h, &k);
    let (e_bb, _, _) = filter_valid(&prod(&|_, y| y * y), w, h, &k);
    let (e_ab, _, _) = filter_valid(&prod(&|x, y| x * y), w, h, &k);
    let mut total = 0.0;
    for i in 0..ow * oh {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total +=
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / (ow * oh) as f64
}

/// Fraction of Fourier bins with magnitude above `max / 1000`.
pub fn frequency_measure(img: &[f64], w: usize, h: usize) -> f64 {
    let spec = fft2_real(img, h, w);
    let mags: Vec<f64> = spec.iter().map(|c| c.norm()).collect();
    let max = mags.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0.0;
    }
    mags.iter().filter(|&&m| m > max / 1000.0).count() as f64 / mags.len() as f64
}

pub fn metric_suite(pred: &[f64], truth: &[f64], w: usize, h: usize) -> MetricReport {
    MetricReport {
        mae: mae(pred, truth, false),
        psnr_db: psnr(pred, truth),
        ssim: ssim(pred, truth, w, h, dynamic_range(truth)),
        fm: frequency_measure(pred, w, h),
    }
}

/// Periodic Gaussian blur (exact spectral multiplication).
pub fn gaussian_blur(img: &[f64], w: usize, h: usize, sigma_px: f64) -> Vec<f64> {
    let plan = Fft2::new(h, w);
    let mut buf: Vec<Complex64> = img.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    plan.forward(&mut buf);
    let s2 = 2.0 * std::f64::consts::PI.powi(2) * sigma_px * sigma_px;
    for v in 0..h {
        let fy = crate::fft::signed_index(v, h) as f64 / h as f64;
        for u in 0..w {
            let fx = crate::fft::signed_index(u, w) as f64 / w as f64;
            buf[v * w + u] *= (-s2 * (fx * fx + fy * fy)).exp();
        }
    }
    plan.inverse(&mut buf);
    buf.iter().map(|c| c.re).collect()
}

/// Spectral power `|F|^2` of a real image per radial frequency band
/// (cycles/um); see [`spectrum_band_energy`].
pub fn band_energy(
    img: &[f64],
    w: usize,
    h: usize,
    pixel: f64,
    radii: &[f64],
    skip_dc: bool,
) -> Vec<f64> {
    spectrum_band_energy(&fft2_real(img, h, w), w, h, pixel, radii, skip_dc)
}

/// Result `i` sums `|F|^2` over bins with `r_{i-1} < |f| <= r_i`, the last
/// entry everything beyond `radii.last()`. The DC bin is excluded when
/// `skip_dc`.
pub fn spectrum_band_energy(
    spec: &[Complex64],
    w: usize,
    h: usize,
    pixel: f64,
    radii: &[f64],
    skip_dc: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; radii.len() + 1];
    for v in 0..h {
        let fy = crate::fft::signed_index(v, h) as f64 / (h as f64 * pixel);
        for u in 0..w {
            if skip_dc && u == 0 && v == 0 {
                continue;
            }
            let fx = crate::fft::signed_index(u, w) as f64 / (w as f64 * pixel);
            let f = (fx * fx + fy * fy).sqrt();
            let band = radii.iter().position(|&r| f <= r).unwrap_or(radii.len());
            out[band] += spec[v * w + u].norm_sqr();
        }
    }
    out
}

/// Fraction of non-DC spectral energy outside radius `cutoff` (cycles/um).
pub fn energy_beyond(img: &[f64], w: usize, h: usize, pixel: f64, cutoff: f64) -> f64 {
    let e = band_energy(img, w, h, pixel, &[cutoff], true);
    let total = e[0] + e[1];
    if total == 0.0 {
        0.0
    } else {
        e[1] / total
    }
}

/// `1 - |F pred - F truth|^2 / |F truth|^2` over non-DC bins with
/// `|f| <= cutoff`: the share of the truth's in-band spectrum a prediction
/// recovers.
pub fn band_fidelity(
    pred: &[f64],
    truth: &[f64],
    w: usize,
    h: usize,
    pixel: f64,
    cutoff: f64,
) -> f64 {
    let diff: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| p - t).collect();
    let err = band_energy(&diff, w, h, pixel, &[cutoff], true)[0];
    let reference = band_energy(truth, w, h, pixel, &[cutoff], true)[0];
    if reference == 0.0 {
        return if err == 0.0 { 1.0 } else { f64::NEG_INFINITY };
    }
    1.0 - err / reference
}

pub const COVERAGE_COLOURS: [[u8; 3]; 3] = [[255, 220, 0], [0, 200, 60], [255, 140, 0]];

/// Centred log-magnitude spectrum with circles at 1, 2 and 4 x NA/lambda
/// (yellow, green, orange).
pub fn fourier_coverage_plot(
    img: &[f64],
    w: usize,
    h: usize,
    pixel: f64,
    na_objective: f64,
    wavelength: f64,
) -> RgbImage {
    let spec = fftshift(&fft2_real(img, h, w), h, w);
    let logs: Vec<f64> = spec.iter().map(|c| (1.0 + c.norm()).ln()).collect();
    let max = logs.iter().cloned().fold(0.0, f64::max);
    let mut out = RgbImage::new(w as u32, h as u32);
    for (i, &l) in logs.iter().enumerate() {
        let g = if max > 0.0 {
            (255.0 * l / max).round() as u8
        } else {
            0
        };
        out.put_pixel((i % w) as u32, (i / w) as u32, Rgb([g, g, g]));
    }
    let (cx, cy) = ((w / 2) as f64, (h / 2) as f64);
    let (dfx, dfy) = (1.0 / (w as f64 * pixel), 1.0 / (h as f64 * pixel));
    for (m, colour) in [1.0, 2.0, 4.0].iter().zip(COVERAGE_COLOURS) {
        let f = m * na_objective / wavelength;
        let (rx, ry) = (f / dfx, f / dfy);
        let steps = (8.0 * rx.max(ry)).ceil().max(64.0) as usize;
        for s in 0..steps {
            let t = 2.0 * std::f64::consts::PI * s as f64 / steps as f64;
            let (x, y) = ((cx + rx * t.cos()).round(), (cy + ry * t.sin()).round());
            if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                out.put_pixel(x as u32, y as u32, Rgb(colour));
            }
        }
    }
    out
}
