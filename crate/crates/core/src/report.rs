//! CSV tables and simple line plots for training and evaluation runs.

use crate::objective::MetricReport;
use crate::trainer::LossRecord;
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ReportError>;

/// One evaluated frame of a time series.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub frame_index: usize,
    pub time_min: f64,
    pub mae: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub fm: f64,
}

impl MetricRow {
    pub fn new(frame_index: usize, time_min: f64, m: &MetricReport) -> Self {
        Self {
            frame_index,
            time_min,
            mae: m.mae,
            psnr_db: m.psnr_db,
            ssim: m.ssim,
            fm: m.fm,
        }
    }
}

pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    csv::Reader::from_path(path)?
        .deserialize()
        .map(|r| r.map_err(ReportError::from))
        .collect()
}

/// Appends rows, writing the header only when the file is new or empty.
pub fn append_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let fresh = std::fs::metadata(path)
        .map(|m| m.len() == 0)
        .unwrap_or(true);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(fresh)
        .from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    csv::Reader::from_path(path)?
        .deserialize()
        .map(|r| r.map_err(ReportError::from))
        .collect()
}

const PLOT_W: u32 = 480;
const PLOT_H: u32 = 320;
const MARGIN: u32 = 32;

/// White canvas with axes and a blue polyline through `(x, y)`, both axes
/// scaled to the data (y from 0).
pub fn line_plot(points: &[(f64, f64)]) -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    for x in MARGIN..PLOT_W - MARGIN / 2 {
        img.put_pixel(x, PLOT_H - MARGIN, axis);
    }
    for y in MARGIN / 2..=PLOT_H - MARGIN {
        img.put_pixel(MARGIN, y, axis);
    }
    let finite: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    if finite.is_empty() {
        return img;
    }
    let (x_lo, x_hi) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
            (a.min(p.0), b.max(p.0))
        });
    let y_hi = finite.iter().fold(0.0_f64, |a, p| a.max(p.1));
    let x_span = if x_hi > x_lo { x_hi - x_lo } else { 1.0 };
    let y_span = if y_hi > 0.0 { y_hi } else { 1.0 };
    let (pw, ph) = (
        (PLOT_W - MARGIN - MARGIN / 2) as f64,
        (PLOT_H - MARGIN - MARGIN / 2) as f64,
    );
    let to_px = |(x, y): (f64, f64)| {
        (
            MARGIN as f64 + (x - x_lo) / x_span * pw,
            (PLOT_H - MARGIN) as f64 - y.max(0.0) / y_span * ph,
        )
    };
    let colour = Rgb([30, 80, 200]);
    let px: Vec<(f64, f64)> = finite.iter().map(|&p| to_px(p)).collect();
    for pair in px.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for k in 0..=n {
            let t = k as f64 / n as f64;
            put(
                &mut img,
                a.0 + t * (b.0 - a.0),
                a.1 + t * (b.1 - a.1),
                colour,
            );
        }
    }
    for &(x, y) in &px {
        for dy in -2..=2 {
            for dx in -2..=2 {
                put(&mut img, x + dx as f64, y + dy as f64, colour);
            }
        }
    }
    img
}

fn put(img: &mut RgbImage, x: f64, y: f64, c: Rgb<u8>) {
    let (x, y) = (x.round(), y.round());
    if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// MAE against acquisition time.
pub fn mae_curve_plot(rows: &[MetricRow]) -> RgbImage {
    line_plot(&rows.iter().map(|r| (r.time_min, r.mae)).collect::<Vec<_>>())
}
