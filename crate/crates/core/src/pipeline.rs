//! Geometry between raw stacks and network tensors: preprocessing,
//! sub-region splitting, patch lattices, bilinear resampling and
//! alpha-blended stitching.

use crate::optics::{IntensityStack, Label};
use crate::raster::PhaseImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("infeasible geometry: {reason} (largest feasible grid: {max_rows}x{max_cols})")]
    Infeasible {
        reason: String,
        max_rows: usize,
        max_cols: usize,
    },
    #[error("canvas not covered: {count} uncovered pixels, first at (x={x}, y={y})")]
    Gap { count: usize, x: usize, y: usize },
    #[error("patch {index} at ({x}, {y}) lies outside the {width}x{height} canvas")]
    OutOfCanvas {
        index: usize,
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("partition of unity violated at (x={x}, y={y}): weight sum {sum}")]
    Partition { x: usize, y: usize, sum: f64 },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Tiling parameters. Overlaps of sub-regions are in high-resolution pixels,
/// inference overlaps in low-resolution pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileGeometry {
    pub subregion_rows: usize,
    pub subregion_cols: usize,
    pub subregion_overlap_x: usize,
    pub subregion_overlap_y: usize,
    pub patch_in: usize,
    pub patch_net_in: usize,
    pub patch_out: usize,
    pub infer_overlap_x: usize,
    pub infer_overlap_y: usize,
    pub r: usize,
}

impl TileGeometry {
    pub fn full() -> Self {
        Self {
            subregion_rows: 4,
            subregion_cols: 4,
            subregion_overlap_x: 320,
            subregion_overlap_y: 80,
            patch_in: 64,
            patch_net_in: 80,
            patch_out: 320,
            infer_overlap_x: 15,
            infer_overlap_y: 19,
            r: 5,
        }
    }

    /// 256x256 high-res frames, 16 px low-res patches fed to the network as-is.
    pub fn desk() -> Self {
        Self {
            subregion_rows: 2,
            subregion_cols: 2,
            subregion_overlap_x: 64,
            subregion_overlap_y: 64,
            patch_in: 16,
            patch_net_in: 16,
            patch_out: 64,
            infer_overlap_x: 4,
            infer_overlap_y: 4,
            r: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| PipelineError::Infeasible {
            reason,
            max_rows: 0,
            max_cols: 0,
        };
        if self.r == 0 || self.patch_in == 0 || self.subregion_rows == 0 || self.subregion_cols == 0
        {
            return Err(bad("zero-sized tiling parameter".into()));
        }
        if self.patch_out != self.r * self.patch_in {
            return Err(bad(format!(
                "patch_out {} != r * patch_in {}",
                self.patch_out,
                self.r * self.patch_in
            )));
        }
        if self.patch_net_in < self.patch_in {
            return Err(bad("network input smaller than the patch".into()));
        }
        if self.infer_overlap_x >= self.patch_in || self.infer_overlap_y >= self.patch_in {
            return Err(bad(
                "inference overlap must be smaller than the patch".into()
            ));
        }
        if !self.subregion_overlap_x.is_multiple_of(self.r)
            || !self.subregion_overlap_y.is_multiple_of(self.r)
        {
            return Err(bad("sub-region overlaps must be multiples of r".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn scaled(&self, r: usize) -> Rect {
        Rect {
            x: self.x * r,
            y: self.y * r,
            w: self.w * r,
            h: self.h * r,
        }
    }
}

/// `count` windows of equal length spread evenly over `[0, extent)` with at
/// least `overlap` shared pixels between neighbours.
fn spread(extent: usize, count: usize, overlap: usize) -> Option<(usize, Vec<usize>)> {
    if count == 0 {
        return None;
    }
    let len = (extent + (count - 1) * overlap).div_ceil(count);
    if len > extent || (count > 1 && len <= overlap) {
        return None;
    }
    let d = extent - len;
    let starts = (0..count)
        .map(|k| {
            if count == 1 {
                0
            } else {
                (k * d + (count - 1) / 2) / (count - 1)
            }
        })
        .collect();
    Some((len, starts))
}

fn max_feasible(extent: usize, overlap: usize, min_len: usize) -> usize {
    (1..=extent.max(1))
        .take_while(|&c| spread(extent, c, overlap).is_some_and(|(len, _)| len >= min_len))
        .last()
        .unwrap_or(0)
}

/// Row-major sub-region rectangles covering a `width x height` image.
pub fn subregion_layout(
    width: usize,
    height: usize,
    rows: usize,
    cols: usize,
    overlap_x: usize,
    overlap_y: usize,
    min_size: usize,
) -> Result<Vec<Rect>> {
    let fx = spread(width, cols, overlap_x).filter(|(l, _)| *l >= min_size);
    let fy = spread(height, rows, overlap_y).filter(|(l, _)| *l >= min_size);
    let (Some((w, xs)), Some((h, ys))) = (fx, fy) else {
        return Err(PipelineError::Infeasible {
            reason: format!("{rows}x{cols} sub-regions with overlaps {overlap_x}/{overlap_y} in {width}x{height}"),
            max_rows: max_feasible(height, overlap_y, min_size),
            max_cols: max_feasible(width, overlap_x, min_size),
        });
    };
    Ok(ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| Rect { x, y, w, h }))
        .collect())
}

/// Sub-regions of the high-resolution image and of its low-resolution stack.
#[derive(Clone, Debug, PartialEq)]
pub struct SubregionSplit {
    pub high: Vec<Rect>,
    pub low: Vec<Rect>,
}

/// Layout for a low-resolution field of `low_w x low_h`; the high-resolution
/// rectangles are exactly `r` times the low-resolution ones.
pub fn split_subregions(low_w: usize, low_h: usize, geom: &TileGeometry) -> Result<SubregionSplit> {
    geom.validate()?;
    let low = subregion_layout(
        low_w,
        low_h,
        geom.subregion_rows,
        geom.subregion_cols,
        geom.subregion_overlap_x / geom.r,
        geom.subregion_overlap_y / geom.r,
        geom.patch_in,
    )?;
    let high = low.iter().map(|r| r.scaled(geom.r)).collect();
    Ok(SubregionSplit { high, low })
}

pub fn crop_stack(stack: &IntensityStack, rect: Rect) -> Result<IntensityStack> {
    if rect.x + rect.w > stack.width || rect.y + rect.h > stack.height {
        return Err(PipelineError::Dimension(format!(
            "window {rect:?} exceeds {}x{}",
            stack.width, stack.height
        )));
    }
    let mut frames = Vec::with_capacity(rect.w * rect.h * stack.alpha);
    for a in 0..stack.alpha {
        let f = stack.frame(a);
        for y in rect.y..rect.y + rect.h {
            frames
                .extend_from_slice(&f[y * stack.width + rect.x..y * stack.width + rect.x + rect.w]);
        }
    }
    Ok(IntensityStack {
        width: rect.w,
        height: rect.h,
        alpha: stack.alpha,
        frames,
        bit_depth: stack.bit_depth,
    })
}

/// Offsets along one axis: the fewest evenly stretched positions whose
/// spacing is at least `stride` pixels apart where possible and never leaves
/// a gap. Ends are pinned to both borders.
pub fn lattice_positions(extent: usize, patch: usize, overlap: usize) -> Vec<usize> {
    if extent <= patch {
        return vec![0];
    }
    let d = extent - patch;
    let stride = patch - overlap;
    let intervals = (d / stride).max(d.div_ceil(patch)).max(1);
    (0..=intervals)
        .map(|k| (k * d + intervals / 2) / intervals)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchMode {
    Random { count: usize, seed: u64 },
    Grid,
}

/// Top-left offsets `(x, y)` of `patch x patch` windows inside `width x height`.
pub fn patch_offsets(
    width: usize,
    height: usize,
    geom: &TileGeometry,
    mode: PatchMode,
) -> Result<Vec<(usize, usize)>> {
    let p = geom.patch_in;
    if width < p || height < p {
        return Err(PipelineError::Dimension(format!(
            "{width}x{height} region is smaller than a {p} px patch"
        )));
    }
    Ok(match mode {
        PatchMode::Grid => {
            let xs = lattice_positions(width, p, geom.infer_overlap_x);
            let ys = lattice_positions(height, p, geom.infer_overlap_y);
            ys.iter()
                .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
                .collect()
        }
        PatchMode::Random { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count)
                .map(|_| {
                    (
                        rng.random_range(0..=width - p),
                        rng.random_range(0..=height - p),
                    )
                })
                .collect()
        }
    })
}

/// Channel-last `patch x patch x alpha` tensors cut from a stack.
pub fn extract_patches(
    stack: &IntensityStack,
    geom: &TileGeometry,
    mode: PatchMode,
) -> Result<Vec<(Vec<f64>, (usize, usize))>> {
    let p = geom.patch_in;
    let offsets = patch_offsets(stack.width, stack.height, geom, mode)?;
    Ok(offsets
        .into_iter()
        .map(|(x0, y0)| {
            let mut t = vec![0.0; p * p * stack.alpha];
            for a in 0..stack.alpha {
                let f = stack.frame(a);
                for y in 0..p {
                    for x in 0..p {
                        t[(y * p + x) * stack.alpha + a] = f[(y0 + y) * stack.width + x0 + x];
                    }
                }
            }
            (t, (x0, y0))
        })
        .collect())
}

/// Corner-aligned bilinear resampling of a channel-last `h x w x c` image.
pub fn bilinear_resize(
    data: &[f64],
    w: usize,
    h: usize,
    c: usize,
    new_w: usize,
    new_h: usize,
) -> Vec<f64> {
    assert_eq!(data.len(), w * h * c, "bilinear_resize input size");
    let coord = |i: usize, n: usize, m: usize| -> (usize, usize, f64) {
        if m <= 1 || n <= 1 {
            return (0, 0, 0.0);
        }
        let s = i as f64 * (n - 1) as f64 / (m - 1) as f64;
        let i0 = (s.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0.0; new_w * new_h * c];
    for y in 0..new_h {
        let (y0, y1, ty) = coord(y, h, new_h);
        for x in 0..new_w {
            let (x0, x1, tx) = coord(x, w, new_w);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| data[(yy * w + xx) * c + ch];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                out[(y * new_w + x) * c + ch] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    out
}

/// Mean over a `k x k` window, shrunk at the borders to the in-image part.
pub fn box_filter(data: &[f64], w: usize, h: usize, k: usize) -> Vec<f64> {
    let half = k / 2;
    let mut integral = vec![0.0; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += data[y * w + x];
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(half), (y + half + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(half), (x + half + 1).min(w));
            let s = integral[y1 * (w + 1) + x1]
                - integral[y0 * (w + 1) + x1]
                - integral[y1 * (w + 1) + x0]
                + integral[y0 * (w + 1) + x0];
            out[y * w + x] = s / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    out
}

pub const BACKGROUND_KERNEL: usize = 129;

/// Calibration frames shared by every frame of a stack.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Calibration {
    /// Brightfield background; a box-filtered copy of each frame when absent.
    pub background: Option<Vec<f64>>,
    /// Darkfield dark frame; zero when absent.
    pub dark: Option<Vec<f64>>,
}

/// Scales to unit mean. Frames already within `UNIT_BAND` of unit mean are
/// left untouched, so a second pass is an exact no-op.
fn unit_mean(frame: &mut [f64]) {
    let m = frame.iter().sum::<f64>() / frame.len() as f64;
    if (m - 1.0).abs() <= UNIT_BAND || m == 0.0 || !m.is_finite() {
        return;
    }
    frame.iter_mut().for_each(|v| *v /= m);
}

const UNIT_BAND: f64 = 1e-12;

/// Brightfield: background division then unit mean. Darkfield: dark-frame
/// subtraction clipped at zero.
pub fn preprocess(
    stack: &IntensityStack,
    labels: &[Label],
    cal: &Calibration,
) -> Result<IntensityStack> {
    let n = stack.width * stack.height;
    if labels.len() != stack.alpha {
        return Err(PipelineError::Dimension(format!(
            "{} labels for {} frames",
            labels.len(),
            stack.alpha
        )));
    }
    for (name, img) in [("background", &cal.background), ("dark", &cal.dark)] {
        if let Some(img) = img {
            if img.len() != n {
                return Err(PipelineError::Dimension(format!(
                    "{name} has {} pixels, frames have {n}",
                    img.len()
                )));
            }
        }
    }
    let mut out = stack.clone();
    for (i, label) in labels.iter().enumerate() {
        let frame = out.frame_mut(i);
        match label {
            Label::BF => {
                match &cal.background {
                    // a constant background only rescales, which unit_mean absorbs
                    Some(bg) if bg.iter().all(|v| *v == bg[0]) => {}
                    Some(bg) => frame
                        .iter_mut()
                        .zip(bg)
                        .for_each(|(v, b)| *v /= b.max(f64::MIN_POSITIVE)),
                    None => {
                        let bg = box_filter(frame, stack.width, stack.height, BACKGROUND_KERNEL);
                        frame
                            .iter_mut()
                            .zip(&bg)
                            .for_each(|(v, b)| *v /= b.max(f64::MIN_POSITIVE));
                    }
                }
                unit_mean(frame);
            }
            Label::DF => {
                if let Some(dark) = &cal.dark {
                    frame
                        .iter_mut()
                        .zip(dark)
                        .for_each(|(v, d)| *v = (*v - d).max(0.0));
                } else {
                    frame.iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
        }
    }
    Ok(out)
}

/// Placement of one output patch with the ramp width on each side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub rect: Rect,
    pub left: usize,
    pub right: usize,
    pub top: usize,
    pub bottom: usize,
}

/// Linear rise over `width` pixels measured from a patch edge; 1 when no ramp.
fn ramp(d: usize, width: usize) -> f64 {
    if width == 0 {
        1.0
    } else {
        ((d as f64 + 0.5) / width as f64).min(1.0)
    }
}

impl Placement {
    /// Unnormalized blend weight at patch-local `(dx, dy)`; positive everywhere.
    pub fn weight(&self, dx: usize, dy: usize) -> f64 {
        let wx = ramp(dx, self.left).min(ramp(self.rect.w - 1 - dx, self.right));
        let wy = ramp(dy, self.top).min(ramp(self.rect.h - 1 - dy, self.bottom));
        wx * wy
    }
}

/// Canvas layout with linear ramps sized to the actual neighbour overlaps.
#[derive(Clone, Debug, PartialEq)]
pub struct StitchPlan {
    pub width: usize,
    pub height: usize,
    pub placements: Vec<Placement>,
}

impl StitchPlan {
    pub fn new(width: usize, height: usize, rects: &[Rect]) -> Result<Self> {
        for (index, r) in rects.iter().enumerate() {
            if r.w == 0 || r.h == 0 || r.x + r.w > width || r.y + r.h > height {
                return Err(PipelineError::OutOfCanvas {
                    index,
                    x: r.x,
                    y: r.y,
                    width,
                    height,
                });
            }
        }
        let placements = rects
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let mut p = Placement {
                    rect: *a,
                    left: 0,
                    right: 0,
                    top: 0,
                    bottom: 0,
                };
                for (j, b) in rects.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    let rows_meet = b.y < a.y + a.h && a.y < b.y + b.h;
                    let cols_meet = b.x < a.x + a.w && a.x < b.x + b.w;
                    if rows_meet && cols_meet {
                        if b.x < a.x {
                            p.left = p.left.max(b.x + b.w - a.x);
                        }
                        if b.x + b.w > a.x + a.w {
                            p.right = p.right.max(a.x + a.w - b.x);
                        }
                        if b.y < a.y {
                            p.top = p.top.max(b.y + b.h - a.y);
                        }
                        if b.y + b.h > a.y + a.h {
                            p.bottom = p.bottom.max(a.y + a.h - b.y);
                        }
                    }
                }
                if a.x == 0 {
                    p.left = 0;
                }
                if a.y == 0 {
                    p.top = 0;
                }
                if a.x + a.w == width {
                    p.right = 0;
                }
                if a.y + a.h == height {
                    p.bottom = 0;
                }
                p
            })
            .collect();
        Ok(Self {
            width,
            height,
            placements,
        })
    }

    /// Indices of placements touching each canvas row.
    fn row_buckets(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.height];
        for (i, p) in self.placements.iter().enumerate() {
            for row in rows.iter_mut().skip(p.rect.y).take(p.rect.h) {
                row.push(i);
            }
        }
        rows
    }

    /// Checks coverage and that normalized weights sum to one within `tol`,
    /// one canvas row at a time.
    pub fn verify(&self, tol: f64) -> Result<()> {
        let buckets = self.row_buckets();
        let mut total = vec![0.0; self.width];
        let mut gap: Option<(usize, usize, usize)> = None;
        for (y, bucket) in buckets.iter().enumerate() {
            total.iter_mut().for_each(|v| *v = 0.0);
            for &i in bucket {
                let p = &self.placements[i];
                for dx in 0..p.rect.w {
                    total[p.rect.x + dx] += p.weight(dx, y - p.rect.y);
                }
            }
            for (x, &t) in total.iter().enumerate() {
                if t <= 0.0 {
                    let g = gap.get_or_insert((0, x, y));
                    g.0 += 1;
                }
            }
            if gap.is_some() {
                continue;
            }
            let mut sums = vec![0.0; self.width];
            for &i in bucket {
                let p = &self.placements[i];
                for dx in 0..p.rect.w {
                    let x = p.rect.x + dx;
                    sums[x] += p.weight(dx, y - p.rect.y) / total[x];
                }
            }
            if let Some((x, s)) = sums
                .iter()
                .enumerate()
                .find(|(_, s)| (**s - 1.0).abs() > tol)
            {
                return Err(PipelineError::Partition { x, y, sum: *s });
            }
        }
        match gap {
            Some((count, x, y)) => Err(PipelineError::Gap { count, x, y }),
            None => Ok(()),
        }
    }

    /// Weighted average of the patches; every canvas pixel must be covered.
    pub fn compose(&self, patches: &[&[f64]]) -> Result<PhaseImage> {
        if patches.len() != self.placements.len() {
            return Err(PipelineError::Dimension(format!(
                "{} patches for {} placements",
                patches.len(),
                self.placements.len()
            )));
        }
        let mut acc = vec![0.0; self.width * self.height];
        let mut weight = vec![0.0; self.width * self.height];
        for (p, data) in self.placements.iter().zip(patches) {
            if data.len() != p.rect.w * p.rect.h {
                return Err(PipelineError::Dimension(format!(
                    "patch has {} values, placement {}x{}",
                    data.len(),
                    p.rect.w,
                    p.rect.h
                )));
            }
            for dy in 0..p.rect.h {
                for dx in 0..p.rect.w {
                    let w = p.weight(dx, dy);
                    let k = (p.rect.y + dy) * self.width + p.rect.x + dx;
                    acc[k] += w * data[dy * p.rect.w + dx];
                    weight[k] += w;
                }
            }
        }
        let uncovered: Vec<usize> = (0..weight.len()).filter(|&k| weight[k] <= 0.0).collect();
        if let Some(&first) = uncovered.first() {
            return Err(PipelineError::Gap {
                count: uncovered.len(),
                x: first % self.width,
                y: first / self.width,
            });
        }
        let values = acc.iter().zip(&weight).map(|(a, w)| a / w).collect();
        Ok(PhaseImage {
            width: self.width,
            height: self.height,
            values,
        })
    }
}

/// Stitches `(patch, top-left offset)` pairs into a `width x height` canvas.
pub fn alpha_blend_stitch(
    patches: &[(PhaseImage, (usize, usize))],
    width: usize,
    height: usize,
) -> Result<PhaseImage> {
    let rects: Vec<Rect> = patches
        .iter()
        .map(|(p, (x, y))| Rect {
            x: *x,
            y: *y,
            w: p.width,
            h: p.height,
        })
        .collect();
    let plan = StitchPlan::new(width, height, &rects)?;
    let data: Vec<&[f64]> = patches.iter().map(|(p, _)| p.values.as_slice()).collect();
    plan.compose(&data)
}

/// Full-field inference layout: every grid patch of every sub-region, as
/// low-resolution input windows and high-resolution output rectangles.
#[derive(Clone, Debug, PartialEq)]
pub struct InferencePlan {
    pub inputs: Vec<Rect>,
    pub outputs: Vec<Rect>,
    pub canvas_width: usize,
    pub canvas_height: usize,
}

pub fn inference_plan(low_w: usize, low_h: usize, geom: &TileGeometry) -> Result<InferencePlan> {
    let split = split_subregions(low_w, low_h, geom)?;
    let mut inputs = Vec::new();
    for region in &split.low {
        for (x, y) in patch_offsets(region.w, region.h, geom, PatchMode::Grid)? {
            inputs.push(Rect {
                x: region.x + x,
                y: region.y + y,
                w: geom.patch_in,
                h: geom.patch_in,
            });
        }
    }
    let outputs = inputs.iter().map(|r| r.scaled(geom.r)).collect();
    Ok(InferencePlan {
        inputs,
        outputs,
        canvas_width: low_w * geom.r,
        canvas_height: low_h * geom.r,
    })
}
