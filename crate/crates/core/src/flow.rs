//! Dense correspondence between the query gradient image and rendered
//! gradient images: per-pixel SIFT descriptors of the magnitude raster, a
//! coarse-to-fine discrete flow matcher with message passing, bidirectional
//! consistency filtering, texturedness masking, and lifting of surviving
//! pairs to 2D-3D correspondences.

use std::collections::BTreeSet;

use nalgebra::{Vector2, Vector3};

use crate::camera::{CameraIntrinsics, CameraPose};
use crate::error::{Error, Result};
use crate::raster::GradientImage;
use crate::render::{backproject_pixel, RenderOutput};

/// Descriptor geometry: 4x4 spatial cells of 4x4 px, 8 orientation bins.
pub const SIFT_CELL_GRID: usize = 4;
pub const SIFT_CELL_SIZE: usize = 4;
pub const SIFT_ORIENTATION_BINS: usize = 8;
pub const SIFT_DIM: usize = SIFT_CELL_GRID * SIFT_CELL_GRID * SIFT_ORIENTATION_BINS;

const SIFT_CLAMP: f32 = 0.2;

/// A 2D-3D correspondence between a query pixel and a model point obtained
/// through one rendered view.
#[derive(Debug, Clone)]
pub struct Correspondence2D3D {
    pub pixel: Vector2<f64>,
    pub world: Vector3<f64>,
    /// Index of the rendered view the world point was reconstructed from.
    pub view_index: usize,
}

/// Per-pixel 128-dimensional SIFT descriptors of a gradient-magnitude image.
#[derive(Debug, Clone)]
pub struct DenseSiftField {
    pub width: usize,
    pub height: usize,
    pub cell_size: usize,
    pub orientation_bins: usize,
    descriptors: Vec<f32>,
    valid: Vec<bool>,
}

impl DenseSiftField {
    #[inline]
    pub fn descriptor(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * SIFT_DIM;
        &self.descriptors[i..i + SIFT_DIM]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }
}

/// Boolean pixel mask over a raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    pub width: usize,
    pub height: usize,
    bits: Vec<bool>,
}

impl PixelMask {
    pub fn new(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Integer per-pixel displacement field with validity flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    u: Vec<i32>,
    v: Vec<i32>,
    valid: Vec<bool>,
}

impl FlowField {
    pub fn new_invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            u: vec![0; width * height],
            v: vec![0; width * height],
            valid: vec![false; width * height],
        }
    }

    /// Constant displacement everywhere, fully valid.
    pub fn constant(width: usize, height: usize, u: i32, v: i32) -> Self {
        Self {
            width,
            height,
            u: vec![u; width * height],
            v: vec![v; width * height],
            valid: vec![true; width * height],
        }
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<(i32, i32)> {
        let i = y * self.width + x;
        self.valid[i].then(|| (self.u[i], self.v[i]))
    }

    pub fn set(&mut self, x: usize, y: usize, u: i32, v: i32) {
        let i = y * self.width + x;
        self.u[i] = u;
        self.v[i] = v;
        self.valid[i] = true;
    }

    pub fn invalidate(&mut self, x: usize, y: usize) {
        self.valid[y * self.width + x] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|b| **b).count()
    }

    /// Debug export: u and v planes in the plain-text raster format, with
    /// "nan" at invalid pixels.
    pub fn write_text(&self, path: &std::path::Path) -> Result<()> {
        let mut s = format!("{} {}\n", self.width, self.height);
        for plane in [&self.u, &self.v] {
            for y in 0..self.height {
                let row: Vec<String> = (0..self.width)
                    .map(|x| {
                        let i = y * self.width + x;
                        if self.valid[i] {
                            plane[i].to_string()
                        } else {
                            "nan".to_string()
                        }
                    })
                    .collect();
                s.push_str(&row.join(" "));
                s.push('\n');
            }
        }
        std::fs::write(path, s)?;
        Ok(())
    }
}

/// Matcher parameters; all exposed in the pipeline config.
#[derive(Debug, Clone)]
pub struct FlowParams {
    /// Pyramid level count (>= 1); level 0 is full resolution.
    pub pyramid_levels: usize,
    /// Search radius at the coarsest level (full displacement window).
    pub coarse_radius: i32,
    /// Residual search radius at every finer level.
    pub fine_radius: i32,
    /// Truncation of the L1 descriptor data term.
    pub data_truncation: f64,
    /// Weight of the truncated-L1 spatial smoothness term.
    pub smoothness_weight: f64,
    /// Truncation of the smoothness term (per component).
    pub smoothness_truncation: f64,
    /// Weight of the displacement-magnitude penalty.
    pub displacement_penalty: f64,
    /// Message-passing iterations per level.
    pub iterations: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            pyramid_levels: 3,
            coarse_radius: 11,
            fine_radius: 2,
            data_truncation: 15.0,
            smoothness_weight: 1.0,
            smoothness_truncation: 4.0,
            displacement_penalty: 0.01,
            iterations: 60,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_levels < 1 {
            return Err(Error::invalid("FlowParams", "pyramid_levels must be >= 1"));
        }
        if self.coarse_radius < 0 || self.fine_radius < 0 {
            return Err(Error::invalid("FlowParams", "search radii must be >= 0"));
        }
        for (name, w) in [
            ("data_truncation", self.data_truncation),
            ("smoothness_weight", self.smoothness_weight),
            ("smoothness_truncation", self.smoothness_truncation),
            ("displacement_penalty", self.displacement_penalty),
        ] {
            if !(w >= 0.0) {
                return Err(Error::invalid(
                    "FlowParams",
                    format!("{name} must be >= 0, got {w}"),
                ));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Dense SIFT

/// Per-pixel SIFT descriptors of the gradient-magnitude raster. Orientation
/// histograms are built from the derivatives of the magnitude image itself,
/// accumulated over a 4x4 grid of 4x4-px cells centered at the pixel.
pub fn dense_sift(gradient: &GradientImage) -> DenseSiftField {
    let (w, h) = (gradient.width, gradient.height);
    let half = (SIFT_CELL_GRID * SIFT_CELL_SIZE) as i32 / 2;

    // Soft orientation votes per pixel, then one summed-area table per bin so
    // each cell histogram is a constant-time box sum.
    let mut bins = vec![0f64; SIFT_ORIENTATION_BINS * w * h];
    let at = |x: i32, y: i32| -> f64 {
        let xc = x.clamp(0, w as i32 - 1) as usize;
        let yc = y.clamp(0, h as i32 - 1) as usize;
        gradient.value(xc, yc)
    };
    for y in 0..h as i32 {
        for x in 0..w as i32 {
            let gx = 0.5 * (at(x + 1, y) - at(x - 1, y));
            let gy = 0.5 * (at(x, y + 1) - at(x, y - 1));
            let mag = (gx * gx + gy * gy).sqrt();
            if mag <= 0.0 {
                continue;
            }
            let theta = gy.atan2(gx).rem_euclid(std::f64::consts::TAU);
            let fb = theta / std::f64::consts::TAU * SIFT_ORIENTATION_BINS as f64;
            let b0 = fb.floor() as usize % SIFT_ORIENTATION_BINS;
            let b1 = (b0 + 1) % SIFT_ORIENTATION_BINS;
            let frac = fb - fb.floor();
            let i = (y as usize) * w + x as usize;
            bins[b0 * w * h + i] += mag * (1.0 - frac);
            bins[b1 * w * h + i] += mag * frac;
        }
    }
    // SATs with a one-row/column zero border.
    let (sw, sh) = (w + 1, h + 1);
    let mut sat = vec![0f64; SIFT_ORIENTATION_BINS * sw * sh];
    for b in 0..SIFT_ORIENTATION_BINS {
        let plane = &bins[b * w * h..(b + 1) * w * h];
        let s = &mut sat[b * sw * sh..(b + 1) * sw * sh];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += plane[y * w + x];
                s[(y + 1) * sw + x + 1] = s[y * sw + x + 1] + row;
            }
        }
    }
    let box_sum = |b: usize, x0: i32, y0: i32, x1: i32, y1: i32| -> f64 {
        // half-open box [x0, x1) x [y0, y1), clipped to the raster
        let x0 = x0.clamp(0, w as i32) as usize;
        let x1 = x1.clamp(0, w as i32) as usize;
        let y0 = y0.clamp(0, h as i32) as usize;
        let y1 = y1.clamp(0, h as i32) as usize;
        if x1 <= x0 || y1 <= y0 {
            return 0.0;
        }
        let s = &sat[b * sw * sh..(b + 1) * sw * sh];
        // cancellation in the SAT differences can leave tiny negatives
        (s[y1 * sw + x1] - s[y0 * sw + x1] - s[y1 * sw + x0] + s[y0 * sw + x0]).max(0.0)
    };

    let mut field = DenseSiftField {
        width: w,
        height: h,
        cell_size: SIFT_CELL_SIZE,
        orientation_bins: SIFT_ORIENTATION_BINS,
        descriptors: vec![0.0; SIFT_DIM * w * h],
        valid: gradient.valid_mask().to_vec(),
    };
    let mut desc = [0f64; SIFT_DIM];
    for y in 0..h as i32 {
        for x in 0..w as i32 {
            let idx = (y as usize * w + x as usize) * SIFT_DIM;
            if !gradient.is_valid(x as usize, y as usize) {
                continue;
            }
            for cj in 0..SIFT_CELL_GRID as i32 {
                for ci in 0..SIFT_CELL_GRID as i32 {
                    let x0 = x - half + ci * SIFT_CELL_SIZE as i32;
                    let y0 = y - half + cj * SIFT_CELL_SIZE as i32;
                    let cell = (cj as usize * SIFT_CELL_GRID + ci as usize) * SIFT_ORIENTATION_BINS;
                    for b in 0..SIFT_ORIENTATION_BINS {
                        desc[cell + b] = box_sum(
                            b,
                            x0,
                            y0,
                            x0 + SIFT_CELL_SIZE as i32,
                            y0 + SIFT_CELL_SIZE as i32,
                        );
                    }
                }
            }
            normalize_descriptor(&mut desc, &mut field.descriptors[idx..idx + SIFT_DIM]);
        }
    }
    field
}

/// L2-normalize, clamp at 0.2, renormalize.
fn normalize_descriptor(raw: &mut [f64; SIFT_DIM], out: &mut [f32]) {
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 1e-12 {
        out.fill(0.0);
        return;
    }
    for v in raw.iter_mut() {
        *v = (*v / norm).min(SIFT_CLAMP as f64);
    }
    let norm2 = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    for (o, v) in out.iter_mut().zip(raw.iter()) {
        *o = (*v / norm2) as f32;
    }
}

// ---------------------------------------------------------------------------
// Texturedness mask

/// Valid pixels whose magnitude exceeds `fraction` of the 99th-percentile
/// magnitude.
pub fn textured_mask(gradient: &GradientImage, fraction: f64) -> Result<PixelMask> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(
            "textured_mask",
            format!("fraction must be in (0, 1), got {fraction}"),
        ));
    }
    let mut vals: Vec<f64> = gradient
        .values()
        .iter()
        .zip(gradient.valid_mask())
        .filter(|(_, v)| **v)
        .map(|(m, _)| *m)
        .collect();
    let mut mask = PixelMask::new(gradient.width, gradient.height, false);
    if vals.is_empty() {
        return Ok(mask);
    }
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let p99 = vals[((vals.len() - 1) as f64 * 0.99).round() as usize];
    let threshold = fraction * p99;
    for y in 0..gradient.height {
        for x in 0..gradient.width {
            if gradient.is_valid(x, y) && gradient.value(x, y) > threshold {
                mask.set(x, y, true);
            }
        }
    }
    Ok(mask)
}

// ---------------------------------------------------------------------------
// Descriptor pyramid

/// Descriptor pyramid for coarse-to-fine matching; level 0 is full
/// resolution. Built once per image and reused across flow computations.
#[derive(Debug, Clone)]
pub struct SiftPyramid {
    levels: Vec<DenseSiftField>,
}

impl SiftPyramid {
    pub fn build(base: &DenseSiftField, level_count: usize) -> Self {
        let mut levels = vec![base.clone()];
        while levels.len() < level_count {
            let prev = levels.last().unwrap();
            if prev.width < 8 || prev.height < 8 {
                break;
            }
            levels.push(downsample_field(prev));
        }
        Self { levels }
    }

    pub fn level(&self, l: usize) -> &DenseSiftField {
        &self.levels[l]
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }
}

/// 2x2 average of valid descriptors, renormalized.
fn downsample_field(f: &DenseSiftField) -> DenseSiftField {
    let w = (f.width + 1) / 2;
    let h = (f.height + 1) / 2;
    let mut out = DenseSiftField {
        width: w,
        height: h,
        cell_size: f.cell_size,
        orientation_bins: f.orientation_bins,
        descriptors: vec![0.0; SIFT_DIM * w * h],
        valid: vec![false; w * h],
    };
    let mut acc = [0f64; SIFT_DIM];
    for y in 0..h {
        for x in 0..w {
            acc.fill(0.0);
            let mut count = 0usize;
            for dy in 0..2 {
                for dx in 0..2 {
                    let (sx, sy) = (2 * x + dx, 2 * y + dy);
                    if sx < f.width && sy < f.height && f.is_valid(sx, sy) {
                        for (a, d) in acc.iter_mut().zip(f.descriptor(sx, sy)) {
                            *a += *d as f64;
                        }
                        count += 1;
                    }
                }
            }
            if count == 0 {
                continue;
            }
            for a in acc.iter_mut() {
                *a /= count as f64;
            }
            let idx = (y * w + x) * SIFT_DIM;
            let mut tmp = acc;
            normalize_descriptor(&mut tmp, &mut out.descriptors[idx..idx + SIFT_DIM]);
            out.valid[y * w + x] = true;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Flow matcher

/// Dense integer flow from `source` to `target`: for each masked source pixel
/// p, a displacement w so that target(p + w) matches source(p). Minimizes a
/// truncated-L1 descriptor data term plus truncated-L1 smoothness plus a
/// small displacement-magnitude penalty, coarse-to-fine with min-sum message
/// passing.
pub fn sift_flow(
    source: &DenseSiftField,
    target: &DenseSiftField,
    mask: &PixelMask,
    params: &FlowParams,
) -> Result<FlowField> {
    let src = SiftPyramid::build(source, params.pyramid_levels);
    let tgt = SiftPyramid::build(target, params.pyramid_levels);
    sift_flow_pyramids(&src, &tgt, mask, params)
}

/// `sift_flow` on prebuilt descriptor pyramids (the query-side pyramid is
/// shared across all rendered views).
pub fn sift_flow_pyramids(
    source: &SiftPyramid,
    target: &SiftPyramid,
    mask: &PixelMask,
    params: &FlowParams,
) -> Result<FlowField> {
    params.validate()?;
    let base_src = source.level(0);
    let base_tgt = target.level(0);
    if base_src.width != base_tgt.width
        || base_src.height != base_tgt.height
        || mask.width != base_src.width
        || mask.height != base_src.height
    {
        return Err(Error::invalid(
            "sift_flow",
            "source, target, and mask dimensions must match",
        ));
    }
    if mask.count() == 0 {
        return Ok(FlowField::new_invalid(base_src.width, base_src.height));
    }
    let levels = source.level_count().min(target.level_count());

    let mut flow: Option<FlowField> = None;
    for l in (0..levels).rev() {
        let s = source.level(l);
        let t = target.level(l);
        let (centers_u, centers_v): (Vec<i32>, Vec<i32>) = match &flow {
            None => {
                // Seed the coarsest window with the best constant shift so
                // displacements larger than the coarse search radius stay
                // reachable; BP then refines the spatial variation around it.
                let (su, sv) = best_constant_shift(s, t, params.data_truncation as f32);
                (vec![su; s.width * s.height], vec![sv; s.width * s.height])
            }
            Some(coarse) => {
                // Nearest-pixel upsampling of the coarser solution, doubled.
                let mut cu = vec![0; s.width * s.height];
                let mut cv = vec![0; s.width * s.height];
                for y in 0..s.height {
                    for x in 0..s.width {
                        let (cx, cy) =
                            ((x / 2).min(coarse.width - 1), (y / 2).min(coarse.height - 1));
                        let i = y * s.width + x;
                        cu[i] = 2 * coarse.u[cy * coarse.width + cx];
                        cv[i] = 2 * coarse.v[cy * coarse.width + cx];
                    }
                }
                (cu, cv)
            }
        };
        let radius = if l == levels - 1 {
            params.coarse_radius
        } else {
            params.fine_radius
        };
        flow = Some(solve_level(s, t, &centers_u, &centers_v, radius, params));
    }
    let mut flow = flow.unwrap();

    // Validity at full resolution: masked pixels whose displacement lands
    // inside the target raster.
    for y in 0..flow.height {
        for x in 0..flow.width {
            let i = y * flow.width + x;
            let (tx, ty) = (x as i64 + flow.u[i] as i64, y as i64 + flow.v[i] as i64);
            let inside =
                tx >= 0 && ty >= 0 && (tx as usize) < flow.width && (ty as usize) < flow.height;
            flow.valid[i] = mask.get(x, y) && inside;
        }
    }
    Ok(flow)
}

/// Exhaustive search for the constant integer shift minimizing the mean
/// truncated-L1 descriptor distance over (a subsample of) the pixels that
/// carry a nonzero source descriptor. Shifts up to a third of each image
/// dimension are considered; unmatched pixels pay the truncation value.
fn best_constant_shift(source: &DenseSiftField, target: &DenseSiftField, trunc: f32) -> (i32, i32) {
    let (w, h) = (source.width, source.height);
    let mut pts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if source.is_valid(x, y) && source.descriptor(x, y).iter().any(|&v| v > 0.0) {
                pts.push((x, y));
            }
        }
    }
    if pts.is_empty() {
        return (0, 0);
    }
    let stride = pts.len().div_ceil(400);
    let pts: Vec<_> = pts.into_iter().step_by(stride).collect();
    let ru = (w as i32 / 3).max(4);
    let rv = (h as i32 / 3).max(4);
    let mut best = (f32::INFINITY, 0i32, 0i32);
    for dv in -rv..=rv {
        for du in -ru..=ru {
            let mut cost = 0.0f32;
            for &(x, y) in &pts {
                let (tx, ty) = (x as i64 + du as i64, y as i64 + dv as i64);
                cost += if tx >= 0
                    && ty >= 0
                    && (tx as usize) < w
                    && (ty as usize) < h
                    && target.is_valid(tx as usize, ty as usize)
                {
                    let a = source.descriptor(x, y);
                    let b = target.descriptor(tx as usize, ty as usize);
                    a.iter()
                        .zip(b)
                        .map(|(p, q)| (p - q).abs())
                        .sum::<f32>()
                        .min(trunc)
                } else {
                    trunc
                };
            }
            if cost < best.0 {
                best = (cost, du, dv);
            }
        }
    }
    (best.1, best.2)
}

/// Min-sum loopy belief propagation on the 4-connected grid over the label
/// set {center + (du, dv) : |du|, |dv| <= radius}. Messages use the
/// truncated-L1 distance transform so each update is linear in the label
/// count.
fn solve_level(
    source: &DenseSiftField,
    target: &DenseSiftField,
    centers_u: &[i32],
    centers_v: &[i32],
    radius: i32,
    params: &FlowParams,
) -> FlowField {
    let (w, h) = (source.width, source.height);
    let side = (2 * radius + 1) as usize;
    let nl = side * side;
    let alpha = params.smoothness_weight as f32;
    let trunc_s = params.smoothness_truncation as f32;
    let trunc_d = params.data_truncation as f32;
    let eta = params.displacement_penalty as f32;

    // Per-pixel data costs.
    let mut data = vec![0f32; w * h * nl];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let costs = &mut data[i * nl..(i + 1) * nl];
            let src_ok = source.is_valid(x, y);
            let d_src = source.descriptor(x, y);
            for (li, cost) in costs.iter_mut().enumerate() {
                let du = (li % side) as i32 - radius;
                let dv = (li / side) as i32 - radius;
                let (wu, wv) = (centers_u[i] + du, centers_v[i] + dv);
                let penalty = eta * (wu.abs() + wv.abs()) as f32;
                if !src_ok {
                    *cost = penalty;
                    continue;
                }
                let (tx, ty) = (x as i64 + wu as i64, y as i64 + wv as i64);
                let matchable = tx >= 0
                    && ty >= 0
                    && (tx as usize) < w
                    && (ty as usize) < h
                    && target.is_valid(tx as usize, ty as usize);
                *cost = if matchable {
                    let d_tgt = target.descriptor(tx as usize, ty as usize);
                    let l1: f32 = d_src
                        .iter()
                        .zip(d_tgt)
                        .map(|(a, b)| (a - b).abs())
                        .sum();
                    l1.min(trunc_d) + penalty
                } else {
                    trunc_d + penalty
                };
            }
        }
    }

    // Messages from each direction (left, right, up, down neighbor), stored
    // per pixel as four contiguous label vectors so one update touches a
    // single cache-resident block. Each iteration runs four sequential
    // raster sweeps updating messages in place, so information propagates
    // across the whole grid per sweep rather than one pixel per iteration.
    let mut msgs = vec![0f32; w * h * 4 * nl];
    let offsets: [(i64, i64); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
    let mut hbuf = vec![0f32; nl];

    for _ in 0..params.iterations {
        for (dir, (ox, oy)) in offsets.iter().enumerate() {
            // Sweep order follows the message direction: messages from the
            // left are computed left to right, and so on, so each message
            // already incorporates the updated one behind it.
            let xs: Vec<i64> = if *ox > 0 {
                (0..w as i64).rev().collect()
            } else {
                (0..w as i64).collect()
            };
            let ys: Vec<i64> = if *oy > 0 {
                (0..h as i64).rev().collect()
            } else {
                (0..h as i64).collect()
            };
            for &y in &ys {
                for &x in &xs {
                    let p = (y as usize) * w + x as usize;
                    let (qx, qy) = (x + ox, y + oy);
                    if qx < 0 || qy < 0 || qx as usize >= w || qy as usize >= h {
                        msgs[(p * 4 + dir) * nl..(p * 4 + dir + 1) * nl].fill(0.0);
                        continue;
                    }
                    // Message arriving at p from q = p + (ox, oy): q's data
                    // cost plus q's other incoming messages, excluding the
                    // one q received from p itself (the opposite of `dir`).
                    let q = (qy as usize) * w + qx as usize;
                    let base = &data[q * nl..(q + 1) * nl];
                    let qm = &msgs[q * 4 * nl..(q + 1) * 4 * nl];
                    let (m0, m1, m2) = match dir ^ 1 {
                        0 => (&qm[nl..2 * nl], &qm[2 * nl..3 * nl], &qm[3 * nl..]),
                        1 => (&qm[..nl], &qm[2 * nl..3 * nl], &qm[3 * nl..]),
                        2 => (&qm[..nl], &qm[nl..2 * nl], &qm[3 * nl..]),
                        _ => (&qm[..nl], &qm[nl..2 * nl], &qm[2 * nl..3 * nl]),
                    };
                    for j in 0..nl {
                        hbuf[j] = base[j] + m0[j] + m1[j] + m2[j];
                    }
                    // Label grids at p and q share the same offset indexing;
                    // differing window centers shift the effective
                    // displacement, which the truncated smoothness absorbs.
                    truncated_l1_dt(&mut hbuf, side, alpha, trunc_s);
                    let min = hbuf.iter().cloned().fold(f32::INFINITY, f32::min);
                    let slot = &mut msgs[(p * 4 + dir) * nl..(p * 4 + dir + 1) * nl];
                    for (s, v) in slot.iter_mut().zip(hbuf.iter()) {
                        *s = v - min;
                    }
                }
            }
        }
    }

    // Beliefs and argmin labels.
    let mut flow = FlowField::new_invalid(w, h);
    for i in 0..w * h {
        let mut best = f32::INFINITY;
        let mut best_l = 0usize;
        let pm = &msgs[i * 4 * nl..(i + 1) * 4 * nl];
        for li in 0..nl {
            let b = data[i * nl + li]
                + pm[li]
                + pm[nl + li]
                + pm[2 * nl + li]
                + pm[3 * nl + li];
            if b < best {
                best = b;
                best_l = li;
            }
        }
        flow.u[i] = centers_u[i] + (best_l % side) as i32 - radius;
        flow.v[i] = centers_v[i] + (best_l / side) as i32 - radius;
        flow.valid[i] = true;
    }
    flow
}

/// In-place min-convolution with the truncated L1 penalty
/// min(alpha * |du| , trunc) + min(alpha * |dv|, trunc) over a side x side
/// label grid: a separable lower-envelope pass per axis, each clamped at its
/// row minimum plus the truncation.
fn truncated_l1_dt(buf: &mut [f32], side: usize, alpha: f32, trunc: f32) {
    // horizontal (du) axis within each row
    for row in buf.chunks_mut(side) {
        dt_1d(row, 1, side, alpha, trunc);
    }
    // vertical (dv) axis
    for col in 0..side {
        dt_1d(&mut buf[col..], side, side, alpha, trunc);
    }
}

fn dt_1d(buf: &mut [f32], stride: usize, n: usize, alpha: f32, trunc: f32) {
    let mut minv = f32::INFINITY;
    for i in 0..n {
        minv = minv.min(buf[i * stride]);
    }
    for i in 1..n {
        let prev = buf[(i - 1) * stride] + alpha;
        if prev < buf[i * stride] {
            buf[i * stride] = prev;
        }
    }
    for i in (0..n - 1).rev() {
        let nextv = buf[(i + 1) * stride] + alpha;
        if nextv < buf[i * stride] {
            buf[i * stride] = nextv;
        }
    }
    let cap = minv + trunc;
    for i in 0..n {
        if buf[i * stride] > cap {
            buf[i * stride] = cap;
        }
    }
}

/// Objective value of a flow field at full resolution: truncated-L1 data
/// plus displacement penalty over valid pixels, truncated-L1 smoothness over
/// valid 4-neighbor pairs. The quantity `sift_flow` minimizes, exposed for
/// verification.
pub fn flow_energy(
    source: &DenseSiftField,
    target: &DenseSiftField,
    flow: &FlowField,
    params: &FlowParams,
) -> f64 {
    let (w, h) = (flow.width, flow.height);
    let mut e = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let Some((u, v)) = flow.get(x, y) else { continue };
            e += params.displacement_penalty * (u.abs() + v.abs()) as f64;
            let (tx, ty) = (x as i64 + u as i64, y as i64 + v as i64);
            let matchable = source.is_valid(x, y)
                && tx >= 0
                && ty >= 0
                && (tx as usize) < w
                && (ty as usize) < h
                && target.is_valid(tx as usize, ty as usize);
            if matchable {
                let l1: f64 = source
                    .descriptor(x, y)
                    .iter()
                    .zip(target.descriptor(tx as usize, ty as usize))
                    .map(|(a, b)| (a - b).abs() as f64)
                    .sum();
                e += l1.min(params.data_truncation);
            } else if source.is_valid(x, y) {
                e += params.data_truncation;
            }
            for (nx, ny) in [(x + 1, y), (x, y + 1)] {
                if nx >= w || ny >= h {
                    continue;
                }
                let Some((u2, v2)) = flow.get(nx, ny) else { continue };
                e += (params.smoothness_weight * (u - u2).abs() as f64)
                    .min(params.smoothness_truncation);
                e += (params.smoothness_weight * (v - v2).abs() as f64)
                    .min(params.smoothness_truncation);
            }
        }
    }
    e
}

// ---------------------------------------------------------------------------
// Bidirectional consistency

/// Pixel pairs (p in forward's raster, q in backward's raster) connected by
/// two (nearly) opposite flow vectors: q = p + forward(p) with
/// ‖forward(p) + backward(q)‖ <= tol, plus the mirrored condition, so the
/// result is symmetric in the two fields. Sorted and deduplicated.
pub fn consistent_pairs(
    forward: &FlowField,
    backward: &FlowField,
    tol: f64,
) -> Vec<((usize, usize), (usize, usize))> {
    let mut set: BTreeSet<((usize, usize), (usize, usize))> = BTreeSet::new();
    let check = |set: &mut BTreeSet<_>, f: &FlowField, b: &FlowField, swap: bool| {
        for y in 0..f.height {
            for x in 0..f.width {
                let Some((u, v)) = f.get(x, y) else { continue };
                let (qx, qy) = (x as i64 + u as i64, y as i64 + v as i64);
                if qx < 0 || qy < 0 || qx as usize >= b.width || qy as usize >= b.height {
                    continue;
                }
                let Some((bu, bv)) = b.get(qx as usize, qy as usize) else { continue };
                let residual = (((u + bu) as f64).powi(2) + ((v + bv) as f64).powi(2)).sqrt();
                if residual <= tol {
                    let pair = if swap {
                        ((qx as usize, qy as usize), (x, y))
                    } else {
                        ((x, y), (qx as usize, qy as usize))
                    };
                    set.insert(pair);
                }
            }
        }
    };
    check(&mut set, forward, backward, false);
    check(&mut set, backward, forward, true);
    set.into_iter().collect()
}

// ---------------------------------------------------------------------------
// Lifting to 3D

/// Backprojects the render-side pixel of each pair through its depth to a
/// world point; pairs at invalid depth pixels are dropped.
pub fn lift_to_3d(
    pairs: &[((usize, usize), (usize, usize))],
    render: &RenderOutput,
    k: &CameraIntrinsics,
    pose: &CameraPose,
    view_index: usize,
) -> Vec<Correspondence2D3D> {
    pairs
        .iter()
        .filter_map(|&((qx, qy), (rx, ry))| {
            let depth = render.depth_map.get(rx, ry)?;
            let world = backproject_pixel(rx as f64, ry as f64, depth, k, pose);
            Some(Correspondence2D3D {
                pixel: Vector2::new(qx as f64, qy as f64),
                world,
                view_index,
            })
        })
        .collect()
}

/// Correspondence list as CSV lines: x, y, X, Y, Z, view-index.
pub fn correspondences_to_csv(corrs: &[Correspondence2D3D]) -> String {
    let mut s = String::from("x,y,X,Y,Z,view_index\n");
    for c in corrs {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.pixel.x, c.pixel.y, c.world.x, c.world.y, c.world.z, c.view_index
        ));
    }
    s
}
