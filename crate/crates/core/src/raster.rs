//! Per-pixel raster types shared by the renderer, gradient computation and
//! matcher, together with their exchange formats.
//!
//! Exchange formats: PGM (8/16-bit) for images and a plain-text float raster
//! ("width height" header, row-major values, `nan` marking invalid pixels)
//! for depth/normal/gradient data.

use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// Per-pixel camera-frame unit normals with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    normals: Vec<Vector3<f64>>,
    valid: Vec<bool>,
}

impl NormalMap {
    pub fn new_invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            normals: vec![Vector3::zeros(); width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn set(&mut self, x: usize, y: usize, n: Vector3<f64>) -> Result<()> {
        if (n.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(
                "NormalMap",
                format!("normal at ({x},{y}) has length {}", n.norm()),
            ));
        }
        let i = y * self.width + x;
        self.normals[i] = n;
        self.valid[i] = true;
        Ok(())
    }

    pub fn invalidate(&mut self, x: usize, y: usize) {
        let i = y * self.width + x;
        self.valid[i] = false;
        self.normals[i] = Vector3::zeros();
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<&Vector3<f64>> {
        let i = y * self.width + x;
        self.valid[i].then(|| &self.normals[i])
    }

    /// Raw normal, zero where invalid.
    #[inline]
    pub fn raw(&self, x: usize, y: usize) -> &Vector3<f64> {
        &self.normals[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Per-pixel depth along the optical axis, positive where valid.
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    depths: Vec<f64>,
    valid: Vec<bool>,
}

impl PartialEq for DepthMap {
    fn eq(&self, other: &Self) -> bool {
        // invalid pixels store NaN; compare them by validity alone
        self.width == other.width
            && self.height == other.height
            && self.valid == other.valid
            && self
                .depths
                .iter()
                .zip(&other.depths)
                .zip(&self.valid)
                .all(|((a, b), v)| !v || a == b)
    }
}

impl DepthMap {
    pub fn new_invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depths: vec![f64::NAN; width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn set(&mut self, x: usize, y: usize, depth: f64) -> Result<()> {
        if !(depth > 0.0) {
            return Err(Error::invalid(
                "DepthMap",
                format!("depth at ({x},{y}) must be positive, got {depth}"),
            ));
        }
        let i = y * self.width + x;
        self.depths[i] = depth;
        self.valid[i] = true;
        Ok(())
    }

    pub fn invalidate(&mut self, x: usize, y: usize) {
        let i = y * self.width + x;
        self.valid[i] = false;
        self.depths[i] = f64::NAN;
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.depths[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Nonnegative gradient magnitudes; invalid pixels carry magnitude 0.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientImage {
    pub width: usize,
    pub height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl GradientImage {
    pub fn new_invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn set(&mut self, x: usize, y: usize, magnitude: f64) -> Result<()> {
        if !(magnitude >= 0.0) || !magnitude.is_finite() {
            return Err(Error::invalid(
                "GradientImage",
                format!("magnitude at ({x},{y}) must be finite and >= 0, got {magnitude}"),
            ));
        }
        let i = y * self.width + x;
        self.values[i] = magnitude;
        self.valid[i] = true;
        Ok(())
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    /// Magnitude; 0 on invalid pixels by construction.
    #[inline]
    pub fn value(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Pair of small 2D derivative stencils, one per axis. Coefficients sum to
/// zero so the response to constants vanishes.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeKernel {
    /// (dx, dy, coefficient) taps of the x-derivative stencil.
    pub taps_x: Vec<(i32, i32, f64)>,
    /// Taps of the y-derivative stencil.
    pub taps_y: Vec<(i32, i32, f64)>,
}

impl DerivativeKernel {
    pub fn new(taps_x: Vec<(i32, i32, f64)>, taps_y: Vec<(i32, i32, f64)>) -> Result<Self> {
        for (name, taps) in [("x", &taps_x), ("y", &taps_y)] {
            let sum: f64 = taps.iter().map(|t| t.2).sum();
            if sum.abs() > 1e-12 {
                return Err(Error::invalid(
                    "DerivativeKernel",
                    format!("{name}-stencil coefficients sum to {sum}, expected 0"),
                ));
            }
        }
        Ok(Self { taps_x, taps_y })
    }

    /// 1D central difference [-0.5, 0, 0.5] per axis.
    pub fn central_difference() -> Self {
        Self {
            taps_x: vec![(-1, 0, -0.5), (1, 0, 0.5)],
            taps_y: vec![(0, -1, -0.5), (0, 1, 0.5)],
        }
    }
}

impl Default for DerivativeKernel {
    fn default() -> Self {
        Self::central_difference()
    }
}

/// Unit light direction on the sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LightDirection(Vector3<f64>);

impl LightDirection {
    pub fn new(v: Vector3<f64>) -> Result<Self> {
        if (v.norm() - 1.0).abs() >= 1e-9 {
            return Err(Error::invalid(
                "LightDirection",
                format!("length {} is not 1", v.norm()),
            ));
        }
        Ok(Self(v))
    }

    pub fn vector(&self) -> &Vector3<f64> {
        &self.0
    }
}

// ---------------------------------------------------------------------------
// Plain-text float raster format

fn write_text_raster(path: &Path, width: usize, height: usize, rows: &[Vec<f64>]) -> Result<()> {
    use std::fmt::Write as _;
    let mut s = format!("{width} {height}\n");
    for row in rows {
        let mut first = true;
        for v in row {
            if !first {
                s.push(' ');
            }
            first = false;
            if v.is_nan() {
                s.push_str("nan");
            } else {
                write!(s, "{v}").unwrap();
            }
        }
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn read_text_raster(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let text = std::fs::read_to_string(path)?;
    let mut tokens = text.split_whitespace();
    let what = || path.display().to_string();
    let width: usize = tokens
        .next()
        .ok_or_else(|| Error::parse(what(), "missing width"))?
        .parse()
        .map_err(|e| Error::parse(what(), format!("bad width: {e}")))?;
    let height: usize = tokens
        .next()
        .ok_or_else(|| Error::parse(what(), "missing height"))?
        .parse()
        .map_err(|e| Error::parse(what(), format!("bad height: {e}")))?;
    let mut values = Vec::with_capacity(width * height);
    for tok in tokens {
        let v = if tok.eq_ignore_ascii_case("nan") {
            f64::NAN
        } else {
            tok.parse()
                .map_err(|e| Error::parse(what(), format!("bad value {tok}: {e}")))?
        };
        values.push(v);
    }
    if values.len() % (width * height) != 0 {
        return Err(Error::parse(
            what(),
            format!(
                "expected a multiple of {} values, got {}",
                width * height,
                values.len()
            ),
        ));
    }
    Ok((width, height, values))
}

impl DepthMap {
    pub fn write_text(&self, path: &Path) -> Result<()> {
        let rows: Vec<Vec<f64>> = (0..self.height)
            .map(|y| (0..self.width).map(|x| self.depths[y * self.width + x]).collect())
            .collect();
        write_text_raster(path, self.width, self.height, &rows)
    }

    pub fn read_text(path: &Path) -> Result<Self> {
        let (width, height, values) = read_text_raster(path)?;
        if values.len() != width * height {
            return Err(Error::parse(
                path.display().to_string(),
                "depth raster must hold exactly width*height values",
            ));
        }
        let mut map = Self::new_invalid(width, height);
        for (i, v) in values.iter().enumerate() {
            if v.is_finite() {
                map.set(i % width, i / width, *v)?;
            }
        }
        Ok(map)
    }
}

impl GradientImage {
    pub fn write_text(&self, path: &Path) -> Result<()> {
        let rows: Vec<Vec<f64>> = (0..self.height)
            .map(|y| {
                (0..self.width)
                    .map(|x| {
                        if self.is_valid(x, y) {
                            self.value(x, y)
                        } else {
                            f64::NAN
                        }
                    })
                    .collect()
            })
            .collect();
        write_text_raster(path, self.width, self.height, &rows)
    }

    pub fn read_text(path: &Path) -> Result<Self> {
        let (width, height, values) = read_text_raster(path)?;
        if values.len() != width * height {
            return Err(Error::parse(
                path.display().to_string(),
                "gradient raster must hold exactly width*height values",
            ));
        }
        let mut img = Self::new_invalid(width, height);
        for (i, v) in values.iter().enumerate() {
            if v.is_finite() {
                img.set(i % width, i / width, *v)?;
            }
        }
        Ok(img)
    }

    /// PGM export with magnitudes normalized to the 0..255 range.
    pub fn write_pgm_normalized(&self, path: &Path) -> Result<()> {
        let max = self.values.iter().cloned().fold(0.0f64, f64::max).max(1e-300);
        let bytes: Vec<u8> = self
            .values
            .iter()
            .map(|v| ((v / max) * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        write_pgm8(path, self.width, self.height, &bytes)
    }
}

impl NormalMap {
    /// Three stacked rasters (x, y, z components), nan where invalid.
    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut rows = Vec::with_capacity(self.height * 3);
        for comp in 0..3 {
            for y in 0..self.height {
                rows.push(
                    (0..self.width)
                        .map(|x| {
                            let i = y * self.width + x;
                            if self.valid[i] {
                                self.normals[i][comp]
                            } else {
                                f64::NAN
                            }
                        })
                        .collect(),
                );
            }
        }
        write_text_raster(path, self.width, self.height, &rows)
    }

    pub fn read_text(path: &Path) -> Result<Self> {
        let (width, height, values) = read_text_raster(path)?;
        if values.len() != 3 * width * height {
            return Err(Error::parse(
                path.display().to_string(),
                "normal raster must hold exactly 3*width*height values",
            ));
        }
        let plane = width * height;
        let mut map = Self::new_invalid(width, height);
        for i in 0..plane {
            let n = Vector3::new(values[i], values[plane + i], values[2 * plane + i]);
            if n.iter().all(|v| v.is_finite()) {
                map.set(i % width, i / width, n.normalize())?;
            }
        }
        Ok(map)
    }

    /// PGM export of the z component via the (n+1)/2 byte mapping.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .normals
            .iter()
            .zip(&self.valid)
            .map(|(n, valid)| {
                if *valid {
                    (((n.z + 1.0) / 2.0) * 255.0).round().clamp(0.0, 255.0) as u8
                } else {
                    0
                }
            })
            .collect();
        write_pgm8(path, self.width, self.height, &bytes)
    }
}

// ---------------------------------------------------------------------------
// PGM

/// 8-bit grayscale intensity image, used as the query-photograph input.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl IntensityImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::invalid(
                "IntensityImage",
                format!("expected {} pixels, got {}", width * height, pixels.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

pub fn write_pgm8(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_pgm16(path: &Path, width: usize, height: usize, values: &[u16]) -> Result<()> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for v in values {
        out.extend_from_slice(&v.to_be_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads an 8- or 16-bit binary PGM into an intensity image.
pub fn read_pgm(path: &Path) -> Result<IntensityImage> {
    fn next_token(data: &[u8], pos: &mut usize) -> Option<String> {
        // skip whitespace and comments
        loop {
            while *pos < data.len() && data[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < data.len() && data[*pos] == b'#' {
                while *pos < data.len() && data[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        (start != *pos).then(|| String::from_utf8_lossy(&data[start..*pos]).into_owned())
    }

    let data = std::fs::read(path)?;
    let what = || path.display().to_string();
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        next_token(&data, &mut pos).ok_or_else(|| Error::parse(what(), "truncated header"))
    };
    let magic = token()?;
    if magic != "P5" {
        return Err(Error::parse(what(), format!("unsupported magic {magic}")));
    }
    let width: usize = token()?
        .parse()
        .map_err(|e| Error::parse(what(), format!("bad width: {e}")))?;
    let height: usize = token()?
        .parse()
        .map_err(|e| Error::parse(what(), format!("bad height: {e}")))?;
    let maxval: u32 = token()?
        .parse()
        .map_err(|e| Error::parse(what(), format!("bad maxval: {e}")))?;
    drop(token);
    pos += 1; // single whitespace after maxval
    let n = width * height;
    let pixels = if maxval < 256 {
        if data.len() < pos + n {
            return Err(Error::parse(what(), "truncated pixel data"));
        }
        data[pos..pos + n].iter().map(|b| *b as f64).collect()
    } else {
        if data.len() < pos + 2 * n {
            return Err(Error::parse(what(), "truncated pixel data"));
        }
        (0..n)
            .map(|i| u16::from_be_bytes([data[pos + 2 * i], data[pos + 2 * i + 1]]) as f64)
            .collect()
    };
    IntensityImage::new(width, height, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_map_rejects_non_unit() {
        let mut m = NormalMap::new_invalid(4, 4);
        assert!(m.set(0, 0, Vector3::new(0.0, 0.0, 2.0)).is_err());
        assert!(m.set(0, 0, Vector3::new(0.0, 0.0, -1.0)).is_ok());
        assert!(m.is_valid(0, 0));
        assert!(!m.is_valid(1, 0));
    }

    #[test]
    fn depth_map_rejects_non_positive() {
        let mut m = DepthMap::new_invalid(2, 2);
        assert!(m.set(0, 0, 0.0).is_err());
        assert!(m.set(0, 0, -1.0).is_err());
        assert!(m.set(0, 0, 3.5).is_ok());
        assert_eq!(m.get(0, 0), Some(3.5));
    }

    #[test]
    fn gradient_invalid_pixels_are_zero() {
        let g = GradientImage::new_invalid(3, 3);
        assert_eq!(g.value(1, 1), 0.0);
        assert!(!g.is_valid(1, 1));
    }

    #[test]
    fn kernel_zero_sum_enforced() {
        assert!(DerivativeKernel::new(vec![(0, 0, 1.0)], vec![(0, 0, 0.0)]).is_err());
        let k = DerivativeKernel::central_difference();
        let sx: f64 = k.taps_x.iter().map(|t| t.2).sum();
        assert!(sx.abs() < 1e-15);
    }

    #[test]
    fn light_direction_must_be_unit() {
        assert!(LightDirection::new(Vector3::new(1.0, 1.0, 0.0)).is_err());
        assert!(LightDirection::new(Vector3::new(0.0, 0.0, 1.0)).is_ok());
    }

    #[test]
    fn text_raster_round_trip_with_nan() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.txt");
        let mut m = DepthMap::new_invalid(3, 2);
        m.set(0, 0, 1.25).unwrap();
        m.set(2, 1, 7.5).unwrap();
        m.write_text(&p).unwrap();
        let m2 = DepthMap::read_text(&p).unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.pgm");
        let bytes: Vec<u8> = (0..12).collect();
        write_pgm8(&p, 4, 3, &bytes).unwrap();
        let img = read_pgm(&p).unwrap();
        assert_eq!(img.width, 4);
        assert_eq!(img.height, 3);
        assert_eq!(img.get(3, 2), 11.0);
    }
}
