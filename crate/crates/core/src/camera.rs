//! Camera models: intrinsics, extrinsic pose and the composed 3x4 projection.
//!
//! Conventions used throughout the crate:
//! - extrinsics are world→camera: `x_cam = R * x_world + t`
//! - pixel centers sit at integer coordinates, origin top-left, x right, y down

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Rotation3, Vector2, Vector3};

use crate::error::{Error, Result};

/// Pinhole intrinsics in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub skew: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        skew: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(fx > 0.0) || !(fy > 0.0) {
            return Err(Error::invalid(
                "CameraIntrinsics",
                format!("focal lengths must be positive, got fx={fx}, fy={fy}"),
            ));
        }
        if width < 1 || height < 1 {
            return Err(Error::invalid(
                "CameraIntrinsics",
                format!("image dimensions must be >= 1, got {width}x{height}"),
            ));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            skew,
            width,
            height,
        })
    }

    /// Upper-triangular calibration matrix K.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, self.skew, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }
}

/// Rigid world→camera transform.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

const ROTATION_TOL: f64 = 1e-9;

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho >= ROTATION_TOL {
            return Err(Error::invalid(
                "CameraPose",
                format!("rotation is not orthonormal, |R'R - I| = {ortho:.3e}"),
            ));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() >= ROTATION_TOL {
            return Err(Error::invalid(
                "CameraPose",
                format!("rotation determinant is {det}, expected +1"),
            ));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Re-orthonormalizes a nearly-orthonormal matrix before construction.
    pub fn from_nearly_orthonormal(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let r = Rotation3::from_matrix(&rotation);
        Self::new(*r.matrix(), translation)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// World point into the camera frame.
    pub fn transform(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    /// Camera center in world coordinates, `-R' t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

/// 3x4 projection matrix, defined up to nonzero scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    m: Matrix3x4<f64>,
}

impl ProjectionMatrix {
    pub fn new(m: Matrix3x4<f64>) -> Result<Self> {
        let norm = m.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::invalid("ProjectionMatrix", "matrix is zero or non-finite"));
        }
        let scaled = m / norm;
        let left: Matrix3<f64> = scaled.fixed_view::<3, 3>(0, 0).into_owned();
        let svd = left.svd(false, false);
        let smallest = svd.singular_values[2];
        if smallest <= 1e-10 {
            return Err(Error::invalid(
                "ProjectionMatrix",
                format!("left 3x3 block is rank deficient (sigma_min = {smallest:.3e})"),
            ));
        }
        Ok(Self { m })
    }

    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.m
    }

    pub fn left_block(&self) -> Matrix3<f64> {
        self.m.fixed_view::<3, 3>(0, 0).into_owned()
    }
}

/// Whether a projected point lies in front of or behind the camera.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthSign {
    Positive,
    Negative,
}

/// Standard pinhole composition P = K [R | t].
pub fn compose_projection(k: &CameraIntrinsics, pose: &CameraPose) -> ProjectionMatrix {
    let km = k.matrix();
    let mut m = Matrix3x4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(km * pose.rotation()));
    m.fixed_view_mut::<3, 1>(0, 3)
        .copy_from(&(km * pose.translation()));
    ProjectionMatrix::new(m).expect("valid intrinsics and pose compose to a rank-3 projection")
}

/// Projects a world point to Euclidean pixel coordinates.
///
/// The depth sign reports whether the point is in front of the camera, taking
/// the overall sign of P into account via the determinant of its left block.
pub fn project_point(p: &ProjectionMatrix, x: &Vector3<f64>) -> Result<(Vector2<f64>, DepthSign)> {
    let m = p.matrix();
    let w = m[(2, 0)] * x.x + m[(2, 1)] * x.y + m[(2, 2)] * x.z + m[(2, 3)];
    let scale = m.norm();
    if w.abs() < 1e-12 * scale {
        return Err(Error::AtInfinity);
    }
    let u = m[(0, 0)] * x.x + m[(0, 1)] * x.y + m[(0, 2)] * x.z + m[(0, 3)];
    let v = m[(1, 0)] * x.x + m[(1, 1)] * x.y + m[(1, 2)] * x.z + m[(1, 3)];
    let sign = if w > 0.0 {
        DepthSign::Positive
    } else {
        DepthSign::Negative
    };
    Ok((Vector2::new(u / w, v / w), sign))
}

/// Plain-text key-value serialization of a camera (intrinsics + pose).
pub fn write_camera_file(
    path: &Path,
    k: &CameraIntrinsics,
    pose: &CameraPose,
) -> Result<()> {
    std::fs::write(path, camera_to_string(k, pose))?;
    Ok(())
}

pub fn camera_to_string(k: &CameraIntrinsics, pose: &CameraPose) -> String {
    let mut s = String::new();
    let r = pose.rotation();
    write!(
        s,
        "rotation {} {} {} {} {} {} {} {} {}\n",
        r[(0, 0)],
        r[(0, 1)],
        r[(0, 2)],
        r[(1, 0)],
        r[(1, 1)],
        r[(1, 2)],
        r[(2, 0)],
        r[(2, 1)],
        r[(2, 2)]
    )
    .unwrap();
    let t = pose.translation();
    writeln!(s, "translation {} {} {}", t.x, t.y, t.z).unwrap();
    writeln!(s, "fx {}", k.fx).unwrap();
    writeln!(s, "fy {}", k.fy).unwrap();
    writeln!(s, "cx {}", k.cx).unwrap();
    writeln!(s, "cy {}", k.cy).unwrap();
    writeln!(s, "skew {}", k.skew).unwrap();
    writeln!(s, "width {}", k.width).unwrap();
    writeln!(s, "height {}", k.height).unwrap();
    s
}

pub fn read_camera_file(path: &Path) -> Result<(CameraIntrinsics, CameraPose)> {
    let text = std::fs::read_to_string(path)?;
    parse_camera(&text).map_err(|reason| Error::parse(path.display().to_string(), reason))
}

pub fn parse_camera(text: &str) -> std::result::Result<(CameraIntrinsics, CameraPose), String> {
    let mut rotation: Option<Vec<f64>> = None;
    let mut translation: Option<Vec<f64>> = None;
    let mut fields = std::collections::HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().ok_or("empty line")?;
        let vals: Vec<f64> = parts
            .map(|v| v.parse::<f64>().map_err(|e| format!("bad number {v}: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        match key {
            "rotation" => {
                if vals.len() != 9 {
                    return Err(format!("rotation needs 9 values, got {}", vals.len()));
                }
                rotation = Some(vals);
            }
            "translation" => {
                if vals.len() != 3 {
                    return Err(format!("translation needs 3 values, got {}", vals.len()));
                }
                translation = Some(vals);
            }
            _ => {
                if vals.len() != 1 {
                    return Err(format!("{key} needs 1 value"));
                }
                fields.insert(key.to_string(), vals[0]);
            }
        }
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| format!("missing field {k}"));
    let rot = rotation.ok_or("missing rotation")?;
    let trans = translation.ok_or("missing translation")?;
    let r = Matrix3::from_row_slice(&rot);
    let t = Vector3::new(trans[0], trans[1], trans[2]);
    let pose = CameraPose::from_nearly_orthonormal(r, t).map_err(|e| e.to_string())?;
    let k = CameraIntrinsics::new(
        get("fx")?,
        get("fy")?,
        get("cx")?,
        get("cy")?,
        fields.get("skew").copied().unwrap_or(0.0),
        get("width")? as usize,
        get("height")? as usize,
    )
    .map_err(|e| e.to_string())?;
    Ok((k, pose))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix3x4;

    fn identity_like_k() -> CameraIntrinsics {
        CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 0.0, 1, 1).unwrap()
    }

    #[test]
    fn compose_identity_case() {
        let p = compose_projection(&identity_like_k(), &CameraPose::identity());
        let expected = Matrix3x4::new(
            1.0, 0.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 0.0,
        );
        assert_relative_eq!(p.matrix(), &expected, epsilon = 1e-15);
        let (px, sign) = project_point(&p, &Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert_relative_eq!(px, Vector2::new(0.0, 0.0));
        assert_eq!(sign, DepthSign::Positive);
    }

    #[test]
    fn compose_principal_ray_point() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 0.0, 100, 100).unwrap();
        let pose = CameraPose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 5.0)).unwrap();
        let p = compose_projection(&k, &pose);
        let (px, sign) = project_point(&p, &Vector3::new(0.0, 0.0, 5.0)).unwrap();
        assert_relative_eq!(px, Vector2::new(50.0, 50.0), epsilon = 1e-12);
        assert_eq!(sign, DepthSign::Positive);
    }

    /// Independent scalar-arithmetic projection of a single point.
    fn project_one_point_oracle(
        k: &CameraIntrinsics,
        pose: &CameraPose,
        x: &Vector3<f64>,
    ) -> (f64, f64) {
        let r = pose.rotation();
        let t = pose.translation();
        let xc = r[(0, 0)] * x.x + r[(0, 1)] * x.y + r[(0, 2)] * x.z + t.x;
        let yc = r[(1, 0)] * x.x + r[(1, 1)] * x.y + r[(1, 2)] * x.z + t.y;
        let zc = r[(2, 0)] * x.x + r[(2, 1)] * x.y + r[(2, 2)] * x.z + t.z;
        let u = (k.fx * xc + k.skew * yc + k.cx * zc) / zc;
        let v = (k.fy * yc + k.cy * zc) / zc;
        (u, v)
    }

    #[test]
    fn compose_matches_per_point_oracle() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let k = CameraIntrinsics::new(
                200.0 + rng.gen::<f64>() * 400.0,
                200.0 + rng.gen::<f64>() * 400.0,
                rng.gen::<f64>() * 100.0,
                rng.gen::<f64>() * 100.0,
                rng.gen::<f64>() * 2.0 - 1.0,
                640,
                480,
            )
            .unwrap();
            let axis = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            let rot = Rotation3::new(axis * 0.3);
            let pose = CameraPose::new(
                *rot.matrix(),
                Vector3::new(rng.gen(), rng.gen(), 5.0 + rng.gen::<f64>()),
            )
            .unwrap();
            let p = compose_projection(&k, &pose);
            for _ in 0..20 {
                let x = Vector3::new(
                    rng.gen::<f64>() * 2.0 - 1.0,
                    rng.gen::<f64>() * 2.0 - 1.0,
                    rng.gen::<f64>() * 2.0 + 2.0,
                );
                let (px, _) = project_point(&p, &x).unwrap();
                let (u, v) = project_one_point_oracle(&k, &pose, &x);
                assert_relative_eq!(px.x, u, epsilon = 1e-10);
                assert_relative_eq!(px.y, v, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn project_point_edge_cases() {
        let p = compose_projection(&identity_like_k(), &CameraPose::identity());
        let (px, sign) = project_point(&p, &Vector3::new(1.0, 1.0, 1.0)).unwrap();
        assert_relative_eq!(px, Vector2::new(1.0, 1.0));
        assert_eq!(sign, DepthSign::Positive);

        let (_, sign) = project_point(&p, &Vector3::new(0.0, 0.0, -1.0)).unwrap();
        assert_eq!(sign, DepthSign::Negative);

        assert!(matches!(
            project_point(&p, &Vector3::new(1.0, 0.0, 0.0)),
            Err(Error::AtInfinity)
        ));
    }

    #[test]
    fn project_point_scale_invariance() {
        let k = CameraIntrinsics::new(120.0, 110.0, 30.0, 40.0, 0.5, 200, 100).unwrap();
        let pose = CameraPose::new(Matrix3::identity(), Vector3::new(0.1, -0.2, 4.0)).unwrap();
        let p = compose_projection(&k, &pose);
        let x = Vector3::new(0.3, 0.4, 2.0);
        let (px, sign) = project_point(&p, &x).unwrap();
        for s in [3.0, -2.5, 1e-3] {
            let ps = ProjectionMatrix::new(p.matrix() * s).unwrap();
            let (px2, sign2) = project_point(&ps, &x).unwrap();
            assert_relative_eq!(px, px2, epsilon = 1e-12);
            // Depth sign flips iff the scalar is negative.
            if s > 0.0 {
                assert_eq!(sign, sign2);
            } else {
                assert_ne!(sign, sign2);
            }
        }
    }

    #[test]
    fn camera_file_round_trip() {
        let k = CameraIntrinsics::new(120.0, 110.0, 30.0, 40.0, 0.5, 200, 100).unwrap();
        let rot = Rotation3::new(Vector3::new(0.1, -0.2, 0.3));
        let pose = CameraPose::new(*rot.matrix(), Vector3::new(1.0, 2.0, 3.0)).unwrap();
        let text = camera_to_string(&k, &pose);
        let (k2, pose2) = parse_camera(&text).unwrap();
        assert_eq!(k, k2);
        assert_relative_eq!(pose.rotation(), pose2.rotation(), epsilon = 1e-12);
        assert_relative_eq!(pose.translation(), pose2.translation(), epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_rotation() {
        let mut r = Matrix3::identity();
        r[(0, 0)] = 1.1;
        assert!(CameraPose::new(r, Vector3::zeros()).is_err());
    }
}
