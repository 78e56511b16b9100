//! Camera parameter estimation from 2D-3D correspondences: normalized DLT for
//! the full 11-DoF projection, EPnP for known intrinsics, both wrapped in the
//! consensus-driven RANSAC scheme, plus RQ decomposition of estimated
//! projection matrices.

use nalgebra::{
    DMatrix, DVector, Matrix3, Matrix3x4, Matrix4, Vector2, Vector3,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::camera::{compose_projection, CameraIntrinsics, CameraPose, ProjectionMatrix};
use crate::error::{Error, Result};
use crate::flow::Correspondence2D3D;

/// Reprojection contribution of a point behind the camera.
pub const BEHIND_CAMERA_PENALTY: f64 = 1e6;

const DESIGN_RATIO_TOL: f64 = 1e-6;
const SCATTER_RATIO_TOL: f64 = 1e-8;

/// One refined pose candidate with its consensus statistics.
#[derive(Debug, Clone)]
pub struct PoseHypothesis {
    pub projection: ProjectionMatrix,
    pub decomposed: Option<(CameraIntrinsics, CameraPose)>,
    pub inlier_indices: Vec<usize>,
    pub consensus_fraction: f64,
    /// RMS reprojection error over the consensus set.
    pub consensus_rmse: f64,
    /// RANSAC iterations actually executed.
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct RansacParams {
    pub inlier_threshold: f64,
    pub min_consensus_fraction: f64,
    pub max_iterations: usize,
    pub sample_size: usize,
    pub rng_seed: u64,
}

impl RansacParams {
    /// Paper protocol: 65 % consensus criterion, 500 iteration cap, six-point
    /// samples. The threshold is resolution dependent and set by the caller.
    pub fn with_threshold(inlier_threshold: f64, rng_seed: u64) -> Self {
        Self {
            inlier_threshold,
            min_consensus_fraction: 0.65,
            max_iterations: 500,
            sample_size: 6,
            rng_seed,
        }
    }
}

#[derive(Debug, Clone)]
pub enum RansacMode {
    /// Full 11-DoF estimation via DLT; intrinsics come out of the decomposition.
    FullDlt { width: usize, height: usize },
    /// Known intrinsics; pose via EPnP.
    KnownIntrinsics(CameraIntrinsics),
}

impl RansacMode {
    fn min_sample(&self) -> usize {
        match self {
            RansacMode::FullDlt { .. } => 6,
            RansacMode::KnownIntrinsics(_) => 4,
        }
    }
}

// ---------------------------------------------------------------------------
// DLT

/// Hartley-normalized direct linear transform for the full 3x4 projection.
pub fn dlt(corrs: &[Correspondence2D3D]) -> Result<ProjectionMatrix> {
    let n = corrs.len();
    if n < 6 {
        return Err(Error::invalid(
            "dlt",
            format!("needs at least 6 correspondences, got {n}"),
        ));
    }
    check_spatial_spread(corrs)?;

    // Isotropic normalization: centroids to the origin, mean distance sqrt(2)
    // in 2D and sqrt(3) in 3D.
    let (t2, pix) = normalize_2d(corrs);
    let (t3, pts) = normalize_3d(corrs);

    let mut a = DMatrix::zeros(2 * n, 12);
    for i in 0..n {
        let x = &pts[i];
        let u = pix[i].x;
        let v = pix[i].y;
        let row = 2 * i;
        // [0 0 0 0, -X, vX] and [X, 0 0 0 0, -uX] row pattern
        for j in 0..4 {
            let xj = if j < 3 { x[j] } else { 1.0 };
            a[(row, 4 + j)] = -xj;
            a[(row, 8 + j)] = v * xj;
            a[(row + 1, j)] = xj;
            a[(row + 1, 8 + j)] = -u * xj;
        }
    }
    let svd = a.svd(false, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().cloned().collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
    // A rank deficiency beyond the one expected null vector means the
    // configuration does not pin down a unique projection.
    if sv[10] < DESIGN_RATIO_TOL * sv[0] {
        return Err(Error::Degenerate(
            "DLT design system is rank deficient (near-coplanar points)".into(),
        ));
    }
    let vt = svd.v_t.expect("svd with v_t requested");
    let h = vt.row(vt.nrows() - 1);
    let p_norm = Matrix3x4::from_row_slice(h.transpose().as_slice());

    // Denormalize: P = T2^-1 * Pn * T3.
    let t2_inv = t2.try_inverse().expect("similarity transform is invertible");
    let p = t2_inv * p_norm * t3;
    ProjectionMatrix::new(p)
}

/// Rejects 3D configurations that are (near-)coplanar or collapsed.
fn check_spatial_spread(corrs: &[Correspondence2D3D]) -> Result<()> {
    let n = corrs.len() as f64;
    let centroid: Vector3<f64> = corrs.iter().map(|c| c.world).sum::<Vector3<f64>>() / n;
    let mut scatter = Matrix3::zeros();
    for c in corrs {
        let d = c.world - centroid;
        scatter += d * d.transpose();
    }
    let eig = scatter.symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min < SCATTER_RATIO_TOL * max {
        return Err(Error::Degenerate(
            "3D points are coplanar or have no spatial spread".into(),
        ));
    }
    Ok(())
}

fn normalize_2d(corrs: &[Correspondence2D3D]) -> (Matrix3<f64>, Vec<Vector2<f64>>) {
    let n = corrs.len() as f64;
    let centroid: Vector2<f64> = corrs.iter().map(|c| c.pixel).sum::<Vector2<f64>>() / n;
    let mean_dist = corrs
        .iter()
        .map(|c| (c.pixel - centroid).norm())
        .sum::<f64>()
        / n;
    let s = if mean_dist > 1e-12 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    let t = Matrix3::new(
        s, 0.0, -s * centroid.x, //
        0.0, s, -s * centroid.y, //
        0.0, 0.0, 1.0,
    );
    let pts = corrs.iter().map(|c| (c.pixel - centroid) * s).collect();
    (t, pts)
}

fn normalize_3d(corrs: &[Correspondence2D3D]) -> (Matrix4<f64>, Vec<Vector3<f64>>) {
    let n = corrs.len() as f64;
    let centroid: Vector3<f64> = corrs.iter().map(|c| c.world).sum::<Vector3<f64>>() / n;
    let mean_dist = corrs
        .iter()
        .map(|c| (c.world - centroid).norm())
        .sum::<f64>()
        / n;
    let s = if mean_dist > 1e-12 {
        3f64.sqrt() / mean_dist
    } else {
        1.0
    };
    let mut t = Matrix4::identity() * s;
    t[(3, 3)] = 1.0;
    t[(0, 3)] = -s * centroid.x;
    t[(1, 3)] = -s * centroid.y;
    t[(2, 3)] = -s * centroid.z;
    let pts = corrs.iter().map(|c| (c.world - centroid) * s).collect();
    (t, pts)
}

// ---------------------------------------------------------------------------
// Decomposition

/// RQ-factorizes P into intrinsics (upper triangular, positive diagonal) and
/// a proper world→camera rigid pose. `width`/`height` carry the image size
/// into the returned intrinsics; they do not affect the factorization.
pub fn decompose(
    p: &ProjectionMatrix,
    width: usize,
    height: usize,
) -> Result<(CameraIntrinsics, CameraPose)> {
    let mut m = p.left_block();
    let mut p4 = Vector3::new(
        p.matrix()[(0, 3)],
        p.matrix()[(1, 3)],
        p.matrix()[(2, 3)],
    );
    let det = m.determinant();
    if det.abs() < 1e-300 {
        return Err(Error::Decomposition("left 3x3 block is singular".into()));
    }
    // Fix the overall sign so det(M) > 0; then K diag > 0 and det(R) = +1
    // are simultaneously achievable and points in front project with w > 0.
    if det < 0.0 {
        m = -m;
        p4 = -p4;
    }

    // RQ via QR of the axis-reversed transpose.
    let e = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0);
    let qr = (e * m).transpose().qr();
    let q = qr.q();
    let r = qr.r();
    let mut k = e * r.transpose() * e;
    let mut rot = e * q.transpose();

    // Force positive diagonal on K.
    let mut s = Matrix3::identity();
    for i in 0..3 {
        if k[(i, i)] < 0.0 {
            s[(i, i)] = -1.0;
        }
    }
    k *= s;
    rot = s * rot;
    if rot.determinant() < 0.0 {
        rot = -rot;
        // det(M) > 0 and det(K) > 0 make this unreachable; kept as a guard.
        k = -k;
    }
    if k[(2, 2)].abs() < 1e-300 {
        return Err(Error::Decomposition("K has zero scale".into()));
    }
    let t = k
        .try_inverse()
        .ok_or_else(|| Error::Decomposition("K is singular".into()))?
        * p4;
    let scale = k[(2, 2)];
    k /= scale;
    let intr = CameraIntrinsics::new(k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)], k[(0, 1)], width, height)
        .map_err(|e| Error::Decomposition(e.to_string()))?;
    let pose = CameraPose::from_nearly_orthonormal(rot, t)
        .map_err(|e| Error::Decomposition(e.to_string()))?;
    Ok((intr, pose))
}

// ---------------------------------------------------------------------------
// EPnP

/// EPnP pose for known intrinsics, with the 3-control-point variant for
/// planar point sets. Candidate β cases are scored by reprojection error and
/// the best one returned.
pub fn epnp(corrs: &[Correspondence2D3D], k: &CameraIntrinsics) -> Result<CameraPose> {
    let n = corrs.len();
    if n < 4 {
        return Err(Error::invalid(
            "epnp",
            format!("needs at least 4 correspondences, got {n}"),
        ));
    }
    let centroid: Vector3<f64> = corrs.iter().map(|c| c.world).sum::<Vector3<f64>>() / n as f64;
    let mut scatter = Matrix3::zeros();
    for c in corrs {
        let d = c.world - centroid;
        scatter += d * d.transpose();
    }
    let eig = nalgebra::SymmetricEigen::new(scatter / n as f64);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let lambda: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    if lambda[0] < 1e-18 {
        return Err(Error::Degenerate("points have no spatial spread".into()));
    }
    let axes: Vec<Vector3<f64>> = order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
    let planar = lambda[2] < 1e-10 * lambda[0];
    if planar && lambda[1] < 1e-10 * lambda[0] {
        return Err(Error::Degenerate("points are collinear".into()));
    }

    // Control points in the world frame.
    let mut control = vec![centroid];
    let m_ctrl = if planar { 3 } else { 4 };
    for j in 0..m_ctrl - 1 {
        control.push(centroid + axes[j] * lambda[j].sqrt());
    }

    // Barycentric coordinates of each point w.r.t. the control points.
    let mut alphas = DMatrix::zeros(n, m_ctrl);
    if planar {
        let a_cols = nalgebra::Matrix3x2::from_columns(&[
            control[1] - control[0],
            control[2] - control[0],
        ]);
        let gram = (a_cols.transpose() * a_cols)
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("planar basis is singular".into()))?;
        for i in 0..n {
            let rhs = a_cols.transpose() * (corrs[i].world - control[0]);
            let ab = gram * rhs;
            alphas[(i, 1)] = ab.x;
            alphas[(i, 2)] = ab.y;
            alphas[(i, 0)] = 1.0 - ab.x - ab.y;
        }
    } else {
        let mut c = Matrix4::zeros();
        for j in 0..4 {
            for a in 0..3 {
                c[(a, j)] = control[j][a];
            }
            c[(3, j)] = 1.0;
        }
        let c_inv = c
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("control points are coplanar".into()))?;
        for i in 0..n {
            let w = corrs[i].world;
            let a = c_inv * nalgebra::Vector4::new(w.x, w.y, w.z, 1.0);
            for j in 0..4 {
                alphas[(i, j)] = a[j];
            }
        }
    }

    // Design matrix M: each point yields two equations.
    let cols = 3 * m_ctrl;
    let mut m = DMatrix::zeros(2 * n, cols);
    for i in 0..n {
        let u = corrs[i].pixel.x;
        let v = corrs[i].pixel.y;
        for j in 0..m_ctrl {
            let a = alphas[(i, j)];
            m[(2 * i, 3 * j)] = a * k.fx;
            m[(2 * i, 3 * j + 1)] = a * k.skew;
            m[(2 * i, 3 * j + 2)] = a * (k.cx - u);
            m[(2 * i + 1, 3 * j + 1)] = a * k.fy;
            m[(2 * i + 1, 3 * j + 2)] = a * (k.cy - v);
        }
    }
    let mtm = m.transpose() * &m;
    let eig = nalgebra::SymmetricEigen::new(mtm);
    let mut idx: Vec<usize> = (0..cols).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());

    // Candidate kernel vectors, smallest eigenvalues first.
    let kernel: Vec<DVector<f64>> = idx
        .iter()
        .take(3)
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();

    let ctrl_dist: Vec<f64> = pairs(m_ctrl)
        .map(|(a, b)| (control[a] - control[b]).norm())
        .collect();

    let mut best: Option<(f64, CameraPose)> = None;
    for case in beta_cases(&kernel, m_ctrl, &ctrl_dist) {
        let ctrl_cam = case;
        if let Ok(pose) = pose_from_camera_controls(corrs, &alphas, &ctrl_cam, m_ctrl) {
            let err = epnp_reprojection_rms(corrs, k, &pose);
            if best.as_ref().map_or(true, |(e, _)| err < *e) {
                best = Some((err, pose));
            }
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| Error::Degenerate("no EPnP candidate produced a valid pose".into()))
}

fn pairs(m: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..m).flat_map(move |a| ((a + 1)..m).map(move |b| (a, b)))
}

/// Candidate camera-frame control point sets from the β cases N = 1 and 2.
fn beta_cases(
    kernel: &[DVector<f64>],
    m_ctrl: usize,
    ctrl_dist: &[f64],
) -> Vec<Vec<Vector3<f64>>> {
    let unpack = |v: &DVector<f64>| -> Vec<Vector3<f64>> {
        (0..m_ctrl)
            .map(|j| Vector3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2]))
            .collect()
    };
    let mut cases = Vec::new();

    // N = 1: closed-form scale matching the control point distances.
    {
        let c = unpack(&kernel[0]);
        let mut num = 0.0;
        let mut den = 0.0;
        for ((a, b), d) in pairs(m_ctrl).zip(ctrl_dist) {
            let dv = (c[a] - c[b]).norm();
            num += dv * d;
            den += dv * dv;
        }
        if den > 1e-30 {
            let beta = num / den;
            cases.push(c.iter().map(|p| p * beta).collect());
        }
    }

    // N = 2: solve for beta11, beta12, beta22 from the pairwise distances.
    if kernel.len() >= 2 {
        let c1 = unpack(&kernel[0]);
        let c2 = unpack(&kernel[1]);
        let np = ctrl_dist.len();
        let mut l = DMatrix::zeros(np, 3);
        let mut rho = DVector::zeros(np);
        for (r, ((a, b), d)) in pairs(m_ctrl).zip(ctrl_dist).enumerate() {
            let dv1 = c1[a] - c1[b];
            let dv2 = c2[a] - c2[b];
            l[(r, 0)] = dv1.norm_squared();
            l[(r, 1)] = 2.0 * dv1.dot(&dv2);
            l[(r, 2)] = dv2.norm_squared();
            rho[r] = d * d;
        }
        if let Some(sol) = l.svd(true, true).solve(&rho, 1e-12).ok() {
            let (b11, b12, b22) = (sol[0], sol[1], sol[2]);
            if b11.abs() > 1e-30 {
                let beta1 = b11.abs().sqrt();
                let beta2 = if b11 >= 0.0 { b12 / beta1 } else { -b12 / beta1 };
                let _ = b22; // consistency residual absorbed by the error scoring
                cases.push(
                    c1.iter()
                        .zip(&c2)
                        .map(|(p1, p2)| p1 * beta1 + p2 * beta2)
                        .collect(),
                );
            }
        }
    }
    cases
}

/// Rigid pose from world points and their camera-frame reconstruction via the
/// closed-form SVD alignment.
fn pose_from_camera_controls(
    corrs: &[Correspondence2D3D],
    alphas: &DMatrix<f64>,
    ctrl_cam: &[Vector3<f64>],
    m_ctrl: usize,
) -> Result<CameraPose> {
    let n = corrs.len();
    let mut cam_pts: Vec<Vector3<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut p = Vector3::zeros();
        for j in 0..m_ctrl {
            p += ctrl_cam[j] * alphas[(i, j)];
        }
        cam_pts.push(p);
    }
    // The kernel vector sign is arbitrary; flip so points sit in front.
    let mean_z: f64 = cam_pts.iter().map(|p| p.z).sum::<f64>() / n as f64;
    if mean_z < 0.0 {
        for p in &mut cam_pts {
            *p = -*p;
        }
    }
    rigid_align(
        &corrs.iter().map(|c| c.world).collect::<Vec<_>>(),
        &cam_pts,
    )
}

/// Least-squares rotation and translation mapping `from` onto `to`.
pub fn rigid_align(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> Result<CameraPose> {
    let n = from.len();
    if n < 3 {
        return Err(Error::Alignment("needs at least 3 points".into()));
    }
    let mu_f: Vector3<f64> = from.iter().sum::<Vector3<f64>>() / n as f64;
    let mu_t: Vector3<f64> = to.iter().sum::<Vector3<f64>>() / n as f64;
    let mut h = Matrix3::zeros();
    for (f, t) in from.iter().zip(to) {
        h += (f - mu_f) * (t - mu_t).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut d = Matrix3::identity();
    let r0 = vt.transpose() * u.transpose();
    if r0.determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = vt.transpose() * d * u.transpose();
    let t = mu_t - r * mu_f;
    CameraPose::from_nearly_orthonormal(r, t).map_err(|e| Error::Alignment(e.to_string()))
}

fn epnp_reprojection_rms(
    corrs: &[Correspondence2D3D],
    k: &CameraIntrinsics,
    pose: &CameraPose,
) -> f64 {
    let p = compose_projection(k, pose);
    reprojection_rmse_projection(&p, corrs)
}

// ---------------------------------------------------------------------------
// Reprojection error

/// Per-correspondence Euclidean pixel errors under P. The sign of P is
/// normalized via the determinant of its left block so that points behind the
/// camera are detected and penalized rather than folded into the image.
pub fn reprojection_errors(p: &ProjectionMatrix, corrs: &[Correspondence2D3D]) -> Vec<f64> {
    let mut m = *p.matrix();
    if p.left_block().determinant() < 0.0 {
        m = -m;
    }
    corrs
        .iter()
        .map(|c| {
            let x = &c.world;
            let w = m[(2, 0)] * x.x + m[(2, 1)] * x.y + m[(2, 2)] * x.z + m[(2, 3)];
            if w <= 1e-12 * m.norm() {
                return BEHIND_CAMERA_PENALTY;
            }
            let u = (m[(0, 0)] * x.x + m[(0, 1)] * x.y + m[(0, 2)] * x.z + m[(0, 3)]) / w;
            let v = (m[(1, 0)] * x.x + m[(1, 1)] * x.y + m[(1, 2)] * x.z + m[(1, 3)]) / w;
            ((u - c.pixel.x).powi(2) + (v - c.pixel.y).powi(2)).sqrt()
        })
        .collect()
}

/// Root-mean-square reprojection error of a projection matrix.
pub fn reprojection_rmse_projection(p: &ProjectionMatrix, corrs: &[Correspondence2D3D]) -> f64 {
    if corrs.is_empty() {
        return 0.0;
    }
    let errs = reprojection_errors(p, corrs);
    (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt()
}

/// Root-mean-square reprojection error of a decomposed camera.
pub fn reprojection_rmse_pose(
    k: &CameraIntrinsics,
    pose: &CameraPose,
    corrs: &[Correspondence2D3D],
) -> f64 {
    reprojection_rmse_projection(&compose_projection(k, pose), corrs)
}

// ---------------------------------------------------------------------------
// RANSAC

/// Consensus-driven refinement: sample, fit (DLT or EPnP), score, keep the
/// largest consensus; early exit at the 65 % criterion, hard cap on
/// iterations. The final pose is re-fit on the full consensus set when that
/// does not shrink the consensus.
pub fn ransac_refine(
    corrs: &[Correspondence2D3D],
    mode: &RansacMode,
    params: &RansacParams,
) -> Result<PoseHypothesis> {
    let n = corrs.len();
    if params.sample_size < mode.min_sample() {
        return Err(Error::invalid(
            "RansacParams",
            format!(
                "sample_size {} below the minimum {} for this mode",
                params.sample_size,
                mode.min_sample()
            ),
        ));
    }
    if n < params.sample_size {
        return Err(Error::RefinementFailed(format!(
            "{n} correspondences, need at least {}",
            params.sample_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let mut best: Option<(Vec<usize>, f64, ProjectionMatrix)> = None;
    let mut iterations = 0usize;
    let mut any_fit = false;

    for _ in 0..params.max_iterations {
        iterations += 1;
        let sample = sample_indices(&mut rng, n, params.sample_size);
        let subset: Vec<Correspondence2D3D> =
            sample.iter().map(|&i| corrs[i].clone()).collect();
        let Ok(p) = fit(&subset, mode) else { continue };
        any_fit = true;
        let errs = reprojection_errors(&p, corrs);
        let inliers: Vec<usize> = errs
            .iter()
            .enumerate()
            .filter(|(_, e)| **e < params.inlier_threshold)
            .map(|(i, _)| i)
            .collect();
        let rmse = rmse_over(&errs, &inliers);
        let better = match &best {
            None => true,
            Some((bi, brmse, _)) => {
                inliers.len() > bi.len() || (inliers.len() == bi.len() && rmse < *brmse)
            }
        };
        if better {
            best = Some((inliers, rmse, p));
        }
        if let Some((bi, _, _)) = &best {
            if bi.len() as f64 / n as f64 >= params.min_consensus_fraction {
                break;
            }
        }
    }

    let Some((inliers, rmse, p)) = best else {
        debug_assert!(!any_fit);
        return Err(Error::RefinementFailed(
            "every sampled fit was degenerate".into(),
        ));
    };

    // Final re-fit on the whole consensus set; kept only if it does not lose
    // consensus, so the returned hypothesis never scores below one evaluated.
    let (inliers, rmse, p) = if inliers.len() >= params.sample_size {
        let subset: Vec<Correspondence2D3D> = inliers.iter().map(|&i| corrs[i].clone()).collect();
        match fit(&subset, mode) {
            Ok(p2) => {
                let errs = reprojection_errors(&p2, corrs);
                let in2: Vec<usize> = errs
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| **e < params.inlier_threshold)
                    .map(|(i, _)| i)
                    .collect();
                let rmse2 = rmse_over(&errs, &in2);
                if in2.len() > inliers.len() || (in2.len() == inliers.len() && rmse2 <= rmse) {
                    (in2, rmse2, p2)
                } else {
                    (inliers, rmse, p)
                }
            }
            Err(_) => (inliers, rmse, p),
        }
    } else {
        (inliers, rmse, p)
    };

    let decomposed = match mode {
        RansacMode::FullDlt { width, height } => decompose(&p, *width, *height).ok(),
        RansacMode::KnownIntrinsics(k) => decompose(&p, k.width, k.height).ok(),
    };
    Ok(PoseHypothesis {
        consensus_fraction: inliers.len() as f64 / n as f64,
        consensus_rmse: rmse,
        inlier_indices: inliers,
        projection: p,
        decomposed,
        iterations,
    })
}

fn rmse_over(errs: &[f64], idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return f64::INFINITY;
    }
    (idx.iter().map(|&i| errs[i] * errs[i]).sum::<f64>() / idx.len() as f64).sqrt()
}

fn fit(subset: &[Correspondence2D3D], mode: &RansacMode) -> Result<ProjectionMatrix> {
    match mode {
        RansacMode::FullDlt { .. } => dlt(subset),
        RansacMode::KnownIntrinsics(k) => {
            let pose = epnp(subset, k)?;
            Ok(compose_projection(k, &pose))
        }
    }
}

fn sample_indices(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    // partial Fisher-Yates
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::project_point;
    use approx::assert_relative_eq;
    use nalgebra::Rotation3;

    fn test_k() -> CameraIntrinsics {
        CameraIntrinsics::new(400.0, 410.0, 250.0, 140.0, 0.0, 505, 275).unwrap()
    }

    fn test_pose(seed: u64) -> CameraPose {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let axis = Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
        let rot = Rotation3::new(axis * 0.6);
        CameraPose::new(
            *rot.matrix(),
            Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, 8.0 + rng.gen::<f64>()),
        )
        .unwrap()
    }

    fn random_corrs(
        k: &CameraIntrinsics,
        pose: &CameraPose,
        n: usize,
        seed: u64,
        planar: bool,
    ) -> Vec<Correspondence2D3D> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = compose_projection(k, pose);
        (0..n)
            .map(|_| {
                let world = Vector3::new(
                    rng.gen::<f64>() * 6.0 - 3.0,
                    rng.gen::<f64>() * 6.0 - 3.0,
                    if planar { 0.7 } else { rng.gen::<f64>() * 6.0 - 3.0 },
                );
                let (pix, _) = project_point(&p, &world).unwrap();
                Correspondence2D3D {
                    pixel: pix,
                    world,
                    view_index: 0,
                }
            })
            .collect()
    }

    #[test]
    fn dlt_recovers_exact_projection() {
        for seed in 0..5 {
            let k = test_k();
            let pose = test_pose(seed);
            let corrs = random_corrs(&k, &pose, 6, seed + 100, false);
            let p = dlt(&corrs).unwrap();
            let rms = reprojection_rmse_projection(&p, &corrs);
            assert!(rms < 1e-8, "seed {seed}: rms {rms}");
            // Up-to-scale equality with the ground-truth projection.
            let truth = compose_projection(&k, &pose);
            let a = p.matrix() / p.matrix().norm();
            let b = truth.matrix() / truth.matrix().norm();
            let diff = ((a - b).norm()).min((a + b).norm());
            assert!(diff < 1e-7, "seed {seed}: matrix diff {diff}");
        }
    }

    #[test]
    fn dlt_overdetermined_noise_free() {
        let k = test_k();
        let pose = test_pose(42);
        let corrs = random_corrs(&k, &pose, 20, 3, false);
        let p = dlt(&corrs).unwrap();
        assert!(reprojection_rmse_projection(&p, &corrs) < 1e-8);
    }

    #[test]
    fn dlt_rejects_coplanar_points() {
        let k = test_k();
        let pose = test_pose(9);
        let corrs = random_corrs(&k, &pose, 8, 4, true);
        assert!(matches!(dlt(&corrs), Err(Error::Degenerate(_))));
    }

    #[test]
    fn dlt_singular_value_optimality() {
        // On noise-free data the smallest singular value of the design system
        // is negligible against the largest.
        let k = test_k();
        let pose = test_pose(77);
        let corrs = random_corrs(&k, &pose, 10, 5, false);
        let (_, pix) = normalize_2d(&corrs);
        let (_, pts) = normalize_3d(&corrs);
        let n = corrs.len();
        let mut a = DMatrix::zeros(2 * n, 12);
        for i in 0..n {
            let x = &pts[i];
            let (u, v) = (pix[i].x, pix[i].y);
            for j in 0..4 {
                let xj = if j < 3 { x[j] } else { 1.0 };
                a[(2 * i, 4 + j)] = -xj;
                a[(2 * i, 8 + j)] = v * xj;
                a[(2 * i + 1, j)] = xj;
                a[(2 * i + 1, 8 + j)] = -u * xj;
            }
        }
        let sv = a.svd(false, false).singular_values;
        let mut s: Vec<f64> = sv.iter().cloned().collect();
        s.sort_by(|x, y| y.partial_cmp(x).unwrap());
        assert!(s[11] < 1e-10 * s[0], "{:?}", s);
    }

    #[test]
    fn decompose_round_trips_random_cameras() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = CameraIntrinsics::new(
                300.0 + rng.gen::<f64>() * 300.0,
                300.0 + rng.gen::<f64>() * 300.0,
                200.0 + rng.gen::<f64>() * 100.0,
                100.0 + rng.gen::<f64>() * 100.0,
                rng.gen::<f64>() * 2.0,
                505,
                275,
            )
            .unwrap();
            let pose = test_pose(seed + 500);
            let p = compose_projection(&k, &pose);
            let (k2, pose2) = decompose(&p, 505, 275).unwrap();
            assert_relative_eq!(k.fx, k2.fx, max_relative = 1e-8);
            assert_relative_eq!(k.fy, k2.fy, max_relative = 1e-8);
            assert_relative_eq!(k.cx, k2.cx, max_relative = 1e-8);
            assert_relative_eq!(k.cy, k2.cy, max_relative = 1e-8);
            assert_relative_eq!(pose.rotation(), pose2.rotation(), epsilon = 1e-8);
            assert_relative_eq!(pose.translation(), pose2.translation(), epsilon = 1e-8);
        }
    }

    #[test]
    fn decompose_is_scale_invariant() {
        let k = test_k();
        let pose = test_pose(13);
        let p = compose_projection(&k, &pose);
        let scaled = ProjectionMatrix::new(p.matrix() * -3.0).unwrap();
        let (k1, pose1) = decompose(&p, 505, 275).unwrap();
        let (k2, pose2) = decompose(&scaled, 505, 275).unwrap();
        assert_relative_eq!(k1.fx, k2.fx, max_relative = 1e-10);
        assert_relative_eq!(pose1.rotation(), pose2.rotation(), epsilon = 1e-10);
        assert_relative_eq!(pose1.translation(), pose2.translation(), epsilon = 1e-10);
    }

    #[test]
    fn decompose_rejects_rank_two_left_block() {
        // Constructed via ProjectionMatrix::new bypass: rank-2 blocks are
        // already rejected at construction.
        let mut m = Matrix3x4::zeros();
        m[(0, 0)] = 1.0;
        m[(1, 1)] = 1.0;
        assert!(ProjectionMatrix::new(m).is_err());
    }

    #[test]
    fn epnp_recovers_exact_pose() {
        for seed in 0..5 {
            let k = test_k();
            let pose = test_pose(seed + 30);
            let corrs = random_corrs(&k, &pose, 6, seed + 200, false);
            let est = epnp(&corrs, &k).unwrap();
            let dr = (pose.rotation().transpose() * est.rotation()).trace();
            let angle = ((dr - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
            assert!(angle < 1e-6, "seed {seed}: rotation error {angle}");
            let terr = (est.translation() - pose.translation()).norm()
                / pose.translation().norm();
            assert!(terr < 1e-6, "seed {seed}: translation error {terr}");
        }
    }

    #[test]
    fn epnp_handles_planar_configurations() {
        for seed in 0..5 {
            let k = test_k();
            let pose = test_pose(seed + 60);
            let corrs = random_corrs(&k, &pose, 10, seed + 300, true);
            let est = epnp(&corrs, &k).unwrap();
            let rms = reprojection_rmse_pose(&k, &est, &corrs);
            assert!(rms < 1e-4, "seed {seed}: rms {rms}");
        }
    }

    #[test]
    fn epnp_rejects_degenerate_spread() {
        let k = test_k();
        let c = Correspondence2D3D {
            pixel: Vector2::new(100.0, 100.0),
            world: Vector3::new(1.0, 1.0, 5.0),
            view_index: 0,
        };
        let corrs = vec![c.clone(), c.clone(), c.clone(), c];
        assert!(epnp(&corrs, &k).is_err());
        assert!(matches!(
            epnp(&corrs[..3].to_vec(), &k),
            Err(Error::Invalid { .. })
        ));
    }

    #[test]
    fn epnp_and_dlt_agree_on_clean_data() {
        let k = test_k();
        let pose = test_pose(91);
        let corrs = random_corrs(&k, &pose, 15, 7, false);
        let p = dlt(&corrs).unwrap();
        let est = epnp(&corrs, &k).unwrap();
        assert!(reprojection_rmse_projection(&p, &corrs) < 1e-6);
        assert!(reprojection_rmse_pose(&k, &est, &corrs) < 1e-6);
    }

    #[test]
    fn reprojection_rmse_uniform_shift() {
        let k = test_k();
        let pose = test_pose(1);
        let mut corrs = random_corrs(&k, &pose, 25, 8, false);
        let p = compose_projection(&k, &pose);
        assert_relative_eq!(reprojection_rmse_projection(&p, &corrs), 0.0, epsilon = 1e-9);
        for c in &mut corrs {
            c.pixel += Vector2::new(3.0, 4.0);
        }
        assert_relative_eq!(reprojection_rmse_projection(&p, &corrs), 5.0, epsilon = 1e-9);
    }

    #[test]
    fn reprojection_error_matches_scalar_oracle() {
        let k = test_k();
        let pose = test_pose(2);
        let corrs = random_corrs(&k, &pose, 12, 21, false);
        let p = compose_projection(&k, &pose);
        let errs = reprojection_errors(&p, &corrs);
        for (c, e) in corrs.iter().zip(&errs) {
            // independent scalar path
            let xc = pose.transform(&c.world);
            let u = (k.fx * xc.x + k.skew * xc.y) / xc.z + k.cx;
            let v = k.fy * xc.y / xc.z + k.cy;
            let d = ((u - c.pixel.x).powi(2) + (v - c.pixel.y).powi(2)).sqrt();
            assert_relative_eq!(*e, d, epsilon = 1e-9);
        }
    }

    #[test]
    fn behind_camera_points_are_penalized() {
        let k = test_k();
        let pose = CameraPose::identity();
        let p = compose_projection(&k, &pose);
        let corrs = vec![Correspondence2D3D {
            pixel: Vector2::new(0.0, 0.0),
            world: Vector3::new(0.0, 0.0, -5.0),
            view_index: 0,
        }];
        assert_eq!(reprojection_errors(&p, &corrs)[0], BEHIND_CAMERA_PENALTY);
    }

    #[test]
    fn ransac_terminates_immediately_on_clean_data() {
        let k = test_k();
        let pose = test_pose(5);
        let corrs = random_corrs(&k, &pose, 100, 11, false);
        let params = RansacParams::with_threshold(5.0, 4);
        let hyp = ransac_refine(&corrs, &RansacMode::FullDlt { width: 505, height: 275 }, &params)
            .unwrap();
        assert_eq!(hyp.iterations, 1);
        assert_relative_eq!(hyp.consensus_fraction, 1.0);
    }

    fn noisy_mixture(seed: u64) -> (Vec<Correspondence2D3D>, CameraIntrinsics, CameraPose) {
        let k = test_k();
        let pose = test_pose(seed);
        let mut corrs = random_corrs(&k, &pose, 70, seed + 1000, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2000);
        for c in &mut corrs {
            let g = |rng: &mut ChaCha8Rng| {
                let u1: f64 = rng.gen::<f64>().max(1e-300);
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            };
            c.pixel += Vector2::new(0.5 * g(&mut rng), 0.5 * g(&mut rng));
        }
        for _ in 0..30 {
            corrs.push(Correspondence2D3D {
                pixel: Vector2::new(rng.gen::<f64>() * 505.0, rng.gen::<f64>() * 275.0),
                world: Vector3::new(
                    rng.gen::<f64>() * 6.0 - 3.0,
                    rng.gen::<f64>() * 6.0 - 3.0,
                    rng.gen::<f64>() * 6.0 - 3.0,
                ),
                view_index: 0,
            });
        }
        (corrs, k, pose)
    }

    #[test]
    fn ransac_on_inlier_outlier_mixture() {
        let (corrs, k, pose) = noisy_mixture(33);
        let params = RansacParams::with_threshold(3.0, 17);
        let hyp =
            ransac_refine(&corrs, &RansacMode::KnownIntrinsics(k.clone()), &params).unwrap();
        assert!(hyp.consensus_fraction >= 0.65, "{}", hyp.consensus_fraction);
        assert!(hyp.iterations <= 500);
        // Accuracy on the true inliers (first 70).
        let true_inliers: Vec<Correspondence2D3D> = corrs[..70].to_vec();
        let rms = reprojection_rmse_projection(&hyp.projection, &true_inliers);
        assert!(rms < 1.0, "rms on true inliers: {rms}");
        let _ = pose;
    }

    #[test]
    fn ransac_all_outliers_returns_best_found() {
        let k = test_k();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let corrs: Vec<Correspondence2D3D> = (0..60)
            .map(|_| Correspondence2D3D {
                pixel: Vector2::new(rng.gen::<f64>() * 505.0, rng.gen::<f64>() * 275.0),
                world: Vector3::new(
                    rng.gen::<f64>() * 6.0 - 3.0,
                    rng.gen::<f64>() * 6.0 - 3.0,
                    rng.gen::<f64>() * 6.0 - 3.0,
                ),
                view_index: 0,
            })
            .collect();
        let params = RansacParams::with_threshold(3.0, 5);
        let hyp = ransac_refine(&corrs, &RansacMode::KnownIntrinsics(k), &params).unwrap();
        // No early termination: the cap is reached and consensus is small.
        assert_eq!(hyp.iterations, 500);
        assert!(hyp.consensus_fraction < 0.65);
    }

    #[test]
    fn ransac_is_deterministic_per_seed() {
        let (corrs, k, _) = noisy_mixture(8);
        let params = RansacParams::with_threshold(3.0, 123);
        let a = ransac_refine(&corrs, &RansacMode::KnownIntrinsics(k.clone()), &params).unwrap();
        let b = ransac_refine(&corrs, &RansacMode::KnownIntrinsics(k), &params).unwrap();
        assert_eq!(a.inlier_indices, b.inlier_indices);
        assert_eq!(a.projection.matrix(), b.projection.matrix());
    }

    #[test]
    fn dlt_decompose_compose_round_trip() {
        let k = test_k();
        let pose = test_pose(44);
        let corrs = random_corrs(&k, &pose, 12, 31, false);
        let p = dlt(&corrs).unwrap();
        let (k2, pose2) = decompose(&p, 505, 275).unwrap();
        let p2 = compose_projection(&k2, &pose2);
        let a = p.matrix() / p.matrix().norm();
        let b = p2.matrix() / p2.matrix().norm();
        let diff = ((a - b).norm()).min((a + b).norm());
        assert!(diff < 1e-6, "round-trip diff {diff}");
    }
}
