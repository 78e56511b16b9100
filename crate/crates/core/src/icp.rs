//! Point-to-point iterative closest point baseline: nearest neighbors via a
//! kd-tree, closed-form rigid updates from the SVD of the cross-covariance,
//! and the camera-pose update derived from the final cloud alignment.

use nalgebra::{Matrix3, Vector3};

use crate::camera::CameraPose;
use crate::error::{Error, Result};

/// Static 3D kd-tree over a point cloud.
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    /// Node layout: median-split, node i holds `index[i]`, children via
    /// subranges; built as an implicit tree over a reordered index array.
    index: Vec<usize>,
}

struct Node {
    start: usize,
    end: usize,
    axis: usize,
}

impl KdTree {
    pub fn build(points: &[Vector3<f64>]) -> Self {
        let mut index: Vec<usize> = (0..points.len()).collect();
        let points = points.to_vec();
        let mut stack = vec![Node {
            start: 0,
            end: index.len(),
            axis: 0,
        }];
        while let Some(Node { start, end, axis }) = stack.pop() {
            if end - start <= 1 {
                continue;
            }
            let mid = (start + end) / 2;
            index[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
                points[a][axis].partial_cmp(&points[b][axis]).unwrap()
            });
            let next = (axis + 1) % 3;
            stack.push(Node {
                start,
                end: mid,
                axis: next,
            });
            stack.push(Node {
                start: mid + 1,
                end,
                axis: next,
            });
        }
        Self { points, index }
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Index (into the original cloud) and squared distance of the nearest
    /// point to `q`.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        if self.index.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(q, 0, self.index.len(), 0, &mut best);
        Some(best)
    }

    fn search(&self, q: &Vector3<f64>, start: usize, end: usize, axis: usize, best: &mut (usize, f64)) {
        if start >= end {
            return;
        }
        let mid = (start + end) / 2;
        let p_idx = self.index[mid];
        let d2 = (self.points[p_idx] - q).norm_squared();
        if d2 < best.1 {
            *best = (p_idx, d2);
        }
        let diff = q[axis] - self.points[p_idx][axis];
        let next = (axis + 1) % 3;
        let (first, second) = if diff < 0.0 {
            ((start, mid), (mid + 1, end))
        } else {
            ((mid + 1, end), (start, mid))
        };
        self.search(q, first.0, first.1, next, best);
        if diff * diff < best.1 {
            self.search(q, second.0, second.1, next, best);
        }
    }
}

/// Result of aligning one cloud onto another: `rotation * x + translation`
/// maps source points onto the target, with the mean squared nearest-neighbor
/// error per iteration.
#[derive(Debug, Clone)]
pub struct CloudAlignment {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub mse_history: Vec<f64>,
}

/// Point-to-point ICP between two clouds. Iterates nearest-neighbor
/// association and the closed-form rigid update until the mean-squared-error
/// improvement drops below `eps` or `max_iter` is reached.
pub fn align_clouds(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    max_iter: usize,
    eps: f64,
) -> Result<CloudAlignment> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Alignment("empty point cloud".into()));
    }
    let tree = KdTree::build(target);
    let mut rotation = Matrix3::identity();
    let mut translation = Vector3::zeros();
    let mut mse_history = Vec::new();
    let mut prev_mse = f64::INFINITY;

    for _ in 0..max_iter.max(1) {
        let moved: Vec<Vector3<f64>> = source.iter().map(|p| rotation * p + translation).collect();
        let mut matched_tgt = Vec::with_capacity(moved.len());
        let mut mse = 0.0;
        for p in &moved {
            let (idx, d2) = tree.nearest(p).expect("target is non-empty");
            matched_tgt.push(target[idx]);
            mse += d2;
        }
        mse /= moved.len() as f64;
        mse_history.push(mse);

        check_spread(&matched_tgt)?;
        // Incremental rigid update on the moved cloud, composed into the
        // running transform.
        let step = crate::pose::rigid_align(&moved, &matched_tgt)?;
        rotation = step.rotation() * rotation;
        translation = step.rotation() * translation + step.translation();

        if prev_mse - mse < eps {
            break;
        }
        prev_mse = mse;
    }
    Ok(CloudAlignment {
        rotation,
        translation,
        mse_history,
    })
}

/// Rejects correspondence sets that are collinear or collapsed, for which the
/// rigid update is not unique.
fn check_spread(points: &[Vector3<f64>]) -> Result<()> {
    if points.len() < 3 {
        return Err(Error::Alignment(
            "fewer than 3 correspondences".into(),
        ));
    }
    let n = points.len() as f64;
    let centroid: Vector3<f64> = points.iter().sum::<Vector3<f64>>() / n;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        scatter += d * d.transpose();
    }
    let eig = scatter.symmetric_eigenvalues();
    let mut l: Vec<f64> = eig.iter().cloned().collect();
    l.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if l[0] <= 0.0 || l[1] < 1e-12 * l[0] {
        return Err(Error::Alignment(
            "correspondences are collinear; rotation is not determined".into(),
        ));
    }
    Ok(())
}

/// ICP-based camera pose correction: `source` is the scene cloud
/// backprojected from the query depth under `initial` (in world coordinates),
/// `target` the model cloud. The alignment X_true = S * X_init + d is folded
/// into the camera: points fixed in the camera frame imply
/// R_new = R0 * S^T and t_new = t0 - R0 * S^T * d.
pub fn icp_baseline(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    initial: &CameraPose,
    max_iter: usize,
    eps: f64,
) -> Result<CameraPose> {
    let a = align_clouds(source, target, max_iter, eps)?;
    let r0 = initial.rotation();
    let rst = r0 * a.rotation.transpose();
    CameraPose::from_nearly_orthonormal(rst, initial.translation() - rst * a.translation)
        .map_err(|e| Error::Alignment(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Rotation3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen::<f64>() * 10.0 - 5.0,
                    rng.gen::<f64>() * 10.0 - 5.0,
                    rng.gen::<f64>() * 10.0 - 5.0,
                )
            })
            .collect()
    }

    #[test]
    fn kd_tree_nearest_matches_brute_force() {
        let cloud = random_cloud(400, 1);
        let queries = random_cloud(100, 2);
        let tree = KdTree::build(&cloud);
        for q in &queries {
            let (idx, d2) = tree.nearest(q).unwrap();
            let brute = cloud
                .iter()
                .map(|p| (p - q).norm_squared())
                .fold(f64::INFINITY, f64::min);
            assert_relative_eq!(d2, brute, epsilon = 1e-12);
            assert_relative_eq!((cloud[idx] - q).norm_squared(), brute, epsilon = 1e-12);
        }
    }

    #[test]
    fn identical_clouds_align_to_identity() {
        let cloud = random_cloud(200, 3);
        let a = align_clouds(&cloud, &cloud, 50, 1e-12).unwrap();
        assert_relative_eq!(a.rotation, Matrix3::identity(), epsilon = 1e-10);
        assert_relative_eq!(a.translation, Vector3::zeros(), epsilon = 1e-10);
        assert!(a.mse_history[0] < 1e-20);
    }

    #[test]
    fn recovers_small_rigid_transform() {
        let source = random_cloud(300, 4);
        let rot = Rotation3::new(Vector3::new(0.02, -0.015, 0.03));
        let d = Vector3::new(0.05, -0.04, 0.06);
        let target: Vec<Vector3<f64>> = source.iter().map(|p| rot * p + d).collect();
        let a = align_clouds(&source, &target, 100, 1e-15).unwrap();
        assert_relative_eq!(a.rotation, *rot.matrix(), epsilon = 1e-6);
        assert_relative_eq!(a.translation, d, epsilon = 1e-6);
    }

    #[test]
    fn mse_is_non_increasing() {
        let source = random_cloud(250, 5);
        let rot = Rotation3::new(Vector3::new(0.05, 0.02, -0.04));
        let d = Vector3::new(0.2, 0.1, -0.15);
        let target: Vec<Vector3<f64>> = source.iter().map(|p| rot * p + d).collect();
        let a = align_clouds(&source, &target, 60, 0.0).unwrap();
        for w in a.mse_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "mse rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn collinear_targets_are_rejected() {
        let source = random_cloud(50, 6);
        let target: Vec<Vector3<f64>> = (0..50)
            .map(|i| Vector3::new(i as f64, 0.0, 0.0))
            .collect();
        // every source point snaps onto the line; scatter check must fire
        let r = align_clouds(&source, &target[..1].to_vec(), 10, 1e-9);
        assert!(matches!(r, Err(Error::Alignment(_))));
    }

    #[test]
    fn empty_cloud_is_an_error() {
        assert!(align_clouds(&[], &random_cloud(5, 7), 10, 1e-9).is_err());
        assert!(align_clouds(&random_cloud(5, 7), &[], 10, 1e-9).is_err());
    }

    #[test]
    fn pose_update_reproduces_camera_frame() {
        // If the world cloud moves by (S, d) while the camera-frame
        // observations stay fixed, the updated pose must project the moved
        // points exactly where the old pose projected the originals.
        let points = random_cloud(40, 8);
        let rot = Rotation3::new(Vector3::new(0.03, -0.02, 0.025));
        let d = Vector3::new(0.1, -0.08, 0.12);
        let moved: Vec<Vector3<f64>> = points.iter().map(|p| rot * p + d).collect();
        let initial = crate::synthetic::look_at(
            &Vector3::new(12.0, -14.0, 9.0),
            &Vector3::zeros(),
            &Vector3::new(0.0, 0.0, 1.0),
        );
        let updated = icp_baseline(&points, &moved, &initial, 100, 1e-15).unwrap();
        for (p, m) in points.iter().zip(&moved) {
            assert_relative_eq!(initial.transform(p), updated.transform(m), epsilon = 1e-6);
        }
    }
}
