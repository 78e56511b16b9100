//! Plausibility check over the refined pose hypotheses: pairwise mutual
//! reprojection errors, a compatibility graph thresholded at 5 % of the
//! longest image dimension, depth-first search for the largest connected
//! component, and the success decision with final pose selection.

use nalgebra::Vector3;

use crate::camera::{project_point, CameraIntrinsics, ProjectionMatrix};
use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;
use crate::pose::PoseHypothesis;
use crate::render::{backproject_pixel, render};

/// Fraction of the longest image dimension used as compatibility threshold.
pub const COMPATIBILITY_FRACTION: f64 = 0.05;

/// Pixel stride (per axis) of the visibility sampling: every 4th valid pixel.
pub const DEFAULT_VISIBILITY_STRIDE: usize = 2;

/// Undirected compatibility graph over refined pose hypotheses.
#[derive(Debug, Clone)]
pub struct CompatibilityGraph {
    pub nodes: Vec<PoseHypothesis>,
    /// Unordered index pairs (i < j) with delta below the threshold.
    pub edges: Vec<(usize, usize)>,
    /// Deltas for all comparable pairs (i < j), for reporting.
    pub deltas: Vec<(usize, usize, f64)>,
    pub threshold: f64,
}

impl CompatibilityGraph {
    /// Edge list with delta values as CSV lines: i, j, delta.
    pub fn edges_to_csv(&self) -> String {
        let mut s = String::from("i,j,delta\n");
        for &(i, j, d) in &self.deltas {
            s.push_str(&format!("{i},{j},{d}\n"));
        }
        s
    }
}

/// Decision of the plausibility check.
#[derive(Debug, Clone)]
pub enum Verdict {
    /// Registration accepted: the selected hypothesis and the indices of the
    /// largest connected component it was drawn from.
    Success {
        selected: usize,
        component: Vec<usize>,
    },
    /// Largest component too small; registration rejected.
    Rejected { largest_component: Vec<usize> },
}

/// Mean mutual reprojection distance between two cameras: for each pose, its
/// visible model points are projected under both and the Euclidean pixel
/// distances averaged; the two directional means are then averaged. Symmetric
/// by construction. Points are projected under the second camera without an
/// occlusion check.
pub fn mutual_reprojection_error(
    p: &ProjectionMatrix,
    p_prime: &ProjectionMatrix,
    visible_under_p: &[Vector3<f64>],
    visible_under_p_prime: &[Vector3<f64>],
) -> Result<f64> {
    if visible_under_p.is_empty() || visible_under_p_prime.is_empty() {
        return Err(Error::Incomparable);
    }
    let mean = |points: &[Vector3<f64>]| -> f64 {
        let mut sum = 0.0;
        for x in points {
            sum += pixel_distance(p, p_prime, x);
        }
        sum / points.len() as f64
    };
    Ok(0.5 * (mean(visible_under_p) + mean(visible_under_p_prime)))
}

fn pixel_distance(p: &ProjectionMatrix, p_prime: &ProjectionMatrix, x: &Vector3<f64>) -> f64 {
    match (project_point(p, x), project_point(p_prime, x)) {
        (Ok((a, _)), Ok((b, _))) => (a - b).norm(),
        // A point at (numerical) infinity under either camera contributes the
        // same hard penalty used in pose scoring.
        _ => crate::pose::BEHIND_CAMERA_PENALTY,
    }
}

/// Model points visible under a hypothesis: the mesh is rendered and every
/// `stride`-th valid depth pixel backprojected to the world frame. Requires a
/// decomposed hypothesis (intrinsics and pose) to drive the rasterizer.
pub fn visibility_sample(
    hyp: &PoseHypothesis,
    mesh: &TriangleMesh,
    stride: usize,
) -> Vec<Vector3<f64>> {
    let Some((k, pose)) = &hyp.decomposed else {
        return Vec::new();
    };
    let out = render(mesh, k, pose);
    let mut points = Vec::new();
    for y in (0..out.height).step_by(stride.max(1)) {
        for x in (0..out.width).step_by(stride.max(1)) {
            if let Some(depth) = out.depth_map.get(x, y) {
                points.push(backproject_pixel(x as f64, y as f64, depth, k, pose));
            }
        }
    }
    points
}

/// Builds the compatibility graph: every pair of hypotheses is compared via
/// the mutual reprojection error over their rendered visibility samples, and
/// pairs below 5 % of the longest image dimension become edges. Incomparable
/// pairs (a hypothesis seeing no mesh pixels) get no edge.
pub fn build_graph(
    hypotheses: Vec<PoseHypothesis>,
    mesh: &TriangleMesh,
    k: &CameraIntrinsics,
    stride: usize,
) -> Result<CompatibilityGraph> {
    if hypotheses.is_empty() {
        return Err(Error::invalid("build_graph", "needs at least 1 hypothesis"));
    }
    let threshold = COMPATIBILITY_FRACTION * k.width.max(k.height) as f64;
    let samples: Vec<Vec<Vector3<f64>>> = hypotheses
        .iter()
        .map(|h| visibility_sample(h, mesh, stride))
        .collect();
    let mut edges = Vec::new();
    let mut deltas = Vec::new();
    for i in 0..hypotheses.len() {
        for j in i + 1..hypotheses.len() {
            match mutual_reprojection_error(
                &hypotheses[i].projection,
                &hypotheses[j].projection,
                &samples[i],
                &samples[j],
            ) {
                Ok(delta) => {
                    deltas.push((i, j, delta));
                    if delta < threshold {
                        edges.push((i, j));
                    }
                }
                Err(Error::Incomparable) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(CompatibilityGraph {
        nodes: hypotheses,
        edges,
        deltas,
        threshold,
    })
}

/// Largest connected component by iterative depth-first search. Ties in size
/// go to the component containing the lowest node index (first discovered).
pub fn largest_component(node_count: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut adj = vec![Vec::new(); node_count];
    for &(i, j) in edges {
        adj[i].push(j);
        adj[j].push(i);
    }
    let mut seen = vec![false; node_count];
    let mut best: Vec<usize> = Vec::new();
    for start in 0..node_count {
        if seen[start] {
            continue;
        }
        let mut component = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(n) = stack.pop() {
            component.push(n);
            for &m in &adj[n] {
                if !seen[m] {
                    seen[m] = true;
                    stack.push(m);
                }
            }
        }
        if component.len() > best.len() {
            best = component;
        }
    }
    best.sort_unstable();
    best
}

/// Success decision and final pose selection. The registration is accepted
/// iff the largest connected component has more than three nodes; the
/// returned pose is its member with the largest consensus set (ties broken by
/// lower reprojection RMSE, then lower index).
pub fn select_pose(graph: &CompatibilityGraph) -> Verdict {
    let component = largest_component(graph.nodes.len(), &graph.edges);
    if component.len() <= 3 {
        return Verdict::Rejected {
            largest_component: component,
        };
    }
    let selected = *component
        .iter()
        .min_by(|&&a, &&b| {
            let ha = &graph.nodes[a];
            let hb = &graph.nodes[b];
            hb.inlier_indices
                .len()
                .cmp(&ha.inlier_indices.len())
                .then(ha.consensus_rmse.partial_cmp(&hb.consensus_rmse).unwrap())
                .then(a.cmp(&b))
        })
        .expect("component is non-empty");
    Verdict::Success {
        selected,
        component,
    }
}
