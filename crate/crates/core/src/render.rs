//! Software z-buffer rasterizer producing the normal/depth/face-id maps the
//! gradient and verification stages consume.
//!
//! Flat per-face normals, top-left fill rule, depth ties within 1e-9 broken
//! by lower face index. Pixel centers sit at integer coordinates.

use nalgebra::{Vector2, Vector3};

use crate::camera::{CameraIntrinsics, CameraPose};
use crate::error::Result;
use crate::mesh::TriangleMesh;
use crate::raster::{DepthMap, NormalMap};

/// Near-plane depth; triangles crossing it are clipped, not discarded.
const NEAR_PLANE: f64 = 1e-6;
const DEPTH_TIE: f64 = 1e-9;

/// Rendered views of a mesh under one camera. The validity masks of the
/// normal, depth and face-id maps are identical by construction.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub normal_map: NormalMap,
    pub depth_map: DepthMap,
    pub face_ids: Vec<Option<usize>>,
    pub width: usize,
    pub height: usize,
    /// Set when the camera center lies inside the mesh bounding box.
    pub camera_inside_bbox: bool,
}

impl RenderOutput {
    #[inline]
    pub fn face_id(&self, x: usize, y: usize) -> Option<usize> {
        self.face_ids[y * self.width + x]
    }
}

/// Renders the mesh with hidden-surface removal. Per-pixel normal is the face
/// normal of the nearest covering triangle, in the camera frame, oriented
/// toward the camera. Back-facing and uncovered pixels are invalid.
pub fn render(mesh: &TriangleMesh, k: &CameraIntrinsics, pose: &CameraPose) -> RenderOutput {
    let width = k.width;
    let height = k.height;
    let mut depth = vec![f64::INFINITY; width * height];
    let mut face_of = vec![usize::MAX; width * height];

    let cam_verts: Vec<Vector3<f64>> = mesh.vertices().iter().map(|v| pose.transform(v)).collect();

    for (fi, face) in mesh.faces().iter().enumerate() {
        let tri = [cam_verts[face[0]], cam_verts[face[1]], cam_verts[face[2]]];
        // Clip against the near plane in camera space; fan-triangulate the
        // resulting polygon, keeping the original face id.
        for sub in clip_near(&tri) {
            rasterize_triangle(&sub, fi, k, width, height, &mut depth, &mut face_of);
        }
    }

    let mut normal_map = NormalMap::new_invalid(width, height);
    let mut depth_map = DepthMap::new_invalid(width, height);
    let mut face_ids = vec![None; width * height];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if face_of[i] == usize::MAX {
                continue;
            }
            let fi = face_of[i];
            let n_world = mesh.face_normal(fi);
            let mut n_cam = pose.rotation() * n_world;
            // Orient toward the camera: n . view < 0 with view = point direction.
            let p_cam = ray_through_pixel(k, x as f64, y as f64) * depth[i];
            if n_cam.dot(&p_cam) > 0.0 {
                n_cam = -n_cam;
            }
            normal_map
                .set(x, y, n_cam)
                .expect("face normals are unit length");
            depth_map.set(x, y, depth[i]).expect("depths pass the near plane");
            face_ids[i] = Some(fi);
        }
    }

    let (lo, hi) = if mesh.vertices().is_empty() {
        (Vector3::zeros(), Vector3::zeros())
    } else {
        mesh.bounding_box()
    };
    let c = pose.center();
    let camera_inside_bbox =
        (0..3).all(|a| c[a] >= lo[a] && c[a] <= hi[a]) && !mesh.vertices().is_empty();

    RenderOutput {
        normal_map,
        depth_map,
        face_ids,
        width,
        height,
        camera_inside_bbox,
    }
}

/// Camera-frame ray direction through a pixel center, scaled so z = 1.
fn ray_through_pixel(k: &CameraIntrinsics, x: f64, y: f64) -> Vector3<f64> {
    let yn = (y - k.cy) / k.fy;
    let xn = (x - k.cx - k.skew * yn) / k.fx;
    Vector3::new(xn, yn, 1.0)
}

fn clip_near(tri: &[Vector3<f64>; 3]) -> Vec<[Vector3<f64>; 3]> {
    let inside: Vec<bool> = tri.iter().map(|v| v.z >= NEAR_PLANE).collect();
    let n_in = inside.iter().filter(|b| **b).count();
    if n_in == 3 {
        return vec![*tri];
    }
    if n_in == 0 {
        return Vec::new();
    }
    // Sutherland-Hodgman against z = NEAR_PLANE.
    let mut poly: Vec<Vector3<f64>> = Vec::with_capacity(4);
    for i in 0..3 {
        let a = tri[i];
        let b = tri[(i + 1) % 3];
        let a_in = inside[i];
        let b_in = inside[(i + 1) % 3];
        if a_in {
            poly.push(a);
        }
        if a_in != b_in {
            let t = (NEAR_PLANE - a.z) / (b.z - a.z);
            poly.push(a + (b - a) * t);
        }
    }
    (1..poly.len().saturating_sub(1))
        .map(|i| [poly[0], poly[i], poly[i + 1]])
        .collect()
}

#[inline]
fn edge(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

/// Top-left fill rule: a pixel exactly on an edge belongs to the triangle iff
/// the edge is a top or left edge (counter-clockwise orientation assumed).
#[inline]
fn is_top_left(a: &Vector2<f64>, b: &Vector2<f64>) -> bool {
    let dy = b.y - a.y;
    let dx = b.x - a.x;
    dy < 0.0 || (dy == 0.0 && dx > 0.0)
}

fn rasterize_triangle(
    tri_cam: &[Vector3<f64>; 3],
    fi: usize,
    k: &CameraIntrinsics,
    width: usize,
    height: usize,
    depth: &mut [f64],
    face_of: &mut [usize],
) {
    let km = k.matrix();
    let mut pix = [Vector2::zeros(); 3];
    let mut inv_z = [0.0f64; 3];
    for (i, v) in tri_cam.iter().enumerate() {
        let h = km * v;
        pix[i] = Vector2::new(h.x / h.z, h.y / h.z);
        inv_z[i] = 1.0 / v.z;
    }
    let mut area = edge(&pix[0], &pix[1], &pix[2]);
    if area == 0.0 {
        return;
    }
    // Normalize to counter-clockwise in pixel coordinates.
    if area < 0.0 {
        pix.swap(1, 2);
        inv_z.swap(1, 2);
        area = -area;
    }
    let min_x = pix.iter().map(|p| p.x).fold(f64::INFINITY, f64::min).ceil().max(0.0) as usize;
    let max_x = pix
        .iter()
        .map(|p| p.x)
        .fold(f64::NEG_INFINITY, f64::max)
        .floor()
        .min(width as f64 - 1.0);
    let min_y = pix.iter().map(|p| p.y).fold(f64::INFINITY, f64::min).ceil().max(0.0) as usize;
    let max_y = pix
        .iter()
        .map(|p| p.y)
        .fold(f64::NEG_INFINITY, f64::max)
        .floor()
        .min(height as f64 - 1.0);
    if max_x < 0.0 || max_y < 0.0 {
        return;
    }
    let (max_x, max_y) = (max_x as usize, max_y as usize);

    let tl = [
        is_top_left(&pix[1], &pix[2]),
        is_top_left(&pix[2], &pix[0]),
        is_top_left(&pix[0], &pix[1]),
    ];
    for y in min_y..=max_y {
        for x in min_x..=max_x {
            let p = Vector2::new(x as f64, y as f64);
            let w0 = edge(&pix[1], &pix[2], &p);
            let w1 = edge(&pix[2], &pix[0], &p);
            let w2 = edge(&pix[0], &pix[1], &p);
            let covered = (w0 > 0.0 || (w0 == 0.0 && tl[0]))
                && (w1 > 0.0 || (w1 == 0.0 && tl[1]))
                && (w2 > 0.0 || (w2 == 0.0 && tl[2]));
            if !covered {
                continue;
            }
            // 1/z is affine in screen space.
            let zi = (w0 * inv_z[0] + w1 * inv_z[1] + w2 * inv_z[2]) / area;
            if zi <= 0.0 {
                continue;
            }
            let z = 1.0 / zi;
            let i = y * width + x;
            let better = z < depth[i] - DEPTH_TIE
                || ((z - depth[i]).abs() <= DEPTH_TIE && fi < face_of[i]);
            if better {
                depth[i] = z;
                face_of[i] = fi;
            }
        }
    }
}

/// Exactly the valid pixels of a render.
pub fn visible_pixel_set(output: &RenderOutput) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..output.height {
        for x in 0..output.width {
            if output.depth_map.is_valid(x, y) {
                out.push((x, y));
            }
        }
    }
    out
}

/// Backprojects every valid depth pixel into a world-frame point.
pub fn backproject(depth: &DepthMap, k: &CameraIntrinsics, pose: &CameraPose) -> Vec<Vector3<f64>> {
    let mut points = Vec::new();
    for y in 0..depth.height {
        for x in 0..depth.width {
            if let Some(d) = depth.get(x, y) {
                points.push(backproject_pixel(x as f64, y as f64, d, k, pose));
            }
        }
    }
    points
}

/// Single-pixel backprojection through a given depth.
pub fn backproject_pixel(
    x: f64,
    y: f64,
    depth: f64,
    k: &CameraIntrinsics,
    pose: &CameraPose,
) -> Vector3<f64> {
    let p_cam = ray_through_pixel(k, x, y) * depth;
    pose.rotation().transpose() * (p_cam - pose.translation())
}

/// Camera-frame backprojection (no extrinsics applied).
pub fn backproject_pixel_camera_frame(
    x: f64,
    y: f64,
    depth: f64,
    k: &CameraIntrinsics,
) -> Vector3<f64> {
    ray_through_pixel(k, x, y) * depth
}

/// Debug export of a render's maps in the plain-text raster format.
pub fn dump_render(output: &RenderOutput, dir: &std::path::Path, stem: &str) -> Result<()> {
    output
        .normal_map
        .write_text(&dir.join(format!("{stem}_normals.txt")))?;
    output
        .depth_map
        .write_text(&dir.join(format!("{stem}_depth.txt")))?;
    output.normal_map.write_pgm(&dir.join(format!("{stem}_normals.pgm")))?;
    Ok(())
}
