//! Depth rendering and depth-consistency visibility.
//!
//! Depth is camera-axis depth `w`. Empty pixels hold [`EMPTY_DEPTH`].

use std::io::Write;

use log::warn;

use crate::error::{Error, Result};
use crate::geometry::{project, world_to_camera, Camera, PointCloud, Projection, TriangleMesh, Vec3};

/// Sentinel for pixels no geometry covers.
pub const EMPTY_DEPTH: f64 = f64::INFINITY;

/// Triangles are clipped against this camera-axis depth before projection.
const NEAR_CLIP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn empty(width: usize, height: usize) -> Self {
        DepthMap {
            width,
            height,
            data: vec![EMPTY_DEPTH; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Row-major, `y * width + x`.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn is_empty_at(&self, x: usize, y: usize) -> bool {
        self.get(x, y) == EMPTY_DEPTH
    }

    fn keep_min(&mut self, x: usize, y: usize, depth: f64) {
        let slot = &mut self.data[y * self.width + x];
        if depth < *slot {
            *slot = depth;
        }
    }

    pub fn covered(&self) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().copied().filter(|&d| d != EMPTY_DEPTH)
    }

    /// Little-endian grayscale PFM; empty pixels are written as 0.
    pub fn write_pfm(&self, w: &mut impl Write) -> Result<()> {
        write!(w, "Pf\n{} {}\n-1.0\n", self.width, self.height)?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        // PFM stores the bottom row first.
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                let d = self.get(x, y);
                let v = if d == EMPTY_DEPTH { 0.0 } else { d as f32 };
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }
}

/// Nearest pixel for an image-plane position, `None` when off-image.
pub fn pixel_of(x: f64, y: f64, cam: &Camera) -> Option<(usize, usize)> {
    let px = (x + 0.5).floor();
    let py = (y + 0.5).floor();
    if px >= 0.0 && py >= 0.0 && px < cam.width as f64 && py < cam.height as f64 {
        Some((px as usize, py as usize))
    } else {
        None
    }
}

/// Clips a camera-space polygon to `w >= NEAR_CLIP`.
fn clip_near(poly: &[Vec3]) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let a_in = a.z >= NEAR_CLIP;
        let b_in = b.z >= NEAR_CLIP;
        if a_in {
            out.push(a);
        }
        if a_in != b_in {
            let t = (NEAR_CLIP - a.z) / (b.z - a.z);
            let mut p = a + (b - a) * t;
            p.z = NEAR_CLIP;
            out.push(p);
        }
    }
    out
}

struct ScreenVertex {
    x: f64,
    y: f64,
    inv_w: f64,
}

fn raster_triangle(depth: &mut DepthMap, cam: &Camera, v: [&ScreenVertex; 3]) {
    let [a, b, c] = v;
    let area = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    if area == 0.0 || !area.is_finite() {
        return;
    }
    let lo_x = a.x.min(b.x).min(c.x).ceil().max(0.0);
    let hi_x = a.x.max(b.x).max(c.x).floor().min(cam.width as f64 - 1.0);
    let lo_y = a.y.min(b.y).min(c.y).ceil().max(0.0);
    let hi_y = a.y.max(b.y).max(c.y).floor().min(cam.height as f64 - 1.0);
    if lo_x > hi_x || lo_y > hi_y {
        return;
    }
    let edge = |p: &ScreenVertex, q: &ScreenVertex, x: f64, y: f64| (q.x - p.x) * (y - p.y) - (q.y - p.y) * (x - p.x);
    for py in lo_y as usize..=hi_y as usize {
        for px in lo_x as usize..=hi_x as usize {
            let (x, y) = (px as f64, py as f64);
            let e0 = edge(b, c, x, y) / area;
            let e1 = edge(c, a, x, y) / area;
            let e2 = edge(a, b, x, y) / area;
            if e0 < 0.0 || e1 < 0.0 || e2 < 0.0 {
                continue;
            }
            // 1/w is affine in screen space; interpolating it is perspective-correct.
            let inv_w = e0 * a.inv_w + e1 * b.inv_w + e2 * c.inv_w;
            if inv_w > 0.0 {
                depth.keep_min(px, py, 1.0 / inv_w);
            }
        }
    }
}

/// Z-buffered rasterization with no face culling, sampled at pixel centers.
pub fn render_depth_mesh(mesh: &TriangleMesh, cam: &Camera) -> DepthMap {
    let mut depth = DepthMap::empty(cam.width, cam.height);
    let cam_verts: Vec<Vec3> = mesh.vertices.iter().map(|p| world_to_camera(p, cam)).collect();
    for t in &mesh.triangles {
        let tri = [cam_verts[t[0]], cam_verts[t[1]], cam_verts[t[2]]];
        let poly = if tri.iter().all(|p| p.z >= NEAR_CLIP) {
            tri.to_vec()
        } else {
            clip_near(&tri)
        };
        if poly.len() < 3 {
            continue;
        }
        let screen: Vec<ScreenVertex> = poly
            .iter()
            .map(|p| ScreenVertex {
                x: cam.fx * p.x / p.z + cam.cx,
                y: cam.fy * p.y / p.z + cam.cy,
                inv_w: 1.0 / p.z,
            })
            .collect();
        for k in 1..screen.len() - 1 {
            raster_triangle(&mut depth, cam, [&screen[0], &screen[k], &screen[k + 1]]);
        }
    }
    depth
}

/// Splats each point as a `(2 * splat_px + 1)^2` square, keeping the minimum depth.
pub fn render_depth_points(cloud: &PointCloud, cam: &Camera, splat_px: usize) -> DepthMap {
    let mut depth = DepthMap::empty(cam.width, cam.height);
    let s = splat_px as i64;
    for p in &cloud.points {
        let Projection::InFront { x, y, depth: w } = project(&world_to_camera(p, cam), cam) else {
            continue;
        };
        let cx = (x + 0.5).floor();
        let cy = (y + 0.5).floor();
        if !cx.is_finite() || !cy.is_finite() {
            continue;
        }
        let (cx, cy) = (cx as i64, cy as i64);
        for py in cy - s..=cy + s {
            for px in cx - s..=cx + s {
                if px >= 0 && py >= 0 && (px as usize) < cam.width && (py as usize) < cam.height {
                    depth.keep_min(px as usize, py as usize, w);
                }
            }
        }
    }
    depth
}

/// `fraction * (max - min)` over covered pixels.
pub fn compute_tau(depth: &DepthMap, fraction: f64) -> Result<f64> {
    if !(fraction >= 0.0) {
        return Err(Error::invalid(format!("tau fraction must be >= 0, got {fraction}")));
    }
    let (lo, hi) = depth
        .covered()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)));
    if lo > hi {
        return Err(Error::Empty("compute_tau: depth map has no covered pixel"));
    }
    Ok(fraction * (hi - lo))
}

/// A point is visible when it lies in front of the camera, lands on a
/// covered pixel and its depth agrees with that pixel strictly within `tau`.
pub fn observation_mask(cloud: &PointCloud, cam: &Camera, depth: &DepthMap, tau: f64) -> Result<Vec<bool>> {
    if depth.width != cam.width || depth.height != cam.height {
        return Err(Error::shape(
            "observation_mask",
            format!(
                "depth map {}x{} vs camera {}x{}",
                depth.width, depth.height, cam.width, cam.height
            ),
        ));
    }
    if !(tau >= 0.0) {
        return Err(Error::invalid(format!("tau must be >= 0, got {tau}")));
    }
    Ok(cloud
        .points
        .iter()
        .map(|p| match project(&world_to_camera(p, cam), cam) {
            Projection::Behind => false,
            Projection::InFront { x, y, depth: w } => match pixel_of(x, y, cam) {
                None => false,
                Some((px, py)) => {
                    let d = depth.get(px, py);
                    d != EMPTY_DEPTH && (d - w).abs() < tau
                }
            },
        })
        .collect())
}

pub fn extract_visible(cloud: &PointCloud, mask: &[bool]) -> Result<PointCloud> {
    if mask.len() != cloud.len() {
        return Err(Error::shape(
            "extract_visible",
            format!("mask has {} entries, cloud has {} points", mask.len(), cloud.len()),
        ));
    }
    let points: Vec<Vec3> = cloud
        .points
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(p, _)| *p)
        .collect();
    if points.is_empty() {
        warn!("extract_visible: no visible points out of {}", cloud.len());
    }
    Ok(PointCloud::new(points))
}

/// Concatenates per-view visible clouds in view order.
pub fn union_visible(views: &[PointCloud]) -> Result<PointCloud> {
    if views.is_empty() {
        return Err(Error::invalid("union_visible needs at least one view"));
    }
    let points: Vec<Vec3> = views.iter().flat_map(|v| v.points.iter().copied()).collect();
    if points.is_empty() {
        return Err(Error::Empty("union_visible: every view is empty"));
    }
    Ok(PointCloud::new(points))
}

/// Renders `mesh` from `cam`, derives tau from the depth range and returns
/// the visible subset of `cloud`.
pub fn visible_from_mesh(
    mesh: &TriangleMesh,
    cloud: &PointCloud,
    cam: &Camera,
    tau_fraction: f64,
) -> Result<PointCloud> {
    let depth = render_depth_mesh(mesh, cam);
    let tau = compute_tau(&depth, tau_fraction)?;
    let mask = observation_mask(cloud, cam, &depth, tau)?;
    extract_visible(cloud, &mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Mat3;

    fn cam(size: usize) -> Camera {
        Camera::new(Mat3::identity(), Vec3::zeros(), size as f64, size as f64, size, size).unwrap()
    }

    fn square(z: f64, half: f64) -> TriangleMesh {
        TriangleMesh::new(
            vec![
                Vec3::new(-half, -half, z),
                Vec3::new(half, -half, z),
                Vec3::new(half, half, z),
                Vec3::new(-half, half, z),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap()
    }

    #[test]
    fn plane_fills_image_at_constant_depth() {
        let d = render_depth_mesh(&square(2.0, 10.0), &cam(16));
        assert!(d.data().iter().all(|&v| (v - 2.0).abs() < 1e-6));
    }

    #[test]
    fn nearer_square_wins() {
        let mut mesh = square(2.0, 10.0);
        mesh.append(&square(1.0, 0.2));
        let d = render_depth_mesh(&mesh, &cam(16));
        assert_eq!(d.get(8, 8), 1.0);
        assert_eq!(d.get(0, 0), 2.0);
    }

    #[test]
    fn behind_camera_and_empty_mesh() {
        let d = render_depth_mesh(&square(-1.0, 10.0), &cam(8));
        assert!(d.data().iter().all(|&v| v == EMPTY_DEPTH));
        let d = render_depth_mesh(&TriangleMesh::default(), &cam(8));
        assert!(d.covered().next().is_none());
        assert!(compute_tau(&d, 0.05).is_err());
    }

    #[test]
    fn triangle_crossing_near_plane_is_clipped() {
        // Floor below the camera extending behind it.
        let mesh = TriangleMesh::new(
            vec![Vec3::new(-5.0, 1.0, -3.0), Vec3::new(5.0, 1.0, -3.0), Vec3::new(0.0, 1.0, 6.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let d = render_depth_mesh(&mesh, &cam(32));
        let covered: Vec<f64> = d.covered().collect();
        assert!(!covered.is_empty());
        // Floor at v = 1 seen at pixel row y gives w = fy / (y - cy).
        for y in 0..32 {
            for x in 0..32 {
                let v = d.get(x, y);
                if v != EMPTY_DEPTH {
                    let expect = 32.0 / (y as f64 - 15.5);
                    assert!((v - expect).abs() < 1e-9 * expect.max(1.0), "{v} vs {expect}");
                }
            }
        }
    }

    #[test]
    fn point_splats() {
        let c = cam(9);
        let one = PointCloud::new(vec![Vec3::new(0.0, 0.0, 3.0)]);
        assert_eq!(render_depth_points(&one, &c, 0).covered().count(), 1);
        assert_eq!(render_depth_points(&one, &c, 1).covered().count(), 9);
        let two = PointCloud::new(vec![Vec3::new(0.0, 0.0, 3.0), Vec3::new(0.0, 0.0, 1.5)]);
        let d = render_depth_points(&two, &c, 0);
        assert_eq!(d.get(4, 4), 1.5);
    }

    #[test]
    fn tau_from_depth_range() {
        let mut d = DepthMap::empty(2, 1);
        d.keep_min(0, 0, 1.0);
        d.keep_min(1, 0, 3.0);
        assert!((compute_tau(&d, 0.05).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(compute_tau(&d, 0.0).unwrap(), 0.0);
        let flat = render_depth_mesh(&square(2.0, 10.0), &cam(4));
        assert_eq!(compute_tau(&flat, 0.05).unwrap(), 0.0);
    }

    #[test]
    fn threshold_cases() {
        let c = cam(16);
        let mesh = square(2.0, 10.0);
        let d = render_depth_mesh(&mesh, &c);
        let tau = 0.1;
        let cloud = PointCloud::new(vec![
            Vec3::new(0.0, 0.0, 2.0),
            Vec3::new(0.0, 0.0, 2.0 + 2.0 * tau),
            Vec3::new(0.0, 0.0, -2.0),
            Vec3::new(100.0, 0.0, 2.0),
        ]);
        let m = observation_mask(&cloud, &c, &d, tau).unwrap();
        assert_eq!(m, vec![true, false, false, false]);
        // Strict inequality: tau = 0 admits nothing.
        let m0 = observation_mask(&cloud, &c, &d, 0.0).unwrap();
        assert!(m0.iter().all(|v| !v));
    }

    #[test]
    fn extract_and_union() {
        let pts: Vec<Vec3> = (0..4).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let cloud = PointCloud::new(pts.clone());
        assert_eq!(extract_visible(&cloud, &[true; 4]).unwrap(), cloud);
        assert!(extract_visible(&cloud, &[false; 4]).unwrap().is_empty());
        let alt = extract_visible(&cloud, &[true, false, true, false]).unwrap();
        assert_eq!(alt.points, vec![pts[0], pts[2]]);
        assert!(extract_visible(&cloud, &[true]).is_err());

        assert_eq!(union_visible(std::slice::from_ref(&cloud)).unwrap(), cloud);
        assert_eq!(union_visible(&[cloud.clone(), alt]).unwrap().len(), 6);
        assert!(union_visible(&[]).is_err());
        assert!(union_visible(&[PointCloud::default()]).is_err());
    }

    #[test]
    fn pfm_header_and_size() {
        let d = render_depth_mesh(&square(2.0, 0.1), &cam(4));
        let mut buf = Vec::new();
        d.write_pfm(&mut buf).unwrap();
        assert!(buf.starts_with(b"Pf\n4 4\n-1.0\n"));
        assert_eq!(buf.len(), 12 + 16 * 4);
    }
}
