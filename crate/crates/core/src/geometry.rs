//! Geometry ingestion, normalization, surface sampling and pinhole cameras.
//!
//! Conventions: right-handed world frame with +z up. Camera coordinates are
//! `(u, v, w)` = (right, down, forward); `w > 0` is in front of the camera.
//! Pixel `(x, y)` has its center at integer coordinates.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand_distr::{weighted::WeightedIndex, Distribution};

use crate::error::{Error, Result};
use crate::numcore::Rng;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        bounds_of(&self.points)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = TriangleMesh { vertices, triangles };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if let Some((i, t)) = self
            .triangles
            .iter()
            .enumerate()
            .find(|(_, t)| t.iter().any(|&v| v >= n))
        {
            return Err(Error::invalid(format!(
                "triangle {i} references vertex {t:?} but mesh has {n} vertices"
            )));
        }
        Ok(())
    }

    pub fn triangle(&self, i: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[i];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn triangle_area(&self, i: usize) -> f64 {
        let [a, b, c] = self.triangle(i);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Appends another mesh, reindexing its triangles.
    pub fn append(&mut self, other: &TriangleMesh) {
        let off = self.vertices.len();
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles
            .extend(other.triangles.iter().map(|t| [t[0] + off, t[1] + off, t[2] + off]));
    }

    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        bounds_of(&self.vertices)
    }
}

fn bounds_of(points: &[Vec3]) -> Option<(Vec3, Vec3)> {
    let first = *points.first()?;
    Some(points.iter().fold((first, first), |(lo, hi), p| {
        (lo.inf(p), hi.sup(p))
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Geometry {
    Mesh(TriangleMesh),
    Cloud(PointCloud),
}

impl Geometry {
    fn points(&self) -> &[Vec3] {
        match self {
            Geometry::Mesh(m) => &m.vertices,
            Geometry::Cloud(c) => &c.points,
        }
    }

    fn points_mut(&mut self) -> &mut [Vec3] {
        match self {
            Geometry::Mesh(m) => &mut m.vertices,
            Geometry::Cloud(c) => &mut c.points,
        }
    }

    /// Surface points: the cloud itself, or mesh vertices.
    pub fn to_cloud(&self) -> PointCloud {
        PointCloud::new(self.points().to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeometryFormat {
    Obj,
    Ply,
    Xyz,
}

impl GeometryFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("obj") => Ok(GeometryFormat::Obj),
            Some("ply") => Ok(GeometryFormat::Ply),
            Some("xyz") | Some("txt") => Ok(GeometryFormat::Xyz),
            other => Err(Error::invalid(format!(
                "cannot infer geometry format from extension {other:?} of {}",
                path.display()
            ))),
        }
    }
}

pub fn load_geometry(path: &Path, format: GeometryFormat) -> Result<Geometry> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_geometry(&text, format, path)
}

/// Parses geometry text; `origin` is only used in error messages.
pub fn parse_geometry(text: &str, format: GeometryFormat, origin: &Path) -> Result<Geometry> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let parse_f = |tok: Option<&str>, line: usize| -> Result<f64> {
        let tok = tok.ok_or_else(|| perr(line, "missing coordinate".into()))?;
        let v: f64 = tok
            .parse()
            .map_err(|_| perr(line, format!("bad number `{tok}`")))?;
        if !v.is_finite() {
            return Err(perr(line, format!("non-finite coordinate `{tok}`")));
        }
        Ok(v)
    };

    let geom = match format {
        GeometryFormat::Obj => {
            let mut vertices = Vec::new();
            let mut triangles = Vec::new();
            for (i, raw) in text.lines().enumerate() {
                let line = i + 1;
                let mut toks = raw.split_whitespace();
                match toks.next() {
                    Some("v") => {
                        let x = parse_f(toks.next(), line)?;
                        let y = parse_f(toks.next(), line)?;
                        let z = parse_f(toks.next(), line)?;
                        vertices.push(Vec3::new(x, y, z));
                    }
                    Some("f") => {
                        let idx = toks
                            .map(|t| {
                                let head = t.split('/').next().unwrap_or("");
                                let k: i64 = head
                                    .parse()
                                    .map_err(|_| perr(line, format!("bad face index `{t}`")))?;
                                let n = vertices.len() as i64;
                                let k = if k < 0 { n + k } else { k - 1 };
                                if k < 0 || k >= n {
                                    return Err(perr(line, format!("face index `{t}` out of range")));
                                }
                                Ok(k as usize)
                            })
                            .collect::<Result<Vec<_>>>()?;
                        if idx.len() < 3 {
                            return Err(perr(line, "face with fewer than 3 vertices".into()));
                        }
                        for k in 1..idx.len() - 1 {
                            triangles.push([idx[0], idx[k], idx[k + 1]]);
                        }
                    }
                    _ => {}
                }
            }
            if vertices.is_empty() {
                return Err(Error::Empty("OBJ file has no vertices"));
            }
            if triangles.is_empty() {
                Geometry::Cloud(PointCloud::new(vertices))
            } else {
                Geometry::Mesh(TriangleMesh::new(vertices, triangles)?)
            }
        }
        GeometryFormat::Xyz => {
            let mut points = Vec::new();
            for (i, raw) in text.lines().enumerate() {
                let raw = raw.trim();
                if raw.is_empty() || raw.starts_with('#') {
                    continue;
                }
                let mut toks = raw.split_whitespace();
                let x = parse_f(toks.next(), i + 1)?;
                let y = parse_f(toks.next(), i + 1)?;
                let z = parse_f(toks.next(), i + 1)?;
                points.push(Vec3::new(x, y, z));
            }
            if points.is_empty() {
                return Err(Error::Empty("XYZ file has no points"));
            }
            Geometry::Cloud(PointCloud::new(points))
        }
        GeometryFormat::Ply => parse_ply(text, origin)?,
    };
    Ok(geom)
}

fn parse_ply(text: &str, origin: &Path) -> Result<Geometry> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(perr(1, "missing `ply` magic".into())),
    }
    let mut n_vertex = 0usize;
    let mut n_face = 0usize;
    let mut vertex_props: Vec<String> = Vec::new();
    let mut current = "";
    let mut header_end = None;
    for (i, raw) in lines.by_ref() {
        let toks: Vec<&str> = raw.split_whitespace().collect();
        match toks.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => {
                return Err(perr(i + 1, format!("only ASCII PLY is supported, got `{fmt}`")))
            }
            ["element", "vertex", n] => {
                n_vertex = n.parse().map_err(|_| perr(i + 1, "bad vertex count".into()))?;
                current = "vertex";
            }
            ["element", "face", n] => {
                n_face = n.parse().map_err(|_| perr(i + 1, "bad face count".into()))?;
                current = "face";
            }
            ["element", ..] => current = "other",
            ["property", .., name] if current == "vertex" => vertex_props.push(name.to_string()),
            ["end_header"] => {
                header_end = Some(i + 1);
                break;
            }
            _ => {}
        }
    }
    let header_end = header_end.ok_or_else(|| perr(1, "missing end_header".into()))?;
    let pos = |name: &str| {
        vertex_props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| perr(header_end, format!("vertex property `{name}` missing")))
    };
    let (ix, iy, iz) = (pos("x")?, pos("y")?, pos("z")?);

    let mut body = lines.filter(|(_, l)| !l.trim().is_empty());
    let mut vertices = Vec::with_capacity(n_vertex);
    for k in 0..n_vertex {
        let (i, raw) = body.next().ok_or_else(|| {
            perr(
                header_end + k + 1,
                format!("header declares {n_vertex} vertices, file ends after {k}"),
            )
        })?;
        let toks: Vec<&str> = raw.split_whitespace().collect();
        if toks.len() < vertex_props.len() {
            return Err(perr(
                i + 1,
                format!("vertex line has {} values, header declares {}", toks.len(), vertex_props.len()),
            ));
        }
        let get = |j: usize| -> Result<f64> {
            toks[j]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| perr(i + 1, format!("bad number `{}`", toks[j])))
        };
        vertices.push(Vec3::new(get(ix)?, get(iy)?, get(iz)?));
    }
    let mut triangles = Vec::new();
    for k in 0..n_face {
        let (i, raw) = body.next().ok_or_else(|| {
            perr(
                header_end + n_vertex + k + 1,
                format!("header declares {n_face} faces, file ends after {k}"),
            )
        })?;
        let toks: Vec<usize> = raw
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| perr(i + 1, format!("bad face index `{t}`"))))
            .collect::<Result<_>>()?;
        let (&cnt, idx) = toks
            .split_first()
            .ok_or_else(|| perr(i + 1, "empty face line".into()))?;
        if idx.len() != cnt || cnt < 3 {
            return Err(perr(i + 1, format!("face declares {cnt} indices, has {}", idx.len())));
        }
        for j in 1..cnt - 1 {
            triangles.push([idx[0], idx[j], idx[j + 1]]);
        }
    }
    if let Some((i, _)) = body.next() {
        return Err(perr(
            i + 1,
            format!("unexpected data after {n_vertex} vertices and {n_face} faces"),
        ));
    }
    if vertices.is_empty() {
        return Err(Error::Empty("PLY file has no vertices"));
    }
    if triangles.is_empty() {
        Ok(Geometry::Cloud(PointCloud::new(vertices)))
    } else {
        Ok(Geometry::Mesh(TriangleMesh::new(vertices, triangles)?))
    }
}

/// ASCII PLY with a comment naming the generator version.
pub fn write_ply(cloud: &PointCloud, w: &mut impl Write) -> Result<()> {
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "comment generated by p23d {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(w, "element vertex {}", cloud.len())?;
    writeln!(w, "property float x")?;
    writeln!(w, "property float y")?;
    writeln!(w, "property float z")?;
    writeln!(w, "end_header")?;
    for p in &cloud.points {
        writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
    }
    Ok(())
}

/// Uniform scale plus translation: `p' = (p - center) * scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub center: Vec3,
    pub scale: f64,
}

impl Similarity {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        (p - self.center) * self.scale
    }

    pub fn invert(&self, p: &Vec3) -> Vec3 {
        p / self.scale + self.center
    }
}

/// Centers the bounding box at the origin and scales the longest extent to 1.
pub fn normalize_unit_cube(geometry: &Geometry) -> Result<(Geometry, Similarity)> {
    let (lo, hi) = bounds_of(geometry.points()).ok_or(Error::Empty("normalize: no points"))?;
    let extent = (hi - lo).max();
    if !(extent > 0.0) {
        return Err(Error::invalid("normalize: geometry has zero extent"));
    }
    let t = Similarity {
        center: (lo + hi) * 0.5,
        scale: 1.0 / extent,
    };
    let mut out = geometry.clone();
    for p in out.points_mut() {
        *p = t.apply(p);
    }
    Ok((out, t))
}

pub fn normalize_mesh(mesh: &TriangleMesh) -> Result<TriangleMesh> {
    match normalize_unit_cube(&Geometry::Mesh(mesh.clone()))?.0 {
        Geometry::Mesh(m) => Ok(m),
        Geometry::Cloud(_) => unreachable!(),
    }
}

/// Area-weighted uniform samples; also returns the source triangle of each.
pub fn sample_surface_with_faces(
    mesh: &TriangleMesh,
    count: usize,
    rng: &mut Rng,
) -> Result<(PointCloud, Vec<usize>)> {
    if count == 0 {
        return Err(Error::invalid("sample_surface: count must be >= 1"));
    }
    mesh.validate()?;
    let areas: Vec<f64> = (0..mesh.triangles.len()).map(|i| mesh.triangle_area(i)).collect();
    let picker = WeightedIndex::new(&areas)
        .map_err(|_| Error::invalid("sample_surface: mesh has no non-degenerate triangle"))?;
    let mut points = Vec::with_capacity(count);
    let mut faces = Vec::with_capacity(count);
    for _ in 0..count {
        let f = picker.sample(rng.inner_mut());
        let [a, b, c] = mesh.triangle(f);
        let r1 = rng.uniform().sqrt();
        let r2 = rng.uniform();
        points.push(a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2));
        faces.push(f);
    }
    Ok((PointCloud::new(points), faces))
}

pub fn sample_surface(mesh: &TriangleMesh, count: usize, rng: &mut Rng) -> Result<PointCloud> {
    sample_surface_with_faces(mesh, count, rng).map(|(c, _)| c)
}

/// Pinhole camera. `rotation` maps world offsets to camera axes and
/// `center` is the camera position in world coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub rotation: Mat3,
    pub center: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    InFront { x: f64, y: f64, depth: f64 },
    Behind,
}

impl Camera {
    /// Camera at `center` looking at `target`, world +z up. Default
    /// intrinsics: `fx = fy = width`, principal point at the image center.
    pub fn look_at(center: Vec3, target: Vec3, width: usize, height: usize) -> Result<Camera> {
        let forward = (target - center)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("look_at: camera center equals target"))?;
        let up = Vec3::z();
        let right = forward
            .cross(&up)
            .try_normalize(1e-9)
            .unwrap_or_else(|| forward.cross(&Vec3::x()).normalize());
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Camera::new(rotation, center, width as f64, width as f64, width, height)
    }

    pub fn new(rotation: Mat3, center: Vec3, fx: f64, fy: f64, width: usize, height: usize) -> Result<Camera> {
        let cam = Camera {
            rotation,
            center,
            fx,
            fy,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let err = (self.rotation.transpose() * self.rotation - Mat3::identity()).abs().max();
        if err > 1e-9 {
            return Err(Error::invalid(format!("camera rotation not orthonormal (err {err:e})")));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("camera focal lengths must be > 0"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera image size must be >= 1"));
        }
        Ok(())
    }

    pub fn optical_axis(&self) -> Vec3 {
        self.rotation.row(2).transpose()
    }
}

/// `R (p - t)`: camera-frame coordinates `(u, v, w)`.
pub fn world_to_camera(p: &Vec3, cam: &Camera) -> Vec3 {
    cam.rotation * (p - cam.center)
}

/// Pinhole projection of a camera-frame point. Bounds are not checked.
pub fn project(p_cam: &Vec3, cam: &Camera) -> Projection {
    let w = p_cam.z;
    if !(w > 0.0) {
        return Projection::Behind;
    }
    Projection::InFront {
        x: cam.fx * p_cam.x / w + cam.cx,
        y: cam.fy * p_cam.y / w + cam.cy,
        depth: w,
    }
}

/// `n_views` cameras at equal yaw steps starting at 0, elevated by
/// `pitch_deg`, at distance `radius` from `look_at`.
pub fn make_view_ring(
    n_views: usize,
    pitch_deg: f64,
    radius: f64,
    look_at: Vec3,
    image_size: usize,
) -> Result<Vec<Camera>> {
    if n_views == 0 {
        return Err(Error::invalid("view ring needs at least one view"));
    }
    if !(radius > 0.0) {
        return Err(Error::invalid("view ring radius must be > 0"));
    }
    let pitch = pitch_deg.to_radians();
    (0..n_views)
        .map(|i| {
            let yaw = (360.0 * i as f64 / n_views as f64).to_radians();
            let dir = Vec3::new(pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), pitch.sin());
            Camera::look_at(look_at + dir * radius, look_at, image_size, image_size)
        })
        .collect()
}
