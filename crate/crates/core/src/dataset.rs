//! Synthetic shape corpus and training-pair construction.
//!
//! A training pair is built per (asset, view): the asset's surface samples
//! are filtered by depth-consistency visibility from the view, voxelized,
//! encoded, and mixed with Gaussian noise outside the observed cells.
//!
//! Manifest records are tab-separated, one per line, in the field order
//! `asset_id  view  pair_path  config_hash`. Pair paths are relative to the
//! manifest's directory.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{normalize_mesh, sample_surface, Camera, PointCloud, TriangleMesh, Vec3};
use crate::latent::{mask_tensor, mix_latent, Vae};
use crate::numcore::{read_segment, write_segment, ParamSet, Rng, Tensor};
use crate::visibility::{compute_tau, extract_visible, observation_mask, render_depth_mesh};
use crate::voxel::{downsample_mask, voxelize, OccupancyGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeFamily {
    Boxes,
    Spheres,
    Unions,
    LShapes,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 4] = [
        ShapeFamily::Boxes,
        ShapeFamily::Spheres,
        ShapeFamily::Unions,
        ShapeFamily::LShapes,
    ];

    pub fn index(self) -> usize {
        ShapeFamily::ALL.iter().position(|&f| f == self).unwrap()
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeFamily::Boxes => "boxes",
            ShapeFamily::Spheres => "spheres",
            ShapeFamily::Unions => "unions",
            ShapeFamily::LShapes => "l-shapes",
        })
    }
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "boxes" => Ok(ShapeFamily::Boxes),
            "spheres" => Ok(ShapeFamily::Spheres),
            "unions" => Ok(ShapeFamily::Unions),
            "l-shapes" => Ok(ShapeFamily::LShapes),
            other => Err(Error::invalid(format!(
                "unknown shape family `{other}` (boxes, spheres, unions, l-shapes)"
            ))),
        }
    }
}

/// A normalized synthetic mesh with its generating parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticShape {
    pub family: ShapeFamily,
    /// Raw generator parameters before normalization.
    pub params: Vec<f64>,
    pub mesh: TriangleMesh,
}

impl SyntheticShape {
    /// Condition vector: one-hot family in the first four slots, zero padded.
    pub fn condition(&self, len: usize) -> Vec<f64> {
        condition_for(self.family, len)
    }
}

pub fn condition_for(family: ShapeFamily, len: usize) -> Vec<f64> {
    let mut c = vec![0.0; len];
    if let Some(slot) = c.get_mut(family.index()) {
        *slot = 1.0;
    }
    c
}

/// Closed axis-aligned box between `lo` and `hi` (12 triangles, outward winding).
pub fn box_mesh(lo: Vec3, hi: Vec3) -> TriangleMesh {
    let v = |x: bool, y: bool, z: bool| {
        Vec3::new(if x { hi.x } else { lo.x }, if y { hi.y } else { lo.y }, if z { hi.z } else { lo.z })
    };
    let vertices = vec![
        v(false, false, false),
        v(true, false, false),
        v(true, true, false),
        v(false, true, false),
        v(false, false, true),
        v(true, false, true),
        v(true, true, true),
        v(false, true, true),
    ];
    let triangles = vec![
        [0, 2, 1],
        [0, 3, 2],
        [4, 5, 6],
        [4, 6, 7],
        [0, 1, 5],
        [0, 5, 4],
        [2, 3, 7],
        [2, 7, 6],
        [1, 2, 6],
        [1, 6, 5],
        [3, 0, 4],
        [3, 4, 7],
    ];
    TriangleMesh { vertices, triangles }
}

/// Icosphere of radius 1 after `levels` rounds of 4-way subdivision.
pub fn icosphere(levels: usize) -> TriangleMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut triangles: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..levels {
        let mut midpoints = std::collections::HashMap::new();
        let mut mid = |a: usize, b: usize, vs: &mut Vec<Vec3>| -> usize {
            *midpoints.entry((a.min(b), a.max(b))).or_insert_with(|| {
                vs.push(((vs[a] + vs[b]) * 0.5).normalize());
                vs.len() - 1
            })
        };
        let mut next = Vec::with_capacity(triangles.len() * 4);
        for [a, b, c] in triangles {
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        triangles = next;
    }
    TriangleMesh { vertices, triangles }
}

/// Icosphere subdivision level used for the sphere family (1280 triangles).
pub const SPHERE_LEVELS: usize = 3;

/// Prism over an L-shaped footprint: outer `w x h`, arm thicknesses
/// `tx`, `ty`, extruded over `[0, d]` (20 triangles).
pub fn l_prism(w: f64, h: f64, tx: f64, ty: f64, d: f64) -> TriangleMesh {
    let outline = [(0.0, 0.0), (w, 0.0), (w, ty), (tx, ty), (tx, h), (0.0, h)];
    let mut vertices = Vec::with_capacity(12);
    for z in [0.0, d] {
        vertices.extend(outline.iter().map(|&(x, y)| Vec3::new(x, y, z)));
    }
    // Footprint split into a bottom bar and a left bar.
    let cap = [[0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 5]];
    let mut triangles = Vec::with_capacity(20);
    for [a, b, c] in cap {
        triangles.push([a, c, b]);
        triangles.push([a + 6, b + 6, c + 6]);
    }
    for i in 0..6 {
        let j = (i + 1) % 6;
        triangles.push([i, j, j + 6]);
        triangles.push([i, j + 6, i + 6]);
    }
    TriangleMesh { vertices, triangles }
}

fn permute_axes(mesh: &mut TriangleMesh, perm: [usize; 3]) {
    for v in &mut mesh.vertices {
        let old = *v;
        *v = Vec3::new(old[perm[0]], old[perm[1]], old[perm[2]]);
    }
}

fn one_shape(family: ShapeFamily, rng: &mut Rng) -> Result<SyntheticShape> {
    let mut u = |lo: f64, hi: f64| rng.uniform_range(lo, hi);
    let (params, mesh) = match family {
        ShapeFamily::Boxes => {
            let e = [u(0.25, 1.0), u(0.25, 1.0), u(0.25, 1.0)];
            let half = Vec3::new(e[0], e[1], e[2]) * 0.5;
            (e.to_vec(), box_mesh(-half, half))
        }
        ShapeFamily::Spheres => {
            let r = [u(0.4, 1.0), u(0.4, 1.0), u(0.4, 1.0)];
            let mut m = icosphere(SPHERE_LEVELS);
            for v in &mut m.vertices {
                *v = Vec3::new(v.x * r[0], v.y * r[1], v.z * r[2]);
            }
            (r.to_vec(), m)
        }
        ShapeFamily::Unions => {
            let a = [u(0.3, 0.7), u(0.3, 0.7), u(0.3, 0.7)];
            let b = [u(0.3, 0.7), u(0.3, 0.7), u(0.3, 0.7)];
            let gap = u(0.1, 0.3);
            let axis = (u(0.0, 3.0) as usize).min(2);
            let lift = [u(-0.2, 0.2), u(-0.2, 0.2)];
            let mut lo_b = Vec3::new(-b[0] / 2.0, -b[1] / 2.0, -b[2] / 2.0);
            lo_b[axis] = a[axis] / 2.0 + gap;
            let mut k = 0;
            for ax in 0..3 {
                if ax != axis {
                    lo_b[ax] += lift[k];
                    k += 1;
                }
            }
            let hi_b = lo_b + Vec3::new(b[0], b[1], b[2]);
            let ha = Vec3::new(a[0], a[1], a[2]) * 0.5;
            let mut m = box_mesh(-ha, ha);
            m.append(&box_mesh(lo_b, hi_b));
            let mut p = a.to_vec();
            p.extend(b);
            p.extend([gap, axis as f64, lift[0], lift[1]]);
            (p, m)
        }
        ShapeFamily::LShapes => {
            let (w, h, d) = (u(0.5, 1.0), u(0.5, 1.0), u(0.25, 0.8));
            let (tx, ty) = (w * u(0.3, 0.6), h * u(0.3, 0.6));
            let perm = [[0, 1, 2], [1, 2, 0], [2, 0, 1]][(u(0.0, 3.0) as usize).min(2)];
            let mut m = l_prism(w, h, tx, ty, d);
            permute_axes(&mut m, perm);
            (vec![w, h, tx, ty, d, perm[0] as f64], m)
        }
    };
    Ok(SyntheticShape {
        family,
        params,
        mesh: normalize_mesh(&mesh)?,
    })
}

/// `count` shapes of one family.
pub fn gen_synthetic_shapes(count: usize, family: ShapeFamily, rng: &mut Rng) -> Result<Vec<SyntheticShape>> {
    if count == 0 {
        return Err(Error::invalid("shape count must be >= 1"));
    }
    (0..count).map(|_| one_shape(family, rng)).collect()
}

/// Mixed corpus cycling through the families in [`ShapeFamily::ALL`] order.
pub fn gen_corpus(count: usize, rng: &mut Rng) -> Result<Vec<SyntheticShape>> {
    if count == 0 {
        return Err(Error::invalid("shape count must be >= 1"));
    }
    (0..count).map(|i| one_shape(ShapeFamily::ALL[i % 4], rng)).collect()
}

/// Surface samples and full occupancy of one asset.
#[derive(Clone, Debug)]
pub struct Asset {
    pub id: String,
    pub mesh: TriangleMesh,
    pub cond: Vec<f64>,
    pub samples: PointCloud,
    pub full_grid: OccupancyGrid,
}

impl Asset {
    pub fn from_mesh(id: String, mesh: TriangleMesh, cond: Vec<f64>, s: usize, n: usize, rng: &mut Rng) -> Result<Self> {
        let samples = sample_surface(&mesh, s, rng)?;
        let full_grid = voxelize(&samples, n)?;
        Ok(Asset {
            id,
            mesh,
            cond,
            samples,
            full_grid,
        })
    }
}

/// Prepares assets concurrently; asset `i` uses stream `i` of `seed`.
pub fn prepare_assets(shapes: &[SyntheticShape], cond_len: usize, s: usize, n: usize, seed: u64) -> Result<Vec<Asset>> {
    shapes
        .par_iter()
        .enumerate()
        .map(|(i, shape)| {
            let mut rng = Rng::stream(seed, i as u64);
            Asset::from_mesh(format!("shape{i:04}"), shape.mesh.clone(), shape.condition(cond_len), s, n, &mut rng)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub asset_id: String,
    pub view: usize,
    pub q_comb: Tensor,
    /// `[r, r, r, c_m]`.
    pub m_s: Tensor,
    pub cond: Vec<f64>,
    pub q_gt: Tensor,
}

impl TrainingPair {
    pub fn to_params(&self) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        p.push("q_comb", self.q_comb.clone());
        p.push("m_s", self.m_s.clone());
        p.push("cond", Tensor::new(&[self.cond.len()], self.cond.clone())?);
        p.push("q_gt", self.q_gt.clone());
        Ok(p)
    }

    pub fn from_params(asset_id: String, view: usize, p: &ParamSet) -> Result<Self> {
        let get = |k: &str| {
            p.get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("pair file lacks `{k}`")))
        };
        Ok(TrainingPair {
            asset_id,
            view,
            q_comb: get("q_comb")?,
            m_s: get("m_s")?,
            cond: get("cond")?.into_data(),
            q_gt: get("q_gt")?,
        })
    }
}

/// Points of the asset's surface sample visible from `cam`, or `None` when
/// the mesh covers no pixel or no point passes the depth test.
pub fn visible_points(asset: &Asset, cam: &Camera, tau_fraction: f64) -> Result<Option<PointCloud>> {
    let depth = render_depth_mesh(&asset.mesh, cam);
    if depth.covered().next().is_none() {
        return Ok(None);
    }
    let tau = compute_tau(&depth, tau_fraction)?;
    let mask = observation_mask(&asset.samples, cam, &depth, tau)?;
    if !mask.iter().any(|&m| m) {
        return Ok(None);
    }
    extract_visible(&asset.samples, &mask).map(Some)
}

/// Voxelized visible cloud `M'` and its latent mask.
pub fn prior_grids(visible: &PointCloud, n: usize, r: usize) -> Result<(OccupancyGrid, OccupancyGrid)> {
    let grid = voxelize(visible, n)?;
    let mask = downsample_mask(&grid, r)?;
    Ok((grid, mask))
}

/// Visible-region prior of one view: the voxelized visible cloud and the
/// latent mask, or `None` when nothing is visible.
pub fn view_prior(asset: &Asset, cam: &Camera, tau_fraction: f64, n: usize, r: usize) -> Result<Option<(OccupancyGrid, OccupancyGrid)>> {
    match visible_points(asset, cam, tau_fraction)? {
        Some(v) => prior_grids(&v, n, r).map(Some),
        None => Ok(None),
    }
}

/// One pair per view with visible points; empty views are skipped with a
/// warning. `rng` supplies the noise of every pair in view order.
pub fn build_pairs(asset: &Asset, vae: &Vae, cameras: &[Camera], tau_fraction: f64, c_m: usize, rng: &mut Rng) -> Result<Vec<TrainingPair>> {
    let n = vae.config.n;
    let r = vae.config.r;
    if asset.full_grid.n() != n {
        return Err(Error::shape("build_pairs", format!("asset grid {} vs model {}", asset.full_grid.n(), n)));
    }
    let mut priors = Vec::with_capacity(cameras.len());
    for (view, cam) in cameras.iter().enumerate() {
        match view_prior(asset, cam, tau_fraction, n, r)? {
            Some(p) => priors.push((view, p)),
            None => warn!("asset {} view {view}: no visible points, skipped", asset.id),
        }
    }
    let mut grids: Vec<&OccupancyGrid> = vec![&asset.full_grid];
    grids.extend(priors.iter().map(|(_, (g, _))| g));
    let latents = vae.encode_batch(&grids)?;
    let q_gt = &latents[0];
    let mut pairs = Vec::with_capacity(priors.len());
    for ((view, (_, mask)), q_vis) in priors.iter().zip(&latents[1..]) {
        let m_s = mask_tensor(mask, c_m);
        let eps = rng.normal_tensor(q_vis.shape());
        pairs.push(TrainingPair {
            asset_id: asset.id.clone(),
            view: *view,
            q_comb: mix_latent(q_vis, &m_s, &eps)?,
            m_s,
            cond: asset.cond.clone(),
            q_gt: q_gt.clone(),
        });
    }
    Ok(pairs)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub asset_id: String,
    pub view: usize,
    /// Relative to the manifest directory.
    pub pair_path: PathBuf,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in &manifest.records {
        writeln!(w, "{}\t{}\t{}\t{}", r.asset_id, r.view, r.pair_path.display(), r.config_hash)
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses and validates a manifest: non-empty, every pair file present,
/// and, when `expected_hash` is given, every record carrying that hash.
pub fn read_manifest(path: &Path, expected_hash: Option<&str>) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let [asset_id, view, pair_path, hash] = fields[..] else {
            return Err(perr(format!("expected 4 tab-separated fields, got {}", fields.len())));
        };
        let view = view.parse().map_err(|_| perr(format!("bad view index `{view}`")))?;
        if let Some(want) = expected_hash {
            if hash != want {
                return Err(Error::Config {
                    key: "config_hash".into(),
                    msg: format!(
                        "manifest line {} was built with configuration {hash}, the model expects {want}",
                        i + 1
                    ),
                });
            }
        }
        let full = dir.join(pair_path);
        if !full.is_file() {
            return Err(perr(format!("pair file {} does not exist", full.display())));
        }
        records.push(ManifestRecord {
            asset_id: asset_id.to_string(),
            view,
            pair_path: PathBuf::from(pair_path),
            config_hash: hash.to_string(),
        });
    }
    if records.is_empty() {
        return Err(Error::Empty("manifest has no records"));
    }
    Ok(Manifest { records })
}

pub fn save_pair(path: &Path, pair: &TrainingPair) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_segment(&mut w, &pair.to_params()?)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_pairs(manifest_path: &Path, manifest: &Manifest) -> Result<Vec<TrainingPair>> {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    manifest
        .records
        .iter()
        .map(|r| {
            let full = dir.join(&r.pair_path);
            let bytes = fs::read(&full).map_err(|e| Error::io(&full, e))?;
            let p = read_segment(&mut bytes.as_slice())?;
            TrainingPair::from_params(r.asset_id.clone(), r.view, &p)
        })
        .collect()
}
