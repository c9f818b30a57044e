//! Independent reference implementations shared by the integration tests
//! and the acceptance target.

#![allow(dead_code)]

use p23d::dataset::gen_corpus;
use p23d::geometry::{sample_surface, Camera, PointCloud, TriangleMesh, Vec3};
use p23d::latent::{cfm_loss_batch, vae_loss_batch, CfmSample, InpaintConfig, InpaintNet, Vae, VaeConfig, VelocityField};
use p23d::numcore::{ParamSet, Rng, Tensor};
use p23d::voxel::OccupancyGrid;
use p23d::Result;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

// ---------------------------------------------------------------------------
// Visibility by brute-force ray casting

fn to_cam(p: &Vec3, cam: &Camera) -> Vec3 {
    cam.rotation * (p - cam.center)
}

/// Ray from the camera origin along `d` (camera frame, `d.z == 1`) against
/// one triangle; returns the hit parameter, which equals the camera-axis
/// depth because `d.z == 1`.
fn ray_triangle(d: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let pv = d.cross(&e2);
    let det = e1.dot(&pv);
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let inv = 1.0 / det;
    let tv = -a;
    let u = tv.dot(&pv) * inv;
    if u < 0.0 || u > 1.0 {
        return None;
    }
    let qv = tv.cross(&e1);
    let v = d.dot(&qv) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&qv) * inv;
    (t > 0.0).then_some(t)
}

/// Nearest hit depth through every pixel center, `None` for a miss.
pub fn ray_cast_depth(mesh: &TriangleMesh, cam: &Camera) -> Vec<Option<f64>> {
    let verts: Vec<Vec3> = mesh.vertices.iter().map(|p| to_cam(p, cam)).collect();
    let mut out = Vec::with_capacity(cam.width * cam.height);
    for py in 0..cam.height {
        for px in 0..cam.width {
            let d = Vec3::new((px as f64 - cam.cx) / cam.fx, (py as f64 - cam.cy) / cam.fy, 1.0);
            let mut best: Option<f64> = None;
            for t in &mesh.triangles {
                if let Some(hit) = ray_triangle(&d, &verts[t[0]], &verts[t[1]], &verts[t[2]]) {
                    best = Some(best.map_or(hit, |b: f64| b.min(hit)));
                }
            }
            out.push(best);
        }
    }
    out
}

/// Visibility of each point: its nearest pixel sees a surface whose depth
/// differs from the point's by strictly less than `fraction` of the depth
/// range over all hit pixels.
pub fn oracle_visible(mesh: &TriangleMesh, cloud: &PointCloud, cam: &Camera, fraction: f64) -> Vec<bool> {
    let depth = ray_cast_depth(mesh, cam);
    let hits: Vec<f64> = depth.iter().flatten().copied().collect();
    if hits.is_empty() {
        return vec![false; cloud.len()];
    }
    let lo = hits.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = hits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tau = fraction * (hi - lo);
    cloud
        .points
        .iter()
        .map(|p| {
            let q = to_cam(p, cam);
            if !(q.z > 0.0) {
                return false;
            }
            let x = (cam.fx * q.x / q.z + cam.cx + 0.5).floor();
            let y = (cam.fy * q.y / q.z + cam.cy + 0.5).floor();
            if x < 0.0 || y < 0.0 || x >= cam.width as f64 || y >= cam.height as f64 {
                return false;
            }
            match depth[y as usize * cam.width + x as usize] {
                Some(d) => (d - q.z).abs() < tau,
                None => false,
            }
        })
        .collect()
}

pub struct Scene {
    pub mesh: TriangleMesh,
    pub cloud: PointCloud,
    pub cam: Camera,
}

fn unit_vector(rng: &mut Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.normal(), rng.normal(), rng.normal());
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

/// A synthetic shape seen from a random outside viewpoint, with up to
/// `max_points` surface samples plus a few mesh vertices.
pub fn random_scene(seed: u64, max_points: usize, image: usize) -> Scene {
    let mut rng = Rng::new(seed);
    let shape = gen_corpus(4, &mut rng).unwrap().swap_remove(rng.below(4));
    let mesh = shape.mesh;
    let count = 20 + rng.below(max_points - 40);
    let mut cloud = sample_surface(&mesh, count, &mut rng).unwrap();
    for _ in 0..20 {
        cloud.points.push(mesh.vertices[rng.below(mesh.vertices.len())]);
    }
    let target = Vec3::new(rng.uniform_range(-0.1, 0.1), rng.uniform_range(-0.1, 0.1), rng.uniform_range(-0.1, 0.1));
    let center = target + unit_vector(&mut rng) * rng.uniform_range(1.4, 3.0);
    let cam = Camera::look_at(center, target, image, image).unwrap();
    Scene { mesh, cloud, cam }
}

// ---------------------------------------------------------------------------
// Metrics by exhaustive search

fn brute_nearest_sq(p: &Vec3, cloud: &PointCloud) -> f64 {
    let mut best = f64::INFINITY;
    for q in &cloud.points {
        let d = p - q;
        best = best.min(d.x * d.x + d.y * d.y + d.z * d.z);
    }
    best
}

fn brute_directed(a: &PointCloud, b: &PointCloud, squared: bool) -> Vec<f64> {
    a.points
        .iter()
        .map(|p| {
            let d2 = brute_nearest_sq(p, b);
            if squared {
                d2
            } else {
                d2.sqrt()
            }
        })
        .collect()
}

fn plain_mean(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in v {
        s += x;
    }
    s / v.len() as f64
}

/// Mean of the two directed mean nearest-neighbor distances.
pub fn brute_chamfer(a: &PointCloud, b: &PointCloud, squared: bool) -> f64 {
    (plain_mean(&brute_directed(a, b, squared)) + plain_mean(&brute_directed(b, a, squared))) / 2.0
}

/// `(precision, recall, f)` with the inclusive threshold test.
pub fn brute_fscore(a: &PointCloud, b: &PointCloud, threshold: f64) -> (f64, f64, f64) {
    let frac = |d: Vec<f64>| d.iter().filter(|&&x| x <= threshold).count() as f64 / d.len() as f64;
    let p = frac(brute_directed(a, b, false));
    let r = frac(brute_directed(b, a, false));
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

pub fn random_cloud(rng: &mut Rng, count: usize) -> PointCloud {
    PointCloud::new(
        (0..count)
            .map(|_| Vec3::new(rng.uniform_range(-0.5, 0.5), rng.uniform_range(-0.5, 0.5), rng.uniform_range(-0.5, 0.5)))
            .collect(),
    )
}

/// A blob of points around a few random centers, so clouds have both
/// dense clusters and empty space.
pub fn clustered_cloud(rng: &mut Rng, count: usize) -> PointCloud {
    let centers: Vec<Vec3> = (0..1 + rng.below(5))
        .map(|_| Vec3::new(rng.uniform_range(-0.4, 0.4), rng.uniform_range(-0.4, 0.4), rng.uniform_range(-0.4, 0.4)))
        .collect();
    let spread = rng.uniform_range(0.01, 0.2);
    PointCloud::new(
        (0..count)
            .map(|_| {
                let c = centers[rng.below(centers.len())];
                let p = c + Vec3::new(rng.normal(), rng.normal(), rng.normal()) * spread;
                p.map(|v| v.clamp(-0.5, 0.5))
            })
            .collect(),
    )
}

// ---------------------------------------------------------------------------
// Gradient checks by central differences

pub struct GradCheck {
    pub coords: usize,
    pub failures: usize,
    pub worst: f64,
}

/// Replaces every parameter with a scaled Gaussian draw so no layer sits at
/// a zero initialization.
fn randomize(params: &mut ParamSet, rng: &mut Rng, scale: f64) {
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.normal() * scale;
        }
    }
}

fn pick_coords(params: &ParamSet, count: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    let sizes: Vec<usize> = params.tensors().iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    (0..count)
        .map(|_| {
            let mut flat = rng.below(total);
            let mut t = 0;
            while flat >= sizes[t] {
                flat -= sizes[t];
                t += 1;
            }
            (t, flat)
        })
        .collect()
}

fn central_difference(
    params: &ParamSet,
    analytic: &[Tensor],
    coords: &[(usize, usize)],
    h: f64,
    tol: f64,
    loss_at: impl Fn(&ParamSet) -> f64,
) -> GradCheck {
    let mut check = GradCheck {
        coords: coords.len(),
        failures: 0,
        worst: 0.0,
    };
    for &(t, j) in coords {
        let mut plus = params.clone();
        plus.tensors_mut()[t].data_mut()[j] += h;
        let mut minus = params.clone();
        minus.tensors_mut()[t].data_mut()[j] -= h;
        let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
        let e = rel_err(analytic[t].data()[j], fd);
        check.worst = check.worst.max(e);
        if e > tol {
            check.failures += 1;
        }
    }
    check
}

pub fn vae_gradient_check(seed: u64, coords: usize, h: f64, tol: f64) -> GradCheck {
    let mut rng = Rng::new(seed);
    let cfg = VaeConfig {
        n: 8,
        r: 4,
        c_s: 4,
        hidden: 8,
        ..VaeConfig::default()
    };
    let mut vae = Vae::new(cfg.clone(), &mut rng).unwrap();
    randomize(&mut vae.params, &mut rng, 0.3);
    let cells: Vec<bool> = (0..512).map(|_| rng.bernoulli(0.3)).collect();
    let grid = OccupancyGrid::from_bools(8, &cells).unwrap();
    let (_, grads) = vae_loss_batch(&vae, &[&grid], None).unwrap();
    let picked = pick_coords(&vae.params, coords, &mut rng);
    central_difference(&vae.params, &grads, &picked, h, tol, |p| {
        let v = Vae::from_params(cfg.clone(), p.clone()).unwrap();
        vae_loss_batch(&v, &[&grid], None).unwrap().0
    })
}

pub fn cfm_gradient_check(seed: u64, coords: usize, h: f64, tol: f64) -> GradCheck {
    let mut rng = Rng::new(seed);
    let cfg = InpaintConfig {
        width: 8,
        blocks: 2,
        ..InpaintConfig::default()
    };
    let mut net = InpaintNet::new(cfg.clone(), &mut rng).unwrap();
    randomize(&mut net.params, &mut rng, 0.3);
    let q_gt = rng.normal_tensor(&[4, 4, 4, 4]);
    let q_comb = rng.normal_tensor(&[4, 4, 4, 4]);
    let mask = Tensor::new(&[4, 4, 4, 1], (0..64).map(|_| rng.bernoulli(0.5) as u8 as f64).collect()).unwrap();
    let cond: Vec<f64> = (0..cfg.cond_len).map(|_| rng.normal()).collect();
    let sigma = rng.uniform_range(0.05, 0.95);
    let loss = |net: &InpaintNet| {
        let s = CfmSample {
            q_gt: &q_gt,
            q_comb: &q_comb,
            mask: &mask,
            cond: &cond,
            sigma,
        };
        cfm_loss_batch(net, &[s]).unwrap()
    };
    let (_, grads) = loss(&net);
    let picked = pick_coords(&net.params, coords, &mut rng);
    central_difference(&net.params, &grads, &picked, h, tol, |p| {
        loss(&InpaintNet::from_params(cfg.clone(), p.clone()).unwrap()).0
    })
}

// ---------------------------------------------------------------------------
// Sampler

/// Returns the same velocity for every input: the straight-line velocity
/// from a known start to a known endpoint.
pub struct ConstantField {
    pub velocity: Tensor,
    pub cond_len: usize,
    pub mask_channels: usize,
}

impl VelocityField for ConstantField {
    fn latent_channels(&self) -> usize {
        *self.velocity.shape().last().unwrap()
    }

    fn mask_channels(&self) -> usize {
        self.mask_channels
    }

    fn cond_len(&self) -> usize {
        self.cond_len
    }

    fn velocity(&self, x_inp: &Tensor, _sigma: f64, _cond: &Tensor) -> Result<Tensor> {
        let b = x_inp.shape()[0];
        Tensor::stack(&vec![&self.velocity; b])
    }
}

/// Runs the sampler with [`ConstantField`] from a random start and returns
/// the sampled latent and its largest deviation from the endpoint.
pub fn constant_field_run(seed: u64, t: usize, s: usize) -> (Tensor, f64) {
    let mut rng = Rng::new(seed);
    let q_vis = rng.normal_tensor(&[4, 4, 4, 4]);
    let eps = rng.normal_tensor(&[4, 4, 4, 4]);
    let target = rng.normal_tensor(&[4, 4, 4, 4]);
    let m_s = Tensor::new(&[4, 4, 4, 1], (0..64).map(|_| rng.bernoulli(0.4) as u8 as f64).collect()).unwrap();
    let mut start = eps.data().to_vec();
    for cell in 0..64 {
        if m_s.data()[cell] == 1.0 {
            start[cell * 4..cell * 4 + 4].copy_from_slice(&q_vis.data()[cell * 4..cell * 4 + 4]);
        }
    }
    let start = Tensor::new(&[4, 4, 4, 4], start).unwrap();
    let field = ConstantField {
        velocity: start.zip_map(&target, |a, b| a - b).unwrap(),
        cond_len: 16,
        mask_channels: 1,
    };
    let job = p23d::sampler::SampleJob {
        q_vis,
        m_s,
        cond: vec![0.0; 16],
        eps,
    };
    let out = p23d::sampler::staged_sample_batch(
        &field,
        &[job],
        p23d::sampler::Schedule::new(t, s).unwrap(),
        p23d::sampler::SampleOptions::default(),
    )
    .unwrap()
    .remove(0)
    .latent;
    let err = out.max_abs_diff(&target);
    (out, err)
}

// ---------------------------------------------------------------------------
// Randomized trials

/// A latent, mask and noise of random spatial size and channel counts.
pub fn random_latent_case(rng: &mut Rng) -> (Tensor, Tensor, Tensor) {
    let r = 1 + rng.below(5);
    let c = 1 + rng.below(6);
    let cm = 1 + rng.below(3);
    let q = rng.normal_tensor(&[r, r, r, c]);
    let eps = rng.normal_tensor(&[r, r, r, c]);
    let p = rng.uniform();
    let mut m = Vec::with_capacity(r * r * r * cm);
    for _ in 0..r * r * r {
        let on = rng.bernoulli(p) as u8 as f64;
        m.extend(std::iter::repeat_n(on, cm));
    }
    (q, Tensor::new(&[r, r, r, cm], m).unwrap(), eps)
}

/// Checks every mixing and concatenation invariant on one random case and
/// describes the first violation.
pub fn latent_algebra_trial(rng: &mut Rng) -> std::result::Result<(), String> {
    use p23d::latent::{concat_mask, mix_latent};
    let (q, m, eps) = random_latent_case(rng);
    let c = *q.shape().last().unwrap();
    let cm = *m.shape().last().unwrap();
    let cells = q.numel() / c;
    let mixed = mix_latent(&q, &m, &eps).map_err(|e| e.to_string())?;
    for cell in 0..cells {
        let src = if m.data()[cell * cm] == 1.0 { &q } else { &eps };
        if mixed.data()[cell * c..(cell + 1) * c] != src.data()[cell * c..(cell + 1) * c] {
            return Err(format!("mixed cell {cell} does not come from the expected source"));
        }
    }
    let again = mix_latent(&q, &m, &mixed).map_err(|e| e.to_string())?;
    if again != mixed {
        return Err("mixing is not idempotent".into());
    }
    let ones = Tensor::ones(m.shape());
    if mix_latent(&q, &ones, &eps).unwrap() != q {
        return Err("all-ones mask does not return the latent".into());
    }
    if mix_latent(&q, &Tensor::zeros(m.shape()), &eps).unwrap() != eps {
        return Err("all-zeros mask does not return the noise".into());
    }
    let joined = concat_mask(&mixed, &m).map_err(|e| e.to_string())?;
    if *joined.shape().last().unwrap() != c + cm || joined.shape()[..3] != q.shape()[..3] {
        return Err(format!("concatenated shape {:?}", joined.shape()));
    }
    for cell in 0..cells {
        let row = &joined.data()[cell * (c + cm)..(cell + 1) * (c + cm)];
        if row[..c] != mixed.data()[cell * c..(cell + 1) * c] || row[c..] != m.data()[cell * cm..(cell + 1) * cm] {
            return Err(format!("concatenated cell {cell} has wrong slices"));
        }
    }
    let bad = m.map(|v| v * 0.5 + 0.25);
    if mix_latent(&q, &bad, &eps).is_ok() {
        return Err("non-binary mask was accepted".into());
    }
    Ok(())
}

/// Points spread over the cube, a share of them placed exactly on coarse
/// cell boundaries and faces.
pub fn voxel_trial_cloud(rng: &mut Rng, r: usize) -> PointCloud {
    let count = 1 + rng.below(400);
    let coord = |rng: &mut Rng| {
        if rng.bernoulli(0.2) {
            rng.below(r + 1) as f64 / r as f64 - 0.5
        } else {
            rng.uniform_range(-0.5, 0.5)
        }
    };
    PointCloud::new((0..count).map(|_| Vec3::new(coord(rng), coord(rng), coord(rng))).collect())
}

pub fn voxel_consistency_trial(rng: &mut Rng, n: usize, r: usize) -> bool {
    use p23d::voxel::{downsample_mask, voxelize};
    let cloud = voxel_trial_cloud(rng, r);
    downsample_mask(&voxelize(&cloud, n).unwrap(), r).unwrap() == voxelize(&cloud, r).unwrap()
}

/// Compares the library metrics with exhaustive search on one random pair.
pub fn metric_pair_trial(rng: &mut Rng, max_points: usize) -> std::result::Result<(), String> {
    use p23d::metrics::{chamfer, fscore, ChamferMode, ChamferOptions};
    let make = |rng: &mut Rng| {
        let count = 1 + rng.below(max_points);
        if rng.bernoulli(0.5) {
            random_cloud(rng, count)
        } else {
            clustered_cloud(rng, count)
        }
    };
    let a = make(rng);
    let b = make(rng);
    for squared in [false, true] {
        let opts = ChamferOptions {
            mode: ChamferMode::Mean,
            squared,
        };
        let got = chamfer(&a, &b, opts).unwrap();
        let want = brute_chamfer(&a, &b, squared);
        if got.to_bits() != want.to_bits() {
            return Err(format!("chamfer (squared {squared}) {got:e} vs brute force {want:e}"));
        }
    }
    for threshold in [0.01, 0.05, 0.1] {
        let f = fscore(&a, &b, threshold).unwrap();
        let (p, r, ff) = brute_fscore(&a, &b, threshold);
        if (f.precision, f.recall, f.f) != (p, r, ff) {
            return Err(format!("fscore at {threshold}: {f:?} vs brute force ({p}, {r}, {ff})"));
        }
    }
    Ok(())
}

/// `(case, computed, expected)` for the hand-worked metric examples.
pub fn metric_hand_cases() -> Vec<(&'static str, f64, f64)> {
    use p23d::metrics::{chamfer, fscore, ChamferOptions};
    let cloud = |pts: &[[f64; 3]]| PointCloud::new(pts.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect());
    let opts = ChamferOptions::default();
    let origin = cloud(&[[0.0, 0.0, 0.0]]);
    let unit = cloud(&[[1.0, 0.0, 0.0]]);
    let p = cloud(&[[0.0, 0.0, 0.0], [0.3, 0.0, 0.0]]);
    let q = cloud(&[[0.02, 0.0, 0.0]]);
    let f = fscore(&p, &q, 0.05).unwrap();
    let same = cloud(&[[0.1, 0.2, 0.3], [-0.2, 0.1, 0.0], [0.4, -0.4, 0.1]]);
    let far = cloud(&[[0.4, 0.4, 0.4]]);
    let g = fscore(&origin, &far, 0.05).unwrap();
    let s = fscore(&same, &same, 0.05).unwrap();
    vec![
        ("chamfer of a point and its unit shift", chamfer(&origin, &unit, opts).unwrap(), 1.0),
        ("chamfer is symmetric", chamfer(&p, &q, opts).unwrap() - chamfer(&q, &p, opts).unwrap(), 0.0),
        ("chamfer of identical clouds", chamfer(&same, &same, opts).unwrap(), 0.0),
        ("precision with one of two points near", f.precision, 0.5),
        ("recall with the target covered", f.recall, 1.0),
        ("F with precision 1/2 and recall 1", f.f, 2.0 / 3.0),
        ("F of identical clouds", s.f, 1.0),
        ("F when every distance exceeds the threshold", g.f, 0.0),
    ]
}
