//! Python bindings: point clouds, meshes, occupancy grids, latent algebra,
//! metrics and checkpoint-driven generation.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::PathBuf;

use p23d::config::schema;
use p23d::dataset::{condition_for, ShapeFamily};
use p23d::geometry::{self, make_view_ring, Geometry, GeometryFormat, Vec3};
use p23d::latent::{self, decode_ss, encode_ss, mask_tensor, InpaintNet, ModelFile, Vae};
use p23d::metrics::{self, ChamferOptions};
use p23d::numcore::{self, Rng};
use p23d::sampler::{staged_sample, SampleOptions, Schedule};
use p23d::visibility::visible_from_mesh;
use p23d::voxel;
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: p23d::Error) -> PyErr {
    match e {
        p23d::Error::Io { .. } | p23d::Error::RawIo(_) => PyIOError::new_err(e.to_string()),
        p23d::Error::NonFinite(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for p23d::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

#[pyclass(module = "p23d_py", from_py_object)]
#[derive(Clone)]
pub struct PointCloud {
    inner: geometry::PointCloud,
}

#[pymethods]
impl PointCloud {
    #[new]
    fn new(points: Vec<[f64; 3]>) -> Self {
        PointCloud {
            inner: geometry::PointCloud::new(points.into_iter().map(Vec3::from).collect()),
        }
    }

    /// Points of a `.ply`, `.xyz` or `.obj` file (mesh vertices for meshes).
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let g = geometry::load_geometry(&path, GeometryFormat::from_path(&path).py()?).py()?;
        Ok(PointCloud { inner: g.to_cloud() })
    }

    fn save_ply(&self, path: PathBuf) -> PyResult<()> {
        let f = fs::File::create(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
        geometry::write_ply(&self.inner, &mut BufWriter::new(f)).py()
    }

    fn points(&self) -> Vec<[f64; 3]> {
        self.inner.points.iter().map(|p| [p.x, p.y, p.z]).collect()
    }

    fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        self.inner.bounds().map(|(lo, hi)| ([lo.x, lo.y, lo.z], [hi.x, hi.y, hi.z]))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("PointCloud({} points)", self.inner.len())
    }
}

#[pyclass(module = "p23d_py", from_py_object)]
#[derive(Clone)]
pub struct Mesh {
    inner: geometry::TriangleMesh,
}

#[pymethods]
impl Mesh {
    #[new]
    fn new(vertices: Vec<[f64; 3]>, triangles: Vec<[usize; 3]>) -> PyResult<Self> {
        let inner = geometry::TriangleMesh::new(vertices.into_iter().map(Vec3::from).collect(), triangles).py()?;
        Ok(Mesh { inner })
    }

    /// Loads an `.obj` or `.ply` mesh, rescaled into the unit cube unless
    /// `normalize` is false.
    #[staticmethod]
    #[pyo3(signature = (path, normalize = true))]
    fn load(path: PathBuf, normalize: bool) -> PyResult<Self> {
        match geometry::load_geometry(&path, GeometryFormat::from_path(&path).py()?).py()? {
            Geometry::Mesh(m) if normalize => Ok(Mesh {
                inner: geometry::normalize_mesh(&m).py()?,
            }),
            Geometry::Mesh(m) => Ok(Mesh { inner: m }),
            Geometry::Cloud(_) => Err(PyValueError::new_err(format!("{} holds a point cloud", path.display()))),
        }
    }

    #[getter]
    fn num_vertices(&self) -> usize {
        self.inner.vertices.len()
    }

    #[getter]
    fn num_triangles(&self) -> usize {
        self.inner.triangles.len()
    }

    #[pyo3(signature = (count, seed = 0))]
    fn sample_surface(&self, count: usize, seed: u64) -> PyResult<PointCloud> {
        let inner = geometry::sample_surface(&self.inner, count, &mut Rng::new(seed)).py()?;
        Ok(PointCloud { inner })
    }

    /// Points of `cloud` visible from view `view` of a camera ring around
    /// the origin.
    #[pyo3(signature = (cloud, view, views = 24, pitch = 30.0, radius = 1.8, image_size = 64, tau_fraction = 0.05))]
    #[allow(clippy::too_many_arguments)]
    fn visible_points(
        &self,
        cloud: &PointCloud,
        view: usize,
        views: usize,
        pitch: f64,
        radius: f64,
        image_size: usize,
        tau_fraction: f64,
    ) -> PyResult<PointCloud> {
        let ring = make_view_ring(views, pitch, radius, Vec3::zeros(), image_size).py()?;
        let cam = ring
            .get(view)
            .ok_or_else(|| PyValueError::new_err(format!("view {view} outside a {views}-view ring")))?;
        let inner = visible_from_mesh(&self.inner, &cloud.inner, cam, tau_fraction).py()?;
        Ok(PointCloud { inner })
    }
}

#[pyclass(module = "p23d_py", from_py_object, eq)]
#[derive(Clone, PartialEq)]
pub struct OccupancyGrid {
    inner: voxel::OccupancyGrid,
}

#[pymethods]
impl OccupancyGrid {
    #[new]
    fn new(n: usize) -> PyResult<Self> {
        Ok(OccupancyGrid {
            inner: voxel::OccupancyGrid::empty(n).py()?,
        })
    }

    /// Cells in `(i, j, k)` row-major order.
    #[staticmethod]
    fn from_cells(n: usize, cells: Vec<bool>) -> PyResult<Self> {
        Ok(OccupancyGrid {
            inner: voxel::OccupancyGrid::from_bools(n, &cells).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let bytes = fs::read(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
        let (inner, _) = voxel::OccupancyGrid::read(&mut bytes.as_slice()).py()?;
        Ok(OccupancyGrid { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let f = fs::File::create(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
        self.inner.write(&mut BufWriter::new(f), [-0.5, -0.5, -0.5, 0.5, 0.5, 0.5]).py()
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    fn count(&self) -> usize {
        self.inner.count()
    }

    fn get(&self, i: usize, j: usize, k: usize) -> PyResult<bool> {
        self.check(i, j, k)?;
        Ok(self.inner.get(i, j, k))
    }

    fn set(&mut self, i: usize, j: usize, k: usize, on: bool) -> PyResult<()> {
        self.check(i, j, k)?;
        self.inner.set(i, j, k, on);
        Ok(())
    }

    fn cells(&self) -> Vec<bool> {
        self.inner.to_bools()
    }

    fn downsample(&self, r: usize) -> PyResult<OccupancyGrid> {
        Ok(OccupancyGrid {
            inner: voxel::downsample_mask(&self.inner, r).py()?,
        })
    }

    fn voxel_centers(&self) -> PyResult<PointCloud> {
        Ok(PointCloud {
            inner: voxel::voxel_centers(&self.inner).py()?,
        })
    }

    fn iou(&self, other: &OccupancyGrid) -> PyResult<f64> {
        voxel::grid_iou(&self.inner, &other.inner).py()
    }

    fn __repr__(&self) -> String {
        format!("OccupancyGrid(n={}, occupied={})", self.inner.n(), self.inner.count())
    }
}

impl OccupancyGrid {
    fn check(&self, i: usize, j: usize, k: usize) -> PyResult<()> {
        let n = self.inner.n();
        if i >= n || j >= n || k >= n {
            return Err(PyValueError::new_err(format!("cell ({i}, {j}, {k}) outside a {n}^3 grid")));
        }
        Ok(())
    }
}

/// Dense row-major array of `f64`, channels last.
#[pyclass(module = "p23d_py", from_py_object, eq)]
#[derive(Clone, PartialEq)]
pub struct Tensor {
    inner: numcore::Tensor,
}

#[pymethods]
impl Tensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Tensor {
            inner: numcore::Tensor::new(&shape, data).py()?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (shape, seed = 0))]
    fn normal(shape: Vec<usize>, seed: u64) -> Self {
        Tensor {
            inner: Rng::new(seed).normal_tensor(&shape),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Trained autoencoder and inpainting network from one checkpoint.
#[pyclass(module = "p23d_py")]
pub struct Model {
    net: InpaintNet,
    vae: Vae,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (net, vae) = ModelFile::load(&path).py()?.to_inpaint().py()?;
        Ok(Model { net, vae })
    }

    fn encode(&self, grid: &OccupancyGrid) -> PyResult<Tensor> {
        Ok(Tensor {
            inner: encode_ss(&grid.inner, &self.vae).py()?,
        })
    }

    #[pyo3(signature = (latent, threshold = 0.5))]
    fn decode(&self, latent: &Tensor, threshold: f64) -> PyResult<OccupancyGrid> {
        Ok(OccupancyGrid {
            inner: decode_ss(&latent.inner, &self.vae, threshold).py()?,
        })
    }

    /// Completes a visible-region prior grid with staged sampling.
    #[pyo3(signature = (prior, family = "boxes", steps = 50, inpaint_steps = 25, seed = 0, threshold = 0.5))]
    fn generate(
        &self,
        prior: &OccupancyGrid,
        family: &str,
        steps: usize,
        inpaint_steps: usize,
        seed: u64,
        threshold: f64,
    ) -> PyResult<OccupancyGrid> {
        let family: ShapeFamily = family.parse().py()?;
        let cond = condition_for(family, self.net.config.cond_len);
        let mask = voxel::downsample_mask(&prior.inner, self.vae.config.r).py()?;
        let m_s = mask_tensor(&mask, self.net.config.c_m);
        let q_vis = encode_ss(&prior.inner, &self.vae).py()?;
        let sched = Schedule::new(steps, inpaint_steps).py()?;
        let out = staged_sample(&self.net, &q_vis, &m_s, &cond, sched, &mut Rng::new(seed), SampleOptions::default()).py()?;
        Ok(OccupancyGrid {
            inner: decode_ss(&out.latent, &self.vae, threshold).py()?,
        })
    }
}

#[pyfunction]
fn voxelize(cloud: &PointCloud, n: usize) -> PyResult<OccupancyGrid> {
    Ok(OccupancyGrid {
        inner: voxel::voxelize(&cloud.inner, n).py()?,
    })
}

#[pyfunction]
fn mix_latent(q_vis: &Tensor, m_s: &Tensor, eps: &Tensor) -> PyResult<Tensor> {
    Ok(Tensor {
        inner: latent::mix_latent(&q_vis.inner, &m_s.inner, &eps.inner).py()?,
    })
}

#[pyfunction]
fn concat_mask(q: &Tensor, m: &Tensor) -> PyResult<Tensor> {
    Ok(Tensor {
        inner: latent::concat_mask(&q.inner, &m.inner).py()?,
    })
}

#[pyfunction]
#[pyo3(signature = (p, q, mode = "mean", squared = false))]
fn chamfer(p: &PointCloud, q: &PointCloud, mode: &str, squared: bool) -> PyResult<f64> {
    let options = ChamferOptions {
        mode: mode.parse().py()?,
        squared,
    };
    metrics::chamfer(&p.inner, &q.inner, options).py()
}

/// `(precision, recall, f)`.
#[pyfunction]
#[pyo3(signature = (p, q, threshold = metrics::DEFAULT_FSCORE_THRESHOLD))]
fn fscore(p: &PointCloud, q: &PointCloud, threshold: f64) -> PyResult<(f64, f64, f64)> {
    let f = metrics::fscore(&p.inner, &q.inner, threshold).py()?;
    Ok((f.precision, f.recall, f.f))
}

/// Overall and visible-region metrics of a generated grid as a dict.
#[pyfunction]
#[pyo3(signature = (generated, gt, prior, r = 4, threshold = metrics::DEFAULT_FSCORE_THRESHOLD))]
fn visible_region_eval(
    generated: &OccupancyGrid,
    gt: &OccupancyGrid,
    prior: &OccupancyGrid,
    r: usize,
    threshold: f64,
) -> PyResult<BTreeMap<&'static str, f64>> {
    let rec = metrics::visible_region_eval(&generated.inner, &gt.inner, &prior.inner, r, threshold, ChamferOptions::default()).py()?;
    Ok(BTreeMap::from([
        ("cd", rec.cd),
        ("fscore", rec.fscore),
        ("precision", rec.precision),
        ("recall", rec.recall),
        ("iou", rec.iou),
        ("vis_cd", rec.vis_cd),
        ("vis_fscore", rec.vis_fscore),
    ]))
}

/// Every configuration key with its default value as text.
#[pyfunction]
fn default_config() -> BTreeMap<&'static str, String> {
    schema().into_iter().map(|(k, v, _)| (k, v)).collect()
}

#[pymodule]
fn p23d_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PointCloud>()?;
    m.add_class::<Mesh>()?;
    m.add_class::<OccupancyGrid>()?;
    m.add_class::<Tensor>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(voxelize, m)?)?;
    m.add_function(wrap_pyfunction!(mix_latent, m)?)?;
    m.add_function(wrap_pyfunction!(concat_mask, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer, m)?)?;
    m.add_function(wrap_pyfunction!(fscore, m)?)?;
    m.add_function(wrap_pyfunction!(visible_region_eval, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
