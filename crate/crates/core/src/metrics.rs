//! Chamfer distance, F-score and their visible-region variants, plus
//! per-object report emission.
//!
//! Distances are Euclidean in normalized unit-cube coordinates. Nearest
//! neighbors are exact: a uniform bucket grid over the target cloud is
//! searched ring by ring until no unvisited bucket can hold a closer point.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};
use crate::voxel::{downsample_mask, grid_iou, voxel_centers, OccupancyGrid};

pub const DEFAULT_FSCORE_THRESHOLD: f64 = 0.05;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ChamferMode {
    /// `(d_PQ + d_QP) / 2`.
    #[default]
    Mean,
    /// `d_PQ + d_QP`.
    Sum,
}

impl fmt::Display for ChamferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChamferMode::Mean => "mean",
            ChamferMode::Sum => "sum",
        })
    }
}

impl FromStr for ChamferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(ChamferMode::Mean),
            "sum" => Ok(ChamferMode::Sum),
            other => Err(Error::invalid(format!("chamfer mode must be mean or sum, got `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ChamferOptions {
    pub mode: ChamferMode,
    /// Average squared instead of plain distances.
    pub squared: bool,
}

/// Exact nearest-neighbor index over a fixed point set.
pub struct NearestIndex<'a> {
    points: &'a [Vec3],
    lo: Vec3,
    cell: f64,
    dims: [i64; 3],
    /// Bucket `b` holds `order[start[b]..start[b + 1]]`.
    start: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> NearestIndex<'a> {
    pub fn new(cloud: &'a PointCloud) -> Result<Self> {
        let (lo, hi) = cloud.bounds().ok_or(Error::Empty("nearest-neighbor index over an empty cloud"))?;
        let extent = (hi - lo).max();
        let per_axis = (cloud.len() as f64).cbrt().ceil().max(1.0);
        let cell = if extent > 0.0 { extent / per_axis } else { 1.0 };
        let dims = [0, 1, 2].map(|a| (((hi[a] - lo[a]) / cell).floor() as i64 + 1).max(1));
        let mut index = NearestIndex {
            points: &cloud.points,
            lo,
            cell,
            dims,
            start: Vec::new(),
            order: Vec::new(),
        };
        let buckets = (dims[0] * dims[1] * dims[2]) as usize;
        let ids: Vec<usize> = cloud
            .points
            .iter()
            .map(|p| {
                let c = index.clamped_cell(p);
                index.bucket(c)
            })
            .collect();
        let mut start = vec![0usize; buckets + 1];
        for &b in &ids {
            start[b + 1] += 1;
        }
        for b in 0..buckets {
            start[b + 1] += start[b];
        }
        let mut fill = start.clone();
        let mut order = vec![0; ids.len()];
        for (i, &b) in ids.iter().enumerate() {
            order[fill[b]] = i;
            fill[b] += 1;
        }
        index.start = start;
        index.order = order;
        Ok(index)
    }

    fn raw_cell(&self, p: &Vec3) -> [i64; 3] {
        [0, 1, 2].map(|a| ((p[a] - self.lo[a]) / self.cell).floor() as i64)
    }

    fn clamped_cell(&self, p: &Vec3) -> [i64; 3] {
        let c = self.raw_cell(p);
        [0, 1, 2].map(|a| c[a].clamp(0, self.dims[a] - 1))
    }

    fn bucket(&self, c: [i64; 3]) -> usize {
        ((c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]) as usize
    }

    /// Smallest squared distance from `p` to the indexed points.
    pub fn nearest_sq(&self, p: &Vec3) -> f64 {
        let c = self.raw_cell(p);
        let gap = |a: usize| (-c[a]).max(c[a] - (self.dims[a] - 1)).max(0);
        let reach = |a: usize| c[a].abs().max((self.dims[a] - 1 - c[a]).abs());
        let first = gap(0).max(gap(1)).max(gap(2));
        let last = reach(0).max(reach(1)).max(reach(2));
        let mut best = f64::INFINITY;
        for k in first..=last {
            let range = |a: usize| (c[a] - k).max(0)..=(c[a] + k).min(self.dims[a] - 1);
            for i in range(0) {
                for j in range(1) {
                    for l in range(2) {
                        let ring = (i - c[0]).abs().max((j - c[1]).abs()).max((l - c[2]).abs());
                        if ring != k {
                            continue;
                        }
                        let b = self.bucket([i, j, l]);
                        for &q in &self.order[self.start[b]..self.start[b + 1]] {
                            best = best.min((p - self.points[q]).norm_squared());
                        }
                    }
                }
            }
            // Points in rings beyond k are at least k cells away along some
            // axis; one cell of slack absorbs rounding in the bucket lookup.
            let bound = (k - 1).max(0) as f64 * self.cell;
            if best <= bound * bound {
                break;
            }
        }
        best
    }

    pub fn nearest(&self, p: &Vec3) -> f64 {
        self.nearest_sq(p).sqrt()
    }
}

/// Distance from every point of `from` to its nearest neighbor in `to`.
pub fn nearest_distances(from: &PointCloud, to: &PointCloud, squared: bool) -> Result<Vec<f64>> {
    if from.is_empty() {
        return Err(Error::Empty("nearest distances from an empty cloud"));
    }
    let index = NearestIndex::new(to)?;
    Ok(from
        .points
        .par_iter()
        .map(|p| {
            let d2 = index.nearest_sq(p);
            if squared {
                d2
            } else {
                d2.sqrt()
            }
        })
        .collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn chamfer(p: &PointCloud, q: &PointCloud, options: ChamferOptions) -> Result<f64> {
    let d_pq = mean(&nearest_distances(p, q, options.squared)?);
    let d_qp = mean(&nearest_distances(q, p, options.squared)?);
    Ok(match options.mode {
        ChamferMode::Mean => (d_pq + d_qp) / 2.0,
        ChamferMode::Sum => d_pq + d_qp,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

impl FScore {
    fn from_pr(precision: f64, recall: f64) -> Self {
        let f = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        FScore { precision, recall, f }
    }
}

/// Precision, recall and F with an inclusive `<= threshold` test.
pub fn fscore(p: &PointCloud, q: &PointCloud, threshold: f64) -> Result<FScore> {
    if !(threshold > 0.0) {
        return Err(Error::invalid(format!("F-score threshold must be > 0, got {threshold}")));
    }
    let within = |d: Vec<f64>| d.iter().filter(|&&x| x <= threshold).count() as f64 / d.len() as f64;
    let precision = within(nearest_distances(p, q, false)?);
    let recall = within(nearest_distances(q, p, false)?);
    Ok(FScore::from_pr(precision, recall))
}

/// Chamfer and F-score of two grids' voxel centers. An empty side yields
/// a NaN distance and a zero F-score.
fn grid_metrics(a: Option<PointCloud>, b: Option<PointCloud>, threshold: f64, chamfer_options: ChamferOptions) -> Result<(f64, FScore)> {
    match (a, b) {
        (Some(a), Some(b)) => Ok((chamfer(&a, &b, chamfer_options)?, fscore(&a, &b, threshold)?)),
        _ => Ok((f64::NAN, FScore::from_pr(0.0, 0.0))),
    }
}

fn centers_where(grid: &OccupancyGrid, keep: impl Fn(usize, usize, usize) -> bool) -> Option<PointCloud> {
    let n = grid.n();
    let c = |i: usize| (i as f64 + 0.5) / n as f64 - 0.5;
    let points: Vec<Vec3> = crate::voxel::sparse_coords(grid)
        .into_iter()
        .filter(|&(i, j, k)| keep(i, j, k))
        .map(|(i, j, k)| Vec3::new(c(i), c(j), c(k)))
        .collect();
    (!points.is_empty()).then(|| PointCloud::new(points))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub id: String,
    pub seed: u64,
    pub cd: f64,
    pub fscore: f64,
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    pub vis_cd: f64,
    pub vis_fscore: f64,
    pub n_gen: usize,
    pub n_gt: usize,
    pub n_vis_gen: usize,
    pub n_vis_gt: usize,
}

/// Overall metrics plus metrics restricted to the voxels whose latent cell
/// (the `r`-resolution pooling of `prior`) is set.
pub fn visible_region_eval(
    gen: &OccupancyGrid,
    gt: &OccupancyGrid,
    prior: &OccupancyGrid,
    r: usize,
    threshold: f64,
    chamfer_options: ChamferOptions,
) -> Result<EvalRecord> {
    let n = gt.n();
    if gen.n() != n || prior.n() != n {
        return Err(Error::shape(
            "visible_region_eval",
            format!("resolutions gen {}, gt {}, prior {}", gen.n(), n, prior.n()),
        ));
    }
    let cells = downsample_mask(prior, r)?;
    if cells.count() == 0 {
        return Err(Error::Empty("visible_region_eval: prior covers no cell"));
    }
    let f = n / r;
    let inside = |i: usize, j: usize, k: usize| cells.get(i / f, j / f, k / f);
    let vis_gen = centers_where(gen, inside);
    let vis_gt = centers_where(gt, inside);
    let (n_vis_gen, n_vis_gt) = (vis_gen.as_ref().map_or(0, |c| c.len()), vis_gt.as_ref().map_or(0, |c| c.len()));
    let (vis_cd, vis_f) = grid_metrics(vis_gen, vis_gt, threshold, chamfer_options)?;
    let (cd, all) = grid_metrics(voxel_centers(gen).ok(), voxel_centers(gt).ok(), threshold, chamfer_options)?;
    Ok(EvalRecord {
        id: String::new(),
        seed: 0,
        cd,
        fscore: all.f,
        precision: all.precision,
        recall: all.recall,
        iou: grid_iou(gen, gt)?,
        vis_cd,
        vis_fscore: vis_f.f,
        n_gen: gen.count(),
        n_gt: gt.count(),
        n_vis_gen,
        n_vis_gt,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Jsonl,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "jsonl" => Ok(ReportFormat::Jsonl),
            other => Err(Error::invalid(format!("report format must be csv or jsonl, got `{other}`"))),
        }
    }
}

/// Output row; the aggregate row has id `mean`, no seed, and mean counts.
#[derive(Serialize)]
struct Row<'a> {
    id: &'a str,
    seed: Option<u64>,
    cd: f64,
    fscore: f64,
    precision: f64,
    recall: f64,
    iou: f64,
    vis_cd: f64,
    vis_fscore: f64,
    n_gen: f64,
    n_gt: f64,
    n_vis_gen: f64,
    n_vis_gt: f64,
}

impl<'a> Row<'a> {
    fn of(r: &'a EvalRecord) -> Self {
        Row {
            id: &r.id,
            seed: Some(r.seed),
            cd: r.cd,
            fscore: r.fscore,
            precision: r.precision,
            recall: r.recall,
            iou: r.iou,
            vis_cd: r.vis_cd,
            vis_fscore: r.vis_fscore,
            n_gen: r.n_gen as f64,
            n_gt: r.n_gt as f64,
            n_vis_gen: r.n_vis_gen as f64,
            n_vis_gt: r.n_vis_gt as f64,
        }
    }
}

/// Mean of the finite values; NaN when there are none.
pub fn finite_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, count) = values
        .into_iter()
        .filter(|v| v.is_finite())
        .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

/// Aggregate means over records. Distances skip NaN entries (objects with
/// an empty side).
pub fn aggregate(records: &[EvalRecord]) -> EvalRecord {
    let m = |f: fn(&EvalRecord) -> f64| finite_mean(records.iter().map(f));
    EvalRecord {
        id: "mean".into(),
        seed: 0,
        cd: m(|r| r.cd),
        fscore: m(|r| r.fscore),
        precision: m(|r| r.precision),
        recall: m(|r| r.recall),
        iou: m(|r| r.iou),
        vis_cd: m(|r| r.vis_cd),
        vis_fscore: m(|r| r.vis_fscore),
        n_gen: 0,
        n_gt: 0,
        n_vis_gen: 0,
        n_vis_gt: 0,
    }
}

pub fn write_report(records: &[EvalRecord], w: impl Write, format: ReportFormat) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Empty("report has no records"));
    }
    let agg = aggregate(records);
    let cm = |f: fn(&EvalRecord) -> usize| records.iter().map(|r| f(r) as f64).sum::<f64>() / records.len() as f64;
    let mut rows: Vec<Row> = records.iter().map(Row::of).collect();
    let mut last = Row::of(&agg);
    last.seed = None;
    last.n_gen = cm(|r| r.n_gen);
    last.n_gt = cm(|r| r.n_gt);
    last.n_vis_gen = cm(|r| r.n_vis_gen);
    last.n_vis_gt = cm(|r| r.n_vis_gt);
    rows.push(last);
    match format {
        ReportFormat::Csv => {
            let mut out = csv::Writer::from_writer(w);
            for row in &rows {
                out.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
            }
            out.flush()?;
        }
        ReportFormat::Jsonl => {
            let mut w = w;
            for row in &rows {
                serde_json::to_writer(&mut w, row).map_err(|e| Error::Format(e.to_string()))?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

pub fn emit_report(records: &[EvalRecord], path: &Path, format: ReportFormat) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_report(records, &mut w, format)?;
    w.flush().map_err(|e| Error::io(path, e))
}
