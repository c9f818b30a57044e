//! End-to-end toy pipeline: synthetic corpus, autoencoder, training pairs,
//! held-out single-view evaluation and schedule sweeps.
//!
//! Every random quantity comes from a stream derived from the master seed
//! and a fixed purpose tag, so stages can be rerun independently.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::Config;
use crate::dataset::{build_pairs, gen_corpus, prepare_assets, prior_grids, visible_points, Asset, ShapeFamily, TrainingPair};
use crate::error::{Error, Result};
use crate::geometry::{make_view_ring, Camera, PointCloud, Vec3};
use crate::latent::{mask_tensor, InpaintNet, Vae, VelocityField};
use crate::metrics::{finite_mean, visible_region_eval, EvalRecord};
use crate::numcore::{Rng, Tensor};
use crate::sampler::{repair_noisy_prior, staged_sample_batch, SampleJob, Schedule};
use crate::voxel::OccupancyGrid;

const TAG_TRAIN_SHAPES: u64 = 1;
const TAG_TRAIN_SAMPLES: u64 = 2;
const TAG_PAIRS: u64 = 3;
const TAG_EVAL_SHAPES: u64 = 4;
const TAG_EVAL_SAMPLES: u64 = 5;
const TAG_EVAL_VIEWS: u64 = 6;
const TAG_SAMPLING: u64 = 7;
const TAG_REPAIR: u64 = 8;
const TAG_JITTER: u64 = 9;

/// Seed of the stream family used for one purpose.
pub fn subseed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

pub fn view_ring(cfg: &Config) -> Result<Vec<Camera>> {
    make_view_ring(cfg.ring_views, cfg.ring_pitch, cfg.ring_radius, Vec3::zeros(), cfg.image_size)
}

pub fn training_assets(cfg: &Config) -> Result<Vec<Asset>> {
    let shapes = gen_corpus(cfg.shapes, &mut Rng::new(subseed(cfg.seed, TAG_TRAIN_SHAPES)))?;
    prepare_assets(&shapes, cfg.cond_len, cfg.surface_samples, cfg.n, subseed(cfg.seed, TAG_TRAIN_SAMPLES))
}

/// Pairs for every asset and ring view, in asset order.
pub fn make_pairs(cfg: &Config, assets: &[Asset], vae: &Vae) -> Result<Vec<TrainingPair>> {
    let ring = view_ring(cfg)?;
    let per_asset: Vec<Vec<TrainingPair>> = assets
        .par_iter()
        .enumerate()
        .map(|(i, a)| {
            let mut rng = Rng::stream(subseed(cfg.seed, TAG_PAIRS), i as u64);
            build_pairs(a, vae, &ring, cfg.tau_fraction, cfg.c_m, &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok(per_asset.into_iter().flatten().collect())
}

/// Displaces a random `fraction` of the points by Gaussian noise of the
/// given standard deviation per axis.
pub fn jitter_cloud(cloud: &PointCloud, fraction: f64, std: f64, rng: &mut Rng) -> PointCloud {
    PointCloud::new(
        cloud
            .points
            .iter()
            .map(|p| {
                if rng.uniform() < fraction {
                    p + Vec3::new(rng.normal(), rng.normal(), rng.normal()) * std
                } else {
                    *p
                }
            })
            .collect(),
    )
}

/// Optional corruption of the visible points before voxelization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub fraction: f64,
    pub std: f64,
}

/// A held-out object observed from one view.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub id: String,
    pub family: ShapeFamily,
    pub view: usize,
    pub cond: Vec<f64>,
    pub gt: OccupancyGrid,
    /// Voxelized visible points `M'`.
    pub prior: OccupancyGrid,
    /// Latent-resolution visibility mask.
    pub mask: OccupancyGrid,
    pub q_vis: Tensor,
}

/// Held-out shapes, each seen from one ring view drawn at random among
/// the views that see it.
pub fn eval_cases(cfg: &Config, vae: &Vae, jitter: Option<Jitter>) -> Result<Vec<EvalCase>> {
    if cfg.eval_shapes == 0 {
        return Err(Error::Config {
            key: "eval_shapes".into(),
            msg: "must be >= 1".into(),
        });
    }
    let shapes = gen_corpus(cfg.eval_shapes, &mut Rng::new(subseed(cfg.seed, TAG_EVAL_SHAPES)))?;
    let assets = prepare_assets(&shapes, cfg.cond_len, cfg.surface_samples, cfg.n, subseed(cfg.seed, TAG_EVAL_SAMPLES))?;
    let ring = view_ring(cfg)?;
    let mut view_rng = Rng::new(subseed(cfg.seed, TAG_EVAL_VIEWS));
    let views: Vec<usize> = assets.iter().map(|_| view_rng.below(ring.len())).collect();
    let partial: Vec<(usize, PointCloud)> = assets
        .par_iter()
        .zip(&views)
        .map(|(a, &start)| {
            for k in 0..ring.len() {
                let view = (start + k) % ring.len();
                if let Some(v) = visible_points(a, &ring[view], cfg.tau_fraction)? {
                    return Ok((view, v));
                }
            }
            Err(Error::Empty("held-out shape is visible from no ring view"))
        })
        .collect::<Result<_>>()?;
    let mut cases = Vec::with_capacity(assets.len());
    for (i, ((asset, shape), (view, visible))) in assets.iter().zip(&shapes).zip(partial).enumerate() {
        let visible = match jitter {
            Some(j) => jitter_cloud(&visible, j.fraction, j.std, &mut Rng::stream(subseed(cfg.seed, TAG_JITTER), i as u64)),
            None => visible,
        };
        let (prior, mask) = prior_grids(&visible, cfg.n, cfg.r)?;
        cases.push(EvalCase {
            id: format!("eval{i:03}"),
            family: shape.family,
            view,
            cond: asset.cond.clone(),
            gt: asset.full_grid.clone(),
            prior,
            mask,
            q_vis: Tensor::scalar(0.0),
        });
    }
    let priors: Vec<&OccupancyGrid> = cases.iter().map(|c| &c.prior).collect();
    let latents = vae.encode_batch(&priors)?;
    for (c, q) in cases.iter_mut().zip(latents) {
        c.q_vis = q;
    }
    Ok(cases)
}

/// How the prior enters generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorMode {
    Visible,
    /// `m_s = 0`, so generation starts from pure noise.
    NoPrior,
    /// Visible prior passed through noisy-prior repair first.
    Repaired,
}

/// Objects sampled together in one batched network call.
const SAMPLE_CHUNK: usize = 16;

/// Generates every case under `mode` and evaluates against ground truth.
/// Case `i` draws its noise from stream `i`, shared by all modes.
pub fn generate_cases(cfg: &Config, net: &InpaintNet, vae: &Vae, cases: &[EvalCase], mode: PriorMode, sched: Schedule) -> Result<Vec<OccupancyGrid>> {
    let r = cfg.r;
    let jobs: Vec<SampleJob> = cases
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let eps = Rng::stream(subseed(cfg.seed, TAG_SAMPLING), i as u64).normal_tensor(c.q_vis.shape());
            let (q_vis, m_s) = match mode {
                PriorMode::Visible => (c.q_vis.clone(), mask_tensor(&c.mask, net.mask_channels())),
                PriorMode::NoPrior => (Tensor::zeros(c.q_vis.shape()), Tensor::zeros(&[r, r, r, net.mask_channels()])),
                PriorMode::Repaired => {
                    let m_s = mask_tensor(&c.mask, net.mask_channels());
                    let mut rng = Rng::stream(subseed(cfg.seed, TAG_REPAIR), i as u64);
                    let q = repair_noisy_prior(net, &c.q_vis, &m_s, cfg.repair_k, cfg.repair_strength, &c.cond, &mut rng)?;
                    (q, m_s)
                }
            };
            Ok(SampleJob {
                q_vis,
                m_s,
                cond: c.cond.clone(),
                eps,
            })
        })
        .collect::<Result<_>>()?;
    let chunks: Vec<Vec<OccupancyGrid>> = jobs
        .par_chunks(SAMPLE_CHUNK)
        .map(|chunk| {
            let outs = staged_sample_batch(net, chunk, sched, cfg.sample_options())?;
            let latents: Vec<&Tensor> = outs.iter().map(|o| &o.latent).collect();
            if latents.iter().any(|q| !q.is_finite()) {
                return Err(Error::NonFinite("sampled latent"));
            }
            vae.decode_batch(&latents, cfg.decode_threshold)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

pub fn evaluate_cases(cfg: &Config, cases: &[EvalCase], generated: &[OccupancyGrid], threshold: f64) -> Result<Vec<EvalRecord>> {
    if cases.len() != generated.len() {
        return Err(Error::shape("evaluate_cases", format!("{} cases, {} grids", cases.len(), generated.len())));
    }
    cases
        .par_iter()
        .zip(generated)
        .map(|(c, g)| {
            let mut rec = visible_region_eval(g, &c.gt, &c.prior, cfg.r, threshold, cfg.chamfer_options())?;
            rec.id = c.id.clone();
            rec.seed = cfg.seed;
            Ok(rec)
        })
        .collect()
}

pub fn run_eval(cfg: &Config, net: &InpaintNet, vae: &Vae, cases: &[EvalCase], mode: PriorMode, sched: Schedule, threshold: f64) -> Result<Vec<EvalRecord>> {
    let generated = generate_cases(cfg, net, vae, cases, mode, sched)?;
    evaluate_cases(cfg, cases, &generated, threshold)
}

/// Fraction of prior-occupied voxels that are also set in the generation.
pub fn anchoring_rate(cases: &[EvalCase], generated: &[OccupancyGrid]) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (c, g) in cases.iter().zip(generated) {
        for idx in 0..c.prior.len() {
            if c.prior.get_index(idx) {
                total += 1;
                hit += g.get_index(idx) as usize;
            }
        }
    }
    hit as f64 / total.max(1) as f64
}

/// Mean squared velocity on fully visible inputs (`m_1`, clean latent)
/// and on pure-noise inputs (`m_s = 0`) at `sigma = 1`.
pub fn velocity_magnitudes(cfg: &Config, net: &InpaintNet, cases: &[EvalCase]) -> Result<(f64, f64)> {
    let r = cfg.r;
    let cm = net.mask_channels();
    let mut visible = Vec::new();
    let mut noise = Vec::new();
    let mut conds = Vec::new();
    for (i, c) in cases.iter().enumerate() {
        let eps = Rng::stream(subseed(cfg.seed, TAG_SAMPLING), i as u64).normal_tensor(c.q_vis.shape());
        visible.push(crate::latent::concat_mask(&c.q_vis, &Tensor::ones(&[r, r, r, cm]))?);
        noise.push(crate::latent::concat_mask(&eps, &Tensor::zeros(&[r, r, r, cm]))?);
        conds.extend_from_slice(&c.cond);
    }
    let cond = Tensor::new(&[cases.len(), cfg.cond_len], conds)?;
    let ms = |xs: &[Tensor]| -> Result<f64> {
        let v = net.velocity(&Tensor::stack(&xs.iter().collect::<Vec<_>>())?, 1.0, &cond)?;
        Ok(v.data().iter().map(|x| x * x).sum::<f64>() / v.numel() as f64)
    };
    Ok((ms(&visible)?, ms(&noise)?))
}

/// Parses `a:b,c:d` into schedules with `s = a`, `t = a + b`.
pub fn parse_splits(text: &str) -> Result<Vec<Schedule>> {
    text.split(',')
        .map(|item| {
            let (a, b) = item
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::invalid(format!("split `{item}` is not inpaint:refine")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("split `{item}` has a non-integer step count")))
            };
            let (s, refine) = (parse(a)?, parse(b)?);
            Schedule::new(s + refine, s)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub inpaint_steps: usize,
    pub refine_steps: usize,
    pub cd: f64,
    pub fscore: f64,
    pub vis_cd: f64,
    pub vis_fscore: f64,
}

pub fn sweep_schedules(cfg: &Config, net: &InpaintNet, vae: &Vae, cases: &[EvalCase], splits: &[Schedule], threshold: f64) -> Result<Vec<SweepRow>> {
    splits
        .iter()
        .map(|&sched| {
            let recs = run_eval(cfg, net, vae, cases, PriorMode::Visible, sched, threshold)?;
            Ok(SweepRow {
                inpaint_steps: sched.s,
                refine_steps: sched.t - sched.s,
                cd: finite_mean(recs.iter().map(|r| r.cd)),
                fscore: finite_mean(recs.iter().map(|r| r.fscore)),
                vis_cd: finite_mean(recs.iter().map(|r| r.vis_cd)),
                vis_fscore: finite_mean(recs.iter().map(|r| r.vis_fscore)),
            })
        })
        .collect()
}

pub fn write_sweep(rows: &[SweepRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_sweep(rows: &[SweepRow], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_sweep(rows, std::io::BufWriter::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_parse() {
        let s = parse_splits("50:0,40:10, 25:25,10:40").unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!((s[0].t, s[0].s), (50, 50));
        assert_eq!((s[3].t, s[3].s), (50, 10));
        assert!(parse_splits("50-0").is_err());
        assert!(parse_splits("a:1").is_err());
    }

    #[test]
    fn subseeds_differ_by_tag() {
        assert_ne!(subseed(0, 1), subseed(0, 2));
        assert_ne!(subseed(1, 1), subseed(0, 1));
    }

    #[test]
    fn jitter_moves_the_requested_share() {
        let cloud = PointCloud::new(vec![Vec3::zeros(); 1000]);
        let j = jitter_cloud(&cloud, 0.1, 0.05, &mut Rng::new(1));
        let moved = j.points.iter().filter(|p| p.norm() > 0.0).count();
        assert!((60..140).contains(&moved), "{moved}");
    }
}
