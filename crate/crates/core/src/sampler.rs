//! Two-stage Euler sampling of the learned velocity field.
//!
//! The noise level runs from 1 to 0 on the grid `sigma_k = 1 - k / t`.
//! Steps `1..=s` feed the visibility mask to the network (structural
//! inpainting); steps `s+1..=t` feed the all-ones mask (boundary refinement).

use crate::error::{Error, Result};
use crate::latent::{concat_mask, decode_ss, mix_latent, ones_mask, Vae, VelocityField};
use crate::numcore::{Rng, Tensor};
use crate::voxel::OccupancyGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Schedule {
    /// Total Euler steps.
    pub t: usize,
    /// Steps that use the visibility mask.
    pub s: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { t: 50, s: 25 }
    }
}

impl Schedule {
    pub fn new(t: usize, s: usize) -> Result<Self> {
        let sched = Schedule { t, s };
        sched.validate()?;
        Ok(sched)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if self.s > self.t {
            return Err(Error::invalid(format!(
                "inpainting steps {} exceed total steps {}",
                self.s, self.t
            )));
        }
        Ok(())
    }

    /// `sigma_k = 1 - k / t`, exactly 0 at `k = t`.
    pub fn sigma(&self, k: usize) -> f64 {
        1.0 - k as f64 / self.t as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SampleOptions {
    /// Re-blend the prior latent under the mask after every stage-1 step.
    /// This goes beyond the plain two-stage procedure and is off by default.
    pub reanchor: bool,
    /// Keep every intermediate state.
    pub record: bool,
}

/// State after one step together with what the network was given.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStep {
    pub step: usize,
    /// Noise level the velocity was evaluated at.
    pub sigma: f64,
    pub mask: Tensor,
    pub state: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub latent: Tensor,
    pub trajectory: Vec<TrajectoryStep>,
}

/// One sampling run for the batched sampler.
#[derive(Clone, Debug)]
pub struct SampleJob {
    pub q_vis: Tensor,
    pub m_s: Tensor,
    pub cond: Vec<f64>,
    /// Gaussian noise for the unobserved cells.
    pub eps: Tensor,
}

fn batch_of(items: &[&Tensor]) -> Result<Tensor> {
    Tensor::stack(items)
}

fn check_field(net: &impl VelocityField, q: &Tensor, m: &Tensor, cond: &[f64]) -> Result<()> {
    let s = q.shape();
    if s.len() != 4 || s[3] != net.latent_channels() {
        return Err(Error::shape(
            "sampler",
            format!("latent {:?} vs model channels {}", s, net.latent_channels()),
        ));
    }
    if m.shape() != [s[0], s[1], s[2], net.mask_channels()] {
        return Err(Error::shape("sampler", format!("mask {:?} vs latent {:?}", m.shape(), s)));
    }
    if cond.len() != net.cond_len() {
        return Err(Error::shape(
            "sampler",
            format!("condition length {} vs model {}", cond.len(), net.cond_len()),
        ));
    }
    Ok(())
}

/// `x - delta * v(concat_mask(x, m), sigma, cond)` on a single latent.
pub fn euler_step(
    net: &impl VelocityField,
    x: &Tensor,
    m: &Tensor,
    sigma: f64,
    delta: f64,
    cond: &[f64],
) -> Result<Tensor> {
    if !(sigma > 0.0 && sigma <= 1.0) {
        return Err(Error::invalid(format!("euler_step sigma must lie in (0, 1], got {sigma}")));
    }
    if !(delta > 0.0 && delta <= sigma) {
        return Err(Error::invalid(format!("euler_step delta must lie in (0, sigma], got {delta}")));
    }
    check_field(net, x, m, cond)?;
    let xb = batch_of(&[&concat_mask(x, m)?])?;
    let cb = Tensor::new(&[1, cond.len()], cond.to_vec())?;
    let v = net.velocity(&xb, sigma, &cb)?.unstack().remove(0);
    x.zip_map(&v, |a, b| a - delta * b)
}

/// Runs several independent samplings in lockstep; each job's result
/// depends only on its own inputs.
pub fn staged_sample_batch(
    net: &impl VelocityField,
    jobs: &[SampleJob],
    sched: Schedule,
    opts: SampleOptions,
) -> Result<Vec<SampleOutput>> {
    sched.validate()?;
    if jobs.is_empty() {
        return Ok(Vec::new());
    }
    let mut xs = Vec::with_capacity(jobs.len());
    for j in jobs {
        check_field(net, &j.q_vis, &j.m_s, &j.cond)?;
        xs.push(mix_latent(&j.q_vis, &j.m_s, &j.eps)?);
    }
    let shape = jobs[0].m_s.shape().to_vec();
    let m1 = ones_mask(shape[0], shape[3]);
    let conds: Vec<f64> = jobs.iter().flat_map(|j| j.cond.iter().copied()).collect();
    let cond = Tensor::new(&[jobs.len(), net.cond_len()], conds)?;
    let mut trajectories = vec![Vec::new(); jobs.len()];

    for k in 1..=sched.t {
        let sigma = sched.sigma(k - 1);
        let delta = sigma - sched.sigma(k);
        let stage1 = k <= sched.s;
        let inputs = jobs
            .iter()
            .zip(&xs)
            .map(|(j, x)| concat_mask(x, if stage1 { &j.m_s } else { &m1 }))
            .collect::<Result<Vec<_>>>()?;
        let v = net.velocity(&batch_of(&inputs.iter().collect::<Vec<_>>())?, sigma, &cond)?;
        for (i, vi) in v.unstack().into_iter().enumerate() {
            let mut next = xs[i].zip_map(&vi, |a, b| a - delta * b)?;
            if stage1 && opts.reanchor {
                next = mix_latent(&jobs[i].q_vis, &jobs[i].m_s, &next)?;
            }
            if opts.record {
                trajectories[i].push(TrajectoryStep {
                    step: k,
                    sigma,
                    mask: if stage1 { jobs[i].m_s.clone() } else { m1.clone() },
                    state: next.clone(),
                });
            }
            xs[i] = next;
        }
    }
    Ok(xs
        .into_iter()
        .zip(trajectories)
        .map(|(latent, trajectory)| SampleOutput { latent, trajectory })
        .collect())
}

/// Starts from `mix_latent(q_vis, m_s, eps)` with `eps` drawn from `rng`
/// and integrates to `sigma = 0`.
pub fn staged_sample(
    net: &impl VelocityField,
    q_vis: &Tensor,
    m_s: &Tensor,
    cond: &[f64],
    sched: Schedule,
    rng: &mut Rng,
    opts: SampleOptions,
) -> Result<SampleOutput> {
    let job = SampleJob {
        q_vis: q_vis.clone(),
        m_s: m_s.clone(),
        cond: cond.to_vec(),
        eps: rng.normal_tensor(q_vis.shape()),
    };
    Ok(staged_sample_batch(net, &[job], sched, opts)?.remove(0))
}

/// Moves `q_vis` to noise level `strength` against fresh Gaussian noise and
/// integrates back to 0 in `k_steps` steps with the all-ones mask. The
/// result stands in for `q_vis` under `m_s` in a later [`staged_sample`].
pub fn repair_noisy_prior(
    net: &impl VelocityField,
    q_vis: &Tensor,
    m_s: &Tensor,
    k_steps: usize,
    strength: f64,
    cond: &[f64],
    rng: &mut Rng,
) -> Result<Tensor> {
    if k_steps == 0 {
        return Err(Error::invalid("repair needs at least one step"));
    }
    if !(strength > 0.0 && strength <= 1.0) {
        return Err(Error::invalid(format!("repair strength must lie in (0, 1], got {strength}")));
    }
    check_field(net, q_vis, m_s, cond)?;
    let eps = rng.normal_tensor(q_vis.shape());
    let mut x = q_vis.zip_map(&eps, |q, e| (1.0 - strength) * q + strength * e)?;
    let s = m_s.shape();
    let m1 = ones_mask(s[0], s[3]);
    let level = |j: usize| strength * (1.0 - j as f64 / k_steps as f64);
    for j in 1..=k_steps {
        let (sigma, next) = (level(j - 1), level(j));
        x = euler_step(net, &x, &m1, sigma, sigma - next, cond)?;
    }
    Ok(x)
}

/// Samples a latent and decodes it to occupancy.
#[allow(clippy::too_many_arguments)]
pub fn generate_grid(
    net: &impl VelocityField,
    vae: &Vae,
    q_vis: &Tensor,
    m_s: &Tensor,
    cond: &[f64],
    sched: Schedule,
    threshold: f64,
    rng: &mut Rng,
    opts: SampleOptions,
) -> Result<OccupancyGrid> {
    let out = staged_sample(net, q_vis, m_s, cond, sched, rng, opts)?;
    decode_ss(&out.latent, vae, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Velocity that ignores its input.
    struct Constant {
        v: Tensor,
        cond_len: usize,
    }

    impl VelocityField for Constant {
        fn latent_channels(&self) -> usize {
            *self.v.shape().last().unwrap()
        }
        fn mask_channels(&self) -> usize {
            1
        }
        fn cond_len(&self) -> usize {
            self.cond_len
        }
        fn velocity(&self, x: &Tensor, _sigma: f64, _cond: &Tensor) -> Result<Tensor> {
            let b = x.shape()[0];
            Tensor::stack(&vec![&self.v; b])
        }
    }

    /// Exact field of the straight path to `target`: `(x - target) / sigma`.
    struct TowardTarget {
        target: Tensor,
    }

    impl VelocityField for TowardTarget {
        fn latent_channels(&self) -> usize {
            *self.target.shape().last().unwrap()
        }
        fn mask_channels(&self) -> usize {
            1
        }
        fn cond_len(&self) -> usize {
            1
        }
        fn velocity(&self, x: &Tensor, sigma: f64, _cond: &Tensor) -> Result<Tensor> {
            let c = self.latent_channels();
            let items = x.unstack();
            let vs: Vec<Tensor> = items
                .iter()
                .map(|xi| {
                    let lat: Vec<f64> = xi.data().chunks(c + 1).flat_map(|cell| cell[..c].to_vec()).collect();
                    let lat = Tensor::new(self.target.shape(), lat).unwrap();
                    lat.zip_map(&self.target, |a, t| (a - t) / sigma).unwrap()
                })
                .collect();
            Tensor::stack(&vs.iter().collect::<Vec<_>>())
        }
    }

    #[test]
    fn zero_velocity_keeps_state() {
        let net = Constant {
            v: Tensor::zeros(&[2, 2, 2, 3]),
            cond_len: 2,
        };
        let x = Rng::new(1).normal_tensor(&[2, 2, 2, 3]);
        let m = Tensor::zeros(&[2, 2, 2, 1]);
        assert_eq!(euler_step(&net, &x, &m, 0.5, 0.1, &[0.0, 0.0]).unwrap(), x);
        assert!(euler_step(&net, &x, &m, 0.0, 0.1, &[0.0, 0.0]).is_err());
        assert!(euler_step(&net, &x, &m, 0.5, 0.6, &[0.0, 0.0]).is_err());
        assert!(euler_step(&net, &x, &m, 0.5, 0.1, &[0.0]).is_err());
    }

    #[test]
    fn schedule_reaches_zero_exactly() {
        for t in [1, 3, 7, 50, 97] {
            let s = Schedule::new(t, 0).unwrap();
            assert_eq!(s.sigma(t), 0.0);
            assert_eq!(s.sigma(0), 1.0);
        }
        assert!(Schedule::new(0, 0).is_err());
        assert!(Schedule::new(10, 11).is_err());
    }

    #[test]
    fn constant_field_lands_on_endpoint() {
        let mut rng = Rng::new(7);
        let q_vis = rng.normal_tensor(&[4, 4, 4, 4]);
        let x0 = rng.normal_tensor(&[4, 4, 4, 4]);
        let mut m = Tensor::zeros(&[4, 4, 4, 1]);
        for i in (0..64).step_by(3) {
            m.data_mut()[i] = 1.0;
        }
        let seed_rng = Rng::new(99);
        let eps = seed_rng.clone().normal_tensor(&[4, 4, 4, 4]);
        let x1 = mix_latent(&q_vis, &m, &eps).unwrap();
        let net = Constant {
            v: x1.zip_map(&x0, |a, b| a - b).unwrap(),
            cond_len: 1,
        };
        let out = staged_sample(&net, &q_vis, &m, &[0.0], Schedule::default(), &mut seed_rng.clone(), SampleOptions::default())
            .unwrap();
        assert!(out.latent.max_abs_diff(&x0) <= 1e-9);
    }

    #[test]
    fn trajectory_masks_follow_stages() {
        let mut rng = Rng::new(3);
        let q = rng.normal_tensor(&[2, 2, 2, 2]);
        let mut m = Tensor::zeros(&[2, 2, 2, 1]);
        m.data_mut()[0] = 1.0;
        let net = Constant {
            v: Tensor::full(&[2, 2, 2, 2], 0.1),
            cond_len: 1,
        };
        let opts = SampleOptions { record: true, ..Default::default() };
        let out = staged_sample(&net, &q, &m, &[0.0], Schedule::new(10, 4).unwrap(), &mut rng, opts).unwrap();
        assert_eq!(out.trajectory.len(), 10);
        for st in &out.trajectory {
            if st.step <= 4 {
                assert_eq!(st.mask, m);
            } else {
                assert_eq!(st.mask, Tensor::ones(&[2, 2, 2, 1]));
            }
        }
        assert_eq!(out.trajectory.last().unwrap().state, out.latent);
        assert_eq!(out.trajectory[0].sigma, 1.0);
    }

    #[test]
    fn same_seed_same_output() {
        let net = Constant {
            v: Tensor::full(&[2, 2, 2, 2], 0.3),
            cond_len: 1,
        };
        let q = Tensor::zeros(&[2, 2, 2, 2]);
        let m = Tensor::zeros(&[2, 2, 2, 1]);
        let a = staged_sample(&net, &q, &m, &[0.0], Schedule::default(), &mut Rng::new(5), SampleOptions::default()).unwrap();
        let b = staged_sample(&net, &q, &m, &[0.0], Schedule::default(), &mut Rng::new(5), SampleOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reanchor_keeps_prior_under_mask() {
        let mut rng = Rng::new(4);
        let q = rng.normal_tensor(&[2, 2, 2, 2]);
        let m = Tensor::ones(&[2, 2, 2, 1]);
        let net = Constant {
            v: Tensor::full(&[2, 2, 2, 2], 1.0),
            cond_len: 1,
        };
        let opts = SampleOptions { reanchor: true, record: false };
        let out = staged_sample(&net, &q, &m, &[0.0], Schedule::new(4, 4).unwrap(), &mut rng, opts).unwrap();
        assert_eq!(out.latent, q);
    }

    #[test]
    fn repair_with_exact_field() {
        let mut rng = Rng::new(6);
        let q = rng.normal_tensor(&[2, 2, 2, 3]);
        let m = Tensor::ones(&[2, 2, 2, 1]);
        let net = TowardTarget { target: q.clone() };
        let out = repair_noisy_prior(&net, &q, &m, 1, 0.3, &[0.0], &mut rng).unwrap();
        assert!(out.max_abs_diff(&q) < 1e-12);
        let tiny = repair_noisy_prior(&net, &q, &m, 5, 1e-9, &[0.0], &mut rng).unwrap();
        assert!(tiny.max_abs_diff(&q) < 1e-8);
        assert!(repair_noisy_prior(&net, &q, &m, 0, 0.3, &[0.0], &mut rng).is_err());
        assert!(repair_noisy_prior(&net, &q, &m, 2, 0.0, &[0.0], &mut rng).is_err());
        assert!(repair_noisy_prior(&net, &q, &m, 2, 1.5, &[0.0], &mut rng).is_err());
    }
}
