//! Training loops for the occupancy autoencoder and the inpainting network.

use std::fmt;
use std::str::FromStr;

use log::info;

use crate::dataset::TrainingPair;
use crate::error::{Error, Result};
use crate::latent::{cfm_loss_batch, mix_latent, ones_mask, vae_loss_batch, CfmSample, InpaintConfig, InpaintNet, Vae, VaeConfig};
use crate::numcore::{AdamConfig, AdamState, Rng, Tensor};
use crate::voxel::{grid_iou, OccupancyGrid};

/// Cosine decay from `lr` to `lr * floor` over `steps`.
fn cosine_lr(lr: f64, floor: f64, step: usize, steps: usize) -> f64 {
    let t = step as f64 / steps.max(1) as f64;
    lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Epoch-wise shuffled batches without replacement.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    fn new(len: usize) -> Self {
        Batcher {
            order: (0..len).collect(),
            pos: len,
        }
    }

    fn next(&mut self, batch: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.pos == self.order.len() {
                rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeTrainConfig {
    /// Upper bound on optimizer steps.
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stop once mean train IoU reaches this value (checked every `eval_every` steps).
    pub target_iou: Option<f64>,
    pub eval_every: usize,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig {
            steps: 3000,
            batch: 16,
            lr: 2e-3,
            seed: 0,
            target_iou: Some(0.95),
            eval_every: 250,
        }
    }
}

impl fmt::Display for VaeTrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "steps={} batch={} lr={:e} seed={} target_iou={:?} eval_every={}",
            self.steps, self.batch, self.lr, self.seed, self.target_iou, self.eval_every
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainLog {
    /// Loss of every optimizer step.
    pub losses: Vec<f64>,
    /// `(step, mean train IoU)` at every evaluation.
    pub evals: Vec<(usize, f64)>,
}

/// Mean IoU of `decode(encode(M))` binarized at 0.5 against `M`.
pub fn reconstruction_iou(vae: &Vae, grids: &[OccupancyGrid]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in grids.chunks(32) {
        let refs: Vec<&OccupancyGrid> = chunk.iter().collect();
        let latents = vae.encode_batch(&refs)?;
        let decoded = vae.decode_batch(&latents.iter().collect::<Vec<_>>(), 0.5)?;
        for (d, g) in decoded.iter().zip(chunk) {
            total += grid_iou(d, g)?;
        }
    }
    Ok(total / grids.len() as f64)
}

pub fn train_vae(grids: &[OccupancyGrid], config: VaeConfig, tc: &VaeTrainConfig) -> Result<(Vae, TrainLog)> {
    if grids.is_empty() {
        return Err(Error::Empty("train_vae: no training grids"));
    }
    if tc.batch == 0 || tc.steps == 0 {
        return Err(Error::invalid("batch and steps must be >= 1"));
    }
    let mut rng = Rng::stream(tc.seed, 0);
    let mut vae = Vae::new(config, &mut rng)?;
    let mut adam = AdamState::new(AdamConfig { lr: tc.lr, ..AdamConfig::default() }, vae.params.tensors())?;
    let mut batcher = Batcher::new(grids.len());
    let mut log = TrainLog {
        losses: Vec::with_capacity(tc.steps),
        evals: Vec::new(),
    };
    for step in 1..=tc.steps {
        let idx = batcher.next(tc.batch, &mut rng);
        let batch: Vec<&OccupancyGrid> = idx.iter().map(|&i| &grids[i]).collect();
        let (loss, grads) = vae_loss_batch(&vae, &batch, Some(&mut rng))?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("autoencoder loss"));
        }
        adam.config.lr = cosine_lr(tc.lr, 0.05, step, tc.steps);
        adam.step(vae.params.tensors_mut(), &grads)?;
        log.losses.push(loss);
        if tc.eval_every > 0 && (step % tc.eval_every == 0 || step == tc.steps) {
            let iou = reconstruction_iou(&vae, grids)?;
            info!("train-vae step {step}: loss {loss:.5}, train IoU {iou:.4}");
            log.evals.push((step, iou));
            if tc.target_iou.is_some_and(|t| iou >= t) {
                break;
            }
        }
    }
    Ok((vae, log))
}

/// Input used for the mask-dropout fraction of training samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DropoutMode {
    /// Same bridge state as the regular sample, all-ones mask channel.
    #[default]
    Blind,
    /// All-ones mask with `q_comb = q_gt`.
    Exact,
}

impl fmt::Display for DropoutMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropoutMode::Blind => "blind",
            DropoutMode::Exact => "exact",
        })
    }
}

impl FromStr for DropoutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blind" => Ok(DropoutMode::Blind),
            "exact" => Ok(DropoutMode::Exact),
            other => Err(Error::invalid(format!("mask dropout mode must be blind or exact, got `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InpaintTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub mask_dropout: f64,
    pub dropout_mode: DropoutMode,
    pub log_every: usize,
}

impl Default for InpaintTrainConfig {
    fn default() -> Self {
        InpaintTrainConfig {
            steps: 5000,
            batch: 16,
            lr: 1e-3,
            seed: 0,
            mask_dropout: 0.1,
            dropout_mode: DropoutMode::Blind,
            log_every: 500,
        }
    }
}

impl fmt::Display for InpaintTrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "steps={} batch={} lr={:e} seed={} mask_dropout={} dropout_mode={}",
            self.steps, self.batch, self.lr, self.seed, self.mask_dropout, self.dropout_mode
        )
    }
}

struct Prepared {
    q_comb: Tensor,
    mask: Tensor,
}

/// Fresh noise outside the observed cells, then mask dropout.
fn prepare(pair: &TrainingPair, tc: &InpaintTrainConfig, rng: &mut Rng) -> Result<Prepared> {
    let eps = rng.normal_tensor(pair.q_comb.shape());
    let q_comb = mix_latent(&pair.q_comb, &pair.m_s, &eps)?;
    if rng.uniform() < tc.mask_dropout {
        let r = pair.m_s.shape()[0];
        let ones = ones_mask(r, pair.m_s.shape()[3]);
        return Ok(match tc.dropout_mode {
            DropoutMode::Blind => Prepared { q_comb, mask: ones },
            DropoutMode::Exact => Prepared {
                q_comb: pair.q_gt.clone(),
                mask: ones,
            },
        });
    }
    Ok(Prepared {
        q_comb,
        mask: pair.m_s.clone(),
    })
}

pub fn train_inpaint(pairs: &[TrainingPair], config: InpaintConfig, tc: &InpaintTrainConfig) -> Result<(InpaintNet, TrainLog)> {
    if pairs.is_empty() {
        return Err(Error::Empty("train_inpaint: no training pairs"));
    }
    if tc.batch == 0 || tc.steps == 0 {
        return Err(Error::invalid("batch and steps must be >= 1"));
    }
    if !(0.0..=1.0).contains(&tc.mask_dropout) {
        return Err(Error::invalid(format!("mask dropout must lie in [0, 1], got {}", tc.mask_dropout)));
    }
    let mut rng = Rng::stream(tc.seed, 1);
    let mut net = InpaintNet::new(config, &mut rng)?;
    let mut adam = AdamState::new(AdamConfig { lr: tc.lr, ..AdamConfig::default() }, net.params.tensors())?;
    let mut batcher = Batcher::new(pairs.len());
    let mut log = TrainLog {
        losses: Vec::with_capacity(tc.steps),
        evals: Vec::new(),
    };
    let mut window = 0.0;
    for step in 1..=tc.steps {
        let idx = batcher.next(tc.batch, &mut rng);
        let mut prepared = Vec::with_capacity(idx.len());
        let mut sigmas = Vec::with_capacity(idx.len());
        for &i in &idx {
            prepared.push(prepare(&pairs[i], tc, &mut rng)?);
            sigmas.push(rng.uniform());
        }
        let samples: Vec<CfmSample> = idx
            .iter()
            .zip(&prepared)
            .zip(&sigmas)
            .map(|((&i, p), &sigma)| CfmSample {
                q_gt: &pairs[i].q_gt,
                q_comb: &p.q_comb,
                mask: &p.mask,
                cond: &pairs[i].cond,
                sigma,
            })
            .collect();
        let (loss, grads) = cfm_loss_batch(&net, &samples)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("flow-matching loss"));
        }
        adam.config.lr = cosine_lr(tc.lr, 0.05, step, tc.steps);
        adam.step(net.params.tensors_mut(), &grads)?;
        log.losses.push(loss);
        window += loss;
        if tc.log_every > 0 && step % tc.log_every == 0 {
            info!("train-inpaint step {step}: mean loss {:.5}", window / tc.log_every as f64);
            window = 0.0;
        }
    }
    Ok((net, log))
}
