use crate::error::{Error, Result};
use crate::latent::grid_to_tensor;
use crate::latent::layers::{conv, init_conv, Bound};
use crate::numcore::{Graph, ParamSet, Rng, Tensor, Var};
use crate::voxel::OccupancyGrid;

/// Probability clamp inside the reconstruction loss.
const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct VaeConfig {
    /// Grid resolution.
    pub n: usize,
    /// Latent resolution; `n / r` must be a power of two.
    pub r: usize,
    pub c_s: usize,
    /// Channels after the first downsampling stage; doubled per stage up to 64.
    pub hidden: usize,
    /// Weight of the latent squared-norm penalty.
    pub beta: f64,
    /// Standard deviation of the reparameterization noise added to the
    /// latent during training; 0 keeps the encoder deterministic.
    pub noise_std: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            n: 16,
            r: 4,
            c_s: 4,
            hidden: 16,
            beta: 1e-4,
            noise_std: 0.0,
        }
    }
}

impl VaeConfig {
    pub fn stages(&self) -> Result<usize> {
        if self.r == 0 || self.n % self.r != 0 || !(self.n / self.r).is_power_of_two() || self.n == self.r {
            return Err(Error::invalid(format!(
                "grid resolution {} must be the latent resolution {} times a power of two >= 2",
                self.n, self.r
            )));
        }
        Ok((self.n / self.r).trailing_zeros() as usize)
    }

    fn channels(&self, stage: usize) -> usize {
        (self.hidden << stage).min(64)
    }

    pub fn validate(&self) -> Result<()> {
        self.stages()?;
        if self.c_s == 0 || self.hidden == 0 {
            return Err(Error::invalid("latent and hidden channel counts must be >= 1"));
        }
        if !(self.beta >= 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::invalid("beta and noise_std must be >= 0"));
        }
        Ok(())
    }
}

/// Strided-convolution encoder and upsampling decoder over occupancy grids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vae {
    pub config: VaeConfig,
    pub params: ParamSet,
}

impl Vae {
    pub fn new(config: VaeConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let stages = config.stages()?;
        let mut p = ParamSet::new();
        let silu_gain = 2f64.sqrt();
        for s in 0..stages {
            let ci = if s == 0 { 1 } else { config.channels(s - 1) };
            init_conv(&mut p, rng, &format!("enc.{s}"), 3, ci, config.channels(s), silu_gain);
        }
        let top = config.channels(stages - 1);
        init_conv(&mut p, rng, "enc.out", 1, top, config.c_s, 1.0);
        init_conv(&mut p, rng, "dec.in", 1, config.c_s, top, silu_gain);
        init_conv(&mut p, rng, "dec.mid", 3, top, top, silu_gain);
        for s in (0..stages).rev() {
            let co = if s == 0 { 1 } else { config.channels(s - 1) };
            init_conv(&mut p, rng, &format!("dec.{s}"), 3, config.channels(s), co, silu_gain);
        }
        Ok(Vae { config, params: p })
    }

    pub fn from_params(config: VaeConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let mut probe = Vae::new(config.clone(), &mut Rng::new(0))?;
        if probe.params.names() != params.names()
            || probe.params.tensors().iter().zip(params.tensors()).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Format("autoencoder parameters do not match the configuration".into()));
        }
        probe.params = params;
        Ok(probe)
    }

    fn check_grid(&self, grid: &OccupancyGrid) -> Result<()> {
        if grid.n() != self.config.n {
            return Err(Error::shape(
                "encode_ss",
                format!("grid resolution {} but model expects {}", grid.n(), self.config.n),
            ));
        }
        Ok(())
    }

    fn check_latent(&self, q: &Tensor) -> Result<()> {
        let r = self.config.r;
        if q.shape() != [r, r, r, self.config.c_s] {
            return Err(Error::shape(
                "decode_ss",
                format!("latent {:?}, model expects {:?}", q.shape(), [r, r, r, self.config.c_s]),
            ));
        }
        Ok(())
    }

    pub(crate) fn encode_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let stages = self.config.stages()?;
        let mut h = x;
        for s in 0..stages {
            h = conv(g, p, &format!("enc.{s}"), h, 2)?;
            h = g.silu(h)?;
        }
        conv(g, p, "enc.out", h, 1)
    }

    /// Returns occupancy probabilities `[b, n, n, n, 1]`.
    pub(crate) fn decode_graph(&self, g: &mut Graph, p: &Bound, q: Var) -> Result<Var> {
        let stages = self.config.stages()?;
        let mut h = conv(g, p, "dec.in", q, 1)?;
        h = g.silu(h)?;
        h = conv(g, p, "dec.mid", h, 1)?;
        h = g.silu(h)?;
        for s in (0..stages).rev() {
            h = g.upsample3d(h, 2)?;
            h = conv(g, p, &format!("dec.{s}"), h, 1)?;
            if s > 0 {
                h = g.silu(h)?;
            }
        }
        g.sigmoid(h)
    }

    pub fn encode_batch(&self, grids: &[&OccupancyGrid]) -> Result<Vec<Tensor>> {
        if grids.is_empty() {
            return Ok(Vec::new());
        }
        for grid in grids {
            self.check_grid(grid)?;
        }
        let xs: Vec<Tensor> = grids.iter().map(|g| grid_to_tensor(g)).collect();
        let mut g = Graph::new();
        let p = Bound::bind(&mut g, &self.params, false);
        let x = g.leaf(Tensor::stack(&xs.iter().collect::<Vec<_>>())?);
        let q = self.encode_graph(&mut g, &p, x)?;
        Ok(g.value(q).unstack())
    }

    pub fn decode_probs_batch(&self, latents: &[&Tensor]) -> Result<Vec<Tensor>> {
        if latents.is_empty() {
            return Ok(Vec::new());
        }
        for q in latents {
            self.check_latent(q)?;
        }
        let mut g = Graph::new();
        let p = Bound::bind(&mut g, &self.params, false);
        let q = g.leaf(Tensor::stack(latents)?);
        let probs = self.decode_graph(&mut g, &p, q)?;
        Ok(g.value(probs).unstack())
    }

    pub fn decode_batch(&self, latents: &[&Tensor], threshold: f64) -> Result<Vec<OccupancyGrid>> {
        self.decode_probs_batch(latents)?
            .iter()
            .map(|probs| binarize(probs, self.config.n, threshold))
            .collect()
    }
}

fn binarize(probs: &Tensor, n: usize, threshold: f64) -> Result<OccupancyGrid> {
    let cells: Vec<bool> = probs.data().iter().map(|&p| p >= threshold).collect();
    OccupancyGrid::from_bools(n, &cells)
}

/// Latent `[r, r, r, c_s]` of one grid.
pub fn encode_ss(grid: &OccupancyGrid, vae: &Vae) -> Result<Tensor> {
    Ok(vae.encode_batch(&[grid])?.remove(0))
}

/// Decoded occupancy, cells with probability `>= threshold` set.
pub fn decode_ss(latent: &Tensor, vae: &Vae, threshold: f64) -> Result<OccupancyGrid> {
    Ok(vae.decode_batch(&[latent], threshold)?.remove(0))
}

/// Mean reconstruction cross-entropy plus `beta * |q|^2` averaged over the
/// batch. With `noise` the decoder sees the latent perturbed by
/// `noise_std`-scaled Gaussian draws (the penalty stays on the mean).
/// Returns the loss and gradients in parameter order.
pub fn vae_loss_batch(vae: &Vae, grids: &[&OccupancyGrid], noise: Option<&mut Rng>) -> Result<(f64, Vec<Tensor>)> {
    if grids.is_empty() {
        return Err(Error::Empty("vae_loss: empty batch"));
    }
    for grid in grids {
        vae.check_grid(grid)?;
    }
    let xs: Vec<Tensor> = grids.iter().map(|g| grid_to_tensor(g)).collect();
    let target = Tensor::stack(&xs.iter().collect::<Vec<_>>())?;
    let mut g = Graph::new();
    let p = Bound::bind(&mut g, &vae.params, true);
    let x = g.leaf(target.clone());
    let q = vae.encode_graph(&mut g, &p, x)?;
    let q_dec = match noise {
        Some(rng) if vae.config.noise_std > 0.0 => {
            let e = rng.normal_tensor(g.shape(q)).map(|v| v * vae.config.noise_std);
            let e = g.leaf(e);
            g.add(q, e)?
        }
        _ => q,
    };
    let probs = vae.decode_graph(&mut g, &p, q_dec)?;
    let rec = g.bce(probs, &target, BCE_EPS)?;
    let sq = g.mul(q, q)?;
    let norm = g.sum(sq)?;
    let reg = g.scale(norm, vae.config.beta / grids.len() as f64)?;
    let loss = g.add(rec, reg)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item(), p.vars().iter().map(|&v| grads.get(v)).collect()))
}

/// Deterministic loss of a single grid.
pub fn vae_loss(grid: &OccupancyGrid, vae: &Vae) -> Result<f64> {
    vae_loss_batch(vae, &[grid], None).map(|(l, _)| l)
}
