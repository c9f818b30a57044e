use crate::error::{Error, Result};
use crate::latent::layers::{conv, init_conv, init_linear, linear, Bound};
use crate::latent::{bridge_state, concat_mask, VelocityField};
use crate::numcore::{Graph, ParamSet, Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct InpaintConfig {
    pub r: usize,
    pub c_s: usize,
    pub c_m: usize,
    pub width: usize,
    pub blocks: usize,
    pub cond_len: usize,
    /// Length of the sinusoidal noise-level features.
    pub time_features: usize,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        InpaintConfig {
            r: 4,
            c_s: 4,
            c_m: 1,
            width: 32,
            blocks: 4,
            cond_len: 16,
            time_features: 32,
        }
    }
}

impl InpaintConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.c_s == 0 || self.c_m == 0 || self.width == 0 || self.cond_len == 0 {
            return Err(Error::invalid("inpaint network sizes must all be >= 1"));
        }
        if self.time_features < 2 || self.time_features % 2 != 0 {
            return Err(Error::invalid("time_features must be an even number >= 2"));
        }
        Ok(())
    }
}

/// Residual 3D conv network predicting the bridge velocity.
///
/// The input projection (`in`) maps the `c_s + c_m` concatenated channels to
/// `width`. The noise level enters through sinusoidal features and a
/// two-layer net (`t1`, `t2`); the condition vector is added after the
/// first layer. Each block `blk.{k}` receives its own per-channel bias from
/// the embedding (`emb.{k}`) and applies `h += conv(silu(h + bias))`.
#[derive(Clone, Debug, PartialEq)]
pub struct InpaintNet {
    pub config: InpaintConfig,
    pub params: ParamSet,
}

/// Sinusoidal features of `sigma`, frequencies geometric from 1 to 1000.
pub fn time_features(sigma: f64, len: usize) -> Vec<f64> {
    let half = len / 2;
    let mut out = Vec::with_capacity(len);
    for i in 0..half {
        let freq = (1000f64).powf(i as f64 / (half.max(2) - 1) as f64);
        out.push((sigma * freq).sin());
    }
    for i in 0..half {
        let freq = (1000f64).powf(i as f64 / (half.max(2) - 1) as f64);
        out.push((sigma * freq).cos());
    }
    out
}

impl InpaintNet {
    pub fn new(config: InpaintConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let mut p = ParamSet::new();
        let silu_gain = 2f64.sqrt();
        init_conv(&mut p, rng, "in", 1, config.c_s + config.c_m, w, 1.0);
        init_linear(&mut p, rng, "t1", config.time_features, w, silu_gain);
        init_linear(&mut p, rng, "cond", config.cond_len, w, 1.0);
        init_linear(&mut p, rng, "t2", w, w, silu_gain);
        for k in 0..config.blocks {
            init_linear(&mut p, rng, &format!("emb.{k}"), w, w, 1.0);
            // Residual branches start small so the stack begins near identity.
            init_conv(&mut p, rng, &format!("blk.{k}"), 3, w, w, 0.5);
        }
        init_conv(&mut p, rng, "out", 1, w, config.c_s, 0.5);
        Ok(InpaintNet { config, params: p })
    }

    pub fn from_params(config: InpaintConfig, params: ParamSet) -> Result<Self> {
        let mut probe = InpaintNet::new(config, &mut Rng::new(0))?;
        if probe.params.names() != params.names()
            || probe.params.tensors().iter().zip(params.tensors()).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Format("inpaint parameters do not match the configuration".into()));
        }
        probe.params = params;
        Ok(probe)
    }

    fn check_input(&self, x: &Tensor, cond: &Tensor) -> Result<usize> {
        let c = &self.config;
        let s = x.shape();
        if s.len() != 5 || s[1..4] != [c.r, c.r, c.r] || s[4] != c.c_s + c.c_m {
            return Err(Error::shape(
                "inpaint_forward",
                format!(
                    "input {:?}, model expects [b, {r}, {r}, {r}, {}]",
                    s,
                    c.c_s + c.c_m,
                    r = c.r
                ),
            ));
        }
        if cond.shape() != [s[0], c.cond_len] {
            return Err(Error::shape(
                "inpaint_forward",
                format!("condition {:?}, expected [{}, {}]", cond.shape(), s[0], c.cond_len),
            ));
        }
        Ok(s[0])
    }

    /// Velocity graph for a batch; `sigmas` has one entry per item.
    pub(crate) fn forward_graph(&self, g: &mut Graph, p: &Bound, x: Var, sigmas: &[f64], cond: Var) -> Result<Var> {
        let c = &self.config;
        let feats: Vec<f64> = sigmas.iter().flat_map(|&s| time_features(s, c.time_features)).collect();
        let tf = g.leaf(Tensor::new(&[sigmas.len(), c.time_features], feats)?);
        let e1 = linear(g, p, "t1", tf)?;
        let ce = linear(g, p, "cond", cond)?;
        let e1 = g.add(e1, ce)?;
        let e1 = g.silu(e1)?;
        let emb = linear(g, p, "t2", e1)?;
        let emb = g.silu(emb)?;

        let mut h = conv(g, p, "in", x, 1)?;
        for k in 0..c.blocks {
            let bias = linear(g, p, &format!("emb.{k}"), emb)?;
            let a = g.add_bias(h, bias)?;
            let a = g.silu(a)?;
            let d = conv(g, p, &format!("blk.{k}"), a, 1)?;
            h = g.add(h, d)?;
        }
        let h = g.silu(h)?;
        conv(g, p, "out", h, 1)
    }

    /// Batched velocity `[b, r, r, r, c_s]` for a common noise level.
    pub fn forward_batch(&self, x: &Tensor, sigma: f64, cond: &Tensor) -> Result<Tensor> {
        let b = self.check_input(x, cond)?;
        let mut g = Graph::new();
        let p = Bound::bind(&mut g, &self.params, false);
        let xv = g.leaf(x.clone());
        let cv = g.leaf(cond.clone());
        let out = self.forward_graph(&mut g, &p, xv, &vec![sigma; b], cv)?;
        Ok(g.value(out).clone())
    }
}

impl VelocityField for InpaintNet {
    fn latent_channels(&self) -> usize {
        self.config.c_s
    }

    fn mask_channels(&self) -> usize {
        self.config.c_m
    }

    fn cond_len(&self) -> usize {
        self.config.cond_len
    }

    fn velocity(&self, x_inp: &Tensor, sigma: f64, cond: &Tensor) -> Result<Tensor> {
        self.forward_batch(x_inp, sigma, cond)
    }
}

/// Velocity of a single unbatched input `[r, r, r, c_s + c_m]`.
pub fn inpaint_forward(net: &InpaintNet, x: &Tensor, sigma: f64, cond: &[f64]) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let xb = x.reshape(&shape)?;
    let cb = Tensor::new(&[1, cond.len()], cond.to_vec())?;
    let out = net.forward_batch(&xb, sigma, &cb)?;
    Ok(out.unstack().remove(0))
}

/// One flow-matching training example.
#[derive(Clone, Debug)]
pub struct CfmSample<'a> {
    pub q_gt: &'a Tensor,
    pub q_comb: &'a Tensor,
    /// Mask fed to the network, `[r, r, r, c_m]`.
    pub mask: &'a Tensor,
    pub cond: &'a [f64],
    pub sigma: f64,
}

/// Mean squared error between the predicted velocity at the bridge state
/// and `q_comb - q_gt`, over every element of the batch. Returns the loss
/// and gradients in parameter order.
pub fn cfm_loss_batch(net: &InpaintNet, batch: &[CfmSample]) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::Empty("cfm_loss: empty batch"));
    }
    let mut inputs = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    let mut conds = Vec::with_capacity(batch.len() * net.config.cond_len);
    for s in batch {
        let x = bridge_state(s.q_gt, s.q_comb, s.sigma)?;
        inputs.push(concat_mask(&x, s.mask)?);
        targets.push(s.q_comb.zip_map(s.q_gt, |a, b| a - b)?);
        conds.extend_from_slice(s.cond);
    }
    let x = Tensor::stack(&inputs.iter().collect::<Vec<_>>())?;
    let cond = Tensor::new(&[batch.len(), conds.len() / batch.len()], conds)?;
    net.check_input(&x, &cond)?;
    let target = Tensor::stack(&targets.iter().collect::<Vec<_>>())?;
    let sigmas: Vec<f64> = batch.iter().map(|s| s.sigma).collect();

    let mut g = Graph::new();
    let p = Bound::bind(&mut g, &net.params, true);
    let xv = g.leaf(x);
    let cv = g.leaf(cond);
    let pred = net.forward_graph(&mut g, &p, xv, &sigmas, cv)?;
    let tv = g.leaf(target);
    let loss = g.mse(pred, tv)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item(), p.vars().iter().map(|&v| grads.get(v)).collect()))
}

/// Single-example loss; `sigma` is drawn uniformly from `[0, 1]` when absent.
pub fn cfm_loss(
    net: &InpaintNet,
    q_gt: &Tensor,
    q_comb: &Tensor,
    m_s: &Tensor,
    cond: &[f64],
    sigma: Option<f64>,
    rng: &mut Rng,
) -> Result<f64> {
    let sigma = sigma.unwrap_or_else(|| rng.uniform());
    let sample = CfmSample {
        q_gt,
        q_comb,
        mask: m_s,
        cond,
        sigma,
    };
    cfm_loss_batch(net, &[sample]).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> InpaintNet {
        let cfg = InpaintConfig {
            r: 2,
            c_s: 3,
            c_m: 1,
            width: 6,
            blocks: 2,
            cond_len: 2,
            time_features: 4,
        };
        InpaintNet::new(cfg, &mut Rng::new(4)).unwrap()
    }

    fn set_output_layer(net: &mut InpaintNet, bias: &[f64]) {
        let names: Vec<String> = net.params.names().to_vec();
        for (name, t) in names.iter().zip(net.params.tensors_mut()) {
            if name == "out.w" {
                *t = Tensor::zeros(t.shape());
            } else if name == "out.b" {
                *t = Tensor::new(t.shape(), bias.to_vec()).unwrap();
            }
        }
    }

    #[test]
    fn perfect_velocity_gives_zero_loss() {
        let mut net = small();
        let offset = [0.25, -0.5, 1.5];
        set_output_layer(&mut net, &offset);
        let mut rng = Rng::new(9);
        let q_gt = rng.normal_tensor(&[2, 2, 2, 3]);
        let q_comb = Tensor::new(
            &[2, 2, 2, 3],
            q_gt.data().iter().enumerate().map(|(i, v)| v + offset[i % 3]).collect(),
        )
        .unwrap();
        let mask = Tensor::ones(&[2, 2, 2, 1]);
        for sigma in [0.0, 0.3, 1.0] {
            let loss = cfm_loss(&net, &q_gt, &q_comb, &mask, &[1.0, 0.0], Some(sigma), &mut rng).unwrap();
            assert!(loss.abs() < 1e-24, "{loss}");
        }
    }

    #[test]
    fn degenerate_bridge_loss_is_mean_square_output() {
        let net = small();
        let mut rng = Rng::new(5);
        let q = rng.normal_tensor(&[2, 2, 2, 3]);
        let mask = Tensor::ones(&[2, 2, 2, 1]);
        let cond = [0.0, 1.0];
        let loss = cfm_loss(&net, &q, &q, &mask, &cond, Some(0.4), &mut rng).unwrap();
        let v = inpaint_forward(&net, &concat_mask(&q, &mask).unwrap(), 0.4, &cond).unwrap();
        let expected = v.data().iter().map(|x| x * x).sum::<f64>() / v.numel() as f64;
        assert!((loss - expected).abs() <= 1e-12 * expected.max(1.0), "{loss} vs {expected}");
    }

    #[test]
    fn forward_shape_determinism_and_channel_sensitivity() {
        let net = small();
        let mut rng = Rng::new(6);
        let x = rng.normal_tensor(&[2, 2, 2, 4]);
        let cond = [1.0, 0.0];
        let v = inpaint_forward(&net, &x, 0.7, &cond).unwrap();
        assert_eq!(v.shape(), &[2, 2, 2, 3]);
        assert_eq!(v, inpaint_forward(&net, &x, 0.7, &cond).unwrap());

        let swapped: Vec<f64> = x
            .data()
            .chunks(4)
            .flat_map(|c| [c[3], c[0], c[1], c[2]])
            .collect();
        let swapped = Tensor::new(&[2, 2, 2, 4], swapped).unwrap();
        let w = inpaint_forward(&net, &swapped, 0.7, &cond).unwrap();
        assert!(v.max_abs_diff(&w) > 1e-6);

        assert!(inpaint_forward(&net, &Tensor::zeros(&[2, 2, 2, 3]), 0.7, &cond).is_err());
        assert!(inpaint_forward(&net, &x, 0.7, &[1.0]).is_err());
    }
}
