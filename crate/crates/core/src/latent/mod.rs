//! Latent pipeline: occupancy autoencoder, mixed-latent algebra, the
//! mask-aware inpainting network and its flow-matching loss.
//!
//! Latents are channels-last tensors of shape `[r, r, r, c]`; batched
//! forms add a leading axis. Masks have `c_m` identical binary channels.

mod inpaint;
mod layers;
mod model_file;
mod vae;

pub use inpaint::{cfm_loss, cfm_loss_batch, inpaint_forward, time_features, CfmSample, InpaintConfig, InpaintNet};
pub use model_file::{config_hash, params_digest, ModelFile};
pub use vae::{decode_ss, encode_ss, vae_loss, vae_loss_batch, Vae, VaeConfig};

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::voxel::OccupancyGrid;

/// Velocity model used by the sampler.
///
/// `x_inp` is a batch `[b, r, r, r, c_s + c_m]`, `cond` is `[b, cond_len]`;
/// the result is `[b, r, r, r, c_s]`.
pub trait VelocityField {
    fn latent_channels(&self) -> usize;
    fn mask_channels(&self) -> usize;
    fn cond_len(&self) -> usize;
    fn velocity(&self, x_inp: &Tensor, sigma: f64, cond: &Tensor) -> Result<Tensor>;
}

/// Occupancy as a `[n, n, n, 1]` tensor of zeros and ones.
pub fn grid_to_tensor(grid: &OccupancyGrid) -> Tensor {
    let n = grid.n();
    let data = (0..grid.len()).map(|i| grid.get_index(i) as u8 as f64).collect();
    Tensor::new(&[n, n, n, 1], data).expect("grid shape")
}

/// Latent-resolution mask tensor `[r, r, r, c_m]`.
pub fn mask_tensor(mask: &OccupancyGrid, c_m: usize) -> Tensor {
    let r = mask.n();
    let mut data = Vec::with_capacity(mask.len() * c_m);
    for i in 0..mask.len() {
        let v = mask.get_index(i) as u8 as f64;
        data.extend(std::iter::repeat_n(v, c_m));
    }
    Tensor::new(&[r, r, r, c_m], data).expect("mask shape")
}

/// The all-ones mask `m_1`.
pub fn ones_mask(r: usize, c_m: usize) -> Tensor {
    Tensor::ones(&[r, r, r, c_m])
}

fn spatial(t: &Tensor) -> &[usize] {
    &t.shape()[..t.rank().saturating_sub(1)]
}

fn channels(t: &Tensor) -> usize {
    *t.shape().last().unwrap_or(&1)
}

/// Per-cell mask values (channel 0), checking every channel is binary and
/// that the channels of a cell agree.
fn mask_cells(m: &Tensor) -> Result<Vec<bool>> {
    let cm = channels(m);
    m.data()
        .chunks(cm)
        .map(|cell| {
            let v = cell[0];
            if (v != 0.0 && v != 1.0) || cell.iter().any(|&c| c != v) {
                Err(Error::invalid(format!("mask entries must be 0 or 1, found {cell:?}")))
            } else {
                Ok(v == 1.0)
            }
        })
        .collect()
}

/// `m * q_vis + (1 - m) * eps`, the mask broadcast over each cell's channels.
pub fn mix_latent(q_vis: &Tensor, m_s: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if q_vis.shape() != eps.shape() || spatial(q_vis) != spatial(m_s) {
        return Err(Error::shape(
            "mix_latent",
            format!("q {:?}, mask {:?}, eps {:?}", q_vis.shape(), m_s.shape(), eps.shape()),
        ));
    }
    let cells = mask_cells(m_s)?;
    let c = channels(q_vis);
    let mut out = eps.data().to_vec();
    for (i, &on) in cells.iter().enumerate() {
        if on {
            out[i * c..(i + 1) * c].copy_from_slice(&q_vis.data()[i * c..(i + 1) * c]);
        }
    }
    Tensor::new(q_vis.shape(), out)
}

/// Latent channels first, mask channels last.
pub fn concat_mask(q: &Tensor, m: &Tensor) -> Result<Tensor> {
    if spatial(q) != spatial(m) || q.rank() == 0 {
        return Err(Error::shape("concat_mask", format!("{:?} vs {:?}", q.shape(), m.shape())));
    }
    let (cq, cm) = (channels(q), channels(m));
    let mut out = Vec::with_capacity(q.numel() + m.numel());
    for (a, b) in q.data().chunks(cq).zip(m.data().chunks(cm)) {
        out.extend_from_slice(a);
        out.extend_from_slice(b);
    }
    let mut shape = spatial(q).to_vec();
    shape.push(cq + cm);
    Tensor::new(&shape, out)
}

/// `(1 - sigma) * q_gt + sigma * q_comb`.
pub fn bridge_state(q_gt: &Tensor, q_comb: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::invalid(format!("bridge sigma must lie in [0, 1], got {sigma}")));
    }
    if q_gt.shape() != q_comb.shape() {
        return Err(Error::shape("bridge_state", format!("{:?} vs {:?}", q_gt.shape(), q_comb.shape())));
    }
    q_gt.zip_map(q_comb, |a, b| (1.0 - sigma) * a + sigma * b)
}
