use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamSet, Rng, Tensor, Var};

/// Parameters placed on a graph, looked up by name.
pub(crate) struct Bound<'a> {
    params: &'a ParamSet,
    vars: Vec<Var>,
}

impl<'a> Bound<'a> {
    pub fn bind(g: &mut Graph, params: &'a ParamSet, trainable: bool) -> Self {
        let vars = params
            .tensors()
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.leaf(t.clone()) })
            .collect();
        Bound { params, vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.params
            .names()
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Cubic conv with bias; `{prefix}.w` is `[k, k, k, ci, co]`.
pub(crate) fn conv(g: &mut Graph, p: &Bound, prefix: &str, x: Var, stride: usize) -> Result<Var> {
    let y = g.conv3d(x, p.get(&format!("{prefix}.w"))?, stride)?;
    g.add_bias(y, p.get(&format!("{prefix}.b"))?)
}

/// Dense layer on `[b, in]` rows.
pub(crate) fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, p.get(&format!("{prefix}.w"))?)?;
    g.add_bias(y, p.get(&format!("{prefix}.b"))?)
}

fn scaled_normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    rng.normal_tensor(shape).map(|v| v * std)
}

pub(crate) fn init_conv(params: &mut ParamSet, rng: &mut Rng, prefix: &str, k: usize, ci: usize, co: usize, gain: f64) {
    let fan_in = (k * k * k * ci) as f64;
    params.push(format!("{prefix}.w"), scaled_normal(rng, &[k, k, k, ci, co], gain / fan_in.sqrt()));
    params.push(format!("{prefix}.b"), Tensor::zeros(&[co]));
}

pub(crate) fn init_linear(params: &mut ParamSet, rng: &mut Rng, prefix: &str, ci: usize, co: usize, gain: f64) {
    params.push(format!("{prefix}.w"), scaled_normal(rng, &[ci, co], gain / (ci as f64).sqrt()));
    params.push(format!("{prefix}.b"), Tensor::zeros(&[co]));
}
