//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node; nodes are therefore already in topological
//! order and `backward` walks them once, in reverse. A node requires grad
//! when any of its inputs does, and only those nodes are visited.
//!
//! Shape rules (channels-last layout throughout):
//!
//! | op              | inputs                                  | output              |
//! |-----------------|-----------------------------------------|---------------------|
//! | add/sub/mul     | `s`, `s`                                | `s`                 |
//! | scale           | `s`                                     | `s`                 |
//! | matmul          | `[m,k]`, `[k,n]`                        | `[m,n]`             |
//! | conv3d          | `[b,d,h,w,ci]`, `[k,k,k,ci,co]`, stride | `[b,d/s,h/s,w/s,co]`|
//! | upsample3d      | `[b,d,h,w,c]`, factor `f`               | `[b,fd,fh,fw,c]`    |
//! | concat_channels | `[..,c1]`, `[..,c2]`, ...               | `[..,c1+c2+..]`     |
//! | add_bias        | `[..,c]` + `[c]` or `[b,..,c]` + `[b,c]`| input shape         |
//! | silu/sigmoid    | `s`                                     | `s`                 |
//! | sum/mean        | `s`                                     | `[]`                |
//! | masked_select   | `s`, mask `s`                           | `[count]`           |
//! | bce             | probs `s`, target `s`                   | `[]`                |
//!
//! The activation used project-wide is SiLU: it is smooth, which keeps the
//! finite-difference gradient checks free of kinks.

use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Conv3d { input: Var, weight: Var, stride: usize },
    Upsample { input: Var, factor: usize },
    Concat(Vec<Var>),
    AddBias(Var, Var),
    Silu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    MaskedSelect { input: Var, indices: Vec<usize> },
    Bce { probs: Var, target: Vec<f64>, eps: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`. Leaves the loss does not
    /// depend on get an all-zero gradient.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn check_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy)]
enum Layout {
    Normal,
    Transposed,
}

/// `c += op(a) * op(b)` for row-major operands, where `op(a)` is `m x k`
/// and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], la: Layout, b: &[f64], lb: Layout, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = match la {
        Layout::Normal => (k, 1),
        Layout::Transposed => (1, m),
    };
    let (rsb, csb) = match lb {
        Layout::Normal => (n, 1),
        Layout::Transposed => (1, k),
    };
    // SAFETY: the asserted lengths cover every index the strides reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one 3D convolution, shared by forward and backward.
struct ConvDims {
    b: usize,
    d: usize,
    h: usize,
    w: usize,
    ci: usize,
    co: usize,
    k: usize,
    stride: usize,
    od: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn new(x: &[usize], wt: &[usize], stride: usize) -> Result<Self> {
        if x.len() != 5 || wt.len() != 5 {
            return Err(Error::shape(
                "conv3d",
                format!("expected rank-5 input and weight, got {x:?} and {wt:?}"),
            ));
        }
        let k = wt[0];
        if k % 2 == 0 || wt[1] != k || wt[2] != k {
            return Err(Error::shape("conv3d", format!("kernel must be odd and cubic, got {wt:?}")));
        }
        if wt[3] != x[4] {
            return Err(Error::shape(
                "conv3d",
                format!("input has {} channels, weight expects {}", x[4], wt[3]),
            ));
        }
        if stride == 0 || x[1..4].iter().any(|&s| s % stride != 0) {
            return Err(Error::shape(
                "conv3d",
                format!("stride {stride} does not divide spatial dims {:?}", &x[1..4]),
            ));
        }
        Ok(ConvDims {
            b: x[0],
            d: x[1],
            h: x[2],
            w: x[3],
            ci: x[4],
            co: wt[4],
            k,
            stride,
            od: x[1] / stride,
            oh: x[2] / stride,
            ow: x[3] / stride,
        })
    }

    /// Narrow outputs skip the unrolled matrix, whose construction would
    /// dominate a matrix product with so few columns.
    fn direct(&self) -> bool {
        self.co <= 4
    }

    /// Weight `[k, k, k, ci, co]` reordered to `[k, k, k, co, ci]`, so each
    /// output channel's taps are contiguous. Tap offsets are unchanged.
    fn tap_major(&self, w: &[f64]) -> Vec<f64> {
        let (ci, co) = (self.ci, self.co);
        let mut out = vec![0.0; w.len()];
        for (tap, src) in w.chunks_exact(ci * co).enumerate() {
            let dst = &mut out[tap * ci * co..(tap + 1) * ci * co];
            for c in 0..ci {
                for o in 0..co {
                    dst[o * ci + c] = src[c * co + o];
                }
            }
        }
        out
    }

    fn tap_major_inverse(&self, wt: &[f64]) -> Vec<f64> {
        let (ci, co) = (self.ci, self.co);
        let mut out = vec![0.0; wt.len()];
        for (tap, src) in wt.chunks_exact(ci * co).enumerate() {
            let dst = &mut out[tap * ci * co..(tap + 1) * ci * co];
            for c in 0..ci {
                for o in 0..co {
                    dst[c * co + o] = src[o * ci + c];
                }
            }
        }
        out
    }

    /// Output cells of one batch item.
    fn cells(&self) -> usize {
        self.od * self.oh * self.ow
    }

    /// Length of one unrolled receptive field, `k^3 * ci`.
    fn patch(&self) -> usize {
        self.k * self.k * self.k * self.ci
    }

    /// Batch ranges small enough to keep the unrolled matrix modest while
    /// giving the matrix product enough rows.
    fn batch_chunks(&self) -> impl Iterator<Item = std::ops::Range<usize>> {
        let per = (2048 / self.cells()).max(1);
        let b = self.b;
        (0..b.div_ceil(per)).map(move |i| i * per..((i + 1) * per).min(b))
    }

    /// Unrolls the receptive fields of `batch` into a `cells x patch` matrix
    /// whose column order matches the `[k, k, k, ci, co]` weight layout.
    fn im2col(&self, x: &[f64], batch: &std::ops::Range<usize>) -> Vec<f64> {
        let patch = self.patch();
        let base = batch.start * self.cells();
        let mut cols = vec![0.0; batch.len() * self.cells() * patch];
        let tap_stride = self.ci * self.co;
        self.for_each_tap(batch.clone(), |out_off, in_off, w_off| {
            let dst = (out_off / self.co - base) * patch + (w_off / tap_stride) * self.ci;
            cols[dst..dst + self.ci].copy_from_slice(&x[in_off..in_off + self.ci]);
        });
        cols
    }

    fn col2im_add(&self, cols: &[f64], batch: &std::ops::Range<usize>, dx: &mut [f64]) {
        let patch = self.patch();
        let base = batch.start * self.cells();
        let tap_stride = self.ci * self.co;
        self.for_each_tap(batch.clone(), |out_off, in_off, w_off| {
            let src = (out_off / self.co - base) * patch + (w_off / tap_stride) * self.ci;
            axpy(&mut dx[in_off..in_off + self.ci], 1.0, &cols[src..src + self.ci]);
        });
    }

    /// Calls `f(out_offset, in_offset, weight_offset)` for every valid
    /// (output cell, kernel tap) pair; out-of-range taps are zero padding.
    fn for_each_tap(&self, batch: std::ops::Range<usize>, mut f: impl FnMut(usize, usize, usize)) {
        let p = (self.k / 2) as isize;
        let tap_stride = self.ci * self.co;
        for bi in batch {
            for z in 0..self.od {
                for y in 0..self.oh {
                    for x in 0..self.ow {
                        let out_off = (((bi * self.od + z) * self.oh + y) * self.ow + x) * self.co;
                        for kz in 0..self.k {
                            let iz = (z * self.stride + kz) as isize - p;
                            if iz < 0 || iz >= self.d as isize {
                                continue;
                            }
                            for ky in 0..self.k {
                                let iy = (y * self.stride + ky) as isize - p;
                                if iy < 0 || iy >= self.h as isize {
                                    continue;
                                }
                                for kx in 0..self.k {
                                    let ix = (x * self.stride + kx) as isize - p;
                                    if ix < 0 || ix >= self.w as isize {
                                        continue;
                                    }
                                    let in_off = (((bi * self.d + iz as usize) * self.h
                                        + iy as usize)
                                        * self.w
                                        + ix as usize)
                                        * self.ci;
                                    let w_off = ((kz * self.k + ky) * self.k + kx) * tap_stride;
                                    f(out_off, in_off, w_off);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf; it is differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, requires_grad)
    }

    /// Adds a differentiable leaf.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_grad())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor, op: Op, name: &'static str, inputs: &[Var]) -> Result<Var> {
        check_finite(&value, name)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push_checked(out, Op::Add(a, b), "add", &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push_checked(out, Op::Sub(a, b), "sub", &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push_checked(out, Op::Mul(a, b), "mul", &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push_checked(out, Op::Scale(a, s), "scale", &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                axpy(row, ad[i * k + p], &bd[p * n..(p + 1) * n]);
            }
        }
        let out = Tensor::new(&[m, n], out)?;
        self.push_checked(out, Op::MatMul(a, b), "matmul", &[a, b])
    }

    /// Same-padded 3D convolution (padding `k / 2`); `stride` must divide
    /// every spatial dimension.
    pub fn conv3d(&mut self, input: Var, weight: Var, stride: usize) -> Result<Var> {
        let dims = ConvDims::new(self.shape(input), self.shape(weight), stride)?;
        let co = dims.co;
        let mut out = vec![0.0; dims.b * dims.cells() * co];
        let (xd, wd) = (self.value(input).data(), self.value(weight).data());
        if dims.direct() {
            let (ci, wt) = (dims.ci, dims.tap_major(wd));
            dims.for_each_tap(0..dims.b, |o, i, t| {
                let x = &xd[i..i + ci];
                let taps = &wt[t..t + ci * co];
                for (j, w) in taps.chunks_exact(ci).enumerate() {
                    out[o + j] += dot(x, w);
                }
            });
        } else {
            for batch in dims.batch_chunks() {
                let cols = dims.im2col(xd, &batch);
                let rows = batch.len() * dims.cells();
                let dst = &mut out[batch.start * dims.cells() * co..batch.end * dims.cells() * co];
                gemm(rows, dims.patch(), co, &cols, Layout::Normal, wd, Layout::Normal, dst);
            }
        }
        let out = Tensor::new(&[dims.b, dims.od, dims.oh, dims.ow, co], out)?;
        self.push_checked(out, Op::Conv3d { input, weight, stride }, "conv3d", &[input, weight])
    }

    /// Nearest-neighbour spatial upsampling by an integer factor.
    pub fn upsample3d(&mut self, input: Var, factor: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 5 || factor == 0 {
            return Err(Error::shape("upsample3d", format!("input {s:?}, factor {factor}")));
        }
        let (b, d, h, w, c) = (s[0], s[1], s[2], s[3], s[4]);
        let (od, oh, ow) = (d * factor, h * factor, w * factor);
        let xd = self.value(input).data();
        let mut out = vec![0.0; b * od * oh * ow * c];
        for bi in 0..b {
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let o = (((bi * od + z) * oh + y) * ow + x) * c;
                        let i = (((bi * d + z / factor) * h + y / factor) * w + x / factor) * c;
                        out[o..o + c].copy_from_slice(&xd[i..i + c]);
                    }
                }
            }
        }
        let out = Tensor::new(&[b, od, oh, ow, c], out)?;
        self.push_checked(out, Op::Upsample { input, factor }, "upsample3d", &[input])
    }

    /// Concatenates along the last (channel) axis, in argument order.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs.first().ok_or(Error::Empty("concat_channels"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(inputs.len());
        for v in inputs {
            let s = self.shape(*v);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape(
                    "concat_channels",
                    format!("leading dims {:?} vs {lead:?}", s),
                ));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &c) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*v).data()[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(&shape, out)?;
        self.push_checked(out, Op::Concat(inputs.to_vec()), "concat_channels", inputs)
    }

    /// Adds a per-channel bias: `[c]` broadcasts over every leading axis,
    /// `[b, c]` broadcasts over the axes between batch and channel.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        let c = *xs.last().ok_or_else(|| Error::shape("add_bias", "scalar input"))?;
        let per_batch = match bs.as_slice() {
            [bc] if *bc == c => false,
            [bb, bc] if *bc == c && xs.len() >= 2 && xs[0] == *bb => true,
            _ => return Err(Error::shape("add_bias", format!("{xs:?} + {bs:?}"))),
        };
        let xd = self.value(x).data();
        let bd = self.value(bias).data();
        let rows_per_batch = if per_batch { xd.len() / c / xs[0] } else { xd.len() / c };
        let mut out = xd.to_vec();
        for (r, row) in out.chunks_mut(c).enumerate() {
            let b_off = if per_batch { (r / rows_per_batch) * c } else { 0 };
            for (o, bv) in row.iter_mut().zip(&bd[b_off..b_off + c]) {
                *o += bv;
            }
        }
        let out = Tensor::new(&xs, out)?;
        self.push_checked(out, Op::AddBias(x, bias), "add_bias", &[x, bias])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push_checked(out, Op::Silu(a), "silu", &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push_checked(out, Op::Sigmoid(a), "sigmoid", &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push_checked(Tensor::scalar(s), Op::Sum(a), "sum", &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push_checked(Tensor::scalar(s), Op::Mean(a), "mean", &[a])
    }

    /// Flat vector of the entries of `a` where `mask` is nonzero, in
    /// row-major order.
    pub fn masked_select(&mut self, a: Var, mask: &Tensor) -> Result<Var> {
        if self.shape(a) != mask.shape() {
            return Err(Error::shape(
                "masked_select",
                format!("{:?} vs mask {:?}", self.shape(a), mask.shape()),
            ));
        }
        let indices: Vec<usize> = mask
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &m)| m != 0.0)
            .map(|(i, _)| i)
            .collect();
        if indices.is_empty() {
            return Err(Error::Empty("masked_select selected nothing"));
        }
        let src = self.value(a).data();
        let out: Vec<f64> = indices.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(&[out.len()], out)?;
        self.push_checked(out, Op::MaskedSelect { input: a, indices }, "masked_select", &[a])
    }

    /// Mean binary cross-entropy of probabilities against a `{0,1}` (or
    /// soft) target. Probabilities are clamped to `[eps, 1 - eps]`; the
    /// gradient passes straight through the clamp.
    pub fn bce(&mut self, probs: Var, target: &Tensor, eps: f64) -> Result<Var> {
        if self.shape(probs) != target.shape() {
            return Err(Error::shape(
                "bce",
                format!("{:?} vs target {:?}", self.shape(probs), target.shape()),
            ));
        }
        let p = self.value(probs).data();
        let n = p.len() as f64;
        let loss: f64 = p
            .iter()
            .zip(target.data())
            .map(|(&pv, &y)| {
                let pc = pv.clamp(eps, 1.0 - eps);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / n;
        let op = Op::Bce {
            probs,
            target: target.data().to_vec(),
            eps,
        };
        self.push_checked(Tensor::scalar(loss), op, "bce", &[probs])
    }

    /// `mean((a - b)^2)`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Runs reverse-mode differentiation from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Empty("backward on empty graph"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Only leaves keep meaningful gradients for callers.
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) || !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |s| axpy(s, 1.0, g));
                self.accumulate(grads, *b, |s| axpy(s, 1.0, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |s| axpy(s, 1.0, g));
                self.accumulate(grads, *b, |s| axpy(s, -1.0, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |s| {
                    for ((sv, gv), bv) in s.iter_mut().zip(g).zip(bv) {
                        *sv += gv * bv;
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for ((sv, gv), av) in s.iter_mut().zip(g).zip(av) {
                        *sv += gv * av;
                    }
                });
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, |s| axpy(s, *k, g)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                // dA = G B^T
                self.accumulate(grads, *a, |s| {
                    for i in 0..m {
                        for p in 0..k {
                            s[i * k + p] += dot(&g[i * n..(i + 1) * n], &bd[p * n..(p + 1) * n]);
                        }
                    }
                });
                // dB = A^T G
                self.accumulate(grads, *b, |s| {
                    for i in 0..m {
                        for p in 0..k {
                            axpy(&mut s[p * n..(p + 1) * n], ad[i * k + p], &g[i * n..(i + 1) * n]);
                        }
                    }
                });
            }
            Op::Conv3d { input, weight, stride } => {
                let dims = ConvDims::new(self.shape(*input), self.shape(*weight), *stride)
                    .expect("validated in forward");
                let co = dims.co;
                let (cells, k) = (dims.cells(), dims.patch());
                let g_rows = |batch: &std::ops::Range<usize>| &g[batch.start * cells * co..batch.end * cells * co];
                if dims.direct() {
                    let ci = dims.ci;
                    let xd = self.value(*input).data();
                    let wt = dims.tap_major(self.value(*weight).data());
                    self.accumulate(grads, *input, |s| {
                        dims.for_each_tap(0..dims.b, |o, i, t| {
                            for (j, w) in wt[t..t + ci * co].chunks_exact(ci).enumerate() {
                                axpy(&mut s[i..i + ci], g[o + j], w);
                            }
                        });
                    });
                    self.accumulate(grads, *weight, |s| {
                        let mut dwt = vec![0.0; wt.len()];
                        dims.for_each_tap(0..dims.b, |o, i, t| {
                            for (j, dw) in dwt[t..t + ci * co].chunks_exact_mut(ci).enumerate() {
                                axpy(dw, g[o + j], &xd[i..i + ci]);
                            }
                        });
                        axpy(s, 1.0, &dims.tap_major_inverse(&dwt));
                    });
                    return;
                }
                self.accumulate(grads, *input, |s| {
                    for batch in dims.batch_chunks() {
                        let m = batch.len() * cells;
                        let mut dcols = vec![0.0; m * k];
                        gemm(m, co, k, g_rows(&batch), Layout::Normal, self.value(*weight).data(), Layout::Transposed, &mut dcols);
                        dims.col2im_add(&dcols, &batch, s);
                    }
                });
                self.accumulate(grads, *weight, |s| {
                    for batch in dims.batch_chunks() {
                        let m = batch.len() * cells;
                        let cols = dims.im2col(self.value(*input).data(), &batch);
                        gemm(k, m, co, &cols, Layout::Transposed, g_rows(&batch), Layout::Normal, s);
                    }
                });
            }
            Op::Upsample { input, factor } => {
                let s5 = self.shape(*input).to_vec();
                let (b, d, h, w, c) = (s5[0], s5[1], s5[2], s5[3], s5[4]);
                let f = *factor;
                let (od, oh, ow) = (d * f, h * f, w * f);
                self.accumulate(grads, *input, |s| {
                    for bi in 0..b {
                        for z in 0..od {
                            for y in 0..oh {
                                for x in 0..ow {
                                    let o = (((bi * od + z) * oh + y) * ow + x) * c;
                                    let i = (((bi * d + z / f) * h + y / f) * w + x / f) * c;
                                    axpy(&mut s[i..i + c], 1.0, &g[o..o + c]);
                                }
                            }
                        }
                    }
                });
            }
            Op::Concat(inputs) => {
                let widths: Vec<usize> = inputs.iter().map(|v| *self.shape(*v).last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (v, &c) in inputs.iter().zip(&widths) {
                    self.accumulate(grads, *v, |s| {
                        for r in 0..rows {
                            axpy(&mut s[r * c..(r + 1) * c], 1.0, &g[r * total + offset..r * total + offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, |s| axpy(s, 1.0, g));
                let bs = self.shape(*bias).to_vec();
                let c = *bs.last().unwrap();
                let per_batch = bs.len() == 2;
                let rows = g.len() / c;
                let rows_per_batch = if per_batch { rows / bs[0] } else { rows };
                self.accumulate(grads, *bias, |s| {
                    for r in 0..rows {
                        let b_off = if per_batch { (r / rows_per_batch) * c } else { 0 };
                        axpy(&mut s[b_off..b_off + c], 1.0, &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::Silu(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |s| {
                    for ((sv, gv), &x) in s.iter_mut().zip(g).zip(av) {
                        let sg = sigmoid(x);
                        *sv += gv * sg * (1.0 + x * (1.0 - sg));
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yv = node.value.data();
                self.accumulate(grads, *a, |s| {
                    for ((sv, gv), &y) in s.iter_mut().zip(g).zip(yv) {
                        *sv += gv * y * (1.0 - y);
                    }
                });
            }
            Op::Sum(a) => self.accumulate(grads, *a, |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                self.accumulate(grads, *a, |s| s.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::MaskedSelect { input, indices } => {
                self.accumulate(grads, *input, |s| {
                    for (gv, &i) in g.iter().zip(indices) {
                        s[i] += gv;
                    }
                });
            }
            Op::Bce { probs, target, eps } => {
                let p = self.value(*probs).data();
                let n = p.len() as f64;
                self.accumulate(grads, *probs, |s| {
                    for ((sv, &pv), &y) in s.iter_mut().zip(p).zip(target) {
                        let pc = pv.clamp(*eps, 1.0 - eps);
                        *sv += g[0] * (pc - y) / (pc * (1.0 - pc)) / n;
                    }
                });
            }
        }
    }
}
