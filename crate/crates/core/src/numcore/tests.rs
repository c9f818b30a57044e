use proptest::prelude::{prop, prop_assert_eq, proptest, ProptestConfig};

use super::*;
use crate::error::Error;

/// Relative error with an absolute floor so near-zero gradients are not
/// judged on noise.
pub(crate) fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    rng.normal_tensor(shape)
}

#[test]
fn matmul_identity() {
    let mut rng = Rng::new(1);
    let a = rand_tensor(&mut rng, &[3, 3]);
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 4] = 1.0;
    }
    let mut g = Graph::new();
    let i = g.leaf(Tensor::new(&[3, 3], eye).unwrap());
    let av = g.leaf(a.clone());
    let out = g.matmul(i, av).unwrap();
    assert_eq!(g.value(out).data(), a.data());
}

#[test]
fn conv_with_delta_kernel_is_identity() {
    let mut rng = Rng::new(2);
    let x = rand_tensor(&mut rng, &[1, 4, 4, 4, 1]);
    let mut k = vec![0.0; 27];
    k[13] = 1.0;
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let kv = g.leaf(Tensor::new(&[3, 3, 3, 1, 1], k).unwrap());
    let out = g.conv3d(xv, kv, 1).unwrap();
    assert_eq!(g.value(out), &x);
}

#[test]
fn conv_matches_direct_sum() {
    // Direct evaluation of one output cell with explicit zero padding.
    let mut rng = Rng::new(3);
    let x = rand_tensor(&mut rng, &[1, 4, 4, 4, 2]);
    let w = rand_tensor(&mut rng, &[3, 3, 3, 2, 3]);
    let mut g = Graph::new();
    let (xv, wv) = (g.leaf(x.clone()), g.leaf(w.clone()));
    let out = g.conv3d(xv, wv, 2).unwrap();
    assert_eq!(g.shape(out), &[1, 2, 2, 2, 3]);
    let at = |z: isize, y: isize, xx: isize, c: usize| -> f64 {
        if [z, y, xx].iter().any(|&v| !(0..4).contains(&v)) {
            0.0
        } else {
            x.data()[(((z * 4 + y) * 4 + xx) as usize) * 2 + c]
        }
    };
    for (oz, oy, ox) in [(0, 0, 0), (1, 0, 1), (1, 1, 1)] {
        for o in 0..3 {
            let mut s = 0.0;
            for kz in 0..3 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        for c in 0..2 {
                            let wi = (((kz * 3 + ky) * 3 + kx) * 2 + c) * 3 + o;
                            s += w.data()[wi]
                                * at(
                                    oz * 2 + kz as isize - 1,
                                    oy * 2 + ky as isize - 1,
                                    ox * 2 + kx as isize - 1,
                                    c,
                                );
                        }
                    }
                }
            }
            let idx = ((((oz * 2 + oy) * 2 + ox) as usize) * 3) + o;
            assert!((g.value(out).data()[idx] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_rejects_bad_stride_and_even_kernel() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[1, 5, 5, 5, 1]));
    let w = g.leaf(Tensor::zeros(&[3, 3, 3, 1, 1]));
    assert!(matches!(g.conv3d(x, w, 2), Err(Error::Shape { .. })));
    let w2 = g.leaf(Tensor::zeros(&[2, 2, 2, 1, 1]));
    assert!(g.conv3d(x, w2, 1).is_err());
    let w3 = g.leaf(Tensor::zeros(&[3, 3, 3, 2, 1]));
    assert!(g.conv3d(x, w3, 1).is_err());
}

#[test]
fn concat_channels_latent_and_mask() {
    let mut g = Graph::new();
    let q = g.leaf(Tensor::ones(&[4, 4, 4, 8]));
    let m = g.leaf(Tensor::zeros(&[4, 4, 4, 1]));
    let out = g.concat_channels(&[q, m]).unwrap();
    assert_eq!(g.shape(out), &[4, 4, 4, 9]);
    let bad = g.leaf(Tensor::zeros(&[4, 4, 3, 1]));
    assert!(g.concat_channels(&[q, bad]).is_err());
}

#[test]
fn upsample_repeats_values() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(&[1, 1, 1, 2, 1], vec![1.0, 2.0]).unwrap());
    let out = g.upsample3d(x, 2).unwrap();
    assert_eq!(g.shape(out), &[1, 2, 2, 4, 1]);
    assert_eq!(&g.value(out).data()[..4], &[1.0, 1.0, 2.0, 2.0]);
}

#[test]
fn shape_mismatch_and_non_finite_are_errors() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::ones(&[2]));
    let b = g.leaf(Tensor::ones(&[3]));
    assert!(g.add(a, b).is_err());
    let big = g.leaf(Tensor::full(&[2], 1e308));
    assert!(matches!(g.scale(big, 10.0), Err(Error::NonFinite(_))));
}

#[test]
fn scalar_quadratic_gradient() {
    let (x0, c) = (1.7, -0.4);
    let mut g = Graph::new();
    let x = g.param(Tensor::new(&[1], vec![x0]).unwrap());
    let cv = g.leaf(Tensor::new(&[1], vec![c]).unwrap());
    let loss = g.mse(x, cv).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!((grads.get(x).item() - 2.0 * (x0 - c)).abs() < 1e-15);
}

#[test]
fn disconnected_leaf_gets_zero_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::ones(&[3]));
    let y = g.param(Tensor::ones(&[2, 2]));
    let loss = g.sum(x).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(y), Tensor::zeros(&[2, 2]));
    assert_eq!(grads.get(x), Tensor::ones(&[3]));
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::new();
    let x = g.param(Tensor::ones(&[3]));
    assert!(g.backward(x).is_err());
    assert!(Graph::new().backward(x).is_err());
}

// ---------------------------------------------------------------------------
// Finite-difference oracle over random graphs.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
enum Step {
    Conv { stride: usize, co: usize },
    Upsample,
    Silu,
    Sigmoid,
    Bias,
    BatchBias,
    MulLeaf,
    AddLeaf,
    SubLeaf,
    Scale(f64),
    ConcatLeaf(usize),
}

#[derive(Clone, Debug)]
enum Head {
    Mean,
    Sum,
    MaskedMean,
    Bce,
}

/// A random recipe; leaves are drawn from `rng` at build time in a fixed
/// order so rebuilding with perturbed leaves is reproducible.
#[derive(Clone, Debug)]
struct Recipe {
    input_shape: Vec<usize>,
    steps: Vec<Step>,
    head: Head,
}

fn random_recipe(rng: &mut Rng) -> Recipe {
    let b = 1 + rng.below(2);
    let s = [2usize, 4][rng.below(2)];
    let c = 1 + rng.below(3);
    let mut shape = vec![b, s, s, s, c];
    let mut steps = Vec::new();
    for _ in 0..(2 + rng.below(4)) {
        let step = match rng.below(11) {
            0 | 1 => {
                let stride = if shape[1] % 2 == 0 && shape[1] > 2 && rng.bernoulli(0.3) { 2 } else { 1 };
                let co = 1 + rng.below(3);
                shape[1] /= stride;
                shape[2] /= stride;
                shape[3] /= stride;
                shape[4] = co;
                Step::Conv { stride, co }
            }
            2 if shape[1] <= 2 => {
                shape[1] *= 2;
                shape[2] *= 2;
                shape[3] *= 2;
                Step::Upsample
            }
            3 => Step::Silu,
            4 => Step::Sigmoid,
            5 => Step::Bias,
            6 => Step::BatchBias,
            7 => Step::MulLeaf,
            8 => Step::AddLeaf,
            9 => Step::SubLeaf,
            10 => {
                let extra = 1 + rng.below(2);
                shape[4] += extra;
                Step::ConcatLeaf(extra)
            }
            _ => Step::Scale(rng.uniform_range(-2.0, 2.0)),
        };
        steps.push(step);
    }
    let head = match rng.below(4) {
        0 => Head::Mean,
        1 => Head::Sum,
        2 => Head::MaskedMean,
        _ => Head::Bce,
    };
    Recipe {
        input_shape: vec![b, s, s, s, c],
        steps,
        head,
    }
}

/// Builds the graph; returns the loss and every differentiable leaf.
fn build(recipe: &Recipe, leaves: &[Tensor], g: &mut Graph) -> (Var, Vec<Var>) {
    let mut it = leaves.iter();
    let mut vars = Vec::new();
    let mut next = |g: &mut Graph, vars: &mut Vec<Var>| {
        let v = g.param(it.next().expect("leaf").clone());
        vars.push(v);
        v
    };
    let mut h = next(g, &mut vars);
    for step in &recipe.steps {
        h = match step {
            Step::Conv { stride, .. } => {
                let w = next(g, &mut vars);
                g.conv3d(h, w, *stride).unwrap()
            }
            Step::Upsample => g.upsample3d(h, 2).unwrap(),
            Step::Silu => g.silu(h).unwrap(),
            Step::Sigmoid => g.sigmoid(h).unwrap(),
            Step::Bias | Step::BatchBias => {
                let b = next(g, &mut vars);
                g.add_bias(h, b).unwrap()
            }
            Step::MulLeaf => {
                let o = next(g, &mut vars);
                g.mul(h, o).unwrap()
            }
            Step::AddLeaf => {
                let o = next(g, &mut vars);
                g.add(h, o).unwrap()
            }
            Step::SubLeaf => {
                let o = next(g, &mut vars);
                g.sub(o, h).unwrap()
            }
            Step::Scale(k) => g.scale(h, *k).unwrap(),
            Step::ConcatLeaf(_) => {
                let o = next(g, &mut vars);
                g.concat_channels(&[h, o]).unwrap()
            }
        };
    }
    let shape = g.shape(h).to_vec();
    let loss = match recipe.head {
        Head::Mean => g.mean(h).unwrap(),
        Head::Sum => g.sum(h).unwrap(),
        Head::MaskedMean => {
            let n: usize = shape.iter().product();
            let mask: Vec<f64> = (0..n).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
            let sel = g.masked_select(h, &Tensor::new(&shape, mask).unwrap()).unwrap();
            let sq = g.mul(sel, sel).unwrap();
            g.mean(sq).unwrap()
        }
        Head::Bce => {
            let p = g.sigmoid(h).unwrap();
            let n: usize = shape.iter().product();
            let target: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
            g.bce(p, &Tensor::new(&shape, target).unwrap(), 1e-12).unwrap()
        }
    };
    (loss, vars)
}

/// Draws the leaf tensors a recipe consumes, by dry-running shapes.
fn leaves_for(recipe: &Recipe, rng: &mut Rng) -> Vec<Tensor> {
    let mut shape = recipe.input_shape.clone();
    let mut leaves = vec![rand_tensor(rng, &shape)];
    for step in &recipe.steps {
        match step {
            Step::Conv { stride, co } => {
                leaves.push(rand_tensor(rng, &[3, 3, 3, shape[4], *co]).map(|v| v * 0.4));
                for d in &mut shape[1..4] {
                    *d /= stride;
                }
                shape[4] = *co;
            }
            Step::Upsample => {
                for d in &mut shape[1..4] {
                    *d *= 2;
                }
            }
            Step::Bias => leaves.push(rand_tensor(rng, &[shape[4]])),
            Step::BatchBias => leaves.push(rand_tensor(rng, &[shape[0], shape[4]])),
            Step::MulLeaf | Step::AddLeaf | Step::SubLeaf => leaves.push(rand_tensor(rng, &shape)),
            Step::ConcatLeaf(extra) => {
                let mut s = shape.clone();
                s[4] = *extra;
                leaves.push(rand_tensor(rng, &s));
                shape[4] += extra;
            }
            _ => {}
        }
    }
    leaves
}

fn loss_at(recipe: &Recipe, leaves: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let (loss, _) = build(recipe, leaves, &mut g);
    g.value(loss).item()
}

#[test]
fn random_graphs_match_central_differences() {
    let h = 1e-5;
    let mut rng = Rng::new(2024);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let recipe = random_recipe(&mut rng);
        let leaves = leaves_for(&recipe, &mut rng);
        let mut g = Graph::new();
        let (loss, vars) = build(&recipe, &leaves, &mut g);
        let grads = g.backward(loss).unwrap();
        for (li, var) in vars.iter().enumerate() {
            let analytic = grads.get(*var);
            // A handful of coordinates per leaf keeps the test quick.
            let n = leaves[li].numel();
            for k in 0..n.min(6) {
                let j = (k * 7919 + case) % n;
                let mut plus = leaves.clone();
                let mut minus = leaves.clone();
                let mut d = plus[li].clone().into_data();
                d[j] += h;
                plus[li] = Tensor::new(leaves[li].shape(), d).unwrap();
                let mut d = minus[li].clone().into_data();
                d[j] -= h;
                minus[li] = Tensor::new(leaves[li].shape(), d).unwrap();
                let fd = (loss_at(&recipe, &plus) - loss_at(&recipe, &minus)) / (2.0 * h);
                let e = rel_err(analytic.data()[j], fd);
                worst = worst.max(e);
                assert!(
                    e <= 1e-4,
                    "case {case} leaf {li} coord {j}: analytic {} fd {fd} ({recipe:?})",
                    analytic.data()[j]
                );
            }
        }
    }
    eprintln!("worst relative error {worst:e}");
}

#[test]
fn matmul_chain_matches_central_differences() {
    let h = 1e-5;
    let mut rng = Rng::new(77);
    let x = rand_tensor(&mut rng, &[3, 4]);
    let w1 = rand_tensor(&mut rng, &[4, 5]);
    let b1 = rand_tensor(&mut rng, &[5]);
    let w2 = rand_tensor(&mut rng, &[5, 2]);
    let f = |ts: &[Tensor]| -> (Graph, Var, Vec<Var>) {
        let mut g = Graph::new();
        let vs: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
        let a = g.matmul(vs[0], vs[1]).unwrap();
        let a = g.add_bias(a, vs[2]).unwrap();
        let a = g.silu(a).unwrap();
        let a = g.matmul(a, vs[3]).unwrap();
        let a = g.mul(a, a).unwrap();
        let l = g.mean(a).unwrap();
        (g, l, vs)
    };
    let leaves = vec![x, w1, b1, w2];
    let (g, l, vs) = f(&leaves);
    let grads = g.backward(l).unwrap();
    for (li, v) in vs.iter().enumerate() {
        for j in 0..leaves[li].numel() {
            let mut p = leaves.clone();
            let mut m = leaves.clone();
            let mut d = p[li].clone().into_data();
            d[j] += h;
            p[li] = Tensor::new(leaves[li].shape(), d).unwrap();
            let mut d = m[li].clone().into_data();
            d[j] -= h;
            m[li] = Tensor::new(leaves[li].shape(), d).unwrap();
            let (gp, lp, _) = f(&p);
            let (gm, lm, _) = f(&m);
            let fd = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * h);
            assert!(rel_err(grads.get(*v).data()[j], fd) <= 1e-4);
        }
    }
}

#[test]
fn forward_backward_and_adam_are_deterministic() {
    let run = || {
        let mut rng = Rng::new(9);
        let recipe = random_recipe(&mut rng);
        let mut leaves = leaves_for(&recipe, &mut rng);
        let mut adam = AdamState::new(AdamConfig::default(), &leaves).unwrap();
        let mut losses = Vec::new();
        for _ in 0..5 {
            let mut g = Graph::new();
            let (loss, vars) = build(&recipe, &leaves, &mut g);
            let grads = g.backward(loss).unwrap();
            let gs: Vec<Tensor> = vars.iter().map(|v| grads.get(*v)).collect();
            losses.push(g.value(loss).item().to_bits());
            adam.step(&mut leaves, &gs).unwrap();
        }
        (losses, leaves)
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_output_shape_rule(b in 1usize..3, s in prop::sample::select(vec![2usize, 4, 6, 8]),
                              ci in 1usize..4, co in 1usize..4, stride in 1usize..3) {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[b, s, s, s, ci]));
        let w = g.leaf(Tensor::zeros(&[3, 3, 3, ci, co]));
        let out = g.conv3d(x, w, stride).unwrap();
        prop_assert_eq!(g.shape(out), &[b, s / stride, s / stride, s / stride, co][..]);
    }

    #[test]
    fn elementwise_and_concat_shape_rules(d0 in 1usize..4, d1 in 1usize..4, c1 in 1usize..5, c2 in 1usize..5) {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::ones(&[d0, d1, c1]));
        let b = g.leaf(Tensor::ones(&[d0, d1, c2]));
        let cat = g.concat_channels(&[a, b]).unwrap();
        prop_assert_eq!(g.shape(cat), &[d0, d1, c1 + c2][..]);
        let s = g.silu(cat).unwrap();
        let m = g.mul(s, cat).unwrap();
        prop_assert_eq!(g.shape(m), g.shape(cat));
        let r = g.mean(m).unwrap();
        prop_assert_eq!(g.shape(r).len(), 0);
        let bias = g.leaf(Tensor::ones(&[c1 + c2]));
        let ab = g.add_bias(cat, bias).unwrap();
        prop_assert_eq!(g.shape(ab), g.shape(cat));
    }
}
