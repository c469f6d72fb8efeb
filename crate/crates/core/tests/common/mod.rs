//! Reference implementations and a finite-difference harness shared by the
//! integration tests. Everything here is written as plain loops so that it
//! does not share code paths with the library.
#![allow(dead_code)]

use axunet::nn::{Ctx, ParamSpec, ParamStore};
use axunet::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

pub fn rand_binary(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| f64::from(rng.random_bool(0.4)))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    rel_err_above(a, b, 0.0)
}

/// As [`rel_err`], but vectors whose norms both fall at or below `floor`
/// count as equal.
pub fn rel_err_above(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale <= floor {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Round-off level of a central difference of `f` with step `h`, summed
/// over `n` components.
fn fd_noise(f: f64, h: f64, n: usize) -> f64 {
    64.0 * f64::EPSILON * f.abs().max(1.0) / h * (n as f64).sqrt()
}

/// Builds `Σ r ⊙ f(inputs)` with a fixed random `r` so every output element
/// contributes to the checked scalar.
fn projected(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    if shape.iter().product::<usize>() == 1 {
        return Ok(y);
    }
    let mut r = rng(seed ^ 0x5eed);
    let w = g.constant(Tensor::from_fn(shape, |_| r.random_range(0.5..1.5)))?;
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

/// Worst relative error between reverse-mode and central-difference
/// gradients over every input.
pub fn check_graph(inputs: &[Tensor<f64>], h: f64, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> f64 {
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
        let y = f(&mut g, &vars).unwrap();
        let s = projected(&mut g, y, 1).unwrap();
        g.value(s).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone()).unwrap()).collect();
    let y = f(&mut g, &vars).unwrap();
    let s = projected(&mut g, y, 1).unwrap();
    let f0 = g.value(s).item();
    g.backward(s).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).unwrap().data().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        let mut vals = inputs.to_vec();
        for j in 0..analytic.len() {
            let orig = vals[i].data()[j];
            vals[i].data_mut()[j] = orig + h;
            let up = eval(&vals);
            vals[i].data_mut()[j] = orig - h;
            let down = eval(&vals);
            vals[i].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * h);
        }
        worst = worst.max(rel_err_above(&analytic, &numeric, fd_noise(f0, h, analytic.len())));
    }
    worst
}

/// Same check for a named-parameter layer: both its input and every
/// parameter in `store` (or the first `limit` scalars of each) are perturbed.
pub fn check_layer(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    h: f64,
    limit: Option<usize>,
    f: impl Fn(&mut Ctx<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let eval = |st: &ParamStore<f64>, vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
        let mut ctx = Ctx::new(&mut g, st, false);
        let y = f(&mut ctx, &vars).unwrap();
        let s = projected(&mut g, y, 2).unwrap();
        g.value(s).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone()).unwrap()).collect();
    let mut ctx = Ctx::new(&mut g, store, true);
    let y = f(&mut ctx, &vars).unwrap();
    let (bound, _) = ctx.into_parts();
    let s = projected(&mut g, y, 2).unwrap();
    let f0 = g.value(s).item();
    g.backward(s).unwrap();
    let mut worst: f64 = 0.0;
    let cap = |n: usize| limit.map_or(n, |l| l.min(n));
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).unwrap().data().to_vec();
        let n = cap(analytic.len());
        let mut vals = inputs.to_vec();
        let mut numeric = vec![0.0; n];
        for j in 0..n {
            let orig = vals[i].data()[j];
            vals[i].data_mut()[j] = orig + h;
            let up = eval(store, &vals);
            vals[i].data_mut()[j] = orig - h;
            let down = eval(store, &vals);
            vals[i].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * h);
        }
        worst = worst.max(rel_err_above(&analytic[..n], &numeric, fd_noise(f0, h, n)));
    }
    for (name, &v) in &bound {
        let analytic = g.grad(v).unwrap().data().to_vec();
        let n = cap(analytic.len());
        let mut st = store.clone();
        let mut numeric = vec![0.0; n];
        for j in 0..n {
            let orig = store.get(name).unwrap().data()[j];
            st.get_mut(name).unwrap().data_mut()[j] = orig + h;
            let up = eval(&st, inputs);
            st.get_mut(name).unwrap().data_mut()[j] = orig - h;
            let down = eval(&st, inputs);
            st.get_mut(name).unwrap().data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * h);
        }
        worst = worst.max(rel_err_above(&analytic[..n], &numeric, fd_noise(f0, h, n)));
    }
    worst
}

/// Store for `specs` filled with uniform values in ±1 (biases included).
pub fn random_store(specs: &[ParamSpec], seed: u64) -> ParamStore<f64> {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    for spec in specs {
        s.insert(spec.name.clone(), rand_tensor(&spec.shape, &mut r));
    }
    s
}

/// Direct convolution over a zero-padded input, accumulating each output
/// in (channel, ky, kx) order and adding the bias last.
pub fn conv2d_ref<T: axunet::Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, stride: usize, pad: usize) -> Tensor<T> {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(vec![n, o, oh, ow]);
    for s in 0..n {
        for oc in 0..o {
            for r in 0..oh {
                for q in 0..ow {
                    let mut acc = T::zero();
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (r * stride + ky) as isize - pad as isize;
                                let ix = (q * stride + kx) as isize - pad as isize;
                                let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    T::zero()
                                } else {
                                    x.at(&[s, ic, iy as usize, ix as usize])
                                };
                                acc = acc + w.at(&[oc, ic, ky, kx]) * v;
                            }
                        }
                    }
                    if let Some(b) = b {
                        acc = acc + b.data()[oc];
                    }
                    out.set(&[s, oc, r, q], acc);
                }
            }
        }
    }
    out
}

/// Per-channel direct convolution with kernel `[C,1,k,k]`.
pub fn depthwise_ref(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let (kh, kw) = (w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(vec![n, c, oh, ow]);
    for s in 0..n {
        for ch in 0..c {
            for r in 0..oh {
                for q in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (r * stride + ky) as isize - pad as isize;
                            let ix = (q * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && iy < h as isize && ix < wd as isize {
                                acc += w.at(&[ch, 0, ky, kx]) * x.at(&[s, ch, iy as usize, ix as usize]);
                            }
                        }
                    }
                    out.set(&[s, ch, r, q], acc);
                }
            }
        }
    }
    out
}

/// Scatter form of transposed convolution: each input pixel stamps its
/// kernel into the output at stride spacing, then `pad` is cropped away.
pub fn conv_transpose_ref(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize, output_pad: usize) -> Tensor<f64> {
    let [n, cin, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [_, cout, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let oh = (h - 1) * stride + kh + output_pad - 2 * pad;
    let ow = (wd - 1) * stride + kw + output_pad - 2 * pad;
    let mut out = Tensor::zeros(vec![n, cout, oh, ow]);
    for s in 0..n {
        for oc in 0..cout {
            for r in 0..oh {
                for q in 0..ow {
                    out.set(&[s, oc, r, q], b.data()[oc]);
                }
            }
            for ic in 0..cin {
                for i in 0..h {
                    for j in 0..wd {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let r = (i * stride + ky) as isize - pad as isize;
                                let q = (j * stride + kx) as isize - pad as isize;
                                if r >= 0 && q >= 0 && (r as usize) < oh && (q as usize) < ow {
                                    let idx = [s, oc, r as usize, q as usize];
                                    let v = out.at(&idx) + x.at(&[s, ic, i, j]) * w.at(&[ic, oc, ky, kx]);
                                    out.set(&idx, v);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn softplus_ref(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

/// 1×1 convolution `W·x + b` at one pixel.
fn project(w: &Tensor<f64>, b: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    let (o, c) = (w.shape()[0], w.shape()[1]);
    (0..o).map(|i| (0..c).map(|j| w.data()[i * c + j] * x[j]).sum::<f64>() + b.data()[i]).collect()
}

/// Quadratic-cost PAM: the full `HW×HW` kernel matrix with softplus
/// features, each row normalised to sum to one.
pub fn pam_quadratic(x: &Tensor<f64>, store: &ParamStore<f64>, prefix: &str) -> Tensor<f64> {
    let p = |n: &str| store.get(&format!("{prefix}.{n}")).unwrap();
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let hw = h * w;
    let mut out = x.clone();
    for s in 0..n {
        let pix = |i: usize| -> Vec<f64> { (0..c).map(|ch| x.data()[(s * c + ch) * hw + i]).collect() };
        let q: Vec<Vec<f64>> = (0..hw).map(|i| project(p("query.weight"), p("query.bias"), &pix(i)).into_iter().map(softplus_ref).collect()).collect();
        let k: Vec<Vec<f64>> = (0..hw).map(|i| project(p("key.weight"), p("key.bias"), &pix(i)).into_iter().map(softplus_ref).collect()).collect();
        let v: Vec<Vec<f64>> = (0..hw).map(|i| project(p("value.weight"), p("value.bias"), &pix(i))).collect();
        let ck = v[0].len();
        for i in 0..hw {
            let sim: Vec<f64> = (0..hw).map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum()).collect();
            let z: f64 = sim.iter().sum();
            let att: Vec<f64> = (0..ck).map(|d| (0..hw).map(|j| sim[j] / z * v[j][d]).sum()).collect();
            let y = project(p("out.weight"), p("out.bias"), &att);
            for ch in 0..c {
                out.data_mut()[(s * c + ch) * hw + i] += y[ch];
            }
        }
    }
    out
}

/// Channel attention by loops: `A = softmax_j(Σ_p x_i(p)·x_j(p))`, output
/// `x + A·x`.
pub fn cam_loops(x: &Tensor<f64>) -> (Tensor<f64>, Vec<Vec<Vec<f64>>>) {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let hw = h * w;
    let mut out = x.clone();
    let mut mats = Vec::new();
    for s in 0..n {
        let at = |ch: usize, p: usize| x.data()[(s * c + ch) * hw + p];
        let mut a = vec![vec![0.0; c]; c];
        for i in 0..c {
            let e: Vec<f64> = (0..c).map(|j| (0..hw).map(|p| at(i, p) * at(j, p)).sum()).collect();
            let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = e.iter().map(|v| (v - m).exp()).sum();
            for j in 0..c {
                a[i][j] = (e[j] - m).exp() / z;
            }
        }
        for i in 0..c {
            for p in 0..hw {
                out.data_mut()[(s * c + i) * hw + p] += (0..c).map(|j| a[i][j] * at(j, p)).sum::<f64>();
            }
        }
        mats.push(a);
    }
    (out, mats)
}

pub fn sigmoid_ref(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn dice_loss_loop(logits: &[f64], target: &[f64], eps: f64) -> f64 {
    let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
    for i in 0..logits.len() {
        let p = sigmoid_ref(logits[i]);
        inter += p * target[i];
        sp += p;
        sy += target[i];
    }
    1.0 - (2.0 * inter + eps) / (sy + sp + eps)
}

pub fn bce_naive(logits: &[f64], target: &[f64]) -> f64 {
    let s: f64 = logits
        .iter()
        .zip(target)
        .map(|(&x, &y)| {
            let p = sigmoid_ref(x);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    s / logits.len() as f64
}

pub fn dice_score_loop(pred: &[u8], truth: &[u8]) -> f64 {
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut t = 0usize;
    for i in 0..pred.len() {
        if pred[i] == 1 && truth[i] == 1 {
            inter += 1;
        }
        if pred[i] == 1 {
            p += 1;
        }
        if truth[i] == 1 {
            t += 1;
        }
    }
    if p + t == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + t) as f64
    }
}

/// Slices of a label volume `[H,W,D]` (D fastest) whose nonzero fraction
/// reaches `threshold`.
pub fn recount_slices(labels: &[u8], h: usize, w: usize, d: usize, threshold: f64) -> Vec<usize> {
    let mut kept = Vec::new();
    for k in 0..d {
        let mut n = 0usize;
        for r in 0..h {
            for c in 0..w {
                if labels[r * w * d + c * d + k] != 0 {
                    n += 1;
                }
            }
        }
        if n as f64 / (h * w) as f64 >= threshold {
            kept.push(k);
        }
    }
    kept
}
