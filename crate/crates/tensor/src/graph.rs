//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`]s. Nodes whose inputs
//! all have `requires_grad == false` store no backward closure, so forward
//! passes over frozen weights and constant inputs cost no tape memory.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{shape_err, Result, TensorError};
use crate::float::{gemm, Float};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub struct Graph<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the leaf variables created by
/// [`Graph::param`].
pub struct Gradients<T> {
    by_node: HashMap<usize, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(&v.0)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.by_node.remove(&v.0)
    }
}

fn t_new<T: Float>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape, data).expect("kernel produced inconsistent length")
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents: Vec::new(),
            backward: None,
        });
        Var(nodes.len() - 1)
    }

    /// A differentiable leaf; its gradient is reported by [`Graph::backward`].
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, value: Tensor<T>, parents: &[Var], backward: BackwardFn<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
        });
        Var(nodes.len() - 1)
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return shape_err("backward", &[], nodes[loss.0].value.shape());
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), T::one()));
        let mut by_node = HashMap::new();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.backward {
                None => {
                    by_node.insert(id, g);
                }
                Some(bw) => {
                    let needs: Vec<bool> =
                        node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                    let outs = bw(&g, &needs);
                    for ((&p, need), out) in node.parents.iter().zip(needs).zip(outs) {
                        let Some(out) = out else { continue };
                        if !need {
                            continue;
                        }
                        match &mut grads[p] {
                            Some(acc) => acc
                                .data_mut()
                                .iter_mut()
                                .zip(out.data())
                                .for_each(|(a, &b)| *a += b),
                            slot => *slot = Some(out),
                        }
                    }
                }
            }
        }
        Ok(Gradients { by_node })
    }

    // ----- elementwise ---------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.add(&vb)?;
        Ok(self.push(out, &[a, b], Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.sub(&vb)?;
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.scale(-T::one()))]),
        ))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.zip_map(&vb, |x, y| x * y)?;
        Ok(self.push(
            out,
            &[a, b],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.zip_map(&vb, |x, y| x * y).unwrap()),
                    needs[1].then(|| g.zip_map(&va, |x, y| x * y).unwrap()),
                ]
            }),
        ))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(a).scale(s);
        self.push(out, &[a], Box::new(move |g, _| vec![Some(g.scale(s))]))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(a).map(|x| x + s);
        self.push(out, &[a], Box::new(|g, _| vec![Some(g.clone())]))
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var {
        let va = self.value(a);
        let out = va.map(f);
        let vo = Rc::new(out.clone());
        self.push(
            out,
            &[a],
            Box::new(move |g, _| {
                let data = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .zip(vo.data())
                    .map(|((&gi, &x), &y)| gi * df(x, y))
                    .collect();
                vec![Some(t_new(g.shape(), data))]
            }),
        )
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x / (T::one() + (-x).exp()),
            |x, _| {
                let s = T::one() / (T::one() + (-x).exp());
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), |_, y| y * (T::one() - y))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), |_, y| y)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        self.unary(
            a,
            move |x| x.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| T::of(2.0) * x)
    }

    // ----- reductions ----------------------------------------------------

    pub fn sum(&self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let out = Tensor::scalar(va.sum());
        self.push(out, &[a], Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]))
    }

    pub fn mean(&self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let n = T::of(va.len() as f64);
        let out = Tensor::scalar(va.sum() / n);
        self.push(
            out,
            &[a],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item() / n))]),
        )
    }

    /// Mean squared difference of two equally shaped tensors.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// `[n, c, h, w] -> [n, c]`
    pub fn global_avg_pool(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let s = va.shape().to_vec();
        if s.len() != 4 {
            return shape_err("global_avg_pool", &[0, 0, 0, 0], &s);
        }
        let hw = s[2] * s[3];
        let inv = T::one() / T::of(hw as f64);
        let data = va.data().chunks(hw).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        let out = t_new(&s[..2], data);
        Ok(self.push(
            out,
            &[a],
            Box::new(move |g, _| {
                let mut d = Vec::with_capacity(g.len() * hw);
                for &gi in g.data() {
                    d.extend(std::iter::repeat_n(gi * inv, hw));
                }
                vec![Some(t_new(&s, d))]
            }),
        ))
    }

    /// `[n, c, h, w] -> [n, c]`; the gradient goes to the first maximal position.
    pub fn global_max_pool(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let s = va.shape().to_vec();
        if s.len() != 4 {
            return shape_err("global_max_pool", &[0, 0, 0, 0], &s);
        }
        let hw = s[2] * s[3];
        let argmax: Vec<usize> = va
            .data()
            .chunks(hw)
            .map(|c| (0..hw).fold(0, |best, i| if c[i] > c[best] { i } else { best }))
            .collect();
        let data = va.data().chunks(hw).zip(&argmax).map(|(c, &i)| c[i]).collect();
        let out = t_new(&s[..2], data);
        Ok(self.push(
            out,
            &[a],
            Box::new(move |g, _| {
                let mut d = vec![T::zero(); g.len() * hw];
                for (plane, (&gi, &i)) in g.data().iter().zip(&argmax).enumerate() {
                    d[plane * hw + i] = gi;
                }
                vec![Some(t_new(&s, d))]
            }),
        ))
    }

    /// Mean cross-entropy of `[n, k]` logits against class indices.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let s = vl.shape().to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("logits {:?} vs {} labels", s, labels.len()),
            });
        }
        let (n, k) = (s[0], s[1]);
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for i in 0..n {
            let row = &vl.data()[i * k..(i + 1) * k];
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let z: T = row.iter().map(|&x| (x - m).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - m).exp() / z;
            }
            loss += -(row[labels[i]] - m - z.ln());
        }
        let inv_n = T::one() / T::of(n as f64);
        let labels = labels.to_vec();
        Ok(self.push(
            Tensor::scalar(loss * inv_n),
            &[logits],
            Box::new(move |g, _| {
                let scale = g.item() * inv_n;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= T::one();
                }
                d.iter_mut().for_each(|v| *v *= scale);
                vec![Some(t_new(&[n, k], d))]
            }),
        ))
    }

    // ----- linear algebra ------------------------------------------------

    /// `[m, k] x [k, n]`
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", &sa, &sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, &mut out, false);
        Ok(self.push(
            t_new(&[m, n], out),
            &[a, b],
            Box::new(move |g, needs| {
                let da = needs[0].then(|| {
                    let mut d = vec![T::zero(); m * k];
                    gemm(m, n, k, g.data(), false, vb.data(), true, &mut d, false);
                    t_new(&[m, k], d)
                });
                let db = needs[1].then(|| {
                    let mut d = vec![T::zero(); k * n];
                    gemm(k, m, n, va.data(), true, g.data(), false, &mut d, false);
                    t_new(&[k, n], d)
                });
                vec![da, db]
            }),
        ))
    }

    /// `x [n, in] * w[out, in]^T + b[out]`
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (sx, sw) = (vx.shape().to_vec(), vw.shape().to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || vb.shape() != [sw[0]] {
            return shape_err("linear", &sw, &sx);
        }
        let (n, i, o) = (sx[0], sx[1], sw[0]);
        let mut out = vec![T::zero(); n * o];
        gemm(n, i, o, vx.data(), false, vw.data(), true, &mut out, false);
        for row in out.chunks_mut(o) {
            row.iter_mut().zip(vb.data()).for_each(|(v, &bb)| *v += bb);
        }
        Ok(self.push(
            t_new(&[n, o], out),
            &[x, w, b],
            Box::new(move |g, needs| {
                let dx = needs[0].then(|| {
                    let mut d = vec![T::zero(); n * i];
                    gemm(n, o, i, g.data(), false, vw.data(), false, &mut d, false);
                    t_new(&[n, i], d)
                });
                let dw = needs[1].then(|| {
                    let mut d = vec![T::zero(); o * i];
                    gemm(o, n, i, g.data(), true, vx.data(), false, &mut d, false);
                    t_new(&[o, i], d)
                });
                let db = needs[2].then(|| {
                    let mut d = vec![T::zero(); o];
                    for row in g.data().chunks(o) {
                        d.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    t_new(&[o], d)
                });
                vec![dx, dw, db]
            }),
        ))
    }

    /// 2-D convolution with square kernels; `w` is `[out, in, k, k]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (sx, sw) = (vx.shape().to_vec(), vw.shape().to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return shape_err("conv2d", &sw, &sx);
        }
        if sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[2] || stride == 0 {
            return shape_err("conv2d", &sw, &sx);
        }
        let geom = ConvGeom {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            k: sw[2],
            stride,
            pad,
        };
        let o = sw[0];
        let vb = match b {
            Some(b) => {
                let vb = self.value(b);
                if vb.shape() != [o] {
                    return shape_err("conv2d bias", &[o], vb.shape());
                }
                Some(vb)
            }
            None => None,
        };
        let data = kernels::conv2d_forward(vx.data(), &geom, vw.data(), o, vb.as_ref().map(|b| b.data()));
        let (ho, wo) = geom.out_hw();
        let out = t_new(&[geom.n, o, ho, wo], data);
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(
            out,
            &parents,
            Box::new(move |g, needs| {
                let need_b = needs.get(2).copied().unwrap_or(false);
                let gr = kernels::conv2d_backward(
                    g.data(),
                    vx.data(),
                    &geom,
                    vw.data(),
                    o,
                    needs[0],
                    needs[1],
                    need_b,
                );
                let mut outs = vec![
                    gr.x.map(|d| t_new(vx.shape(), d)),
                    gr.weight.map(|d| t_new(vw.shape(), d)),
                ];
                if needs.len() == 3 {
                    outs.push(gr.bias.map(|d| t_new(&[o], d)));
                }
                outs
            }),
        ))
    }

    /// Group normalization of `[n, c, ...]` with per-channel affine params.
    pub fn group_norm(&self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let s = vx.shape().to_vec();
        if s.len() < 2 || s[1] % groups != 0 || vg.shape() != [s[1]] || vb.shape() != [s[1]] {
            return shape_err("group_norm", &[s.get(1).copied().unwrap_or(0)], vg.shape());
        }
        let (n, c) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        let eps = T::of(1e-5);
        let (y, cache) =
            kernels::group_norm_forward(vx.data(), n, c, spatial, groups, vg.data(), vb.data(), eps);
        Ok(self.push(
            t_new(&s, y),
            &[x, gamma, beta],
            Box::new(move |g, _| {
                let (dx, dg, db) =
                    kernels::group_norm_backward(g.data(), &cache, n, c, spatial, groups, vg.data());
                vec![
                    Some(t_new(&s, dx)),
                    Some(t_new(&[c], dg)),
                    Some(t_new(&[c], db)),
                ]
            }),
        ))
    }

    // ----- layout --------------------------------------------------------

    /// `x [n, c, h, w] + b [n, c]`, broadcast over space.
    pub fn add_channel_bias(&self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        let s = vx.shape().to_vec();
        if s.len() != 4 || vb.shape() != [s[0], s[1]] {
            return shape_err("add_channel_bias", &s[..2.min(s.len())], vb.shape());
        }
        let hw = s[2] * s[3];
        let mut out = vx.as_ref().clone();
        for (chunk, &bv) in out.data_mut().chunks_mut(hw).zip(vb.data()) {
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let bshape = vb.shape().to_vec();
        Ok(self.push(
            out,
            &[x, b],
            Box::new(move |g, needs| {
                let db = needs[1].then(|| {
                    let d = g.data().chunks(hw).map(|c| c.iter().copied().sum()).collect();
                    t_new(&bshape, d)
                });
                vec![Some(g.clone()), db]
            }),
        ))
    }

    pub fn upsample_nearest2x(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape().to_vec();
        if s.len() != 4 {
            return shape_err("upsample_nearest2x", &[0, 0, 0, 0], &s);
        }
        let (h, w) = (s[2], s[3]);
        let planes = s[0] * s[1];
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            let src = &vx.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let out_shape = [s[0], s[1], 2 * h, 2 * w];
        Ok(self.push(
            t_new(&out_shape, out),
            &[x],
            Box::new(move |g, _| {
                let mut d = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    let src = &g.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut d[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                vec![Some(t_new(&s, d))]
            }),
        ))
    }

    /// Concatenates `[n, c_i, ...]` tensors along the channel axis.
    pub fn concat_channels(&self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<_> = xs.iter().map(|&v| self.value(v)).collect();
        let s0 = vals[0].shape().to_vec();
        let mut chans = Vec::with_capacity(vals.len());
        for v in &vals {
            let s = v.shape();
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return shape_err("concat_channels", &s0, s);
            }
            chans.push(s[1]);
        }
        let n = s0[0];
        let spatial: usize = s0[2..].iter().product();
        let total: usize = chans.iter().sum();
        let mut out = Vec::with_capacity(n * total * spatial);
        for b in 0..n {
            for (v, &c) in vals.iter().zip(&chans) {
                out.extend_from_slice(&v.data()[b * c * spatial..(b + 1) * c * spatial]);
            }
        }
        let mut shape = s0.clone();
        shape[1] = total;
        let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
        Ok(self.push(
            t_new(&shape, out),
            xs,
            Box::new(move |g, needs| {
                let mut grads: Vec<Vec<T>> = shapes
                    .iter()
                    .map(|s| Vec::with_capacity(s.iter().product()))
                    .collect();
                let mut off = 0;
                for _ in 0..n {
                    for (gi, &c) in grads.iter_mut().zip(&chans) {
                        gi.extend_from_slice(&g.data()[off..off + c * spatial]);
                        off += c * spatial;
                    }
                }
                grads
                    .into_iter()
                    .zip(&shapes)
                    .zip(needs)
                    .map(|((d, s), &need)| need.then(|| t_new(s, d)))
                    .collect()
            }),
        ))
    }

    /// Channels `[start, start + len)` of `[n, c, ...]`.
    pub fn narrow_channels(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape().to_vec();
        if s.len() < 2 || start + len > s[1] {
            return shape_err("narrow_channels", &[start + len], &s);
        }
        let (n, c) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        let mut out = Vec::with_capacity(n * len * spatial);
        for b in 0..n {
            out.extend_from_slice(&vx.data()[(b * c + start) * spatial..(b * c + start + len) * spatial]);
        }
        let mut shape = s.clone();
        shape[1] = len;
        Ok(self.push(
            t_new(&shape, out),
            &[x],
            Box::new(move |g, _| {
                let mut d = vec![T::zero(); n * c * spatial];
                for b in 0..n {
                    d[(b * c + start) * spatial..(b * c + start + len) * spatial]
                        .copy_from_slice(&g.data()[b * len * spatial..(b + 1) * len * spatial]);
                }
                vec![Some(t_new(&s, d))]
            }),
        ))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let old = vx.shape().to_vec();
        let out = vx.as_ref().clone().reshape(shape)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |g, _| vec![Some(g.clone().reshape(&old).unwrap())]),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(sum(w_out * f(inputs)))/d(inputs).
    fn check(build: impl Fn(&Graph<f64>, &[Var]) -> Var, inputs: Vec<Tensor<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&g, &vars);
        let probe = Tensor::<f64>::randn(&g.shape(out), &mut rng);
        let pv = g.constant(probe.clone());
        let prod = g.mul(out, pv).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();

        let eval = |ins: &[Tensor<f64>]| {
            let g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
            let out = build(&g, &vars);
            g.value(out).zip_map(&probe, |a, b| a * b).unwrap().sum()
        };
        let h = 1e-6;
        for (vi, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).expect("missing grad");
            for idx in 0..inputs[vi].len() {
                let mut plus = inputs.clone();
                plus[vi].data_mut()[idx] += h;
                let mut minus = inputs.clone();
                minus[vi].data_mut()[idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[idx];
                let err = (a - fd).abs() / (a.abs().max(fd.abs()).max(1e-3));
                assert!(err < 1e-5, "input {vi} idx {idx}: analytic {a} vs fd {fd}");
            }
        }
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn grad_conv2d_stride2() {
        check(
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap(),
            vec![rand(&[2, 3, 5, 5], 1), rand(&[4, 3, 3, 3], 2), rand(&[4], 3)],
        );
    }

    #[test]
    fn grad_conv2d_pointwise() {
        check(
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 0).unwrap(),
            vec![rand(&[2, 3, 4, 4], 4), rand(&[2, 3, 1, 1], 5), rand(&[2], 6)],
        );
    }

    #[test]
    fn grad_group_norm() {
        check(
            |g, v| g.group_norm(v[0], v[1], v[2], 2).unwrap(),
            vec![rand(&[2, 4, 3, 3], 7), rand(&[4], 8), rand(&[4], 9)],
        );
    }

    #[test]
    fn grad_linear_and_matmul() {
        check(
            |g, v| g.linear(v[0], v[1], v[2]).unwrap(),
            vec![rand(&[3, 4], 10), rand(&[5, 4], 11), rand(&[5], 12)],
        );
        check(
            |g, v| g.matmul(v[0], v[1]).unwrap(),
            vec![rand(&[3, 4], 13), rand(&[4, 2], 14)],
        );
    }

    #[test]
    fn grad_layout_ops() {
        check(
            |g, v| {
                let c = g.concat_channels(&[v[0], v[1]]).unwrap();
                let u = g.upsample_nearest2x(c).unwrap();
                let n = g.narrow_channels(u, 1, 3).unwrap();
                g.add_channel_bias(n, v[2]).unwrap()
            },
            vec![rand(&[2, 2, 2, 3], 15), rand(&[2, 3, 2, 3], 16), rand(&[2, 3], 17)],
        );
    }

    #[test]
    fn grad_pointwise_nonlinearities() {
        check(
            |g, v| {
                let a = g.silu(v[0]);
                let b = g.sigmoid(v[1]);
                let e = g.exp(v[1]);
                let m = g.mul(a, b).unwrap();
                let s = g.add(m, e).unwrap();
                let sq = g.square(s);
                g.add_scalar(g.scale(sq, 0.5), 1.0)
            },
            vec![rand(&[3, 4], 18), rand(&[3, 4], 19)],
        );
    }

    #[test]
    fn grad_cross_entropy_and_pool() {
        check(
            |g, v| {
                let p = g.global_avg_pool(v[0]).unwrap();
                let l = g.cross_entropy(p, &[1, 0, 2]).unwrap();
                g.reshape(l, &[1]).unwrap()
            },
            vec![rand(&[3, 4, 2, 2], 20)],
        );
    }

    #[test]
    fn grad_max_pool() {
        // Gaussian draws are distinct, so the argmax is stable under the stencil.
        check(|g, v| g.global_max_pool(v[0]).unwrap(), vec![rand(&[2, 3, 3, 2], 21)]);
    }

    #[test]
    fn frozen_inputs_record_no_tape() {
        let g = Graph::<f32>::new();
        let a = g.constant(Tensor::full(&[2], 1.0));
        let b = g.constant(Tensor::full(&[2], 2.0));
        let c = g.add(a, b).unwrap();
        assert!(!g.requires_grad(c));
        assert!(g.nodes.borrow()[2].backward.is_none());
    }

    #[test]
    fn repeated_parent_accumulates() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::full(&[1], 3.0));
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }
}
