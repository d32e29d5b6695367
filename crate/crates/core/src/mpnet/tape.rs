//! Minimal reverse-mode tape over the fixed op set the denoiser needs.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over
//! the node list is a valid topological order for backpropagation.
//! Activations are laid out `[N, C, H, W]`; weights of convolutions and
//! affine layers are `[C_out, fan_in]`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Second moment of SiLU under a standard normal input is `0.596^2`.
pub const MP_SILU_SCALE: f64 = 0.596;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug)]
pub enum Tau<S> {
    Fixed(S),
    /// Node holding a raw logit of shape `[1]`; `tau = sigmoid(logit)`.
    Logit(NodeId),
}

type CustomBackward<S> = Box<dyn Fn(&Tensor<S>, &[&Tensor<S>]) -> Vec<Tensor<S>>>;

enum Op<S> {
    Leaf,
    NormalizeWeight { v: NodeId, eps: S },
    Conv2d { x: NodeId, w: NodeId, kh: usize, kw: usize },
    Linear { x: NodeId, w: NodeId },
    MulScalar { x: NodeId, g: NodeId },
    /// Keeps `sigmoid(x)` for the backward pass.
    MpSilu { x: NodeId, sig: Tensor<S> },
    MpAdd { a: NodeId, b: NodeId, tau: Tau<S> },
    Modulate { y: NodeId, e: NodeId, g: NodeId },
    AvgPool2 { x: NodeId },
    Upsample2 { x: NodeId },
    ScaleShift { x: NodeId, scale: Vec<S> },
    WeightedSse { x: NodeId, target: Tensor<S>, weights: Vec<S> },
    Add { a: NodeId, b: NodeId },
    Custom { inputs: Vec<NodeId>, backward: CustomBackward<S> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn mp_add_norm(tau: f64) -> f64 {
    ((1.0 - tau).powi(2) + tau * tau).sqrt()
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf; gradients are collected for it.
    pub fn param(&mut self, value: Tensor<S>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant leaf.
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Row-wise `v / (||v|| + eps)` on a `[C_out, fan_in]` weight.
    pub fn normalize_weight(&mut self, v: NodeId, eps: S) -> NodeId {
        let value = normalize_rows(self.value(v), eps);
        self.push(value, Op::NormalizeWeight { v, eps }, &[v])
    }

    /// Same-padded stride-1 convolution with odd kernel `kh x kw`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, kh: usize, kw: usize) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        let xd = xv.dims();
        if xd.len() != 4 || wv.dims().len() != 2 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Shape {
                expected: vec![0, 0, 0, 0],
                got: xd.to_vec(),
            });
        }
        let (n, ci, h, wd) = (xd[0], xd[1], xd[2], xd[3]);
        let co = wv.dims()[0];
        let kdim = ci * kh * kw;
        if wv.dims()[1] != kdim {
            return Err(Error::Shape {
                expected: vec![co, kdim],
                got: wv.dims().to_vec(),
            });
        }
        let hw = h * wd;
        let mut out = Tensor::zeros(&[n, co, h, wd]);
        let mut col = vec![S::zero(); if kh * kw == 1 { 0 } else { kdim * hw }];
        for i in 0..n {
            let src: &[S] = if kh * kw == 1 {
                xv.item(i)
            } else {
                im2col(xv.item(i), ci, h, wd, kh, kw, &mut col);
                &col
            };
            S::gemm(
                co,
                kdim,
                hw,
                S::one(),
                wv.data(),
                kdim as isize,
                1,
                src,
                hw as isize,
                1,
                S::zero(),
                out.item_mut(i),
                hw as isize,
                1,
            );
        }
        Ok(self.push(out, Op::Conv2d { x, w, kh, kw }, &[x, w]))
    }

    /// `[N, I] x [O, I]^T -> [N, O]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, i) = (xv.dims()[0], xv.len() / xv.dims()[0]);
        let o = wv.dims()[0];
        if wv.dims()[1] != i {
            return Err(Error::Shape {
                expected: vec![o, i],
                got: wv.dims().to_vec(),
            });
        }
        let mut out = Tensor::zeros(&[n, o]);
        S::gemm(
            n,
            i,
            o,
            S::one(),
            xv.data(),
            i as isize,
            1,
            wv.data(),
            1,
            i as isize,
            S::zero(),
            out.data_mut(),
            o as isize,
            1,
        );
        Ok(self.push(out, Op::Linear { x, w }, &[x, w]))
    }

    /// Multiplies by a scalar node of shape `[1]`.
    pub fn mul_scalar(&mut self, x: NodeId, g: NodeId) -> NodeId {
        let gv = self.value(g).data()[0];
        let value = self.value(x).scale(gv);
        self.push(value, Op::MulScalar { x, g }, &[x, g])
    }

    /// `silu(x) / 0.596`.
    pub fn mp_silu(&mut self, x: NodeId) -> NodeId {
        let inv = S::lit(1.0 / MP_SILU_SCALE);
        let xv = self.value(x);
        let sig = xv.map(|v| S::one() / (S::one() + (-v).exp()));
        let value = xv.zip_map(&sig, |v, s| v * s * inv).expect("same shape");
        self.push(value, Op::MpSilu { x, sig }, &[x])
    }

    /// `((1 - tau) a + tau b) / sqrt((1 - tau)^2 + tau^2)`.
    pub fn mp_add(&mut self, a: NodeId, b: NodeId, tau: Tau<S>) -> Result<NodeId> {
        let tv = self.tau_value(tau);
        let r = mp_add_norm(tv);
        let (wa, wb) = (S::lit((1.0 - tv) / r), S::lit(tv / r));
        let value = self.value(a).zip_map(self.value(b), |p, q| wa * p + wb * q)?;
        let inputs: Vec<NodeId> = match tau {
            Tau::Fixed(_) => vec![a, b],
            Tau::Logit(l) => vec![a, b, l],
        };
        Ok(self.push(value, Op::MpAdd { a, b, tau }, &inputs))
    }

    fn tau_value(&self, tau: Tau<S>) -> f64 {
        match tau {
            Tau::Fixed(t) => t.as_f64(),
            Tau::Logit(l) => sigmoid(self.value(l).data()[0].as_f64()),
        }
    }

    /// `y * (1 + g * e)` with `y: [N, C, H, W]`, `e: [N, C]`, `g: [1]`.
    pub fn modulate(&mut self, y: NodeId, e: NodeId, g: NodeId) -> Result<NodeId> {
        let (yv, ev) = (self.value(y), self.value(e));
        let yd = yv.dims();
        if ev.dims() != [yd[0], yd[1]] {
            return Err(Error::Shape {
                expected: vec![yd[0], yd[1]],
                got: ev.dims().to_vec(),
            });
        }
        let gv = self.value(g).data()[0];
        let plane = yd[2] * yd[3];
        let mut value = yv.clone();
        for (chunk, &ec) in value.data_mut().chunks_mut(plane).zip(ev.data()) {
            let m = S::one() + gv * ec;
            chunk.iter_mut().for_each(|v| *v = *v * m);
        }
        Ok(self.push(value, Op::Modulate { y, e, g }, &[y, e, g]))
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let value = avg_pool2(self.value(x))?;
        Ok(self.push(value, Op::AvgPool2 { x }, &[x]))
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let value = upsample2(self.value(x));
        self.push(value, Op::Upsample2 { x }, &[x])
    }

    /// Per leading-axis item: `out[n] = scale[n] * x[n] + shift[n]`.
    pub fn scale_shift(&mut self, x: NodeId, scale: Vec<S>, shift: &Tensor<S>) -> Result<NodeId> {
        let xv = self.value(x);
        xv.ensure_same_shape(shift)?;
        let mut value = shift.clone();
        for (n, &s) in scale.iter().enumerate() {
            for (o, &v) in value.item_mut(n).iter_mut().zip(xv.item(n)) {
                *o += s * v;
            }
        }
        Ok(self.push(value, Op::ScaleShift { x, scale }, &[x]))
    }

    /// `(1/N) sum_n weights[n] * ||x[n] - target[n]||^2`, a `[1]` scalar.
    pub fn weighted_sse(&mut self, x: NodeId, target: Tensor<S>, weights: Vec<S>) -> Result<NodeId> {
        let xv = self.value(x);
        xv.ensure_same_shape(&target)?;
        let n = xv.dims()[0];
        let mut total = S::zero();
        for (i, &w) in weights.iter().enumerate().take(n) {
            let sse: S = xv
                .item(i)
                .iter()
                .zip(target.item(i))
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            total += w * sse;
        }
        let value = Tensor::scalar(total / S::lit(n as f64));
        Ok(self.push(value, Op::WeightedSse { x, target, weights }, &[x]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Op with a caller-supplied vector-Jacobian product. `backward` gets the
    /// output gradient and the input values and returns one gradient per input.
    pub fn custom(
        &mut self,
        inputs: Vec<NodeId>,
        value: Tensor<S>,
        backward: impl Fn(&Tensor<S>, &[&Tensor<S>]) -> Vec<Tensor<S>> + 'static,
    ) -> NodeId {
        let ids = inputs.clone();
        self.push(
            value,
            Op::Custom {
                inputs,
                backward: Box::new(backward),
            },
            &ids,
        )
    }

    /// Reverse sweep from a scalar `root`. Returns gradients indexed by node;
    /// nodes that do not require gradients get `None`.
    pub fn backward(&self, root: NodeId) -> Gradients<S> {
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).dims(), S::one()));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::NormalizeWeight { v, eps } => {
                let vv = self.value(*v);
                let k = vv.dims()[1];
                let mut dv = Tensor::zeros(vv.dims());
                for ((row, grow), drow) in vv
                    .data()
                    .chunks(k)
                    .zip(g.data().chunks(k))
                    .zip(dv.data_mut().chunks_mut(k))
                {
                    let norm = row.iter().map(|&a| a * a).sum::<S>().sqrt();
                    let denom = norm + *eps;
                    let dot: S = row.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    let proj = if norm > S::zero() {
                        dot / (norm * denom * denom)
                    } else {
                        S::zero()
                    };
                    for ((d, &a), &b) in drow.iter_mut().zip(row).zip(grow) {
                        *d = b / denom - a * proj;
                    }
                }
                accumulate(grads, *v, dv);
            }
            Op::Conv2d { x, w, kh, kw } => self.backprop_conv(*x, *w, *kh, *kw, g, grads),
            Op::Linear { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, i) = (xv.dims()[0], xv.len() / xv.dims()[0]);
                let o = wv.dims()[0];
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(xv.dims());
                    S::gemm(n, o, i, S::one(), g.data(), o as isize, 1, wv.data(), i as isize, 1, S::zero(), dx.data_mut(), i as isize, 1);
                    accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let mut dw = Tensor::zeros(wv.dims());
                    S::gemm(o, n, i, S::one(), g.data(), 1, o as isize, xv.data(), i as isize, 1, S::zero(), dw.data_mut(), i as isize, 1);
                    accumulate(grads, *w, dw);
                }
            }
            Op::MulScalar { x, g: gain } => {
                let xv = self.value(*x);
                let gv = self.value(*gain).data()[0];
                if self.wants(*x) {
                    accumulate(grads, *x, g.scale(gv));
                }
                if self.wants(*gain) {
                    let d: S = g.data().iter().zip(xv.data()).map(|(&a, &b)| a * b).sum();
                    accumulate(grads, *gain, Tensor::scalar(d));
                }
            }
            Op::MpSilu { x, sig } => {
                let inv = S::lit(1.0 / MP_SILU_SCALE);
                let xv = self.value(*x);
                let mut dx = g.clone();
                for ((d, &v), &s) in dx.data_mut().iter_mut().zip(xv.data()).zip(sig.data()) {
                    *d = *d * inv * (s + v * s * (S::one() - s));
                }
                accumulate(grads, *x, dx);
            }
            Op::MpAdd { a, b, tau } => {
                let tv = self.tau_value(*tau);
                let r = mp_add_norm(tv);
                if self.wants(*a) {
                    accumulate(grads, *a, g.scale(S::lit((1.0 - tv) / r)));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.scale(S::lit(tv / r)));
                }
                if let Tau::Logit(l) = tau {
                    if self.wants(*l) {
                        // d out / d tau = (b - a)/r - mix (2 tau - 1)/r^3
                        let (av, bv) = (self.value(*a), self.value(*b));
                        let (c1, c2) = (S::lit(1.0 / r), S::lit((2.0 * tv - 1.0) / r.powi(3)));
                        let (one_m, t) = (S::lit(1.0 - tv), S::lit(tv));
                        let dtau: S = av
                            .data()
                            .iter()
                            .zip(bv.data())
                            .zip(g.data())
                            .map(|((&p, &q), &gv)| gv * ((q - p) * c1 - (one_m * p + t * q) * c2))
                            .sum();
                        let dlogit = dtau * S::lit(tv * (1.0 - tv));
                        accumulate(grads, *l, Tensor::scalar(dlogit));
                    }
                }
            }
            Op::Modulate { y, e, g: gain } => {
                let (yv, ev) = (self.value(*y), self.value(*e));
                let gv = self.value(*gain).data()[0];
                let plane = yv.dims()[2] * yv.dims()[3];
                // per (n, c): sum over the plane of g_out * y
                let gy: Vec<S> = g
                    .data()
                    .chunks(plane)
                    .zip(yv.data().chunks(plane))
                    .map(|(gc, yc)| gc.iter().zip(yc).map(|(&a, &b)| a * b).sum())
                    .collect();
                if self.wants(*y) {
                    let mut dy = g.clone();
                    for (chunk, &ec) in dy.data_mut().chunks_mut(plane).zip(ev.data()) {
                        let m = S::one() + gv * ec;
                        chunk.iter_mut().for_each(|v| *v = *v * m);
                    }
                    accumulate(grads, *y, dy);
                }
                if self.wants(*e) {
                    let de = Tensor::from_vec(ev.dims(), gy.iter().map(|&s| s * gv).collect()).expect("dims");
                    accumulate(grads, *e, de);
                }
                if self.wants(*gain) {
                    let dg: S = gy.iter().zip(ev.data()).map(|(&s, &ec)| s * ec).sum();
                    accumulate(grads, *gain, Tensor::scalar(dg));
                }
            }
            Op::AvgPool2 { x } => {
                let xd = self.value(*x).dims().to_vec();
                accumulate(grads, *x, avg_pool2_backward(g, &xd));
            }
            Op::Upsample2 { x } => {
                let xd = self.value(*x).dims().to_vec();
                accumulate(grads, *x, upsample2_backward(g, &xd));
            }
            Op::ScaleShift { x, scale } => {
                let mut dx = g.clone();
                for (n, &s) in scale.iter().enumerate() {
                    dx.item_mut(n).iter_mut().for_each(|v| *v = *v * s);
                }
                accumulate(grads, *x, dx);
            }
            Op::WeightedSse { x, target, weights } => {
                let xv = self.value(*x);
                let n = xv.dims()[0];
                let go = g.data()[0] * S::lit(2.0 / n as f64);
                let mut dx = Tensor::zeros(xv.dims());
                for (i, &w) in weights.iter().enumerate().take(n) {
                    let c = go * w;
                    for ((d, &a), &b) in dx.item_mut(i).iter_mut().zip(xv.item(i)).zip(target.item(i)) {
                        *d = c * (a - b);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor<S>> = inputs.iter().map(|&i| self.value(i)).collect();
                for (&id, d) in inputs.iter().zip(backward(g, &vals)) {
                    if self.wants(id) {
                        accumulate(grads, id, d);
                    }
                }
            }
        }
    }

    fn backprop_conv(&self, x: NodeId, w: NodeId, kh: usize, kw: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let (xv, wv) = (self.value(x), self.value(w));
        let xd = xv.dims();
        let (n, ci, h, wd) = (xd[0], xd[1], xd[2], xd[3]);
        let co = wv.dims()[0];
        let kdim = ci * kh * kw;
        let hw = h * wd;
        let pointwise = kh * kw == 1;
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let mut dw = Tensor::zeros(wv.dims());
        let mut dx = Tensor::zeros(xd);
        let mut col = vec![S::zero(); if pointwise { 0 } else { kdim * hw }];
        let mut dcol = vec![S::zero(); if pointwise { 0 } else { kdim * hw }];
        for i in 0..n {
            let gi = g.item(i);
            if want_w {
                let src: &[S] = if pointwise {
                    xv.item(i)
                } else {
                    im2col(xv.item(i), ci, h, wd, kh, kw, &mut col);
                    &col
                };
                // dW += g_i [co, hw] * col^T [hw, kdim]
                S::gemm(co, hw, kdim, S::one(), gi, hw as isize, 1, src, 1, hw as isize, S::one(), dw.data_mut(), kdim as isize, 1);
            }
            if want_x {
                // dcol = W^T [kdim, co] * g_i [co, hw]
                if pointwise {
                    S::gemm(kdim, co, hw, S::one(), wv.data(), 1, kdim as isize, gi, hw as isize, 1, S::zero(), dx.item_mut(i), hw as isize, 1);
                } else {
                    S::gemm(kdim, co, hw, S::one(), wv.data(), 1, kdim as isize, gi, hw as isize, 1, S::zero(), &mut dcol, hw as isize, 1);
                    col2im(&dcol, ci, h, wd, kh, kw, dx.item_mut(i));
                }
            }
        }
        if want_w {
            accumulate(grads, w, dw);
        }
        if want_x {
            accumulate(grads, x, dx);
        }
    }
}

/// Gradients from one reverse sweep.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<S>> {
        self.grads[id.0].take()
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], id: NodeId, d: Tensor<S>) {
    match &mut grads[id.0] {
        Some(existing) => existing.axpy(S::one(), &d).expect("gradient shape"),
        slot @ None => *slot = Some(d),
    }
}

pub(crate) fn normalize_rows<S: Scalar>(v: &Tensor<S>, eps: S) -> Tensor<S> {
    let k = v.dims()[1];
    let mut out = v.clone();
    for row in out.data_mut().chunks_mut(k) {
        let norm = row.iter().map(|&a| a * a).sum::<S>().sqrt();
        let inv = S::one() / (norm + eps);
        row.iter_mut().for_each(|a| *a = *a * inv);
    }
    out
}

fn im2col<S: Scalar>(x: &[S], c: usize, h: usize, w: usize, kh: usize, kw: usize, col: &mut [S]) {
    let hw = h * w;
    let mut row = 0;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for di in 0..kh {
            for dj in 0..kw {
                let dst = &mut col[row * hw..(row + 1) * hw];
                let (j0, j1, off) = shifted_span(w, dj, kw);
                for i in 0..h {
                    let drow = &mut dst[i * w..(i + 1) * w];
                    match shifted_row(i, di, kh, h) {
                        None => drow.fill(S::zero()),
                        Some(si) => {
                            let srow = &plane[si * w..(si + 1) * w];
                            drow[..j0].fill(S::zero());
                            drow[j1..].fill(S::zero());
                            drow[j0..j1].copy_from_slice(&srow[(j0 as isize + off) as usize..(j1 as isize + off) as usize]);
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Source row for output row `i` under kernel offset `di`, if inside the image.
fn shifted_row(i: usize, di: usize, kh: usize, h: usize) -> Option<usize> {
    let si = i as isize + di as isize - (kh / 2) as isize;
    (si >= 0 && si < h as isize).then_some(si as usize)
}

/// Output columns `[j0, j1)` whose source column `j + off` is inside the image.
fn shifted_span(w: usize, dj: usize, kw: usize) -> (usize, usize, isize) {
    let off = dj as isize - (kw / 2) as isize;
    let j0 = (-off).max(0) as usize;
    let j1 = (w as isize - off.max(0)).max(j0 as isize) as usize;
    (j0.min(w), j1.min(w), off)
}

fn col2im<S: Scalar>(col: &[S], c: usize, h: usize, w: usize, kh: usize, kw: usize, dx: &mut [S]) {
    let hw = h * w;
    let mut row = 0;
    for ch in 0..c {
        let plane = &mut dx[ch * hw..(ch + 1) * hw];
        for di in 0..kh {
            for dj in 0..kw {
                let src = &col[row * hw..(row + 1) * hw];
                let (j0, j1, off) = shifted_span(w, dj, kw);
                for i in 0..h {
                    let Some(si) = shifted_row(i, di, kh, h) else {
                        continue;
                    };
                    let prow = &mut plane[si * w + (j0 as isize + off) as usize..si * w + (j1 as isize + off) as usize];
                    for (p, &v) in prow.iter_mut().zip(&src[i * w + j0..i * w + j1]) {
                        *p += v;
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn avg_pool2<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let d = x.dims();
    let (h, w) = (d[d.len() - 2], d[d.len() - 1]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape {
            expected: vec![h + h % 2, w + w % 2],
            got: vec![h, w],
        });
    }
    let planes = x.len() / (h * w);
    let (oh, ow) = (h / 2, w / 2);
    let mut dims = d.to_vec();
    let nd = dims.len();
    dims[nd - 2] = oh;
    dims[nd - 1] = ow;
    let mut out = Tensor::zeros(&dims);
    let quarter = S::lit(0.25);
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let a = src[2 * i * w + 2 * j] + src[2 * i * w + 2 * j + 1];
                let b = src[(2 * i + 1) * w + 2 * j] + src[(2 * i + 1) * w + 2 * j + 1];
                dst[i * ow + j] = (a + b) * quarter;
            }
        }
    }
    Ok(out)
}

fn avg_pool2_backward<S: Scalar>(g: &Tensor<S>, xdims: &[usize]) -> Tensor<S> {
    let nd = xdims.len();
    let (h, w) = (xdims[nd - 2], xdims[nd - 1]);
    let (oh, ow) = (h / 2, w / 2);
    let planes = g.len() / (oh * ow);
    let mut dx = Tensor::zeros(xdims);
    let quarter = S::lit(0.25);
    for p in 0..planes {
        let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = src[(i / 2) * ow + j / 2] * quarter;
            }
        }
    }
    dx
}

fn upsample2<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let d = x.dims();
    let nd = d.len();
    let (h, w) = (d[nd - 2], d[nd - 1]);
    let planes = x.len() / (h * w);
    let mut dims = d.to_vec();
    dims[nd - 2] = 2 * h;
    dims[nd - 1] = 2 * w;
    let mut out = Tensor::zeros(&dims);
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                dst[i * ow + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    out
}

fn upsample2_backward<S: Scalar>(g: &Tensor<S>, xdims: &[usize]) -> Tensor<S> {
    let nd = xdims.len();
    let (h, w) = (xdims[nd - 2], xdims[nd - 1]);
    let (oh, ow) = (2 * h, 2 * w);
    let planes = g.len() / (oh * ow);
    let mut dx = Tensor::zeros(xdims);
    for p in 0..planes {
        let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                dst[(i / 2) * w + j / 2] += src[i * ow + j];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop convolution, zero padded.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, kh: usize, kw: usize) -> Tensor<f64> {
        let d = x.dims();
        let (n, ci, h, wd) = (d[0], d[1], d[2], d[3]);
        let co = w.dims()[0];
        let mut out = Tensor::zeros(&[n, co, h, wd]);
        for b in 0..n {
            for o in 0..co {
                for i in 0..h {
                    for j in 0..wd {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for di in 0..kh {
                                for dj in 0..kw {
                                    let si = i as isize + di as isize - (kh / 2) as isize;
                                    let sj = j as isize + dj as isize - (kw / 2) as isize;
                                    if si < 0 || sj < 0 || si >= h as isize || sj >= wd as isize {
                                        continue;
                                    }
                                    let xi = ((b * ci + c) * h + si as usize) * wd + sj as usize;
                                    let wi = o * ci * kh * kw + (c * kh + di) * kw + dj;
                                    acc += x.data()[xi] * w.data()[wi];
                                }
                            }
                        }
                        out.data_mut()[((b * co + o) * h + i) * wd + j] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, ci, co) in [(3, 2, 4), (1, 3, 5)] {
            let x = rand_tensor(&mut rng, &[2, ci, 5, 6]);
            let w = rand_tensor(&mut rng, &[co, ci * k * k]);
            let mut tape = Tape::new();
            let (xn, wn) = (tape.constant(x.clone()), tape.constant(w.clone()));
            let y = tape.conv2d(xn, wn, k, k).unwrap();
            let want = naive_conv(&x, &w, k, k);
            for (a, b) in tape.value(y).data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Central-difference check of `sum(out * probe)` for a single-op graph.
    fn check_op(build: impl Fn(&mut Tape<f64>, &[NodeId]) -> NodeId, inputs: Vec<Tensor<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let run = |vals: &[Tensor<f64>], probe: Option<&Tensor<f64>>| {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = vals.iter().map(|v| tape.param(v.clone())).collect();
            let out = build(&mut tape, &ids);
            let probe = probe.cloned().unwrap_or_else(|| Tensor::zeros(tape.value(out).dims()));
            let p = tape.constant(probe.clone());
            let loss = tape.custom(
                vec![out, p],
                Tensor::scalar(tape.value(out).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()),
                |g, v| vec![v[1].scale(g.data()[0]), v[0].scale(g.data()[0])],
            );
            let value = tape.value(loss).data()[0];
            let mut grads = tape.backward(loss);
            let gs: Vec<Tensor<f64>> = ids.iter().map(|&i| grads.take(i).unwrap()).collect();
            (value, gs, tape.value(out).dims().to_vec())
        };
        let (_, _, odims) = run(&inputs, None);
        let probe = rand_tensor(&mut rng, &odims);
        let (_, analytic, _) = run(&inputs, Some(&probe));
        let h = 1e-6;
        for (k, inp) in inputs.iter().enumerate() {
            for idx in 0..inp.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[idx] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[idx] -= h;
                let fd = (run(&plus, Some(&probe)).0 - run(&minus, Some(&probe)).0) / (2.0 * h);
                let a = analytic[k].data()[idx];
                assert!((fd - a).abs() <= 1e-6 * (1.0 + a.abs()), "input {k} coord {idx}: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check_op(|t, i| t.conv2d(i[0], i[1], 3, 3).unwrap(), vec![rand_tensor(&mut rng, &[2, 2, 4, 4]), rand_tensor(&mut rng, &[3, 18])]);
        check_op(|t, i| t.conv2d(i[0], i[1], 1, 1).unwrap(), vec![rand_tensor(&mut rng, &[2, 2, 2, 4]), rand_tensor(&mut rng, &[3, 2])]);
        check_op(|t, i| t.linear(i[0], i[1]).unwrap(), vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[5, 4])]);
        check_op(|t, i| t.normalize_weight(i[0], 1e-4), vec![rand_tensor(&mut rng, &[3, 4])]);
        check_op(|t, i| t.mul_scalar(i[0], i[1]), vec![rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[1])]);
        check_op(|t, i| t.mp_silu(i[0]), vec![rand_tensor(&mut rng, &[2, 5]).scale(3.0)]);
        check_op(
            |t, i| t.mp_add(i[0], i[1], Tau::Logit(i[2])).unwrap(),
            vec![rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[1])],
        );
        check_op(|t, i| t.mp_add(i[0], i[1], Tau::Fixed(0.3)).unwrap(), vec![rand_tensor(&mut rng, &[4]), rand_tensor(&mut rng, &[4])]);
        check_op(
            |t, i| t.modulate(i[0], i[1], i[2]).unwrap(),
            vec![rand_tensor(&mut rng, &[2, 3, 2, 2]), rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[1])],
        );
        check_op(|t, i| t.avg_pool2(i[0]).unwrap(), vec![rand_tensor(&mut rng, &[1, 2, 4, 6])]);
        check_op(|t, i| t.upsample2(i[0]), vec![rand_tensor(&mut rng, &[1, 2, 2, 3])]);
        let shift = rand_tensor(&mut rng, &[2, 3]);
        check_op(move |t, i| t.scale_shift(i[0], vec![0.5, -2.0], &shift).unwrap(), vec![rand_tensor(&mut rng, &[2, 3])]);
        let target = rand_tensor(&mut rng, &[2, 3]);
        check_op(move |t, i| t.weighted_sse(i[0], target.clone(), vec![1.5, 0.25]).unwrap(), vec![rand_tensor(&mut rng, &[2, 3])]);
        check_op(|t, i| t.add(i[0], i[1]).unwrap(), vec![rand_tensor(&mut rng, &[3]), rand_tensor(&mut rng, &[3])]);
    }

    #[test]
    fn constant_inputs_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let w = tape.param(Tensor::full(&[1, 9], 0.1));
        let y = tape.conv2d(x, w, 3, 3).unwrap();
        let l = tape.weighted_sse(y, Tensor::zeros(&[1, 1, 2, 2]), vec![1.0]).unwrap();
        let g = tape.backward(l);
        assert!(g.get(x).is_none());
        assert!(g.get(w).is_some());
    }

    #[test]
    fn pooling_rejects_odd_extent() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(tape.avg_pool2(x).is_err());
    }
}
