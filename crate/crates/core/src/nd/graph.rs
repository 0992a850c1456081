//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so [`Graph::backward`] is a single reverse sweep.

use std::collections::BTreeMap;

use super::kernels::{col2im, im2col, ConvGeom};
use super::tensor::{Real, Tensor};
use crate::error::{ensure, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

enum Op<T: Real> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Activation {
        input: Var,
        slope: T,
    },
    GlobalAvgPool {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Cosine {
        u: Var,
        r: Var,
        norm_u: T,
        norm_r: T,
    },
    GatherMean {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Hinge {
        pos: Var,
        negs: Vec<Var>,
        margin: T,
    },
    SigmoidBce {
        logit: Var,
        label: T,
    },
    SoftmaxCe {
        logits: Var,
        target: usize,
        probs: Vec<T>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }
}

/// Recorded computation over tensors of element type `T`.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(
            matches!(op, Op::Leaf) || value.is_finite(),
            "forward produced a non-finite value"
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// 2-D convolution of a `[C_in, H, W]` input with a `[C_out, C_in, kH, kW]`
    /// kernel and optional `[C_out]` bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (is, ks) = (self.shape(input), self.shape(kernel));
        ensure!(is.len() == 3, Dimension, "conv2d input must be [C,H,W], got {is:?}");
        ensure!(
            ks.len() == 4,
            Dimension,
            "conv2d kernel must be [C_out,C_in,kH,kW], got {ks:?}"
        );
        ensure!(
            is[0] == ks[1],
            Dimension,
            "conv2d input has {} channels, kernel expects {}",
            is[0],
            ks[1]
        );
        ensure!(stride >= 1, Contract, "conv2d stride must be >= 1");
        ensure!(
            ks[2] <= is[1] + 2 * padding && ks[3] <= is[2] + 2 * padding,
            Dimension,
            "kernel {}x{} larger than padded input {}x{}",
            ks[2],
            ks[3],
            is[1] + 2 * padding,
            is[2] + 2 * padding
        );
        let geom = ConvGeom::new(is[0], is[1], is[2], ks[0], ks[2], ks[3], stride, padding);
        if let Some(b) = bias {
            ensure!(
                self.shape(b) == [geom.c_out],
                Dimension,
                "conv2d bias must be [{}], got {:?}",
                geom.c_out,
                self.shape(b)
            );
        }

        let cols = im2col(self.value(input).data(), &geom);
        let spatial = geom.out_h * geom.out_w;
        let mut out = vec![T::zero(); geom.c_out * spatial];
        if let Some(b) = bias {
            for (row, &bv) in out.chunks_mut(spatial).zip(self.value(b).data()) {
                row.fill(bv);
            }
        }
        T::gemm(
            geom.c_out,
            geom.patch(),
            spatial,
            self.value(kernel).data(),
            false,
            &cols,
            false,
            &mut out,
            if bias.is_some() { T::one() } else { T::zero() },
        );
        let needs = self.needs(input) || self.needs(kernel) || bias.is_some_and(|b| self.needs(b));
        let value = Tensor::new(vec![geom.c_out, geom.out_h, geom.out_w], out)?;
        // Cached columns are only needed for the kernel gradient.
        let cols = if self.needs(kernel) { cols } else { Vec::new() };
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            needs,
        ))
    }

    /// Non-overlapping max pooling over `[C, H, W]`; trailing rows and columns
    /// that do not fill a window are dropped.
    pub fn maxpool2d(&mut self, input: Var, window: (usize, usize)) -> Result<Var> {
        let s = self.shape(input).to_vec();
        ensure!(s.len() == 3, Dimension, "maxpool2d input must be [C,H,W], got {s:?}");
        let (wh, ww) = window;
        ensure!(wh >= 1 && ww >= 1, Contract, "pool window must be positive");
        ensure!(
            wh <= s[1] && ww <= s[2],
            Dimension,
            "pool window {wh}x{ww} larger than input {}x{}",
            s[1],
            s[2]
        );
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / wh, w / ww);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            let base = ch * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * wh * w + ox * ww;
                    for dy in 0..wh {
                        let row = base + (oy * wh + dy) * w + ox * ww;
                        for idx in row..row + ww {
                            // strict comparison keeps the first maximum in scan order
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let needs = self.needs(input);
        let value = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2d { input, argmax }, needs))
    }

    /// `weight · input + bias` for `input: [n]`, `weight: [m, n]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        ensure!(xs.len() == 1, Dimension, "dense input must be a vector, got {xs:?}");
        ensure!(
            ws.len() == 2 && ws[1] == xs[0],
            Dimension,
            "dense weight {ws:?} incompatible with input {xs:?}"
        );
        let (m, n) = (ws[0], ws[1]);
        if let Some(b) = bias {
            ensure!(
                self.shape(b) == [m],
                Dimension,
                "dense bias must be [{m}], got {:?}",
                self.shape(b)
            );
        }
        let mut out = match bias {
            Some(b) => self.value(b).data().to_vec(),
            None => vec![T::zero(); m],
        };
        let (w, x) = (self.value(weight).data(), self.value(input).data());
        for (o, row) in out.iter_mut().zip(w.chunks_exact(n)) {
            let mut acc = T::zero();
            for (&a, &b) in row.iter().zip(x) {
                acc += a * b;
            }
            *o += acc;
        }
        let needs =
            self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Tensor::vector(out),
            Op::Dense {
                input,
                weight,
                bias,
            },
            needs,
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let slope = match kind {
            Activation::Relu => T::zero(),
            Activation::LeakyRelu(s) => T::of(s),
        };
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { slope * v })
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(input);
        self.push(value, Op::Activation { input, slope }, needs)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        self.activation(input, Activation::LeakyRelu(slope))
    }

    /// Mean over the spatial axes of a `[C, H, W]` tensor, giving `[C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        ensure!(s.len() == 3, Dimension, "global_avg_pool input must be [C,H,W], got {s:?}");
        let spatial = s[1] * s[2];
        let inv = T::one() / T::of(spatial as f64);
        let out = self
            .value(input)
            .data()
            .chunks_exact(spatial)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let needs = self.needs(input);
        Ok(self.push(Tensor::vector(out), Op::GlobalAvgPool { input }, needs))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().copied().sum();
        let needs = self.needs(input);
        self.push(Tensor::scalar(total), Op::Sum { input }, needs)
    }

    /// Cosine similarity `uᵀr / (|u|·|r|)` of two vectors.
    pub fn cosine(&mut self, u: Var, r: Var) -> Result<Var> {
        let (us, rs) = (self.shape(u), self.shape(r));
        ensure!(
            us.len() == 1 && us == rs,
            Dimension,
            "cosine needs equal-length vectors, got {us:?} and {rs:?}"
        );
        let (uv, rv) = (self.value(u).data(), self.value(r).data());
        let norm_u = uv.iter().map(|&v| v * v).sum::<T>().sqrt();
        let norm_r = rv.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm_u <= T::zero() || norm_r <= T::zero() {
            return Err(Error::Degenerate(
                "cosine similarity of a zero-norm vector".into(),
            ));
        }
        let dot: T = uv.iter().zip(rv).map(|(&a, &b)| a * b).sum();
        let c = (dot / (norm_u * norm_r)).max(-T::one()).min(T::one());
        let needs = self.needs(u) || self.needs(r);
        Ok(self.push(
            Tensor::scalar(c),
            Op::Cosine {
                u,
                r,
                norm_u,
                norm_r,
            },
            needs,
        ))
    }

    /// Mean of the selected rows of a `[V, d]` table; an empty selection
    /// yields the zero vector.
    pub fn gather_mean(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        ensure!(s.len() == 2, Dimension, "lookup table must be [V,d], got {s:?}");
        let (vocab, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Vocabulary(format!("row {bad} outside table of {vocab}")));
        }
        let mut out = vec![T::zero(); d];
        if !ids.is_empty() {
            let t = self.value(table).data();
            for &i in ids {
                for (o, &v) in out.iter_mut().zip(&t[i * d..(i + 1) * d]) {
                    *o += v;
                }
            }
            let inv = T::one() / T::of(ids.len() as f64);
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::vector(out),
            Op::GatherMean {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Stacks the selected rows of a `[V, d]` table into `[k, d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        ensure!(s.len() == 2, Dimension, "lookup table must be [V,d], got {s:?}");
        ensure!(!ids.is_empty(), Contract, "gather_rows needs at least one id");
        let (vocab, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Vocabulary(format!("row {bad} outside table of {vocab}")));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let needs = self.needs(table);
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Concatenates vectors (or one-element scalars) end to end.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        ensure!(!inputs.is_empty(), Contract, "concat of nothing");
        let mut out = Vec::new();
        for &v in inputs {
            let s = self.shape(v);
            ensure!(s.len() == 1, Dimension, "concat operands must be vectors, got {s:?}");
            out.extend_from_slice(self.value(v).data());
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::vector(out),
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            needs,
        ))
    }

    /// `Σᵢ max(0, margin − pos + negᵢ)` over scalar similarity nodes.
    pub fn hinge(&mut self, pos: Var, negs: &[Var], margin: f64) -> Result<Var> {
        ensure!(!negs.is_empty(), Contract, "hinge loss needs at least one negative");
        let margin = T::of(margin);
        let p = self.scalar_of(pos)?;
        let mut total = T::zero();
        for &n in negs {
            total += (margin + (self.scalar_of(n)? - p)).max(T::zero());
        }
        let needs = self.needs(pos) || negs.iter().any(|&n| self.needs(n));
        Ok(self.push(
            Tensor::scalar(total),
            Op::Hinge {
                pos,
                negs: negs.to_vec(),
                margin,
            },
            needs,
        ))
    }

    /// Binary cross-entropy of `sigmoid(logit)` against `label ∈ {0, 1}`.
    pub fn sigmoid_bce(&mut self, logit: Var, label: bool) -> Result<Var> {
        let z = self.scalar_of(logit)?;
        let y = if label { T::one() } else { T::zero() };
        // softplus(z) - y z, written to avoid overflow
        let softplus = z.max(T::zero()) + (-z.abs()).exp().ln_1p();
        let needs = self.needs(logit);
        Ok(self.push(
            Tensor::scalar(softplus - y * z),
            Op::SigmoidBce { logit, label: y },
            needs,
        ))
    }

    /// `−log softmax(logits)[target]`.
    pub fn softmax_ce(&mut self, logits: Var, target: usize) -> Result<Var> {
        let s = self.shape(logits);
        ensure!(s.len() == 1, Dimension, "logits must be a vector, got {s:?}");
        ensure!(target < s[0], Contract, "target {target} outside {} logits", s[0]);
        let z = self.value(logits).data();
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        let loss = total.ln() + max - z[target];
        let probs = exps.into_iter().map(|e| e / total).collect();
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                target,
                probs,
            },
            needs,
        ))
    }

    fn scalar_of(&self, var: Var) -> Result<T> {
        self.value(var)
            .item()
            .ok_or_else(|| Error::Dimension(format!("expected a scalar, got {:?}", self.shape(var))))
    }

    /// Gradients of the scalar `loss` with respect to every leaf that
    /// requires a gradient. Each call starts from zero.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        ensure!(
            self.value(loss).numel() == 1,
            Contract,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        let mut out = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let shape = node.value.shape().to_vec();
                let data = grads[idx]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                out.insert(Var(idx), Tensor::new(shape, data)?);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |var: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[var.0].needs_grad {
                return;
            }
            let slot = grads[var.0]
                .get_or_insert_with(|| vec![T::zero(); self.nodes[var.0].value.numel()]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let spatial = geom.out_h * geom.out_w;
                if let Some(b) = bias {
                    acc(*b, &mut |db| {
                        for (d, row) in db.iter_mut().zip(g.chunks_exact(spatial)) {
                            *d += row.iter().copied().sum::<T>();
                        }
                    });
                }
                acc(*kernel, &mut |dk| {
                    T::gemm(geom.c_out, spatial, geom.patch(), g, false, cols, true, dk, T::one());
                });
                if self.nodes[input.0].needs_grad {
                    let mut dcols = vec![T::zero(); geom.patch() * spatial];
                    let k = self.nodes[kernel.0].value.data();
                    T::gemm(geom.patch(), geom.c_out, spatial, k, true, g, false, &mut dcols, T::zero());
                    acc(*input, &mut |dx| col2im(&dcols, geom, dx));
                }
            }
            Op::MaxPool2d { input, argmax } => acc(*input, &mut |dx| {
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
            }),
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let x = self.nodes[input.0].value.data();
                let n = x.len();
                if let Some(b) = bias {
                    acc(*b, &mut |db| {
                        for (d, &gv) in db.iter_mut().zip(g) {
                            *d += gv;
                        }
                    });
                }
                acc(*weight, &mut |dw| {
                    for (row, &gv) in dw.chunks_exact_mut(n).zip(g) {
                        for (d, &xv) in row.iter_mut().zip(x) {
                            *d += gv * xv;
                        }
                    }
                });
                let w = self.nodes[weight.0].value.data();
                acc(*input, &mut |dx| {
                    for (row, &gv) in w.chunks_exact(n).zip(g) {
                        for (d, &wv) in dx.iter_mut().zip(row) {
                            *d += gv * wv;
                        }
                    }
                });
            }
            Op::Activation { input, slope } => {
                let x = self.nodes[input.0].value.data();
                acc(*input, &mut |dx| {
                    for ((d, &xv), &gv) in dx.iter_mut().zip(x).zip(g) {
                        *d += if xv > T::zero() { gv } else { *slope * gv };
                    }
                });
            }
            Op::GlobalAvgPool { input } => {
                let s = self.nodes[input.0].value.shape();
                let spatial = s[1] * s[2];
                let inv = T::one() / T::of(spatial as f64);
                acc(*input, &mut |dx| {
                    for (ch, &gv) in dx.chunks_exact_mut(spatial).zip(g) {
                        ch.iter_mut().for_each(|d| *d += gv * inv);
                    }
                });
            }
            Op::Sum { input } => acc(*input, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::Cosine {
                u,
                r,
                norm_u,
                norm_r,
            } => {
                let c = node.value.data()[0];
                let (uv, rv) = (
                    self.nodes[u.0].value.data(),
                    self.nodes[r.0].value.data(),
                );
                let inv = T::one() / (*norm_u * *norm_r);
                let (cu, cr) = (c / (*norm_u * *norm_u), c / (*norm_r * *norm_r));
                acc(*u, &mut |du| {
                    for ((d, &a), &b) in du.iter_mut().zip(uv).zip(rv) {
                        *d += g[0] * (b * inv - cu * a);
                    }
                });
                acc(*r, &mut |dr| {
                    for ((d, &a), &b) in dr.iter_mut().zip(uv).zip(rv) {
                        *d += g[0] * (a * inv - cr * b);
                    }
                });
            }
            Op::GatherMean { table, ids } => {
                if ids.is_empty() {
                    return;
                }
                let d = g.len();
                let inv = T::one() / T::of(ids.len() as f64);
                acc(*table, &mut |dt| {
                    for &i in ids {
                        for (t, &gv) in dt[i * d..(i + 1) * d].iter_mut().zip(g) {
                            *t += gv * inv;
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let d = g.len() / ids.len();
                acc(*table, &mut |dt| {
                    for (&i, grow) in ids.iter().zip(g.chunks_exact(d)) {
                        for (t, &gv) in dt[i * d..(i + 1) * d].iter_mut().zip(grow) {
                            *t += gv;
                        }
                    }
                });
            }
            Op::Concat { inputs } => {
                let mut offset = 0;
                for &v in inputs {
                    let len = self.nodes[v.0].value.numel();
                    let part = &g[offset..offset + len];
                    acc(v, &mut |dv| {
                        for (d, &gv) in dv.iter_mut().zip(part) {
                            *d += gv;
                        }
                    });
                    offset += len;
                }
            }
            Op::Hinge { pos, negs, margin } => {
                let p = self.nodes[pos.0].value.data()[0];
                for &n in negs {
                    let nv = self.nodes[n.0].value.data()[0];
                    if *margin + (nv - p) > T::zero() {
                        acc(*pos, &mut |d| d[0] -= g[0]);
                        acc(n, &mut |d| d[0] += g[0]);
                    }
                }
            }
            Op::SigmoidBce { logit, label } => {
                let z = self.nodes[logit.0].value.data()[0];
                let sigma = T::one() / (T::one() + (-z).exp());
                acc(*logit, &mut |d| d[0] += g[0] * (sigma - *label));
            }
            Op::SoftmaxCe {
                logits,
                target,
                probs,
            } => acc(*logits, &mut |d| {
                for (i, (dv, &p)) in d.iter_mut().zip(probs).enumerate() {
                    let onehot = if i == *target { T::one() } else { T::zero() };
                    *dv += g[0] * (p - onehot);
                }
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_convolution() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1, 3, 3], 1.0));
        let k = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), [1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn full_window_convolution_sums() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), [1, 1, 1]);
        assert_eq!(g.value(y).data(), [10.0]);
    }

    #[test]
    fn conv_output_shape_formula() {
        for &(h, w, kh, kw, stride, pad) in &[
            (7, 9, 3, 3, 1, 1),
            (7, 9, 3, 2, 2, 0),
            (5, 5, 5, 5, 1, 0),
            (8, 6, 3, 3, 3, 2),
        ] {
            let mut g = Graph::<f32>::new();
            let x = g.constant(Tensor::zeros(&[2, h, w]));
            let k = g.constant(Tensor::zeros(&[3, 2, kh, kw]));
            let y = g.conv2d(x, k, None, stride, pad).unwrap();
            let oh = (h + 2 * pad - kh) / stride + 1;
            let ow = (w + 2 * pad - kw) / stride + 1;
            assert_eq!(g.shape(y), [3, oh, ow]);
        }
    }

    #[test]
    fn conv_channel_mismatch_is_dimension_error() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[2, 4, 4]));
        let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(g.conv2d(x, k, None, 1, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn maxpool_values_and_truncation() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.maxpool2d(x, (2, 2)).unwrap();
        assert_eq!(g.value(y).data(), [4.0]);

        let c = g.constant(Tensor::full(&[1, 4, 4], 7.0));
        let y = g.maxpool2d(c, (2, 2)).unwrap();
        assert_eq!(g.shape(y), [1, 2, 2]);
        assert!(g.value(y).data().iter().all(|&v| v == 7.0));

        let odd = g.constant(Tensor::zeros(&[2, 5, 7]));
        let y = g.maxpool2d(odd, (2, 2)).unwrap();
        assert_eq!(g.shape(y), [2, 2, 3]);

        assert!(matches!(g.maxpool2d(x, (3, 1)), Err(Error::Dimension(_))));
    }

    #[test]
    fn maxpool_tie_routes_gradient_to_first_cell() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::full(&[1, 2, 2], 3.0).with_grad());
        let y = g.maxpool2d(x, (2, 2)).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dense_identity_and_bias() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        let w = g.constant(t(&[3, 3], &eye));
        let b = g.constant(Tensor::zeros(&[3]));
        let y = g.dense(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), [1.0, -2.0, 3.0]);

        let z = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::vector(vec![0.5, -1.5]));
        let y = g.dense(x, z, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), [0.5, -1.5]);

        let bad = g.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(g.dense(x, bad, None), Err(Error::Dimension(_))));
    }

    #[test]
    fn activations() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), [0.0, 0.0, 2.0]);
        let x = g.constant(Tensor::vector(vec![-10.0]));
        let y = g.leaky_relu(x, 0.01);
        assert_abs_diff_eq!(g.value(y).data()[0], -0.1, epsilon = 1e-7);
    }

    #[test]
    fn activation_gradient_at_zero_uses_negative_slope() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::vector(vec![0.0, 0.0]).with_grad());
        let y = g.leaky_relu(x, 0.25);
        let l = g.sum(y);
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), [0.25, 0.25]);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::vector(vec![0.0]).with_grad());
        let y = g.relu(x);
        let l = g.sum(y);
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), [0.0]);
    }

    #[test]
    fn cosine_values() {
        let mut g = Graph::<f64>::new();
        let e1 = g.constant(Tensor::vector(vec![1.0, 0.0, 0.0]));
        let c = g.cosine(e1, e1).unwrap();
        assert_abs_diff_eq!(g.value(c).data()[0], 1.0, epsilon = 1e-12);

        let a = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let b = g.constant(Tensor::vector(vec![0.0, 1.0]));
        let c = g.cosine(a, b).unwrap();
        assert_eq!(g.value(c).data()[0], 0.0);

        let u = g.constant(Tensor::vector(vec![1.0, 1.0]));
        let c = g.cosine(u, a).unwrap();
        assert_abs_diff_eq!(g.value(c).data()[0], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-6);
        for alpha in [0.5, 3.0] {
            let scaled = g.constant(Tensor::vector(vec![alpha, 0.0]));
            let c2 = g.cosine(scaled, u).unwrap();
            assert_abs_diff_eq!(g.value(c2).data()[0], g.value(c).data()[0], epsilon = 1e-12);
        }
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        let mut g = Graph::<f32>::new();
        let z = g.constant(Tensor::zeros(&[4]));
        let o = g.constant(Tensor::full(&[4], 1.0));
        assert!(matches!(g.cosine(z, o), Err(Error::Degenerate(_))));
        assert!(matches!(g.cosine(o, z), Err(Error::Degenerate(_))));
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::full(&[2, 3, 4], 0.3).with_grad());
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.shape(), [2, 3, 4]);
        assert!(gx.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn self_cosine_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let u = g.leaf(Tensor::vector(vec![0.3, -1.2, 2.0, 0.7]).with_grad());
        let c = g.cosine(u, u).unwrap();
        let grads = g.backward(c).unwrap();
        for &v in grads.get(u).unwrap().data() {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[3]).with_grad());
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_starts_fresh_each_call() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::full(&[3], 2.0).with_grad());
        let l = g.sum(x);
        let first = g.backward(l).unwrap().get(x).unwrap().clone();
        let second = g.backward(l).unwrap().get(x).unwrap().clone();
        assert_eq!(first, second);
    }

    #[test]
    fn unreached_parameters_get_zero_gradients() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::full(&[3], 2.0).with_grad());
        let unused = g.leaf(Tensor::full(&[2, 2], 1.0).with_grad());
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.len(), 2);
        assert_eq!(grads.get(unused).unwrap().shape(), [2, 2]);
        assert!(grads.get(unused).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_ce_uniform_is_log_k() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::full(&[5], 0.37));
        let l = g.softmax_ce(z, 0).unwrap();
        assert_abs_diff_eq!(g.value(l).data()[0], 5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn gather_mean_of_empty_is_zero() {
        let mut g = Graph::<f32>::new();
        let tbl = g.leaf(Tensor::full(&[4, 3], 1.0).with_grad());
        let m = g.gather_mean(tbl, &[]).unwrap();
        assert_eq!(g.value(m).data(), [0.0; 3]);
        assert!(matches!(g.gather_mean(tbl, &[4]), Err(Error::Vocabulary(_))));
    }
}
