use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::params::{LayerId, LayerKind, LayerParams, Slot};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running batch-norm statistics consumed in eval mode and updated in train mode.
#[derive(Debug, Clone, Copy)]
pub struct RunningStats<'a> {
    pub mean: &'a [f64],
    pub var: &'a [f64],
    pub momentum: f64,
    pub epsilon: f64,
    /// Layer whose statistics should be updated after a train-mode pass.
    pub layer: Option<LayerId>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    WeightedBce {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
    Sum {
        x: Var,
    },
    Dot {
        x: Var,
        coef: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Forward tape. Every operator appends one node; [`Graph::backward`] walks the
/// nodes in reverse insertion order, which is a reverse topological order.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    consumed: bool,
    params: HashMap<(LayerId, Slot), Var>,
    running_updates: Vec<(LayerId, Vec<f64>, Vec<f64>)>,
}

/// Gradients of leaf nodes produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(Var, LayerId, Slot)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (LayerId, Slot, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(|&(v, id, slot)| self.get(v).map(|g| (id, slot, g)))
    }
}

fn shape_err(op: &'static str, expected: &[usize], got: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            consumed: false,
            params: HashMap::new(),
            running_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Batch-norm running statistics computed by train-mode passes on this tape.
    pub fn running_updates(&self) -> &[(LayerId, Vec<f64>, Vec<f64>)] {
        &self.running_updates
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf bound to a stored parameter; repeated calls share one node.
    pub fn param(&mut self, layer: &LayerParams, slot: Slot) -> Var {
        if let Some(&v) = self.params.get(&(layer.id, slot)) {
            return v;
        }
        let mut t = layer.tensor(slot).clone();
        t.clear_grad();
        let v = self.input(t);
        self.params.insert((layer.id, slot), v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        if stride == 0 {
            return Err(TensorError::Argument {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        let (n, c, h, wd) = self.value(x).dims4("conv2d")?;
        let (o, ci, kh, kw) = self.value(w).dims4("conv2d")?;
        if ci != c {
            return Err(shape_err("conv2d", &[o, c, kh, kw], self.value(w).shape()));
        }
        if self.value(b).shape() != [o] {
            return Err(shape_err("conv2d", &[o], self.value(b).shape()));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err("conv2d", &[n, c, kh, kw], self.value(x).shape()));
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        };
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; n * rows * ncols];
        let mut out = vec![0.0; n * o * ncols];
        {
            let xs = self.value(x).data();
            let ws = self.value(w).data();
            let bs = self.value(b).data();
            let in_stride = c * h * wd;
            for s in 0..n {
                let col = &mut cols[s * rows * ncols..(s + 1) * rows * ncols];
                kernels::im2col(&xs[s * in_stride..(s + 1) * in_stride], &geom, col);
                let dst = &mut out[s * o * ncols..(s + 1) * o * ncols];
                for (oc, row) in dst.chunks_mut(ncols).enumerate() {
                    row.fill(bs[oc]);
                }
                kernels::gemm(o, rows, ncols, ws, false, col, false, 1.0, dst);
            }
        }
        let value = Tensor::new(vec![n, o, geom.oh, geom.ow], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        ))
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: RunningStats<'_>,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("batch_norm")?;
        for v in [gamma, beta] {
            if self.value(v).shape() != [c] {
                return Err(shape_err("batch_norm", &[c], self.value(v).shape()));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(shape_err("batch_norm", &[c], &[stats.mean.len()]));
        }
        let hw = h * w;
        let m = n * hw;
        let batch_stats = self.mode == Mode::Train;
        if batch_stats && m < 2 {
            return Err(TensorError::DegenerateStatistics { count: m });
        }
        let xs = self.value(x).data();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if batch_stats {
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    mean[ch] += xs[base..base + hw].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    var[ch] += xs[base..base + hw]
                        .iter()
                        .map(|v| (v - mean[ch]).powi(2))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= m as f64);
        } else {
            mean.copy_from_slice(stats.mean);
            var.copy_from_slice(stats.var);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + stats.epsilon).sqrt()).collect();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    xhat[i] = (xs[i] - mean[ch]) * inv_std[ch];
                    out[i] = gs[ch] * xhat[i] + bs[ch];
                }
            }
        }
        if batch_stats {
            if let Some(layer) = stats.layer {
                let mom = stats.momentum;
                let unbias = m as f64 / (m as f64 - 1.0);
                let new_mean = (0..c)
                    .map(|ch| (1.0 - mom) * stats.mean[ch] + mom * mean[ch])
                    .collect();
                let new_var = (0..c)
                    .map(|ch| (1.0 - mom) * stats.var[ch] + mom * var[ch] * unbias)
                    .collect();
                self.running_updates.push((layer, new_mean, new_var));
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::from_fn(t.shape(), |i| t.data()[i].max(0.0));
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::from_fn(t.shape(), |i| kernels::sigmoid(t.data()[i]));
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("max_pool")?;
        if k == 0 || stride == 0 {
            return Err(TensorError::Argument {
                op: "max_pool",
                msg: format!("kernel {k} and stride {stride} must be positive"),
            });
        }
        if k > h || k > w {
            return Err(shape_err("max_pool", &[n, c, k, k], &[n, c, h, w]));
        }
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            // strict comparison keeps the first row-major maximum
                            if xs[idx] > xs[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xs[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("global_avg_pool")?;
        let hw = h * w;
        let xs = self.value(x).data();
        let out = (0..n * c)
            .map(|p| xs[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool { x }, rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, i) = self.value(x).dims2("linear")?;
        let (o, wi) = self.value(w).dims2("linear")?;
        if wi != i {
            return Err(shape_err("linear", &[o, i], self.value(w).shape()));
        }
        if self.value(b).shape() != [o] {
            return Err(shape_err("linear", &[o], self.value(b).shape()));
        }
        let bs = self.value(b).data();
        let mut out: Vec<f64> = (0..n * o).map(|idx| bs[idx % o]).collect();
        kernels::gemm(
            n,
            i,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            1.0,
            &mut out,
        );
        let value = Tensor::new(vec![n, o], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta.shape(), tb.shape()));
        }
        let value = Tensor::from_fn(ta.shape(), |i| ta.data()[i] + tb.data()[i]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Concatenates along axis 1; every other extent must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Argument {
            op: "concat",
            msg: "nothing to concatenate".into(),
        })?;
        let base = self.value(*first).shape().to_vec();
        if base.len() < 2 {
            return Err(shape_err("concat", &[base[0], 0], &base));
        }
        let mut width = 0;
        for p in parts {
            let s = self.value(*p).shape();
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(shape_err("concat", &base, s));
            }
            width += s[1];
        }
        let n = base[0];
        let mut out = Vec::new();
        for row in 0..n {
            for p in parts {
                let t = self.value(*p);
                let stride = t.numel() / n;
                out.extend_from_slice(&t.data()[row * stride..(row + 1) * stride]);
            }
        }
        let mut shape = base;
        shape[1] = width;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows of `sum_p w_p * BCE(sigmoid(z), t)`.
    pub fn weighted_bce(&mut self, logits: Var, targets: &Tensor, weights: &[f64]) -> Result<Var> {
        let (n, p) = self.value(logits).dims2("weighted_bce")?;
        if targets.shape() != [n, p] {
            return Err(shape_err("weighted_bce", &[n, p], targets.shape()));
        }
        if weights.len() != p {
            return Err(shape_err("weighted_bce", &[p], &[weights.len()]));
        }
        if let Some(bad) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(TensorError::Argument {
                op: "weighted_bce",
                msg: format!("weights must be strictly positive, got {bad}"),
            });
        }
        if let Some(bad) = targets.data().iter().find(|t| **t != 0.0 && **t != 1.0) {
            return Err(TensorError::Argument {
                op: "weighted_bce",
                msg: format!("targets must be 0 or 1, got {bad}"),
            });
        }
        let zs = self.value(logits).data();
        let ts = targets.data();
        let total: f64 = (0..n * p)
            .map(|i| weights[i % p] * kernels::bce_with_logit(zs[i], ts[i]))
            .sum();
        let value = Tensor::scalar(total / n as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::WeightedBce {
                logits,
                targets: ts.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum { x }, rg)
    }

    /// Scalar projection `sum_i x_i * coef_i`.
    pub fn dot(&mut self, x: Var, coef: &[f64]) -> Result<Var> {
        if coef.len() != self.value(x).numel() {
            return Err(shape_err("dot", self.value(x).shape(), &[coef.len()]));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(coef)
            .map(|(a, b)| a * b)
            .sum();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Dot {
                x,
                coef: coef.to_vec(),
            },
            rg,
        ))
    }

    pub fn conv_layer(&mut self, x: Var, layer: &LayerParams, stride: usize, pad: usize) -> Result<Var> {
        debug_assert_eq!(layer.kind, LayerKind::Conv);
        let w = self.param(layer, Slot::Weight);
        let b = self.param(layer, Slot::Bias);
        self.conv2d(x, w, b, stride, pad)
    }

    pub fn linear_layer(&mut self, x: Var, layer: &LayerParams) -> Result<Var> {
        debug_assert_eq!(layer.kind, LayerKind::Linear);
        let w = self.param(layer, Slot::Weight);
        let b = self.param(layer, Slot::Bias);
        self.linear(x, w, b)
    }

    pub fn batch_norm_layer(&mut self, x: Var, layer: &LayerParams) -> Result<Var> {
        let (Some(rm), Some(rv)) = (&layer.running_mean, &layer.running_var) else {
            return Err(TensorError::Argument {
                op: "batch_norm",
                msg: format!("layer {} has no running statistics", layer.name),
            });
        };
        let gamma = self.param(layer, Slot::Weight);
        let beta = self.param(layer, Slot::Bias);
        self.batch_norm(
            x,
            gamma,
            beta,
            RunningStats {
                mean: rm.data(),
                var: rv.data(),
                momentum: layer.momentum,
                epsilon: layer.epsilon,
                layer: Some(layer.id),
            },
        )
    }

    /// Reverse pass from a scalar node. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::State(
                "backward already ran on this tape".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(TensorError::Argument {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            for (var, contrib) in self.node_backward(node, &g) {
                if self.nodes[var.0].requires_grad {
                    accumulate(&mut grads[var.0], contrib);
                }
            }
        }
        let params = self
            .params
            .iter()
            .map(|(&(id, slot), &v)| (v, id, slot))
            .collect::<Vec<_>>();
        let mut params = params;
        params.sort_by_key(|&(v, _, _)| v.0);
        Ok(Gradients { grads, params })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let n = xt.shape()[0];
                let o = wt.shape()[0];
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let in_stride = geom.c * geom.h * geom.w;
                let mut db = vec![0.0; o];
                let mut dw = vec![0.0; wt.numel()];
                let want_x = self.needs(*x);
                let mut dx = if want_x { vec![0.0; xt.numel()] } else { Vec::new() };
                let mut dcols = vec![0.0; rows * ncols];
                for s in 0..n {
                    let gy = &g[s * o * ncols..(s + 1) * o * ncols];
                    for (oc, row) in gy.chunks(ncols).enumerate() {
                        db[oc] += row.iter().sum::<f64>();
                    }
                    let col = &cols[s * rows * ncols..(s + 1) * rows * ncols];
                    kernels::gemm(o, ncols, rows, gy, false, col, true, 1.0, &mut dw);
                    if want_x {
                        kernels::gemm(rows, o, ncols, wt.data(), true, gy, false, 0.0, &mut dcols);
                        kernels::col2im(&dcols, geom, &mut dx[s * in_stride..(s + 1) * in_stride]);
                    }
                }
                let mut out = vec![(*w, dw), (*b, db)];
                if want_x {
                    out.push((*x, dx));
                }
                out
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = node.value.dims4("batch_norm").expect("4d");
                let hw = h * w;
                let m = (n * hw) as f64;
                let gs = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for i in base..base + hw {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                let mut dx = vec![0.0; g.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        let scale = gs[ch] * inv_std[ch];
                        for i in base..base + hw {
                            dx[i] = if *batch_stats {
                                scale * (g[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                            } else {
                                scale * g[i]
                            };
                        }
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Relu { x } => {
                let xs = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xs)
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Sigmoid { x } => {
                let ys = node.value.data();
                let dx = g.iter().zip(ys).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                vec![(*x, dx)]
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (gv, &src) in g.iter().zip(argmax) {
                    dx[src] += gv;
                }
                vec![(*x, dx)]
            }
            Op::GlobalAvgPool { x } => {
                let (_, _, h, w) = self.value(*x).dims4("global_avg_pool").expect("4d");
                let hw = h * w;
                let inv = 1.0 / hw as f64;
                let dx = (0..self.value(*x).numel()).map(|i| g[i / hw] * inv).collect();
                vec![(*x, dx)]
            }
            Op::Linear { x, w, b } => {
                let (n, i) = self.value(*x).dims2("linear").expect("2d");
                let o = self.value(*w).shape()[0];
                let mut out = Vec::with_capacity(3);
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * i];
                    kernels::gemm(n, o, i, g, false, self.value(*w).data(), false, 0.0, &mut dx);
                    out.push((*x, dx));
                }
                let mut dw = vec![0.0; o * i];
                kernels::gemm(o, n, i, g, true, self.value(*x).data(), false, 0.0, &mut dw);
                let mut db = vec![0.0; o];
                for row in g.chunks(o) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                out.push((*w, dw));
                out.push((*b, db));
                out
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Concat { parts } => {
                let n = node.value.shape()[0];
                let total = node.value.numel() / n;
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let stride = self.value(*p).numel() / n;
                    let mut dp = Vec::with_capacity(stride * n);
                    for row in 0..n {
                        let start = row * total + offset;
                        dp.extend_from_slice(&g[start..start + stride]);
                    }
                    offset += stride;
                    out.push((*p, dp));
                }
                out
            }
            Op::WeightedBce {
                logits,
                targets,
                weights,
            } => {
                let zs = self.value(*logits).data();
                let p = weights.len();
                let n = zs.len() / p;
                let scale = g[0] / n as f64;
                let dz = (0..zs.len())
                    .map(|i| scale * weights[i % p] * (kernels::sigmoid(zs[i]) - targets[i]))
                    .collect();
                vec![(*logits, dz)]
            }
            Op::Sum { x } => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::Dot { x, coef } => vec![(*x, coef.iter().map(|c| c * g[0]).collect())],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_scalar_kernel_scales_input() {
        let mut g = Graph::new(Mode::Eval);
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.constant(t(&[1, 1, 1, 1], &[2.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_rejects_bad_arguments() {
        let mut g = Graph::new(Mode::Eval);
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[3, 1, 3, 3]));
        let b = g.constant(Tensor::zeros(&[3]));
        let err = g.conv2d(x, w, b, 1, 1).unwrap_err();
        assert!(matches!(err, TensorError::Shape { .. }), "{err}");
        assert!(err.to_string().contains("[3, 2, 3, 3]"));
        assert!(err.to_string().contains("[3, 1, 3, 3]"));
        let w2 = g.constant(Tensor::zeros(&[3, 2, 3, 3]));
        assert!(matches!(
            g.conv2d(x, w2, b, 0, 1),
            Err(TensorError::Argument { .. })
        ));
    }

    #[test]
    fn same_padding_preserves_extent_for_odd_kernels() {
        for k in [1usize, 3, 5, 7] {
            let mut g = Graph::new(Mode::Eval);
            let x = g.constant(Tensor::zeros(&[1, 1, 9, 11]));
            let w = g.constant(Tensor::zeros(&[1, 1, k, k]));
            let b = g.constant(Tensor::zeros(&[1]));
            let y = g.conv2d(x, w, b, 1, (k - 1) / 2).unwrap();
            assert_eq!(g.value(y).shape(), &[1, 1, 9, 11]);
        }
    }

    #[test]
    fn relu_and_sigmoid_definitions() {
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.input(t(&[1], &[0.0]));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).item(), 0.5);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(z).unwrap()[0], 0.25);
    }

    #[test]
    fn max_pool_single_window_and_gradient_routing() {
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.max_pool(x, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let mut g = Graph::new(Mode::Eval);
        let data: Vec<f64> = (0..16).map(|i| ((i * 7) % 16) as f64).collect();
        let x = g.input(t(&[1, 1, 4, 4], &data));
        let y = g.max_pool(x, 2, 2).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        let dx = grads.get(x).unwrap();
        for wy in 0..2 {
            for wx in 0..2 {
                let ones: Vec<f64> = (0..2)
                    .flat_map(|ky| (0..2).map(move |kx| (ky, kx)))
                    .map(|(ky, kx)| dx[(wy * 2 + ky) * 4 + wx * 2 + kx])
                    .collect();
                assert_eq!(ones.iter().filter(|&&v| v == 1.0).count(), 1);
                assert_eq!(ones.iter().sum::<f64>(), 1.0);
            }
        }
    }

    #[test]
    fn max_pool_ties_pick_first_row_major() {
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(Tensor::full(&[1, 1, 2, 2], 5.0));
        let y = g.max_pool(x, 2, 2).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_window_larger_than_input_is_error() {
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(matches!(g.max_pool(x, 3, 1), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn max_pool_112_to_56() {
        let mut g = Graph::new(Mode::Eval);
        let x = g.constant(Tensor::zeros(&[1, 1, 112, 112]));
        let y = g.max_pool(x, 2, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 56, 56]);
    }

    #[test]
    fn global_avg_pool_of_constant() {
        let mut g = Graph::new(Mode::Eval);
        let x = g.constant(Tensor::full(&[2, 3, 4, 5], 3.0));
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3]);
        assert!(g.value(y).data().iter().all(|&v| (v - 3.0).abs() < 1e-15));
    }

    #[test]
    fn linear_hand_product_and_identity() {
        let mut g = Graph::new(Mode::Eval);
        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = g.constant(t(&[2, 2], &[1.0, 1.0, 0.0, 1.0]));
        let b = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 2.0]);

        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = g.linear(x, eye, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let bad = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.linear(x, bad, b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let mut g = Graph::new(Mode::Train);
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| ((i * 37) % 23) as f64 * 0.7 - 3.0).collect();
        let x = g.input(t(&[2, 3, 4, 4], &data));
        let gamma = g.input(Tensor::full(&[3], 1.0));
        let beta = g.input(Tensor::zeros(&[3]));
        let (rm, rv) = (vec![0.0; 3], vec![1.0; 3]);
        let stats = RunningStats {
            mean: &rm,
            var: &rv,
            momentum: 0.1,
            epsilon: 1e-5,
            layer: None,
        };
        let y = g.batch_norm(x, gamma, beta, stats).unwrap();
        let ys = g.value(y).data();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|s| (0..16).map(move |i| (s * 3 + ch) * 16 + i))
                .map(|i| ys[i])
                .collect();
            let mean = vals.iter().sum::<f64>() / 32.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-5, "{var}");
        }
    }

    #[test]
    fn batch_norm_eval_identity_stats() {
        let mut g = Graph::new(Mode::Eval);
        let data: Vec<f64> = (0..8).map(|i| i as f64 - 4.0).collect();
        let x = g.input(t(&[2, 1, 2, 2], &data));
        let gamma = g.input(Tensor::full(&[1], 1.0));
        let beta = g.input(Tensor::zeros(&[1]));
        let (rm, rv) = (vec![0.0], vec![1.0]);
        let stats = RunningStats {
            mean: &rm,
            var: &rv,
            momentum: 0.1,
            epsilon: 1e-5,
            layer: None,
        };
        let y = g.batch_norm(x, gamma, beta, stats).unwrap();
        let scale = 1.0 / (1.0 + 1e-5f64).sqrt();
        for (a, b) in g.value(y).data().iter().zip(&data) {
            assert!((a - b * scale).abs() < 1e-12);
            assert!((a - b).abs() <= 1e-5 * b.abs() + 1e-12);
        }
    }

    #[test]
    fn batch_norm_single_element_is_degenerate() {
        let mut g = Graph::new(Mode::Train);
        let x = g.input(Tensor::zeros(&[1, 2, 1, 1]));
        let gamma = g.input(Tensor::full(&[2], 1.0));
        let beta = g.input(Tensor::zeros(&[2]));
        let (rm, rv) = (vec![0.0; 2], vec![1.0; 2]);
        let stats = RunningStats {
            mean: &rm,
            var: &rv,
            momentum: 0.1,
            epsilon: 1e-5,
            layer: None,
        };
        assert!(matches!(
            g.batch_norm(x, gamma, beta, stats),
            Err(TensorError::DegenerateStatistics { count: 1 })
        ));
    }

    #[test]
    fn weighted_bce_reference_values() {
        let mut g = Graph::new(Mode::Train);
        let z = g.input(Tensor::zeros(&[3, 4]));
        let targets = Tensor::from_fn(&[3, 4], |i| (i % 2) as f64);
        let loss = g.weighted_bce(z, &targets, &[1.0; 4]).unwrap();
        assert!((g.value(loss).item() - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);

        let z = g.input(Tensor::full(&[1, 1], 20.0));
        let loss = g.weighted_bce(z, &Tensor::full(&[1, 1], 1.0), &[1.0]).unwrap();
        assert!(g.value(loss).item() < 1e-8);

        let bad = Tensor::full(&[1, 1], 0.5);
        assert!(matches!(
            g.weighted_bce(z, &bad, &[1.0]),
            Err(TensorError::Argument { .. })
        ));
        assert!(g
            .weighted_bce(z, &Tensor::full(&[1, 1], 1.0), &[0.0])
            .is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new(Mode::Train);
        let x = g.input(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_state_errors() {
        let mut g = Graph::new(Mode::Train);
        let x = g.input(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(TensorError::Argument { .. })));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(TensorError::State(_))));
    }

    #[test]
    fn concat_splits_gradient_back() {
        let mut g = Graph::new(Mode::Train);
        let a = g.input(Tensor::from_fn(&[2, 2], |i| i as f64));
        let b = g.input(Tensor::from_fn(&[2, 3], |i| 10.0 + i as f64));
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 5]);
        assert_eq!(
            g.value(c).data(),
            &[0.0, 1.0, 10.0, 11.0, 12.0, 2.0, 3.0, 13.0, 14.0, 15.0]
        );
        let coef: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let s = g.dot(c, &coef).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[0.0, 1.0, 5.0, 6.0]);
        assert_eq!(grads.get(b).unwrap(), &[2.0, 3.0, 4.0, 7.0, 8.0, 9.0]);
    }
}
