//! Eager reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation
//! computes its value immediately (so per-sample losses can be inspected
//! while the graph is being built, which hard-example selection relies
//! on) and records enough to run the reverse sweep. `backward` walks the
//! nodes in reverse creation order and accumulates gradients into the
//! parameter leaves.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamId, ParamSet};
use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Column-pooling flavor used by segment pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMethod {
    Average,
    Max,
}

enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Add(Var, Var),
    /// `a*x + b*y`, elementwise on same-shape tensors.
    AddScaled {
        a: f64,
        x: Var,
        b: f64,
        y: Var,
    },
    Scale(Var, f64),
    Relu(Var),
    /// `[m,k] x [k,n] -> [m,n]`.
    MatMul(Var, Var),
    /// `w [o,i] * x [i] (+ b [o]) -> [o]`.
    Linear {
        w: Var,
        x: Var,
        b: Option<Var>,
    },
    /// Matrix plus a column vector broadcast over columns.
    AddColBroadcast {
        m: Var,
        col: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    AvgPool2d {
        x: Var,
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    /// 1-D concatenation.
    Concat(Vec<Var>),
    /// Stack `[d]` vectors as the columns of a `[d, n]` matrix.
    StackCols(Vec<Var>),
    SliceCols {
        m: Var,
        from: usize,
        to: usize,
    },
    /// Pool column ranges of a matrix down to one column each.
    /// `bounds` are 0-based inclusive column ranges. For max pooling,
    /// `argmax[r * nseg + s]` records the winning column (earliest on ties).
    SegmentPoolCols {
        m: Var,
        bounds: Vec<(usize, usize)>,
        method: PoolMethod,
        argmax: Vec<usize>,
    },
    /// `-log softmax(logits)[label]`, a scalar.
    LogSoftmaxNll {
        logits: Var,
        label: usize,
    },
    /// Binary cross-entropy of `sigmoid(logits[index])` against `target`.
    SigmoidBce {
        logits: Var,
        index: usize,
        target: f64,
    },
    /// Sum of smooth-L1 penalties of `pred - target`, a scalar.
    SmoothL1 {
        pred: Var,
        target: Vec<f64>,
    },
    /// Weighted sum of scalar nodes.
    WeightedSum(Vec<(f64, Var)>),
    /// Sum of all elements, a scalar.
    Sum(Var),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// A single forward pass under construction.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_memo: HashMap<ParamId, usize>,
}

fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Convolution output extent, or `None` when the kernel does not fit.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; gradients are not tracked through it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf { param: None }, value)
    }

    /// A trainable parameter leaf. Memoized per tape so a parameter used
    /// in several places accumulates one gradient.
    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> Var {
        if let Some(&idx) = self.param_memo.get(&id) {
            return Var(idx);
        }
        let var = self.push(Op::Leaf { param: Some(id) }, set.get(id).clone());
        self.param_memo.insert(id, var.0);
        var
    }

    pub fn add(&mut self, x: Var, y: Var) -> Var {
        let (a, b) = (&self.nodes[x.0].value, &self.nodes[y.0].value);
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| p + q)
            .collect();
        let value = Tensor::new(a.shape().to_vec(), data);
        self.push(Op::Add(x, y), value)
    }

    pub fn add_scaled(&mut self, a: f64, x: Var, b: f64, y: Var) -> Var {
        let (tx, ty) = (&self.nodes[x.0].value, &self.nodes[y.0].value);
        assert_eq!(tx.shape(), ty.shape(), "add_scaled: shape mismatch");
        let data = tx
            .data()
            .iter()
            .zip(ty.data())
            .map(|(p, q)| a * p + b * q)
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data);
        self.push(Op::AddScaled { a, x, b, y }, value)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = &self.nodes[x.0].value;
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| c * v).collect());
        self.push(Op::Scale(x, c), value)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let value = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|v| v.max(0.0)).collect(),
        );
        self.push(Op::Relu(x), value)
    }

    pub fn matmul(&mut self, x: Var, y: Var) -> Var {
        let (a, b) = (&self.nodes[x.0].value, &self.nodes[y.0].value);
        let (m, k) = (a.rows(), a.cols());
        let (k2, n) = (b.rows(), b.cols());
        assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for p in 0..k {
                let aip = a.at2(i, p);
                if aip == 0.0 {
                    continue;
                }
                for j in 0..n {
                    let v = out.at2(i, j) + aip * b.at2(p, j);
                    out.set2(i, j, v);
                }
            }
        }
        self.push(Op::MatMul(x, y), out)
    }

    pub fn linear(&mut self, w: Var, x: Var, b: Option<Var>) -> Var {
        let (tw, tx) = (&self.nodes[w.0].value, &self.nodes[x.0].value);
        let (o, i) = (tw.rows(), tw.cols());
        assert_eq!(tx.shape(), &[i], "linear: input dim mismatch");
        let mut out = vec![0.0; o];
        for (r, slot) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for c in 0..i {
                acc += tw.at2(r, c) * tx.data()[c];
            }
            *slot = acc;
        }
        if let Some(bv) = b {
            let tb = &self.nodes[bv.0].value;
            assert_eq!(tb.shape(), &[o], "linear: bias dim mismatch");
            for (v, bias) in out.iter_mut().zip(tb.data()) {
                *v += bias;
            }
        }
        self.push(Op::Linear { w, x, b }, Tensor::vector(out))
    }

    pub fn add_col_broadcast(&mut self, m: Var, col: Var) -> Var {
        let (tm, tc) = (&self.nodes[m.0].value, &self.nodes[col.0].value);
        let (r, c) = (tm.rows(), tm.cols());
        assert_eq!(tc.shape(), &[r], "add_col_broadcast: column dim mismatch");
        let mut out = tm.clone();
        for i in 0..r {
            for j in 0..c {
                let v = out.at2(i, j) + tc.data()[i];
                out.set2(i, j, v);
            }
        }
        self.push(Op::AddColBroadcast { m, col }, out)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Var {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (ci, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (co, ci2, kh, kw) = (
            tw.shape()[0],
            tw.shape()[1],
            tw.shape()[2],
            tw.shape()[3],
        );
        assert_eq!(ci, ci2, "conv2d: channel mismatch");
        let oh = conv_out_extent(h, kh, stride.0, pad.0)
            .unwrap_or_else(|| panic!("conv2d: height {h} underflows kernel {kh}"));
        let ow = conv_out_extent(wd, kw, stride.1, pad.1)
            .unwrap_or_else(|| panic!("conv2d: width {wd} underflows kernel {kw}"));
        let mut out = Tensor::zeros(&[co, oh, ow]);
        let xdata = tx.data();
        let wdata = tw.data();
        // gather every receptive field into a patch row, then contract each
        // against the (contiguous) per-output-channel weight rows
        let kdim = ci * kh * kw;
        let osz = oh * ow;
        let mut patches = vec![0.0f64; osz * kdim];
        for y in 0..oh {
            for xo in 0..ow {
                let patch = &mut patches[(y * ow + xo) * kdim..(y * ow + xo + 1) * kdim];
                for c in 0..ci {
                    let x_base = c * h * wd;
                    for i in 0..kh {
                        let ih = y * stride.0 + i;
                        if ih < pad.0 || ih - pad.0 >= h {
                            continue;
                        }
                        let row = x_base + (ih - pad.0) * wd;
                        let p_base = (c * kh + i) * kw;
                        for j in 0..kw {
                            let iw = xo * stride.1 + j;
                            if iw < pad.1 || iw - pad.1 >= wd {
                                continue;
                            }
                            patch[p_base + j] = xdata[row + iw - pad.1];
                        }
                    }
                }
            }
        }
        for o in 0..co {
            let bias = match b {
                Some(bv) => self.nodes[bv.0].value.data()[o],
                None => 0.0,
            };
            let w_row = &wdata[o * kdim..(o + 1) * kdim];
            let out_row = &mut out.data_mut()[o * osz..(o + 1) * osz];
            for (p, ov) in out_row.iter_mut().enumerate() {
                let patch = &patches[p * kdim..(p + 1) * kdim];
                let mut dot = 0.0;
                for (wv, xv) in w_row.iter().zip(patch) {
                    dot += wv * xv;
                }
                *ov = bias + dot;
            }
        }
        self.push(Op::Conv2d { x, w, b, stride, pad }, out)
    }

    pub fn avg_pool2d(&mut self, x: Var, kernel: (usize, usize), stride: (usize, usize)) -> Var {
        let tx = &self.nodes[x.0].value;
        let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let oh = conv_out_extent(h, kernel.0, stride.0, 0)
            .unwrap_or_else(|| panic!("avg_pool2d: height {h} underflows kernel {}", kernel.0));
        let ow = conv_out_extent(w, kernel.1, stride.1, 0)
            .unwrap_or_else(|| panic!("avg_pool2d: width {w} underflows kernel {}", kernel.1));
        let norm = 1.0 / (kernel.0 * kernel.1) as f64;
        let mut out = Tensor::zeros(&[c, oh, ow]);
        for ch in 0..c {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for i in 0..kernel.0 {
                        for j in 0..kernel.1 {
                            acc += tx.at3(ch, y * stride.0 + i, xo * stride.1 + j);
                        }
                    }
                    out.set3(ch, y, xo, acc * norm);
                }
            }
        }
        self.push(Op::AvgPool2d { x, kernel, stride }, out)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let norm = 1.0 / (h * w) as f64;
        let out: Vec<f64> = (0..c)
            .map(|ch| {
                let mut acc = 0.0;
                for y in 0..h {
                    for xo in 0..w {
                        acc += tx.at3(ch, y, xo);
                    }
                }
                acc * norm
            })
            .collect();
        self.push(Op::GlobalAvgPool(x), Tensor::vector(out))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let value = self.nodes[x.0].value.reshaped(shape);
        self.push(Op::Reshape(x), value)
    }

    pub fn flatten(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel();
        self.reshape(x, vec![n])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        for &p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.shape().len(), 1, "concat: 1-D inputs only");
            data.extend_from_slice(t.data());
        }
        self.push(Op::Concat(parts.to_vec()), Tensor::vector(data))
    }

    pub fn stack_cols(&mut self, cols: &[Var]) -> Var {
        assert!(!cols.is_empty(), "stack_cols: empty input");
        let d = self.nodes[cols[0].0].value.numel();
        let n = cols.len();
        let mut out = Tensor::zeros(&[d, n]);
        for (j, &cv) in cols.iter().enumerate() {
            let t = &self.nodes[cv.0].value;
            assert_eq!(t.shape(), &[d], "stack_cols: column dim mismatch");
            for r in 0..d {
                out.set2(r, j, t.data()[r]);
            }
        }
        self.push(Op::StackCols(cols.to_vec()), out)
    }

    pub fn slice_cols(&mut self, m: Var, from: usize, to: usize) -> Var {
        let tm = &self.nodes[m.0].value;
        let (r, c) = (tm.rows(), tm.cols());
        assert!(from < to && to <= c, "slice_cols: bad range {from}..{to} of {c}");
        let mut out = Tensor::zeros(&[r, to - from]);
        for i in 0..r {
            for j in from..to {
                out.set2(i, j - from, tm.at2(i, j));
            }
        }
        self.push(Op::SliceCols { m, from, to }, out)
    }

    pub fn segment_pool_cols(
        &mut self,
        m: Var,
        bounds: &[(usize, usize)],
        method: PoolMethod,
    ) -> Var {
        let tm = &self.nodes[m.0].value;
        let (rows, cols) = (tm.rows(), tm.cols());
        let nseg = bounds.len();
        for &(s, e) in bounds {
            assert!(s <= e && e < cols, "segment_pool_cols: bad bound ({s},{e}) of {cols}");
        }
        let mut out = Tensor::zeros(&[rows, nseg]);
        let mut argmax = Vec::new();
        match method {
            PoolMethod::Average => {
                for (j, &(s, e)) in bounds.iter().enumerate() {
                    let norm = 1.0 / (e - s + 1) as f64;
                    for r in 0..rows {
                        let mut acc = 0.0;
                        for c in s..=e {
                            acc += tm.at2(r, c);
                        }
                        out.set2(r, j, acc * norm);
                    }
                }
            }
            PoolMethod::Max => {
                argmax = vec![0; rows * nseg];
                for (j, &(s, e)) in bounds.iter().enumerate() {
                    for r in 0..rows {
                        let mut best = tm.at2(r, s);
                        let mut best_c = s;
                        for c in s + 1..=e {
                            let v = tm.at2(r, c);
                            if v > best {
                                best = v;
                                best_c = c;
                            }
                        }
                        out.set2(r, j, best);
                        argmax[r * nseg + j] = best_c;
                    }
                }
            }
        }
        self.push(
            Op::SegmentPoolCols {
                m,
                bounds: bounds.to_vec(),
                method,
                argmax,
            },
            out,
        )
    }

    /// Cross-entropy of one sample: `-log softmax(logits)[label]`.
    pub fn log_softmax_nll(&mut self, logits: Var, label: usize) -> Var {
        let t = &self.nodes[logits.0].value;
        assert!(label < t.numel(), "log_softmax_nll: label out of range");
        let lse = log_sum_exp(t.data());
        let value = Tensor::scalar(lse - t.data()[label]);
        self.push(Op::LogSoftmaxNll { logits, label }, value)
    }

    /// Numerically stable binary cross-entropy on one logit component:
    /// `max(x, 0) - x * target + ln(1 + exp(-|x|))`.
    pub fn sigmoid_bce(&mut self, logits: Var, index: usize, target: f64) -> Var {
        let t = &self.nodes[logits.0].value;
        assert!(index < t.numel(), "sigmoid_bce: index out of range");
        let x = t.data()[index];
        let value = x.max(0.0) - x * target + (-x.abs()).exp().ln_1p();
        self.push(
            Op::SigmoidBce {
                logits,
                index,
                target,
            },
            Tensor::scalar(value),
        )
    }

    /// Sum of smooth-L1 penalties of the residual `pred - target`.
    pub fn smooth_l1(&mut self, pred: Var, target: &[f64]) -> Var {
        let t = &self.nodes[pred.0].value;
        assert_eq!(t.numel(), target.len(), "smooth_l1: length mismatch");
        let total: f64 = t
            .data()
            .iter()
            .zip(target)
            .map(|(p, g)| smooth_l1(p - g))
            .sum();
        self.push(
            Op::SmoothL1 {
                pred,
                target: target.to_vec(),
            },
            Tensor::scalar(total),
        )
    }

    /// Weighted sum of scalar nodes. An empty term list yields zero.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Var {
        let mut acc = 0.0;
        for &(c, v) in terms {
            acc += c * self.nodes[v.0].value.item();
        }
        self.push(Op::WeightedSum(terms.to_vec()), Tensor::scalar(acc))
    }

    /// Mean of scalar nodes; panics on an empty list.
    pub fn mean(&mut self, terms: &[Var]) -> Var {
        assert!(!terms.is_empty(), "mean: empty input");
        let w = 1.0 / terms.len() as f64;
        let weighted: Vec<(f64, Var)> = terms.iter().map(|&v| (w, v)).collect();
        self.weighted_sum(&weighted)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.nodes[x.0].value.data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(total))
    }

    /// Reverse sweep from a scalar root, returning parameter gradients.
    pub fn backward(&self, root: Var, params: &ParamSet) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.numel(),
            1,
            "backward: root must be scalar"
        );
        let mut node_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        node_grads[root.0] = Some(Tensor::scalar(1.0));

        let mut out = Gradients::new(params.len());

        for idx in (0..=root.0).rev() {
            let grad = match node_grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let add_to = |store: &mut Vec<Option<Tensor>>, v: Var, g: Tensor| {
                match &mut store[v.0] {
                    Some(existing) => existing.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            };
            match &self.nodes[idx].op {
                Op::Leaf { param } => {
                    if let Some(id) = param {
                        out.accumulate(*id, &grad);
                    }
                }
                Op::Add(x, y) => {
                    add_to(&mut node_grads, *x, grad.clone());
                    add_to(&mut node_grads, *y, grad);
                }
                Op::AddScaled { a, x, b, y } => {
                    let gx = Tensor::new(
                        grad.shape().to_vec(),
                        grad.data().iter().map(|g| a * g).collect(),
                    );
                    let gy = Tensor::new(
                        grad.shape().to_vec(),
                        grad.data().iter().map(|g| b * g).collect(),
                    );
                    add_to(&mut node_grads, *x, gx);
                    add_to(&mut node_grads, *y, gy);
                }
                Op::Scale(x, c) => {
                    let gx = Tensor::new(
                        grad.shape().to_vec(),
                        grad.data().iter().map(|g| c * g).collect(),
                    );
                    add_to(&mut node_grads, *x, gx);
                }
                Op::Relu(x) => {
                    let input = &self.nodes[x.0].value;
                    let gx = Tensor::new(
                        grad.shape().to_vec(),
                        grad.data()
                            .iter()
                            .zip(input.data())
                            .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                            .collect(),
                    );
                    add_to(&mut node_grads, *x, gx);
                }
                Op::MatMul(x, y) => {
                    let a = &self.nodes[x.0].value;
                    let b = &self.nodes[y.0].value;
                    let (m, k) = (a.rows(), a.cols());
                    let n = b.cols();
                    let mut ga = Tensor::zeros(&[m, k]);
                    let mut gb = Tensor::zeros(&[k, n]);
                    for i in 0..m {
                        for j in 0..n {
                            let g = grad.at2(i, j);
                            if g == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga.set2(i, p, ga.at2(i, p) + g * b.at2(p, j));
                                gb.set2(p, j, gb.at2(p, j) + g * a.at2(i, p));
                            }
                        }
                    }
                    add_to(&mut node_grads, *x, ga);
                    add_to(&mut node_grads, *y, gb);
                }
                Op::Linear { w, x, b } => {
                    let tw = &self.nodes[w.0].value;
                    let tx = &self.nodes[x.0].value;
                    let (o, i) = (tw.rows(), tw.cols());
                    let mut gw = Tensor::zeros(&[o, i]);
                    let mut gx = Tensor::zeros(&[i]);
                    for r in 0..o {
                        let g = grad.data()[r];
                        if g == 0.0 {
                            continue;
                        }
                        for c in 0..i {
                            gw.set2(r, c, gw.at2(r, c) + g * tx.data()[c]);
                            gx.data_mut()[c] += g * tw.at2(r, c);
                        }
                    }
                    add_to(&mut node_grads, *x, gx);
                    add_to(&mut node_grads, *w, gw);
                    if let Some(bv) = b {
                        add_to(&mut node_grads, *bv, grad.clone());
                    }
                }
                Op::AddColBroadcast { m, col } => {
                    let (r, c) = (grad.rows(), grad.cols());
                    let mut gcol = Tensor::zeros(&[r]);
                    for i in 0..r {
                        let mut acc = 0.0;
                        for j in 0..c {
                            acc += grad.at2(i, j);
                        }
                        gcol.data_mut()[i] = acc;
                    }
                    add_to(&mut node_grads, *m, grad.clone());
                    add_to(&mut node_grads, *col, gcol);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let tx = &self.nodes[x.0].value;
                    let tw = &self.nodes[w.0].value;
                    let (ci, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                    let (co, _, kh, kw) = (
                        tw.shape()[0],
                        tw.shape()[1],
                        tw.shape()[2],
                        tw.shape()[3],
                    );
                    let (oh, ow) = (grad.shape()[1], grad.shape()[2]);
                    let mut gx = Tensor::zeros(&[ci, h, wd]);
                    let mut gw = Tensor::zeros(&[co, ci, kh, kw]);
                    let mut gb = Tensor::zeros(&[co]);
                    let xdata = tx.data();
                    let wdata = tw.data();
                    let gdata = grad.data();
                    for o in 0..co {
                        let g_base = o * oh * ow;
                        gb.data_mut()[o] += gdata[g_base..g_base + oh * ow].iter().sum::<f64>();
                        for c in 0..ci {
                            let x_base = c * h * wd;
                            let w_base = (o * ci + c) * kh * kw;
                            for y in 0..oh {
                                let g_row = &gdata[g_base + y * ow..g_base + (y + 1) * ow];
                                for i in 0..kh {
                                    let ih = y * stride.0 + i;
                                    if ih < pad.0 || ih - pad.0 >= h {
                                        continue;
                                    }
                                    let row_start = x_base + (ih - pad.0) * wd;
                                    for j in 0..kw {
                                        let xo_lo = pad.1.saturating_sub(j).div_ceil(stride.1);
                                        let xo_hi = if wd + pad.1 > j {
                                            (((wd + pad.1 - j - 1) / stride.1) + 1).min(ow)
                                        } else {
                                            0
                                        };
                                        if xo_lo >= xo_hi {
                                            continue;
                                        }
                                        let weight = wdata[w_base + i * kw + j];
                                        let g_run = &g_row[xo_lo..xo_hi];
                                        if stride.1 == 1 {
                                            let iw0 = row_start + xo_lo + j - pad.1;
                                            let x_run = &xdata[iw0..iw0 + g_run.len()];
                                            let mut wsum = 0.0;
                                            let gx_run =
                                                &mut gx.data_mut()[iw0..iw0 + g_run.len()];
                                            for ((g, xv), gxv) in
                                                g_run.iter().zip(x_run).zip(gx_run)
                                            {
                                                wsum += g * xv;
                                                *gxv += weight * g;
                                            }
                                            gw.data_mut()[w_base + i * kw + j] += wsum;
                                        } else {
                                            let mut iw = row_start + xo_lo * stride.1 + j - pad.1;
                                            let mut wsum = 0.0;
                                            for g in g_run {
                                                wsum += g * xdata[iw];
                                                gx.data_mut()[iw] += weight * g;
                                                iw += stride.1;
                                            }
                                            gw.data_mut()[w_base + i * kw + j] += wsum;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    add_to(&mut node_grads, *x, gx);
                    add_to(&mut node_grads, *w, gw);
                    if let Some(bv) = b {
                        add_to(&mut node_grads, *bv, gb);
                    }
                }
                Op::AvgPool2d { x, kernel, stride } => {
                    let tx = &self.nodes[x.0].value;
                    let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                    let (oh, ow) = (grad.shape()[1], grad.shape()[2]);
                    let norm = 1.0 / (kernel.0 * kernel.1) as f64;
                    let mut gx = Tensor::zeros(&[c, h, w]);
                    for ch in 0..c {
                        for y in 0..oh {
                            for xo in 0..ow {
                                let g = grad.at3(ch, y, xo) * norm;
                                for i in 0..kernel.0 {
                                    for j in 0..kernel.1 {
                                        gx.add3(ch, y * stride.0 + i, xo * stride.1 + j, g);
                                    }
                                }
                            }
                        }
                    }
                    add_to(&mut node_grads, *x, gx);
                }
                Op::GlobalAvgPool(x) => {
                    let tx = &self.nodes[x.0].value;
                    let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                    let norm = 1.0 / (h * w) as f64;
                    let mut gx = Tensor::zeros(&[c, h, w]);
                    for ch in 0..c {
                        let g = grad.data()[ch] * norm;
                        for y in 0..h {
                            for xo in 0..w {
                                gx.set3(ch, y, xo, g);
                            }
                        }
                    }
                    add_to(&mut node_grads, *x, gx);
                }
                Op::Reshape(x) => {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    add_to(&mut node_grads, *x, grad.reshaped(shape));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.nodes[p.0].value.numel();
                        let gp = Tensor::vector(grad.data()[offset..offset + n].to_vec());
                        add_to(&mut node_grads, p, gp);
                        offset += n;
                    }
                }
                Op::StackCols(cols) => {
                    let d = grad.rows();
                    for (j, &cv) in cols.iter().enumerate() {
                        let gcol = Tensor::vector((0..d).map(|r| grad.at2(r, j)).collect());
                        add_to(&mut node_grads, cv, gcol);
                    }
                }
                Op::SliceCols { m, from, to } => {
                    let tm = &self.nodes[m.0].value;
                    let mut gm = Tensor::zeros(&[tm.rows(), tm.cols()]);
                    for r in 0..tm.rows() {
                        for j in *from..*to {
                            gm.set2(r, j, grad.at2(r, j - from));
                        }
                    }
                    add_to(&mut node_grads, *m, gm);
                }
                Op::SegmentPoolCols {
                    m,
                    bounds,
                    method,
                    argmax,
                } => {
                    let tm = &self.nodes[m.0].value;
                    let (rows, cols) = (tm.rows(), tm.cols());
                    let nseg = bounds.len();
                    let mut gm = Tensor::zeros(&[rows, cols]);
                    match method {
                        PoolMethod::Average => {
                            for (j, &(s, e)) in bounds.iter().enumerate() {
                                let norm = 1.0 / (e - s + 1) as f64;
                                for r in 0..rows {
                                    let g = grad.at2(r, j) * norm;
                                    for c in s..=e {
                                        gm.set2(r, c, gm.at2(r, c) + g);
                                    }
                                }
                            }
                        }
                        PoolMethod::Max => {
                            for j in 0..nseg {
                                for r in 0..rows {
                                    let c = argmax[r * nseg + j];
                                    gm.set2(r, c, gm.at2(r, c) + grad.at2(r, j));
                                }
                            }
                        }
                    }
                    add_to(&mut node_grads, *m, gm);
                }
                Op::LogSoftmaxNll { logits, label } => {
                    let t = &self.nodes[logits.0].value;
                    let g = grad.item();
                    let lse = log_sum_exp(t.data());
                    let gl = Tensor::vector(
                        t.data()
                            .iter()
                            .enumerate()
                            .map(|(i, v)| {
                                let p = (v - lse).exp();
                                g * (p - if i == *label { 1.0 } else { 0.0 })
                            })
                            .collect(),
                    );
                    add_to(&mut node_grads, *logits, gl);
                }
                Op::SigmoidBce {
                    logits,
                    index,
                    target,
                } => {
                    let t = &self.nodes[logits.0].value;
                    let g = grad.item();
                    let x = t.data()[*index];
                    let sig = 1.0 / (1.0 + (-x).exp());
                    let mut gl = Tensor::zeros(&[t.numel()]);
                    gl.data_mut()[*index] = g * (sig - target);
                    add_to(&mut node_grads, *logits, gl);
                }
                Op::SmoothL1 { pred, target } => {
                    let t = &self.nodes[pred.0].value;
                    let g = grad.item();
                    let gp = Tensor::vector(
                        t.data()
                            .iter()
                            .zip(target)
                            .map(|(p, tv)| g * smooth_l1_grad(p - tv))
                            .collect(),
                    );
                    add_to(&mut node_grads, *pred, gp);
                }
                Op::WeightedSum(terms) => {
                    let g = grad.item();
                    for &(c, v) in terms {
                        add_to(&mut node_grads, v, Tensor::scalar(g * c));
                    }
                }
                Op::Sum(x) => {
                    let t = &self.nodes[x.0].value;
                    let g = grad.item();
                    add_to(&mut node_grads, *x, Tensor::filled(t.shape(), g));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param_set_with(values: &[(&str, Tensor)]) -> (ParamSet, Vec<ParamId>) {
        let mut set = ParamSet::new();
        let ids = values
            .iter()
            .map(|(name, t)| set.insert(*name, t.clone()))
            .collect();
        (set, ids)
    }

    #[test]
    fn linear_matches_hand_computation() {
        let (set, ids) = param_set_with(&[
            ("w", Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])),
            ("b", Tensor::vector(vec![0.5, -0.5])),
        ]);
        let mut tape = Tape::new();
        let w = tape.param(&set, ids[0]);
        let b = tape.param(&set, ids[1]);
        let x = tape.constant(Tensor::vector(vec![1.0, 0.0, -1.0]));
        let y = tape.linear(w, x, Some(b));
        assert_eq!(tape.value(y).data(), &[1.0 - 3.0 + 0.5, 4.0 - 6.0 - 0.5]);
    }

    #[test]
    fn matmul_gradient_matches_transpose_rule() {
        let (set, ids) = param_set_with(&[
            ("a", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0])),
            ("b", Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0])),
        ]);
        let mut tape = Tape::new();
        let a = tape.param(&set, ids[0]);
        let b = tape.param(&set, ids[1]);
        let c = tape.matmul(a, b);
        let loss = tape.sum(c);
        let grads = tape.backward(loss, &set);
        // d(sum(AB))/dA = 1 * B^T, row sums of B.
        assert_eq!(grads.get(ids[0]).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.get(ids[1]).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn shared_parameter_accumulates_gradient() {
        let (set, ids) = param_set_with(&[("w", Tensor::vector(vec![2.0]))]);
        let mut tape = Tape::new();
        let w1 = tape.param(&set, ids[0]);
        let w2 = tape.param(&set, ids[0]);
        assert_eq!(w1, w2, "param leaves are memoized");
        let doubled = tape.add(w1, w2);
        let loss = tape.sum(doubled);
        let grads = tape.backward(loss, &set);
        assert_eq!(grads.get(ids[0]).unwrap().data(), &[2.0]);
    }

    #[test]
    fn log_softmax_nll_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::vector(vec![0.3; 6]));
        let loss = tape.log_softmax_nll(logits, 2);
        assert!((tape.value(loss).item() - 6.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_spot_values() {
        let mut tape = Tape::new();
        let pred = tape.constant(Tensor::vector(vec![0.5, 0.0]));
        let loss = tape.smooth_l1(pred, &[0.0, 0.0]);
        assert!((tape.value(loss).item() - 0.125).abs() < 1e-15);

        let pred = tape.constant(Tensor::vector(vec![2.0, 0.0]));
        let loss = tape.smooth_l1(pred, &[0.0, 0.0]);
        assert!((tape.value(loss).item() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn smooth_l1_derivative_is_continuous_at_the_kink() {
        // sign-adjusted slopes straddling |x| = 1 are all 1
        let (set, ids) = param_set_with(&[("p", Tensor::vector(vec![1.0]))]);
        for delta in [-1e-9, 0.0, 1e-9] {
            let mut set = set.clone();
            set.get_mut(ids[0]).data_mut()[0] = 1.0 + delta;
            let mut tape = Tape::new();
            let p = tape.param(&set, ids[0]);
            let loss = tape.smooth_l1(p, &[0.0]);
            let grads = tape.backward(loss, &set);
            let g = grads.get(ids[0]).unwrap().data()[0];
            assert!((g - 1.0).abs() < 1e-8, "slope {g} at offset {delta}");
        }
    }

    #[test]
    fn max_pool_routes_gradient_to_earliest_argmax_on_ties() {
        let (set, ids) = param_set_with(&[(
            "m",
            Tensor::matrix(1, 4, vec![3.0, 3.0, 1.0, 2.0]),
        )]);
        let mut tape = Tape::new();
        let m = tape.param(&set, ids[0]);
        let pooled = tape.segment_pool_cols(m, &[(0, 3)], PoolMethod::Max);
        let loss = tape.sum(pooled);
        let grads = tape.backward(loss, &set);
        assert_eq!(grads.get(ids[0]).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn conv2d_output_extent_matches_formula() {
        assert_eq!(conv_out_extent(129, 3, 2, 1), Some(65));
        assert_eq!(conv_out_extent(9, 3, 2, 1), Some(5));
        assert_eq!(conv_out_extent(1, 3, 1, 0), None);
        assert_eq!(conv_out_extent(5, 3, 2, 0), Some(2));
    }

    // literal definition of the convolution, quadruple loop
    fn conv_reference(
        x: &Tensor,
        w: &Tensor,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Tensor {
        let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let oh = conv_out_extent(h, kh, stride.0, pad.0).unwrap();
        let ow = conv_out_extent(wd, kw, stride.1, pad.1).unwrap();
        let mut out = Tensor::zeros(&[co, oh, ow]);
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let ih = (y * stride.0 + i) as isize - pad.0 as isize;
                                let iw = (xo * stride.1 + j) as isize - pad.1 as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                    continue;
                                }
                                acc += x.at3(c, ih as usize, iw as usize)
                                    * w.data()[((o * ci + c) * kh + i) * kw + j];
                            }
                        }
                    }
                    out.set3(o, y, xo, acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_the_literal_definition() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for case in 0..40 {
            let ci = rng.random_range(1..4);
            let co = rng.random_range(1..4);
            let kh = rng.random_range(1..4);
            let kw = rng.random_range(1..4);
            let stride = (rng.random_range(1..3), rng.random_range(1..3));
            let pad = (rng.random_range(0..2), rng.random_range(0..2));
            let h = rng.random_range(kh.max(3)..12);
            let wd = rng.random_range(kw.max(3)..12);
            let x_t = crate::nn::init::uniform_fan_in(&mut rng, 1, &[ci, h, wd]);
            let w_t = crate::nn::init::uniform_fan_in(&mut rng, ci * kh * kw, &[co, ci, kh, kw]);
            if conv_out_extent(h, kh, stride.0, pad.0).is_none()
                || conv_out_extent(wd, kw, stride.1, pad.1).is_none()
            {
                continue;
            }
            let expected = conv_reference(&x_t, &w_t, stride, pad);
            let mut tape = Tape::new();
            let x = tape.constant(x_t);
            let w = tape.constant(w_t);
            let y = tape.conv2d(x, w, None, stride, pad);
            assert_eq!(tape.value(y).shape(), expected.shape(), "case {case}");
            for (a, b) in tape.value(y).data().iter().zip(expected.data()) {
                assert!((a - b).abs() < 1e-12, "case {case}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences_across_geometries() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for (stride, pad) in [((1, 1), (0, 0)), ((1, 1), (1, 1)), ((2, 1), (1, 1)), ((2, 2), (1, 0))]
        {
            let (mut set, ids) = {
                let mut s = ParamSet::new();
                let x = s.insert("x", crate::nn::init::uniform_fan_in(&mut rng, 1, &[2, 7, 6]));
                let w = s.insert("w", crate::nn::init::uniform_fan_in(&mut rng, 18, &[3, 2, 3, 3]));
                let b = s.insert("b", crate::nn::init::uniform_fan_in(&mut rng, 1, &[3]));
                (s, [x, w, b])
            };
            let run = |set: &ParamSet| {
                let mut tape = Tape::new();
                let x = tape.param(set, ids[0]);
                let w = tape.param(set, ids[1]);
                let b = tape.param(set, ids[2]);
                let y = tape.conv2d(x, w, Some(b), stride, pad);
                tape.sum(y)
            };
            let grads = {
                let mut tape = Tape::new();
                let x = tape.param(&set, ids[0]);
                let w = tape.param(&set, ids[1]);
                let b = tape.param(&set, ids[2]);
                let y = tape.conv2d(x, w, Some(b), stride, pad);
                let root = tape.sum(y);
                tape.backward(root, &set)
            };
            let report = crate::nn::gradcheck::check_gradients(
                &set,
                &ids,
                &grads,
                |s| {
                    let mut tape = Tape::new();
                    let x = tape.param(s, ids[0]);
                    let w = tape.param(s, ids[1]);
                    let b = tape.param(s, ids[2]);
                    let y = tape.conv2d(x, w, Some(b), stride, pad);
                    let root = tape.sum(y);
                    tape.value(root).item()
                },
                30,
                1e-5,
                5,
            );
            let _ = run;
            let _ = &mut set;
            assert!(
                report.max_relative_error < 1e-6,
                "stride {stride:?} pad {pad:?}: {report:?}"
            );
        }
    }

    #[test]
    fn conv2d_known_values() {
        // 1x3x3 input, identity-ish 1x1 kernel scaled by 2
        let (set, ids) = param_set_with(&[(
            "w",
            Tensor::new(vec![1, 1, 1, 1], vec![2.0]),
        )]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(
            vec![1, 3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        ));
        let w = tape.param(&set, ids[0]);
        let y = tape.conv2d(x, w, None, (1, 1), (0, 0));
        assert_eq!(tape.value(y).shape(), &[1, 3, 3]);
        assert_eq!(tape.value(y).data()[4], 10.0);
    }
}
