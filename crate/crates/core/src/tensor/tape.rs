use rand::Rng;

use super::kernels::gemm;
use super::{ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Temporal down-sampling rule for [`Tape::pool2`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    ClampMin(Var, f64),
    Sum(Var),
    SoftmaxRows(Var),
    ConcatCols(Var, Var),
    Reshape(Var),
    NodeMix {
        mix: Var,
        x: Var,
        nodes: usize,
    },
    PermuteFrames {
        x: Var,
        frames: usize,
        a: usize,
        b: usize,
    },
    AdaptiveAvgPool(Var),
    CausalConv {
        x: Var,
        kernel: Var,
        dilation: usize,
    },
    Pool2 {
        x: Var,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    NormRelu {
        x: Var,
        eps: f64,
        argmax: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Lstm {
        gates_in: Var,
        w_hh: Var,
        cache: LstmCache,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
    },
    PadRows {
        x: Var,
        rows_in: usize,
    },
    TrimRows(Var),
}

struct LstmCache {
    hidden: usize,
    /// Activated gates per step, `[i, f, g, o]` blocks of width `hidden`.
    gates: Vec<f64>,
    cells: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Append-only record of executed differentiable operations.
///
/// Single-threaded by construction; build one tape per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward pass: gradients of every grad-requiring leaf and,
/// summed over all of their uses, of every parameter seen on the tape.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient of a leaf. `None` for constants and for leaves the loss does
    /// not depend on.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    /// Parameter gradients in ascending parameter order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(p, g)| (*p, g))
    }

    /// Adds another pass's parameter gradients into this one.
    pub fn accumulate_params(&mut self, other: &Gradients) {
        for (id, g) in &other.params {
            match self.params.iter_mut().find(|(p, _)| p == id) {
                Some((_, acc)) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b),
                None => self.params.push((*id, g.clone())),
            }
        }
        self.params.sort_by_key(|(p, _)| *p);
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

/// Bin boundaries of adaptive average pooling from `len` to `out` columns.
pub(crate) fn adaptive_bins(len: usize, out: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..out).map(move |i| ((i * len) / out, ((i + 1) * len).div_ceil(out)))
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
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input. `requires_grad` leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a copy of a stored parameter as a grad-requiring leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.leaf(store.get(id).clone(), true);
        self.nodes[v.0].param = Some(id);
        v
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&[m, n], out), Op::MatMul(a, b), rg)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        Tensor::new(
            ta.shape(),
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// `x[m x n] + bias[n]`, broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (m, n) = self.dims2(x);
        assert_eq!(self.value(bias).len(), n, "bias width");
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
        }
        let rg = self.rg(&[x, bias]);
        self.push(Tensor::new(&[m, n], out), Op::AddBias(x, bias), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        let rg = self.rg(&[x]);
        self.push(v, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|z| z.max(0.0));
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::abs);
        let rg = self.rg(&[x]);
        self.push(v, Op::Abs(x), rg)
    }

    /// `max(x, floor)` elementwise; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let v = self.value(x).map(|z| z.max(floor));
        let rg = self.rg(&[x]);
        self.push(v, Op::ClampMin(x, floor), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.dims2(x);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[m, n], out), Op::SoftmaxRows(x), rg)
    }

    /// `[a | b]` for matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (m, p) = self.dims2(a);
        let (m2, q) = self.dims2(b);
        assert_eq!(m, m2, "concat row mismatch");
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(self.value(a).row(i));
            out.extend_from_slice(self.value(b).row(i));
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&[m, p + q], out), Op::ConcatCols(a, b), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshaped(shape);
        let rg = self.rg(&[x]);
        self.push(v, Op::Reshape(x), rg)
    }

    /// Per-frame node mixing: `x` holds `frames` blocks of `nodes x C` rows and
    /// each block is left-multiplied by the `nodes x nodes` matrix `mix`.
    pub fn node_mix(&mut self, mix: Var, x: Var, nodes: usize) -> Var {
        assert_eq!(self.dims2(mix), (nodes, nodes), "mix must be nodes x nodes");
        let (rows, c) = self.dims2(x);
        assert_eq!(rows % nodes, 0, "rows {rows} not a multiple of {nodes} nodes");
        let mut out = vec![0.0; rows * c];
        let (mv, xv) = (self.value(mix).data(), self.value(x).data());
        for (o, xb) in out.chunks_mut(nodes * c).zip(xv.chunks(nodes * c)) {
            gemm(nodes, nodes, c, mv, false, xb, false, o, false);
        }
        let rg = self.rg(&[mix, x]);
        self.push(Tensor::new(&[rows, c], out), Op::NodeMix { mix, x, nodes }, rg)
    }

    /// Reinterprets `x` (`frames x (a*b)`) as `frames x a x b` and swaps the
    /// inner axes, yielding `frames x (b*a)`.
    pub fn permute_frames(&mut self, x: Var, frames: usize, a: usize, b: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), frames * a * b, "permute_frames size");
        let out = permute_inner(xv.data(), frames, a, b);
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[frames, a * b], out), Op::PermuteFrames { x, frames, a, b }, rg)
    }

    /// Adaptive average pooling over columns: `m x len -> m x out`.
    pub fn adaptive_avg_pool(&mut self, x: Var, out: usize) -> Var {
        let (m, len) = self.dims2(x);
        assert!(out >= 1 && out <= len, "adaptive pool {len} -> {out}");
        let xv = self.value(x).data();
        let mut res = vec![0.0; m * out];
        for r in 0..m {
            let row = &xv[r * len..(r + 1) * len];
            for (i, (s, e)) in adaptive_bins(len, out).enumerate() {
                res[r * out + i] = row[s..e].iter().sum::<f64>() / (e - s) as f64;
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[m, out], res), Op::AdaptiveAvgPool(x), rg)
    }

    /// Causal dilated convolution over time.
    ///
    /// `x` is `T x C_in`, `kernel` is `k x C_in x C_out` stored as
    /// `(k * C_in) x C_out`. Output row `t` is
    /// `sum_j x[t - (k-1-j) * dilation] * K[j]` with reads before frame 0 as
    /// zero, so the sequence length is preserved.
    pub fn causal_conv(&mut self, x: Var, kernel: Var, dilation: usize) -> Var {
        assert!(dilation >= 1);
        let (t, cin) = self.dims2(x);
        let (kc, cout) = self.dims2(kernel);
        assert_eq!(kc % cin, 0, "kernel rows {kc} not a multiple of C_in {cin}");
        let k = kc / cin;
        let mut out = vec![0.0; t * cout];
        let (xv, kv) = (self.value(x).data(), self.value(kernel).data());
        for j in 0..k {
            let shift = (k - 1 - j) * dilation;
            if shift >= t {
                continue;
            }
            let rows = t - shift;
            gemm(
                rows,
                cin,
                cout,
                &xv[..rows * cin],
                false,
                &kv[j * cin * cout..(j + 1) * cin * cout],
                false,
                &mut out[shift * cout..],
                true,
            );
        }
        let rg = self.rg(&[x, kernel]);
        self.push(Tensor::new(&[t, cout], out), Op::CausalConv { x, kernel, dilation }, rg)
    }

    /// Stride-2 pooling over time; `T` must be even.
    pub fn pool2(&mut self, x: Var, kind: PoolKind) -> Var {
        let (t, c) = self.dims2(x);
        assert_eq!(t % 2, 0, "pool2 needs an even length, got {t}");
        let xv = self.value(x).data();
        let mut out = vec![0.0; t / 2 * c];
        let mut argmax = Vec::new();
        if kind == PoolKind::Max {
            argmax = vec![0; t / 2 * c];
        }
        for i in 0..t / 2 {
            for ch in 0..c {
                let (a, b) = (xv[2 * i * c + ch], xv[(2 * i + 1) * c + ch]);
                out[i * c + ch] = match kind {
                    PoolKind::Max => {
                        // ties go to the earlier frame
                        let pick = if b > a { 2 * i + 1 } else { 2 * i };
                        argmax[i * c + ch] = pick;
                        a.max(b)
                    }
                    PoolKind::Avg => 0.5 * (a + b),
                };
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[t / 2, c], out), Op::Pool2 { x, kind, argmax }, rg)
    }

    /// Nearest-neighbour upsampling over time: every row is repeated twice.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (t, c) = self.dims2(x);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(2 * t * c);
        for i in 0..t {
            let row = &xv[i * c..(i + 1) * c];
            out.extend_from_slice(row);
            out.extend_from_slice(row);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[2 * t, c], out), Op::Upsample2(x), rg)
    }

    /// ReLU followed by division of each row by `(row max + eps)`.
    pub fn norm_relu(&mut self, x: Var, eps: f64) -> Var {
        let (t, c) = self.dims2(x);
        let xv = self.value(x).data();
        let mut out = vec![0.0; t * c];
        let mut argmax = vec![0; t];
        for i in 0..t {
            let row = &xv[i * c..(i + 1) * c];
            let (mut best, mut m) = (0, row[0].max(0.0));
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v.max(0.0) > m {
                    best = j;
                    m = v.max(0.0);
                }
            }
            argmax[i] = best;
            let s = m + eps;
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = v.max(0.0) / s;
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[t, c], out), Op::NormRelu { x, eps, argmax }, rg)
    }

    /// Inverted dropout: zeroes each entry with probability `p` and scales the
    /// survivors by `1 / (1 - p)`. Callers skip this op at evaluation time.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout probability {p}");
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let v = Tensor::new(
            self.shape(x),
            self.value(x).data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        );
        let rg = self.rg(&[x]);
        self.push(v, Op::Dropout { x, mask }, rg)
    }

    /// One unidirectional LSTM layer from zero initial state.
    ///
    /// `gates_in` (`T x 4H`) holds the input projection plus bias, in gate
    /// order input, forget, cell, output. `w_hh` is `H x 4H`. Returns the
    /// hidden sequence `T x H`.
    pub fn lstm(&mut self, gates_in: Var, w_hh: Var) -> Var {
        let (t, h4) = self.dims2(gates_in);
        let (h, h4b) = self.dims2(w_hh);
        assert_eq!(h4, 4 * h, "gates_in width must be 4H");
        assert_eq!(h4b, 4 * h, "w_hh must be H x 4H");
        let gx = self.value(gates_in).data();
        let w = self.value(w_hh).data();
        let mut hs = vec![0.0; t * h];
        let mut cells = vec![0.0; t * h];
        let mut gates = vec![0.0; t * h4];
        let mut pre = vec![0.0; h4];
        for s in 0..t {
            pre.copy_from_slice(&gx[s * h4..(s + 1) * h4]);
            if s > 0 {
                gemm(1, h, h4, &hs[(s - 1) * h..s * h], false, w, false, &mut pre, true);
            }
            let g = &mut gates[s * h4..(s + 1) * h4];
            for u in 0..h {
                let i_g = sigmoid(pre[u]);
                let f_g = sigmoid(pre[h + u]);
                let c_g = pre[2 * h + u].tanh();
                let o_g = sigmoid(pre[3 * h + u]);
                g[u] = i_g;
                g[h + u] = f_g;
                g[2 * h + u] = c_g;
                g[3 * h + u] = o_g;
                let c_prev = if s > 0 { cells[(s - 1) * h + u] } else { 0.0 };
                let c = f_g * c_prev + i_g * c_g;
                cells[s * h + u] = c;
                hs[s * h + u] = o_g * c.tanh();
            }
        }
        let rg = self.rg(&[gates_in, w_hh]);
        self.push(
            Tensor::new(&[t, h], hs),
            Op::Lstm {
                gates_in,
                w_hh,
                cache: LstmCache {
                    hidden: h,
                    gates,
                    cells,
                },
            },
            rg,
        )
    }

    /// Sum over unmasked rows of `-log softmax(logits_t)[label_t]`.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize], mask: &[bool]) -> Var {
        let (t, cl) = self.dims2(logits);
        assert_eq!(labels.len(), t, "labels length");
        assert_eq!(mask.len(), t, "mask length");
        let lv = self.value(logits).data();
        let mut probs = lv.to_vec();
        let mut total = 0.0;
        for (r, row) in probs.chunks_mut(cl).enumerate() {
            let lse = log_sum_exp(row);
            if mask[r] {
                assert!(labels[r] < cl, "label {} out of range for {cl} classes", labels[r]);
                total += lse - row[labels[r]];
            }
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(total),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Appends rows filled with `value` until the matrix has `rows` rows.
    pub fn pad_rows(&mut self, x: Var, rows: usize, value: f64) -> Var {
        let (t, c) = self.dims2(x);
        assert!(rows >= t);
        let mut out = self.value(x).data().to_vec();
        out.resize(rows * c, value);
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[rows, c], out), Op::PadRows { x, rows_in: t }, rg)
    }

    /// Keeps the first `rows` rows.
    pub fn trim_rows(&mut self, x: Var, rows: usize) -> Var {
        let (t, c) = self.dims2(x);
        assert!(rows <= t);
        let out = self.value(x).data()[..rows * c].to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[rows, c], out), Op::TrimRows(x), rg)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Panics when `loss` is not a one-element tensor.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.value(loss).len(),
            1,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    leaves[i] = Some(Tensor::new(node.value.shape(), g));
                }
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        let mut params: Vec<(ParamId, Tensor)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let (Some(id), Some(g)) = (node.param, leaves[i].as_ref()) else {
                continue;
            };
            match params.iter_mut().find(|(p, _)| *p == id) {
                Some((_, acc)) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b),
                None => params.push((id, g.clone())),
            }
        }
        params.sort_by_key(|(p, _)| *p);
        Gradients { leaves, params }
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let len = |v: Var| self.nodes[v.0].value.len();
        // Lazily allocated accumulation buffer for a parent, or None when the
        // parent does not need a gradient.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len(v)]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.dims2(*b).1;
                if let Some(da) = acc!(*a) {
                    gemm(m, n, k, g, false, val(*b), true, da, true);
                }
                if let Some(db) = acc!(*b) {
                    gemm(k, m, n, val(*a), true, g, false, db, true);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = acc!(v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = acc!(*a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = acc!(*b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                if let Some(d) = acc!(*a) {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(val(*b)) {
                        *d += g * y;
                    }
                }
                if let Some(d) = acc!(*b) {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(val(*a)) {
                        *d += g * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(d) = acc!(*a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g * s);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(d) = acc!(*x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = acc!(*b) {
                    let n = db.len();
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(d) = acc!(*x) {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(node.value.data()) {
                        *d += g * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(d) = acc!(*x) {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(node.value.data()) {
                        *d += g * y * (1.0 - y);
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(d) = acc!(*x) {
                    for ((d, g), xv) in d.iter_mut().zip(g).zip(val(*x)) {
                        if *xv > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            Op::Abs(x) => {
                if let Some(d) = acc!(*x) {
                    for ((d, g), xv) in d.iter_mut().zip(g).zip(val(*x)) {
                        if *xv > 0.0 {
                            *d += g;
                        } else if *xv < 0.0 {
                            *d -= g;
                        }
                    }
                }
            }
            Op::ClampMin(x, floor) => {
                if let Some(d) = acc!(*x) {
                    for ((d, g), xv) in d.iter_mut().zip(g).zip(val(*x)) {
                        if *xv > *floor {
                            *d += g;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = acc!(*x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SoftmaxRows(x) => {
                if let Some(d) = acc!(*x) {
                    let n = node.value.cols();
                    for ((d, g), y) in d.chunks_mut(n).zip(g.chunks(n)).zip(node.value.data().chunks(n)) {
                        let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            d[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let p = self.dims2(*a).1;
                let q = self.dims2(*b).1;
                if let Some(d) = acc!(*a) {
                    for (d, g) in d.chunks_mut(p).zip(g.chunks(p + q)) {
                        d.iter_mut().zip(&g[..p]).for_each(|(d, g)| *d += g);
                    }
                }
                if let Some(d) = acc!(*b) {
                    for (d, g) in d.chunks_mut(q).zip(g.chunks(p + q)) {
                        d.iter_mut().zip(&g[p..]).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = acc!(*x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::NodeMix { mix, x, nodes } => {
                let nodes = *nodes;
                let c = self.dims2(*x).1;
                let block = nodes * c;
                if let Some(dx) = acc!(*x) {
                    let mv = val(*mix);
                    for (d, gb) in dx.chunks_mut(block).zip(g.chunks(block)) {
                        gemm(nodes, nodes, c, mv, true, gb, false, d, true);
                    }
                }
                if let Some(dm) = acc!(*mix) {
                    let xv = val(*x);
                    for (gb, xb) in g.chunks(block).zip(xv.chunks(block)) {
                        gemm(nodes, c, nodes, gb, false, xb, true, dm, true);
                    }
                }
            }
            Op::PermuteFrames { x, frames, a, b } => {
                if let Some(d) = acc!(*x) {
                    let back = permute_inner(g, *frames, *b, *a);
                    d.iter_mut().zip(&back).for_each(|(d, g)| *d += g);
                }
            }
            Op::AdaptiveAvgPool(x) => {
                if let Some(d) = acc!(*x) {
                    let (m, l) = self.dims2(*x);
                    let out = node.value.cols();
                    for r in 0..m {
                        for (i, (s, e)) in adaptive_bins(l, out).enumerate() {
                            let share = g[r * out + i] / (e - s) as f64;
                            d[r * l + s..r * l + e].iter_mut().for_each(|d| *d += share);
                        }
                    }
                }
            }
            Op::CausalConv { x, kernel, dilation } => {
                let (t, cin) = self.dims2(*x);
                let (kc, cout) = self.dims2(*kernel);
                let k = kc / cin;
                if let Some(dx) = acc!(*x) {
                    let kv = val(*kernel);
                    for j in 0..k {
                        let shift = (k - 1 - j) * dilation;
                        if shift >= t {
                            continue;
                        }
                        let rows = t - shift;
                        gemm(
                            rows,
                            cout,
                            cin,
                            &g[shift * cout..],
                            false,
                            &kv[j * cin * cout..(j + 1) * cin * cout],
                            true,
                            &mut dx[..rows * cin],
                            true,
                        );
                    }
                }
                if let Some(dk) = acc!(*kernel) {
                    let xv = val(*x);
                    for j in 0..k {
                        let shift = (k - 1 - j) * dilation;
                        if shift >= t {
                            continue;
                        }
                        let rows = t - shift;
                        gemm(
                            cin,
                            rows,
                            cout,
                            &xv[..rows * cin],
                            true,
                            &g[shift * cout..],
                            false,
                            &mut dk[j * cin * cout..(j + 1) * cin * cout],
                            true,
                        );
                    }
                }
            }
            Op::Pool2 { x, kind, argmax } => {
                if let Some(d) = acc!(*x) {
                    let c = node.value.cols();
                    for (idx, gv) in g.iter().enumerate() {
                        let (i, ch) = (idx / c, idx % c);
                        match kind {
                            PoolKind::Max => d[argmax[idx] * c + ch] += gv,
                            PoolKind::Avg => {
                                d[2 * i * c + ch] += 0.5 * gv;
                                d[(2 * i + 1) * c + ch] += 0.5 * gv;
                            }
                        }
                    }
                }
            }
            Op::Upsample2(x) => {
                if let Some(d) = acc!(*x) {
                    let c = node.value.cols();
                    for (i, drow) in d.chunks_mut(c).enumerate() {
                        let (g0, g1) = (&g[2 * i * c..(2 * i + 1) * c], &g[(2 * i + 1) * c..(2 * i + 2) * c]);
                        for ((d, a), b) in drow.iter_mut().zip(g0).zip(g1) {
                            *d += a + b;
                        }
                    }
                }
            }
            Op::NormRelu { x, eps, argmax } => {
                if let Some(d) = acc!(*x) {
                    let c = node.value.cols();
                    let xv = val(*x);
                    for (i, ((drow, grow), xrow)) in d
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(xv.chunks(c))
                        .enumerate()
                    {
                        let m = xrow[argmax[i]].max(0.0);
                        let s = m + eps;
                        // d/dr_j of r_j / s, plus the shared dependence on the max
                        let mut dr: Vec<f64> = grow.iter().map(|gv| gv / s).collect();
                        if m > 0.0 {
                            let cross: f64 = grow.iter().zip(xrow).map(|(gv, xv)| gv * xv.max(0.0)).sum();
                            dr[argmax[i]] -= cross / (s * s);
                        }
                        for ((dv, r), xv) in drow.iter_mut().zip(dr).zip(xrow) {
                            if *xv > 0.0 {
                                *dv += r;
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(d) = acc!(*x) {
                    for ((d, g), m) in d.iter_mut().zip(g).zip(mask) {
                        *d += g * m;
                    }
                }
            }
            Op::Lstm { gates_in, w_hh, cache } => {
                self.lstm_backward(node, *gates_in, *w_hh, cache, g, grads);
            }
            Op::SoftmaxXent {
                logits,
                labels,
                mask,
                probs,
            } => {
                if let Some(d) = acc!(*logits) {
                    let cl = self.dims2(*logits).1;
                    for (r, (drow, prow)) in d.chunks_mut(cl).zip(probs.chunks(cl)).enumerate() {
                        if !mask[r] {
                            continue;
                        }
                        for (j, (dv, p)) in drow.iter_mut().zip(prow).enumerate() {
                            let onehot = if j == labels[r] { 1.0 } else { 0.0 };
                            *dv += g[0] * (p - onehot);
                        }
                    }
                }
            }
            Op::PadRows { x, rows_in } => {
                if let Some(d) = acc!(*x) {
                    let c = node.value.cols();
                    d.iter_mut().zip(&g[..rows_in * c]).for_each(|(d, g)| *d += g);
                }
            }
            Op::TrimRows(x) => {
                if let Some(d) = acc!(*x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
        }
    }

    fn lstm_backward(
        &self,
        node: &Node,
        gates_in: Var,
        w_hh: Var,
        cache: &LstmCache,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let h = cache.hidden;
        let h4 = 4 * h;
        let t = node.value.rows();
        let hs = node.value.data();
        let w = self.nodes[w_hh.0].value.data();
        // Pre-activation gradients for every step.
        let mut da = vec![0.0; t * h4];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        for s in (0..t).rev() {
            let gates = &cache.gates[s * h4..(s + 1) * h4];
            let da_s = &mut da[s * h4..(s + 1) * h4];
            for u in 0..h {
                let (i_g, f_g, c_g, o_g) = (gates[u], gates[h + u], gates[2 * h + u], gates[3 * h + u]);
                let c = cache.cells[s * h + u];
                let c_prev = if s > 0 { cache.cells[(s - 1) * h + u] } else { 0.0 };
                let tc = c.tanh();
                let dh = g[s * h + u] + dh_next[u];
                let d_o = dh * tc;
                let dc = dh * o_g * (1.0 - tc * tc) + dc_next[u];
                dc_next[u] = dc * f_g;
                da_s[u] = dc * c_g * i_g * (1.0 - i_g);
                da_s[h + u] = dc * c_prev * f_g * (1.0 - f_g);
                da_s[2 * h + u] = dc * i_g * (1.0 - c_g * c_g);
                da_s[3 * h + u] = d_o * o_g * (1.0 - o_g);
            }
            if s > 0 {
                gemm(1, h4, h, da_s, false, w, true, &mut dh_next, false);
            }
        }
        if self.nodes[gates_in.0].requires_grad {
            let d = grads[gates_in.0].get_or_insert_with(|| vec![0.0; t * h4]);
            d.iter_mut().zip(&da).for_each(|(d, g)| *d += g);
        }
        if self.nodes[w_hh.0].requires_grad && t > 1 {
            let d = grads[w_hh.0].get_or_insert_with(|| vec![0.0; h * h4]);
            // dW = H_prev^T * dA with H_prev the hidden states shifted by one step
            gemm(h, t - 1, h4, &hs[..(t - 1) * h], true, &da[h4..], false, d, true);
        } else if self.nodes[w_hh.0].requires_grad {
            grads[w_hh.0].get_or_insert_with(|| vec![0.0; h * h4]);
        }
    }
}

fn permute_inner(src: &[f64], frames: usize, a: usize, b: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for f in 0..frames {
        let base = f * a * b;
        for i in 0..a {
            for j in 0..b {
                out[base + j * a + i] = src[base + i * b + j];
            }
        }
    }
    out
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}
