use super::gemm::{gemm_a_bt_acc, gemm_acc, gemm_at_b_acc};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Batch-norm variance floor.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch statistic in the running estimates.
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Softmax(Var),
    Sum(Var),
    Reshape(Var),
    MeanNodes(Var),
    SliceLast {
        x: Var,
        start: usize,
    },
    ConcatLast(Vec<Var>),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        offsets: Vec<isize>,
    },
    NodeMix {
        mat: Var,
        x: Var,
        transposed: bool,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Lstm(Box<LstmRecord>),
    CrossEntropy {
        p: Var,
        labels: Vec<usize>,
        floor: f64,
    },
    Tmse {
        p: Var,
        tau: f64,
        floor: f64,
        detach_prev: bool,
    },
}

#[derive(Debug)]
struct LstmRecord {
    x: Var,
    w_ih: Var,
    w_hh: Var,
    b_ih: Var,
    b_hh: Var,
    reverse: bool,
    hidden: usize,
    // per processed step: [i, j, g, o] activations (4H), cell state, tanh(cell)
    gates: Vec<f64>,
    cells: Vec<f64>,
    tanh_cells: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Ordered record of executed operations. Values are computed eagerly on
/// push; [`Tape::backward`] walks the record once in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
    kink_gap: Option<f64>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// Tap offsets of a dilated temporal kernel. Causal taps reach `t - d·i`;
/// acausal taps are centred on `t`.
pub(crate) fn tap_offsets(kernel: usize, dilation: usize, causal: bool) -> Vec<isize> {
    let d = dilation as isize;
    let half = (kernel as isize - 1) / 2;
    (0..kernel as isize)
        .map(|i| if causal { -d * i } else { d * (i - half) })
        .collect()
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

    /// Smallest distance from any non-differentiable point seen so far:
    /// ReLU inputs from zero, and log-probabilities from the clamp floor and
    /// the smoothing truncation. Infinite when no such op was recorded.
    pub fn kink_gap(&self) -> f64 {
        self.kink_gap.unwrap_or(f64::INFINITY)
    }

    fn note_kink(&mut self, gap: f64) {
        self.kink_gap = Some(self.kink_gap().min(gap));
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`, if `v`
    /// is a leaf that participates in the result.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that does not receive a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// A leaf whose gradient is kept on the tape.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// A leaf bound to a stored parameter; its gradient accumulates into the
    /// store on backward.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(Op::Param(id), store.value(id).clone(), true)
    }

    /// `[.., k] × [k, n] -> [.., n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::MatMul(a, b), out, ng))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Add(a, b), out, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Sub(a, b), out, ng))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Mul(a, b), out, ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(Op::Scale(a, s), out, ng)
    }

    /// Adds a `[C]` bias to every row of a `[.., C]` tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let c = tx.last_dim();
        if tb.shape() != [c] {
            return Err(dim_err("add_bias", tx, tb));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(tb.data()) {
                *v += bv;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(Op::AddBias(x, b), out, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let gap = self.value(x).data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        self.note_kink(gap);
        let ng = self.ng(x);
        self.push(Op::Relu(x), out, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(Op::Sigmoid(x), out, ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let ng = self.ng(x);
        self.push(Op::Tanh(x), out, ng)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if let Some(bad) = tx.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive argument {bad}"),
            });
        }
        let out = tx.map(f64::ln);
        let ng = self.ng(x);
        Ok(self.push(Op::Log(x), out, ng))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        let ng = self.ng(x);
        self.push(Op::Softmax(x), out, ng)
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(Op::Sum(x), out, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(Op::Reshape(x), out, ng))
    }

    /// Mean over the node axis of a `[T, N, C]` tensor.
    pub fn mean_nodes(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() != 3 {
            return Err(Error::Shape {
                shape: tx.shape().to_vec(),
                reason: "mean_nodes expects [T, N, C]".into(),
            });
        }
        let (t, n, c) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let mut out = vec![0.0; t * c];
        for ti in 0..t {
            let o = &mut out[ti * c..(ti + 1) * c];
            for ni in 0..n {
                let base = (ti * n + ni) * c;
                for (ov, xv) in o.iter_mut().zip(&tx.data()[base..base + c]) {
                    *ov += xv;
                }
            }
            o.iter_mut().for_each(|v| *v /= n as f64);
        }
        let out = Tensor::new(&[t, c], out)?;
        let ng = self.ng(x);
        Ok(self.push(Op::MeanNodes(x), out, ng))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.last_dim();
        if len == 0 || start + len > c {
            return Err(Error::Shape {
                shape: tx.shape().to_vec(),
                reason: format!("slice {start}..{} out of range", start + len),
            });
        }
        let data = tx
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(&shape, data)?;
        let ng = self.ng(x);
        Ok(self.push(Op::SliceLast { x, start }, out, ng))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let lead = &first.shape()[..first.ndim() - 1];
        for &p in &parts[1..] {
            let tp = self.value(p);
            if &tp.shape()[..tp.ndim() - 1] != lead {
                return Err(dim_err("concat_last", first, tp));
            }
        }
        let rows = first.rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let out = Tensor::new(&shape, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Op::ConcatLast(parts.to_vec()), out, ng))
    }

    /// Dilated temporal convolution along axis 0 of `[T, .., C_in]` with
    /// kernel `w: [k, C_in, C_out]` and bias `b: [C_out]`. Taps that fall
    /// outside `[0, T)` read zero; the output keeps length `T`. Middle axes
    /// (nodes) share the kernel.
    pub fn dilated_conv(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        dilation: usize,
        causal: bool,
    ) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tw.ndim() != 3 || tw.shape()[1] != tx.last_dim() {
            return Err(dim_err("dilated_conv", tx, tw));
        }
        let (k, cin, cout) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        if tb.shape() != [cout] {
            return Err(dim_err("dilated_conv bias", tw, tb));
        }
        if !causal && k % 2 == 0 {
            return Err(Error::Config(format!(
                "acausal convolution needs an odd kernel, got {k}"
            )));
        }
        if dilation == 0 {
            return Err(Error::Config("dilation must be at least 1".into()));
        }
        let t = tx.shape()[0];
        let m = tx.len() / (t * cin);
        let offsets = tap_offsets(k, dilation, causal);
        let mut out = vec![0.0; t * m * cout];
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(tb.data());
        }
        for (i, &o) in offsets.iter().enumerate() {
            let Some((t0, t1)) = valid_range(t, o) else { continue };
            let src = ((t0 as isize + o) as usize) * m * cin;
            let rows = (t1 - t0) * m;
            gemm_acc(
                &tx.data()[src..src + rows * cin],
                &tw.data()[i * cin * cout..(i + 1) * cin * cout],
                &mut out[t0 * m * cout..t1 * m * cout],
                rows,
                cin,
                cout,
            );
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let out = Tensor::new(&shape, out)?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(Op::Conv { x, w, b, offsets }, out, ng))
    }

    /// Per-sample node propagation of `x: [T, N, C]` by `mat: [N, N]`:
    /// `out[t] = mat · x[t]`, or `matᵀ · x[t]` when `transposed`.
    pub fn node_mix(&mut self, mat: Var, x: Var, transposed: bool) -> Result<Var> {
        let (tm, tx) = (self.value(mat), self.value(x));
        if tx.ndim() != 3 || tm.shape() != [tx.shape()[1], tx.shape()[1]] {
            return Err(dim_err("node_mix", tm, tx));
        }
        let (t, n, c) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let eff = if transposed { tm.transpose() } else { tm.clone() };
        let mut out = vec![0.0; t * n * c];
        for ti in 0..t {
            let s = ti * n * c..(ti + 1) * n * c;
            gemm_acc(eff.data(), &tx.data()[s.clone()], &mut out[s], n, n, c);
        }
        let out = Tensor::new(tx.shape(), out)?;
        let ng = self.ng(mat) || self.ng(x);
        Ok(self.push(
            Op::NodeMix {
                mat,
                x,
                transposed,
            },
            out,
            ng,
        ))
    }

    /// Batch normalization over every axis but the last, using the statistics
    /// of this call. Returns the output together with the per-channel mean
    /// and biased variance so the caller can update running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let tx = self.value(x);
        let c = tx.last_dim();
        self.check_affine("batch_norm", x, gamma, beta)?;
        let rows = tx.rows() as f64;
        let mut mean = vec![0.0; c];
        for row in tx.data().chunks(c) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= rows);
        let mut var = vec![0.0; c];
        for row in tx.data().chunks(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= rows);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let v = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
            out,
            ng,
        );
        Ok((v, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
    ) -> Result<Var> {
        self.check_affine("batch_norm", x, gamma, beta)?;
        if mean.len() != self.value(x).last_dim() || var.len() != mean.len() {
            return Err(Error::Dimension {
                op: "batch_norm running stats",
                left: self.value(x).shape().to_vec(),
                right: vec![mean.len()],
            });
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, mean, &inv_std)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
            out,
            ng,
        ))
    }

    fn check_affine(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<()> {
        let c = self.value(x).last_dim();
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(dim_err(op, self.value(x), self.value(p)));
            }
        }
        Ok(())
    }

    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
    ) -> Result<(Tensor, Vec<f64>)> {
        let tx = self.value(x);
        let c = tx.last_dim();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(tx.len());
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(c) {
            for ci in 0..c {
                let h = (row[ci] - mean[ci]) * inv_std[ci];
                xhat.push(h);
                out.push(g[ci] * h + b[ci]);
            }
        }
        Ok((Tensor::new(tx.shape(), out)?, xhat))
    }

    /// One LSTM direction over a `[T, C_in]` sequence with zero initial
    /// state. Gate blocks in `w_ih: [C_in, 4H]`, `w_hh: [H, 4H]` and the two
    /// `[4H]` biases are ordered input, forget, candidate, output. With
    /// `reverse` the sequence is processed from `T-1` down to `0`; output row
    /// `t` always holds the hidden state produced at sample `t`.
    pub fn lstm(
        &mut self,
        x: Var,
        w_ih: Var,
        w_hh: Var,
        b_ih: Var,
        b_hh: Var,
        reverse: bool,
    ) -> Result<Var> {
        let (tx, twi, twh) = (self.value(x), self.value(w_ih), self.value(w_hh));
        if tx.ndim() != 2 || twi.ndim() != 2 || twi.shape()[0] != tx.shape()[1] {
            return Err(dim_err("lstm input weights", tx, twi));
        }
        let h4 = twi.shape()[1];
        if h4 % 4 != 0 {
            return Err(dim_err("lstm gate width", twi, twh));
        }
        let h = h4 / 4;
        if twh.shape() != [h, h4] {
            return Err(dim_err("lstm recurrent weights", twi, twh));
        }
        for b in [b_ih, b_hh] {
            if self.value(b).shape() != [h4] {
                return Err(dim_err("lstm bias", twi, self.value(b)));
            }
        }
        let (t_len, cin) = (tx.shape()[0], tx.shape()[1]);
        let bias: Vec<f64> = self
            .value(b_ih)
            .data()
            .iter()
            .zip(self.value(b_hh).data())
            .map(|(a, b)| a + b)
            .collect();

        // input projections for all samples at once
        let mut zx = vec![0.0; t_len * h4];
        gemm_acc(tx.data(), twi.data(), &mut zx, t_len, cin, h4);

        let mut out = vec![0.0; t_len * h];
        let mut gates = vec![0.0; t_len * h4];
        let mut cells = vec![0.0; t_len * h];
        let mut tanh_cells = vec![0.0; t_len * h];
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        let mut z = vec![0.0; h4];
        for step in 0..t_len {
            let t = if reverse { t_len - 1 - step } else { step };
            z.copy_from_slice(&zx[t * h4..(t + 1) * h4]);
            z.iter_mut().zip(&bias).for_each(|(a, b)| *a += b);
            gemm_acc(&h_prev, twh.data(), &mut z, 1, h, h4);
            let g = &mut gates[step * h4..(step + 1) * h4];
            for u in 0..h {
                let i = sigmoid(z[u]);
                let j = sigmoid(z[h + u]);
                let cand = z[2 * h + u].tanh();
                let o = sigmoid(z[3 * h + u]);
                let c = j * c_prev[u] + i * cand;
                let tc = c.tanh();
                g[u] = i;
                g[h + u] = j;
                g[2 * h + u] = cand;
                g[3 * h + u] = o;
                cells[step * h + u] = c;
                tanh_cells[step * h + u] = tc;
                out[t * h + u] = tc * o;
                c_prev[u] = c;
            }
            h_prev.copy_from_slice(&out[t * h..(t + 1) * h]);
        }
        let out = Tensor::new(&[t_len, h], out)?;
        let ng = [x, w_ih, w_hh, b_ih, b_hh].iter().any(|&v| self.ng(v));
        Ok(self.push(
            Op::Lstm(Box::new(LstmRecord {
                x,
                w_ih,
                w_hh,
                b_ih,
                b_hh,
                reverse,
                hidden: h,
                gates,
                cells,
                tanh_cells,
            })),
            out,
            ng,
        ))
    }

    /// Mean over samples of `-log p[t, label_t]`, probabilities clamped
    /// below at `floor`.
    pub fn cross_entropy(&mut self, p: Var, labels: &[usize], floor: f64) -> Result<Var> {
        let tp = self.value(p);
        if tp.ndim() != 2 || tp.shape()[0] != labels.len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: tp.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let l = tp.shape()[1];
        if let Some((t, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= l) {
            return Err(Error::Data(format!(
                "label {y} at sample {t} out of range for {l} classes"
            )));
        }
        let t_len = labels.len() as f64;
        let gap = labels
            .iter()
            .enumerate()
            .fold(f64::INFINITY, |m, (t, &y)| m.min((tp.at(&[t, y]).ln() - floor.ln()).abs()));
        let loss = labels
            .iter()
            .enumerate()
            .map(|(t, &y)| -tp.at(&[t, y]).max(floor).ln())
            .sum::<f64>()
            / t_len;
        self.note_kink(gap);
        let ng = self.ng(p);
        Ok(self.push(
            Op::CrossEntropy {
                p,
                labels: labels.to_vec(),
                floor,
            },
            Tensor::scalar(loss),
            ng,
        ))
    }

    /// Truncated mean squared difference of consecutive log-probabilities,
    /// normalized by `T·L`. With `detach_prev` the `t-1` term is held
    /// constant in the gradient.
    pub fn tmse(&mut self, p: Var, tau: f64, floor: f64, detach_prev: bool) -> Result<Var> {
        let tp = self.value(p);
        if tp.ndim() != 2 {
            return Err(Error::Shape {
                shape: tp.shape().to_vec(),
                reason: "tmse expects [T, L]".into(),
            });
        }
        let (t_len, l) = (tp.shape()[0], tp.shape()[1]);
        let mut acc = 0.0;
        let mut gap = f64::INFINITY;
        for t in 0..t_len {
            for c in 0..l {
                gap = gap.min((tp.at(&[t, c]).ln() - floor.ln()).abs());
                if t == 0 {
                    continue;
                }
                let d = (tp.at(&[t, c]).max(floor).ln() - tp.at(&[t - 1, c]).max(floor).ln()).abs();
                gap = gap.min((d - tau).abs());
                let d = d.min(tau);
                acc += d * d;
            }
        }
        let loss = acc / (t_len * l) as f64;
        self.note_kink(gap);
        let ng = self.ng(p);
        Ok(self.push(
            Op::Tmse {
                p,
                tau,
                floor,
                detach_prev,
            },
            Tensor::scalar(loss),
            ng,
        ))
    }

    /// Reverse pass from a scalar `loss`, accumulating parameter gradients
    /// into `store`. A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward_impl(loss, Some(store))
    }

    /// Reverse pass for tapes without parameter leaves (or when parameter
    /// gradients should stay on the tape).
    pub fn backward_leaves(&mut self, loss: Var) -> Result<()> {
        self.backward_impl(loss, None)
    }

    fn backward_impl(&mut self, loss: Var, mut store: Option<&mut ParamStore>) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Shape {
                shape: self.value(loss).shape().to_vec(),
                reason: "backward target must be a scalar".into(),
            });
        }
        if !self.value(loss).all_finite() {
            return Err(Error::NonFinite(format!("loss {}", self.value(loss).item())));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    self.grads[idx] = Some(g);
                }
                Op::Param(id) => {
                    match store.as_deref_mut() {
                        Some(s) => s.get_mut(*id).grad.add_assign(&g),
                        None => self.grads[idx] = Some(g),
                    }
                }
                op => {
                    let contributions = self.local_grads(op, &node.value, &g)?;
                    for (v, gv) in contributions {
                        if self.nodes[v.0].needs_grad {
                            accumulate(&mut self.grads[v.0], gv);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, op: &Op, out: &Tensor, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        let ng = |v: Var| self.ng(v);
        let mut res = Vec::new();
        match op {
            Op::Leaf | Op::Param(_) => unreachable!("leaves handled by caller"),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (k, n) = (tb.shape()[0], tb.shape()[1]);
                let m = ta.rows();
                if ng(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_a_bt_acc(g.data(), tb.data(), &mut ga, m, n, k);
                    res.push((*a, Tensor::new(ta.shape(), ga)?));
                }
                if ng(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_at_b_acc(ta.data(), g.data(), &mut gb, m, k, n);
                    res.push((*b, Tensor::new(tb.shape(), gb)?));
                }
            }
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if ng(*a) {
                    res.push((*a, hadamard(g, tb)));
                }
                if ng(*b) {
                    res.push((*b, hadamard(g, ta)));
                }
            }
            Op::Scale(a, s) => res.push((*a, g.map(|v| v * s))),
            Op::AddBias(x, b) => {
                res.push((*x, g.clone()));
                if ng(*b) {
                    res.push((*b, column_sums(g)));
                }
            }
            Op::Relu(x) => {
                let tx = val(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                res.push((*x, Tensor::new(g.shape(), d)?));
            }
            Op::Sigmoid(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * y * (1.0 - y))
                    .collect();
                res.push((*x, Tensor::new(g.shape(), d)?));
            }
            Op::Tanh(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * (1.0 - y * y))
                    .collect();
                res.push((*x, Tensor::new(g.shape(), d)?));
            }
            Op::Log(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&gv, &xv)| gv / xv)
                    .collect();
                res.push((*x, Tensor::new(g.shape(), d)?));
            }
            Op::Softmax(x) => {
                let c = out.last_dim();
                let mut d = vec![0.0; out.len()];
                for ((dr, yr), gr) in d
                    .chunks_mut(c)
                    .zip(out.data().chunks(c))
                    .zip(g.data().chunks(c))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((dv, y), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = y * (gv - dot);
                    }
                }
                res.push((*x, Tensor::new(out.shape(), d)?));
            }
            Op::Sum(x) => res.push((*x, Tensor::full(val(*x).shape(), g.item()))),
            Op::Reshape(x) => res.push((*x, g.clone().reshape(val(*x).shape())?)),
            Op::MeanNodes(x) => {
                let tx = val(*x);
                let (t, n, c) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let inv = 1.0 / n as f64;
                let mut d = vec![0.0; tx.len()];
                for ti in 0..t {
                    let gr = &g.data()[ti * c..(ti + 1) * c];
                    for ni in 0..n {
                        let base = (ti * n + ni) * c;
                        for (dv, gv) in d[base..base + c].iter_mut().zip(gr) {
                            *dv = gv * inv;
                        }
                    }
                }
                res.push((*x, Tensor::new(tx.shape(), d)?));
            }
            Op::SliceLast { x, start } => {
                let tx = val(*x);
                let (c, len) = (tx.last_dim(), g.last_dim());
                let mut d = vec![0.0; tx.len()];
                for (dr, gr) in d.chunks_mut(c).zip(g.data().chunks(len)) {
                    dr[*start..start + len].copy_from_slice(gr);
                }
                res.push((*x, Tensor::new(tx.shape(), d)?));
            }
            Op::ConcatLast(parts) => {
                let total = g.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let tp = val(p);
                    let w = tp.last_dim();
                    if ng(p) {
                        let d = g
                            .data()
                            .chunks(total)
                            .flat_map(|row| row[offset..offset + w].iter().copied())
                            .collect();
                        res.push((p, Tensor::new(tp.shape(), d)?));
                    }
                    offset += w;
                }
            }
            Op::Conv { x, w, b, offsets } => {
                let (tx, tw) = (val(*x), val(*w));
                let (cin, cout) = (tw.shape()[1], tw.shape()[2]);
                let t = tx.shape()[0];
                let m = tx.len() / (t * cin);
                let mut gx = vec![0.0; if ng(*x) { tx.len() } else { 0 }];
                let mut gw = vec![0.0; if ng(*w) { tw.len() } else { 0 }];
                for (i, &o) in offsets.iter().enumerate() {
                    let Some((t0, t1)) = valid_range(t, o) else { continue };
                    let src = ((t0 as isize + o) as usize) * m * cin;
                    let rows = (t1 - t0) * m;
                    let gout = &g.data()[t0 * m * cout..t1 * m * cout];
                    if ng(*x) {
                        gemm_a_bt_acc(
                            gout,
                            &tw.data()[i * cin * cout..(i + 1) * cin * cout],
                            &mut gx[src..src + rows * cin],
                            rows,
                            cout,
                            cin,
                        );
                    }
                    if ng(*w) {
                        gemm_at_b_acc(
                            &tx.data()[src..src + rows * cin],
                            gout,
                            &mut gw[i * cin * cout..(i + 1) * cin * cout],
                            rows,
                            cin,
                            cout,
                        );
                    }
                }
                if ng(*x) {
                    res.push((*x, Tensor::new(tx.shape(), gx)?));
                }
                if ng(*w) {
                    res.push((*w, Tensor::new(tw.shape(), gw)?));
                }
                if ng(*b) {
                    res.push((*b, column_sums(g)));
                }
            }
            Op::NodeMix { mat, x, transposed } => {
                let (tm, tx) = (val(*mat), val(*x));
                let (t, n, c) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let eff = if *transposed { tm.transpose() } else { tm.clone() };
                if ng(*x) {
                    let mut gx = vec![0.0; tx.len()];
                    for ti in 0..t {
                        let s = ti * n * c..(ti + 1) * n * c;
                        gemm_at_b_acc(eff.data(), &g.data()[s.clone()], &mut gx[s], n, n, c);
                    }
                    res.push((*x, Tensor::new(tx.shape(), gx)?));
                }
                if ng(*mat) {
                    let mut ge = vec![0.0; n * n];
                    for ti in 0..t {
                        let s = ti * n * c..(ti + 1) * n * c;
                        gemm_a_bt_acc(&g.data()[s.clone()], &tx.data()[s], &mut ge, n, c, n);
                    }
                    let ge = Tensor::new(&[n, n], ge)?;
                    res.push((*mat, if *transposed { ge.transpose() } else { ge }));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = g.last_dim();
                let rows = g.rows() as f64;
                let gam = val(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (gr, hr) in g.data().chunks(c).zip(xhat.chunks(c)) {
                    for ci in 0..c {
                        sum_g[ci] += gr[ci];
                        sum_gx[ci] += gr[ci] * hr[ci];
                    }
                }
                if ng(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for ((dr, gr), hr) in gx
                        .chunks_mut(c)
                        .zip(g.data().chunks(c))
                        .zip(xhat.chunks(c))
                    {
                        for ci in 0..c {
                            let scale = gam[ci] * inv_std[ci];
                            dr[ci] = if *train {
                                scale * (gr[ci] - sum_g[ci] / rows - hr[ci] * sum_gx[ci] / rows)
                            } else {
                                scale * gr[ci]
                            };
                        }
                    }
                    res.push((*x, Tensor::new(g.shape(), gx)?));
                }
                if ng(*gamma) {
                    res.push((*gamma, Tensor::new(&[c], sum_gx)?));
                }
                if ng(*beta) {
                    res.push((*beta, Tensor::new(&[c], sum_g)?));
                }
            }
            Op::Lstm(rec) => res.extend(self.lstm_backward(rec, out, g)?),
            Op::CrossEntropy { p, labels, floor } => {
                let tp = val(*p);
                let t_len = labels.len() as f64;
                let mut d = Tensor::zeros(tp.shape());
                for (t, &y) in labels.iter().enumerate() {
                    let pv = tp.at(&[t, y]);
                    if pv >= *floor {
                        d.set(&[t, y], -g.item() / (t_len * pv));
                    }
                }
                res.push((*p, d));
            }
            Op::Tmse {
                p,
                tau,
                floor,
                detach_prev,
            } => {
                let tp = val(*p);
                let (t_len, l) = (tp.shape()[0], tp.shape()[1]);
                let mut d = Tensor::zeros(tp.shape());
                let norm = g.item() * 2.0 / (t_len * l) as f64;
                for t in 1..t_len {
                    for c in 0..l {
                        let (cur, prev) = (tp.at(&[t, c]), tp.at(&[t - 1, c]));
                        let diff = cur.max(*floor).ln() - prev.max(*floor).ln();
                        if diff.abs() > *tau {
                            continue;
                        }
                        if cur >= *floor {
                            let o = d.at(&[t, c]);
                            d.set(&[t, c], o + norm * diff / cur);
                        }
                        if !detach_prev && prev >= *floor {
                            let o = d.at(&[t - 1, c]);
                            d.set(&[t - 1, c], o - norm * diff / prev);
                        }
                    }
                }
                res.push((*p, d));
            }
        }
        Ok(res)
    }

    fn lstm_backward(&self, rec: &LstmRecord, out: &Tensor, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let (tx, twi, twh) = (self.value(rec.x), self.value(rec.w_ih), self.value(rec.w_hh));
        let h = rec.hidden;
        let h4 = 4 * h;
        let (t_len, cin) = (tx.shape()[0], tx.shape()[1]);
        let out = out.data();
        let mut dz_all = vec![0.0; t_len * h4];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut gwh = vec![0.0; h * h4];
        for step in (0..t_len).rev() {
            let t = if rec.reverse { t_len - 1 - step } else { step };
            let gates = &rec.gates[step * h4..(step + 1) * h4];
            let tc = &rec.tanh_cells[step * h..(step + 1) * h];
            let c_prev: &[f64] = if step == 0 {
                &[]
            } else {
                &rec.cells[(step - 1) * h..step * h]
            };
            let dz = &mut dz_all[t * h4..(t + 1) * h4];
            for u in 0..h {
                let (i, j, cand, o) = (gates[u], gates[h + u], gates[2 * h + u], gates[3 * h + u]);
                let dh = g.data()[t * h + u] + dh_next[u];
                let d_o = dh * tc[u];
                let dc = dh * o * (1.0 - tc[u] * tc[u]) + dc_next[u];
                let cp = if step == 0 { 0.0 } else { c_prev[u] };
                dz[u] = dc * cand * i * (1.0 - i);
                dz[h + u] = dc * cp * j * (1.0 - j);
                dz[2 * h + u] = dc * i * (1.0 - cand * cand);
                dz[3 * h + u] = d_o * o * (1.0 - o);
                dc_next[u] = dc * j;
            }
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            gemm_a_bt_acc(dz, twh.data(), &mut dh_next, 1, h4, h);
            if step > 0 {
                let t_prev = if rec.reverse { t + 1 } else { t - 1 };
                let h_prev = &out[t_prev * h..(t_prev + 1) * h];
                gemm_at_b_acc(h_prev, dz, &mut gwh, 1, h, h4);
            }
        }
        let mut res = Vec::new();
        if self.ng(rec.x) {
            let mut gx = vec![0.0; t_len * cin];
            gemm_a_bt_acc(&dz_all, twi.data(), &mut gx, t_len, h4, cin);
            res.push((rec.x, Tensor::new(tx.shape(), gx)?));
        }
        if self.ng(rec.w_ih) {
            let mut gwi = vec![0.0; cin * h4];
            gemm_at_b_acc(tx.data(), &dz_all, &mut gwi, t_len, cin, h4);
            res.push((rec.w_ih, Tensor::new(twi.shape(), gwi)?));
        }
        if self.ng(rec.w_hh) {
            res.push((rec.w_hh, Tensor::new(twh.shape(), gwh)?));
        }
        let gb = column_sums(&Tensor::new(&[t_len, h4], dz_all)?);
        if self.ng(rec.b_ih) {
            res.push((rec.b_ih, gb.clone()));
        }
        if self.ng(rec.b_hh) {
            res.push((rec.b_hh, gb));
        }
        Ok(res)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

fn column_sums(g: &Tensor) -> Tensor {
    let c = g.last_dim();
    let mut s = vec![0.0; c];
    for row in g.data().chunks(c) {
        s.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    Tensor::new(&[c], s).expect("positive width")
}

/// Output samples `[t0, t1)` whose tap at offset `o` lands inside `[0, t)`.
fn valid_range(t: usize, o: isize) -> Option<(usize, usize)> {
    let t0 = (-o).max(0) as usize;
    let t1 = (t as isize - o).min(t as isize);
    if t1 <= t0 as isize {
        None
    } else {
        Some((t0, t1 as usize))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.last_dim();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut z = 0.0;
        for &v in row {
            let e = (v - max).exp();
            z += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= z);
    }
    Tensor::new(x.shape(), out).expect("same shape")
}
