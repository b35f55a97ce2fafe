//! Reverse-mode autodiff on a flat tape of matrix operations.
//!
//! Values are computed eagerly as ops are recorded; `backward` then sweeps
//! the tape once in reverse. The op set is exactly what the transformer
//! forward passes need, nothing more. All shapes are checked at record time
//! and panic on mismatch, since a bad shape is a bug in the calling model
//! code rather than a runtime condition.
//!
//! Gradients are only allocated for nodes that (transitively) depend on a
//! parameter; constants and pure-input subgraphs cost nothing in the sweep.

use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::{self, Mat};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    /// Row lookup: out[r] = table[idx[r]].
    Gather { table: Var, idx: Vec<u32> },
    /// out = a · b
    MatMul { a: Var, b: Var },
    /// out = a · bᵀ
    MatMulT { a: Var, b: Var },
    Add { a: Var, b: Var },
    /// Broadcast a [1,n] row over every row of a.
    AddRow { a: Var, row: Var },
    Scale { a: Var, k: f64 },
    /// Elementwise constant offset (positions, attention masks).
    AddConst { a: Var },
    /// Elementwise constant mask (dropout).
    MulConst { a: Var, mask: Vec<f64> },
    Relu { a: Var },
    SoftmaxRows { a: Var },
    LogSoftmaxRows { a: Var },
    /// Row-wise layer norm with learned gain/bias rows.
    LayerNorm { a: Var, gain: Var, bias: Var },
    SliceCols { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    /// Scalar: sum of all elements.
    SumAll { a: Var },
    /// Scalar: -Σ_t logp[t, targets[t]].
    NllSum { logp: Var, targets: Vec<u32> },
    /// Scalar over a [1,n] row: -Σ_i w[i] · logp[i].
    WeightedNllSum { logp: Var, weights: Vec<f64> },
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    needs_grad: bool,
}

const LN_EPS: f64 = 1e-5;

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, data: Vec<f64>, needs_grad: bool) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node { op, rows, cols, data, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Bind a parameter matrix; gradients will be tracked through it.
    pub fn param(&mut self, m: &Mat) -> Var {
        self.push(Op::Input, m.rows, m.cols, m.data.clone(), true)
    }

    /// Bind a constant; no gradient flows into it.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        self.push(Op::Input, rows, cols, data, false)
    }

    pub fn gather(&mut self, table: Var, idx: &[u32]) -> Var {
        let (trows, tcols) = self.shape(table);
        let mut data = Vec::with_capacity(idx.len() * tcols);
        for &i in idx {
            assert!((i as usize) < trows, "gather index {i} out of range {trows}");
            data.extend_from_slice(&self.nodes[table.0].data[i as usize * tcols..(i as usize + 1) * tcols]);
        }
        let needs = self.needs(table);
        self.push(Op::Gather { table, idx: idx.to_vec() }, idx.len(), tcols, data, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        assert_eq!(ka, kb, "matmul inner dims {ka} vs {kb}");
        let mut data = vec![0.0; m * n];
        linalg::matmul_acc(&mut data, &self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::MatMul { a, b }, m, n, data, needs)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (m, ka) = self.shape(a);
        let (n, kb) = self.shape(b);
        assert_eq!(ka, kb, "matmul_t inner dims {ka} vs {kb}");
        let mut data = vec![0.0; m * n];
        linalg::matmul_bt_acc(&mut data, &self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::MatMulT { a, b }, m, n, data, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let (m, n) = self.shape(a);
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add { a, b }, m, n, data, needs)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "row must be [1,{n}]");
        let mut data = self.nodes[a.0].data.clone();
        for r in 0..m {
            for c in 0..n {
                data[r * n + c] += self.nodes[row.0].data[c];
            }
        }
        let needs = self.needs(a) || self.needs(row);
        self.push(Op::AddRow { a, row }, m, n, data, needs)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let (m, n) = self.shape(a);
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * k).collect();
        let needs = self.needs(a);
        self.push(Op::Scale { a, k }, m, n, data, needs)
    }

    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(c.len(), m * n, "add_const length mismatch");
        let data: Vec<f64> = self.nodes[a.0].data.iter().zip(c).map(|(x, y)| x + y).collect();
        let needs = self.needs(a);
        self.push(Op::AddConst { a }, m, n, data, needs)
    }

    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(mask.len(), m * n, "mul_const length mismatch");
        let data: Vec<f64> =
            self.nodes[a.0].data.iter().zip(&mask).map(|(x, y)| x * y).collect();
        let needs = self.needs(a);
        self.push(Op::MulConst { a, mask }, m, n, data, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x.max(0.0)).collect();
        let needs = self.needs(a);
        self.push(Op::Relu { a }, m, n, data, needs)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let mut data = self.nodes[a.0].data.clone();
        for r in 0..m {
            linalg::softmax_in_place(&mut data[r * n..(r + 1) * n]);
        }
        let needs = self.needs(a);
        self.push(Op::SoftmaxRows { a }, m, n, data, needs)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let mut data = self.nodes[a.0].data.clone();
        for r in 0..m {
            linalg::log_softmax_in_place(&mut data[r * n..(r + 1) * n]);
        }
        let needs = self.needs(a);
        self.push(Op::LogSoftmaxRows { a }, m, n, data, needs)
    }

    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(gain), (1, n), "gain must be [1,{n}]");
        assert_eq!(self.shape(bias), (1, n), "bias must be [1,{n}]");
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let x = &self.nodes[a.0].data[r * n..(r + 1) * n];
            let mean = x.iter().sum::<f64>() / n as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / libm::sqrt(var + LN_EPS);
            for c in 0..n {
                let hat = (x[c] - mean) * inv;
                data[r * n + c] =
                    hat * self.nodes[gain.0].data[c] + self.nodes[bias.0].data[c];
            }
        }
        let needs = self.needs(a) || self.needs(gain) || self.needs(bias);
        self.push(Op::LayerNorm { a, gain, bias }, m, n, data, needs)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(start + width <= n, "slice {start}+{width} exceeds {n} cols");
        let mut data = Vec::with_capacity(m * width);
        for r in 0..m {
            data.extend_from_slice(&self.nodes[a.0].data[r * n + start..r * n + start + width]);
        }
        let needs = self.needs(a);
        self.push(Op::SliceCols { a, start }, m, width, data, needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        for &p in parts {
            assert_eq!(self.shape(p).0, m, "concat_cols row mismatch");
        }
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                let w = self.shape(p).1;
                data.extend_from_slice(&self.nodes[p.0].data[r * w..(r + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatCols { parts: parts.to_vec() }, m, total, data, needs)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let needs = self.needs(a);
        self.push(Op::SumAll { a }, 1, 1, vec![s], needs)
    }

    pub fn nll_sum(&mut self, logp: Var, targets: &[u32]) -> Var {
        let (m, n) = self.shape(logp);
        assert_eq!(targets.len(), m, "one target per row");
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            assert!((t as usize) < n, "target {t} out of range {n}");
            loss -= self.nodes[logp.0].data[r * n + t as usize];
        }
        let needs = self.needs(logp);
        self.push(Op::NllSum { logp, targets: targets.to_vec() }, 1, 1, vec![loss], needs)
    }

    pub fn weighted_nll_sum(&mut self, logp: Var, weights: &[f64]) -> Var {
        let (m, n) = self.shape(logp);
        assert_eq!(m, 1, "weighted_nll_sum expects a [1,n] row");
        assert_eq!(weights.len(), n, "one weight per column");
        let loss: f64 = self.nodes[logp.0]
            .data
            .iter()
            .zip(weights)
            .map(|(lp, w)| -w * lp)
            .sum();
        let needs = self.needs(logp);
        self.push(
            Op::WeightedNllSum { logp, weights: weights.to_vec() },
            1,
            1,
            vec![loss],
            needs,
        )
    }

    /// Reverse sweep from a scalar loss. Returns per-node gradients; nodes
    /// that don't influence the loss (or track no gradient) have none.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        macro_rules! ensure {
            ($v:expr) => {{
                let node = &self.nodes[$v.0];
                grads[$v.0].get_or_insert_with(|| vec![0.0; node.rows * node.cols])
            }};
        }

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Input) {
                continue; // leaf: keep its accumulated gradient
            }
            let Some(dy) = grads[id].take() else {
                continue;
            };
            let (rows, cols) = (self.nodes[id].rows, self.nodes[id].cols);
            match &self.nodes[id].op {
                Op::Input => {}
                Op::Gather { table, idx } => {
                    if self.needs(*table) {
                        let g = ensure!(*table);
                        for (r, &i) in idx.iter().enumerate() {
                            let dst = &mut g[i as usize * cols..(i as usize + 1) * cols];
                            for (d, s) in dst.iter_mut().zip(&dy[r * cols..(r + 1) * cols]) {
                                *d += s;
                            }
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let (m, k) = self.shape(*a);
                    let n = cols;
                    if self.needs(*a) {
                        let bd = self.nodes[b.0].data.clone();
                        let g = ensure!(*a);
                        linalg::matmul_bt_acc(g, &dy, &bd, m, n, k);
                    }
                    if self.needs(*b) {
                        let ad = self.nodes[a.0].data.clone();
                        let g = ensure!(*b);
                        linalg::matmul_at_acc(g, &ad, &dy, k, m, n);
                    }
                }
                Op::MatMulT { a, b } => {
                    // c = a·bᵀ with a [m,k], b [n,k], c [m,n]
                    let (m, k) = self.shape(*a);
                    let n = cols;
                    if self.needs(*a) {
                        let bd = self.nodes[b.0].data.clone();
                        let g = ensure!(*a);
                        linalg::matmul_acc(g, &dy, &bd, m, n, k);
                    }
                    if self.needs(*b) {
                        let ad = self.nodes[a.0].data.clone();
                        let g = ensure!(*b);
                        linalg::matmul_at_acc(g, &dy, &ad, n, m, k);
                    }
                }
                Op::Add { a, b } => {
                    for v in [*a, *b] {
                        if self.needs(v) {
                            let g = ensure!(v);
                            for (d, s) in g.iter_mut().zip(&dy) {
                                *d += s;
                            }
                        }
                    }
                }
                Op::AddRow { a, row } => {
                    if self.needs(*a) {
                        let g = ensure!(*a);
                        for (d, s) in g.iter_mut().zip(&dy) {
                            *d += s;
                        }
                    }
                    if self.needs(*row) {
                        let g = ensure!(*row);
                        for r in 0..rows {
                            for c in 0..cols {
                                g[c] += dy[r * cols + c];
                            }
                        }
                    }
                }
                Op::Scale { a, k } => {
                    if self.needs(*a) {
                        let g = ensure!(*a);
                        for (d, s) in g.iter_mut().zip(&dy) {
                            *d += k * s;
                        }
                    }
                }
                Op::AddConst { a } => {
                    if self.needs(*a) {
                        let g = ensure!(*a);
                        for (d, s) in g.iter_mut().zip(&dy) {
                            *d += s;
                        }
                    }
                }
                Op::MulConst { a, mask } => {
                    if self.needs(*a) {
                        let g = ensure!(*a);
                        for ((d, s), m) in g.iter_mut().zip(&dy).zip(mask) {
                            *d += s * m;
                        }
                    }
                }
                Op::Relu { a } => {
                    if self.needs(*a) {
                        let x = self.nodes[a.0].data.clone();
                        let g = ensure!(*a);
                        for ((d, s), xv) in g.iter_mut().zip(&dy).zip(&x) {
                            if *xv > 0.0 {
                                *d += s;
                            }
                        }
                    }
                }
                Op::SoftmaxRows { a } => {
                    if self.needs(*a) {
                        let y = self.nodes[id].data.clone();
                        let g = ensure!(*a);
                        for r in 0..rows {
                            let yr = &y[r * cols..(r + 1) * cols];
                            let dyr = &dy[r * cols..(r + 1) * cols];
                            let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
                            for c in 0..cols {
                                g[r * cols + c] += yr[c] * (dyr[c] - dot);
                            }
                        }
                    }
                }
                Op::LogSoftmaxRows { a } => {
                    if self.needs(*a) {
                        let y = self.nodes[id].data.clone();
                        let g = ensure!(*a);
                        for r in 0..rows {
                            let dyr = &dy[r * cols..(r + 1) * cols];
                            let sum: f64 = dyr.iter().sum();
                            for c in 0..cols {
                                g[r * cols + c] +=
                                    dyr[c] - libm::exp(y[r * cols + c]) * sum;
                            }
                        }
                    }
                }
                Op::LayerNorm { a, gain, bias } => {
                    let x = self.nodes[a.0].data.clone();
                    let gv = self.nodes[gain.0].data.clone();
                    let n = cols as f64;
                    for r in 0..rows {
                        let xr = &x[r * cols..(r + 1) * cols];
                        let dyr = &dy[r * cols..(r + 1) * cols];
                        let mean = xr.iter().sum::<f64>() / n;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / libm::sqrt(var + LN_EPS);
                        if self.needs(*gain) {
                            let g = ensure!(*gain);
                            for c in 0..cols {
                                g[c] += dyr[c] * (xr[c] - mean) * inv;
                            }
                        }
                        if self.needs(*bias) {
                            let g = ensure!(*bias);
                            for c in 0..cols {
                                g[c] += dyr[c];
                            }
                        }
                        if self.needs(*a) {
                            let mut mean_gdy = 0.0;
                            let mut mean_gdy_hat = 0.0;
                            for c in 0..cols {
                                let hat = (xr[c] - mean) * inv;
                                mean_gdy += gv[c] * dyr[c];
                                mean_gdy_hat += gv[c] * dyr[c] * hat;
                            }
                            mean_gdy /= n;
                            mean_gdy_hat /= n;
                            let g = ensure!(*a);
                            for c in 0..cols {
                                let hat = (xr[c] - mean) * inv;
                                g[r * cols + c] +=
                                    (gv[c] * dyr[c] - mean_gdy - hat * mean_gdy_hat) * inv;
                            }
                        }
                    }
                }
                Op::SliceCols { a, start } => {
                    if self.needs(*a) {
                        let an = self.shape(*a).1;
                        let g = ensure!(*a);
                        for r in 0..rows {
                            for c in 0..cols {
                                g[r * an + start + c] += dy[r * cols + c];
                            }
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        if self.needs(p) {
                            let g = ensure!(p);
                            for r in 0..rows {
                                for c in 0..w {
                                    g[r * w + c] += dy[r * cols + offset + c];
                                }
                            }
                        }
                        offset += w;
                    }
                }
                Op::SumAll { a } => {
                    if self.needs(*a) {
                        let g = ensure!(*a);
                        for d in g.iter_mut() {
                            *d += dy[0];
                        }
                    }
                }
                Op::NllSum { logp, targets } => {
                    if self.needs(*logp) {
                        let n = self.shape(*logp).1;
                        let g = ensure!(*logp);
                        for (r, &t) in targets.iter().enumerate() {
                            g[r * n + t as usize] -= dy[0];
                        }
                    }
                }
                Op::WeightedNllSum { logp, weights } => {
                    if self.needs(*logp) {
                        let g = ensure!(*logp);
                        for (d, w) in g.iter_mut().zip(weights) {
                            *d -= w * dy[0];
                        }
                    }
                }
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of a parameter node, zeros if it never influenced the loss.
    pub fn grad_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; len],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    /// Central finite differences against the analytic gradient, for a loss
    /// built from a set of parameter matrices.
    fn fd_check(params: &[Mat], build: &dyn Fn(&mut Tape, &[Var]) -> Var) {
        let eps = 1e-5;
        let bind = |tape: &mut Tape, ps: &[Mat]| -> (Vec<Var>, Var) {
            let vars: Vec<Var> = ps.iter().map(|p| tape.param(p)).collect();
            let loss = build(tape, &vars);
            (vars, loss)
        };

        let mut tape = Tape::new();
        let (vars, loss) = bind(&mut tape, params);
        let grads = tape.backward(loss);

        for (pi, p) in params.iter().enumerate() {
            let analytic = grads.grad_or_zeros(vars[pi], p.data.len());
            for j in 0..p.data.len() {
                let mut plus = params.to_vec();
                plus[pi].data[j] += eps;
                let mut minus = params.to_vec();
                minus[pi].data[j] -= eps;
                let mut tp = Tape::new();
                let (_, lp) = bind(&mut tp, &plus);
                let mut tm = Tape::new();
                let (_, lm) = bind(&mut tm, &minus);
                let fd = (tp.value(lp)[0] - tm.value(lm)[0]) / (2.0 * eps);
                let a = analytic[j];
                if a.abs() < 1e-10 && fd.abs() < 1e-10 {
                    continue;
                }
                let rel = (a - fd).abs() / a.abs().max(fd.abs());
                assert!(rel < 1e-5, "param {pi} elem {j}: analytic {a} vs fd {fd} (rel {rel})");
            }
        }
    }

    #[test]
    fn forward_values_by_hand() {
        let mut t = Tape::new();
        let a = t.constant(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = t.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let c = t.matmul(a, b);
        assert_eq!(t.value(c), &[1.0, 2.0, 3.0, 4.0]);
        let d = t.scale(c, 2.0);
        assert_eq!(t.value(d), &[2.0, 4.0, 6.0, 8.0]);
        let s = t.sum_all(d);
        assert_eq!(t.value(s), &[20.0]);
    }

    #[test]
    fn nll_picks_target_entries() {
        let mut t = Tape::new();
        let logits = Mat::from_vec(2, 3, vec![0.0, 1.0, 2.0, 2.0, 1.0, 0.0]);
        let l = t.param(&logits);
        let logp = t.log_softmax_rows(l);
        let loss = t.nll_sum(logp, &[2, 0]);
        // Both rows give log-softmax of [0,1,2] style; target picks the max
        // entry each time: -2*(2 - lse), lse = ln(e^0+e^1+e^2).
        let lse = libm::log(1.0 + libm::exp(1.0) + libm::exp(2.0));
        assert!((t.value(loss)[0] - 2.0 * (lse - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn grad_of_matmul_chain() {
        let w1 = Mat::from_vec(3, 4, (0..12).map(|i| 0.1 * i as f64 - 0.5).collect());
        let b1 = Mat::from_vec(1, 4, vec![0.05, -0.1, 0.2, 0.0]);
        let w2 = Mat::from_vec(4, 5, (0..20).map(|i| 0.07 * i as f64 - 0.6).collect());
        fd_check(&[w1, b1, w2], &|t, vs| {
            let x = t.constant(2, 3, vec![0.5, -0.2, 0.8, 1.0, 0.3, -0.7]);
            let h = t.matmul(x, vs[0]);
            let h = t.add_row(h, vs[1]);
            let h = t.relu(h);
            let logits = t.matmul(h, vs[2]);
            let logp = t.log_softmax_rows(logits);
            t.nll_sum(logp, &[1, 3])
        });
    }

    #[test]
    fn grad_of_attention_shape() {
        // Exercises matmul_t, softmax, slice and concat the way the
        // attention blocks use them.
        let wq = Mat::from_vec(4, 4, (0..16).map(|i| 0.11 * i as f64 - 0.8).collect());
        let wk = Mat::from_vec(4, 4, (0..16).map(|i| -0.09 * i as f64 + 0.7).collect());
        let wv = Mat::from_vec(4, 4, (0..16).map(|i| 0.05 * i as f64 - 0.4).collect());
        fd_check(&[wq, wk, wv], &|t, vs| {
            let x = t.constant(
                3,
                4,
                vec![0.2, -0.1, 0.4, 0.9, -0.3, 0.6, 0.1, -0.5, 0.7, 0.0, -0.2, 0.3],
            );
            let q = t.matmul(x, vs[0]);
            let k = t.matmul(x, vs[1]);
            let v = t.matmul(x, vs[2]);
            let mut heads = Vec::new();
            for h in 0..2 {
                let qh = t.slice_cols(q, h * 2, 2);
                let kh = t.slice_cols(k, h * 2, 2);
                let vh = t.slice_cols(v, h * 2, 2);
                let s = t.matmul_t(qh, kh);
                let s = t.scale(s, 1.0 / libm::sqrt(2.0));
                let a = t.softmax_rows(s);
                heads.push(t.matmul(a, vh));
            }
            let o = t.concat_cols(&heads);
            let logp = t.log_softmax_rows(o);
            t.nll_sum(logp, &[0, 3, 1])
        });
    }

    #[test]
    fn grad_of_layer_norm() {
        let gain = Mat::from_vec(1, 4, vec![1.1, 0.9, 1.3, 0.7]);
        let bias = Mat::from_vec(1, 4, vec![0.1, -0.2, 0.0, 0.3]);
        let w = Mat::from_vec(4, 4, (0..16).map(|i| 0.13 * i as f64 - 1.0).collect());
        fd_check(&[gain, bias, w], &|t, vs| {
            let x = t.constant(
                2,
                4,
                vec![0.5, -1.2, 0.8, 0.1, -0.4, 0.9, 1.5, -0.3],
            );
            let h = t.matmul(x, vs[2]);
            let h = t.layer_norm(h, vs[0], vs[1]);
            let logp = t.log_softmax_rows(h);
            t.nll_sum(logp, &[2, 0])
        });
    }

    #[test]
    fn grad_of_gather_accumulates_repeats() {
        let table = Mat::from_vec(5, 3, (0..15).map(|i| 0.1 * i as f64 - 0.7).collect());
        fd_check(&[table], &|t, vs| {
            let e = t.gather(vs[0], &[0, 2, 2, 4]);
            let sq = t.mul_const(e, vec![1.0; 12]);
            let logp = t.log_softmax_rows(sq);
            t.nll_sum(logp, &[0, 1, 2, 0])
        });

        // Direct check that repeated rows accumulate.
        let mut t = Tape::new();
        let tbl = Mat::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let v = t.param(&tbl);
        let g = t.gather(v, &[1, 1]);
        let s = t.sum_all(g);
        let grads = t.backward(s);
        assert_eq!(grads.grad(v).unwrap(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn grad_of_weighted_nll() {
        let w = Mat::from_vec(3, 4, (0..12).map(|i| 0.21 * i as f64 - 1.1).collect());
        fd_check(&[w], &|t, vs| {
            let x = t.constant(1, 3, vec![0.4, -0.9, 0.2]);
            let scores = t.matmul(x, vs[0]);
            let logp = t.log_softmax_rows(scores);
            t.weighted_nll_sum(logp, &[0.1, 0.2, 0.3, 0.4])
        });
    }

    #[test]
    fn grad_of_add_const_and_masks() {
        let w = Mat::from_vec(3, 3, (0..9).map(|i| 0.3 * i as f64 - 1.2).collect());
        fd_check(&[w], &|t, vs| {
            let x = t.constant(2, 3, vec![0.4, -0.2, 0.6, -0.8, 0.1, 0.5]);
            let h = t.matmul(x, vs[0]);
            let h = t.add_const(h, &[0.1, 0.2, 0.3, -0.1, -0.2, -0.3]);
            let h = t.mul_const(h, vec![1.0, 0.0, 2.0, 1.0, 2.0, 0.0]);
            let s = t.sum_all(h);
            // Square-ish nonlinearity through softmax to keep the test
            // sensitive to the mask placement.
            let sm = t.softmax_rows(h);
            let both = t.concat_cols(&[s, s]);
            let picked = t.slice_cols(both, 0, 1);
            let total = t.sum_all(sm);
            let joined = t.add(picked, total);
            t.sum_all(joined)
        });
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(1, 2, vec![1.0, 2.0]);
        let p = t.param(&Mat::from_vec(1, 2, vec![3.0, 4.0]));
        let s = t.add(c, p);
        let loss = t.sum_all(s);
        let grads = t.backward(loss);
        assert!(grads.grad(c).is_none());
        assert_eq!(grads.grad(p).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn unused_param_has_no_gradient() {
        let mut t = Tape::new();
        let used = t.param(&Mat::from_vec(1, 1, vec![2.0]));
        let unused = t.param(&Mat::from_vec(1, 1, vec![5.0]));
        let loss = t.sum_all(used);
        let grads = t.backward(loss);
        assert!(grads.grad(unused).is_none());
        assert_eq!(grads.grad_or_zeros(unused, 1), vec![0.0]);
    }
}
