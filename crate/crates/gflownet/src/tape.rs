//! Minimal reverse-mode gradient tape over the fixed set of operations the
//! objectives need: affine maps, leaky ReLU, log-softmax, gathers, and scalar
//! arithmetic. Values are small f64 vectors; scalars are length-1 vectors.

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Copies a slice of the flat parameter vector. Frozen leaves receive no
    /// gradient.
    Leaf { offset: usize, frozen: bool },
    Constant,
    /// y = W x with W row-major (rows x cols).
    MatVec { w: NodeId, x: NodeId, rows: usize, cols: usize },
    AddVec { a: NodeId, b: NodeId },
    LeakyRelu { x: NodeId },
    Concat { parts: Vec<NodeId> },
    /// Selected entries of a vector, in the given order.
    Gather { x: NodeId, idxs: Vec<usize> },
    /// Log-softmax over the full (all-valid) vector.
    LogSoftmax { x: NodeId },
    /// Scalar log-sum-exp over the full vector.
    LogSumExp { x: NodeId },
    /// Scalar x[i].
    Index { x: NodeId, i: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    AddConst { x: NodeId, c: f64 },
    Scale { x: NodeId, c: f64 },
    Square { x: NodeId },
    SumMany { xs: Vec<NodeId> },
}

pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<Vec<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { ops: Vec::new(), vals: Vec::new() }
    }

    fn push(&mut self, op: Op, val: Vec<f64>) -> NodeId {
        self.ops.push(op);
        self.vals.push(val);
        NodeId(self.ops.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.vals[id.0]
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.vals[id.0].len(), 1);
        self.vals[id.0][0]
    }

    pub fn leaf(&mut self, params: &[f64], offset: usize, len: usize, frozen: bool) -> NodeId {
        let val = params[offset..offset + len].to_vec();
        self.push(Op::Leaf { offset, frozen }, val)
    }

    pub fn constant(&mut self, val: Vec<f64>) -> NodeId {
        self.push(Op::Constant, val)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(vec![v])
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId, rows: usize, cols: usize) -> NodeId {
        debug_assert_eq!(self.vals[w.0].len(), rows * cols);
        debug_assert_eq!(self.vals[x.0].len(), cols);
        let mut y = vec![0.0; rows];
        {
            let wv = &self.vals[w.0];
            let xv = &self.vals[x.0];
            for (i, yi) in y.iter_mut().enumerate() {
                let row = &wv[i * cols..(i + 1) * cols];
                *yi = row.iter().zip(xv).map(|(a, b)| a * b).sum();
            }
        }
        self.push(Op::MatVec { w, x, rows, cols }, y)
    }

    pub fn add_vec(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y: Vec<f64> = self.vals[a.0]
            .iter()
            .zip(&self.vals[b.0])
            .map(|(x, z)| x + z)
            .collect();
        self.push(Op::AddVec { a, b }, y)
    }

    pub fn leaky_relu(&mut self, x: NodeId) -> NodeId {
        let y: Vec<f64> = self.vals[x.0]
            .iter()
            .map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
            .collect();
        self.push(Op::LeakyRelu { x }, y)
    }

    pub fn gather(&mut self, x: NodeId, idxs: Vec<usize>) -> NodeId {
        let y: Vec<f64> = idxs.iter().map(|&i| self.vals[x.0][i]).collect();
        self.push(Op::Gather { x, idxs }, y)
    }

    /// Concatenation of several nodes into one vector.
    pub fn concat(&mut self, parts: Vec<NodeId>) -> NodeId {
        let y: Vec<f64> =
            parts.iter().flat_map(|&p| self.vals[p.0].iter().copied()).collect();
        self.push(Op::Concat { parts }, y)
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let lse = log_sum_exp(&self.vals[x.0]);
        let y: Vec<f64> = self.vals[x.0].iter().map(|&v| v - lse).collect();
        self.push(Op::LogSoftmax { x }, y)
    }

    pub fn log_sum_exp(&mut self, x: NodeId) -> NodeId {
        let y = log_sum_exp(&self.vals[x.0]);
        self.push(Op::LogSumExp { x }, vec![y])
    }

    pub fn index(&mut self, x: NodeId, i: usize) -> NodeId {
        let y = self.vals[x.0][i];
        self.push(Op::Index { x, i }, vec![y])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = self.scalar(a) + self.scalar(b);
        self.push(Op::Add { a, b }, vec![y])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = self.scalar(a) - self.scalar(b);
        self.push(Op::Sub { a, b }, vec![y])
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let y = self.scalar(x) + c;
        self.push(Op::AddConst { x, c }, vec![y])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let y = self.scalar(x) * c;
        self.push(Op::Scale { x, c }, vec![y])
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let v = self.scalar(x);
        self.push(Op::Square { x }, vec![v * v])
    }

    pub fn sum_many(&mut self, xs: Vec<NodeId>) -> NodeId {
        let y: f64 = xs.iter().map(|&n| self.scalar(n)).sum();
        self.push(Op::SumMany { xs }, vec![y])
    }

    /// Reverse sweep from a scalar root; parameter gradients accumulate into
    /// `grad_out` (aligned with the flat parameter vector).
    pub fn backward(&self, root: NodeId, grad_out: &mut [f64]) {
        let mut grads: Vec<Vec<f64>> = self.vals.iter().map(|_| Vec::new()).collect();
        grads[root.0] = vec![1.0];
        for i in (0..=root.0).rev() {
            if grads[i].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            match &self.ops[i] {
                Op::Leaf { offset, frozen } => {
                    if !frozen {
                        for (k, gv) in g.iter().enumerate() {
                            grad_out[offset + k] += gv;
                        }
                    }
                }
                Op::Constant => {}
                Op::MatVec { w, x, rows, cols } => {
                    let xv = self.vals[x.0].clone();
                    let wv = &self.vals[w.0];
                    let mut gx = vec![0.0; *cols];
                    {
                        let gw = ensure(&mut grads[w.0], rows * cols);
                        for r in 0..*rows {
                            let gi = g[r];
                            if gi == 0.0 {
                                continue;
                            }
                            let row = &wv[r * cols..(r + 1) * cols];
                            let grow = &mut gw[r * cols..(r + 1) * cols];
                            for j in 0..*cols {
                                grow[j] += gi * xv[j];
                                gx[j] += gi * row[j];
                            }
                        }
                    }
                    accumulate(ensure(&mut grads[x.0], gx.len()), &gx);
                }
                Op::AddVec { a, b } => {
                    accumulate(ensure(&mut grads[a.0], g.len()), &g);
                    accumulate(ensure(&mut grads[b.0], g.len()), &g);
                }
                Op::LeakyRelu { x } => {
                    let gx: Vec<f64> = self.vals[x.0]
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { LEAKY_SLOPE * gv })
                        .collect();
                    accumulate(ensure(&mut grads[x.0], gx.len()), &gx);
                }
                Op::Gather { x, idxs } => {
                    let len = self.vals[x.0].len();
                    let gx = ensure(&mut grads[x.0], len);
                    for (k, &idx) in idxs.iter().enumerate() {
                        gx[idx] += g[k];
                    }
                }
                Op::Concat { parts } => {
                    let mut k = 0;
                    for &p in parts {
                        let len = self.vals[p.0].len();
                        accumulate(ensure(&mut grads[p.0], len), &g[k..k + len]);
                        k += len;
                    }
                }
                Op::LogSoftmax { x } => {
                    let gsum: f64 = g.iter().sum();
                    let gx: Vec<f64> = self.vals[i]
                        .iter()
                        .zip(&g)
                        .map(|(&y, &gv)| gv - y.exp() * gsum)
                        .collect();
                    accumulate(ensure(&mut grads[x.0], gx.len()), &gx);
                }
                Op::LogSumExp { x } => {
                    let y = self.vals[i][0];
                    let gx: Vec<f64> =
                        self.vals[x.0].iter().map(|&v| g[0] * (v - y).exp()).collect();
                    accumulate(ensure(&mut grads[x.0], gx.len()), &gx);
                }
                Op::Index { x, i: idx } => {
                    let len = self.vals[x.0].len();
                    ensure(&mut grads[x.0], len)[*idx] += g[0];
                }
                Op::Add { a, b } => {
                    ensure(&mut grads[a.0], 1)[0] += g[0];
                    ensure(&mut grads[b.0], 1)[0] += g[0];
                }
                Op::Sub { a, b } => {
                    ensure(&mut grads[a.0], 1)[0] += g[0];
                    ensure(&mut grads[b.0], 1)[0] -= g[0];
                }
                Op::AddConst { x, .. } => {
                    ensure(&mut grads[x.0], 1)[0] += g[0];
                }
                Op::Scale { x, c } => {
                    ensure(&mut grads[x.0], 1)[0] += g[0] * c;
                }
                Op::Square { x } => {
                    ensure(&mut grads[x.0], 1)[0] += 2.0 * self.vals[x.0][0] * g[0];
                }
                Op::SumMany { xs } => {
                    for &n in xs {
                        ensure(&mut grads[n.0], 1)[0] += g[0];
                    }
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn ensure(buf: &mut Vec<f64>, len: usize) -> &mut Vec<f64> {
    if buf.is_empty() {
        buf.resize(len, 0.0);
    }
    buf
}

fn accumulate(buf: &mut [f64], g: &[f64]) {
    for (b, v) in buf.iter_mut().zip(g) {
        *b += v;
    }
}

/// Stable log-sum-exp of a slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(w) = (w - 3)^2 at w = 5 has gradient 4.
        let params = vec![5.0];
        let mut tape = Tape::new();
        let w = tape.leaf(&params, 0, 1, false);
        let shifted = tape.add_const(w, -3.0);
        let loss = tape.square(shifted);
        assert_eq!(tape.scalar(loss), 4.0);
        let mut grad = vec![0.0];
        tape.backward(loss, &mut grad);
        assert_eq!(grad[0], 4.0);
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let params = vec![5.0];
        let mut tape = Tape::new();
        let w = tape.leaf(&params, 0, 1, true);
        let loss = tape.square(w);
        let mut grad = vec![0.0];
        tape.backward(loss, &mut grad);
        assert_eq!(grad[0], 0.0);
    }

    #[test]
    fn log_softmax_values_and_grads() {
        let params = vec![1.0, 2.0, 3.0];
        let mut tape = Tape::new();
        let x = tape.leaf(&params, 0, 3, false);
        let y = tape.log_softmax(x);
        let probs: Vec<f64> = tape.value(y).iter().map(|v| v.exp()).collect();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // d(-y[0])/dx = softmax - onehot(0)
        let picked = tape.index(y, 0);
        let loss = tape.scale(picked, -1.0);
        let mut grad = vec![0.0; 3];
        tape.backward(loss, &mut grad);
        assert!((grad[0] - (probs[0] - 1.0)).abs() < 1e-12);
        assert!((grad[1] - probs[1]).abs() < 1e-12);
    }

    /// Central finite differences over every parameter.
    fn fd_grad(params: &[f64], f: impl Fn(&[f64]) -> f64, step: f64) -> Vec<f64> {
        let mut g = vec![0.0; params.len()];
        let mut p = params.to_vec();
        for i in 0..params.len() {
            p[i] = params[i] + step;
            let hi = f(&p);
            p[i] = params[i] - step;
            let lo = f(&p);
            p[i] = params[i];
            g[i] = (hi - lo) / (2.0 * step);
        }
        g
    }

    #[test]
    fn mlp_composite_matches_finite_differences() {
        // Two-layer net with log-softmax head, squared-scalar loss.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        let (din, dh, dout) = (4, 5, 3);
        let n_params = dh * din + dh + dout * dh + dout;
        let params: Vec<f64> = (0..n_params).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let input = vec![0.3, -0.2, 0.9, 0.1];

        let eval = |p: &[f64]| -> (Tape, NodeId) {
            let mut t = Tape::new();
            let w1 = t.leaf(p, 0, dh * din, false);
            let b1 = t.leaf(p, dh * din, dh, false);
            let w2 = t.leaf(p, dh * din + dh, dout * dh, false);
            let b2 = t.leaf(p, dh * din + dh + dout * dh, dout, false);
            let x = t.constant(input.clone());
            let h = t.matvec(w1, x, dh, din);
            let h = t.add_vec(h, b1);
            let h = t.leaky_relu(h);
            let o = t.matvec(w2, h, dout, dh);
            let o = t.add_vec(o, b2);
            let ls = t.log_softmax(o);
            let picked = t.index(ls, 1);
            let lse = t.log_sum_exp(o);
            let s = t.add(picked, lse);
            let s = t.add_const(s, 0.7);
            let loss = t.square(s);
            (t, loss)
        };

        let (tape, loss) = eval(&params);
        let mut grad = vec![0.0; n_params];
        tape.backward(loss, &mut grad);

        let fd = fd_grad(&params, |p| {
            let (t, l) = eval(p);
            t.scalar(l)
        }, 1e-5);
        for i in 0..n_params {
            let denom = grad[i].abs().max(fd[i].abs()).max(1e-6);
            assert!(
                (grad[i] - fd[i]).abs() / denom < 1e-5,
                "param {i}: analytic {} vs fd {}",
                grad[i],
                fd[i]
            );
        }
    }

    #[test]
    fn gather_and_sum_many() {
        let params = vec![1.0, 2.0, 3.0, 4.0];
        let mut tape = Tape::new();
        let x = tape.leaf(&params, 0, 4, false);
        let g = tape.gather(x, vec![3, 1]);
        assert_eq!(tape.value(g), &[4.0, 2.0]);
        let a = tape.index(g, 0);
        let b = tape.index(g, 1);
        let s = tape.sum_many(vec![a, b, a]);
        assert_eq!(tape.scalar(s), 10.0);
        let mut grad = vec![0.0; 4];
        tape.backward(s, &mut grad);
        assert_eq!(grad, vec![0.0, 1.0, 0.0, 2.0]);
    }

    #[test]
    fn concat_then_log_sum_exp() {
        let params = vec![0.0_f64.ln(), 1.0, 2.0];
        let mut tape = Tape::new();
        let a = tape.leaf(&params, 1, 1, false);
        let b = tape.leaf(&params, 2, 1, false);
        let both = tape.concat(vec![a, b]);
        assert_eq!(tape.value(both), &[1.0, 2.0]);
        let lse = tape.log_sum_exp(both);
        let expect = (1.0_f64.exp() + 2.0_f64.exp()).ln();
        assert!((tape.scalar(lse) - expect).abs() < 1e-12);
        let mut grad = vec![0.0; 3];
        tape.backward(lse, &mut grad);
        // Softmax weights.
        let w2 = 2.0_f64.exp() / (1.0_f64.exp() + 2.0_f64.exp());
        assert!((grad[1] - (1.0 - w2)).abs() < 1e-12);
        assert!((grad[2] - w2).abs() < 1e-12);
    }
}
