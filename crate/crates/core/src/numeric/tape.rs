use std::borrow::Cow;

use super::kernels::{self, softplus};
use super::tensor::Tensor;
use crate::error::{GeldError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    RmsNorm { x: Var, gain: Var, inv: Vec<f64> },
    Softmax(Var),
    Relu(Var),
    GatherRows(Var, Vec<usize>),
    AddToRow { x: Var, row: usize, v: Var },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GroupMean { x: Var, groups: Vec<usize>, counts: Vec<usize> },
    DistanceBias { x: Var, lambda: Var, index: usize, dist: Tensor<f64> },
    CrossEntropy { logits: Var, probs: Vec<f64>, target: usize },
    Sum(Vec<Var>),
}

struct Node<'p> {
    value: Cow<'p, Tensor<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode recorder for the fixed operator set the model uses.
///
/// Parameters are borrowed, so recording a forward pass does not copy the
/// weights. All arithmetic is in `f64`.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf borrowed from the parameter store.
    pub fn param(&mut self, t: &'p Tensor<f64>) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(t), op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<f64>) -> Var {
        self.nodes.push(Node { value: Cow::Owned(t), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<f64> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::matmul_t(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let mut y = self.value(x).clone();
        if self.value(b).len() != y.cols() {
            return Err(GeldError::Shape(format!("bias {} vs width {}", self.value(b).len(), y.cols())));
        }
        kernels::add_bias_in_place(&mut y, self.value(b));
        Ok(self.push(y, Op::AddBias(x, b), &[x, b]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(GeldError::Shape(format!("add {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let y = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let vx = self.value(x);
        let y = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|v| v * c).collect())
            .expect("same shape");
        self.push(y, Op::Scale(x, c), &[x])
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Var {
        let vx = self.value(x);
        let h = vx.cols();
        let inv: Vec<f64> = vx
            .data()
            .chunks(h)
            .map(|r| 1.0 / (r.iter().map(|v| v * v).sum::<f64>() / h as f64 + kernels::RMS_EPS).sqrt())
            .collect();
        let y = kernels::rms_norm(vx, self.value(gain));
        self.push(y, Op::RmsNorm { x, gain, inv }, &[x, gain])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let y = kernels::softmax_rows(self.value(x))?;
        Ok(self.push(y, Op::Softmax(x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = kernels::relu(self.value(x));
        self.push(y, Op::Relu(x), &[x])
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= vx.rows() {
                return Err(GeldError::Index { index: r, len: vx.rows() });
            }
            data.extend_from_slice(vx.row(r));
        }
        let y = Tensor::matrix(rows.len(), c, data)?;
        Ok(self.push(y, Op::GatherRows(x, rows.to_vec()), &[x]))
    }

    /// `x` with vector `v` added to one row.
    pub fn add_to_row(&mut self, x: Var, row: usize, v: Var) -> Result<Var> {
        let mut y = self.value(x).clone();
        if row >= y.rows() || self.value(v).len() != y.cols() {
            return Err(GeldError::Shape("add_to_row operands".into()));
        }
        for (a, b) in y.row_mut(row).iter_mut().zip(self.nodes[v.0].value.data()) {
            *a += b;
        }
        Ok(self.push(y, Op::AddToRow { x, row, v }, &[x, v]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if start + len > vx.cols() {
            return Err(GeldError::Shape(format!("column slice {start}+{len} of {}", vx.cols())));
        }
        let mut data = Vec::with_capacity(vx.rows() * len);
        for r in 0..vx.rows() {
            data.extend_from_slice(&vx.row(r)[start..start + len]);
        }
        let y = Tensor::matrix(vx.rows(), len, data)?;
        Ok(self.push(y, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let width: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                let vp = self.value(*p);
                if vp.rows() != rows {
                    return Err(GeldError::Shape("concat_cols row counts differ".into()));
                }
                data.extend_from_slice(vp.row(r));
            }
        }
        let y = Tensor::matrix(rows, width, data)?;
        Ok(self.push(y, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Mean of the rows of `x` sharing a group id; empty groups give zero rows.
    pub fn group_mean(&mut self, x: Var, groups: &[usize], num_groups: usize) -> Result<Var> {
        let vx = self.value(x);
        if groups.len() != vx.rows() {
            return Err(GeldError::Shape(format!("{} group ids for {} rows", groups.len(), vx.rows())));
        }
        let c = vx.cols();
        let mut counts = vec![0usize; num_groups];
        let mut data = vec![0.0; num_groups * c];
        for (r, &g) in groups.iter().enumerate() {
            counts[g] += 1;
            add_into(&mut data[g * c..(g + 1) * c], vx.row(r));
        }
        for (g, &cnt) in counts.iter().enumerate() {
            if cnt > 0 {
                for v in &mut data[g * c..(g + 1) * c] {
                    *v /= cnt as f64;
                }
            }
        }
        let y = Tensor::matrix(num_groups, c, data)?;
        Ok(self.push(y, Op::GroupMean { x, groups: groups.to_vec(), counts }, &[x]))
    }

    /// `x − softplus(lambda[index]) · dist`
    pub fn distance_bias(&mut self, x: Var, lambda: Var, index: usize, dist: Tensor<f64>) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape() != dist.shape() {
            return Err(GeldError::Shape(format!("bias {:?} vs logits {:?}", dist.shape(), vx.shape())));
        }
        let s = softplus(self.value(lambda).data()[index]);
        let data = vx.data().iter().zip(dist.data()).map(|(a, d)| a - s * d).collect();
        let y = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(y, Op::DistanceBias { x, lambda, index, dist }, &[x, lambda]))
    }

    /// Scalar cross-entropy of a logit column with masked entries excluded.
    pub fn cross_entropy(&mut self, logits: Var, allowed: &[bool], target: usize) -> Result<Var> {
        let (loss, mut probs) = kernels::masked_cross_entropy(self.value(logits).data(), allowed, target)?;
        probs[target] += 1.0;
        let y = Tensor::vector(vec![loss]);
        Ok(self.push(y, Op::CrossEntropy { logits, probs, target }, &[logits]))
    }

    pub fn sum(&mut self, scalars: &[Var]) -> Result<Var> {
        let mut s = 0.0;
        for v in scalars {
            let t = self.value(*v);
            if t.len() != 1 {
                return Err(GeldError::Shape("sum expects scalars".into()));
            }
            s += t.data()[0];
        }
        Ok(self.push(Tensor::vector(vec![s]), Op::Sum(scalars.to_vec()), scalars))
    }

    /// Back-propagate from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(GeldError::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            // keep interior gradients released; leaves retain theirs
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (va.rows(), va.cols(), vb.cols());
                if let Some(da) = self.slot(grads, *a) {
                    for r in 0..n {
                        let grow = &g[r * m..(r + 1) * m];
                        for kk in 0..k {
                            let brow = vb.row(kk);
                            da[r * k + kk] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for r in 0..n {
                        let grow = &g[r * m..(r + 1) * m];
                        for (kk, &x) in va.row(r).iter().enumerate() {
                            for (d, &gg) in db[kk * m..(kk + 1) * m].iter_mut().zip(grow) {
                                *d += x * gg;
                            }
                        }
                    }
                }
            }
            Op::MatMulT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (va.rows(), va.cols(), vb.rows());
                if let Some(da) = self.slot(grads, *a) {
                    for r in 0..n {
                        for j in 0..m {
                            let gg = g[r * m + j];
                            for (d, &y) in da[r * k..(r + 1) * k].iter_mut().zip(vb.row(j)) {
                                *d += gg * y;
                            }
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for r in 0..n {
                        for j in 0..m {
                            let gg = g[r * m + j];
                            for (d, &x) in db[j * k..(j + 1) * k].iter_mut().zip(va.row(r)) {
                                *d += gg * x;
                            }
                        }
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(dx) = self.slot(grads, *x) {
                    add_into(dx, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    let c = db.len();
                    for row in g.chunks(c) {
                        add_into(db, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    add_into(db, g);
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (d, gg) in dx.iter_mut().zip(g) {
                        *d += c * gg;
                    }
                }
            }
            Op::RmsNorm { x, gain, inv } => {
                let vx = self.value(*x);
                let vg = self.value(*gain).data();
                let h = vx.cols();
                if let Some(dg) = self.slot(grads, *gain) {
                    for (r, &s) in inv.iter().enumerate() {
                        let xr = vx.row(r);
                        for j in 0..h {
                            dg[j] += g[r * h + j] * xr[j] * s;
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, &s) in inv.iter().enumerate() {
                        let xr = vx.row(r);
                        let gr = &g[r * h..(r + 1) * h];
                        let dot: f64 = (0..h).map(|j| gr[j] * vg[j] * xr[j]).sum();
                        let coef = s * s * s * dot / h as f64;
                        for j in 0..h {
                            dx[r * h + j] += s * vg[j] * gr[j] - xr[j] * coef;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let c = out.cols();
                    for (r, yr) in out.data().chunks(c).enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &gg), &y) in dx.iter_mut().zip(g).zip(out.data()) {
                        if y > 0.0 {
                            *d += gg;
                        }
                    }
                }
            }
            Op::GatherRows(x, rows) => {
                let c = out.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, &src) in rows.iter().enumerate() {
                        add_into(&mut dx[src * c..(src + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::AddToRow { x, row, v } => {
                let c = out.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    add_into(dx, g);
                }
                if let Some(dv) = self.slot(grads, *v) {
                    add_into(dv, &g[row * c..(row + 1) * c]);
                }
            }
            Op::SliceCols { x, start } => {
                let len = out.cols();
                let c = self.value(*x).cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for r in 0..out.rows() {
                        add_into(&mut dx[r * c + start..r * c + start + len], &g[r * len..(r + 1) * len]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let width = out.cols();
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if let Some(dp) = self.slot(grads, *p) {
                        for r in 0..out.rows() {
                            add_into(&mut dp[r * c..(r + 1) * c], &g[r * width + offset..r * width + offset + c]);
                        }
                    }
                    offset += c;
                }
            }
            Op::GroupMean { x, groups, counts } => {
                let c = out.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, &grp) in groups.iter().enumerate() {
                        let inv = 1.0 / counts[grp] as f64;
                        for j in 0..c {
                            dx[r * c + j] += g[grp * c + j] * inv;
                        }
                    }
                }
            }
            Op::DistanceBias { x, lambda, index, dist } => {
                if let Some(dx) = self.slot(grads, *x) {
                    add_into(dx, g);
                }
                let lam = self.value(*lambda).data()[*index];
                if let Some(dl) = self.slot(grads, *lambda) {
                    let sig = 1.0 / (1.0 + (-lam).exp());
                    let s: f64 = g.iter().zip(dist.data()).map(|(a, d)| a * d).sum();
                    dl[*index] -= sig * s;
                }
            }
            Op::CrossEntropy { logits, probs, target } => {
                if let Some(dl) = self.slot(grads, *logits) {
                    let gg = g[0];
                    for (j, (d, p)) in dl.iter_mut().zip(probs).enumerate() {
                        let onehot = if j == *target { 1.0 } else { 0.0 };
                        *d += gg * (p - onehot);
                    }
                }
            }
            Op::Sum(parts) => {
                for p in parts {
                    if let Some(dp) = self.slot(grads, *p) {
                        dp[0] += g[0];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(f: impl Fn(&Tensor<f64>) -> f64, at: &Tensor<f64>, eps: f64) -> Vec<f64> {
        (0..at.len())
            .map(|i| {
                let mut p = at.clone();
                p.data_mut()[i] += eps;
                let up = f(&p);
                p.data_mut()[i] -= 2.0 * eps;
                (up - f(&p)) / (2.0 * eps)
            })
            .collect()
    }

    fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    /// Exercises every op in one graph and compares against central differences
    /// with respect to the input matrix and the weight.
    fn composite(x: &Tensor<f64>, w: &Tensor<f64>) -> (f64, Vec<f64>, Vec<f64>) {
        let gain = rand_tensor(1, 4, 9);
        let gain = Tensor::vector(gain.data().to_vec());
        let bias = Tensor::vector(vec![0.1, -0.2, 0.3, 0.05]);
        let lam = Tensor::vector(vec![0.3, -0.7]);
        let role = Tensor::vector(vec![0.5, -0.5, 0.25, 0.0]);
        let mut t = Tape::new();
        let xv = t.param(x);
        let wv = t.param(w);
        let gv = t.param(&gain);
        let bv = t.param(&bias);
        let lv = t.param(&lam);
        let rv = t.param(&role);
        let xr = t.add_to_row(xv, 1, rv).unwrap();
        let n = t.rms_norm(xr, gv);
        let y = t.linear(n, wv, bv).unwrap();
        let y = t.relu(y);
        let a = t.slice_cols(y, 0, 2).unwrap();
        let b = t.slice_cols(y, 2, 2).unwrap();
        let p = t.group_mean(a, &[0, 1, 0, 2, 1], 4).unwrap();
        let qp = t.matmul_t(a, p).unwrap();
        let qw = t.softmax_rows(qp).unwrap();
        let kp = t.matmul_t(p, b).unwrap();
        let kw = t.softmax_rows(kp).unwrap();
        let kv = t.matmul(kw, b).unwrap();
        let o = t.matmul(qw, kv).unwrap();
        let o = t.scale(o, 1.7);
        let cat = t.concat_cols(&[o, a]).unwrap();
        let g = t.gather_rows(cat, &[4, 0, 2]).unwrap();
        let logits = t.matmul_t(g, g).unwrap();
        let dist = rand_tensor(3, 3, 4);
        let logits = t.distance_bias(logits, lv, 1, dist).unwrap();
        let sm = t.softmax_rows(logits).unwrap();
        let col = t.slice_cols(sm, 1, 1).unwrap();
        let l1 = t.cross_entropy(col, &[true, true, false], 1).unwrap();
        let sum = t.add(y, y).unwrap();
        let s1 = t.slice_cols(sum, 3, 1).unwrap();
        let l2 = t.cross_entropy(s1, &[true, false, true, true, true], 4).unwrap();
        let loss = t.sum(&[l1, l2]).unwrap();
        let value = t.value(loss).data()[0];
        let grads = t.backward(loss).unwrap();
        (value, grads.get(xv).unwrap().to_vec(), grads.get(wv).unwrap().to_vec())
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let x = rand_tensor(5, 4, 1);
        let w = rand_tensor(4, 4, 2);
        let (_, gx, gw) = composite(&x, &w);
        let nx = central_diff(|p| composite(p, &w).0, &x, 1e-6);
        let nw = central_diff(|p| composite(&x, p).0, &w, 1e-6);
        for (a, n) in gx.iter().zip(&nx).chain(gw.iter().zip(&nw)) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(rel < 1e-5, "analytic {a} numeric {n}");
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let w = rand_tensor(2, 2, 3);
        let mut t = Tape::new();
        let c = t.constant(rand_tensor(1, 2, 5));
        let wv = t.param(&w);
        let y = t.matmul(c, wv).unwrap();
        let l = t.cross_entropy(y, &[true, true], 0).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(wv).unwrap().len(), 4);
    }
}
