use crate::error::{Error, Result};

use super::tensor::{self, Tensor, LAYER_NORM_EPS};

pub type TensorId = usize;

enum Op {
    Leaf,
    Constant,
    Matmul(TensorId, TensorId),
    Add(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f32),
    Concat(TensorId, TensorId),
    Slice(TensorId, usize, usize),
    Mean(TensorId),
    SumSquares(TensorId),
    Mish(TensorId),
    LayerNormLite(TensorId, TensorId),
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Wengert tape: ops append nodes during the forward pass; `backward`
/// replays them in reverse index order (reverse topological order, since
/// inputs always precede outputs) and accumulates vector-Jacobian products.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; backward is unavailable. Used for
    /// pure forward evaluation so inference and training share one code path.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a trainable leaf. In inference mode this is a constant.
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        let needs = self.grad_enabled;
        self.push(value.with_requires_grad(needs), needs, Op::Leaf)
    }

    /// Register a non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.push(value.with_requires_grad(false), false, Op::Constant)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn take_value(&self, id: TensorId) -> Tensor {
        self.nodes[id].value.clone()
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> TensorId {
        let op = if self.grad_enabled { op } else { Op::Constant };
        self.nodes.push(Node {
            value,
            needs_grad: needs_grad && self.grad_enabled,
            op,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, self.needs(&[a, b]), Op::Matmul(a, b)))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let v = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(v, self.needs(&[a, b]), Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let v = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push(v, self.needs(&[a, b]), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, c: f32) -> Result<TensorId> {
        let v = tensor::scale(self.value(a), c)?;
        Ok(self.push(v, self.needs(&[a]), Op::Scale(a, c)))
    }

    pub fn concat(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let v = tensor::concat(self.value(a), self.value(b))?;
        Ok(self.push(v, self.needs(&[a, b]), Op::Concat(a, b)))
    }

    pub fn slice(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let v = tensor::slice(self.value(a), start, end)?;
        Ok(self.push(v, self.needs(&[a]), Op::Slice(a, start, end)))
    }

    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let v = tensor::mean(self.value(a))?;
        Ok(self.push(v, self.needs(&[a]), Op::Mean(a)))
    }

    pub fn sum_of_squares(&mut self, a: TensorId) -> Result<TensorId> {
        let v = tensor::sum_of_squares(self.value(a))?;
        Ok(self.push(v, self.needs(&[a]), Op::SumSquares(a)))
    }

    pub fn mish(&mut self, a: TensorId) -> Result<TensorId> {
        let v = tensor::mish(self.value(a))?;
        Ok(self.push(v, self.needs(&[a]), Op::Mish(a)))
    }

    pub fn sinusoid(&mut self, step: usize, e: usize) -> Result<TensorId> {
        let v = tensor::sinusoid(step, e)?;
        Ok(self.push(v, false, Op::Constant))
    }

    pub fn layer_norm_lite(&mut self, x: TensorId, gain: TensorId) -> Result<TensorId> {
        let v = tensor::layer_norm_lite(self.value(x), self.value(gain))?;
        Ok(self.push(v, self.needs(&[x, gain]), Op::LayerNormLite(x, gain)))
    }

    /// Reverse pass from a scalar loss. Consumes the tape; every leaf gets a
    /// gradient entry (zeros when the loss does not depend on it).
    pub fn backward(self, loss: TensorId) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::runtime("backward on an empty tape"));
        }
        if !self.grad_enabled {
            return Err(Error::runtime("backward on an inference tape"));
        }
        let loss_node = &self.nodes[loss];
        if !loss_node.value.is_scalar() {
            return Err(Error::NotScalar {
                op: "backward",
                shape: loss_node.value.shape().to_vec(),
            });
        }

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; n];
        grads[loss] = Some(vec![1.0]);

        for id in (0..n).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_vjp(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        let mut out: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                let buf = grads[id]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                out[id] = Some(
                    Tensor::from_vec(node.value.shape().to_vec(), buf)
                        .expect("gradient shape matches leaf"),
                );
            }
        }
        Ok(Gradients { grads: out })
    }

    fn apply_vjp(&self, id: TensorId, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[id];
        match node.op {
            Op::Leaf | Op::Constant => {}
            Op::Matmul(a, b) => {
                let (m, k) = self.nodes[a].value.rows_cols();
                let n = self.nodes[b].value.shape()[1];
                if self.nodes[a].needs_grad {
                    let da = grad_buf(&mut grads[a], m * k);
                    tensor::matmul_nt_into(da, g, self.nodes[b].value.as_slice(), m, n, k);
                }
                if self.nodes[b].needs_grad {
                    let db = grad_buf(&mut grads[b], k * n);
                    tensor::matmul_tn_into(db, self.nodes[a].value.as_slice(), g, m, k, n);
                }
            }
            Op::Add(a, b) => {
                if self.nodes[a].needs_grad {
                    let da = grad_buf(&mut grads[a], self.nodes[a].value.numel());
                    for (o, &gv) in da.iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                if self.nodes[b].needs_grad {
                    let bn = self.nodes[b].value.numel();
                    let db = grad_buf(&mut grads[b], bn);
                    if bn == g.len() {
                        for (o, &gv) in db.iter_mut().zip(g) {
                            *o += gv;
                        }
                    } else {
                        // broadcast rhs: column-sum the incoming gradient
                        for row in g.chunks(bn) {
                            for (o, &gv) in db.iter_mut().zip(row) {
                                *o += gv;
                            }
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a].value.as_slice();
                let bv = self.nodes[b].value.as_slice();
                let bn = bv.len();
                let broadcast = bn != av.len();
                if self.nodes[a].needs_grad {
                    let da = grad_buf(&mut grads[a], av.len());
                    if broadcast {
                        for (row_o, row_g) in da.chunks_mut(bn).zip(g.chunks(bn)) {
                            for ((o, &gv), &b_j) in row_o.iter_mut().zip(row_g).zip(bv) {
                                *o += gv * b_j;
                            }
                        }
                    } else {
                        for ((o, &gv), &b_j) in da.iter_mut().zip(g).zip(bv) {
                            *o += gv * b_j;
                        }
                    }
                }
                if self.nodes[b].needs_grad {
                    let db = grad_buf(&mut grads[b], bn);
                    if broadcast {
                        for (row_a, row_g) in av.chunks(bn).zip(g.chunks(bn)) {
                            for ((o, &gv), &a_j) in db.iter_mut().zip(row_g).zip(row_a) {
                                *o += gv * a_j;
                            }
                        }
                    } else {
                        for ((o, &gv), &a_j) in db.iter_mut().zip(g).zip(av) {
                            *o += gv * a_j;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.nodes[a].needs_grad {
                    let da = grad_buf(&mut grads[a], self.nodes[a].value.numel());
                    for (o, &gv) in da.iter_mut().zip(g) {
                        *o += gv * c;
                    }
                }
            }
            Op::Concat(a, b) => {
                let na = self.nodes[a].value.numel();
                if self.nodes[a].needs_grad {
                    let da = grad_buf(&mut grads[a], na);
                    for (o, &gv) in da.iter_mut().zip(&g[..na]) {
                        *o += gv;
                    }
                }
                if self.nodes[b].needs_grad {
                    let db = grad_buf(&mut grads[b], self.nodes[b].value.numel());
                    for (o, &gv) in db.iter_mut().zip(&g[na..]) {
                        *o += gv;
                    }
                }
            }
            Op::Slice(a, start, _end) => {
                if self.nodes[a].needs_grad {
                    let (_, width) = self.nodes[a].value.rows_cols();
                    let w = if self.nodes[a].value.shape().len() == 1 {
                        1
                    } else {
                        width
                    };
                    let da = grad_buf(&mut grads[a], self.nodes[a].value.numel());
                    for (o, &gv) in da[start * w..start * w + g.len()].iter_mut().zip(g) {
                        *o += gv;
                    }
                }
            }
            Op::Mean(a) => {
                if self.nodes[a].needs_grad {
                    let n = self.nodes[a].value.numel();
                    let gv = g[0] / n as f32;
                    let da = grad_buf(&mut grads[a], n);
                    for o in da.iter_mut() {
                        *o += gv;
                    }
                }
            }
            Op::SumSquares(a) => {
                if self.nodes[a].needs_grad {
                    let av = self.nodes[a].value.as_slice();
                    let da = grad_buf(&mut grads[a], av.len());
                    for (o, &x) in da.iter_mut().zip(av) {
                        *o += 2.0 * g[0] * x;
                    }
                }
            }
            Op::Mish(a) => {
                if self.nodes[a].needs_grad {
                    let av = self.nodes[a].value.as_slice();
                    let da = grad_buf(&mut grads[a], av.len());
                    for ((o, &gv), &x) in da.iter_mut().zip(g).zip(av) {
                        let sp = tensor::softplus(x);
                        let t = sp.tanh();
                        let sig = 1.0 / (1.0 + (-x).exp());
                        *o += gv * (t + x * (1.0 - t * t) * sig);
                    }
                }
            }
            Op::LayerNormLite(x, gain) => {
                let xv = self.nodes[x].value.as_slice();
                let gv = self.nodes[gain].value.as_slice();
                let w = gv.len();
                let h = xv.len() / w;
                for r in 0..h {
                    let row = &xv[r * w..(r + 1) * w];
                    let grow = &g[r * w..(r + 1) * w];
                    let mu: f32 = row.iter().sum::<f32>() / w as f32;
                    let var: f32 =
                        row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f32>() / w as f32;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    if self.nodes[gain].needs_grad {
                        let dg = grad_buf(&mut grads[gain], w);
                        for ((o, &gy), &v) in dg.iter_mut().zip(grow).zip(row) {
                            *o += gy * (v - mu) * inv;
                        }
                    }
                    if self.nodes[x].needs_grad {
                        let mut m1 = 0.0f32;
                        let mut m2 = 0.0f32;
                        for j in 0..w {
                            let xhat = (row[j] - mu) * inv;
                            let dxhat = grow[j] * gv[j];
                            m1 += dxhat;
                            m2 += dxhat * xhat;
                        }
                        m1 /= w as f32;
                        m2 /= w as f32;
                        let dx = grad_buf(&mut grads[x], xv.len());
                        for j in 0..w {
                            let xhat = (row[j] - mu) * inv;
                            let dxhat = grow[j] * gv[j];
                            dx[r * w + j] += inv * (dxhat - m1 - xhat * m2);
                        }
                    }
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn grad_buf(slot: &mut Option<Vec<f32>>, n: usize) -> &mut [f32] {
    slot.get_or_insert_with(|| vec![0.0; n]).as_mut_slice()
}

/// Gradients per leaf, indexed by the leaf's `TensorId`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: TensorId) -> Option<Tensor> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let loss = tape.sum_of_squares(w).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_yields_zero_gradients() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let c = tape.constant(Tensor::scalar(3.0));
        let loss = tape.mean(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            tape.backward(w),
            Err(Error::NotScalar { .. })
        ));
    }

    #[test]
    fn reused_input_accumulates() {
        // loss = mean(x * x); d/dx = 2x / n
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![3.0, -1.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.mean(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().as_slice(), &[3.0, -1.0]);
    }

    #[test]
    fn inference_tape_refuses_backward() {
        let mut tape = Tape::inference();
        let w = tape.leaf(Tensor::scalar(1.0));
        let loss = tape.mean(w).unwrap();
        assert!(tape.backward(loss).is_err());
    }
}
