use std::sync::Arc;



use crate::error::{Error, Result};

/// Small epsilon inside layer-norm-lite's variance sqrt.
pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Dense row-major f32 tensor of rank 1 or 2. Immutable value type;
/// clones share the underlying buffer.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.is_empty() || shape.len() > 2 {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![0.0; numel]),
            requires_grad: false,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![v]),
            requires_grad: false,
        }
    }

    /// Fan-in scaled uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    pub fn uniform_fan_in(shape: Vec<usize>, fan_in: usize, rng: &mut impl rand::Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
        }
    }

    /// Standard normal draws, one per element, in row-major order.
    pub fn std_normal(shape: Vec<usize>, rng: &mut impl rand::Rng) -> Self {
        let numel: usize = shape.iter().product();
        let dist = rand_distr::StandardNormal;
        let data: Vec<f32> = (0..numel)
            .map(|_| {
                let v: f64 = rng.sample(dist);
                v as f32
            })
            .collect();
        Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f32 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    /// Mutable access to the buffer; copies if it is shared.
    pub fn data_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1]),
        }
    }
}

fn check_finite(t: Tensor, op: &'static str) -> Result<Tensor> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

/// c[m,n] = a[m,k] @ b[k,n]. A 1-D lhs is treated as a row vector and the
/// result stays 1-D.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if b.shape.len() != 2 {
        return Err(shape_err("matmul", a, b));
    }
    let (m, k) = a.rows_cols();
    if k != b.shape[0] {
        return Err(shape_err("matmul", a, b));
    }
    let n = b.shape[1];
    let mut out = vec![0.0f32; m * n];
    matmul_into(&mut out, a.as_slice(), b.as_slice(), m, k, n);
    let shape = if a.shape.len() == 1 {
        vec![n]
    } else {
        vec![m, n]
    };
    check_finite(Tensor::from_vec(shape, out)?, "matmul")
}

/// out[m,n] += a[m,k] @ b[k,n], contiguous inner loop over n.
pub(crate) fn matmul_into(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// out[m,k] += c[m,n] @ b[k,n]^T  (rows of c dotted with rows of b)
pub(crate) fn matmul_nt_into(out: &mut [f32], c: &[f32], b: &[f32], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let c_row = &c[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (kk, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0f32;
            for (&cv, &bv) in c_row.iter().zip(b_row) {
                acc += cv * bv;
            }
            *o += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T @ c[m,n]
pub(crate) fn matmul_tn_into(out: &mut [f32], a: &[f32], c: &[f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &c[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &cv) in out_row.iter_mut().zip(c_row) {
                *o += av * cv;
            }
        }
    }
}

/// Elementwise add; also accepts a 1-D rhs broadcast over the rows of a 2-D lhs.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape == b.shape {
        let data: Vec<f32> = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(&x, &y)| x + y)
            .collect();
        return check_finite(Tensor::from_vec(a.shape.clone(), data)?, "add");
    }
    if a.shape.len() == 2 && b.shape.len() == 1 && a.shape[1] == b.shape[0] {
        let n = b.shape[0];
        let mut data = a.as_slice().to_vec();
        for row in data.chunks_mut(n) {
            for (x, &y) in row.iter_mut().zip(b.as_slice()) {
                *x += y;
            }
        }
        return check_finite(Tensor::from_vec(a.shape.clone(), data)?, "add");
    }
    Err(shape_err("add", a, b))
}

/// Elementwise multiply; same broadcast rule as `add`.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape == b.shape {
        let data: Vec<f32> = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(&x, &y)| x * y)
            .collect();
        return check_finite(Tensor::from_vec(a.shape.clone(), data)?, "mul");
    }
    if a.shape.len() == 2 && b.shape.len() == 1 && a.shape[1] == b.shape[0] {
        let n = b.shape[0];
        let mut data = a.as_slice().to_vec();
        for row in data.chunks_mut(n) {
            for (x, &y) in row.iter_mut().zip(b.as_slice()) {
                *x *= y;
            }
        }
        return check_finite(Tensor::from_vec(a.shape.clone(), data)?, "mul");
    }
    Err(shape_err("mul", a, b))
}

pub fn scale(a: &Tensor, c: f32) -> Result<Tensor> {
    let data: Vec<f32> = a.as_slice().iter().map(|&x| x * c).collect();
    check_finite(Tensor::from_vec(a.shape.clone(), data)?, "scale")
}

/// Concatenate along axis 0: two vectors end to end, or two matrices by rows.
pub fn concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let shape = match (a.shape.as_slice(), b.shape.as_slice()) {
        ([la], [lb]) => vec![la + lb],
        ([ra, ca], [rb, cb]) if ca == cb => vec![ra + rb, *ca],
        _ => return Err(shape_err("concat", a, b)),
    };
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    data.extend_from_slice(a.as_slice());
    data.extend_from_slice(b.as_slice());
    check_finite(Tensor::from_vec(shape, data)?, "concat")
}

/// Rows [start, end) of a 2-D tensor, or elements [start, end) of a vector.
pub fn slice(a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (len, width) = match a.shape.as_slice() {
        [l] => (*l, 1),
        [r, c] => (*r, *c),
        _ => unreachable!(),
    };
    if start >= end || end > len {
        return Err(Error::ShapeMismatch {
            op: "slice",
            lhs: a.shape.clone(),
            rhs: vec![start, end],
        });
    }
    let data = a.as_slice()[start * width..end * width].to_vec();
    let shape = if a.shape.len() == 1 {
        vec![end - start]
    } else {
        vec![end - start, width]
    };
    check_finite(Tensor::from_vec(shape, data)?, "slice")
}

pub fn mean(a: &Tensor) -> Result<Tensor> {
    let sum: f32 = a.as_slice().iter().sum();
    check_finite(Tensor::scalar(sum / a.numel() as f32), "mean")
}

pub fn sum_of_squares(a: &Tensor) -> Result<Tensor> {
    let sum: f32 = a.as_slice().iter().map(|&x| x * x).sum();
    check_finite(Tensor::scalar(sum), "sum_of_squares")
}

pub(crate) fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn mish_scalar(x: f32) -> f32 {
    x * softplus(x).tanh()
}

/// mish(x) = x * tanh(softplus(x))
pub fn mish(a: &Tensor) -> Result<Tensor> {
    let data: Vec<f32> = a.as_slice().iter().map(|&x| mish_scalar(x)).collect();
    check_finite(Tensor::from_vec(a.shape.clone(), data)?, "mish")
}

/// Sinusoidal step embedding: interleaved (sin, cos) pairs at geometrically
/// spaced frequencies, length `e` (must be even).
pub fn sinusoid(step: usize, e: usize) -> Result<Tensor> {
    if e == 0 || e % 2 != 0 {
        return Err(Error::config(format!(
            "sinusoid embedding dim must be even and positive, got {e}"
        )));
    }
    let half = e / 2;
    let mut data = vec![0.0f32; e];
    for j in 0..half {
        let freq = (10000f64).powf(-(2.0 * j as f64) / e as f64);
        let angle = step as f64 * freq;
        data[2 * j] = angle.sin() as f32;
        data[2 * j + 1] = angle.cos() as f32;
    }
    check_finite(Tensor::from_vec(vec![e], data)?, "sinusoid")
}

/// Normalize each row of x over the feature axis and apply a learned gain:
/// y[t,j] = gain[j] * (x[t,j] - mean_t) / sqrt(var_t + eps)
pub fn layer_norm_lite(x: &Tensor, gain: &Tensor) -> Result<Tensor> {
    if x.shape.len() != 2 || gain.shape.len() != 1 || gain.shape[0] != x.shape[1] {
        return Err(shape_err("layer_norm_lite", x, gain));
    }
    let (h, w) = (x.shape[0], x.shape[1]);
    let g = gain.as_slice();
    let mut data = vec![0.0f32; h * w];
    for (row_out, row_in) in data.chunks_mut(w).zip(x.as_slice().chunks(w)) {
        let mu: f32 = row_in.iter().sum::<f32>() / w as f32;
        let var: f32 = row_in.iter().map(|&v| (v - mu) * (v - mu)).sum::<f32>() / w as f32;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for ((o, &v), &gj) in row_out.iter_mut().zip(row_in).zip(g) {
            *o = gj * (v - mu) * inv;
        }
    }
    check_finite(Tensor::from_vec(vec![h, w], data)?, "layer_norm_lite")
}
