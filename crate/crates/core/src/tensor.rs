//! Dense row-major tensors, the layer kernels the operator networks are built
//! from (each with an explicit backward), parameter storage and Adam.
//!
//! Everything is generic over [`Real`] so that gradient checks can run the
//! same kernels in `f64`; models train in `f32`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFinite(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(TensorError::Shape {
        op,
        detail: detail.into(),
    })
}

pub trait Real:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    /// `c = alpha * a·b + beta * c` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64(x: f64) -> Self;

    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: callers pass slices covering the full strided extents.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn from_f64(x: f64) -> f32 {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: callers pass slices covering the full strided extents.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn from_f64(x: f64) -> f64 {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }
}

pub(crate) fn lit<F: Real>(x: f64) -> F {
    F::from_f64(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: F) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err("from_vec", format!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Single row `[1, n]`.
    pub fn row_vector(data: Vec<F>) -> Self {
        Tensor {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| F::from_f64(rng.random_range(-bound..=bound)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Glorot-uniform `[fan_in, fan_out]` matrix.
    pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::uniform(&[fan_in, fan_out], bound, rng)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Leading extent, treating the tensor as `[rows, rest]`.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Trailing extent.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    fn row_width(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[F] {
        let w = self.row_width();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let w = self.row_width();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn fill(&mut self, v: F) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) -> Result<()> {
        if self.shape != other.shape {
            return shape_err("add", format!("{:?} vs {:?}", self.shape, other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: F) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| f(*x)).collect(),
        }
    }

    /// Rows `idx` of a 2-D table.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor<F> {
        let w = self.cols();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![idx.len(), w],
            data,
        }
    }

    /// `self[idx[j]] += src[j]`.
    pub fn scatter_add_rows(&mut self, idx: &[usize], src: &Tensor<F>) {
        for (j, &i) in idx.iter().enumerate() {
            for (a, b) in self.row_mut(i).iter_mut().zip(src.row(j)) {
                *a += *b;
            }
        }
    }

    /// Concatenates two `[B, n]` / `[B, m]` matrices along columns.
    pub fn concat_cols(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        if a.rows() != b.rows() || a.shape.len() != 2 || b.shape.len() != 2 {
            return shape_err("concat", format!("{:?} and {:?}", a.shape, b.shape));
        }
        let (n, m) = (a.cols(), b.cols());
        let mut data = Vec::with_capacity(a.len() + b.len());
        for i in 0..a.rows() {
            data.extend_from_slice(a.row(i));
            data.extend_from_slice(b.row(i));
        }
        Ok(Tensor {
            shape: vec![a.rows(), n + m],
            data,
        })
    }

    /// Inverse of [`Tensor::concat_cols`].
    pub fn split_cols(&self, left: usize) -> (Tensor<F>, Tensor<F>) {
        let (rows, cols) = (self.rows(), self.cols());
        let mut a = Tensor::zeros(&[rows, left]);
        let mut b = Tensor::zeros(&[rows, cols - left]);
        for i in 0..rows {
            let r = self.row(i);
            a.row_mut(i).copy_from_slice(&r[..left]);
            b.row_mut(i).copy_from_slice(&r[left..]);
        }
        (a, b)
    }

    /// Stacks `[n_i, w]` matrices vertically.
    pub fn stack_rows(parts: &[&Tensor<F>]) -> Result<Tensor<F>> {
        let w = parts.first().map(|p| p.cols()).unwrap_or(0);
        if parts.iter().any(|p| p.shape.len() != 2 || p.cols() != w) {
            return shape_err("stack_rows", "parts must be 2-D with equal widths");
        }
        let rows = parts.iter().map(|p| p.rows()).sum();
        let mut data = Vec::with_capacity(rows * w);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: vec![rows, w],
            data,
        })
    }

    /// Splits a `[rows, w]` matrix into `rows / chunk` blocks of `chunk` rows.
    pub fn split_rows(&self, chunk: usize) -> Vec<Tensor<F>> {
        let w = self.cols();
        self.data
            .chunks(chunk * w)
            .map(|c| Tensor {
                shape: vec![c.len() / w, w],
                data: c.to_vec(),
            })
            .collect()
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&self, b: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, k, n) = (self.rows(), self.cols(), b.cols());
        if self.shape.len() != 2 || b.shape.len() != 2 || b.rows() != k {
            return shape_err("matmul", format!("{:?} x {:?}", self.shape, b.shape));
        }
        let mut c = Tensor::zeros(&[m, n]);
        F::gemm(m, k, n, F::one(), &self.data, k as isize, 1, &b.data, n as isize, 1, F::zero(), &mut c.data, n as isize, 1);
        Ok(c)
    }

    /// `selfᵀ · b` for `[m, k]`, `[m, n]`.
    pub fn t_matmul(&self, b: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, k, n) = (self.rows(), self.cols(), b.cols());
        if b.rows() != m {
            return shape_err("t_matmul", format!("{:?}ᵀ x {:?}", self.shape, b.shape));
        }
        let mut c = Tensor::zeros(&[k, n]);
        F::gemm(k, m, n, F::one(), &self.data, 1, k as isize, &b.data, n as isize, 1, F::zero(), &mut c.data, n as isize, 1);
        Ok(c)
    }

    /// `self · bᵀ` for `[m, n]`, `[k, n]`.
    pub fn matmul_t(&self, b: &Tensor<F>) -> Result<Tensor<F>> {
        let (m, n, k) = (self.rows(), self.cols(), b.rows());
        if b.cols() != n {
            return shape_err("matmul_t", format!("{:?} x {:?}ᵀ", self.shape, b.shape));
        }
        let mut c = Tensor::zeros(&[m, k]);
        F::gemm(m, n, k, F::one(), &self.data, n as isize, 1, &b.data, 1, n as isize, F::zero(), &mut c.data, k as isize, 1);
        Ok(c)
    }

    /// Column sums of a `[m, n]` matrix, as `[n]`.
    pub fn sum_rows(&self) -> Tensor<F> {
        let n = self.cols();
        let mut out = vec![F::zero(); n];
        for i in 0..self.rows() {
            for (o, x) in out.iter_mut().zip(self.row(i)) {
                *o += *x;
            }
        }
        Tensor {
            shape: vec![n],
            data: out,
        }
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::from_f64(Real::to_f64(*x))).collect(),
        }
    }
}

/// `y = x·W + b` for `x: [B, in]`, `W: [in, out]`, `b: [out]`.
pub fn affine_forward<F: Real>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if x.cols() != w.rows() || b.len() != w.cols() {
        return shape_err(
            "affine",
            format!("x {:?}, W {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        );
    }
    let mut y = x.matmul(w)?;
    let n = y.cols();
    for i in 0..y.rows() {
        for (v, bj) in y.row_mut(i).iter_mut().zip(&b.data[..n]) {
            *v += *bj;
        }
    }
    Ok(y)
}

/// Returns `(dx, dW, db)`.
pub fn affine_backward<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    dy: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let dx = dy.matmul_t(w)?;
    let dw = x.t_matmul(dy)?;
    let db = dy.sum_rows();
    Ok((dx, dw, db))
}

pub fn relu_forward<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| if v > F::zero() { v } else { F::zero() })
}

/// `y` is the forward output.
pub fn relu_backward<F: Real>(y: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let data = y
        .data
        .iter()
        .zip(&dy.data)
        .map(|(y, g)| if *y > F::zero() { *g } else { F::zero() })
        .collect();
    Tensor {
        shape: dy.shape.clone(),
        data,
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct LayerNormCache<F> {
    xhat: Tensor<F>,
    inv_std: Vec<F>,
}

/// Normalizes each row (last axis) then applies `gain`/`bias`.
pub fn layer_norm_forward<F: Real>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    bias: &Tensor<F>,
) -> Result<(Tensor<F>, LayerNormCache<F>)> {
    let n = x.cols();
    if gain.len() != n || bias.len() != n {
        return shape_err("layer_norm", format!("x {:?}, gain {:?}", x.shape(), gain.shape()));
    }
    let rows = x.len() / n.max(1);
    let mut xhat = x.clone();
    let mut y = x.clone();
    let mut inv_std = Vec::with_capacity(rows);
    let nf = lit::<F>(n as f64);
    for i in 0..rows {
        let row = &x.data[i * n..(i + 1) * n];
        let mean = row.iter().copied().sum::<F>() / nf;
        let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() / nf;
        let is = F::one() / (var + lit(LAYER_NORM_EPS)).sqrt();
        inv_std.push(is);
        for j in 0..n {
            let h = (row[j] - mean) * is;
            xhat.data[i * n + j] = h;
            y.data[i * n + j] = h * gain.data[j] + bias.data[j];
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward<F: Real>(
    cache: &LayerNormCache<F>,
    gain: &Tensor<F>,
    dy: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let n = dy.cols();
    let rows = dy.len() / n.max(1);
    let nf = lit::<F>(n as f64);
    let mut dx = dy.clone();
    let mut dgain = Tensor::zeros(&[n]);
    let mut dbias = Tensor::zeros(&[n]);
    let mut dh = vec![F::zero(); n];
    for i in 0..rows {
        let xh = &cache.xhat.data[i * n..(i + 1) * n];
        let g = &dy.data[i * n..(i + 1) * n];
        for j in 0..n {
            dgain.data[j] += g[j] * xh[j];
            dbias.data[j] += g[j];
            dh[j] = g[j] * gain.data[j];
        }
        let mean_dh = dh.iter().copied().sum::<F>() / nf;
        let mean_dh_xh = dh.iter().zip(xh).map(|(a, b)| *a * *b).sum::<F>() / nf;
        for j in 0..n {
            dx.data[i * n + j] = cache.inv_std[i] * (dh[j] - mean_dh - xh[j] * mean_dh_xh);
        }
    }
    (dx, dgain, dbias)
}

/// Inverted dropout. Returns the output and, in training mode, the scaled mask.
pub fn dropout_forward<F: Real, R: Rng + ?Sized>(
    x: &Tensor<F>,
    keep: f64,
    training: bool,
    rng: &mut R,
) -> Result<(Tensor<F>, Option<Vec<F>>)> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(TensorError::Config(format!(
            "dropout keep probability {keep} not in (0, 1]"
        )));
    }
    if !training || keep == 1.0 {
        return Ok((x.clone(), None));
    }
    let scale = lit::<F>(1.0 / keep);
    let mask: Vec<F> = (0..x.len())
        .map(|_| if rng.random::<f64>() < keep { scale } else { F::zero() })
        .collect();
    let mut y = x.clone();
    for (v, m) in y.data.iter_mut().zip(&mask) {
        *v *= *m;
    }
    Ok((y, Some(mask)))
}

pub fn dropout_backward<F: Real>(mask: Option<&[F]>, dy: &Tensor<F>) -> Tensor<F> {
    match mask {
        None => dy.clone(),
        Some(m) => {
            let mut dx = dy.clone();
            for (v, k) in dx.data.iter_mut().zip(m) {
                *v *= *k;
            }
            dx
        }
    }
}

/// Row-wise softmax over the last axis.
pub fn softmax_forward<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let n = x.cols();
    let mut y = x.clone();
    for row in y.data.chunks_mut(n.max(1)) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut total = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    y
}

/// `y` is the forward output.
pub fn softmax_backward<F: Real>(y: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let n = y.cols();
    let mut dx = dy.clone();
    for ((dxr, yr), gr) in dx
        .data
        .chunks_mut(n.max(1))
        .zip(y.data.chunks(n.max(1)))
        .zip(dy.data.chunks(n.max(1)))
    {
        let dot = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum::<F>();
        for j in 0..dxr.len() {
            dxr[j] = yr[j] * (gr[j] - dot);
        }
    }
    dx
}

pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `log σ(x)`, stable for large `|x|`.
pub fn log_sigmoid<F: Real>(x: F) -> F {
    x.min(F::zero()) - (-x.abs()).exp().ln_1p()
}

pub fn sigmoid_forward<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    x.map(sigmoid)
}

/// `y` is the forward output.
pub fn sigmoid_backward<F: Real>(y: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let data = y
        .data
        .iter()
        .zip(&dy.data)
        .map(|(s, g)| *g * *s * (F::one() - *s))
        .collect();
    Tensor {
        shape: dy.shape.clone(),
        data,
    }
}

pub fn log_sigmoid_forward<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    x.map(log_sigmoid)
}

/// `x` is the forward input; `d/dx log σ(x) = σ(-x)`.
pub fn log_sigmoid_backward<F: Real>(x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let data = x
        .data
        .iter()
        .zip(&dy.data)
        .map(|(v, g)| *g * sigmoid(-*v))
        .collect();
    Tensor {
        shape: dy.shape.clone(),
        data,
    }
}

/// Valid cross-correlation. `x: [B, Cin, L]`, `w: [Cout, Cin, K]`, `b: [Cout]`
/// gives `[B, Cout, L - K + 1]`.
pub fn conv1d_forward<F: Real>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] || b.len() != ws[0] {
        return shape_err("conv1d", format!("x {xs:?}, w {ws:?}, b {:?}", b.shape()));
    }
    let (batch, cin, len) = (xs[0], xs[1], xs[2]);
    let (cout, k) = (ws[0], ws[2]);
    if len < k {
        return shape_err("conv1d", format!("input length {len} shorter than kernel {k}"));
    }
    let out_len = len - k + 1;
    let mut y = Tensor::zeros(&[batch, cout, out_len]);
    for n in 0..batch {
        for o in 0..cout {
            let yrow = &mut y.data[(n * cout + o) * out_len..(n * cout + o + 1) * out_len];
            yrow.iter_mut().for_each(|v| *v = b.data[o]);
            for c in 0..cin {
                let xrow = &x.data[(n * cin + c) * len..(n * cin + c + 1) * len];
                let krow = &w.data[(o * cin + c) * k..(o * cin + c + 1) * k];
                for (t, yv) in yrow.iter_mut().enumerate() {
                    let mut acc = F::zero();
                    for j in 0..k {
                        acc += xrow[t + j] * krow[j];
                    }
                    *yv += acc;
                }
            }
        }
    }
    Ok(y)
}

/// Returns `(dx, dw, db)`.
pub fn conv1d_backward<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    dy: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (batch, cin, len) = (x.shape[0], x.shape[1], x.shape[2]);
    let (cout, k) = (w.shape[0], w.shape[2]);
    let out_len = len - k + 1;
    let mut dx = Tensor::zeros(&x.shape);
    let mut dw = Tensor::zeros(&w.shape);
    let mut db = Tensor::zeros(&[cout]);
    for n in 0..batch {
        for o in 0..cout {
            let g = &dy.data[(n * cout + o) * out_len..(n * cout + o + 1) * out_len];
            db.data[o] += g.iter().copied().sum::<F>();
            for c in 0..cin {
                let xoff = (n * cin + c) * len;
                let koff = (o * cin + c) * k;
                for (t, gv) in g.iter().enumerate() {
                    for j in 0..k {
                        dw.data[koff + j] += *gv * x.data[xoff + t + j];
                        dx.data[xoff + t + j] += *gv * w.data[koff + j];
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Non-overlapping max pooling over the last axis of `[B, C, L]`; trailing
/// elements that do not fill a window are dropped. Returns the output and the
/// flat argmax index of every output cell.
pub fn maxpool1d_forward<F: Real>(x: &Tensor<F>, window: usize) -> Result<(Tensor<F>, Vec<usize>)> {
    let xs = x.shape();
    if xs.len() != 3 || window == 0 || xs[2] < window {
        return shape_err("maxpool1d", format!("x {xs:?}, window {window}"));
    }
    let (batch, ch, len) = (xs[0], xs[1], xs[2]);
    let out_len = len / window;
    let mut y = Tensor::zeros(&[batch, ch, out_len]);
    let mut arg = Vec::with_capacity(batch * ch * out_len);
    for bc in 0..batch * ch {
        for t in 0..out_len {
            let start = bc * len + t * window;
            let mut best = start;
            for i in start + 1..start + window {
                if x.data[i] > x.data[best] {
                    best = i;
                }
            }
            y.data[bc * out_len + t] = x.data[best];
            arg.push(best);
        }
    }
    Ok((y, arg))
}

pub fn maxpool1d_backward<F: Real>(input_shape: &[usize], argmax: &[usize], dy: &Tensor<F>) -> Tensor<F> {
    let mut dx = Tensor::zeros(input_shape);
    for (g, &i) in dy.data.iter().zip(argmax) {
        dx.data[i] += *g;
    }
    dx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

/// All trainable tensors of a model in registration order (the canonical
/// checkpoint order).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].grad
    }

    /// Adds `g` into the gradient of `id`.
    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<F>) {
        let acc = &mut self.params[id.0].grad;
        for (a, b) in acc.data.iter_mut().zip(&g.data) {
            *a += *b;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(F::zero());
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub step: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(store: &ParamStore<F>, config: AdamConfig) -> Self {
        AdamState {
            config,
            m: store.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: store.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update over every parameter, then zeroes the
/// gradients. Refuses to touch anything if a gradient is non-finite.
pub fn adam_step<F: Real>(store: &mut ParamStore<F>, state: &mut AdamState<F>, lr: f64) -> Result<()> {
    if let Some(p) = store.iter().find(|p| !p.grad.all_finite()) {
        return Err(TensorError::NonFinite(p.name.clone()));
    }
    if state.m.len() != store.len() {
        return Err(TensorError::Config("optimizer state does not match parameters".into()));
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (lit::<F>(beta1), lit::<F>(beta2));
    let (one_b1, one_b2) = (lit::<F>(1.0 - beta1), lit::<F>(1.0 - beta2));
    let step_size = lit::<F>(lr / c1);
    let c2_sqrt = lit::<F>(c2.sqrt());
    let eps = lit::<F>(eps);
    for (i, p) in store.iter_mut().enumerate() {
        let m = &mut state.m[i].data;
        let v = &mut state.v[i].data;
        for j in 0..p.value.data.len() {
            let g = p.grad.data[j];
            m[j] = b1 * m[j] + one_b1 * g;
            v[j] = b2 * v[j] + one_b2 * g * g;
            p.value.data[j] -= step_size * m[j] / (v[j].sqrt() / c2_sqrt + eps);
        }
        p.grad.fill(F::zero());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn affine_examples() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0f32, 2.0]).unwrap();
        let id = Tensor::<f32>::identity(2);
        assert_eq!(affine_forward(&x, &id, &Tensor::zeros(&[2])).unwrap(), x);
        let b = Tensor::from_vec(&[2], vec![3.0, 3.0]).unwrap();
        assert_eq!(affine_forward(&x, &id, &b).unwrap().data(), &[4.0, 5.0]);
        let w = Tensor::<f32>::zeros(&[3, 2]);
        assert!(matches!(affine_forward(&x, &w, &b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn small_kernels() {
        let x = Tensor::from_vec(&[2], vec![-1.0f32, 2.5]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 2.5]);

        let c = Tensor::from_vec(&[1, 4], vec![3.0f32; 4]).unwrap();
        let (y, _) = layer_norm_forward(&c, &Tensor::filled(&[4], 1.0), &Tensor::zeros(&[4])).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));

        let s = softmax_forward(&Tensor::from_vec(&[1, 2], vec![0.0f32, 0.0]).unwrap());
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_forward(&Tensor::from_vec(&[2, 3], vec![1.0f64, 2.0, 3.0, -5.0, 0.0, 900.0]).unwrap());
        for i in 0..2 {
            assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((log_sigmoid(0.0f64) - (0.5f64).ln()).abs() < 1e-15);
        assert!(log_sigmoid(-1000.0f64).is_finite());
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::from_vec(&[1, 100], (0..100).map(|i| i as f32).collect()).unwrap();
        let (y, mask) = dropout_forward(&x, 0.9, false, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(mask.is_none());
        let (y, mask) = dropout_forward(&x, 0.5, true, &mut rng).unwrap();
        assert!(mask.is_some());
        assert!(y.data().iter().zip(x.data()).all(|(a, b)| *a == 0.0 || *a == 2.0 * b));
        assert!(dropout_forward(&x, 0.0, true, &mut rng).is_err());
        assert!(dropout_forward(&x, 1.5, false, &mut rng).is_err());
    }

    #[test]
    fn conv_and_pool_examples() {
        let x = Tensor::from_vec(&[1, 1, 6], vec![1.0f32; 6]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 6], vec![1.0f32; 6]).unwrap();
        let y = conv1d_forward(&x, &w, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.data(), &[6.0]);
        let short = Tensor::<f32>::zeros(&[1, 1, 5]);
        assert!(conv1d_forward(&short, &w, &Tensor::zeros(&[1])).is_err());
        let x = Tensor::from_vec(&[1, 1, 6], vec![1.0f32, 5.0, 3.0, 2.0, 9.0, 0.0]).unwrap();
        let (y, arg) = maxpool1d_forward(&x, 6).unwrap();
        assert_eq!(y.data(), &[9.0]);
        assert_eq!(arg, vec![4]);
    }

    #[test]
    fn adam_examples() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::from_vec(&[1], vec![0.5]).unwrap());
        let mut state = AdamState::new(&store, AdamConfig::default());
        store.grad_mut(id).fill(1.0);
        adam_step(&mut store, &mut state, 1e-3).unwrap();
        assert!((store.value(id).data()[0] - (0.5 - 1e-3)).abs() < 1e-6);
        assert_eq!(store.grad(id).data()[0], 0.0);

        let before = store.value(id).clone();
        adam_step(&mut store, &mut state, 1e-3).unwrap();
        // zero gradient, but the first moment still carries momentum
        assert!(store.value(id).data()[0] < before.data()[0]);

        let mut fresh = ParamStore::<f32>::new();
        let id = fresh.add("w", Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap());
        let mut state = AdamState::new(&fresh, AdamConfig::default());
        for _ in 0..5 {
            adam_step(&mut fresh, &mut state, 1e-2).unwrap();
        }
        assert_eq!(fresh.value(id).data(), &[1.0, -2.0]);

        fresh.grad_mut(id).data_mut()[0] = f32::NAN;
        assert!(matches!(adam_step(&mut fresh, &mut state, 1e-2), Err(TensorError::NonFinite(_))));
        assert_eq!(fresh.value(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::zeros(&[1]));
        let mut state = AdamState::new(&store, AdamConfig::default());
        for _ in 0..200 {
            let w = store.value(id).data()[0];
            store.grad_mut(id).data_mut()[0] = 2.0 * (w - 3.0);
            adam_step(&mut store, &mut state, 0.1).unwrap();
        }
        assert!((store.value(id).data()[0] - 3.0).abs() < 0.1);
    }

    #[test]
    fn gather_scatter() {
        let t = Tensor::from_vec(&[3, 2], vec![0.0f32, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let g = t.gather_rows(&[2, 0, 2]);
        assert_eq!(g.data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        let mut acc = Tensor::<f32>::zeros(&[3, 2]);
        acc.scatter_add_rows(&[2, 0, 2], &g);
        assert_eq!(acc.data(), &[0.0, 1.0, 0.0, 0.0, 8.0, 10.0]);
    }
}
