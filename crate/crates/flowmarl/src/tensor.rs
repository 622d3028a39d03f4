//! Dense row-major f64 tensors and the numeric kernels behind the tape.
//!
//! Kernels split across independent output cells (rows or column blocks)
//! when the `parallel` feature is on and the work is large enough; the
//! inner accumulation order per cell is fixed, so parallel and sequential
//! execution produce bitwise identical results.

use crate::error::{Error, Result};
use crate::exec;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                format!("{} elements for shape {:?}", n, shape),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Build a matrix from per-row slices; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("from_rows: no rows".into()));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(
                    format!("row of length {}", cols),
                    format!("row {} of length {}", i, r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data,
        })
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

    /// Number of rows when interpreted as a matrix (1 for vectors/scalars).
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Number of columns when interpreted as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

fn check_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(
            format!("{}: 2-d matrix", what),
            format!("{:?}", t.shape()),
        ));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = check_matrix(a, "matmul lhs")?;
    let (kb, n) = check_matrix(b, "matmul rhs")?;
    if k != kb {
        return Err(Error::shape(
            format!("inner dim {}", k),
            format!("inner dim {}", kb),
        ));
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    let row_kernel = |i: usize, orow: &mut [f64]| {
        let arow = &ad[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    };
    let work = m * n * k;
    if exec::use_parallel(work) && m > 1 {
        #[cfg(feature = "parallel")]
        {
            out.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, orow)| row_kernel(i, orow));
            return Tensor::new(vec![m, n], out);
        }
    }
    if exec::use_parallel(work) && m == 1 {
        // Single-row product: split output columns instead.
        #[cfg(feature = "parallel")]
        {
            let chunk = (n / rayon::current_num_threads().max(1)).max(64);
            out.par_chunks_mut(chunk).enumerate().for_each(|(ci, oc)| {
                let j0 = ci * chunk;
                for (p, &av) in ad[..k].iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * n + j0..p * n + j0 + oc.len()];
                    for (o, &bv) in oc.iter_mut().zip(brow.iter()) {
                        *o += av * bv;
                    }
                }
            });
            return Tensor::new(vec![m, n], out);
        }
    }
    for i in 0..m {
        row_kernel(i, &mut out[i * n..(i + 1) * n]);
    }
    Tensor::new(vec![m, n], out)
}

/// C[k,n] = A^T[k,m] * B[m,n] without materializing A^T.
pub fn matmul_at_b(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = check_matrix(a, "matmul_at_b lhs")?;
    let (mb, n) = check_matrix(b, "matmul_at_b rhs")?;
    if m != mb {
        return Err(Error::shape(
            format!("outer dim {}", m),
            format!("outer dim {}", mb),
        ));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; k * n];
    let row_kernel = |i: usize, orow: &mut [f64]| {
        // out[i, :] = sum_r a[r, i] * b[r, :]
        for r in 0..m {
            let av = ad[r * k + i];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[r * n..(r + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    };
    if exec::use_parallel(m * n * k) && k > 1 {
        #[cfg(feature = "parallel")]
        {
            out.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, orow)| row_kernel(i, orow));
            return Tensor::new(vec![k, n], out);
        }
    }
    for i in 0..k {
        row_kernel(i, &mut out[i * n..(i + 1) * n]);
    }
    Tensor::new(vec![k, n], out)
}

/// C[m,k] = A[m,n] * B^T[n,k] without materializing B^T.
pub fn matmul_a_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = check_matrix(a, "matmul_a_bt lhs")?;
    let (k, nb) = check_matrix(b, "matmul_a_bt rhs")?;
    if n != nb {
        return Err(Error::shape(
            format!("inner dim {}", n),
            format!("inner dim {}", nb),
        ));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * k];
    let row_kernel = |i: usize, orow: &mut [f64]| {
        let arow = &ad[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &bd[j * n..(j + 1) * n];
            let mut s = 0.0;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                s += av * bv;
            }
            *o = s;
        }
    };
    if exec::use_parallel(m * n * k) && m > 1 {
        #[cfg(feature = "parallel")]
        {
            out.par_chunks_mut(k)
                .enumerate()
                .for_each(|(i, orow)| row_kernel(i, orow));
            return Tensor::new(vec![m, k], out);
        }
    }
    for i in 0..m {
        row_kernel(i, &mut out[i * k..(i + 1) * k]);
    }
    Tensor::new(vec![m, k], out)
}

/// Broadcast-add a bias row vector onto every row of a matrix.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = check_matrix(x, "add_bias input")?;
    if bias.len() != n {
        return Err(Error::shape(
            format!("bias of length {}", n),
            format!("bias of length {}", bias.len()),
        ));
    }
    let bd = bias.data();
    let mut out = x.data().to_vec();
    for r in 0..m {
        let row = &mut out[r * n..(r + 1) * n];
        for (o, &b) in row.iter_mut().zip(bd.iter()) {
            *o += b;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Column sums of a matrix, as a length-n vector.
pub fn col_sums(x: &Tensor) -> Result<Tensor> {
    let (m, n) = check_matrix(x, "col_sums input")?;
    let xd = x.data();
    let mut out = vec![0.0; n];
    for r in 0..m {
        for (o, &v) in out.iter_mut().zip(xd[r * n..(r + 1) * n].iter()) {
            *o += v;
        }
    }
    Tensor::new(vec![n], out)
}

pub fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn sum_all(x: &Tensor) -> f64 {
    x.data().iter().sum()
}

pub const GELU_COEFF: f64 = 0.044715;

/// tanh via the single-exp identity; noticeably faster than libm tanh on
/// the hot activation path and exact up to exp rounding.
#[inline]
fn fast_tanh(u: f64) -> f64 {
    let e = (-2.0 * u.abs()).exp();
    let t = (1.0 - e) / (1.0 + e);
    if u < 0.0 {
        -t
    } else {
        t
    }
}

/// Tanh-form GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEFF * x * x * x);
    0.5 * x * (1.0 + fast_tanh(u))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEFF * x * x * x);
    let t = fast_tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEFF * x * x)
}

/// Variance floor inside the layer-norm denominator.
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Row-wise layer normalization. Returns the normalized matrix (pre
/// gain/offset) together with each row's inverse standard deviation.
pub fn layer_norm_rows(x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (m, n) = check_matrix(x, "layer_norm input")?;
    let xd = x.data();
    let mut out = vec![0.0; m * n];
    let mut inv_std = vec![0.0; m];
    let row_kernel = |r: usize, orow: &mut [f64]| -> f64 {
        let row = &xd[r * n..(r + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (o, &v) in orow.iter_mut().zip(row.iter()) {
            *o = (v - mean) * is;
        }
        is
    };
    if exec::use_parallel(m * n * 4) && m > 1 {
        #[cfg(feature = "parallel")]
        {
            let stats: Vec<f64> = out
                .par_chunks_mut(n)
                .enumerate()
                .map(|(r, orow)| row_kernel(r, orow))
                .collect();
            inv_std.copy_from_slice(&stats);
            return Ok((Tensor::new(vec![m, n], out)?, inv_std));
        }
    }
    for r in 0..m {
        inv_std[r] = row_kernel(r, &mut out[r * n..(r + 1) * n]);
    }
    Ok((Tensor::new(vec![m, n], out)?, inv_std))
}

/// Row-wise softmax with the usual max-shift for stability.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = check_matrix(x, "softmax input")?;
    let xd = x.data();
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let row = &xd[r * n..(r + 1) * n];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[r * n..(r + 1) * n];
        let mut z = 0.0;
        for (o, &v) in orow.iter_mut().zip(row.iter()) {
            let e = (v - mx).exp();
            *o = e;
            z += e;
        }
        for o in orow.iter_mut() {
            *o /= z;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Map over elements, in parallel for large tensors.
pub fn unary(x: &Tensor, f: impl Fn(f64) -> f64 + Sync) -> Tensor {
    let mut out = vec![0.0; x.len()];
    if exec::use_parallel(x.len() * 8) {
        #[cfg(feature = "parallel")]
        {
            out.par_iter_mut()
                .zip(x.data().par_iter())
                .for_each(|(o, &v)| *o = f(v));
            return Tensor::new(x.shape().to_vec(), out).expect("same shape");
        }
    }
    for (o, &v) in out.iter_mut().zip(x.data().iter()) {
        *o = f(v);
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}
