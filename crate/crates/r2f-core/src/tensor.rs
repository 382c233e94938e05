//! Dense row-major f32 tensors and the matmul kernels everything runs on.
//!
//! Reductions accumulate in f64 so gradient checks against central
//! differences stay meaningful at f32 storage precision.

use crate::{Error, Result};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Flat row-major tensor. Invariant: `data.len() == shape.iter().product()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::new".into(),
                detail: format!("shape {:?} wants {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f32) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: (0..numel).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows/cols for a 2-d tensor; scalars and vectors are 1 x n.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 { self.shape[0] } else { 1 }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() { Ok(()) } else { Err(Error::NonFinite(context.into())) }
    }

    /// Euclidean norm, accumulated in f64.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt()
    }
}

// ── kernels ──────────────────────────────────────────────────────────

/// Dot product with f64 accumulation, 4-way unrolled.
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let (mut s0, mut s1, mut s2, mut s3) = (0f64, 0f64, 0f64, 0f64);
    let chunks = n / 4;
    for i in 0..chunks {
        let j = i * 4;
        s0 += a[j] as f64 * b[j] as f64;
        s1 += a[j + 1] as f64 * b[j + 1] as f64;
        s2 += a[j + 2] as f64 * b[j + 2] as f64;
        s3 += a[j + 3] as f64 * b[j + 3] as f64;
    }
    for j in chunks * 4..n {
        s0 += a[j] as f64 * b[j] as f64;
    }
    (s0 + s1) + (s2 + s3)
}

pub fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0f32; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

// Work-size threshold below which row-parallel dispatch is not worth it.
#[cfg(feature = "parallel")]
const PAR_FLOP_THRESHOLD: usize = 1 << 18;

/// C[m,n] = A[m,k] * B[k,n]. Packs B^T once, then row-by-row dots.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let bt = transpose(b, k, n);
    matmul_nt(a, &bt, m, k, n)
}

/// C[m,n] = A[m,k] * B^T where `bt` is [n,k] row-major.
/// Parallel and sequential paths produce bit-identical results: each output
/// element is an independent f64-accumulated dot.
pub fn matmul_nt(a: &[f32], bt: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(bt.len(), n * k);
    let mut c = vec![0f32; m * n];
    #[cfg(feature = "parallel")]
    {
        if 2 * m * k * n >= PAR_FLOP_THRESHOLD {
            c.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
                matmul_nt_row(&a[i * k..(i + 1) * k], bt, row, k, n);
            });
            return c;
        }
    }
    matmul_nt_seq_into(a, bt, &mut c, m, k, n);
    c
}

/// Sequential path, always available (used directly by the bench suite).
pub fn matmul_nt_seq(a: &[f32], bt: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0f32; m * n];
    matmul_nt_seq_into(a, bt, &mut c, m, k, n);
    c
}

/// Rayon path regardless of size threshold (bench comparison hook).
#[cfg(feature = "parallel")]
pub fn matmul_nt_par(a: &[f32], bt: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0f32; m * n];
    c.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        matmul_nt_row(&a[i * k..(i + 1) * k], bt, row, k, n);
    });
    c
}

fn matmul_nt_seq_into(a: &[f32], bt: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        matmul_nt_row(&a[i * k..(i + 1) * k], bt, &mut c[i * n..(i + 1) * n], k, n);
    }
}

// One output row: four B^T rows at a time to amortize loads of the A row.
fn matmul_nt_row(ar: &[f32], bt: &[f32], out: &mut [f32], k: usize, n: usize) {
    let nb = n / 4 * 4;
    let mut j = 0;
    while j < nb {
        let b0 = &bt[j * k..(j + 1) * k];
        let b1 = &bt[(j + 1) * k..(j + 2) * k];
        let b2 = &bt[(j + 2) * k..(j + 3) * k];
        let b3 = &bt[(j + 3) * k..(j + 4) * k];
        let (mut s0, mut s1, mut s2, mut s3) = (0f64, 0f64, 0f64, 0f64);
        for t in 0..k {
            let av = ar[t] as f64;
            s0 += av * b0[t] as f64;
            s1 += av * b1[t] as f64;
            s2 += av * b2[t] as f64;
            s3 += av * b3[t] as f64;
        }
        out[j] = s0 as f32;
        out[j + 1] = s1 as f32;
        out[j + 2] = s2 as f32;
        out[j + 3] = s3 as f32;
        j += 4;
    }
    while j < n {
        out[j] = dot_f64(ar, &bt[j * k..(j + 1) * k]) as f32;
        j += 1;
    }
}
