//! Dense tensors, seeded random streams and a finite-difference gradient oracle.
//!
//! Storage is 32-bit; every reduction (dot products, norms, matrix-vector
//! products) accumulates in 64-bit in a fixed sequential order so that seeded
//! runs are bit-reproducible.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("expected rank {expected}, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    Length { len: usize, shape: Vec<usize> },
    #[error("degenerate (zero-norm) vector")]
    DegenerateVector,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Row-major tensor of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) || shape.iter().product::<usize>() != data.len() {
            return Err(NumericsError::Length {
                len: data.len(),
                shape,
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(NumericsError::NonFinite("tensor data".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| x as f32).collect())
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        assert!(n > 0, "tensor shape must have positive dimensions");
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers must keep values finite;
    /// [`DenseTensor::check_finite`] re-validates.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(NumericsError::NonFinite(what.to_string()))
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x as f64).collect()
    }

    fn expect_rank(&self, rank: usize) -> Result<()> {
        if self.rank() == rank {
            Ok(())
        } else {
            Err(NumericsError::Rank {
                expected: rank,
                shape: self.shape.clone(),
            })
        }
    }
}

/// Sequential 64-bit dot product.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .fold(0.0f64, |acc, (&x, &y)| acc + x as f64 * y as f64)
}

pub fn dot64(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm64(a: &[f64]) -> f64 {
    dot64(a, a).sqrt()
}

pub fn matvec(m: &DenseTensor, v: &DenseTensor) -> Result<DenseTensor> {
    m.expect_rank(2)?;
    v.expect_rank(1)?;
    if m.shape[1] != v.shape[0] {
        return Err(NumericsError::ShapeMismatch {
            left: m.shape.clone(),
            right: v.shape.clone(),
        });
    }
    m.check_finite("matrix")?;
    v.check_finite("vector")?;
    let cols = m.shape[1];
    let out: Vec<f32> = m
        .data
        .chunks_exact(cols)
        .map(|row| dot(row, &v.data) as f32)
        .collect();
    DenseTensor::vector(out)
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine(a: &DenseTensor, b: &DenseTensor) -> Result<f64> {
    a.expect_rank(1)?;
    b.expect_rank(1)?;
    if a.shape != b.shape {
        return Err(NumericsError::ShapeMismatch {
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    a.check_finite("cosine lhs")?;
    b.check_finite("cosine rhs")?;
    cosine_slices(&a.data, &b.data)
}

pub fn cosine_slices(a: &[f32], b: &[f32]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(NumericsError::DegenerateVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Max relative error between central differences of `f` at `theta` and
/// `analytic`: `max_k |fd_k - g_k| / max(1, |g_k|)`.
///
/// The step is taken in `f32` storage, so the denominator uses the realised
/// distance between the two perturbed coordinates rather than `2 * eps`.
pub fn grad_check<F>(mut f: F, theta: &DenseTensor, analytic: &DenseTensor, eps: f64) -> Result<f64>
where
    F: FnMut(&DenseTensor) -> f64,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(NumericsError::InvalidArgument(format!(
            "eps must lie in (0, 1e-2], got {eps}"
        )));
    }
    if theta.shape != analytic.shape {
        return Err(NumericsError::ShapeMismatch {
            left: theta.shape.clone(),
            right: analytic.shape.clone(),
        });
    }
    let mut probe = theta.clone();
    let mut worst = 0.0f64;
    for k in 0..theta.len() {
        let base = theta.data[k];
        let hi = (base as f64 + eps) as f32;
        let lo = (base as f64 - eps) as f32;
        probe.data[k] = hi;
        let f_hi = f(&probe);
        probe.data[k] = lo;
        let f_lo = f(&probe);
        probe.data[k] = base;
        if !f_hi.is_finite() || !f_lo.is_finite() {
            return Err(NumericsError::NonFinite(format!("objective at coordinate {k}")));
        }
        let fd = (f_hi - f_lo) / (hi as f64 - lo as f64);
        let g = analytic.data[k] as f64;
        worst = worst.max((fd - g).abs() / g.abs().max(1.0));
    }
    Ok(worst)
}

/// Seeded ChaCha8 stream; equal `(seed, stream_id)` pairs produce identical
/// draw sequences on every platform.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    pub fn gaussian(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n` (rejection sampled, unbiased).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.inner.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
