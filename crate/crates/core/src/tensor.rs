//! Dense row-major tensors backed by shared, immutable buffers.
//!
//! Every buffer is registered with a process-wide byte counter so that the
//! benchmark harness can report peak live tensor memory per decode path.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

static LIVE_BYTES: AtomicUsize = AtomicUsize::new(0);
static PEAK_BYTES: AtomicUsize = AtomicUsize::new(0);

/// Counters over live tensor buffer bytes.
pub mod alloc_stats {
    use super::*;

    pub fn live_bytes() -> usize {
        LIVE_BYTES.load(Ordering::Relaxed)
    }

    pub fn peak_bytes() -> usize {
        PEAK_BYTES.load(Ordering::Relaxed)
    }

    /// Resets the peak to the current live level.
    pub fn reset_peak() {
        PEAK_BYTES.store(LIVE_BYTES.load(Ordering::Relaxed), Ordering::Relaxed);
    }

    pub(super) fn acquire(bytes: usize) {
        let live = LIVE_BYTES.fetch_add(bytes, Ordering::Relaxed) + bytes;
        PEAK_BYTES.fetch_max(live, Ordering::Relaxed);
    }

    pub(super) fn release(bytes: usize) {
        LIVE_BYTES.fetch_sub(bytes, Ordering::Relaxed);
    }
}

struct Buffer(Vec<f64>);

impl Buffer {
    fn new(data: Vec<f64>) -> Self {
        alloc_stats::acquire(data.len() * std::mem::size_of::<f64>());
        Buffer(data)
    }
}

impl Drop for Buffer {
    fn drop(&mut self) {
        alloc_stats::release(self.0.len() * std::mem::size_of::<f64>());
    }
}

/// Growable scratch buffer whose capacity is counted like tensor buffers.
///
/// Used for caches that are appended to in place (decoder KV caches).
#[derive(Default)]
pub struct TrackedVec {
    data: Vec<f64>,
    counted: usize,
}

impl TrackedVec {
    pub fn new() -> Self {
        TrackedVec::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        let mut v = TrackedVec::default();
        v.data.reserve_exact(n);
        v.recount();
        v
    }

    fn recount(&mut self) {
        let bytes = self.data.capacity() * std::mem::size_of::<f64>();
        if bytes > self.counted {
            alloc_stats::acquire(bytes - self.counted);
        } else if bytes < self.counted {
            alloc_stats::release(self.counted - bytes);
        }
        self.counted = bytes;
    }

    pub fn extend_from_slice(&mut self, xs: &[f64]) {
        self.data.extend_from_slice(xs);
        if self.data.capacity() * std::mem::size_of::<f64>() != self.counted {
            self.recount();
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f64>()
    }
}

impl Clone for TrackedVec {
    fn clone(&self) -> Self {
        let mut v = TrackedVec::with_capacity(self.data.capacity());
        v.extend_from_slice(&self.data);
        v
    }
}

impl Drop for TrackedVec {
    fn drop(&mut self) {
        alloc_stats::release(self.counted);
    }
}

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Buffer>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(Buffer::new(data)),
        })
    }

    /// Builds a rank-2 tensor. Panics if `data.len() != rows * cols`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Tensor {
            shape: vec![rows, cols],
            data: Arc::new(Buffer::new(data)),
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data: Arc::new(Buffer::new(data)),
        }
    }

    /// A `1 x n` row.
    pub fn row(data: Vec<f64>) -> Self {
        Tensor::matrix(1, data.len(), data)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::vector(vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(Buffer::new(vec![0.0; n])),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.0.len()
    }

    /// Row count; a rank-1 tensor is one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Column count (size of the last axis).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn data(&self) -> &[f64] {
        &self.data.0
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data.0[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data.0[i * self.cols() + j]
    }

    pub fn item(&self) -> Option<f64> {
        (self.numel() == 1).then(|| self.data.0[0])
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.0.clone()
    }

    pub fn is_finite(&self) -> bool {
        self.data.0.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    /// Copies the given rows into a new `rows.len() x cols` tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let c = self.cols();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(self.row_slice(r));
        }
        Tensor::matrix(rows.len(), c, out)
    }

    pub fn bytes(&self) -> usize {
        self.numel() * std::mem::size_of::<f64>()
    }

    /// True when both tensors have the same shape and bitwise-equal data.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data() == other.data()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!((t.rows(), t.cols()), (2, 3));
    }

    #[test]
    fn live_bytes_track_buffers() {
        let t = Tensor::zeros(&[128, 128]);
        assert!(alloc_stats::live_bytes() >= t.bytes());
        assert!(alloc_stats::peak_bytes() >= t.bytes());
    }
}
