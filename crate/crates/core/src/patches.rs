//! Patch partition of a d-dimensional vector and its index algebra.
//!
//! Patch indices are 1-based on the public surface, matching the usual
//! x_1..x_K notation; coordinate ranges are half-open `usize` intervals.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::error::{Error, Result};

/// Partition (d_1, ..., d_K) of R^d into K contiguous patches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LayoutData", into = "LayoutData")]
pub struct PatchLayout {
    dims: Vec<usize>,
    offsets: Vec<usize>,
    total_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct LayoutData {
    dims: Vec<usize>,
}

impl TryFrom<LayoutData> for PatchLayout {
    type Error = Error;
    fn try_from(d: LayoutData) -> Result<Self> {
        PatchLayout::new(d.dims)
    }
}

impl From<PatchLayout> for LayoutData {
    fn from(l: PatchLayout) -> Self {
        LayoutData { dims: l.dims }
    }
}

impl PatchLayout {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::EmptyDims);
        }
        if let Some(index) = dims.iter().position(|&d| d == 0) {
            return Err(Error::ZeroDim { index });
        }
        let mut offsets = Vec::with_capacity(dims.len());
        let mut acc = 0usize;
        for &d in &dims {
            offsets.push(acc);
            acc += d;
        }
        Ok(Self {
            dims,
            offsets,
            total_dim: acc,
        })
    }

    /// Number of patches K.
    pub fn patch_count(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    /// Dimension d_k of patch `k` (1-based).
    pub fn patch_dim(&self, k: usize) -> Result<usize> {
        self.check_range(k, k)?;
        Ok(self.dims[k - 1])
    }

    /// Total dimension of patches 1..k-1 (the conditioning prefix of patch k).
    pub fn prefix_dim(&self, k: usize) -> Result<usize> {
        self.check_range(k, k)?;
        Ok(self.offsets[k - 1])
    }

    fn check_range(&self, l: usize, r: usize) -> Result<()> {
        if l < 1 || r < l || r > self.patch_count() {
            return Err(Error::PatchRange {
                l,
                r,
                k: self.patch_count(),
            });
        }
        Ok(())
    }

    /// Half-open coordinate interval covering patches l..r (1-based, inclusive).
    pub fn coord_range(&self, l: usize, r: usize) -> Result<Range<usize>> {
        self.check_range(l, r)?;
        let start = self.offsets[l - 1];
        let end = self.offsets[r - 1] + self.dims[r - 1];
        Ok(start..end)
    }

    /// Contiguous sub-vector covering patches l..r.
    pub fn slice(&self, x: &DVector<f64>, l: usize, r: usize) -> Result<DVector<f64>> {
        if x.len() != self.total_dim {
            return Err(Error::LengthMismatch {
                expected: self.total_dim,
                got: x.len(),
            });
        }
        let range = self.coord_range(l, r)?;
        Ok(DVector::from_iterator(range.len(), range.map(|i| x[i])))
    }
}

/// Inverse of per-patch slicing: concatenate parts in order.
pub fn concat(parts: &[DVector<f64>]) -> DVector<f64> {
    let n = parts.iter().map(|p| p.len()).sum();
    DVector::from_iterator(n, parts.iter().flat_map(|p| p.iter().copied()))
}

/// Conditioning prefix of a patch: explicit "no condition" for the first
/// patch (the empty-range convention), or the concatenated earlier patches.
#[derive(Clone, Debug, PartialEq)]
pub enum Condition {
    None,
    Prefix(DVector<f64>),
}

impl Condition {
    pub fn from_prefix(x: DVector<f64>) -> Self {
        if x.is_empty() {
            Condition::None
        } else {
            Condition::Prefix(x)
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Condition::None => 0,
            Condition::Prefix(x) => x.len(),
        }
    }

    pub fn as_vector(&self) -> Option<&DVector<f64>> {
        match self {
            Condition::None => None,
            Condition::Prefix(x) => Some(x),
        }
    }
}
