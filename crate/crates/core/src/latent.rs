//! Real-valued latent grids.
//!
//! A [`Latent`] is an `H × W × C` grid of `f64` stored row-major with the
//! channel as the fastest-varying axis: entry `(row, col, ch)` lives at
//! `(row * W + col) * C + ch`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl GridShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }
}

impl std::fmt::Display for GridShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    shape: GridShape,
    data: Vec<f64>,
}

impl Latent {
    pub fn zeros(shape: GridShape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: GridShape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: GridShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} entries ({shape})", shape.len()),
                actual: format!("{} entries", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    /// Builds a grid by evaluating `f(row, col, ch)` at every entry.
    pub fn from_fn(shape: GridShape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for row in 0..shape.height {
            for col in 0..shape.width {
                for ch in 0..shape.channels {
                    data.push(f(row, col, ch));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.shape.index(row, col, ch)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, what: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }

    pub fn ensure_same_shape(&self, other: &Latent) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.to_string(),
                actual: other.shape.to_string(),
            });
        }
        Ok(())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Latent {
        Latent {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element-wise combination of two same-shaped grids. Panics on shape mismatch.
    pub fn zip_map(&self, other: &Latent, f: impl Fn(f64, f64) -> f64) -> Latent {
        assert_eq!(self.shape, other.shape, "zip_map on mismatched shapes");
        Latent {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Latent {
        self.map(|v| v * factor)
    }

    pub fn sub(&self, other: &Latent) -> Latent {
        self.zip_map(other, |a, b| a - b)
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, factor: f64, other: &Latent) {
        assert_eq!(self.shape, other.shape, "add_scaled on mismatched shapes");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Latent) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Bit-exact equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Latent) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// First 16 hex digits of the SHA-256 of the little-endian entry bytes.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for v in &self.data {
            hasher.update(v.to_le_bytes());
        }
        let digest = hasher.finalize();
        hex::encode(&digest[..8])
    }

    /// Uniform average of same-shaped grids, accumulated in order and divided once.
    pub fn mean_of<'a>(items: impl IntoIterator<Item = &'a Latent>) -> Option<Latent> {
        let mut iter = items.into_iter();
        let first = iter.next()?;
        let mut acc = first.clone();
        let mut count = 1usize;
        for item in iter {
            acc.add_scaled(1.0, item);
            count += 1;
        }
        let n = count as f64;
        for v in acc.data.iter_mut() {
            *v /= n;
        }
        Some(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_layout_is_row_major_channel_last() {
        let shape = GridShape::new(2, 3, 2);
        let x = Latent::from_fn(shape, |r, c, ch| (r * 100 + c * 10 + ch) as f64);
        assert_eq!(x.as_slice()[shape.index(1, 2, 1)], 121.0);
        assert_eq!(x.get(0, 1, 0), 10.0);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        let err = Latent::from_vec(GridShape::new(2, 2, 1), vec![1.0; 3]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn mean_of_single_item_is_bit_identical() {
        let x = Latent::from_vec(GridShape::new(1, 3, 1), vec![0.1, -0.7, 1e-300]).unwrap();
        let m = Latent::mean_of([&x]).unwrap();
        assert!(m.bit_eq(&x));
    }

    #[test]
    fn checksum_changes_with_content() {
        let a = Latent::zeros(GridShape::new(2, 2, 1));
        let mut b = a.clone();
        b.as_mut_slice()[3] = 1e-12;
        assert_ne!(a.checksum(), b.checksum());
        assert_eq!(a.checksum().len(), 16);
    }
}
