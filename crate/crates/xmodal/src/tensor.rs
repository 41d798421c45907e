//! Image-shaped `f64` arrays.

use crate::error::{Error, Result};

/// H x W x C array of pixel intensities, stored row-major (h, then w, then
/// channel). Dataset images hold values in `[0, 255]`; perturbations and
/// gradients reuse the same container with unrestricted (finite) entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    shape: (usize, usize, usize),
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        let (h, w, c) = shape;
        Self {
            shape,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn from_data(shape: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        let (h, w, c) = shape;
        if data.len() != h * w * c {
            return Err(Error::DimensionMismatch {
                context: "ImageTensor::from_data",
                expected: h * w * c,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ImageTensor::from_data"));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn flat_index(&self, h: usize, w: usize, c: usize) -> Result<usize> {
        let (sh, sw, sc) = self.shape;
        if h >= sh || w >= sw || c >= sc {
            return Err(Error::PixelOutOfRange {
                h,
                w,
                c,
                shape: self.shape,
            });
        }
        Ok((h * sw + w) * sc + c)
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, c: usize) -> f64 {
        let (_, sw, sc) = self.shape;
        self.data[(h * sw + w) * sc + c]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, c: usize, v: f64) {
        let (_, sw, sc) = self.shape;
        self.data[(h * sw + w) * sc + c] = v;
    }

    /// Element-wise sum, panics on shape mismatch (internal use).
    pub fn add(&self, other: &ImageTensor) -> ImageTensor {
        assert_eq!(self.shape, other.shape);
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a + b)
            .collect();
        ImageTensor {
            shape: self.shape,
            data,
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    /// Clamp all entries to `[lo, hi]` in place.
    pub fn clamp_in_place(&mut self, lo: f64, hi: f64) {
        for v in &mut self.data {
            *v = v.clamp(lo, hi);
        }
    }

    pub fn all_in_range(&self, lo: f64, hi: f64) -> bool {
        self.data.iter().all(|v| *v >= lo && *v <= hi)
    }
}
