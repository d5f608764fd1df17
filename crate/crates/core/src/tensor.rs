//! Minimal dense tensors used by the feature and model code.
//!
//! Row-major `f64` storage. These are deliberately plain: the model is
//! small enough that straightforward index arithmetic beats pulling in a
//! linear-algebra dependency, and keeping the loops explicit makes the
//! summation order (and therefore bit-level determinism) auditable.

/// 2-D tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                t.data[r * cols + c] = f(r, c);
            }
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        Self { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }

    /// Borrow row `r` as a slice.
    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// 3-D tensor laid out as channels x frames x features, row-major in that
/// order. This is the shape every latent in the post-filter moves through.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    pub channels: usize,
    pub frames: usize,
    pub features: usize,
    pub data: Vec<f64>,
}

impl LatentTensor {
    pub fn zeros(channels: usize, frames: usize, features: usize) -> Self {
        Self { channels, frames, features, data: vec![0.0; channels * frames * features] }
    }

    pub fn from_fn(
        channels: usize,
        frames: usize,
        features: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut t = Self::zeros(channels, frames, features);
        for c in 0..channels {
            for fr in 0..frames {
                for p in 0..features {
                    *t.at_mut(c, fr, p) = f(c, fr, p);
                }
            }
        }
        t
    }

    #[inline]
    pub fn at(&self, c: usize, t: usize, p: usize) -> f64 {
        debug_assert!(c < self.channels && t < self.frames && p < self.features);
        self.data[(c * self.frames + t) * self.features + p]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, t: usize, p: usize) -> &mut f64 {
        debug_assert!(c < self.channels && t < self.frames && p < self.features);
        &mut self.data[(c * self.frames + t) * self.features + p]
    }

    /// Copy frame `t` out as a (channels x features) matrix.
    pub fn frame(&self, t: usize) -> Tensor2 {
        let mut out = Tensor2::zeros(self.channels, self.features);
        for c in 0..self.channels {
            for p in 0..self.features {
                *out.at_mut(c, p) = self.at(c, t, p);
            }
        }
        out
    }

    /// Write a (channels x features) matrix into frame `t`.
    pub fn set_frame(&mut self, t: usize, frame: &Tensor2) {
        assert_eq!(frame.rows, self.channels);
        assert_eq!(frame.cols, self.features);
        for c in 0..self.channels {
            for p in 0..self.features {
                *self.at_mut(c, t, p) = frame.at(c, p);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor2_indexing_is_row_major() {
        let t = Tensor2::from_fn(2, 3, |r, c| (r * 10 + c) as f64);
        assert_eq!(t.data, vec![0.0, 1.0, 2.0, 10.0, 11.0, 12.0]);
        assert_eq!(t.at(1, 2), 12.0);
        assert_eq!(t.row(1), &[10.0, 11.0, 12.0]);
    }

    #[test]
    fn latent_frame_roundtrip() {
        let t = LatentTensor::from_fn(2, 3, 4, |c, fr, p| (c * 100 + fr * 10 + p) as f64);
        let f1 = t.frame(1);
        assert_eq!(f1.at(1, 3), 113.0);
        let mut u = LatentTensor::zeros(2, 3, 4);
        u.set_frame(1, &f1);
        assert_eq!(u.at(0, 1, 2), 12.0);
        assert_eq!(u.at(1, 0, 0), 0.0);
    }
}
