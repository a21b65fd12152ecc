//! Convolution as an explicit matrix.
//!
//! Images are flattened channel-major (`c, y, x`); the materialized matrix
//! maps a flattened input to the flattened zero-padded, strided output.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, LipError, Result};
use crate::tensor::DenseMatrix;

/// Upper bound on both the flattened input and output sizes.
pub const CONV_MAX_DIM: usize = 4096;

/// Kernel of shape `(out_ch, in_ch, kh, kw)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kh: usize,
    pub kw: usize,
    data: Vec<f64>,
}

impl ConvKernel {
    pub fn new(out_ch: usize, in_ch: usize, kh: usize, kw: usize, data: Vec<f64>) -> Result<Self> {
        if out_ch == 0 || in_ch == 0 || kh == 0 || kw == 0 {
            return Err(dim_err("kernel dimensions must be positive"));
        }
        if data.len() != out_ch * in_ch * kh * kw {
            return Err(dim_err(format!(
                "kernel data length {} does not match {out_ch}x{in_ch}x{kh}x{kw}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LipError::NonFinite);
        }
        Ok(Self { out_ch, in_ch, kh, kw, data })
    }

    /// Reads a kernel stored as an `out_ch x (in_ch * kh * kw)` matrix.
    pub fn from_matrix(m: &DenseMatrix, in_ch: usize, kh: usize, kw: usize) -> Result<Self> {
        if m.cols() != in_ch * kh * kw {
            return Err(dim_err(format!(
                "kernel matrix has {} columns, expected {}",
                m.cols(),
                in_ch * kh * kw
            )));
        }
        Self::new(m.rows(), in_ch, kh, kw, m.data().to_vec())
    }

    pub fn to_matrix(&self) -> DenseMatrix {
        DenseMatrix::from_vec(self.out_ch, self.in_ch * self.kh * self.kw, self.data.clone())
            .expect("kernel shape is valid")
    }

    #[inline]
    pub fn get(&self, o: usize, i: usize, y: usize, x: usize) -> f64 {
        self.data[((o * self.in_ch + i) * self.kh + y) * self.kw + x]
    }
}

/// Input shape and sliding-window parameters of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    /// `(channels, height, width)`.
    pub in_shape: (usize, usize, usize),
    pub padding: usize,
    pub stride: usize,
}

impl ConvGeometry {
    /// Output spatial size `(height, width)`, if positive.
    pub fn output_hw(&self, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let (_, h, w) = self.in_shape;
        if self.stride == 0 {
            return None;
        }
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < kh || pw < kw {
            return None;
        }
        Some(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }
}

/// Doubly-block-Toeplitz matrix `M` with `M * vec(image) = vec(conv(image))`.
pub fn materialize_conv_matrix(
    kernel: &ConvKernel,
    in_shape: (usize, usize, usize),
    padding: usize,
    stride: usize,
) -> Result<DenseMatrix> {
    let (c, h, w) = in_shape;
    if c != kernel.in_ch {
        return Err(dim_err(format!("input has {c} channels, kernel expects {}", kernel.in_ch)));
    }
    let in_total = c.checked_mul(h).and_then(|v| v.checked_mul(w)).unwrap_or(usize::MAX);
    if in_total == 0 {
        return Err(dim_err("input shape must be positive"));
    }
    if in_total > CONV_MAX_DIM {
        return Err(LipError::Scale(format!("input size {in_total} exceeds {CONV_MAX_DIM}")));
    }
    let geom = ConvGeometry { in_shape, padding, stride };
    let (oh, ow) = geom
        .output_hw(kernel.kh, kernel.kw)
        .ok_or_else(|| dim_err("convolution output would be empty"))?;
    let out_total = kernel.out_ch * oh * ow;
    if out_total > CONV_MAX_DIM {
        return Err(LipError::Scale(format!("output size {out_total} exceeds {CONV_MAX_DIM}")));
    }

    let mut m = DenseMatrix::zeros(out_total, in_total);
    for o in 0..kernel.out_ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (o * oh + oy) * ow + ox;
                for i in 0..c {
                    for ky in 0..kernel.kh {
                        let y = (oy * stride + ky) as isize - padding as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel.kw {
                            let x = (ox * stride + kx) as isize - padding as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            let col = (i * h + y as usize) * w + x as usize;
                            m[(row, col)] += kernel.get(o, i, ky, kx);
                        }
                    }
                }
            }
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_kernel_is_scaled_identity() {
        let k = ConvKernel::new(1, 1, 1, 1, vec![2.5]).unwrap();
        let m = materialize_conv_matrix(&k, (1, 3, 3), 0, 1).unwrap();
        assert_eq!(m, DenseMatrix::identity(9).scale(2.5));
    }

    #[test]
    fn centered_delta_is_identity() {
        let mut data = vec![0.0; 2 * 2 * 9];
        data[(0 * 2 + 0) * 9 + 4] = 1.0;
        data[(1 * 2 + 1) * 9 + 4] = 1.0;
        let k = ConvKernel::new(2, 2, 3, 3, data).unwrap();
        assert_eq!(materialize_conv_matrix(&k, (2, 4, 5), 1, 1).unwrap(), DenseMatrix::identity(40));
    }

    #[test]
    fn averaging_kernel_gives_window_means() {
        let k = ConvKernel::new(1, 1, 3, 3, vec![1.0 / 9.0; 9]).unwrap();
        let m = materialize_conv_matrix(&k, (1, 4, 4), 0, 1).unwrap();
        assert_eq!(m.shape(), (4, 16));
        let img: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let out = m.matvec(&img);
        for oy in 0..2 {
            for ox in 0..2 {
                let mut mean = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        mean += img[(oy + dy) * 4 + ox + dx];
                    }
                }
                mean /= 9.0;
                assert!((out[oy * 2 + ox] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_oversized_and_empty() {
        let k = ConvKernel::new(1, 1, 3, 3, vec![0.0; 9]).unwrap();
        assert!(matches!(materialize_conv_matrix(&k, (1, 65, 65), 0, 1), Err(LipError::Scale(_))));
        assert!(matches!(materialize_conv_matrix(&k, (1, 2, 2), 0, 1), Err(LipError::Dimension(_))));
        assert!(matches!(materialize_conv_matrix(&k, (2, 4, 4), 0, 1), Err(LipError::Dimension(_))));
        assert!(matches!(materialize_conv_matrix(&k, (1, 4, 4), 0, 0), Err(LipError::Dimension(_))));
    }
}
