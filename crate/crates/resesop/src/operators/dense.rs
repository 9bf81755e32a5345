//! Matrix-backed operators and the structured regularizers used for
//! augmentation.

use super::{LinearOperator, OperatorKind};
use ndarray::{Array2, ArrayView1};
use std::ops::Range;

/// Operator backed by an explicit dense matrix.
pub struct DenseOperator {
    matrix: Array2<f64>,
}

impl DenseOperator {
    pub fn new(matrix: Array2<f64>) -> Self {
        DenseOperator { matrix }
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }
}

impl LinearOperator for DenseOperator {
    fn domain_len(&self) -> usize {
        self.matrix.ncols()
    }

    fn range_len(&self) -> usize {
        self.matrix.nrows()
    }

    fn kind(&self) -> OperatorKind {
        OperatorKind::DenseMatrix
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let v = self.matrix.dot(&ArrayView1::from(x));
        out.copy_from_slice(v.as_slice().unwrap());
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        let v = self.matrix.t().dot(&ArrayView1::from(y));
        out.copy_from_slice(v.as_slice().unwrap());
    }

    fn apply_block_into(&self, x: &[f64], rows: Range<usize>, out: &mut [f64]) {
        let sub = self.matrix.slice(ndarray::s![rows, ..]);
        let v = sub.dot(&ArrayView1::from(x));
        out.copy_from_slice(v.as_slice().unwrap());
    }

    fn adjoint_block_into(&self, y_block: &[f64], rows: Range<usize>, out: &mut [f64]) {
        let sub = self.matrix.slice(ndarray::s![rows, ..]);
        let v = sub.t().dot(&ArrayView1::from(y_block));
        for (o, t) in out.iter_mut().zip(v.iter()) {
            *o += t;
        }
    }
}

pub struct IdentityOperator {
    n: usize,
}

impl IdentityOperator {
    pub fn new(n: usize) -> Self {
        IdentityOperator { n }
    }
}

impl LinearOperator for IdentityOperator {
    fn domain_len(&self) -> usize {
        self.n
    }

    fn range_len(&self) -> usize {
        self.n
    }

    fn kind(&self) -> OperatorKind {
        OperatorKind::DenseMatrix
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(y);
    }

    fn apply_block_into(&self, x: &[f64], rows: Range<usize>, out: &mut [f64]) {
        out.copy_from_slice(&x[rows]);
    }

    fn adjoint_block_into(&self, y_block: &[f64], rows: Range<usize>, out: &mut [f64]) {
        for (o, v) in out[rows].iter_mut().zip(y_block) {
            *o += v;
        }
    }
}

pub struct ZeroOperator {
    rows: usize,
    cols: usize,
}

impl ZeroOperator {
    pub fn new(rows: usize, cols: usize) -> Self {
        ZeroOperator { rows, cols }
    }
}

impl LinearOperator for ZeroOperator {
    fn domain_len(&self) -> usize {
        self.cols
    }

    fn range_len(&self) -> usize {
        self.rows
    }

    fn kind(&self) -> OperatorKind {
        OperatorKind::DenseMatrix
    }

    fn apply_into(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn adjoint_into(&self, _y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn apply_block_into(&self, _x: &[f64], _rows: Range<usize>, out: &mut [f64]) {
        out.fill(0.0);
    }

    fn adjoint_block_into(&self, _y: &[f64], _rows: Range<usize>, _out: &mut [f64]) {}
}

/// Forward-difference gradient `[D_x; D_y]` on a real `width x height` grid.
///
/// Row layout: `width*height` x-differences first (zero in the last column),
/// then the y-differences (zero in the last row).
pub struct GradientOperator {
    width: usize,
    height: usize,
}

impl GradientOperator {
    pub fn new(width: usize, height: usize) -> Self {
        GradientOperator { width, height }
    }
}

impl LinearOperator for GradientOperator {
    fn domain_len(&self) -> usize {
        self.width * self.height
    }

    fn range_len(&self) -> usize {
        2 * self.width * self.height
    }

    fn kind(&self) -> OperatorKind {
        OperatorKind::DenseMatrix
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let (w, h) = (self.width, self.height);
        let n = w * h;
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                out[i] = if c + 1 < w { x[i + 1] - x[i] } else { 0.0 };
                out[n + i] = if r + 1 < h { x[i + w] - x[i] } else { 0.0 };
            }
        }
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        let (w, h) = (self.width, self.height);
        let n = w * h;
        out.fill(0.0);
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                if c + 1 < w {
                    out[i + 1] += y[i];
                    out[i] -= y[i];
                }
                if r + 1 < h {
                    out[i + w] += y[n + i];
                    out[i] -= y[n + i];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::OperatorHandle;
    use crate::test_util::adjoint_test;

    #[test]
    fn gradient_of_constant_is_zero() {
        let g = OperatorHandle::new(GradientOperator::new(4, 4));
        let y = g.apply(&vec![3.5; 16]).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_adjoint_identity() {
        let g = OperatorHandle::new(GradientOperator::new(5, 3));
        adjoint_test(&g, 30, 17);
    }
}
