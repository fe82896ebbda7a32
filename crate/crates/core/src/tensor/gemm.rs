//! Strided matrix product kernels backed by `matrixmultiply`.

use super::Precision;

/// Strided view of an `rows × cols` matrix inside a flat slice.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn span(&self) -> usize {
        (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride + 1
    }
}

/// `out += a · b` with `out` row-major `a.rows × b.cols`.
pub(crate) fn gemm_acc(precision: Precision, a: MatRef<'_>, b: MatRef<'_>, out: &mut [f64]) {
    debug_assert_eq!(a.cols, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    debug_assert_eq!(out.len(), m * n);
    match precision {
        Precision::Wide => unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                a.row_stride as isize,
                a.col_stride as isize,
                b.data.as_ptr(),
                b.row_stride as isize,
                b.col_stride as isize,
                1.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        },
        Precision::Narrow => {
            let a32: Vec<f32> = a.data[..a.span()].iter().map(|&v| v as f32).collect();
            let b32: Vec<f32> = b.data[..b.span()].iter().map(|&v| v as f32).collect();
            let mut c32 = vec![0f32; m * n];
            unsafe {
                matrixmultiply::sgemm(
                    m,
                    k,
                    n,
                    1.0,
                    a32.as_ptr(),
                    a.row_stride as isize,
                    a.col_stride as isize,
                    b32.as_ptr(),
                    b.row_stride as isize,
                    b.col_stride as isize,
                    0.0,
                    c32.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            for (o, c) in out.iter_mut().zip(c32) {
                *o = (*o as f32 + c) as f64;
            }
        }
    }
}
