//! Raw slice kernels behind the convolution ops.
//!
//! Every output element is produced by exactly one task with a fixed
//! accumulation order, so results are bit-identical for any rayon pool size.

use rayon::prelude::*;

use super::Element;

const MR: usize = 4;
const NR: usize = 16;
/// Below this many multiply-adds a GEMM stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 20;

/// `c (m×n) += a (m×k) · b (k×n)`, all row-major.
pub fn gemm_acc<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let row_block = |(bi, cblock): (usize, &mut [T])| {
        let i0 = bi * MR;
        let rows = cblock.len() / n;
        gemm_row_block(i0, rows, k, n, a, b, cblock);
    };
    if m * k * n >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        c.par_chunks_mut(MR * n).enumerate().for_each(row_block);
    } else {
        c.chunks_mut(MR * n).enumerate().for_each(row_block);
    }
}

fn gemm_row_block<T: Element>(
    i0: usize,
    rows: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
) {
    if rows == MR {
        let a0 = &a[i0 * k..(i0 + 1) * k];
        let a1 = &a[(i0 + 1) * k..(i0 + 2) * k];
        let a2 = &a[(i0 + 2) * k..(i0 + 3) * k];
        let a3 = &a[(i0 + 3) * k..(i0 + 4) * k];
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[T::zero(); NR]; MR];
            for p in 0..k {
                let bp: &[T; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
                let av = [a0[p], a1[p], a2[p], a3[p]];
                for r in 0..MR {
                    for q in 0..NR {
                        acc[r][q] = acc[r][q] + av[r] * bp[q];
                    }
                }
            }
            for r in 0..MR {
                let crow = &mut c[r * n + j..r * n + j + NR];
                for q in 0..NR {
                    crow[q] = crow[q] + acc[r][q];
                }
            }
            j += NR;
        }
        if j < n {
            for r in 0..MR {
                tail_row(&a[(i0 + r) * k..(i0 + r + 1) * k], b, n, j, &mut c[r * n..(r + 1) * n]);
            }
        }
    } else {
        for r in 0..rows {
            tail_row(&a[(i0 + r) * k..(i0 + r + 1) * k], b, n, 0, &mut c[r * n..(r + 1) * n]);
        }
    }
}

/// Columns `j0..n` of one output row, accumulated in the same `p` order as
/// the blocked path.
fn tail_row<T: Element>(arow: &[T], b: &[T], n: usize, j0: usize, crow: &mut [T]) {
    let width = n - j0;
    let mut acc = vec![T::zero(); width];
    for (p, &ap) in arow.iter().enumerate() {
        let bp = &b[p * n + j0..(p + 1) * n];
        for (acc, &bv) in acc.iter_mut().zip(bp) {
            *acc = *acc + ap * bv;
        }
    }
    for (c, a) in crow[j0..].iter_mut().zip(acc) {
        *c = *c + a;
    }
}

/// Row-major transpose of a `rows×cols` matrix.
pub fn transpose<T: Element>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut dst = vec![T::zero(); rows * cols];
    const TB: usize = 32;
    for ib in (0..rows).step_by(TB) {
        for jb in (0..cols).step_by(TB) {
            for i in ib..(ib + TB).min(rows) {
                for j in jb..(jb + TB).min(cols) {
                    dst[j * rows + i] = src[i * cols + j];
                }
            }
        }
    }
    dst
}

/// Geometry of a strided, zero-padded square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds one `C×H×W` image into a `(C·K·K) × (H'·W')` patch matrix.
pub fn im2col<T: Element>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let mut col = vec![T::zero(); g.col_rows() * oh * ow];
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters a patch matrix back onto a `C×H×W` image,
/// accumulating overlaps into `x`.
pub fn col2im<T: Element>(g: &ConvGeom, col: &[T], x: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            drow[ix as usize] = drow[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of one image. `weight` is `O × (C·K·K)`.
pub fn conv2d_single<T: Element>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    out_channels: usize,
    out: &mut [T],
) {
    let col = im2col(g, x);
    let p = g.col_cols();
    if let Some(bias) = bias {
        for (o, chunk) in out.chunks_mut(p).enumerate() {
            chunk.fill(bias[o]);
        }
    } else {
        out.fill(T::zero());
    }
    gemm_acc(out_channels, g.col_rows(), p, weight, &col, out);
}

/// Gradients of [`conv2d_single`]. `dweight` is accumulated; `dx`, when
/// requested, is accumulated as well.
pub fn conv2d_backward_single<T: Element>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    out_channels: usize,
    dout: &[T],
    dx: Option<&mut [T]>,
    dweight: Option<&mut [T]>,
) {
    let p = g.col_cols();
    let kk = g.col_rows();
    if let Some(dweight) = dweight {
        let col = im2col(g, x);
        let col_t = transpose(kk, p, &col);
        gemm_acc(out_channels, p, kk, dout, &col_t, dweight);
    }
    if let Some(dx) = dx {
        let w_t = transpose(out_channels, kk, weight);
        let mut dcol = vec![T::zero(); kk * p];
        gemm_acc(kk, out_channels, p, &w_t, dout, &mut dcol);
        col2im(g, &dcol, dx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_on_ragged_sizes() {
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 7), (4, 3, 16), (9, 11, 37), (8, 2, 33)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
            let mut c = vec![0.0; m * n];
            gemm_acc(m, k, n, &a, &b, &mut c);
            let expect = naive_gemm(m, k, n, &a, &b);
            for (x, y) in c.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-12, "{m}x{k}x{n}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn transpose_swaps_indices() {
        let src: Vec<f32> = (0..6).map(|v| v as f32).collect();
        assert_eq!(transpose(2, 3, &src), vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            channels: 2,
            height: 5,
            width: 6,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let x: Vec<f64> = (0..60).map(|i| (i as f64 * 0.7).sin()).collect();
        let col = im2col(&g, &x);
        let y: Vec<f64> = (0..col.len()).map(|i| (i as f64 * 0.3).cos()).collect();
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&g, &y, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
