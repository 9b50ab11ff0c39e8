//! Raw numeric kernels shared by the forward and reverse passes.

/// Strided view of a row-major (possibly transposed) matrix inside a slice.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], offset: usize, cols: usize) -> Self {
        Self {
            data,
            offset,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Same storage read as its transpose.
    pub fn t(self) -> Self {
        Self {
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }
}

/// `c[m×n] (+)= a[m×k] · b[k×n]`, where `c` is row-major with row stride `ldc`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    c: &mut [f64],
    c_offset: usize,
    ldc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                let row = c_offset + i * ldc;
                c[row..row + n].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        return;
    }
    let max_a = a.offset + (m - 1) * a.row_stride + (k - 1) * a.col_stride;
    let max_b = b.offset + (k - 1) * b.row_stride + (n - 1) * b.col_stride;
    let max_c = c_offset + (m - 1) * ldc + n - 1;
    assert!(max_a < a.data.len() && max_b < b.data.len() && max_c < c.len());

    let small = m * n * k <= 4096;
    if small && a.col_stride == 1 && b.row_stride == 1 {
        // Both operands contiguous along k: one dot product per output.
        for i in 0..m {
            let ar = &a.data[a.offset + i * a.row_stride..][..k];
            let crow = &mut c[c_offset + i * ldc..][..n];
            for (j, dst) in crow.iter_mut().enumerate() {
                let br = &b.data[b.offset + j * b.col_stride..][..k];
                let acc = dot(ar, br);
                if accumulate {
                    *dst += acc;
                } else {
                    *dst = acc;
                }
            }
        }
        return;
    }
    if small && b.col_stride == 1 {
        // Rows of `b` contiguous: accumulate scaled rows into each output row.
        for i in 0..m {
            let crow = &mut c[c_offset + i * ldc..][..n];
            if !accumulate {
                crow.iter_mut().for_each(|v| *v = 0.0);
            }
            for p in 0..k {
                let s = a.data[a.offset + i * a.row_stride + p * a.col_stride];
                let br = &b.data[b.offset + p * b.row_stride..][..n];
                crow.iter_mut().zip(br).for_each(|(v, &x)| *v += s * x);
            }
        }
        return;
    }
    if m * n * k <= 4096 {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.data[a.offset + i * a.row_stride + p * a.col_stride]
                        * b.data[b.offset + p * b.row_stride + j * b.col_stride];
                }
                let dst = &mut c[c_offset + i * ldc + j];
                if accumulate {
                    *dst += acc;
                } else {
                    *dst = acc;
                }
            }
        }
        return;
    }

    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: every address touched by dgemm lies inside the bounds asserted above
    // (the largest index of each operand is checked), and `c` does not alias `a`/`b`
    // because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr().add(c_offset),
            ldc as isize,
            1,
        );
    }
}

/// Four-lane dot product; the fixed lane split keeps results reproducible.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            lanes[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut acc = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for p in 4 * chunks..a.len() {
        acc += a[p] * b[p];
    }
    acc
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place max-subtracted softmax over one slice; masked entries get exactly zero.
pub(crate) fn softmax_slice(row: &mut [f64], mask: Option<&[bool]>) -> bool {
    let mut max = f64::NEG_INFINITY;
    for (idx, &v) in row.iter().enumerate() {
        if mask.is_none_or(|m| m[idx]) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut sum = 0.0;
    for (idx, v) in row.iter_mut().enumerate() {
        if mask.is_none_or(|m| m[idx]) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
    true
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_small_and_large_paths_agree() {
        let (m, k, n) = (17, 23, 19);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7) % 13) as f64 - 6.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 5) % 11) as f64 - 5.0).collect();
        let mut fast = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            MatRef::row_major(&a, 0, k),
            MatRef::row_major(&b, 0, n),
            &mut fast,
            0,
            n,
            false,
        );
        for i in 0..m {
            for j in 0..n {
                let naive: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert_eq!(fast[i * n + j], naive);
            }
        }
    }

    #[test]
    fn gemm_transposed_layouts_match_naive() {
        for &(m, k, n) in &[(40, 8, 50), (3, 5, 7), (30, 40, 20), (64, 16, 9)] {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 7) % 13) as f64 * 0.1 - 0.6).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 5) % 11) as f64 * 0.3 - 1.5).collect();
            // a stored as [m,k] or [k,m]; b as [k,n] or [n,k]
            let at: Vec<f64> = (0..k * m).map(|x| a[(x % m) * k + x / m]).collect();
            let bt: Vec<f64> = (0..n * k).map(|x| b[(x % k) * n + x / k]).collect();
            let views = [
                (MatRef::row_major(&a, 0, k), MatRef::row_major(&b, 0, n)),
                (MatRef::row_major(&a, 0, k), MatRef::row_major(&bt, 0, k).t()),
                (MatRef::row_major(&at, 0, m).t(), MatRef::row_major(&b, 0, n)),
                (MatRef::row_major(&at, 0, m).t(), MatRef::row_major(&bt, 0, k).t()),
            ];
            for (va, vb) in views {
                let mut c = vec![1.0; m * n];
                gemm(m, k, n, va, vb, &mut c, 0, n, true);
                for i in 0..m {
                    for j in 0..n {
                        let naive: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                        assert!((c[i * n + j] - 1.0 - naive).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
