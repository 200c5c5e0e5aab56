/// Strided matrix view: element `(i, j)` lives at `ptr[i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> View<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        View {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        View {
            data,
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c = a · b + beta · c` for an `m×k` by `k×n` product with row-major `c`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: View, b: View, beta: f64, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    debug_assert!(max_index(m, k, a) < a.data.len());
    debug_assert!(max_index(k, n, b) < b.data.len());
    // SAFETY: the views were built from slices covering every index the
    // strides reach (checked above in debug builds), and `c` holds m*n values.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn max_index(rows: usize, cols: usize, v: View) -> usize {
    ((rows - 1) as isize * v.rs + (cols - 1) as isize * v.cs) as usize
}
