use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::sync::OnceLock;

/// Element type of the tensor engine.
///
/// Training runs in `f32`; `f64` exists so gradient checks can evaluate the
/// same graph with enough precision for finite differences.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// `c = alpha * a·b + beta * c` over strided row/column views.
    ///
    /// # Safety
    /// All strided views must lie inside their allocations.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("finite conversion")
    }

    fn as_f32(self) -> f32;
    fn as_f64(self) -> f64;
}

impl Float for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn as_f32(self) -> f32 {
        self
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn as_f32(self) -> f32 {
        self as f32
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Worker-thread cap for the matmul kernel, read once from `MOELAB_THREADS`.
pub fn thread_cap() -> usize {
    static CAP: OnceLock<usize> = OnceLock::new();
    *CAP.get_or_init(|| {
        std::env::var("MOELAB_THREADS")
            .ok()
            .and_then(|s| s.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or(1)
    })
}

/// Strided matrix view: `(data, row_stride, col_stride)`.
#[derive(Clone, Copy)]
pub struct View<'a, F> {
    pub data: &'a [F],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, F> View<'a, F> {
    pub fn row_major(data: &'a [F], cols: usize) -> Self {
        View { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows × cols` buffer.
    pub fn transposed(data: &'a [F], cols: usize) -> Self {
        View { data, rs: 1, cs: cols }
    }

    fn fits(&self, rows: usize, cols: usize) -> bool {
        rows == 0 || cols == 0 || (rows - 1) * self.rs + (cols - 1) * self.cs < self.data.len()
    }
}

struct SendPtr<F>(*mut F);
unsafe impl<F> Send for SendPtr<F> {}
unsafe impl<F> Sync for SendPtr<F> {}

/// Bounds-checked GEMM: `c[m×n] = a[m×k]·b[k×n] + beta·c`.
///
/// Rows of `a`/`c` are split across up to [`thread_cap`] threads. Every output
/// element is reduced over `k` in the same order regardless of the split, so
/// results do not depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: View<'_, F>,
    b: View<'_, F>,
    beta: F,
    c: &mut [F],
    rsc: usize,
    csc: usize,
) {
    assert!(a.fits(m, k), "gemm: lhs view out of bounds");
    assert!(b.fits(k, n), "gemm: rhs view out of bounds");
    assert!(
        m == 0 || n == 0 || (m - 1) * rsc + (n - 1) * csc < c.len(),
        "gemm: output view out of bounds"
    );
    if m == 0 || n == 0 {
        return;
    }
    let threads = thread_cap().min(m / 64).max(1);
    if threads == 1 {
        unsafe {
            F::gemm_raw(
                m,
                k,
                n,
                F::one(),
                a.data.as_ptr(),
                a.rs as isize,
                a.cs as isize,
                b.data.as_ptr(),
                b.rs as isize,
                b.cs as isize,
                beta,
                c.as_mut_ptr(),
                rsc as isize,
                csc as isize,
            );
        }
        return;
    }
    let chunk = m.div_ceil(threads);
    let cptr = SendPtr(c.as_mut_ptr());
    let cref = &cptr;
    std::thread::scope(|s| {
        for t in 0..threads {
            let r0 = t * chunk;
            if r0 >= m {
                break;
            }
            let rows = chunk.min(m - r0);
            s.spawn(move || unsafe {
                F::gemm_raw(
                    rows,
                    k,
                    n,
                    F::one(),
                    a.data.as_ptr().add(r0 * a.rs),
                    a.rs as isize,
                    a.cs as isize,
                    b.data.as_ptr(),
                    b.rs as isize,
                    b.cs as isize,
                    beta,
                    cref.0.add(r0 * rsc),
                    rsc as isize,
                    csc as isize,
                );
            });
        }
    });
}
