//! Raw numeric kernels shared by the graph ops and the value-level API.

/// Probability floor applied before taking logarithms in divergences.
pub const PROB_FLOOR: f64 = 1e-12;

/// Strided view over a row-major buffer: `(row_stride, col_stride)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strides(pub usize, pub usize);

impl Strides {
    pub fn row_major(cols: usize) -> Self {
        Strides(cols, 1)
    }

    pub fn transposed(cols: usize) -> Self {
        Strides(1, cols)
    }
}

/// `C = alpha * A B + beta * C` with `A: m×k`, `B: k×n`, `C: m×n`.
///
/// Accumulation order depends only on `(m, k, n)`, so identical inputs give
/// bit-identical outputs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, s: Strides| (rows - 1) * s.0 + (cols - 1) * s.1 + 1;
    if k > 0 {
        assert!(a.len() >= span(m, k, sa), "gemm: A view out of bounds");
        assert!(b.len() >= span(k, n, sb), "gemm: B view out of bounds");
    }
    assert!(c.len() >= span(m, n, sc), "gemm: C view out of bounds");
    // SAFETY: the three views were bounds-checked above and `c` is borrowed
    // mutably, so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}

/// In-place `softmax(x / tau)` with max subtraction.
pub(crate) fn softmax_in_place(row: &mut [f64], tau: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = ((*x - max) / tau).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// `log softmax(x / tau)` into `out`.
pub(crate) fn log_softmax_into(row: &[f64], tau: f64, out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &x in row {
        sum += ((x - max) / tau).exp();
    }
    let lse = sum.ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max) / tau - lse;
    }
}

/// Clamp entries to [`PROB_FLOOR`], renormalizing only when a clamp happened.
pub(crate) fn floor_probs(p: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = p.iter().map(|&x| x.max(PROB_FLOOR)).collect();
    if p.iter().any(|&x| x < PROB_FLOOR) {
        let s: f64 = out.iter().sum();
        for x in &mut out {
            *x /= s;
        }
    }
    out
}

/// KL(p‖q) over one row, given already-floored copies. Entries where the
/// original `p` is zero contribute nothing.
pub(crate) fn kl_row(p: &[f64], pf: &[f64], qf: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..p.len() {
        if p[i] > 0.0 {
            acc += pf[i] * (pf[i].ln() - qf[i].ln());
        }
    }
    acc
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Sum of contributions where the result does not depend on their order.
///
/// Each coordinate is summed in ascending value order, so any permutation of
/// `parts` yields the same bits.
pub(crate) fn order_free_sum(mut parts: Vec<Vec<f64>>) -> Vec<f64> {
    match parts.len() {
        0 => Vec::new(),
        1 => parts.pop().unwrap(),
        2 => {
            // a + b is commutative in IEEE arithmetic
            let b = parts.pop().unwrap();
            let mut a = parts.pop().unwrap();
            for (x, y) in a.iter_mut().zip(&b) {
                *x += *y;
            }
            a
        }
        k => {
            let n = parts[0].len();
            let mut out = vec![0.0; n];
            let mut buf = vec![0.0; k];
            for (i, o) in out.iter_mut().enumerate() {
                for (slot, part) in buf.iter_mut().zip(&parts) {
                    *slot = part[i];
                }
                buf.sort_by(f64::total_cmp);
                *o = buf.iter().sum();
            }
            out
        }
    }
}
