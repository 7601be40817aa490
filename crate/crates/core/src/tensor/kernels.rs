//! Raw numeric kernels shared by the tape operations.

use crate::error::{shape_err, Result};

/// `c (+)= op(a) * op(b)` where op transposes when the flag is set.
///
/// `a` is stored as `m×k` (or `k×m` when `ta`), `b` as `k×n` (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides above address only those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Checks that `small` broadcasts onto `full` by right-aligned expansion of
/// size-1 (or missing leading) dimensions.
pub(crate) fn check_broadcast(full: &[usize], small: &[usize]) -> Result<()> {
    if small.len() > full.len() {
        return shape_err(format!("cannot broadcast {small:?} onto {full:?}"));
    }
    let offset = full.len() - small.len();
    for (i, &d) in small.iter().enumerate() {
        if d != 1 && d != full[offset + i] {
            return shape_err(format!("cannot broadcast {small:?} onto {full:?}"));
        }
    }
    Ok(())
}

/// Calls `f(i_full, i_small)` for every element of `full`, where `i_small`
/// is the broadcast source index in `small`. Shapes must pass [`check_broadcast`].
pub(crate) fn for_each_broadcast(full: &[usize], small: &[usize], mut f: impl FnMut(usize, usize)) {
    let n_full: usize = full.iter().product();
    let n_small: usize = small.iter().product();
    if full == small || (n_full == n_small) {
        (0..n_full).for_each(|i| f(i, i));
        return;
    }
    if n_small == 1 {
        (0..n_full).for_each(|i| f(i, 0));
        return;
    }
    let offset = full.len() - small.len();
    // Trailing block: the small shape equals the full trailing dims.
    if small.iter().enumerate().all(|(i, &d)| d == full[offset + i]) {
        (0..n_full).for_each(|i| f(i, i % n_small));
        return;
    }
    // General path: strides of `small` laid out against `full`, 0 where expanded.
    let mut strides = vec![0usize; full.len()];
    let mut acc = 1;
    for i in (0..small.len()).rev() {
        if small[i] != 1 {
            strides[offset + i] = acc;
        }
        acc *= small[i];
    }
    let mut idx = vec![0usize; full.len()];
    let mut src = 0usize;
    for i in 0..n_full {
        f(i, src);
        for d in (0..full.len()).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < full[d] {
                break;
            }
            src -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

/// Reduces `values` shaped `full` down to `small` by summing broadcast axes.
pub(crate) fn sum_to(values: &[f64], full: &[usize], small: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; small.iter().product()];
    for_each_broadcast(full, small, |i, j| out[j] += values[i]);
    out
}

/// Expands `values` shaped `small` up to `full`.
pub(crate) fn expand_to(values: &[f64], small: &[usize], full: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; full.iter().product()];
    for_each_broadcast(full, small, |i, j| out[i] = values[j]);
    out
}

pub(crate) fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(sigmoid(x)) without overflow.
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
