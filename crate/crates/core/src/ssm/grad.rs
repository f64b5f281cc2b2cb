//! Reverse-mode rules for the SSM primitives recorded on the tape.

use crate::linalg;
use crate::scalar::Scalar;

/// Gradients of the bilinear transform with respect to `(A, B, dt)`.
///
/// With `M = I - dt/2 A`, `P = I + dt/2 A`, `Abar = M^-1 P`, `Bbar = M^-1 dt B`.
pub(crate) fn bilinear_backward<T: Scalar>(
    a: &[T],
    b: &[T],
    delta: T,
    minv: &[T],
    g_abar: &[T],
    g_bbar: &[T],
    n: usize,
) -> (Vec<T>, Vec<T>, T) {
    let half = delta * T::of(0.5);
    let mut p = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            let eye = if i == j { T::one() } else { T::zero() };
            p[i * n + j] = eye + half * a[i * n + j];
        }
    }
    let db_scaled: Vec<T> = b.iter().map(|&v| v * delta).collect();

    // dMinv = G_A P^T + G_B (dt B)^T
    let mut d_minv = vec![T::zero(); n * n];
    linalg::gemm_nt_acc(g_abar, &p, &mut d_minv, n, n, n);
    for i in 0..n {
        for j in 0..n {
            d_minv[i * n + j] += g_bbar[i] * db_scaled[j];
        }
    }
    // dP = Minv^T G_A ; d(dt B) = Minv^T G_B
    let mut d_p = vec![T::zero(); n * n];
    linalg::gemm_tn_acc(minv, g_abar, &mut d_p, n, n, n);
    let mut d_dtb = vec![T::zero(); n];
    linalg::matvec_t(minv, g_bbar, &mut d_dtb);
    // dM = -Minv^T dMinv Minv^T
    let mut tmp = vec![T::zero(); n * n];
    linalg::gemm_tn_acc(minv, &d_minv, &mut tmp, n, n, n);
    let mut d_m = vec![T::zero(); n * n];
    linalg::gemm_nt_acc(&tmp, minv, &mut d_m, n, n, n);
    d_m.iter_mut().for_each(|v| *v = -*v);

    let mut g_a = vec![T::zero(); n * n];
    let mut g_delta = T::zero();
    let h = T::of(0.5);
    for idx in 0..n * n {
        g_a[idx] = half * (d_p[idx] - d_m[idx]);
        g_delta += h * a[idx] * (d_p[idx] - d_m[idx]);
    }
    let mut g_b = vec![T::zero(); n];
    for i in 0..n {
        g_b[i] = delta * d_dtb[i];
        g_delta += d_dtb[i] * b[i];
    }
    (g_a, g_b, g_delta)
}

/// Gradients of `K[i] = C Abar^i Bbar` given upstream `g[i]`, using the saved
/// states `v_i = Abar^i Bbar` (L x N). Accumulates into the output slices.
pub(crate) fn kernel_backward<T: Scalar>(
    abar: &[T],
    c: &[T],
    states: &[T],
    g: impl Fn(usize) -> T,
    len: usize,
    g_abar: &mut [T],
    g_bbar: &mut [T],
    g_c: &mut [T],
) {
    let n = c.len();
    let mut lam = vec![T::zero(); n];
    let mut next = vec![T::zero(); n];
    for i in (0..len).rev() {
        let v = &states[i * n..(i + 1) * n];
        let gi = g(i);
        if i + 1 < len {
            // lam holds the adjoint of v_{i+1} = Abar v_i
            for r in 0..n {
                let lr = lam[r];
                if lr == T::zero() {
                    continue;
                }
                let row = &mut g_abar[r * n..(r + 1) * n];
                for (o, &vj) in row.iter_mut().zip(v) {
                    *o += lr * vj;
                }
            }
        }
        linalg::matvec_t(abar, &lam, &mut next);
        for j in 0..n {
            next[j] += gi * c[j];
            g_c[j] += gi * v[j];
        }
        std::mem::swap(&mut lam, &mut next);
    }
    for j in 0..n {
        g_bbar[j] += lam[j];
    }
}

/// Forward recurrence for one channel of one sequence. `u(k)` and `y(k, v)`
/// read and write the strided input/output; states (L x N) are stored.
pub(crate) fn scan_forward<T: Scalar>(
    abar: &[T],
    bbar: &[T],
    c: &[T],
    len: usize,
    u: impl Fn(usize) -> T,
    mut y: impl FnMut(usize, T),
    states: &mut [T],
) {
    let n = c.len();
    let mut prev = vec![T::zero(); n];
    for k in 0..len {
        let cur = &mut states[k * n..(k + 1) * n];
        linalg::matvec(abar, &prev, cur);
        let uk = u(k);
        for (x, &bv) in cur.iter_mut().zip(bbar) {
            *x += bv * uk;
        }
        y(k, cur.iter().zip(c).map(|(&a, &b)| a * b).sum());
        prev.copy_from_slice(cur);
    }
}

/// Reverse pass of [`scan_forward`]. `g(k)` is the upstream gradient of `y_k`;
/// `du(k, v)` receives the input gradient if requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_backward<T: Scalar>(
    abar: &[T],
    bbar: &[T],
    c: &[T],
    len: usize,
    u: impl Fn(usize) -> T,
    g: impl Fn(usize) -> T,
    mut du: Option<&mut dyn FnMut(usize, T)>,
    states: &[T],
    g_abar: &mut [T],
    g_bbar: &mut [T],
    g_c: &mut [T],
) {
    let n = c.len();
    let mut mu = vec![T::zero(); n];
    let mut next = vec![T::zero(); n];
    for k in (0..len).rev() {
        let x = &states[k * n..(k + 1) * n];
        let gk = g(k);
        // mu_k = g_k C^T + Abar^T mu_{k+1}
        linalg::matvec_t(abar, &mu, &mut next);
        for j in 0..n {
            next[j] += gk * c[j];
            g_c[j] += gk * x[j];
        }
        std::mem::swap(&mut mu, &mut next);
        let uk = u(k);
        let mut dot = T::zero();
        for j in 0..n {
            g_bbar[j] += mu[j] * uk;
            dot += bbar[j] * mu[j];
        }
        if let Some(f) = du.as_mut() {
            f(k, dot);
        }
        if k > 0 {
            let xp = &states[(k - 1) * n..k * n];
            for r in 0..n {
                let mr = mu[r];
                if mr == T::zero() {
                    continue;
                }
                let row = &mut g_abar[r * n..(r + 1) * n];
                for (o, &xv) in row.iter_mut().zip(xp) {
                    *o += mr * xv;
                }
            }
        }
    }
}
