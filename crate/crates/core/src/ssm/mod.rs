//! Linear state-space models: HiPPO initialisation, bilinear discretisation,
//! and the two evaluation modes (recurrence and causal convolution).
//!
//! The continuous system is `x'(t) = A x(t) + B u(t)`, `y(t) = C x(t) + D u(t)`.
//! The HiPPO matrix is lower triangular with a positive diagonal; the stable
//! transition actually integrated is its negation, `A = -hippo_matrix(N)`.
//! Trainable layers store the HiPPO-signed matrix and negate it on use.

pub(crate) mod grad;

mod sweep;

pub use sweep::{hippo_radii, log_space, mode_equivalence, EquivReport};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fft::CausalConvPlan;
use crate::linalg;
use crate::scalar::Scalar;

/// Lower-triangular HiPPO matrix, row-major, 0-indexed:
/// `sqrt(2n+1) sqrt(2k+1)` below the diagonal, `n+1` on it, zero above.
pub fn hippo_matrix<T: Scalar>(n: usize) -> Result<Vec<T>> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "hippo_matrix: N must be >= 1".into(),
        ));
    }
    let mut a = vec![T::zero(); n * n];
    for row in 0..n {
        for col in 0..=row {
            a[row * n + col] = if row == col {
                T::of((row + 1) as f64)
            } else {
                T::of(((2 * row + 1) as f64).sqrt() * ((2 * col + 1) as f64).sqrt())
            };
        }
    }
    Ok(a)
}

/// Input map paired with the HiPPO matrix, `B_n = sqrt(2n+1)`.
pub fn hippo_input<T: Scalar>(n: usize) -> Vec<T> {
    (0..n).map(|i| T::of(((2 * i + 1) as f64).sqrt())).collect()
}

/// Continuous-time parameters of one scalar channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams<T> {
    pub state_size: usize,
    /// Continuous transition `A` (N x N, row-major), used as `x' = A x + B u`.
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub d: T,
    /// Natural log of the step size; the step size must lie in (0, 1].
    pub log_dt: T,
}

impl<T: Scalar> SsmParams<T> {
    /// HiPPO-initialised channel: `A = -hippo(N)`, `B = hippo_input(N)`.
    pub fn hippo(n: usize, c: Vec<T>, d: T, log_dt: T) -> Result<Self> {
        let a = hippo_matrix::<T>(n)?.into_iter().map(|v| -v).collect();
        let p = SsmParams {
            state_size: n,
            a,
            b: hippo_input(n),
            c,
            d,
            log_dt,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_size;
        if n == 0 {
            return Err(Error::InvalidArgument("state size must be >= 1".into()));
        }
        if self.a.len() != n * n || self.b.len() != n || self.c.len() != n {
            return Err(Error::InvalidShape(format!(
                "SSM with N = {n}: |A| = {}, |B| = {}, |C| = {}",
                self.a.len(),
                self.b.len(),
                self.c.len()
            )));
        }
        if !self.log_dt.is_finite() || self.log_dt > T::zero() {
            return Err(Error::Config(format!(
                "step size exp({}) outside (0, 1]",
                self.log_dt
            )));
        }
        Ok(())
    }

    pub fn step_size(&self) -> T {
        self.log_dt.exp()
    }
}

/// Discrete-time system `x_k = Abar x_{k-1} + Bbar u_k`, `y_k = C x_k + D u_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm<T> {
    pub state_size: usize,
    pub abar: Vec<T>,
    pub bbar: Vec<T>,
    pub c: Vec<T>,
    pub d: T,
}

impl<T: Scalar> DiscreteSsm<T> {
    pub fn spectral_radius(&self) -> Result<f64> {
        linalg::spectral_radius(&self.abar, self.state_size)
    }

    pub fn cast<U: Scalar>(&self) -> DiscreteSsm<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect();
        DiscreteSsm {
            state_size: self.state_size,
            abar: conv(&self.abar),
            bbar: conv(&self.bbar),
            c: conv(&self.c),
            d: U::of(self.d.as_f64()),
        }
    }
}

/// Bilinear transform of `(A, B)` at step `delta`. Returns `(Abar, Bbar, M^-1)`
/// with `M = I - delta/2 A`.
pub(crate) fn bilinear<T: Scalar>(
    a: &[T],
    b: &[T],
    delta: T,
    n: usize,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let half = delta * T::of(0.5);
    let mut m = vec![T::zero(); n * n];
    let mut p = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            let eye = if i == j { T::one() } else { T::zero() };
            m[i * n + j] = eye - half * a[i * n + j];
            p[i * n + j] = eye + half * a[i * n + j];
        }
    }
    let minv = linalg::invert(&m, n).map_err(|_| Error::Singular("discretize: I - dt/2 A"))?;
    let mut abar = vec![T::zero(); n * n];
    linalg::gemm_acc(&minv, &p, &mut abar, n, n, n);
    let db: Vec<T> = b.iter().map(|&v| v * delta).collect();
    let mut bbar = vec![T::zero(); n];
    linalg::matvec(&minv, &db, &mut bbar);
    if abar.iter().chain(&bbar).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("discretize".into()));
    }
    Ok((abar, bbar, minv))
}

/// Bilinear (Tustin) discretisation:
/// `Abar = (I - dt/2 A)^-1 (I + dt/2 A)`, `Bbar = (I - dt/2 A)^-1 dt B`.
pub fn discretize<T: Scalar>(p: &SsmParams<T>) -> Result<DiscreteSsm<T>> {
    p.validate()?;
    let (abar, bbar, _) = bilinear(&p.a, &p.b, p.step_size(), p.state_size)?;
    Ok(DiscreteSsm {
        state_size: p.state_size,
        abar,
        bbar,
        c: p.c.clone(),
        d: p.d,
    })
}

/// Unrolls the recurrence from a zero initial state.
pub fn ssm_recurrent<T: Scalar>(d: &DiscreteSsm<T>, u: &[T]) -> Result<Vec<T>> {
    if u.is_empty() {
        return Err(Error::InvalidArgument("ssm_recurrent: empty input".into()));
    }
    let n = d.state_size;
    let mut x = vec![T::zero(); n];
    let mut next = vec![T::zero(); n];
    let mut y = Vec::with_capacity(u.len());
    for &uk in u {
        linalg::matvec(&d.abar, &x, &mut next);
        for (xi, &bi) in next.iter_mut().zip(&d.bbar) {
            *xi += bi * uk;
        }
        std::mem::swap(&mut x, &mut next);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ssm_recurrent state".into()));
        }
        let yk = x.iter().zip(&d.c).map(|(&a, &b)| a * b).sum::<T>() + d.d * uk;
        y.push(yk);
    }
    Ok(y)
}

/// Writes `Abar^i Bbar` for `i < L` into `states` (L x N) and returns the
/// kernel `K[i] = C Abar^i Bbar`. Subnormal state entries are flushed to zero.
pub(crate) fn kernel_with_states<T: Scalar>(
    abar: &[T],
    bbar: &[T],
    c: &[T],
    len: usize,
    states: &mut [T],
) -> Vec<T> {
    let n = bbar.len();
    debug_assert_eq!(states.len(), len * n);
    states[..n].copy_from_slice(bbar);
    for i in 1..len {
        let (prev, cur) = states.split_at_mut(i * n);
        linalg::matvec(abar, &prev[(i - 1) * n..], &mut cur[..n]);
        linalg::flush_subnormals(&mut cur[..n]);
    }
    states
        .chunks_exact(n)
        .map(|v| v.iter().zip(c).map(|(&a, &b)| a * b).sum())
        .collect()
}

/// Convolution kernel `K[i] = C Abar^i Bbar`, `i = 0..L-1`, by repeated
/// matrix-vector products.
pub fn ssm_kernel<T: Scalar>(d: &DiscreteSsm<T>, len: usize) -> Result<Vec<T>> {
    if len == 0 {
        return Err(Error::InvalidArgument("ssm_kernel: L must be >= 1".into()));
    }
    let mut states = vec![T::zero(); len * d.state_size];
    let k = kernel_with_states(&d.abar, &d.bbar, &d.c, len, &mut states);
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ssm_kernel (unstable Abar?)".into()));
    }
    Ok(k)
}

/// Convolutional mode: `y = K * u + D u` with `K = ssm_kernel(d, L)`.
pub fn ssm_conv<T: Scalar>(d: &DiscreteSsm<T>, u: &[T]) -> Result<Vec<T>> {
    if u.is_empty() {
        return Err(Error::InvalidArgument("ssm_conv: empty input".into()));
    }
    let k = ssm_kernel(d, u.len())?;
    let mut y = CausalConvPlan::new(u.len()).convolve(u, &k);
    for (yi, &ui) in y.iter_mut().zip(u) {
        *yi += d.d * ui;
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ssm_conv".into()));
    }
    Ok(y)
}

/// Random stable channel for mode-equivalence sweeps: a HiPPO transition with a
/// small random perturbation, Gaussian `B`, `C`, `D`, and a log-uniform step in
/// `[1e-3, 1e-1]`. Redraws until the spectral radius is below one.
pub fn random_stable<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<DiscreteSsm<f64>> {
    let hippo = hippo_matrix::<f64>(n)?;
    loop {
        let a: Vec<f64> = hippo
            .iter()
            .map(|&h| {
                let z: f64 = StandardNormal.sample(rng);
                -h + 0.1 * z
            })
            .collect();
        let mut gauss =
            |k: usize| -> Vec<f64> { (0..k).map(|_| StandardNormal.sample(&mut *rng)).collect() };
        let b = gauss(n);
        let c = gauss(n);
        let d: f64 = StandardNormal.sample(rng);
        let log_dt = rng.random_range(1e-3f64.ln()..1e-1f64.ln());
        let p = SsmParams {
            state_size: n,
            a,
            b,
            c,
            d,
            log_dt,
        };
        let disc = discretize(&p)?;
        if disc.spectral_radius()? < 1.0 {
            return Ok(disc);
        }
    }
}

/// Relative error `|a - b| / |b|` in the Euclidean norm (absolute if `b = 0`).
pub fn relative_error<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|y| y.as_f64().powi(2)).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}
