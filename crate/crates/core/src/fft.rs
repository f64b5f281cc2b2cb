//! Causal 1-D convolution through zero-padded real FFTs.

use std::sync::Arc;

use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use crate::scalar::Scalar;

/// FFT plan for causal convolutions of sequences of a fixed length `L`.
///
/// Sequences are zero-padded to the next power of two `>= 2L` so that the
/// circular convolution equals the linear one on the first `L` outputs.
pub struct CausalConvPlan<T: Scalar> {
    len: usize,
    padded: usize,
    forward: Arc<dyn RealToComplex<T>>,
    inverse: Arc<dyn ComplexToReal<T>>,
}

impl<T: Scalar> CausalConvPlan<T> {
    pub fn new(len: usize) -> Self {
        assert!(len > 0);
        let padded = (2 * len).next_power_of_two();
        let mut planner = RealFftPlanner::<T>::new();
        CausalConvPlan {
            len,
            padded,
            forward: planner.plan_fft_forward(padded),
            inverse: planner.plan_fft_inverse(padded),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn padded_len(&self) -> usize {
        self.padded
    }

    pub fn spectrum_len(&self) -> usize {
        self.padded / 2 + 1
    }

    /// Spectrum of the zero-padded signal produced by `fill`, which writes
    /// the first `L` samples of the input buffer.
    pub fn spectrum_with(&self, fill: impl FnOnce(&mut [T])) -> Vec<Complex<T>> {
        let mut buf = vec![T::zero(); self.padded];
        fill(&mut buf[..self.len]);
        let mut spec = self.forward.make_output_vec();
        self.forward
            .process(&mut buf, &mut spec)
            .expect("fft buffer sizes are fixed by the plan");
        spec
    }

    pub fn spectrum(&self, x: &[T]) -> Vec<Complex<T>> {
        debug_assert_eq!(x.len(), self.len);
        self.spectrum_with(|b| b.copy_from_slice(x))
    }

    /// Inverse transform; calls `sink(t, value)` for `t < L`, with the `1/n`
    /// normalisation applied.
    pub fn inverse_with(&self, spec: &mut [Complex<T>], mut sink: impl FnMut(usize, T)) {
        // Spectra of real signals have real DC and Nyquist bins; clear rounding noise.
        spec[0].im = T::zero();
        let last = spec.len() - 1;
        spec[last].im = T::zero();
        let mut out = self.inverse.make_output_vec();
        self.inverse
            .process(spec, &mut out)
            .expect("fft buffer sizes are fixed by the plan");
        let scale = T::one() / T::of(self.padded as f64);
        for (t, &v) in out[..self.len].iter().enumerate() {
            sink(t, v * scale);
        }
    }

    /// `y[t] = sum_{j <= t} k[j] u[t - j]` for `t < L`.
    pub fn convolve(&self, u: &[T], k: &[T]) -> Vec<T> {
        let su = self.spectrum(u);
        let sk = self.spectrum(k);
        let mut prod: Vec<Complex<T>> = su.iter().zip(&sk).map(|(a, b)| a * b).collect();
        let mut y = vec![T::zero(); self.len];
        self.inverse_with(&mut prod, |t, v| y[t] = v);
        y
    }

    /// Approximate floating-point operations of one real FFT of the padded length.
    pub fn fft_flops(&self) -> u64 {
        let n = self.padded as f64;
        (2.5 * n * n.log2()) as u64
    }
}

/// One-shot causal convolution of two equal-length sequences.
pub fn causal_conv<T: Scalar>(u: &[T], k: &[T]) -> Vec<T> {
    assert_eq!(u.len(), k.len());
    CausalConvPlan::new(u.len()).convolve(u, k)
}
