//! Floating-point element types.
//!
//! Every numeric routine in the crate is generic over [`Scalar`], which is
//! implemented for `f32` (training and benchmarks) and `f64` (verification).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Numeric precision of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn bits(self) -> u32 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            32 => Some(Precision::F32),
            64 => Some(Precision::F64),
            _ => None,
        }
    }
}

pub trait Scalar:
    Float
    + rustfft::FftNum
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;
    /// Size of one element in bytes.
    const BYTES: usize;
    /// STF1 dtype code.
    const DTYPE_CODE: u8;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `c[m x n] += a[m x k] * b[k x n]` with `a` and `b` addressed through
    /// `(row, col)` element strides and `c` row-major. Callers guarantee the
    /// slices cover the strided extents.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        sa: (usize, usize),
        b: &[Self],
        sb: (usize, usize),
        c: &mut [Self],
    );
}

fn extent(rows: usize, cols: usize, s: (usize, usize)) -> usize {
    (rows - 1) * s.0 + (cols - 1) * s.1 + 1
}

macro_rules! gemm_impl {
    ($kernel:path) => {
        fn gemm(
            m: usize,
            k: usize,
            n: usize,
            a: &[Self],
            sa: (usize, usize),
            b: &[Self],
            sb: (usize, usize),
            c: &mut [Self],
        ) {
            if m == 0 || n == 0 || k == 0 {
                return;
            }
            assert!(a.len() >= extent(m, k, sa), "gemm: lhs too short");
            assert!(b.len() >= extent(k, n, sb), "gemm: rhs too short");
            assert!(c.len() >= m * n, "gemm: output too short");
            // SAFETY: the asserts above bound every strided access.
            unsafe {
                $kernel(
                    m,
                    k,
                    n,
                    1.0,
                    a.as_ptr(),
                    sa.0 as isize,
                    sa.1 as isize,
                    b.as_ptr(),
                    sb.0 as isize,
                    sb.1 as isize,
                    1.0,
                    c.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
    };
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;
    const BYTES: usize = 4;
    const DTYPE_CODE: u8 = 0;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
    gemm_impl!(matrixmultiply::sgemm);
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;
    const BYTES: usize = 8;
    const DTYPE_CODE: u8 = 1;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
    gemm_impl!(matrixmultiply::dgemm);
}
