//! Sequence ops: FFT causal convolution and the per-channel SSM primitives.

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::fft::CausalConvPlan;
use crate::scalar::Scalar;
use crate::ssm;
use crate::tensor::Tensor;

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Scalar> Tape<T> {
    /// Per-channel causal convolution: `u[B, L, C]` with kernels `k[L, C]`,
    /// `y[b, t, c] = sum_{j <= t} k[j, c] u[b, t - j, c]`, evaluated by FFT.
    pub fn causal_conv(&mut self, u: Var, k: Var) -> Result<Var> {
        let (su, sk) = (self.shape(u).to_vec(), self.shape(k).to_vec());
        if su.len() != 3 || sk.len() != 2 || su[1..] != sk[..] {
            return Err(shape_err("causal_conv", &su, &sk));
        }
        let (bsz, len, ch) = (su[0], su[1], su[2]);
        self.reserve(bsz * len * ch * T::BYTES)?;
        let plan = CausalConvPlan::<T>::new(len);
        let (uv, kv) = (self.value(u).data(), self.value(k).data());
        let mut out = vec![T::zero(); bsz * len * ch];
        for c in 0..ch {
            let sk = plan.spectrum_with(|buf| {
                for (t, v) in buf.iter_mut().enumerate() {
                    *v = kv[t * ch + c];
                }
            });
            for b in 0..bsz {
                let base = b * len * ch;
                let mut spec = plan.spectrum_with(|buf| {
                    for (t, v) in buf.iter_mut().enumerate() {
                        *v = uv[base + t * ch + c];
                    }
                });
                for (s, kk) in spec.iter_mut().zip(&sk) {
                    *s = *s * kk;
                }
                plan.inverse_with(&mut spec, |t, v| out[base + t * ch + c] = v);
            }
        }
        let ffts = (ch * (2 * bsz + 1)) as u64;
        let flops = ffts * plan.fft_flops() + (6 * bsz * ch * plan.spectrum_len()) as u64;
        self.push(
            "causal_conv",
            Tensor::from_parts(su, out),
            Op::CausalConv { u, k },
            flops,
            0,
        )
    }

    /// Bilinear discretisation of a bank of channels.
    ///
    /// `a[C, N, N]` holds HiPPO-signed transitions (the integrated system uses
    /// `-a`), `b[C, N]`, `log_dt[C]`. Returns `[C, N, N + 1]` packing `Abar`
    /// in the first `N` columns and `Bbar` in the last.
    pub fn ssm_discretize(&mut self, a: Var, b: Var, log_dt: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 || sa[1] != sa[2] {
            return Err(Error::InvalidShape(format!("ssm_discretize: A is {sa:?}")));
        }
        let (ch, n) = (sa[0], sa[1]);
        if self.shape(b) != [ch, n] {
            return Err(shape_err("ssm_discretize", &sa, self.shape(b)));
        }
        if self.shape(log_dt) != [ch] {
            return Err(shape_err("ssm_discretize", &sa, self.shape(log_dt)));
        }
        let (av, bv, dv) = (
            self.value(a).data(),
            self.value(b).data(),
            self.value(log_dt).data(),
        );
        let mut out = vec![T::zero(); ch * n * (n + 1)];
        let mut minv_all = Vec::with_capacity(ch * n * n);
        for c in 0..ch {
            let a_eff: Vec<T> = av[c * n * n..(c + 1) * n * n].iter().map(|&v| -v).collect();
            let delta = dv[c].exp();
            let (abar, bbar, minv) = ssm::bilinear(&a_eff, &bv[c * n..(c + 1) * n], delta, n)?;
            for r in 0..n {
                let row = &mut out[(c * n + r) * (n + 1)..(c * n + r + 1) * (n + 1)];
                row[..n].copy_from_slice(&abar[r * n..(r + 1) * n]);
                row[n] = bbar[r];
            }
            minv_all.extend_from_slice(&minv);
        }
        let saved = minv_all.len() * T::BYTES;
        let flops = (ch * 4 * n * n * n) as u64;
        self.push(
            "ssm_discretize",
            Tensor::from_parts(vec![ch, n, n + 1], out),
            Op::SsmDiscretize {
                a,
                b,
                log_dt,
                minv: minv_all,
            },
            flops,
            saved,
        )
    }

    fn ssm_bank_shapes(&self, abar: Var, bbar: Var, c: Var) -> Result<(usize, usize)> {
        let sa = self.shape(abar).to_vec();
        if sa.len() != 3 || sa[1] != sa[2] {
            return Err(Error::InvalidShape(format!("SSM bank: Abar is {sa:?}")));
        }
        let (ch, n) = (sa[0], sa[1]);
        for v in [bbar, c] {
            if self.shape(v) != [ch, n] {
                return Err(shape_err("ssm bank", &sa, self.shape(v)));
            }
        }
        Ok((ch, n))
    }

    /// Convolution kernels `K[i, c] = C_c Abar_c^i Bbar_c` for `i < len`,
    /// shaped `[len, C]`.
    pub fn ssm_kernel(&mut self, abar: Var, bbar: Var, c: Var, len: usize) -> Result<Var> {
        if len == 0 {
            return Err(Error::InvalidArgument(
                "ssm_kernel: length must be >= 1".into(),
            ));
        }
        let (ch, n) = self.ssm_bank_shapes(abar, bbar, c)?;
        self.reserve((len * ch + ch * len * n) * T::BYTES)?;
        let (av, bv, cv) = (
            self.value(abar).data(),
            self.value(bbar).data(),
            self.value(c).data(),
        );
        let mut states = vec![T::zero(); ch * len * n];
        let mut out = vec![T::zero(); len * ch];
        for k in 0..ch {
            let kern = ssm::kernel_with_states(
                &av[k * n * n..(k + 1) * n * n],
                &bv[k * n..(k + 1) * n],
                &cv[k * n..(k + 1) * n],
                len,
                &mut states[k * len * n..(k + 1) * len * n],
            );
            for (i, v) in kern.into_iter().enumerate() {
                out[i * ch + k] = v;
            }
        }
        let saved = states.len() * T::BYTES;
        let flops = (ch * len * (2 * n * n + 2 * n)) as u64;
        self.push(
            "ssm_kernel",
            Tensor::from_parts(vec![len, ch], out),
            Op::SsmKernel {
                abar,
                bbar,
                c,
                states,
            },
            flops,
            saved,
        )
    }

    /// Recurrent evaluation of a channel bank over `u[B, L, C]` from a zero
    /// state: `x_k = Abar x_{k-1} + Bbar u_k`, `y_k = C x_k` (no feedthrough).
    pub fn ssm_scan(&mut self, abar: Var, bbar: Var, c: Var, u: Var) -> Result<Var> {
        let (ch, n) = self.ssm_bank_shapes(abar, bbar, c)?;
        let su = self.shape(u).to_vec();
        if su.len() != 3 || su[2] != ch {
            return Err(shape_err("ssm_scan", &su, &[ch, n]));
        }
        let (bsz, len) = (su[0], su[1]);
        self.reserve((bsz * len * ch * (n + 1)) * T::BYTES)?;
        let (av, bv, cv, uv) = (
            self.value(abar).data(),
            self.value(bbar).data(),
            self.value(c).data(),
            self.value(u).data(),
        );
        let mut states = vec![T::zero(); bsz * ch * len * n];
        let mut out = vec![T::zero(); bsz * len * ch];
        for b in 0..bsz {
            let base = b * len * ch;
            for k in 0..ch {
                let st = (b * ch + k) * len * n;
                ssm::grad::scan_forward(
                    &av[k * n * n..(k + 1) * n * n],
                    &bv[k * n..(k + 1) * n],
                    &cv[k * n..(k + 1) * n],
                    len,
                    |t| uv[base + t * ch + k],
                    |t, y| out[base + t * ch + k] = y,
                    &mut states[st..st + len * n],
                );
            }
        }
        let saved = states.len() * T::BYTES;
        let flops = (bsz * ch * len * (2 * n * n + 4 * n)) as u64;
        self.push(
            "ssm_scan",
            Tensor::from_parts(su, out),
            Op::SsmScan {
                abar,
                bbar,
                c,
                u,
                states,
            },
            flops,
            saved,
        )
    }
}
