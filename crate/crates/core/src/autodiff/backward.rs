use super::nn::gelu_grad;
use super::ops::{permute_data, reduce_to_suffix, reduction_map};
use super::{Op, Tape, Var};
use crate::error::Result;
use crate::fft::CausalConvPlan;
use crate::linalg;
use crate::scalar::Scalar;
use crate::ssm;
use crate::tensor::Tensor;

impl<T: Scalar> Tape<T> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn like(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::from_parts(self.shape(v).to_vec(), data)
    }

    /// Gradient contributions of node `i` to its inputs, given its output gradient.
    pub(super) fn backward_rule(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate = matches!(node.op, Op::Sub(..));
                if self.wants(*a) {
                    out.push((*a, g.clone()));
                }
                if self.wants(*b) {
                    let mut db = reduce_to_suffix(gd, self.value(*b).numel());
                    if negate {
                        db.iter_mut().for_each(|v| *v = -*v);
                    }
                    out.push((*b, self.like(*b, db)));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let nb = bv.len();
                if self.wants(*a) {
                    let da: Vec<T> = gd
                        .iter()
                        .enumerate()
                        .map(|(j, &gv)| gv * bv[j % nb])
                        .collect();
                    out.push((*a, self.like(*a, da)));
                }
                if self.wants(*b) {
                    let prod: Vec<T> = gd.iter().zip(av).map(|(&gv, &x)| gv * x).collect();
                    out.push((*b, self.like(*b, reduce_to_suffix(&prod, nb))));
                }
            }
            Op::Scale(x, f) => {
                out.push((*x, g.map(|v| v * *f)));
            }
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = self.value(*a).numel() / k;
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    linalg::gemm_nt_acc(gd, self.value(*b).data(), &mut da, m, n, k);
                    out.push((*a, self.like(*a, da)));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    linalg::gemm_tn_acc(self.value(*a).data(), gd, &mut db, m, k, n);
                    out.push((*b, self.like(*b, db)));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let mut da = vec![T::zero(); bt * m * k];
                    for j in 0..bt {
                        linalg::gemm_nt_acc(
                            &gd[j * m * n..(j + 1) * m * n],
                            &bv[j * k * n..(j + 1) * k * n],
                            &mut da[j * m * k..(j + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    out.push((*a, self.like(*a, da)));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); bt * k * n];
                    for j in 0..bt {
                        linalg::gemm_tn_acc(
                            &av[j * m * k..(j + 1) * m * k],
                            &gd[j * m * n..(j + 1) * m * n],
                            &mut db[j * k * n..(j + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    out.push((*b, self.like(*b, db)));
                }
            }
            Op::Reshape(x) => {
                out.push((*x, self.like(*x, gd.to_vec())));
            }
            Op::Permute(x, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                out.push((*x, self.like(*x, permute_data(gd, g.shape(), &inv))));
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let len = g.shape()[*axis];
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for o in 0..outer {
                    let dst = (o * shape[*axis] + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                out.push((*x, self.like(*x, dx)));
            }
            Op::Gelu(x) => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| gv * gelu_grad(v))
                    .collect();
                out.push((*x, self.like(*x, dx)));
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = *g.shape().last().unwrap();
                let mut dx = vec![T::zero(); y.len()];
                for r in 0..y.len() / d {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &gd[r * d..(r + 1) * d]);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*x, self.like(*x, dx)));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).numel();
                let gam = self.value(*gamma).data();
                let rows = xhat.len() / d;
                if self.wants(*x) {
                    let inv_d = T::one() / T::of(d as f64);
                    let mut dx = vec![T::zero(); xhat.len()];
                    for r in 0..rows {
                        let (h, gr) = (&xhat[r * d..(r + 1) * d], &gd[r * d..(r + 1) * d]);
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            mean_dh += dh;
                            mean_dh_h += dh * h[j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            dx[r * d + j] = rstd[r] * (dh - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                    out.push((*x, self.like(*x, dx)));
                }
                if self.wants(*gamma) {
                    let mut dg = vec![T::zero(); d];
                    for (j, (&gv, &h)) in gd.iter().zip(xhat).enumerate() {
                        dg[j % d] += gv * h;
                    }
                    out.push((*gamma, self.like(*gamma, dg)));
                }
                if self.wants(*beta) {
                    out.push((*beta, self.like(*beta, reduce_to_suffix(gd, d))));
                }
            }
            Op::Mean { x, axes } => {
                let shape = self.shape(*x);
                let (_, map) = reduction_map(shape, axes);
                let count: usize = axes.iter().map(|&a| shape[a]).product();
                let inv = T::one() / T::of(count as f64);
                let dx = map.iter().map(|&o| gd[o] * inv).collect();
                out.push((*x, self.like(*x, dx)));
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                out.push((*x, self.like(*x, vec![gd[0]; n])));
            }
            Op::MaxPool3d { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&at, &gv) in argmax.iter().zip(gd) {
                    dx[at] += gv;
                }
                out.push((*x, self.like(*x, dx)));
            }
            Op::CausalConv { u, k } => {
                let su = self.shape(*u);
                let (bsz, len, ch) = (su[0], su[1], su[2]);
                let plan = CausalConvPlan::<T>::new(len);
                let (uv, kv) = (self.value(*u).data(), self.value(*k).data());
                let (want_u, want_k) = (self.wants(*u), self.wants(*k));
                let mut du = if want_u {
                    vec![T::zero(); uv.len()]
                } else {
                    Vec::new()
                };
                let mut dk = if want_k {
                    vec![T::zero(); kv.len()]
                } else {
                    Vec::new()
                };
                for c in 0..ch {
                    let sk = want_u.then(|| {
                        plan.spectrum_with(|buf| {
                            for (t, v) in buf.iter_mut().enumerate() {
                                *v = kv[t * ch + c];
                            }
                        })
                    });
                    let mut acc = want_k.then(|| vec![Default::default(); plan.spectrum_len()]);
                    for b in 0..bsz {
                        let base = b * len * ch;
                        let sg = plan.spectrum_with(|buf| {
                            for (t, v) in buf.iter_mut().enumerate() {
                                *v = gd[base + t * ch + c];
                            }
                        });
                        if let Some(sk) = &sk {
                            // correlation with the kernel: G * conj(K)
                            let mut prod: Vec<_> =
                                sg.iter().zip(sk).map(|(a, b)| a * b.conj()).collect();
                            plan.inverse_with(&mut prod, |t, v| du[base + t * ch + c] = v);
                        }
                        if let Some(acc) = acc.as_mut() {
                            let su_spec = plan.spectrum_with(|buf| {
                                for (t, v) in buf.iter_mut().enumerate() {
                                    *v = uv[base + t * ch + c];
                                }
                            });
                            for ((a, gs), us) in acc.iter_mut().zip(&sg).zip(&su_spec) {
                                *a = *a + gs * us.conj();
                            }
                        }
                    }
                    if let Some(mut acc) = acc {
                        plan.inverse_with(&mut acc, |t, v| dk[t * ch + c] = v);
                    }
                }
                if want_u {
                    out.push((*u, self.like(*u, du)));
                }
                if want_k {
                    out.push((*k, self.like(*k, dk)));
                }
            }
            Op::SsmDiscretize { a, b, log_dt, minv } => {
                let sa = self.shape(*a);
                let (ch, n) = (sa[0], sa[1]);
                let (av, bv, dv) = (
                    self.value(*a).data(),
                    self.value(*b).data(),
                    self.value(*log_dt).data(),
                );
                let mut da = vec![T::zero(); ch * n * n];
                let mut db = vec![T::zero(); ch * n];
                let mut ddt = vec![T::zero(); ch];
                for c in 0..ch {
                    let mut g_abar = vec![T::zero(); n * n];
                    let mut g_bbar = vec![T::zero(); n];
                    for r in 0..n {
                        let row = &gd[(c * n + r) * (n + 1)..(c * n + r + 1) * (n + 1)];
                        g_abar[r * n..(r + 1) * n].copy_from_slice(&row[..n]);
                        g_bbar[r] = row[n];
                    }
                    let a_eff: Vec<T> =
                        av[c * n * n..(c + 1) * n * n].iter().map(|&v| -v).collect();
                    let delta = dv[c].exp();
                    let (ga, gb, gdelta) = ssm::grad::bilinear_backward(
                        &a_eff,
                        &bv[c * n..(c + 1) * n],
                        delta,
                        &minv[c * n * n..(c + 1) * n * n],
                        &g_abar,
                        &g_bbar,
                        n,
                    );
                    for (dst, v) in da[c * n * n..(c + 1) * n * n].iter_mut().zip(ga) {
                        *dst = -v;
                    }
                    db[c * n..(c + 1) * n].copy_from_slice(&gb);
                    ddt[c] = gdelta * delta;
                }
                if self.wants(*a) {
                    out.push((*a, self.like(*a, da)));
                }
                if self.wants(*b) {
                    out.push((*b, self.like(*b, db)));
                }
                if self.wants(*log_dt) {
                    out.push((*log_dt, self.like(*log_dt, ddt)));
                }
            }
            Op::SsmKernel {
                abar,
                bbar,
                c,
                states,
            } => {
                let sa = self.shape(*abar);
                let (ch, n) = (sa[0], sa[1]);
                let len = g.shape()[0];
                let (av, cv) = (self.value(*abar).data(), self.value(*c).data());
                let mut da = vec![T::zero(); ch * n * n];
                let mut db = vec![T::zero(); ch * n];
                let mut dc = vec![T::zero(); ch * n];
                for k in 0..ch {
                    ssm::grad::kernel_backward(
                        &av[k * n * n..(k + 1) * n * n],
                        &cv[k * n..(k + 1) * n],
                        &states[k * len * n..(k + 1) * len * n],
                        |i| gd[i * ch + k],
                        len,
                        &mut da[k * n * n..(k + 1) * n * n],
                        &mut db[k * n..(k + 1) * n],
                        &mut dc[k * n..(k + 1) * n],
                    );
                }
                for (v, d) in [(*abar, da), (*bbar, db), (*c, dc)] {
                    if self.wants(v) {
                        out.push((v, self.like(v, d)));
                    }
                }
            }
            Op::SsmScan {
                abar,
                bbar,
                c,
                u,
                states,
            } => {
                let sa = self.shape(*abar);
                let (ch, n) = (sa[0], sa[1]);
                let su = self.shape(*u);
                let (bsz, len) = (su[0], su[1]);
                let (av, bv, cv, uv) = (
                    self.value(*abar).data(),
                    self.value(*bbar).data(),
                    self.value(*c).data(),
                    self.value(*u).data(),
                );
                let want_u = self.wants(*u);
                let mut da = vec![T::zero(); ch * n * n];
                let mut db = vec![T::zero(); ch * n];
                let mut dc = vec![T::zero(); ch * n];
                let mut du = vec![T::zero(); if want_u { uv.len() } else { 0 }];
                for b in 0..bsz {
                    let base = b * len * ch;
                    for k in 0..ch {
                        let st = (b * ch + k) * len * n;
                        let mut sink = |t: usize, v: T| du[base + t * ch + k] = v;
                        ssm::grad::scan_backward(
                            &av[k * n * n..(k + 1) * n * n],
                            &bv[k * n..(k + 1) * n],
                            &cv[k * n..(k + 1) * n],
                            len,
                            |t| uv[base + t * ch + k],
                            |t| gd[base + t * ch + k],
                            if want_u {
                                Some(&mut sink as &mut dyn FnMut(usize, T))
                            } else {
                                None
                            },
                            &states[st..st + len * n],
                            &mut da[k * n * n..(k + 1) * n * n],
                            &mut db[k * n..(k + 1) * n],
                            &mut dc[k * n..(k + 1) * n],
                        );
                    }
                }
                for (v, d) in [(*abar, da), (*bbar, db), (*c, dc)] {
                    if self.wants(v) {
                        out.push((v, self.like(v, d)));
                    }
                }
                if want_u {
                    out.push((*u, self.like(*u, du)));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let scale = gd[0] / T::of(targets.len() as f64);
                let mut dx = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * k + t] -= T::one();
                }
                dx.iter_mut().for_each(|v| *v *= scale);
                out.push((*logits, self.like(*logits, dx)));
            }
        }
        Ok(out)
    }
}
