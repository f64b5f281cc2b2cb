use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// `tanh` through one `exp`, which is markedly cheaper than libm's `tanh`.
#[inline]
fn fast_tanh<T: Scalar>(z: T) -> T {
    let a = z.abs();
    if a < T::of(0.25) {
        return z.tanh();
    }
    let e = (T::of(-2.0) * a).exp();
    let t = (T::one() - e) / (T::one() + e);
    if z < T::zero() {
        -t
    } else {
        t
    }
}

/// tanh-approximated GELU.
#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    half * x * (T::one() + fast_tanh(c * (x + k * x * x * x)))
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    let t = fast_tanh(c * (x + k * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

impl<T: Scalar> Tape<T> {
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(gelu);
        let flops = 12 * value.numel() as u64;
        self.push("gelu", value, Op::Gelu(x), flops, 0)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::InvalidShape("softmax of a scalar".into()))?;
        self.reserve(self.value(x).bytes())?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(d) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            let inv = T::one() / s;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let flops = 5 * out.len() as u64;
        self.push(
            "softmax",
            Tensor::from_parts(shape, out),
            Op::Softmax(x),
            flops,
            0,
        )
    }

    /// Layer normalisation over the last axis followed by `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::InvalidShape("layer_norm of a scalar".into()))?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let eps = T::of(eps);
        let inv_d = T::one() / T::of(d as f64);
        let xs = self.value(x).data();
        let (gs, bs) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xs.len() / d;
        let mut xhat = vec![T::zero(); xs.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gs[j] + bs[j];
            }
        }
        let saved = (xhat.len() + rstd.len()) * T::BYTES;
        let flops = 8 * xs.len() as u64;
        if rstd.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(
                "layer_norm (zero variance with eps = 0)".into(),
            ));
        }
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            flops,
            saved,
        )
    }

    /// Max pooling over the `T x H x W` axes of `[..., T, H, W, D]`, no padding.
    /// Ties resolve to the first maximum in window order.
    pub fn max_pool3d(&mut self, x: Var, kernel: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 4 {
            return Err(Error::InvalidShape(format!(
                "max_pool3d needs [..., T, H, W, D], got {shape:?}"
            )));
        }
        if kernel.iter().chain(&stride).any(|&v| v == 0) {
            return Err(Error::InvalidArgument(format!(
                "max_pool3d kernel {kernel:?} stride {stride:?} must be positive"
            )));
        }
        let r = shape.len();
        let (t, h, w, d) = (shape[r - 4], shape[r - 3], shape[r - 2], shape[r - 1]);
        let ext = [t, h, w];
        let mut out_ext = [0usize; 3];
        for i in 0..3 {
            if kernel[i] > ext[i] {
                return Err(Error::InvalidShape(format!(
                    "max_pool3d window {kernel:?} larger than input grid {ext:?}"
                )));
            }
            out_ext[i] = (ext[i] - kernel[i]) / stride[i] + 1;
        }
        let lead: usize = shape[..r - 4].iter().product();
        let [to, ho, wo] = out_ext;
        let n_out = lead * to * ho * wo * d;
        let src = self.value(x).data();
        let mut out = vec![T::neg_infinity(); n_out];
        let mut argmax = vec![0usize; n_out];
        let mut o = 0;
        for bi in 0..lead {
            let base = bi * t * h * w * d;
            for ot in 0..to {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let best = &mut out[o..o + d];
                        let at = &mut argmax[o..o + d];
                        for kt in 0..kernel[0] {
                            for kh in 0..kernel[1] {
                                for kw in 0..kernel[2] {
                                    let it = ot * stride[0] + kt;
                                    let ih = oh * stride[1] + kh;
                                    let iw = ow * stride[2] + kw;
                                    let row = base + ((it * h + ih) * w + iw) * d;
                                    for (c, &v) in src[row..row + d].iter().enumerate() {
                                        if v > best[c] || (kt | kh | kw == 0) {
                                            best[c] = v;
                                            at[c] = row + c;
                                        }
                                    }
                                }
                            }
                        }
                        o += d;
                    }
                }
            }
        }
        let mut out_shape = shape[..r - 4].to_vec();
        out_shape.extend_from_slice(&[to, ho, wo, d]);
        let window = kernel.iter().product::<usize>() as u64;
        let saved = argmax.len() * std::mem::size_of::<usize>();
        self.push(
            "max_pool3d",
            Tensor::from_parts(out_shape, out),
            Op::MaxPool3d { x, argmax },
            n_out as u64 * window,
            saved,
        )
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        let k = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: target {bad} not below class count {k}"
            )));
        }
        let xs = self.value(logits).data();
        let mut probs = vec![T::zero(); xs.len()];
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &xs[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let s: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + s.ln();
            total += lse - row[t];
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
        }
        let loss = total / T::of(targets.len() as f64);
        let saved = probs.len() * T::BYTES;
        let flops = 6 * xs.len() as u64;
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            flops,
            saved,
        )
    }
}
