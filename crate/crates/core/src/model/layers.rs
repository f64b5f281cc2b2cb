use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::ssm::{hippo_input, hippo_matrix};
use crate::tensor::Tensor;

use super::config::SsmMode;

#[derive(Clone, Copy, Debug)]
pub(crate) struct LinearIds {
    pub w: usize,
    pub b: usize,
}

impl LinearIds {
    /// Weight `[fan_in, fan_out]` uniform on `+-1/sqrt(fan_in)`, zero bias.
    pub fn init<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        LinearIds {
            w: ps.add(
                format!("{name}.w"),
                Tensor::uniform(vec![fan_in, fan_out], -bound, bound, rng),
            ),
            b: ps.add(format!("{name}.b"), Tensor::zeros(vec![fan_out])),
        }
    }

    pub fn forward<T: Scalar>(self, t: &mut Tape<T>, v: &[Var], x: Var) -> Result<Var> {
        let y = t.matmul(x, v[self.w])?;
        t.add(y, v[self.b])
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NormIds {
    pub g: usize,
    pub b: usize,
}

impl NormIds {
    pub fn init<T: Scalar>(ps: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        NormIds {
            g: ps.add(format!("{name}.g"), Tensor::ones(vec![d])),
            b: ps.add(format!("{name}.b"), Tensor::zeros(vec![d])),
        }
    }

    pub fn forward<T: Scalar>(self, t: &mut Tape<T>, v: &[Var], x: Var, eps: f64) -> Result<Var> {
        t.layer_norm(x, v[self.g], v[self.b], eps)
    }
}

/// Multi-head self-attention over the middle axis of `[batch, L, D]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MhaIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
    pub heads: usize,
}

impl MhaIds {
    pub fn init<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        MhaIds {
            q: LinearIds::init(ps, &format!("{name}.q"), d, d, rng),
            k: LinearIds::init(ps, &format!("{name}.k"), d, d, rng),
            v: LinearIds::init(ps, &format!("{name}.v"), d, d, rng),
            o: LinearIds::init(ps, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    pub fn forward<T: Scalar>(self, t: &mut Tape<T>, v: &[Var], x: Var) -> Result<Var> {
        let s = t.shape(x).to_vec();
        let (bt, len, d) = (s[0], s[1], s[2]);
        let h = self.heads;
        let dh = d / h;
        let q = self.q.forward(t, v, x)?;
        // The 1/sqrt(dh) factor is applied to the queries so that only the
        // scores and the probabilities are L x L.
        let q = t.scale(q, 1.0 / (dh as f64).sqrt())?;
        let k = self.k.forward(t, v, x)?;
        let val = self.v.forward(t, v, x)?;
        let (q, kt, val) = if h == 1 {
            (q, t.permute(k, &[0, 2, 1])?, val)
        } else {
            let split = |t: &mut Tape<T>, z: Var, axes: &[usize], tail: [usize; 2]| {
                let z = t.reshape(z, &[bt, len, h, dh])?;
                let z = t.permute(z, axes)?;
                t.reshape(z, &[bt * h, tail[0], tail[1]])
            };
            (
                split(t, q, &[0, 2, 1, 3], [len, dh])?,
                split(t, k, &[0, 2, 3, 1], [dh, len])?,
                split(t, val, &[0, 2, 1, 3], [len, dh])?,
            )
        };
        let scores = t.bmm(q, kt)?;
        let probs = t.softmax(scores)?;
        let ctx = t.bmm(probs, val)?;
        let ctx = if h == 1 {
            ctx
        } else {
            let c = t.reshape(ctx, &[bt, h, len, dh])?;
            let c = t.permute(c, &[0, 2, 1, 3])?;
            t.reshape(c, &[bt, len, d])?
        };
        self.o.forward(t, v, ctx)
    }
}

/// Bank of per-channel SSMs followed by optional GELU and channel mixing.
#[derive(Clone, Copy, Debug)]
pub(crate) struct S4Ids {
    pub a: usize,
    pub b: usize,
    pub c: usize,
    pub d: usize,
    pub log_dt: usize,
    pub state: usize,
    pub mix: Option<LinearIds>,
    pub activation: bool,
    pub mode: SsmMode,
}

pub(crate) struct S4Init {
    pub state: usize,
    pub log_dt: (f64, f64),
    pub mixing: bool,
    pub activation: bool,
    pub mode: SsmMode,
}

impl S4Ids {
    pub fn init<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        d: usize,
        cfg: &S4Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let n = cfg.state;
        let hippo = hippo_matrix::<T>(n)?;
        let a = Tensor::from_fn(vec![d, n, n], |i| hippo[i % (n * n)]);
        let bin = hippo_input::<T>(n);
        let b = Tensor::from_fn(vec![d, n], |i| bin[i % n]);
        let c = Tensor::randn(vec![d, n], 1.0 / (n as f64).sqrt(), rng);
        let (lo, hi) = cfg.log_dt;
        let log_dt = Tensor::from_fn(vec![d], |_| {
            T::of(if lo < hi {
                rng.random_range(lo..hi)
            } else {
                lo
            })
        });
        Ok(S4Ids {
            a: ps.add(format!("{name}.a"), a),
            b: ps.add(format!("{name}.b"), b),
            c: ps.add(format!("{name}.c"), c),
            d: ps.add(format!("{name}.d"), Tensor::ones(vec![d])),
            log_dt: ps.add(format!("{name}.log_dt"), log_dt),
            state: n,
            mix: cfg
                .mixing
                .then(|| LinearIds::init(ps, &format!("{name}.mix"), d, d, rng)),
            activation: cfg.activation,
            mode: cfg.mode,
        })
    }

    /// `x[B, L, D] -> [B, L, D]`.
    pub fn forward<T: Scalar>(self, t: &mut Tape<T>, v: &[Var], x: Var) -> Result<Var> {
        let len = t.shape(x)[1];
        let ch = t.shape(x)[2];
        let n = self.state;
        let packed = t.ssm_discretize(v[self.a], v[self.b], v[self.log_dt])?;
        let abar = t.narrow(packed, 2, 0, n)?;
        let bbar = t.narrow(packed, 2, n, 1)?;
        let bbar = t.reshape(bbar, &[ch, n])?;
        let y = match self.mode {
            SsmMode::Conv => {
                let k = t.ssm_kernel(abar, bbar, v[self.c], len)?;
                t.causal_conv(x, k)?
            }
            SsmMode::Recurrent => t.ssm_scan(abar, bbar, v[self.c], x)?,
        };
        let du = t.mul(x, v[self.d])?;
        let mut y = t.add(y, du)?;
        if self.activation {
            y = t.gelu(y)?;
        }
        if let Some(mix) = self.mix {
            y = mix.forward(t, v, y)?;
        }
        Ok(y)
    }
}

/// Pre-norm transformer block: attention then MLP, each with a residual.
#[derive(Clone, Copy, Debug)]
pub(crate) struct EncBlockIds {
    pub ln1: NormIds,
    pub attn: MhaIds,
    pub ln2: NormIds,
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

impl EncBlockIds {
    pub fn init<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        ratio: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        EncBlockIds {
            ln1: NormIds::init(ps, &format!("{name}.ln1"), d),
            attn: MhaIds::init(ps, &format!("{name}.attn"), d, heads, rng),
            ln2: NormIds::init(ps, &format!("{name}.ln2"), d),
            fc1: LinearIds::init(ps, &format!("{name}.fc1"), d, d * ratio, rng),
            fc2: LinearIds::init(ps, &format!("{name}.fc2"), d * ratio, d, rng),
        }
    }

    pub fn forward<T: Scalar>(self, t: &mut Tape<T>, v: &[Var], z: Var, eps: f64) -> Result<Var> {
        let h = self.ln1.forward(t, v, z, eps)?;
        let h = self.attn.forward(t, v, h)?;
        let z = t.add(h, z)?;
        let h = self.ln2.forward(t, v, z, eps)?;
        let h = self.fc1.forward(t, v, h)?;
        let h = t.gelu(h)?;
        let h = self.fc2.forward(t, v, h)?;
        t.add(h, z)
    }
}
