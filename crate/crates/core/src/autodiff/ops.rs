use super::{is_suffix, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;
use crate::tensor::{numel_of, strides_of, Tensor};

/// Permutes row-major `data` of `shape` so that output axis `i` is input axis `axes[i]`.
pub(crate) fn permute_data<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    // Innermost axis is copied in a tight loop.
    let inner_len = out_shape.last().copied().unwrap_or(1);
    let inner_stride = src_strides.last().copied().unwrap_or(1);
    let outer = data.len() / inner_len;
    for _ in 0..outer {
        for j in 0..inner_len {
            out.push(data[offset + j * inner_stride]);
        }
        // advance all but last axis
        let mut ax = rank.saturating_sub(1);
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Sums `g` (shape `full`) down to the trailing `suffix` shape.
pub(crate) fn reduce_to_suffix<T: Scalar>(g: &[T], suffix_numel: usize) -> Vec<T> {
    let mut out = vec![T::zero(); suffix_numel];
    for chunk in g.chunks_exact(suffix_numel) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !is_suffix(&sa, &sb) {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: sa,
                rhs: sb,
            });
        }
        let bv = self.value(b).data();
        let nb = bv.len();
        let av = self.value(a).data();
        let mut data: Vec<T> = Vec::with_capacity(av.len());
        for chunk in av.chunks_exact(nb) {
            data.extend(chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)));
        }
        let n = data.len() as u64;
        self.push(name, Tensor::from_parts(sa, data), make(a, b), n, 0)
    }

    /// Elementwise sum; `b` may be broadcast over leading axes of `a` (its
    /// shape must be a suffix of `a`'s), and the operands may be given in
    /// either order.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if !is_suffix(self.shape(a), self.shape(b)) && is_suffix(self.shape(b), self.shape(a)) {
            return self.binary("add", b, a, |x, y| x + y, Op::Add);
        }
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    /// `a - b`, with `b` broadcast over leading axes of `a`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product, with broadcasting as in [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if !is_suffix(self.shape(a), self.shape(b)) && is_suffix(self.shape(b), self.shape(a)) {
            return self.binary("mul", b, a, |x, y| x * y, Op::Mul);
        }
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::of(factor);
        let value = self.value(x).map(|v| v * f);
        let n = value.numel() as u64;
        self.push("scale", value, Op::Scale(x, f), n, 0)
    }

    /// `a[..., k] x b[k, n] -> [..., n]`. Leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (k, n) = (sb[0], sb[1]);
        let m = numel_of(&sa) / k;
        self.reserve(m * n * T::BYTES)?;
        let mut out = vec![T::zero(); m * n];
        linalg::gemm_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let flops = 2 * (m * k * n) as u64;
        self.push(
            "matmul",
            Tensor::from_parts(shape, out),
            Op::MatMul(a, b),
            flops,
            0,
        )
    }

    /// Batched product `[bt, m, k] x [bt, k, n] -> [bt, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        self.reserve(bt * m * n * T::BYTES)?;
        let mut out = vec![T::zero(); bt * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..bt {
                linalg::gemm_acc(
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let flops = 2 * (bt * m * k * n) as u64;
        self.push(
            "bmm",
            Tensor::from_parts(vec![bt, m, n], out),
            Op::BatchMatMul(a, b),
            flops,
            0,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(x), 0, 0)
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::InvalidArgument(format!(
                "permute {axes:?} of shape {shape:?}"
            )));
        }
        let data = permute_data(self.value(x).data(), &shape, axes);
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        self.push(
            "permute",
            Tensor::from_parts(out_shape, data),
            Op::Permute(x, axes.to_vec()),
            0,
            0,
        )
    }

    /// Slice `start..start + len` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidArgument(format!(
                "narrow axis {axis} [{start}, {}) of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(
            "narrow",
            Tensor::from_parts(out_shape, data),
            Op::Narrow { x, axis, start },
            0,
            0,
        )
    }

    /// Mean over the listed axes (removed from the output shape).
    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::InvalidArgument(format!(
                "mean over {axes:?} of shape {shape:?}"
            )));
        }
        let (out_shape, map) = reduction_map(&shape, &axes);
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        let mut out = vec![T::zero(); numel_of(&out_shape)];
        for (&v, &o) in self.value(x).data().iter().zip(&map) {
            out[o] += v;
        }
        let inv = T::one() / T::of(count as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let flops = self.value(x).numel() as u64;
        self.push(
            "mean",
            Tensor::from_parts(out_shape, out),
            Op::Mean { x, axes },
            flops,
            0,
        )
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.mean(x, &axes)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let flops = self.value(x).numel() as u64;
        self.push("sum", Tensor::scalar(s), Op::Sum(x), flops, 0)
    }
}

/// Output shape after removing `axes`, and the output flat index of every input element.
pub(crate) fn reduction_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &e)| e)
        .collect();
    let out_strides = strides_of(&out_shape);
    // stride in the output for each input axis (0 for reduced axes)
    let mut per_axis = vec![0usize; shape.len()];
    let mut j = 0;
    for (i, s) in per_axis.iter_mut().enumerate() {
        if !axes.contains(&i) {
            *s = out_strides[j];
            j += 1;
        }
    }
    let n = numel_of(shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        let mut ax = shape.len();
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            off += per_axis[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= per_axis[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, map)
}
