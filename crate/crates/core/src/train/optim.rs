use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect()
        };
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One AdamW update. Parameters whose gradient is `None` (frozen or unused)
/// are left untouched, including by weight decay.
///
/// `p <- p (1 - lr wd) - lr mhat / (sqrt(vhat) + eps)`.
pub fn adamw_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "adamw: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.shape() != params[i].shape() || state.m[i].shape() != params[i].shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    lhs: params[i].shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            g.check_finite("gradient")?;
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = T::of(1.0 - cfg.beta1.powi(t));
    let bc2 = T::of(1.0 - cfg.beta2.powi(t));
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
    let decay = T::of(1.0 - cfg.lr * cfg.weight_decay);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let p = params[i].data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] = p[j] * decay - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Global L2 norm of all present gradients.
pub fn global_norm<T: Scalar>(grads: &[Option<Tensor<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let x = v.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn zero_grad_no_decay_is_a_no_op() {
        let mut p = vec![t(&[0.3, -1.0, 2.5])];
        let before = p.clone();
        let mut s = AdamState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        for _ in 0..5 {
            adamw_step(&mut p, &[Some(t(&[0.0; 3]))], &mut s, &cfg).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![t(&[1.0])];
        let mut s = AdamState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut p, &[Some(t(&[1.0]))], &mut s, &cfg).unwrap();
        let delta = p[0].data()[0] - 1.0;
        assert!((delta + 1e-3).abs() < 1e-10, "{delta}");
    }

    #[test]
    fn decoupled_decay() {
        let mut p = vec![t(&[2.0, -4.0])];
        let mut s = AdamState::new(&p);
        let cfg = AdamWConfig::default();
        for step in 1..=3 {
            adamw_step(&mut p, &[Some(t(&[0.0, 0.0]))], &mut s, &cfg).unwrap();
            let f = (1.0f64 - 1e-5).powi(step);
            assert!((p[0].data()[0] - 2.0 * f).abs() < 1e-15);
            assert!((p[0].data()[1] + 4.0 * f).abs() < 1e-15);
        }
    }

    #[test]
    fn two_step_trace_without_decay() {
        // Hand-unrolled Adam for g1 = 0.5, g2 = -0.2.
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![t(&[1.0])];
        let mut s = AdamState::new(&p);
        adamw_step(&mut p, &[Some(t(&[0.5]))], &mut s, &cfg).unwrap();
        adamw_step(&mut p, &[Some(t(&[-0.2]))], &mut s, &cfg).unwrap();
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
        let mut x = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        for (k, g) in [0.5f64, -0.2].iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(k as i32 + 1));
            let vh = v / (1.0 - b2.powi(k as i32 + 1));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((p[0].data()[0] - x).abs() < 1e-15);
    }

    #[test]
    fn missing_gradients_are_skipped() {
        let mut p = vec![t(&[1.0]), t(&[2.0])];
        let mut s = AdamState::new(&p);
        adamw_step(
            &mut p,
            &[None, Some(t(&[1.0]))],
            &mut s,
            &AdamWConfig::default(),
        )
        .unwrap();
        assert_eq!(p[0].data(), &[1.0]);
        assert_ne!(p[1].data(), &[2.0]);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = vec![t(&[1.0])];
        let mut s = AdamState::new(&p);
        let r = adamw_step(
            &mut p,
            &[Some(t(&[f64::NAN]))],
            &mut s,
            &AdamWConfig::default(),
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn clipping() {
        let mut g = vec![Some(t(&[3.0])), None, Some(t(&[4.0]))];
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        let mut small = vec![Some(t(&[0.3]))];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].as_ref().unwrap().data(), &[0.3]);
    }
}
