use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{discretize, random_stable, relative_error, ssm_conv, ssm_recurrent, SsmParams};
use crate::error::{Error, Result};

/// Worst conv-vs-recurrent disagreement over a sweep of random systems.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EquivReport {
    pub systems: usize,
    pub max_rel_f64: f64,
    pub max_rel_f32: f64,
    /// Index of the system with the largest 64-bit error.
    pub worst_f64: usize,
    pub worst_f32: usize,
}

/// Compares `ssm_conv` with `ssm_recurrent` on `count` random stable systems.
/// System `i` draws its state size in `1..=max_state`, its length in
/// `1..=max_len` and a N(0, 1) input from stream `i` of `seed`; the 32-bit
/// check runs the same system and input after casting.
pub fn mode_equivalence(
    count: usize,
    max_state: usize,
    max_len: usize,
    seed: u64,
) -> Result<EquivReport> {
    if max_state == 0 || max_len == 0 {
        return Err(Error::InvalidArgument(
            "max_state and max_len must be positive".into(),
        ));
    }
    let mut r = EquivReport {
        systems: count,
        max_rel_f64: 0.0,
        max_rel_f32: 0.0,
        worst_f64: 0,
        worst_f32: 0,
    };
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let n = rng.random_range(1..=max_state);
        let len = rng.random_range(1..=max_len);
        let sys = random_stable(n, &mut rng)?;
        let u: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
        let e64 = relative_error(&ssm_conv(&sys, &u)?, &ssm_recurrent(&sys, &u)?);
        let sys32 = sys.cast::<f32>();
        let u32: Vec<f32> = u.iter().map(|&v| v as f32).collect();
        let e32 = relative_error(&ssm_conv(&sys32, &u32)?, &ssm_recurrent(&sys32, &u32)?);
        if e64 > r.max_rel_f64 {
            r.max_rel_f64 = e64;
            r.worst_f64 = i;
        }
        if e32 > r.max_rel_f32 {
            r.max_rel_f32 = e32;
            r.worst_f32 = i;
        }
    }
    Ok(r)
}

/// Spectral radius of the bilinear `Abar` for a HiPPO system of each state
/// size and step size. Returns `(N, step, radius)` triples.
pub fn hippo_radii(states: &[usize], steps: &[f64]) -> Result<Vec<(usize, f64, f64)>> {
    let mut out = Vec::with_capacity(states.len() * steps.len());
    for &n in states {
        for &dt in steps {
            let p = SsmParams::hippo(n, vec![0.0f64; n], 0.0, dt.ln())?;
            out.push((n, dt, discretize(&p)?.spectral_radius()?));
        }
    }
    Ok(out)
}

/// `count` log-spaced values from `lo` to `hi` inclusive.
pub fn log_space(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count)
            .map(|i| {
                let f = i as f64 / (count - 1) as f64;
                (lo.ln() + f * (hi.ln() - lo.ln())).exp()
            })
            .collect(),
    }
}
