//! Scaling benchmarks: wall time, counted activation memory and analytic
//! flops of one forward+backward step as the token count grows.

use std::io::{Read, Write};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{DecoderKind, Model, ModelConfig};
use crate::tensor::Tensor;

/// Fixed CSV header of benchmark output.
pub const CSV_HEADER: [&str; 5] = ["variant", "L", "wall_ms", "peak_bytes", "flops"];

/// Frames and side of the full-resolution feature grid the Fig. 3 style
/// token counts are pooled from (60 frames of 14 x 14 patches).
pub const SOURCE_GRID: [usize; 3] = [60, 14, 14];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub variant: String,
    #[serde(rename = "L")]
    pub tokens: usize,
    /// Median over trials; NaN on a failure row.
    pub wall_ms: f64,
    pub peak_bytes: usize,
    pub flops: u64,
    #[serde(skip)]
    pub error: Option<String>,
}

impl BenchResult {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingFit {
    pub slope: f64,
    pub r2: f64,
}

/// How a token count is realised: a source grid, an optional per-frame
/// spatial max-pool `(kernel, stride)`, and the resulting model grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub source: [usize; 3],
    pub pool: Option<(usize, usize)>,
    pub grid: [usize; 3],
}

/// Token counts reachable from `SOURCE_GRID` by spatial pooling use it
/// (60, 1500, 2940, 11760). Other multiples of 16 use an `L/16 x 4 x 4`
/// grid; anything else is a `L x 1 x 1` sequence.
pub fn token_layout(tokens: usize) -> Result<TokenLayout> {
    if tokens == 0 {
        return Err(Error::InvalidArgument(
            "token count must be positive".into(),
        ));
    }
    let [t, h, _] = SOURCE_GRID;
    for (kernel, stride) in [(1, 1), (2, 2), (2, 3), (h, h)] {
        let side = (h - kernel) / stride + 1;
        if t * side * side == tokens {
            let pool = (stride > 1).then_some((kernel, stride));
            return Ok(TokenLayout {
                source: SOURCE_GRID,
                pool,
                grid: [t, side, side],
            });
        }
    }
    let grid = if tokens % 16 == 0 {
        [tokens / 16, 4, 4]
    } else {
        [tokens, 1, 1]
    };
    Ok(TokenLayout {
        source: grid,
        pool: None,
        grid,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    /// Template; `decoder` and `grid` are set per run.
    pub model: ModelConfig,
    pub trials: usize,
    pub seed: u64,
    /// Activation budget per step; exceeding it yields a failure row.
    pub budget_bytes: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            model: ModelConfig {
                encoder: None,
                ..Default::default()
            },
            trials: 5,
            seed: 0,
            budget_bytes: Some(3 << 30),
        }
    }
}

fn bench_input(layout: &TokenLayout, width: usize, seed: u64) -> Result<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [t, h, w] = layout.source;
    let x = Tensor::randn(vec![1, t, h, w, width], 1.0, &mut rng);
    match layout.pool {
        None => Ok(x),
        Some((k, s)) => {
            let mut tape = Tape::new();
            let v = tape.constant(x);
            let p = tape.max_pool3d(v, [1, k, k], [1, s, s])?;
            Ok(tape.value(p).clone())
        }
    }
}

struct StepCost {
    wall_ms: f64,
    peak_bytes: usize,
    flops: u64,
}

fn timed_step(model: &Model<f32>, input: &Tensor<f32>, budget: Option<usize>) -> Result<StepCost> {
    let start = Instant::now();
    let mut t = match budget {
        Some(b) => Tape::with_budget(b),
        None => Tape::new(),
    };
    let v = model.bind(&mut t, true);
    let x = t.constant(input.clone());
    let y = model.forward(&mut t, &v, x, None)?;
    let loss = t.cross_entropy(y, &[0])?;
    t.backward(loss)?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let s = t.stats();
    Ok(StepCost {
        wall_ms,
        peak_bytes: s.peak_activation_bytes,
        flops: s.forward_flops + s.backward_flops,
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One benchmark point: a warm-up step, then the median of `trials` timed
/// forward+backward steps at batch 1. Errors become a failure row.
pub fn run_point(variant: DecoderKind, tokens: usize, cfg: &BenchConfig) -> BenchResult {
    let failed = |e: Error| BenchResult {
        variant: variant.to_string(),
        tokens,
        wall_ms: f64::NAN,
        peak_bytes: 0,
        flops: 0,
        error: Some(e.to_string()),
    };
    let run = || -> Result<BenchResult> {
        let layout = token_layout(tokens)?;
        let model_cfg = ModelConfig {
            decoder: variant,
            grid: layout.grid,
            classes: cfg.model.classes.max(1),
            ..cfg.model.clone()
        };
        let model: Model<f32> = Model::new(model_cfg, cfg.seed)?;
        let input = bench_input(&layout, cfg.model.width, cfg.seed)?;
        let first = timed_step(&model, &input, cfg.budget_bytes)?;
        let mut times = Vec::with_capacity(cfg.trials);
        for _ in 0..cfg.trials.max(1) {
            times.push(timed_step(&model, &input, cfg.budget_bytes)?.wall_ms);
        }
        Ok(BenchResult {
            variant: variant.to_string(),
            tokens,
            wall_ms: median(times),
            peak_bytes: first.peak_bytes,
            flops: first.flops,
            error: None,
        })
    };
    run().unwrap_or_else(failed)
}

/// One result per token count, in order; failures do not stop the sweep.
pub fn run_scaling(variant: DecoderKind, tokens: &[usize], cfg: &BenchConfig) -> Vec<BenchResult> {
    tokens.iter().map(|&l| run_point(variant, l, cfg)).collect()
}

/// Least-squares slope of `ln y` against `ln x`, with its r^2.
pub fn fit_slope(points: &[(f64, f64)]) -> Result<ScalingFit> {
    if points.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "slope fit needs at least 4 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::InvalidArgument(
            "slope fit needs positive values".into(),
        ));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument(
            "slope fit needs distinct x values".into(),
        ));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    Ok(ScalingFit { slope, r2 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    WallMs,
    PeakBytes,
    Flops,
}

impl Metric {
    pub fn of(self, r: &BenchResult) -> f64 {
        match self {
            Metric::WallMs => r.wall_ms,
            Metric::PeakBytes => r.peak_bytes as f64,
            Metric::Flops => r.flops as f64,
        }
    }
}

/// Slope of `metric` against L over the successful rows.
pub fn fit_results(results: &[BenchResult], metric: Metric) -> Result<ScalingFit> {
    let pts: Vec<(f64, f64)> = results
        .iter()
        .filter(|r| r.ok())
        .map(|r| (r.tokens as f64, metric.of(r)))
        .collect();
    fit_slope(&pts)
}

/// Bytes of the `L x L` attention scores and probabilities over all decoder
/// blocks of `cfg` at batch 1, for `elem`-byte scalars.
pub fn attention_matrix_bytes(cfg: &ModelConfig, elem: usize) -> Result<usize> {
    let sched = cfg.schedule()?;
    Ok(sched
        .iter()
        .map(|b| 2 * cfg.attn_heads * b.tokens_in() * b.tokens_in() * elem)
        .sum())
}

/// Writes rows under `CSV_HEADER`. Failure rows keep their L with NaN time.
pub fn write_csv<W: Write>(results: &[BenchResult], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in results {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<BenchResult>> {
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(input);
    let mut rows = rd.records();
    match rows.next() {
        Some(h) => {
            let h = h?;
            if h.iter().ne(CSV_HEADER) {
                return Err(Error::Config(format!(
                    "bench csv header must be `{}`",
                    CSV_HEADER.join(",")
                )));
            }
        }
        None => return Ok(Vec::new()),
    }
    rows.map(|r| {
        let r: BenchResult = r?.deserialize(None)?;
        let error = r.wall_ms.is_nan().then(|| "failed".to_string());
        Ok(BenchResult { error, ..r })
    })
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            BenchResult {
                variant: "s4".into(),
                tokens: 512,
                wall_ms: 1.5,
                peak_bytes: 100,
                flops: 7,
                error: None,
            },
            BenchResult {
                variant: "attention".into(),
                tokens: 8192,
                wall_ms: f64::NAN,
                peak_bytes: 0,
                flops: 0,
                error: Some("over budget".into()),
            },
        ];
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.matches("variant,L").count(), 1);
        let back = read_csv(text.as_bytes()).unwrap();
        assert_eq!(back[0], rows[0]);
        assert!(back[1].wall_ms.is_nan() && !back[1].ok());
        assert!(read_csv("a,b\n".as_bytes()).is_err());
    }

    #[test]
    fn fig3_token_counts() {
        for (l, side, pool) in [
            (11760, 14, None),
            (2940, 7, Some((2, 2))),
            (1500, 5, Some((2, 3))),
            (60, 1, Some((14, 14))),
        ] {
            let t = token_layout(l).unwrap();
            assert_eq!(t.grid, [60, side, side]);
            assert_eq!(t.pool, pool);
        }
        assert_eq!(token_layout(1024).unwrap().grid, [64, 4, 4]);
        assert_eq!(token_layout(7).unwrap().grid, [7, 1, 1]);
        assert!(token_layout(0).is_err());
    }

    #[test]
    fn exact_power_laws() {
        for p in [1.0, 2.0] {
            let pts: Vec<(f64, f64)> = [512.0, 1024.0, 2048.0, 4096.0]
                .iter()
                .map(|&l: &f64| (l, 3.7 * l.powf(p)))
                .collect();
            let f = fit_slope(&pts).unwrap();
            assert!((f.slope - p).abs() < 1e-6);
            assert!(f.r2 > 1.0 - 1e-12);
        }
    }

    #[test]
    fn fit_errors() {
        assert!(fit_slope(&[(1.0, 1.0), (2.0, 2.0), (3.0, 3.0)]).is_err());
        assert!(fit_slope(&[(1.0, 1.0), (2.0, 0.0), (3.0, 3.0), (4.0, 4.0)]).is_err());
        assert!(fit_slope(&[(2.0, 1.0); 4]).is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
