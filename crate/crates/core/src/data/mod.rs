//! Synthetic long-range tasks and pre-extracted feature datasets.

mod features;

pub use features::{load_features, FeatureDataset, FeatureManifest};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Magnitude of the label-carrying token in the delayed-class task.
pub const SIGNAL_MAGNITUDE: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    Value(f64),
}

impl Target {
    pub fn class(self) -> Option<usize> {
        match self {
            Target::Class(c) => Some(c),
            Target::Value(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example<T> {
    pub input: Tensor<T>,
    pub target: Target,
}

/// Random-access collection of examples with a common input shape.
pub trait Dataset<T: Scalar> {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<Example<T>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Examples held in memory.
#[derive(Clone, Debug, Default)]
pub struct VecDataset<T> {
    pub examples: Vec<Example<T>>,
}

impl<T: Scalar> Dataset<T> for VecDataset<T> {
    fn len(&self) -> usize {
        self.examples.len()
    }

    fn get(&self, index: usize) -> Result<Example<T>> {
        self.examples
            .get(index)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("index {index} of {}", self.len())))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn code(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    /// The label sits in one token in the first quarter; everything after is noise.
    DelayedClass,
    /// Label is the majority sign of channel 0 over the first `window` tokens.
    LongMajority { window: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    /// Token grid `T x H x W`; the sequence length is the product.
    pub grid: [usize; 3],
    /// Token width.
    pub width: usize,
    pub classes: usize,
    pub seed: u64,
}

/// Identifies one sample: the task seed picks the key, the stream is unique
/// per `(split, index)`, so samples of different splits never share a stream.
pub fn sample_stream(split: Split, index: u64) -> u64 {
    (split.code() << 56) | index
}

fn sample_rng(seed: u64, split: Split, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample_stream(split, index));
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Noise sequence `[len, width]` with a noise-free `SIGNAL_MAGNITUDE * e_label`
/// token at a position below `len / 4`. Returns the sequence and the position.
pub fn gen_delayed_class<T: Scalar>(
    len: usize,
    width: usize,
    classes: usize,
    label: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<T>, usize)> {
    if len < 4 {
        return Err(Error::InvalidArgument(format!(
            "delayed-class needs length >= 4, got {len}"
        )));
    }
    if classes < 2 || label >= classes || width < classes {
        return Err(Error::InvalidArgument(format!(
            "delayed-class: label {label} of {classes} classes in width {width}"
        )));
    }
    let pos = rng.random_range(0..len / 4);
    let mut data: Vec<T> = (0..len * width).map(|_| T::of(normal(rng))).collect();
    let tok = &mut data[pos * width..(pos + 1) * width];
    tok.iter_mut().for_each(|v| *v = T::zero());
    tok[label] = T::of(SIGNAL_MAGNITUDE);
    Ok((Tensor::new(vec![len, width], data)?, pos))
}

/// Majority label of `signs` (1 if positives win, 0 if negatives win), or
/// `None` on a tie.
pub fn majority_label(signs: &[f64]) -> Option<usize> {
    let pos = signs.iter().filter(|&&v| v > 0.0).count();
    let neg = signs.len() - pos;
    match pos.cmp(&neg) {
        std::cmp::Ordering::Greater => Some(1),
        std::cmp::Ordering::Less => Some(0),
        std::cmp::Ordering::Equal => None,
    }
}

/// Channel 0 holds random +-1 values, other channels N(0, 1) noise. The label
/// is the majority sign over the first `window` tokens; ties are redrawn.
pub fn gen_long_majority<T: Scalar>(
    len: usize,
    width: usize,
    window: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<T>, usize)> {
    if window > len || 2 * window < len || width == 0 {
        return Err(Error::InvalidArgument(format!(
            "long-majority: window {window} must lie in [L/2, L] for L = {len}"
        )));
    }
    loop {
        let mut data = vec![T::zero(); len * width];
        let mut signs = vec![0.0; len];
        for t in 0..len {
            let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
            signs[t] = s;
            data[t * width] = T::of(s);
            for c in 1..width {
                data[t * width + c] = T::of(normal(rng));
            }
        }
        if let Some(label) = majority_label(&signs[..window]) {
            return Ok((Tensor::new(vec![len, width], data)?, label));
        }
    }
}

impl SyntheticTask {
    pub fn delayed_class(grid: [usize; 3], width: usize, classes: usize, seed: u64) -> Self {
        SyntheticTask {
            kind: TaskKind::DelayedClass,
            grid,
            width,
            classes,
            seed,
        }
    }

    pub fn long_majority(grid: [usize; 3], width: usize, window: usize, seed: u64) -> Self {
        SyntheticTask {
            kind: TaskKind::LongMajority { window },
            grid,
            width,
            classes: 2,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sample `index` of `split` as a `[T, H, W, D]` token grid.
    /// Delayed-class labels cycle through the classes, so every split is balanced.
    pub fn sample<T: Scalar>(&self, split: Split, index: u64) -> Result<Example<T>> {
        let mut rng = sample_rng(self.seed, split, index);
        let len = self.len();
        let (seq, label) = match self.kind {
            TaskKind::DelayedClass => {
                let label = (index % self.classes as u64) as usize;
                let (seq, _) = gen_delayed_class(len, self.width, self.classes, label, &mut rng)?;
                (seq, label)
            }
            TaskKind::LongMajority { window } => {
                gen_long_majority(len, self.width, window, &mut rng)?
            }
        };
        let [t, h, w] = self.grid;
        Ok(Example {
            input: seq.reshape(vec![t, h, w, self.width])?,
            target: Target::Class(label),
        })
    }

    /// Position of the signal token of a delayed-class sample.
    pub fn signal_position(&self, split: Split, index: u64) -> Option<usize> {
        if self.kind != TaskKind::DelayedClass {
            return None;
        }
        let mut rng = sample_rng(self.seed, split, index);
        Some(rng.random_range(0..self.len() / 4))
    }

    pub fn split(&self, split: Split, size: usize) -> SyntheticSplit {
        SyntheticSplit {
            task: self.clone(),
            split,
            size,
        }
    }
}

/// A fixed-size split of a synthetic task, generated on demand.
#[derive(Clone, Debug)]
pub struct SyntheticSplit {
    pub task: SyntheticTask,
    pub split: Split,
    pub size: usize,
}

impl<T: Scalar> Dataset<T> for SyntheticSplit {
    fn len(&self) -> usize {
        self.size
    }

    fn get(&self, index: usize) -> Result<Example<T>> {
        if index >= self.size {
            return Err(Error::InvalidArgument(format!(
                "index {index} of {}",
                self.size
            )));
        }
        self.task.sample(self.split, index as u64)
    }
}

/// 1-D linear regression `y = w x` posed on constant token grids: every
/// element of the `[T, H, W, D]` input equals `x`.
pub fn linear_regression<T: Scalar>(
    grid: [usize; 3],
    width: usize,
    w: f64,
    n: usize,
    seed: u64,
) -> VecDataset<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [t, h, wd] = grid;
    let examples = (0..n)
        .map(|_| {
            let x: f64 = rng.random_range(-1.0..1.0);
            Example {
                input: Tensor::full(vec![t, h, wd, width], T::of(x)),
                target: Target::Value(w * x),
            }
        })
        .collect();
    VecDataset { examples }
}
