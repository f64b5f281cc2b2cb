//! The video sequence model: an optional per-frame patch encoder, a stack of
//! multi-scale decoder blocks (S4 or self-attention mixers), and a
//! global-average-pooled linear head.
//!
//! Tensors are batched: video input is `[B, T, H, W, 3]`, token grids are
//! `[B, T, H', W', D]`. The decoder flattens each grid time-major, so the
//! sequence index is `(t * H' + h) * W' + w`.

mod config;
mod layers;
mod params;

pub use config::{
    parse_kv, pooled_extent, BlockShape, DecoderKind, EncoderConfig, ModelConfig, SsmMode,
};
pub use params::ParamStore;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheckReport, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use layers::{EncBlockIds, LinearIds, MhaIds, NormIds, S4Ids, S4Init};

pub(crate) use config::parse_value;

#[derive(Clone, Copy, Debug)]
enum Mixer {
    S4(S4Ids),
    Attention(MhaIds),
}

#[derive(Clone, Debug)]
struct BlockIds {
    shape: BlockShape,
    norm: NormIds,
    mixer: Mixer,
    mlp: LinearIds,
    skip: LinearIds,
}

#[derive(Clone, Debug)]
struct EncoderIds {
    proj: LinearIds,
    pos: usize,
    blocks: Vec<EncBlockIds>,
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: Option<EncoderIds>,
    blocks: Vec<BlockIds>,
    head: LinearIds,
}

/// The three tensors of one decoder block: `out = mlp + skip`.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub mlp: Var,
    pub skip: Var,
    pub out: Var,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    layout: Layout,
}

impl<T: Scalar> Model<T> {
    /// Freshly initialised model. All randomness comes from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let schedule = cfg.schedule()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let d = cfg.width;

        let encoder = match &cfg.encoder {
            None => None,
            Some(e) => {
                let p = e.patch;
                let proj = LinearIds::init(&mut ps, "enc.patch", p * p * 3, d, &mut rng);
                let pos = ps.add(
                    "enc.pos",
                    Tensor::randn(vec![e.tokens_per_frame(), d], 0.02, &mut rng),
                );
                let blocks = (0..e.depth)
                    .map(|i| {
                        EncBlockIds::init(
                            &mut ps,
                            &format!("enc.block{i}"),
                            d,
                            e.heads,
                            e.mlp_ratio,
                            &mut rng,
                        )
                    })
                    .collect();
                Some(EncoderIds { proj, pos, blocks })
            }
        };

        let mut blocks = Vec::with_capacity(schedule.len());
        for (i, shape) in schedule.iter().enumerate() {
            let name = format!("dec{i}");
            let (din, dout) = (shape.width_in, shape.width_out);
            let norm = NormIds::init(&mut ps, &format!("{name}.norm"), din);
            let mixer = match cfg.decoder {
                DecoderKind::S4 => Mixer::S4(S4Ids::init(
                    &mut ps,
                    &format!("{name}.s4"),
                    din,
                    &S4Init {
                        state: cfg.state_size,
                        log_dt: (cfg.log_dt_min, cfg.log_dt_max),
                        mixing: cfg.s4_mixing,
                        activation: cfg.s4_activation,
                        mode: cfg.ssm_mode,
                    },
                    &mut rng,
                )?),
                DecoderKind::Attention => {
                    if din % cfg.attn_heads != 0 {
                        return Err(Error::Config(format!(
                            "block {i}: width {din} not divisible by {} heads",
                            cfg.attn_heads
                        )));
                    }
                    Mixer::Attention(MhaIds::init(
                        &mut ps,
                        &format!("{name}.attn"),
                        din,
                        cfg.attn_heads,
                        &mut rng,
                    ))
                }
            };
            let mlp = LinearIds::init(&mut ps, &format!("{name}.mlp"), din, dout, &mut rng);
            let skip = LinearIds::init(&mut ps, &format!("{name}.skip"), din, dout, &mut rng);
            blocks.push(BlockIds {
                shape: *shape,
                norm,
                mixer,
                mlp,
                skip,
            });
        }

        let dfinal = cfg.final_width()?;
        let outputs = if cfg.classes == 0 { 1 } else { cfg.classes };
        let head = LinearIds::init(&mut ps, "head", dfinal, outputs, &mut rng);

        if cfg.encoder.as_ref().is_some_and(|e| e.frozen) {
            ps.set_frozen_prefix("enc.", true);
        }
        Ok(Model {
            cfg,
            params: ps,
            layout: Layout {
                encoder,
                blocks,
                head,
            },
        })
    }

    /// Rebuilds a model around existing parameters, checking names and shapes.
    pub fn from_params(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut m = Model::new(cfg, 0)?;
        if m.params.names() != params.names()
            || m.params
                .tensors()
                .iter()
                .zip(params.tensors())
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Config(
                "parameter set does not match the model configuration".into(),
            ));
        }
        m.params = params;
        Ok(m)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn schedule(&self) -> Vec<BlockShape> {
        self.layout.blocks.iter().map(|b| b.shape).collect()
    }

    /// Shape of one batch of model input.
    pub fn input_shape(&self, batch: usize) -> Vec<usize> {
        let [t, h, w] = self.cfg.grid;
        match &self.cfg.encoder {
            Some(e) => vec![batch, t, e.frame_h, e.frame_w, 3],
            None => vec![batch, t, h, w, self.cfg.width],
        }
    }

    /// Records all parameters on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, grad: bool) -> Vec<Var> {
        self.params.bind(tape, grad)
    }

    fn check_input(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let s = tape.shape(x);
        let want = self.input_shape(s.first().copied().unwrap_or(0));
        if s != want.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: s.to_vec(),
                rhs: want,
            });
        }
        Ok(())
    }

    /// Patch tokens of a batch of frames `[F, H, W, 3] -> [F, N, D]`,
    /// positional embedding included.
    pub fn patch_embed(&self, t: &mut Tape<T>, v: &[Var], frames: Var) -> Result<Var> {
        let (e, ids) = self.encoder_parts()?;
        let s = t.shape(frames).to_vec();
        if s.len() != 4 || s[1] != e.frame_h || s[2] != e.frame_w || s[3] != 3 {
            return Err(Error::ShapeMismatch {
                op: "patch_embed",
                lhs: s,
                rhs: vec![e.frame_h, e.frame_w, 3],
            });
        }
        let p = e.patch;
        let (gh, gw) = e.grid();
        let x = t.reshape(frames, &[s[0], gh, p, gw, p, 3])?;
        let x = t.permute(x, &[0, 1, 3, 2, 4, 5])?;
        let x = t.reshape(x, &[s[0], gh * gw, p * p * 3])?;
        let x = ids.proj.forward(t, v, x)?;
        t.add(x, v[ids.pos])
    }

    fn encoder_parts(&self) -> Result<(&EncoderConfig, &EncoderIds)> {
        match (&self.cfg.encoder, &self.layout.encoder) {
            (Some(e), Some(ids)) => Ok((e, ids)),
            _ => Err(Error::Config("model has no encoder".into())),
        }
    }

    /// One encoder block on `[F, N, D]`.
    pub fn encoder_block(&self, t: &mut Tape<T>, v: &[Var], i: usize, z: Var) -> Result<Var> {
        let (_, ids) = self.encoder_parts()?;
        let blk = ids.blocks.get(i).ok_or_else(|| {
            Error::InvalidArgument(format!("encoder block {i} of {}", ids.blocks.len()))
        })?;
        if t.shape(z).last() != Some(&self.cfg.width) {
            return Err(Error::ShapeMismatch {
                op: "encoder_block",
                lhs: t.shape(z).to_vec(),
                rhs: vec![self.cfg.width],
            });
        }
        blk.forward(t, v, z, self.cfg.ln_eps)
    }

    /// Encodes every frame independently: `[B, T, H, W, 3] -> [B, T, H', W', D]`.
    pub fn encode(&self, t: &mut Tape<T>, v: &[Var], video: Var) -> Result<Var> {
        let (e, ids) = self.encoder_parts()?;
        let s = t.shape(video).to_vec();
        if s.len() != 5 {
            return Err(Error::InvalidShape(format!(
                "video must be [B, T, H, W, 3], got {s:?}"
            )));
        }
        let (b, frames) = (s[0], s[1]);
        let flat = t.reshape(video, &[b * frames, s[2], s[3], s[4]])?;
        let mut z = self.patch_embed(t, v, flat)?;
        for blk in &ids.blocks {
            z = blk.forward(t, v, z, self.cfg.ln_eps)?;
        }
        let (gh, gw) = e.grid();
        t.reshape(z, &[b, frames, gh, gw, self.cfg.width])
    }

    /// Channel mixer of block `i` on a flattened `[B, L, D]` sequence.
    pub fn mixer(&self, t: &mut Tape<T>, v: &[Var], i: usize, x: Var) -> Result<Var> {
        match self.layout.blocks[i].mixer {
            Mixer::S4(s4) => s4.forward(t, v, x),
            Mixer::Attention(mha) => mha.forward(t, v, x),
        }
    }

    /// Decoder block `i` on `[B, T, H, W, D]`.
    pub fn block(
        &self,
        t: &mut Tape<T>,
        v: &[Var],
        i: usize,
        x: Var,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<BlockOutput> {
        let blk = self.layout.blocks.get(i).ok_or_else(|| {
            Error::InvalidArgument(format!("decoder block {i} of {}", self.layout.blocks.len()))
        })?;
        let sh = blk.shape;
        let s = t.shape(x).to_vec();
        if s.len() != 5 || s[1..4] != sh.grid_in || s[4] != sh.width_in {
            let mut want = vec![s.first().copied().unwrap_or(1)];
            want.extend_from_slice(&sh.grid_in);
            want.push(sh.width_in);
            return Err(Error::ShapeMismatch {
                op: "decoder block",
                lhs: s,
                rhs: want,
            });
        }
        let b = s[0];
        let normed = blk.norm.forward(t, v, x, self.cfg.ln_eps)?;
        let flat = t.reshape(normed, &[b, sh.tokens_in(), sh.width_in])?;
        let mixed = self.mixer(t, v, i, flat)?;
        let grid = t.reshape(mixed, &s)?;
        let pool = |t: &mut Tape<T>, z: Var| -> Result<Var> {
            if sh.kernel == [1; 3] && sh.stride == [1; 3] {
                Ok(z)
            } else {
                t.max_pool3d(z, sh.kernel, sh.stride)
            }
        };
        let pooled = pool(t, grid)?;
        let h = blk.mlp.forward(t, v, pooled)?;
        let mut mlp = t.gelu(h)?;
        if let Some(rng) = dropout {
            let p = self.cfg.dropout;
            if p > 0.0 {
                let keep = 1.0 / (1.0 - p);
                let mask = Tensor::from_fn(t.shape(mlp).to_vec(), |_| {
                    T::of(if rng.random::<f64>() < p { 0.0 } else { keep })
                });
                let mask = t.constant(mask);
                mlp = t.mul(mlp, mask)?;
            }
        }
        let skip_in = pool(t, x)?;
        let skip = blk.skip.forward(t, v, skip_in)?;
        let out = t.add(mlp, skip)?;
        Ok(BlockOutput { mlp, skip, out })
    }

    /// Global average pool over all tokens, then the linear head.
    /// Returns `[B, K]` logits, or `[B]` predictions for regression.
    pub fn classify(&self, t: &mut Tape<T>, v: &[Var], x: Var) -> Result<Var> {
        let s = t.shape(x).to_vec();
        let dfinal = self.params.get(self.layout.head.w).shape()[0];
        if s.len() != 5 || s[4] != dfinal {
            return Err(Error::ShapeMismatch {
                op: "classify",
                lhs: s,
                rhs: vec![dfinal],
            });
        }
        let pooled = t.mean(x, &[1, 2, 3])?;
        let y = self.layout.head.forward(t, v, pooled)?;
        if self.cfg.classes == 0 {
            t.reshape(y, &[s[0]])
        } else {
            Ok(y)
        }
    }

    /// Full forward pass. `dropout` enables dropout with the given stream.
    pub fn forward(
        &self,
        t: &mut Tape<T>,
        v: &[Var],
        input: Var,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.check_input(t, input)?;
        let mut x = if self.cfg.encoder.is_some() {
            self.encode(t, v, input)?
        } else {
            input
        };
        for i in 0..self.layout.blocks.len() {
            x = self.block(t, v, i, x, dropout.as_deref_mut())?.out;
        }
        self.classify(t, v, x)
    }

    /// Writes `config.txt` and one STF1 file per parameter into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join("config.txt");
        fs::write(&cfg_path, self.cfg.to_kv()).map_err(|e| Error::io(&cfg_path, e))?;
        self.params.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("config.txt");
        let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let mut cfg = ModelConfig {
            encoder: None,
            ..Default::default()
        };
        cfg.apply(&parse_kv(&text)?)?;
        let mut m = Model::new(cfg, 0)?;
        m.params.load(dir)?;
        Ok(m)
    }
}

impl Model<f64> {
    /// Finite-difference audit of every parameter gradient for the loss of
    /// one random input (drawn from `seed`) and class `seed % classes`.
    pub fn grad_audit(&self, seed: u64, h: f64) -> Result<GradCheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(self.input_shape(1), 1.0, &mut rng);
        let classes = self.cfg.classes;
        grad_check(
            |t, v| {
                let input = t.constant(x.clone());
                let y = self.forward(t, v, input, None)?;
                if classes == 0 {
                    t.mean_all(y)
                } else {
                    t.cross_entropy(y, &[seed as usize % classes])
                }
            },
            self.params.tensors(),
            h,
        )
    }
}
