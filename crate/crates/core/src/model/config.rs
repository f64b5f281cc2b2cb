use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parses `key = value` lines. Blank lines and `#` comments are ignored.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub(crate) fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

pub(crate) fn parse_triple(key: &str, value: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = value.split(['x', ',']).map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "{key}: expected AxBxC, got `{value}`"
        )));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = parse_value(key, p)?;
    }
    Ok(out)
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected a boolean, got `{value}`"
        ))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    S4,
    Attention,
}

impl FromStr for DecoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s4" => Ok(DecoderKind::S4),
            "attention" | "lst" => Ok(DecoderKind::Attention),
            _ => Err(Error::Config(format!(
                "unknown decoder `{s}` (s4 | attention)"
            ))),
        }
    }
}

impl std::fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecoderKind::S4 => "s4",
            DecoderKind::Attention => "attention",
        })
    }
}

/// How the S4 layer evaluates its channel SSMs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsmMode {
    Conv,
    Recurrent,
}

impl FromStr for SsmMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(SsmMode::Conv),
            "recurrent" => Ok(SsmMode::Recurrent),
            _ => Err(Error::Config(format!(
                "unknown ssm mode `{s}` (conv | recurrent)"
            ))),
        }
    }
}

impl std::fmt::Display for SsmMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SsmMode::Conv => "conv",
            SsmMode::Recurrent => "recurrent",
        })
    }
}

/// Patchifying per-frame transformer encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub frame_h: usize,
    pub frame_w: usize,
    pub patch: usize,
    pub depth: usize,
    pub heads: usize,
    /// Hidden width of the block MLP as a multiple of the model width.
    pub mlp_ratio: usize,
    pub frozen: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            frame_h: 32,
            frame_w: 32,
            patch: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 4,
            frozen: false,
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.frame_h / self.patch, self.frame_w / self.patch)
    }

    pub fn tokens_per_frame(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Token width `D` at the decoder input.
    pub width: usize,
    /// SSM state size `N`.
    pub state_size: usize,
    pub blocks: usize,
    pub decoder: DecoderKind,
    /// Heads of the attention decoder.
    pub attn_heads: usize,
    /// Token grid `T x H' x W'` at the decoder input.
    pub grid: [usize; 3],
    pub pool_kernel: [usize; 3],
    pub pool_stride: [usize; 3],
    /// When false, blocks keep their spatial resolution.
    pub pooling: bool,
    /// When false, blocks keep their channel width.
    pub channel_scaling: bool,
    pub s4_activation: bool,
    pub s4_mixing: bool,
    pub ssm_mode: SsmMode,
    pub dropout: f64,
    /// Number of classes, or 0 for scalar regression.
    pub classes: usize,
    pub ln_eps: f64,
    pub log_dt_min: f64,
    pub log_dt_max: f64,
    pub encoder: Option<EncoderConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 64,
            state_size: 16,
            blocks: 2,
            decoder: DecoderKind::S4,
            attn_heads: 1,
            grid: [64, 4, 4],
            pool_kernel: [1, 2, 2],
            pool_stride: [1, 2, 2],
            pooling: true,
            channel_scaling: true,
            s4_activation: true,
            s4_mixing: true,
            ssm_mode: SsmMode::Conv,
            dropout: 0.0,
            classes: 4,
            ln_eps: 1e-5,
            log_dt_min: 1e-3f64.ln(),
            log_dt_max: 1e-1f64.ln(),
            encoder: None,
        }
    }
}

/// Per-block input/output geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockShape {
    pub grid_in: [usize; 3],
    pub width_in: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub grid_out: [usize; 3],
    pub width_out: usize,
}

impl BlockShape {
    pub fn tokens_in(&self) -> usize {
        self.grid_in.iter().product()
    }

    pub fn tokens_out(&self) -> usize {
        self.grid_out.iter().product()
    }
}

/// Output extent of an unpadded pooling window.
pub fn pooled_extent(extent: usize, kernel: usize, stride: usize) -> usize {
    (extent - kernel) / stride + 1
}

impl ModelConfig {
    /// The decoder schedule: grid and width before and after each block.
    ///
    /// A pooling axis whose extent is already smaller than the kernel is left
    /// untouched (kernel and stride 1) instead of failing.
    pub fn schedule(&self) -> Result<Vec<BlockShape>> {
        self.validate()?;
        let mut grid = self.grid;
        let mut width = self.width;
        let mut out = Vec::with_capacity(self.blocks);
        for _ in 0..self.blocks {
            let mut kernel = [1; 3];
            let mut stride = [1; 3];
            let mut next = grid;
            if self.pooling {
                for ax in 0..3 {
                    if self.pool_kernel[ax] <= grid[ax] {
                        kernel[ax] = self.pool_kernel[ax];
                        stride[ax] = self.pool_stride[ax];
                    }
                    next[ax] = pooled_extent(grid[ax], kernel[ax], stride[ax]);
                }
            }
            let width_out = if self.channel_scaling {
                width / 2
            } else {
                width
            };
            if width_out == 0 {
                return Err(Error::Config(format!(
                    "width {} cannot be halved {} times",
                    self.width, self.blocks
                )));
            }
            out.push(BlockShape {
                grid_in: grid,
                width_in: width,
                kernel,
                stride,
                grid_out: next,
                width_out,
            });
            grid = next;
            width = width_out;
        }
        Ok(out)
    }

    pub fn tokens(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn final_width(&self) -> Result<usize> {
        Ok(self.schedule()?.last().map_or(self.width, |b| b.width_out))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.state_size == 0 {
            return bad("width and state_size must be >= 1".into());
        }
        if self.grid.contains(&0) {
            return bad(format!("grid {:?} has an empty axis", self.grid));
        }
        if self.pool_kernel.contains(&0) || self.pool_stride.contains(&0) {
            return bad("pool kernel and stride must be positive".into());
        }
        if self.classes == 1 {
            return bad("classes must be >= 2 (or 0 for regression)".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.log_dt_min <= self.log_dt_max && self.log_dt_max <= 0.0) {
            return bad("log_dt range must satisfy min <= max <= 0".into());
        }
        if self.decoder == DecoderKind::Attention {
            if self.attn_heads == 0 || self.width % self.attn_heads != 0 {
                return bad(format!(
                    "width {} not divisible by {} heads",
                    self.width, self.attn_heads
                ));
            }
        }
        if let Some(e) = &self.encoder {
            if e.patch == 0 || e.frame_h % e.patch != 0 || e.frame_w % e.patch != 0 {
                return bad(format!(
                    "frame {}x{} not divisible by patch {}",
                    e.frame_h, e.frame_w, e.patch
                ));
            }
            if e.heads == 0 || self.width % e.heads != 0 {
                return bad(format!(
                    "width {} not divisible by {} encoder heads",
                    self.width, e.heads
                ));
            }
            let (h, w) = e.grid();
            if self.grid[1] != h || self.grid[2] != w {
                return bad(format!(
                    "encoder produces a {h}x{w} grid but the decoder expects {}x{}",
                    self.grid[1], self.grid[2]
                ));
            }
        }
        Ok(())
    }

    /// Applies `key = value` overrides.
    pub fn apply(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in kv {
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "width" => self.width = parse_value(key, v)?,
            "state_size" => self.state_size = parse_value(key, v)?,
            "blocks" => self.blocks = parse_value(key, v)?,
            "decoder" => self.decoder = v.parse()?,
            "attn_heads" => self.attn_heads = parse_value(key, v)?,
            "grid" => self.grid = parse_triple(key, v)?,
            "pool_kernel" => self.pool_kernel = parse_triple(key, v)?,
            "pool_stride" => self.pool_stride = parse_triple(key, v)?,
            "pooling" => self.pooling = parse_bool(key, v)?,
            "channel_scaling" => self.channel_scaling = parse_bool(key, v)?,
            "s4_activation" => self.s4_activation = parse_bool(key, v)?,
            "s4_mixing" => self.s4_mixing = parse_bool(key, v)?,
            "ssm_mode" => self.ssm_mode = v.parse()?,
            "dropout" => self.dropout = parse_value(key, v)?,
            "classes" => self.classes = parse_value(key, v)?,
            "ln_eps" => self.ln_eps = parse_value(key, v)?,
            "log_dt_min" => self.log_dt_min = parse_value(key, v)?,
            "log_dt_max" => self.log_dt_max = parse_value(key, v)?,
            "encoder" => {
                self.encoder = if parse_bool(key, v)? {
                    Some(self.encoder.clone().unwrap_or_default())
                } else {
                    None
                }
            }
            _ => {
                let Some(sub) = key.strip_prefix("encoder.") else {
                    return Err(Error::Config(format!("unknown model key `{key}`")));
                };
                let e = self.encoder.get_or_insert_with(EncoderConfig::default);
                match sub {
                    "frame_h" => e.frame_h = parse_value(key, v)?,
                    "frame_w" => e.frame_w = parse_value(key, v)?,
                    "patch" => e.patch = parse_value(key, v)?,
                    "depth" => e.depth = parse_value(key, v)?,
                    "heads" => e.heads = parse_value(key, v)?,
                    "mlp_ratio" => e.mlp_ratio = parse_value(key, v)?,
                    "frozen" => e.frozen = parse_bool(key, v)?,
                    _ => return Err(Error::Config(format!("unknown model key `{key}`"))),
                }
            }
        }
        Ok(())
    }

    /// Serialises to `key = value` lines accepted by [`ModelConfig::apply`].
    pub fn to_kv(&self) -> String {
        let t = |a: [usize; 3]| format!("{}x{}x{}", a[0], a[1], a[2]);
        let mut s = String::new();
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "state_size = {}", self.state_size);
        let _ = writeln!(s, "blocks = {}", self.blocks);
        let _ = writeln!(s, "decoder = {}", self.decoder);
        let _ = writeln!(s, "attn_heads = {}", self.attn_heads);
        let _ = writeln!(s, "grid = {}", t(self.grid));
        let _ = writeln!(s, "pool_kernel = {}", t(self.pool_kernel));
        let _ = writeln!(s, "pool_stride = {}", t(self.pool_stride));
        let _ = writeln!(s, "pooling = {}", self.pooling);
        let _ = writeln!(s, "channel_scaling = {}", self.channel_scaling);
        let _ = writeln!(s, "s4_activation = {}", self.s4_activation);
        let _ = writeln!(s, "s4_mixing = {}", self.s4_mixing);
        let _ = writeln!(s, "ssm_mode = {}", self.ssm_mode);
        let _ = writeln!(s, "dropout = {:?}", self.dropout);
        let _ = writeln!(s, "classes = {}", self.classes);
        let _ = writeln!(s, "ln_eps = {:?}", self.ln_eps);
        let _ = writeln!(s, "log_dt_min = {:?}", self.log_dt_min);
        let _ = writeln!(s, "log_dt_max = {:?}", self.log_dt_max);
        match &self.encoder {
            None => {
                let _ = writeln!(s, "encoder = false");
            }
            Some(e) => {
                let _ = writeln!(s, "encoder = true");
                let _ = writeln!(s, "encoder.frame_h = {}", e.frame_h);
                let _ = writeln!(s, "encoder.frame_w = {}", e.frame_w);
                let _ = writeln!(s, "encoder.patch = {}", e.patch);
                let _ = writeln!(s, "encoder.depth = {}", e.depth);
                let _ = writeln!(s, "encoder.heads = {}", e.heads);
                let _ = writeln!(s, "encoder.mlp_ratio = {}", e.mlp_ratio);
                let _ = writeln!(s, "encoder.frozen = {}", e.frozen);
            }
        }
        s
    }

    /// Toy end-to-end configuration: 2-layer encoder on 32x32 frames with
    /// 16-pixel patches, two S4 decoder blocks.
    pub fn toy(frames: usize) -> Self {
        ModelConfig {
            width: 16,
            state_size: 4,
            blocks: 2,
            grid: [frames, 2, 2],
            encoder: Some(EncoderConfig::default()),
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut cfg = ModelConfig::toy(8);
        cfg.decoder = DecoderKind::Attention;
        cfg.dropout = 0.25;
        let text = cfg.to_kv();
        let mut back = ModelConfig::default();
        back.encoder = None;
        back.apply(&parse_kv(&text).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn kv_errors() {
        assert!(parse_kv("width 3").is_err());
        let mut cfg = ModelConfig::default();
        assert!(cfg.set("nope", "1").is_err());
        assert!(cfg.set("width", "x").is_err());
        assert!(cfg.set("grid", "1x2").is_err());
        assert!(parse_kv("# c\n\nwidth = 8 # trailing\n").unwrap()["width"] == "8");
    }

    #[test]
    fn full_scale_schedule() {
        let cfg = ModelConfig {
            width: 1024,
            blocks: 3,
            grid: [60, 14, 14],
            ..Default::default()
        };
        let s = cfg.schedule().unwrap();
        let grids: Vec<_> = s.iter().map(|b| b.grid_out).collect();
        let widths: Vec<_> = s.iter().map(|b| b.width_out).collect();
        assert_eq!(grids, [[60, 7, 7], [60, 3, 3], [60, 1, 1]]);
        assert_eq!(widths, [512, 256, 128]);
        assert_eq!(s[0].tokens_in(), 11_760);
    }

    #[test]
    fn small_axis_is_not_pooled() {
        let s = ModelConfig::toy(8).schedule().unwrap();
        assert_eq!(s[0].grid_out, [8, 1, 1]);
        assert_eq!(s[1].kernel, [1, 1, 1]);
        assert_eq!(s[1].grid_out, [8, 1, 1]);
        assert_eq!(s[1].width_out, 4);
    }
}
