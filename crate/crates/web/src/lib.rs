//! Browser bindings for the demo page in `www/`.
//!
//! Each export has a plain Rust twin returning `Result<_, String>` so the
//! logic is testable natively; the `wasm_bindgen` wrappers only convert
//! errors to `JsValue`.

use serde::Serialize;
use vis4mer::bench::token_layout;
use vis4mer::model::{DecoderKind, EncoderConfig, Model, ModelConfig};
use vis4mer::ssm::{discretize, ssm_kernel, SsmParams};
use vis4mer::{Tape, Tensor};
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct KernelView {
    pub radius: f64,
    pub kernel: Vec<f64>,
}

/// Impulse response of a HiPPO channel with `C = 1` and no feedthrough.
pub fn hippo_kernel_view(n: usize, dt: f64, len: usize) -> Result<KernelView, String> {
    if !(dt > 0.0) || len == 0 || len > 1 << 16 {
        return Err(format!(
            "need dt > 0 and 1 <= len <= 65536, got dt={dt} len={len}"
        ));
    }
    let p = SsmParams::hippo(n, vec![1.0; n], 0.0, dt.ln()).map_err(|e| e.to_string())?;
    let d = discretize(&p).map_err(|e| e.to_string())?;
    Ok(KernelView {
        radius: d.spectral_radius().map_err(|e| e.to_string())?,
        kernel: ssm_kernel(&d, len).map_err(|e| e.to_string())?,
    })
}

#[derive(Debug, Serialize)]
pub struct StageView {
    pub grid: [usize; 3],
    pub width: usize,
    pub tokens: usize,
}

/// Input grid followed by the output of every decoder block.
pub fn token_schedule_view(
    frames: usize,
    hw: usize,
    patch: usize,
    width: usize,
    blocks: usize,
) -> Result<Vec<StageView>, String> {
    if patch == 0 || hw < patch {
        return Err(format!("patch {patch} does not fit a {hw}px frame"));
    }
    let side = hw / patch;
    let cfg = ModelConfig {
        width,
        blocks,
        grid: [frames, side, side],
        encoder: Some(EncoderConfig {
            frame_h: hw,
            frame_w: hw,
            patch,
            ..Default::default()
        }),
        ..Default::default()
    };
    let sched = cfg.schedule().map_err(|e| e.to_string())?;
    let mut out = vec![StageView {
        grid: cfg.grid,
        width,
        tokens: cfg.tokens(),
    }];
    out.extend(sched.iter().map(|b| StageView {
        grid: b.grid_out,
        width: b.width_out,
        tokens: b.tokens_out(),
    }));
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct CostPoint {
    pub variant: String,
    pub tokens: usize,
    pub peak_bytes: usize,
    pub flops: u64,
}

/// Counted activation bytes and flops of one forward+backward step at batch 1
/// for both decoders. No timing, so it runs anywhere.
pub fn complexity_points(tokens: &[usize], width: usize) -> Result<Vec<CostPoint>, String> {
    let mut out = Vec::new();
    for kind in [DecoderKind::S4, DecoderKind::Attention] {
        for &l in tokens {
            let layout = token_layout(l).map_err(|e| e.to_string())?;
            let cfg = ModelConfig {
                width,
                decoder: kind,
                grid: layout.grid,
                ..Default::default()
            };
            let model: Model<f32> = Model::new(cfg, 0).map_err(|e| e.to_string())?;
            let mut t = Tape::with_budget(1 << 30);
            let v = model.bind(&mut t, true);
            let x = t.constant(Tensor::zeros(model.input_shape(1)));
            let mut step = || -> vis4mer::Result<()> {
                let y = model.forward(&mut t, &v, x, None)?;
                let loss = t.cross_entropy(y, &[0])?;
                t.backward(loss)
            };
            step().map_err(|e| format!("{kind} at L={l}: {e}"))?;
            let s = t.stats();
            out.push(CostPoint {
                variant: kind.to_string(),
                tokens: l,
                peak_bytes: s.peak_activation_bytes,
                flops: s.forward_flops + s.backward_flops,
            });
        }
    }
    Ok(out)
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

/// JSON `{radius, kernel}`.
#[wasm_bindgen]
pub fn hippo_kernel(n: usize, dt: f64, len: usize) -> Result<String, JsValue> {
    to_js(hippo_kernel_view(n, dt, len))
}

/// JSON array of `{grid, width, tokens}` stages.
#[wasm_bindgen]
pub fn token_schedule(
    frames: usize,
    hw: usize,
    patch: usize,
    width: usize,
    blocks: usize,
) -> Result<String, JsValue> {
    to_js(token_schedule_view(frames, hw, patch, width, blocks))
}

/// JSON array of `{variant, tokens, peak_bytes, flops}`; `tokens` is a
/// comma-separated list.
#[wasm_bindgen]
pub fn complexity_curves(tokens: &str, width: usize) -> Result<String, JsValue> {
    let parsed: Result<Vec<usize>, String> = tokens
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| format!("bad token count `{s}`"))
        })
        .collect();
    to_js(parsed.and_then(|t| complexity_points(&t, width)))
}
