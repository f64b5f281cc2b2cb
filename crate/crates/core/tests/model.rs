use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vis4mer::autodiff::grad_check;
use vis4mer::model::{DecoderKind, EncoderConfig, Model, ModelConfig, SsmMode};
use vis4mer::{Tape, Tensor, Var};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn token_model(decoder: DecoderKind) -> Model<f64> {
    let cfg = ModelConfig {
        width: 8,
        state_size: 4,
        blocks: 2,
        decoder,
        attn_heads: 2,
        grid: [4, 4, 4],
        classes: 3,
        ..Default::default()
    };
    Model::new(cfg, 5).unwrap()
}

#[test]
fn toy_model_passes_gradcheck() {
    let model = Model::<f64>::new(ModelConfig::toy(8), 0).unwrap();
    let x = Tensor::randn(model.input_shape(1), 1.0, &mut rng(100));
    let report = grad_check(
        |t, v| {
            let input = t.constant(x.clone());
            let logits = model.forward(t, v, input, None)?;
            t.cross_entropy(logits, &[1])
        },
        model.params.tensors(),
        1e-5,
    )
    .unwrap();
    assert_eq!(report.checked, model.params.numel());
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn patch_counts() {
    let cfg = ModelConfig {
        width: 4,
        blocks: 0,
        grid: [1, 14, 14],
        encoder: Some(EncoderConfig {
            frame_h: 224,
            frame_w: 224,
            depth: 0,
            heads: 1,
            ..Default::default()
        }),
        ..Default::default()
    };
    let m = Model::<f64>::new(cfg, 0).unwrap();
    let mut t = Tape::new();
    let v = m.bind(&mut t, false);
    let f = t.constant(Tensor::zeros(vec![1, 224, 224, 3]));
    let z = m.patch_embed(&mut t, &v, f).unwrap();
    assert_eq!(t.shape(z), &[1, 196, 4]);

    let toy = Model::<f64>::new(ModelConfig::toy(1), 0).unwrap();
    let v = toy.bind(&mut t, false);
    let f = t.constant(Tensor::zeros(vec![1, 32, 32, 3]));
    let z = toy.patch_embed(&mut t, &v, f).unwrap();
    assert_eq!(t.shape(z), &[1, 4, 16]);
    let bad = t.constant(Tensor::zeros(vec![1, 30, 32, 3]));
    assert!(toy.patch_embed(&mut t, &v, bad).is_err());
}

#[test]
fn indivisible_frames_are_rejected() {
    let mut cfg = ModelConfig::toy(2);
    cfg.encoder.as_mut().unwrap().frame_h = 40;
    assert!(Model::<f64>::new(cfg, 0).is_err());
}

#[test]
fn zero_frame_and_projection_gives_positional_embedding() {
    let mut m = Model::<f64>::new(ModelConfig::toy(1), 3).unwrap();
    let w = m.params.index_of("enc.patch.w").unwrap();
    let n = m.params.get(w).numel();
    *m.params.get_mut(w) = Tensor::zeros(vec![n / 16, 16]);
    let mut t = Tape::new();
    let v = m.bind(&mut t, false);
    let f = t.constant(Tensor::zeros(vec![1, 32, 32, 3]));
    let z = m.patch_embed(&mut t, &v, f).unwrap();
    let pos = m.params.get(m.params.index_of("enc.pos").unwrap());
    assert_eq!(t.value(z).data(), pos.data());
}

#[test]
fn encoder_block_with_zero_outputs_is_identity() {
    let mut m = Model::<f64>::new(ModelConfig::toy(1), 3).unwrap();
    for name in ["enc.block0.attn.o.w", "enc.block0.fc2.w"] {
        let i = m.params.index_of(name).unwrap();
        let s = m.params.get(i).shape().to_vec();
        *m.params.get_mut(i) = Tensor::zeros(s);
    }
    let mut t = Tape::new();
    let v = m.bind(&mut t, false);
    let z = t.constant(Tensor::randn(vec![2, 4, 16], 1.0, &mut rng(1)));
    let y = m.encoder_block(&mut t, &v, 0, z).unwrap();
    assert_eq!(t.value(y).data(), t.value(z).data());
    let wrong = t.constant(Tensor::zeros(vec![2, 4, 8]));
    assert!(m.encoder_block(&mut t, &v, 0, wrong).is_err());
}

#[test]
fn encoder_block_is_permutation_equivariant() {
    // Permute 8 tokens together with their positional embeddings.
    let cfg = ModelConfig {
        grid: [1, 2, 4],
        encoder: Some(EncoderConfig {
            frame_h: 32,
            frame_w: 64,
            ..Default::default()
        }),
        ..ModelConfig::toy(1)
    };
    let m = Model::<f64>::new(cfg, 4).unwrap();
    let perm = [3, 7, 0, 5, 1, 6, 2, 4];
    let tokens = Tensor::<f64>::randn(vec![8, 16], 1.0, &mut rng(2));
    let pos = m.params.get(m.params.index_of("enc.pos").unwrap()).clone();
    let permute_rows = |x: &Tensor<f64>| {
        let mut d = Vec::new();
        for &p in &perm {
            d.extend_from_slice(&x.data()[p * 16..(p + 1) * 16]);
        }
        Tensor::new(vec![8, 16], d).unwrap()
    };
    let run = |tok: &Tensor<f64>, pos: &Tensor<f64>| {
        let mut t = Tape::new();
        let v = m.bind(&mut t, false);
        let a = t.constant(tok.clone());
        let p = t.constant(pos.clone());
        let z = t.add(a, p).unwrap();
        let z = t.reshape(z, &[1, 8, 16]).unwrap();
        let y = m.encoder_block(&mut t, &v, 0, z).unwrap();
        t.value(y).clone().reshape(vec![8, 16]).unwrap()
    };
    let base = run(&tokens, &pos);
    let permuted = run(&permute_rows(&tokens), &permute_rows(&pos));
    assert!(permuted.max_abs_diff(&permute_rows(&base)) < 1e-12);
}

#[test]
fn frames_are_encoded_independently() {
    let m = Model::<f64>::new(ModelConfig::toy(3), 6).unwrap();
    let mut video = Tensor::<f64>::randn(vec![1, 3, 32, 32, 3], 1.0, &mut rng(7));
    let frame = 32 * 32 * 3;
    // Frames 0 and 2 identical.
    let f0 = video.data()[..frame].to_vec();
    video.data_mut()[2 * frame..].copy_from_slice(&f0);
    let encode = |x: &Tensor<f64>| {
        let mut t = Tape::new();
        let v = m.bind(&mut t, false);
        let xv = t.constant(x.clone());
        let y = m.encode(&mut t, &v, xv).unwrap();
        assert_eq!(t.shape(y), &[1, 3, 2, 2, 16]);
        t.value(y).clone()
    };
    let y = encode(&video);
    let slice = 4 * 16;
    assert_eq!(y.data()[..slice], y.data()[2 * slice..]);

    // Swapping frames 0 and 1 swaps their token slices.
    let mut swapped = video.clone();
    let f1 = video.data()[frame..2 * frame].to_vec();
    swapped.data_mut()[..frame].copy_from_slice(&f1);
    swapped.data_mut()[frame..2 * frame].copy_from_slice(&f0);
    let ys = encode(&swapped);
    assert_eq!(ys.data()[..slice], y.data()[slice..2 * slice]);
    assert_eq!(ys.data()[slice..2 * slice], y.data()[..slice]);
}

#[test]
fn cross_frame_gradients_vanish() {
    let m = Model::<f64>::new(ModelConfig::toy(3), 8).unwrap();
    let mut t = Tape::new();
    let v = m.bind(&mut t, false);
    let x = t.leaf(Tensor::randn(vec![1, 3, 32, 32, 3], 1.0, &mut rng(9)), true);
    let y = m.encode(&mut t, &v, x).unwrap();
    // Loss depends on frame 1 tokens only.
    let f1 = t.narrow(y, 1, 1, 1).unwrap();
    let sq = t.mul(f1, f1).unwrap();
    let l = t.sum(sq).unwrap();
    t.backward(l).unwrap();
    let g = t.grad(x).unwrap();
    let frame = 32 * 32 * 3;
    assert!(g.data()[..frame].iter().all(|&v| v == 0.0));
    assert!(g.data()[2 * frame..].iter().all(|&v| v == 0.0));
    assert!(g.data()[frame..2 * frame].iter().any(|&v| v != 0.0));
}

#[test]
fn s4_feedthrough_identity() {
    let cfg = ModelConfig {
        width: 1,
        state_size: 3,
        blocks: 1,
        grid: [6, 1, 1],
        s4_activation: false,
        s4_mixing: false,
        channel_scaling: false,
        ..Default::default()
    };
    let mut m = Model::<f64>::new(cfg, 0).unwrap();
    let c = m.params.index_of("dec0.s4.c").unwrap();
    *m.params.get_mut(c) = Tensor::zeros(vec![1, 3]);
    let mut t = Tape::new();
    let v = m.bind(&mut t, false);
    let x = t.constant(Tensor::randn(vec![2, 6, 1], 1.0, &mut rng(1)));
    let y = m.mixer(&mut t, &v, 0, x).unwrap();
    assert_eq!(t.value(y).data(), t.value(x).data());
}

#[test]
fn s4_conv_and_recurrent_modes_agree() {
    let mut cfg = ModelConfig {
        width: 6,
        state_size: 8,
        blocks: 1,
        grid: [50, 2, 2],
        ..Default::default()
    };
    let conv = Model::<f64>::new(cfg.clone(), 2).unwrap();
    cfg.ssm_mode = SsmMode::Recurrent;
    let rec = Model::<f64>::new(cfg, 2).unwrap();
    let x = Tensor::randn(vec![2, 200, 6], 1.0, &mut rng(3));
    let run = |m: &Model<f64>| {
        let mut t = Tape::new();
        let v = m.bind(&mut t, false);
        let xv = t.constant(x.clone());
        let y = m.mixer(&mut t, &v, 0, xv).unwrap();
        t.value(y).clone()
    };
    let (a, b) = (run(&conv), run(&rec));
    let rel = a.max_abs_diff(&b) / b.norm();
    assert!(rel < 1e-8, "{rel}");
    let mut diff = a.clone();
    for (d, &bv) in diff.data_mut().iter_mut().zip(b.data()) {
        *d -= bv;
    }
    assert!(diff.norm() / b.norm() < 1e-8);
}

#[test]
fn s4_is_causal_before_mixing() {
    let cfg = ModelConfig {
        width: 3,
        state_size: 4,
        blocks: 1,
        grid: [20, 1, 1],
        s4_mixing: false,
        ..Default::default()
    };
    let m = Model::<f64>::new(cfg, 1).unwrap();
    let x = Tensor::<f64>::randn(vec![1, 20, 3], 1.0, &mut rng(4));
    let mut x2 = x.clone();
    let l = 11;
    x2.data_mut()[l * 3 + 1] += 5.0;
    let run = |x: &Tensor<f64>| {
        let mut t = Tape::new();
        let v = m.bind(&mut t, false);
        let xv = t.constant(x.clone());
        let y = m.mixer(&mut t, &v, 0, xv).unwrap();
        t.value(y).clone()
    };
    let (a, b) = (run(&x), run(&x2));
    assert_eq!(a.data()[..l * 3], b.data()[..l * 3]);
    assert_ne!(a.data()[l * 3 + 1], b.data()[l * 3 + 1]);
}

#[test]
fn decoder_block_shapes_and_decomposition() {
    for kind in [DecoderKind::S4, DecoderKind::Attention] {
        let m = token_model(kind);
        let mut t = Tape::new();
        let v = m.bind(&mut t, false);
        let x = t.constant(Tensor::randn(vec![2, 4, 4, 4, 8], 1.0, &mut rng(2)));
        let o = m.block(&mut t, &v, 0, x, None).unwrap();
        assert_eq!(t.shape(o.out), &[2, 4, 2, 2, 4]);
        let sum: Vec<f64> = t
            .value(o.mlp)
            .data()
            .iter()
            .zip(t.value(o.skip).data())
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(sum, t.value(o.out).data());
        let o2 = m.block(&mut t, &v, 1, o.out, None).unwrap();
        assert_eq!(t.shape(o2.out), &[2, 4, 1, 1, 2]);
        assert!(m.block(&mut t, &v, 1, x, None).is_err());
    }
}

#[test]
fn zero_mlp_path_leaves_skip() {
    let mut m = token_model(DecoderKind::S4);
    for name in ["dec0.mlp.w", "dec0.mlp.b"] {
        let i = m.params.index_of(name).unwrap();
        let s = m.params.get(i).shape().to_vec();
        *m.params.get_mut(i) = Tensor::zeros(s);
    }
    let mut t = Tape::new();
    let v = m.bind(&mut t, false);
    let x = t.constant(Tensor::randn(vec![1, 4, 4, 4, 8], 1.0, &mut rng(8)));
    let o = m.block(&mut t, &v, 0, x, None).unwrap();
    assert_eq!(t.value(o.out).data(), t.value(o.skip).data());
}

#[test]
fn block_schedule_at_full_width() {
    // Real blocks at small width on the full 60x14x14 grid.
    let cfg = ModelConfig {
        width: 8,
        state_size: 2,
        blocks: 3,
        grid: [60, 14, 14],
        ..Default::default()
    };
    let m = Model::<f32>::new(cfg, 0).unwrap();
    let mut t = Tape::new();
    let v = m.bind(&mut t, false);
    let mut x = t.constant(Tensor::randn(vec![1, 60, 14, 14, 8], 1.0, &mut rng(0)));
    let mut shapes = Vec::new();
    for i in 0..3 {
        x = m.block(&mut t, &v, i, x, None).unwrap().out;
        shapes.push(t.shape(x).to_vec());
    }
    assert_eq!(
        shapes,
        [
            vec![1, 60, 7, 7, 4],
            vec![1, 60, 3, 3, 2],
            vec![1, 60, 1, 1, 1]
        ]
    );
}

#[test]
fn attention_on_single_token_is_value_path() {
    let cfg = ModelConfig {
        width: 4,
        blocks: 1,
        decoder: DecoderKind::Attention,
        grid: [1, 1, 1],
        ..Default::default()
    };
    let m = Model::<f64>::new(cfg, 3).unwrap();
    let mut t = Tape::new();
    let v = m.bind(&mut t, false);
    let x = t.constant(Tensor::randn(vec![1, 1, 4], 1.0, &mut rng(1)));
    let y = m.mixer(&mut t, &v, 0, x).unwrap();
    let p = |n: &str| v[m.params.index_of(n).unwrap()];
    let h = t.matmul(x, p("dec0.attn.v.w")).unwrap();
    let h = t.add(h, p("dec0.attn.v.b")).unwrap();
    let h = t.matmul(h, p("dec0.attn.o.w")).unwrap();
    let h = t.add(h, p("dec0.attn.o.b")).unwrap();
    assert!(t.value(y).max_abs_diff(t.value(h)) < 1e-14);
}

#[test]
fn gap_head() {
    let mut m = token_model(DecoderKind::S4);
    let mut t = Tape::new();
    let v = m.bind(&mut t, false);
    let x = Tensor::<f64>::randn(vec![2, 4, 1, 1, 2], 1.0, &mut rng(5));
    let xv = t.constant(x.clone());
    let logits = m.classify(&mut t, &v, xv).unwrap();
    // explicit-sum oracle
    let w = m.params.get(m.params.index_of("head.w").unwrap()).clone();
    let b = m.params.get(m.params.index_of("head.b").unwrap()).clone();
    for bi in 0..2 {
        let mut mean = [0.0; 2];
        for tok in 0..4 {
            for c in 0..2 {
                mean[c] += x.data()[(bi * 4 + tok) * 2 + c];
            }
        }
        for c in &mut mean {
            *c /= 4.0;
        }
        for k in 0..3 {
            let want = b.data()[k] + mean[0] * w.data()[k] + mean[1] * w.data()[3 + k];
            let got = t.value(logits).data()[bi * 3 + k];
            assert!((got - want).abs() < 1e-14);
        }
    }
    // zero weights give the bias
    let wi = m.params.index_of("head.w").unwrap();
    *m.params.get_mut(wi) = Tensor::zeros(vec![2, 3]);
    let bi = m.params.index_of("head.b").unwrap();
    *m.params.get_mut(bi) = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
    let mut t = Tape::new();
    let v = m.bind(&mut t, false);
    let xv = t.constant(x);
    let logits = m.classify(&mut t, &v, xv).unwrap();
    assert_eq!(t.value(logits).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    let wrong = t.constant(Tensor::zeros(vec![1, 4, 1, 1, 3]));
    assert!(m.classify(&mut t, &v, wrong).is_err());
}

#[test]
fn constant_tokens_give_head_of_constant() {
    let m = token_model(DecoderKind::S4);
    let mut t = Tape::new();
    let v = m.bind(&mut t, false);
    let x = t.constant(Tensor::full(vec![1, 4, 1, 1, 2], 0.75));
    let logits = m.classify(&mut t, &v, x).unwrap();
    let c = t.constant(Tensor::full(vec![1, 2], 0.75));
    let p = |n: &str| v[m.params.index_of(n).unwrap()];
    let h = t.matmul(c, p("head.w")).unwrap();
    let h = t.add(h, p("head.b")).unwrap();
    assert_eq!(t.value(logits).data(), t.value(h).data());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = Model::<f32>::new(ModelConfig::toy(2), 9).unwrap();
    m.save(dir.path()).unwrap();
    let back = Model::<f32>::load(dir.path()).unwrap();
    assert_eq!(back.cfg, m.cfg);
    assert_eq!(back.params, m.params);
}

#[test]
fn both_decoders_accept_the_same_shapes() {
    for grid in [[4, 4, 4], [3, 5, 2], [1, 1, 1], [8, 2, 2]] {
        let mk = |d| {
            let cfg = ModelConfig {
                width: 8,
                state_size: 2,
                decoder: d,
                grid,
                classes: 2,
                ..Default::default()
            };
            Model::<f64>::new(cfg, 0).unwrap()
        };
        let (s, a) = (mk(DecoderKind::S4), mk(DecoderKind::Attention));
        assert_eq!(s.schedule(), a.schedule());
        let x = Tensor::randn(s.input_shape(1), 1.0, &mut rng(0));
        let out = |m: &Model<f64>| {
            let mut t = Tape::new();
            let v = m.bind(&mut t, false);
            let xv = t.constant(x.clone());
            let y = m.forward(&mut t, &v, xv, None).unwrap();
            t.shape(y).to_vec()
        };
        assert_eq!(out(&s), out(&a));
    }
}

#[test]
fn frozen_encoder_gets_no_gradient() {
    let mut cfg = ModelConfig::toy(2);
    cfg.encoder.as_mut().unwrap().frozen = true;
    let m = Model::<f64>::new(cfg, 1).unwrap();
    let mut t = Tape::new();
    let v: Vec<Var> = m.bind(&mut t, true);
    let x = t.constant(Tensor::randn(m.input_shape(1), 1.0, &mut rng(0)));
    let logits = m.forward(&mut t, &v, x, None).unwrap();
    let l = t.cross_entropy(logits, &[0]).unwrap();
    t.backward(l).unwrap();
    for (i, n) in m.params.names().iter().enumerate() {
        assert_eq!(t.grad(v[i]).is_some(), !n.starts_with("enc."), "{n}");
    }
}
