use std::fs;

use vis4mer::data::{linear_regression, Dataset, Split, SyntheticTask, VecDataset};
use vis4mer::model::{Model, ModelConfig};
use vis4mer::train::{cross_entropy, evaluate, mse, train, TrainConfig};
use vis4mer::{Tape, Tensor};

fn tiny(classes: usize) -> ModelConfig {
    ModelConfig {
        width: 4,
        state_size: 2,
        blocks: 1,
        grid: [4, 2, 2],
        classes,
        encoder: None,
        ..Default::default()
    }
}

fn tiny_task() -> SyntheticTask {
    SyntheticTask::delayed_class([4, 2, 2], 4, 4, 1)
}

#[test]
fn uniform_logits_give_ln_k() {
    for k in [2usize, 4, 10, 400] {
        let mut t = Tape::<f64>::new();
        let logits = t.leaf(Tensor::full(vec![3, k], 0.7), false);
        let l = cross_entropy(&mut t, logits, &[0, k - 1, k / 2]).unwrap();
        let v = t.value(l).item();
        assert!((v - (k as f64).ln()).abs() < 1e-10, "{k}: {v}");
    }
}

#[test]
fn cross_entropy_is_shift_invariant_and_its_gradient_rows_sum_to_zero() {
    let logits = Tensor::new(vec![2, 3], vec![0.2, -1.0, 3.0, 0.5, 0.5, -2.0]).unwrap();
    let eval = |shift: f64| {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(logits.map(|v| v + shift), true);
        let l = cross_entropy(&mut t, x, &[2, 0]).unwrap();
        t.backward(l).unwrap();
        (t.value(l).item(), t.grad(x).unwrap().clone())
    };
    let (a, ga) = eval(0.0);
    let (b, gb) = eval(17.5);
    assert!((a - b).abs() < 1e-12);
    assert!(ga.max_abs_diff(&gb) < 1e-12);
    for row in ga.data().chunks(3) {
        assert!(row.iter().sum::<f64>().abs() < 1e-15);
    }
    assert!(a >= 0.0);
}

#[test]
fn mse_cases() {
    let mut t = Tape::<f64>::new();
    let a = t.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
    let b = t.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), false);
    let c = t.leaf(Tensor::new(vec![3], vec![0.0, 0.0, 0.5]).unwrap(), false);
    let zero = mse(&mut t, a, b).unwrap();
    assert_eq!(t.value(zero).item(), 0.0);
    let l = mse(&mut t, a, c).unwrap();
    assert!((t.value(l).item() - 5.0 / 3.0).abs() < 1e-15);
    let d = t.leaf(Tensor::zeros(vec![2]), false);
    assert!(mse(&mut t, a, d).is_err());
}

#[test]
fn zero_learning_rate_is_a_bitwise_no_op() {
    let mut m: Model<f32> = Model::new(tiny(4), 3).unwrap();
    let before = m.params.clone();
    let data = tiny_task().split(Split::Train, 1);
    let cfg = TrainConfig {
        lr: 0.0,
        batch_size: 1,
        max_steps: 5,
        eval_every: 0,
        ..Default::default()
    };
    let r = train(&mut m, &data, None, &cfg).unwrap();
    assert_eq!(m.params.tensors(), before.tensors());
    let l = r.losses();
    assert!(l.iter().all(|&v| v.to_bits() == l[0].to_bits()));
}

#[test]
fn fixed_seed_training_is_bitwise_reproducible() {
    let data = tiny_task().split(Split::Train, 64);
    let run = |seed| {
        let mut m: Model<f32> = Model::new(tiny(4), 0).unwrap();
        let cfg = TrainConfig {
            lr: 1e-2,
            batch_size: 4,
            max_steps: 20,
            eval_every: 0,
            seed,
            ..Default::default()
        };
        let r = train(&mut m, &data, None, &cfg).unwrap();
        let bits: Vec<u64> = r.losses().iter().map(|v| v.to_bits()).collect();
        (bits, m.params.tensors().to_vec())
    };
    let a = run(9);
    assert_eq!(a, run(9));
    assert_ne!(a.0, run(10).0);
}

#[test]
fn dropout_runs_are_reproducible() {
    let data = tiny_task().split(Split::Train, 16);
    let run = || {
        let mut m: Model<f32> = Model::new(
            ModelConfig {
                dropout: 0.3,
                ..tiny(4)
            },
            0,
        )
        .unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            max_steps: 5,
            eval_every: 0,
            ..Default::default()
        };
        train(&mut m, &data, None, &cfg).unwrap().losses()
    };
    assert_eq!(run(), run());
}

#[test]
fn linear_regression_converges() {
    let grid = [2, 2, 2];
    let cfg = ModelConfig {
        grid,
        classes: 0,
        ..tiny(0)
    };
    let train_set: VecDataset<f64> = linear_regression(grid, 4, 1.5, 256, 1);
    let val_set: VecDataset<f64> = linear_regression(grid, 4, 1.5, 64, 2);
    let mut m: Model<f64> = Model::new(cfg, 0).unwrap();
    let tc = TrainConfig {
        lr: 1e-3,
        weight_decay: 0.0,
        batch_size: 16,
        max_steps: 2000,
        eval_every: 100,
        ..Default::default()
    };
    let r = train(&mut m, &train_set, Some(&val_set), &tc).unwrap();
    let ev = evaluate(&m, &val_set, 64).unwrap();
    assert!(ev.accuracy.is_none());
    let best = r.best.unwrap().1.loss;
    assert!(best < 1e-4, "best val mse {best}, final {}", ev.loss);
}

#[test]
fn frozen_parameters_do_not_move() {
    let mut m: Model<f32> = Model::new(tiny(4), 0).unwrap();
    m.params.set_frozen_prefix("dec0.s4", true);
    let before = m.params.clone();
    let data = tiny_task().split(Split::Train, 8);
    let cfg = TrainConfig {
        batch_size: 4,
        max_steps: 3,
        eval_every: 0,
        ..Default::default()
    };
    train(&mut m, &data, None, &cfg).unwrap();
    for (i, name) in m.params.names().iter().enumerate() {
        let same = m.params.tensors()[i] == before.tensors()[i];
        assert_eq!(same, name.starts_with("dec0.s4"), "{name}");
    }
}

#[test]
fn metrics_summary_and_checkpoint_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let task = tiny_task();
    let (tr, va) = (task.split(Split::Train, 32), task.split(Split::Val, 8));
    let mut m: Model<f32> = Model::new(tiny(4), 0).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        max_steps: 6,
        eval_every: 3,
        metrics_path: Some(dir.path().join("run/metrics.jsonl")),
        summary_path: Some(dir.path().join("summary.csv")),
        checkpoint_dir: Some(dir.path().join("best")),
        ..Default::default()
    };
    let r = train(&mut m, &tr, Some(&va), &cfg).unwrap();
    let text = fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 6);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["step"], i + 1);
        for key in ["loss", "lr", "wall_ms"] {
            assert!(l[key].is_number(), "{key}");
        }
    }
    assert!(lines[2]["val_accuracy"].is_number());
    assert!(lines[1].get("val_accuracy").is_none());

    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(summary.starts_with("steps,final_loss,best_step"));
    assert_eq!(summary.lines().count(), 2);

    let best: Model<f32> = Model::load(&dir.path().join("best")).unwrap();
    let step = r.best.unwrap().0;
    assert!(step == 3 || step == 6);
    if step == 6 {
        assert_eq!(best.params.tensors(), m.params.tensors());
    }
}

#[test]
fn target_accuracy_stops_early() {
    let task = tiny_task();
    let (tr, va) = (task.split(Split::Train, 8), task.split(Split::Val, 8));
    let mut m: Model<f32> = Model::new(tiny(4), 0).unwrap();
    let cfg = TrainConfig {
        batch_size: 2,
        max_steps: 50,
        eval_every: 5,
        target_accuracy: Some(0.0),
        ..Default::default()
    };
    let r = train(&mut m, &tr, Some(&va), &cfg).unwrap();
    assert_eq!(r.reached_target, Some(5));
    assert_eq!(r.history.len(), 5);
}

#[test]
fn invalid_configs_are_rejected() {
    let data = tiny_task().split(Split::Train, 4);
    let mut m: Model<f32> = Model::new(tiny(4), 0).unwrap();
    for cfg in [
        TrainConfig {
            batch_size: 0,
            ..Default::default()
        },
        TrainConfig {
            lr: -1.0,
            ..Default::default()
        },
        TrainConfig {
            lr: f64::NAN,
            ..Default::default()
        },
    ] {
        assert!(train(&mut m, &data, None, &cfg).is_err());
    }
    let empty = tiny_task().split(Split::Train, 0);
    assert!(train(&mut m, &empty, None, &TrainConfig::default()).is_err());
    let regression: VecDataset<f32> = linear_regression([4, 2, 2], 4, 1.0, 4, 0);
    assert!(Dataset::<f32>::len(&regression) == 4);
    assert!(train(
        &mut m,
        &regression,
        None,
        &TrainConfig {
            max_steps: 1,
            ..Default::default()
        }
    )
    .is_err());
}
