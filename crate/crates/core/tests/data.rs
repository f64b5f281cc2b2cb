use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vis4mer::data::{
    gen_delayed_class, gen_long_majority, load_features, majority_label, sample_stream, Dataset,
    FeatureManifest, Split, SyntheticTask, Target, SIGNAL_MAGNITUDE,
};
use vis4mer::tensor::{read_stf1, write_stf1};
use vis4mer::{Error, Tensor};

fn task(frames: usize) -> SyntheticTask {
    SyntheticTask::delayed_class([frames, 4, 4], 8, 4, 7)
}

#[test]
fn samples_regenerate_bitwise() {
    let t = task(16);
    for i in [0u64, 1, 999] {
        let a = t.sample::<f32>(Split::Train, i).unwrap();
        let b = t.sample::<f32>(Split::Train, i).unwrap();
        assert_eq!(a, b);
    }
    let other = SyntheticTask {
        seed: 8,
        ..task(16)
    };
    assert_ne!(
        t.sample::<f32>(Split::Train, 0).unwrap().input,
        other.sample::<f32>(Split::Train, 0).unwrap().input
    );
}

#[test]
fn signal_token_is_early_and_exact() {
    let t = task(16);
    let len = t.len();
    let width = t.width;
    for i in 0..500u64 {
        let ex = t.sample::<f64>(Split::Val, i).unwrap();
        assert_eq!(ex.input.shape(), &[16, 4, 4, width]);
        let pos = t.signal_position(Split::Val, i).unwrap();
        assert!(
            len - pos >= len * 3 / 4 + 1,
            "distance {} of {len}",
            len - pos
        );
        let label = ex.target.class().unwrap();
        let tok = &ex.input.data()[pos * width..(pos + 1) * width];
        for (c, &v) in tok.iter().enumerate() {
            let want = if c == label { SIGNAL_MAGNITUDE } else { 0.0 };
            assert_eq!(v, want);
        }
    }
}

#[test]
fn oracle_reading_the_signal_token_is_perfect() {
    let t = task(16);
    let width = t.width;
    let mut correct = 0;
    for i in 0..1000u64 {
        let ex = t.sample::<f64>(Split::Test, i).unwrap();
        let pos = t.signal_position(Split::Test, i).unwrap();
        let tok = &ex.input.data()[pos * width..(pos + 1) * width];
        let guess = (0..t.classes)
            .max_by(|&a, &b| tok[a].partial_cmp(&tok[b]).unwrap())
            .unwrap();
        correct += usize::from(Some(guess) == ex.target.class());
    }
    assert_eq!(correct, 1000);
}

#[test]
fn labels_are_balanced() {
    let t = task(4);
    let n = 1000;
    let mut counts = vec![0usize; t.classes];
    let split = t.split(Split::Train, n);
    for i in 0..n {
        counts[Dataset::<f32>::get(&split, i)
            .unwrap()
            .target
            .class()
            .unwrap()] += 1;
    }
    let expect = n as f64 / t.classes as f64;
    for c in counts {
        assert!((c as f64 - expect).abs() <= 0.05 * expect, "{c}");
    }
}

#[test]
fn splits_are_disjoint() {
    let t = task(4);
    let mut streams = std::collections::HashSet::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        for i in 0..1000 {
            assert!(streams.insert(sample_stream(split, i)));
        }
    }
    let train: Vec<Vec<f64>> = (0..200)
        .map(|i| t.sample::<f64>(Split::Train, i).unwrap().input.into_data())
        .collect();
    for i in 0..200 {
        let v = t.sample::<f64>(Split::Val, i).unwrap().input.into_data();
        assert!(train.iter().all(|x| *x != v));
    }
}

#[test]
fn generator_rejects_bad_arguments() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(gen_delayed_class::<f64>(3, 8, 4, 0, &mut rng).is_err());
    assert!(gen_delayed_class::<f64>(64, 8, 4, 4, &mut rng).is_err());
    assert!(gen_delayed_class::<f64>(64, 2, 4, 0, &mut rng).is_err());
    assert!(gen_long_majority::<f64>(64, 4, 16, &mut rng).is_err());
    assert!(gen_long_majority::<f64>(64, 4, 65, &mut rng).is_err());
}

/// Softmax regression fitted by full-batch gradient descent.
fn fit_probe(x: &[Vec<f64>], y: &[usize], k: usize, iters: usize) -> Vec<Vec<f64>> {
    let d = x[0].len() + 1;
    let mut w = vec![vec![0.0; d]; k];
    let lr = 0.5;
    for _ in 0..iters {
        let mut g = vec![vec![0.0; d]; k];
        for (xi, &yi) in x.iter().zip(y) {
            let p = probs(&w, xi);
            for c in 0..k {
                let e = p[c] - f64::from(u8::from(c == yi));
                for j in 0..d - 1 {
                    g[c][j] += e * xi[j];
                }
                g[c][d - 1] += e;
            }
        }
        for c in 0..k {
            for j in 0..d {
                w[c][j] -= lr * g[c][j] / x.len() as f64;
            }
        }
    }
    w
}

fn probs(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let z: Vec<f64> = w
        .iter()
        .map(|wc| wc[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + wc[d])
        .collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Per-channel mean and mean square over the last quarter of the sequence.
fn last_quarter_features(input: &Tensor<f64>, width: usize) -> Vec<f64> {
    let len = input.numel() / width;
    let mut f = vec![0.0; 2 * width];
    for t in len - len / 4..len {
        for c in 0..width {
            let v = input.data()[t * width + c];
            f[c] += v;
            f[width + c] += v * v;
        }
    }
    f.iter_mut().for_each(|v| *v /= (len / 4) as f64);
    f
}

#[test]
fn last_quarter_probe_is_at_chance() {
    let t = SyntheticTask::delayed_class([16, 4, 4], 8, 4, 3);
    let feats = |split, n: u64| -> (Vec<Vec<f64>>, Vec<usize>) {
        (0..n)
            .map(|i| {
                let ex = t.sample::<f64>(split, i).unwrap();
                (
                    last_quarter_features(&ex.input, t.width),
                    ex.target.class().unwrap(),
                )
            })
            .unzip()
    };
    let (xtr, ytr) = feats(Split::Train, 3000);
    let (xte, yte) = feats(Split::Test, 2000);
    let w = fit_probe(&xtr, &ytr, 4, 200);
    let acc = xte
        .iter()
        .zip(&yte)
        .filter(|(x, &y)| {
            let p = probs(&w, x);
            (0..4).max_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap()) == Some(y)
        })
        .count() as f64
        / xte.len() as f64;
    assert!(acc <= 0.25 + 0.05, "probe accuracy {acc}");
}

#[test]
fn long_majority_matches_counting_oracle() {
    let window = 48;
    let t = SyntheticTask::long_majority([4, 4, 4], 3, window, 11);
    let mut ones = 0;
    let n = 2000;
    for i in 0..n {
        let ex = t.sample::<f64>(Split::Train, i).unwrap();
        let signs: Vec<f64> = ex.input.data().chunks(3).map(|tok| tok[0]).collect();
        assert!(signs.iter().all(|s| s.abs() == 1.0));
        let pos = signs[..window].iter().filter(|&&s| s > 0.0).count();
        let want = usize::from(2 * pos > window);
        assert_ne!(2 * pos, window);
        assert_eq!(ex.target, Target::Class(want));
        ones += want;
    }
    let frac = ones as f64 / n as f64;
    assert!((frac - 0.5).abs() < 0.05, "{frac}");
}

#[test]
fn majority_label_cases() {
    assert_eq!(majority_label(&[1.0; 9]), Some(1));
    assert_eq!(majority_label(&[-1.0; 9]), Some(0));
    assert_eq!(majority_label(&[1.0, -1.0, 1.0, -1.0]), None);
    assert_eq!(majority_label(&[]), None);
}

fn write_features(dir: &std::path::Path, n: usize, shape: &[usize]) -> FeatureManifest {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let entries = (0..n)
        .map(|i| {
            let p = dir.join(format!("clip{i}.stf1"));
            write_stf1(&p, &Tensor::<f32>::randn(shape.to_vec(), 1.0, &mut rng)).unwrap();
            (p, i % 3)
        })
        .collect();
    FeatureManifest {
        shape: shape.to_vec(),
        entries,
    }
}

#[test]
fn feature_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_features(dir.path(), 4, &[2, 3, 3, 5]);
    let path = dir.path().join("train.tsv");
    fs::write(&path, m.to_text()).unwrap();
    let back = FeatureManifest::read(&path, None).unwrap();
    assert_eq!(back, m);
    let ds = load_features(back, Some(3)).unwrap();
    assert_eq!(Dataset::<f32>::len(&ds), 4);
    for i in 0..4 {
        let ex: vis4mer::data::Example<f32> = ds.get(i).unwrap();
        let raw = read_stf1::<f32>(&m.entries[i].0).unwrap();
        let a: Vec<u32> = ex.input.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = raw.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(ex.target, Target::Class(i % 3));
    }
}

#[test]
fn relative_manifest_paths_resolve_against_manifest() {
    let dir = tempfile::tempdir().unwrap();
    write_features(dir.path(), 2, &[1, 1, 1, 4]);
    let path = dir.path().join("m.tsv");
    fs::write(
        &path,
        "#shape 1x1x1x4\n# comment\nclip0.stf1\t0\nclip1.stf1\t2\n",
    )
    .unwrap();
    let m = FeatureManifest::read(&path, None).unwrap();
    assert_eq!(m.entries[1], (dir.path().join("clip1.stf1"), 2));
    assert!(load_features(m, None).is_ok());
}

#[test]
fn empty_manifest_gives_empty_dataset() {
    let m = FeatureManifest::parse("", std::path::Path::new("."), None).unwrap();
    let ds = load_features(m, None).unwrap();
    assert!(Dataset::<f32>::is_empty(&ds));
}

#[test]
fn shape_mismatch_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = write_features(dir.path(), 3, &[2, 2, 2, 4]);
    let odd = dir.path().join("odd.stf1");
    write_stf1(&odd, &Tensor::<f32>::zeros(vec![2, 2, 2, 5])).unwrap();
    m.entries.push((odd.clone(), 0));
    match load_features(m, None) {
        Err(Error::Format { path, msg }) => {
            assert_eq!(path, odd);
            assert!(msg.contains("shape"), "{msg}");
        }
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn missing_and_corrupt_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let missing = FeatureManifest {
        shape: vec![1, 1, 1, 1],
        entries: vec![(dir.path().join("nope.stf1"), 0)],
    };
    assert!(matches!(
        load_features(missing, None),
        Err(Error::Io { .. })
    ));

    let bad = dir.path().join("bad.stf1");
    fs::write(&bad, b"XXXX garbage").unwrap();
    let corrupt = FeatureManifest {
        shape: vec![1, 1, 1, 1],
        entries: vec![(bad.clone(), 0)],
    };
    assert!(matches!(load_features(corrupt, None), Err(Error::Format { path, .. }) if path == bad));
}

#[test]
fn manifest_parse_errors() {
    let base = std::path::Path::new(".");
    assert!(FeatureManifest::parse("a.stf1\t0\n", base, None).is_err());
    assert!(FeatureManifest::parse("#shape 1x2\na.stf1 0\n", base, None).is_err());
    assert!(FeatureManifest::parse("#shape 1x2\na.stf1\tx\n", base, None).is_err());
    assert!(FeatureManifest::parse("#shape 1xq\n", base, None).is_err());
}

#[test]
fn out_of_range_labels_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_features(dir.path(), 3, &[1, 1, 1, 2]);
    assert!(load_features(m.clone(), Some(2)).is_err());
    assert!(load_features(m, Some(3)).is_ok());
}
