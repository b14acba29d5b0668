use super::*;
use crate::rules::{brain4cars_rules, default_classes, parse_rules};
use rand::seq::SliceRandom;

fn small_cfg() -> GenConfig {
    GenConfig::default()
}

#[test]
fn same_seed_same_episode() {
    let rules = brain4cars_rules();
    let a = generate_episode(3, 99, &small_cfg(), &rules).unwrap();
    let b = generate_episode(3, 99, &small_cfg(), &rules).unwrap();
    assert_eq!(a, b);
    let c = generate_episode(3, 100, &small_cfg(), &rules).unwrap();
    assert_ne!(a.frames, c.frames);
}

#[test]
fn class_frequencies_are_uniform() {
    let rules = brain4cars_rules();
    let cfg = GenConfig {
        frames: 1,
        ..small_cfg()
    };
    let n = 10_000;
    let mut counts = [0usize; 5];
    for ep in generate_dataset(n, 7, &cfg, &rules).unwrap() {
        counts[ep.label] += 1;
    }
    for c in counts {
        let f = c as f64 / n as f64;
        assert!((f - 0.2).abs() < 0.015, "{counts:?}");
    }
}

#[test]
fn generated_episodes_never_contradict() {
    let rules = brain4cars_rules();
    let cfg = GenConfig {
        frames: 1,
        ..small_cfg()
    };
    let eps = generate_dataset(2000, 11, &cfg, &rules).unwrap();
    assert!(eps.iter().all(|e| !rules.contradicts(e.label, &e.context).unwrap()));
    // Every consistent (class, context) pair shows up.
    let mut seen = std::collections::BTreeSet::new();
    for e in &eps {
        seen.insert((e.label, e.context.clone()));
    }
    assert_eq!(seen.len(), 8 + 4 + 3 + 4 + 3);
}

#[test]
fn unsatisfiable_rules_are_a_config_error() {
    let rules = parse_rules("go_straight : ***", &default_classes(), 3).unwrap();
    let res = (0..50).map(|s| generate_episode(0, s, &small_cfg(), &rules)).find(|r| r.is_err());
    assert!(matches!(res, Some(Err(Error::Config(_)))));
}

#[test]
fn frames_have_expected_layout() {
    let cfg = GenConfig {
        noise_std: 0.0,
        ..small_cfg()
    };
    let rules = brain4cars_rules();
    let ep = generate_dataset(40, 1, &cfg, &rules)
        .unwrap()
        .into_iter()
        .find(|e| e.label == 4)
        .unwrap();
    assert_eq!(ep.frames.len(), 5);
    assert_eq!(ep.frames[0].geometry(), cfg.views());
    // Markers carry the context bits.
    let road = &ep.frames[0].views()[1];
    let bits = [road.get(1, 1, 0), road.get(1, 30, 0), road.get(30, 1, 0), road.get(30, 30, 0)];
    let expect = |b: bool| if b { 1.0 } else { 0.0 };
    assert_eq!(bits[0], expect(ep.context.bit(0)));
    assert_eq!(bits[1], expect(ep.context.bit(1)));
    assert_eq!(bits[2], expect(ep.context.bit(2)));
    assert_eq!(bits[3], expect(ep.context.bit(2)));
    // The blob centroid moves right by 1.5 px per frame for right_turn.
    let centroid = |img: &Image| {
        let (mut m, mut s) = (0.0, 0.0);
        for y in 0..img.height() {
            for x in 0..img.width() {
                let v = img.get(y, x, 0) as f64;
                m += v * (x as f64 + 0.5);
                s += v;
            }
        }
        m / s
    };
    let xs: Vec<f64> = ep.frames.iter().map(|f| centroid(&f.views()[0])).collect();
    for w in xs.windows(2) {
        assert!((w[1] - w[0] - 1.5).abs() < 0.1, "{xs:?}");
    }
}

#[test]
fn no_jitter_centres_blob_at_mid_episode() {
    let cfg = GenConfig {
        noise_std: 0.0,
        blob_jitter: 0.0,
        frames: 4,
        ..small_cfg()
    };
    let rules = brain4cars_rules();
    for ep in generate_dataset(10, 2, &cfg, &rules).unwrap() {
        // x(T/2) = W/2: the frame at t = 2 is symmetric about the centre column.
        let img = &ep.frames[1].views()[0];
        for x in 0..16 {
            assert!((img.get(16, x, 0) - img.get(16, 31 - x, 0)).abs() < 1e-6);
        }
    }
}

#[test]
fn pixels_are_clamped() {
    let rules = brain4cars_rules();
    let ep = generate_episode(0, 5, &small_cfg(), &rules).unwrap();
    for f in &ep.frames {
        for v in f.views() {
            assert!(v.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
            assert!(v.pixels().contains(&0.0));
        }
    }
}

#[test]
fn config_validation() {
    let rules = brain4cars_rules();
    let bad = [
        GenConfig { frames: 0, ..small_cfg() },
        GenConfig { velocities: vec![0.0; 3], ..small_cfg() },
        GenConfig { marker_size: 20, ..small_cfg() },
        GenConfig { blob_sigma: 0.0, ..small_cfg() },
        GenConfig { noise_std: f64::NAN, ..small_cfg() },
    ];
    for cfg in bad {
        assert!(matches!(generate_episode(0, 0, &cfg, &rules), Err(Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let rules = brain4cars_rules();
    let eps = generate_dataset(6, 3, &small_cfg(), &rules).unwrap();
    let manifest = write_dataset(dir.path(), &eps, &rules).unwrap();
    assert_eq!(manifest.len(), 6);
    let ds = read_dataset(dir.path()).unwrap();
    assert_eq!(ds.episodes, eps);
    assert_eq!(ds.manifest, manifest);
    assert_eq!(ds.rules, rules);
    for e in &ds.manifest.entries {
        for p in &e.paths {
            assert!(dir.path().join(p).exists());
        }
    }
    assert!(dir.path().join("ep_5_view1.bin").exists());
}

#[test]
fn corrupt_rasters_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let rules = brain4cars_rules();
    let eps = generate_dataset(2, 3, &small_cfg(), &rules).unwrap();
    write_dataset(dir.path(), &eps, &rules).unwrap();
    let path = dir.path().join("ep_1_view0.bin");
    let good = std::fs::read(&path).unwrap();

    let mut bad = good.clone();
    bad[0] ^= 0xFF;
    std::fs::write(&path, &bad).unwrap();
    match read_dataset(dir.path()) {
        Err(Error::Format { path: p, msg }) => {
            assert_eq!(p, path);
            assert!(msg.contains("magic"), "{msg}");
        }
        other => panic!("expected format error, got {other:?}"),
    }

    std::fs::write(&path, &good[..good.len() - 3]).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })));

    std::fs::write(&path, &good[..10]).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })));
}

#[test]
fn corrupt_manifest_is_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let rules = brain4cars_rules();
    let eps = generate_dataset(2, 3, &small_cfg(), &rules).unwrap();
    write_dataset(dir.path(), &eps, &rules).unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).unwrap();
    for broken in [
        text.replace("episodes 2", "episodes 3"),
        text.replace("cemformer-dataset 1", "cemformer-dataset 9"),
        text.replace("go_straight,", "go_ahead,"),
        text.replace("context_dim 3", "context_dim x"),
    ] {
        if broken == text {
            continue;
        }
        std::fs::write(&path, &broken).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })), "{broken}");
    }
}

#[test]
fn missing_dataset_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(read_dataset(&dir.path().join("nope")), Err(Error::Io { .. })));
}

fn labelled(n: usize) -> Vec<(u64, usize)> {
    (0..n as u64).map(|i| (i, (i as usize * 7 + 3) % 5)).collect()
}

#[test]
fn folds_partition_and_stratify() {
    let items = labelled(10);
    let split = kfold_split(&items, 5, 1).unwrap();
    assert!(split.folds.iter().all(|f| f.len() == 2));

    for (n, folds) in [(53, 5), (100, 5), (17, 3), (500, 5)] {
        let items = labelled(n);
        let split = kfold_split(&items, folds, 9).unwrap();
        let mut all: Vec<u64> = split.folds.iter().flatten().copied().collect();
        all.sort();
        assert_eq!(all, (0..n as u64).collect::<Vec<_>>());
        let sizes: Vec<usize> = split.folds.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for class in 0..5 {
            let total = items.iter().filter(|i| i.1 == class).count() as f64;
            let ideal = total / folds as f64;
            for f in &split.folds {
                let count = f.iter().filter(|&&id| items[id as usize].1 == class).count() as f64;
                assert!((count - ideal).abs() <= 1.0, "class {class}: {count} vs {ideal}");
            }
        }
        let (train, test) = split.train_test(0);
        assert_eq!(train.len() + test.len(), n);
    }
}

#[test]
fn folds_are_seeded() {
    let items = labelled(50);
    assert_eq!(kfold_split(&items, 5, 4).unwrap(), kfold_split(&items, 5, 4).unwrap());
    assert_ne!(kfold_split(&items, 5, 4).unwrap(), kfold_split(&items, 5, 5).unwrap());
    assert!(matches!(kfold_split(&labelled(3), 5, 0), Err(Error::Config(_))));
    assert!(matches!(kfold_split(&labelled(3), 1, 0), Err(Error::Config(_))));
}

#[test]
fn metric_examples() {
    let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
    assert_eq!(accuracy(&labels, &labels).unwrap(), 1.0);
    assert_eq!(macro_f1(&labels, &labels, 5).unwrap(), 1.0);
    let zeros = vec![0; 50];
    assert!((accuracy(&zeros, &labels).unwrap() - 0.2).abs() < 1e-12);
    let f1 = macro_f1(&zeros, &labels, 5).unwrap();
    assert!((f1 - (2.0 * 0.2 / 1.2) / 5.0).abs() < 1e-12, "{f1}");
    assert!(accuracy(&[], &[]).is_err());
    assert!(accuracy(&[1], &[1, 2]).is_err());
}

/// Direct per-class counting, independent of the confusion matrix.
fn brute_f1(preds: &[usize], labels: &[usize], n: usize) -> f64 {
    let mut total = 0.0;
    for k in 0..n {
        let tp = preds.iter().zip(labels).filter(|&(&p, &l)| p == k && l == k).count() as f64;
        let fp = preds.iter().zip(labels).filter(|&(&p, &l)| p == k && l != k).count() as f64;
        let fn_ = preds.iter().zip(labels).filter(|&(&p, &l)| p != k && l == k).count() as f64;
        if 2.0 * tp + fp + fn_ > 0.0 {
            total += 2.0 * tp / (2.0 * tp + fp + fn_);
        }
    }
    total / n as f64
}

#[test]
fn three_class_confusion_example() {
    let labels = [0, 0, 0, 1, 1, 2, 2, 2, 2];
    let preds = [0, 1, 0, 1, 2, 2, 2, 0, 2];
    let m = confusion_matrix(&preds, &labels, 3).unwrap();
    assert_eq!(m, vec![vec![2, 1, 0], vec![0, 1, 1], vec![1, 0, 3]]);
    let s = per_class_scores(&preds, &labels, 3).unwrap();
    assert!((s[0].precision - 2.0 / 3.0).abs() < 1e-12);
    assert!((s[2].recall - 0.75).abs() < 1e-12);
    let f1 = macro_f1(&preds, &labels, 3).unwrap();
    assert!((f1 - brute_f1(&preds, &labels, 3)).abs() < 1e-12);
}

#[test]
fn macro_f1_matches_brute_force_randomly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let n = rng.random_range(1..40);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
        let f1 = macro_f1(&preds, &labels, 5).unwrap();
        assert!((f1 - brute_f1(&preds, &labels, 5)).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&f1));
    }
}

#[test]
fn contradiction_rate_examples() {
    let rules = brain4cars_rules();
    let c = ContextVector::from_bits_str("100").unwrap();
    assert_eq!(contradiction_rate(&[1], std::slice::from_ref(&c), &rules).unwrap(), 1.0);
    assert_eq!(contradiction_rate(&[0, 3], &[c.clone(), c.clone()], &rules).unwrap(), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let contexts: Vec<ContextVector> = (0..200).map(|_| ContextVector::from_index(rng.random_range(0..8), 3)).collect();
    let preds: Vec<usize> = (0..200).map(|_| rng.random_range(0..5)).collect();
    let brute = preds
        .iter()
        .zip(&contexts)
        .filter(|(p, c)| {
            rules
                .rules()
                .iter()
                .any(|r| r.maneuver == **p && crate::rules::matches(&r.pattern, c).unwrap())
        })
        .count() as f64
        / 200.0;
    assert_eq!(contradiction_rate(&preds, &contexts, &rules).unwrap(), brute);
}

#[test]
fn anticipation_examples() {
    assert_eq!(anticipation_time(&[2, 2, 2, 2, 2], 2), Some(4));
    assert_eq!(anticipation_time(&[0, 1, 0, 0, 2], 2), Some(0));
    assert_eq!(anticipation_time(&[1, 2, 2], 2), Some(1));
    assert_eq!(anticipation_time(&[2, 1, 2], 2), Some(0));
    assert_eq!(anticipation_time(&[2, 2, 1], 2), None);
}

#[test]
fn report_summary() {
    let rules = brain4cars_rules();
    let c = ContextVector::from_bits_str("111").unwrap();
    let folds: Vec<FoldMetrics> = (0..5)
        .map(|f| {
            let labels: Vec<usize> = (0..10).map(|i| i % 5).collect();
            let preds: Vec<Vec<usize>> = labels
                .iter()
                .enumerate()
                .map(|(i, &l)| vec![l, if i < f { 0 } else { l }])
                .collect();
            FoldMetrics::evaluate(&preds, &labels, &vec![c.clone(); 10], &rules).unwrap()
        })
        .collect();
    let report = MetricsReport::from_folds(folds);
    let accs: Vec<f64> = report.folds.iter().map(|f| f.accuracy).collect();
    let mean = accs.iter().sum::<f64>() / 5.0;
    let sd = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
    assert!((report.accuracy.mean - mean).abs() < 1e-12);
    assert!((report.accuracy.sd - sd).abs() < 1e-12);
    let table = report.to_table();
    assert_eq!(table.lines().count(), 7);
    assert!(table.lines().last().unwrap().starts_with("AVG ± SD"));
}

/// Logistic regression on the cabin view of one frame, trained by
/// full-batch gradient descent. The road view is left out: its context
/// markers identify the class whenever the rules rule the other one out.
fn single_frame_pairwise_accuracy(frame_index: usize) -> f64 {
    let rules = brain4cars_rules();
    let cfg = small_cfg();
    let pick = |eps: Vec<Episode>| -> Vec<(Vec<f64>, f64)> {
        eps.into_iter()
            .filter(|e| e.label == 1 || e.label == 2)
            .map(|e| {
                let f = &e.frames[frame_index];
                let x = f.views()[0].pixels().iter().map(|&p| p as f64).collect();
                (x, if e.label == 2 { 1.0 } else { 0.0 })
            })
            .collect()
    };
    let train = pick(generate_dataset(2500, 21, &cfg, &rules).unwrap());
    let test = pick(generate_dataset(1000, 22, &cfg, &rules).unwrap());
    let dim = train[0].0.len();
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());
    for _ in 0..300 {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (x, y) in &train {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            let e = sigmoid(z) - y;
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += e * xi;
            }
            gb += e;
        }
        let n = train.len() as f64;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= 0.05 * (g / n + 1e-3 * *wi);
        }
        b -= 0.05 * gb / n;
    }
    let hits = test
        .iter()
        .filter(|(x, y)| {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            (sigmoid(z) > 0.5) == (*y == 1.0)
        })
        .count();
    hits as f64 / test.len() as f64
}

#[test]
fn single_frame_cannot_separate_turn_from_lane_change() {
    for t in [0, 4] {
        let acc = single_frame_pairwise_accuracy(t);
        assert!(acc < 0.75, "frame {t}: pairwise accuracy {acc}");
    }
}

#[test]
fn shuffled_ids_do_not_change_split_membership_sizes() {
    let mut items = labelled(40);
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let split = kfold_split(&items, 4, 2).unwrap();
    assert!(split.folds.iter().all(|f| f.len() == 10));
}
