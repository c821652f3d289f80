mod common;

use std::collections::BTreeSet;

use orvit::backbone::{Model, ModelConfig};
use orvit::config::Config;
use orvit::harness::{evaluate, fit_objects, train};
use orvit::synthdata::{gen_dataset, motion_features, pair_split, write_dataset, Shard, Split, SynthConfig};

fn small_data() -> Config {
    common::tiny_config().with("data.per_pair", 6).with("train.batch", 4).with("train.lr", 3e-3)
}

fn gt_boxes(shard: &Shard, objects: usize) -> Vec<orvit::geometry::BoxSet> {
    shard.boxes.iter().map(|b| fit_objects(b, objects)).collect()
}

#[test]
fn sample_counts_and_split_disjointness() {
    let cfg = Config::default().with("data.per_pair", 10).with("data.frames", 4).with("data.height", 8).with("data.width", 8);
    let (train, val) = gen_dataset(&SynthConfig::from_config(&cfg).unwrap(), 3).unwrap();
    assert_eq!((train.len(), val.len()), (80, 80));
    let tp: BTreeSet<_> = train.manifest.pairs.iter().collect();
    let vp: BTreeSet<_> = val.manifest.pairs.iter().collect();
    assert!(tp.is_disjoint(&vp));
    for (v, n) in &train.labels {
        assert_eq!(pair_split(*v, *n, 4, 4), Split::Train);
        assert!(tp.contains(&(*v, *n)));
    }
    for (v, n) in &val.labels {
        assert!(vp.contains(&(*v, *n)));
    }
}

#[test]
fn splits_are_disjoint_for_every_vocabulary() {
    for verbs in 2..=8 {
        for nouns in 2..=8 {
            let mut train = BTreeSet::new();
            let mut val = BTreeSet::new();
            for v in 0..verbs {
                for n in 0..nouns {
                    match pair_split(v, n, verbs, nouns) {
                        Split::Train => train.insert((v, n)),
                        Split::Val => val.insert((v, n)),
                    };
                }
            }
            assert!(train.is_disjoint(&val));
            assert_eq!(train.len() + val.len(), verbs * nouns);
        }
    }
}

#[test]
fn generation_is_bitwise_deterministic() {
    let cfg = SynthConfig::from_config(&Config::default().with("data.per_pair", 3)).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_dataset(a.path(), &cfg, 9).unwrap();
    write_dataset(b.path(), &cfg, 9).unwrap();
    for split in ["train", "val"] {
        for f in ["clips.orvt", "boxes.csv", "detections.csv", "labels.csv", "manifest.json"] {
            let x = std::fs::read(a.path().join(split).join(f)).unwrap();
            let y = std::fs::read(b.path().join(split).join(f)).unwrap();
            assert_eq!(x, y, "{split}/{f}");
        }
    }
    let loaded = Shard::load(&a.path().join("train")).unwrap();
    let (train, _) = gen_dataset(&cfg, 9).unwrap();
    assert_eq!(loaded.manifest, train.manifest);
    assert_eq!(loaded.labels, train.labels);
    assert_eq!(loaded.boxes, train.boxes);
    assert_eq!(loaded.detections, train.detections);
    assert_eq!(loaded.clips, train.clips);
}

#[test]
fn nearest_centroid_on_box_motion_recovers_verbs() {
    let cfg = Config::default().with("data.per_pair", 50);
    let (train, val) = gen_dataset(&SynthConfig::from_config(&cfg).unwrap(), 4).unwrap();
    let verbs = train.num_classes();
    let mut sums = vec![[0.0f64; 4]; verbs];
    let mut counts = vec![0usize; verbs];
    for (b, (v, _)) in train.boxes.iter().zip(&train.labels) {
        let f = motion_features(b);
        for k in 0..4 {
            sums[*v][k] += f[k];
        }
        counts[*v] += 1;
    }
    let centroids: Vec<[f64; 4]> = sums.iter().zip(&counts).map(|(s, &c)| s.map(|x| x / c as f64)).collect();
    // Held-out pairs: the features never see appearance.
    let correct = val
        .boxes
        .iter()
        .zip(&val.labels)
        .filter(|(b, (v, _))| {
            let f = motion_features(b);
            let d = |c: &[f64; 4]| c.iter().zip(&f).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..verbs).min_by(|&i, &j| d(&centroids[i]).partial_cmp(&d(&centroids[j])).unwrap()).unwrap();
            best == *v
        })
        .count();
    let acc = correct as f64 / val.len() as f64;
    assert!(acc > 0.9, "{acc}");
}

#[test]
fn zero_learning_rate_leaves_parameters_and_loss_fixed() {
    let cfg = small_data().with("train.lr", 0.0).with("train.epochs", 2);
    let (shard, _) = gen_dataset(&SynthConfig::from_config(&cfg).unwrap(), 1).unwrap();
    let (_, store, report) = train(&shard, &cfg, 5, "lr0").unwrap();
    let (_, fresh) = Model::new(&ModelConfig::from_config(&cfg).unwrap(), 5).unwrap();
    for id in fresh.ids() {
        assert_eq!(store.get(id), fresh.get(id), "{}", fresh.name(id));
    }
    assert!((report.epochs[0].loss - report.epochs[1].loss).abs() < 1e-12);
}

#[test]
fn single_sample_is_memorized() {
    let cfg = small_data().with("train.epochs", 200).with("train.batch", 1).with("train.lr", 1e-2);
    let (shard, _) = gen_dataset(&SynthConfig::from_config(&cfg).unwrap(), 2).unwrap();
    let one = shard.subset(&[0]).unwrap();
    let (model, store, report) = train(&one, &cfg, 1, "memo").unwrap();
    let last = report.epochs.last().unwrap().loss;
    assert!(last < 0.01, "{last}");
    let r = evaluate(&model, &store, &one, &gt_boxes(&one, 2)).unwrap();
    assert_eq!(r.top1, 1.0);
}

#[test]
fn random_model_scores_chance() {
    let cfg = small_data().with("data.per_pair", 40);
    let (_, val) = gen_dataset(&SynthConfig::from_config(&cfg).unwrap(), 5).unwrap();
    let (model, store) = Model::new(&ModelConfig::from_config(&cfg).unwrap(), 11).unwrap();
    let boxes = gt_boxes(&val, 2);
    let a = evaluate(&model, &store, &val, &boxes).unwrap();
    let b = evaluate(&model, &store, &val, &boxes).unwrap();
    assert_eq!(a, b);
    let n = val.len() as f64;
    let p = 1.0 / val.num_classes() as f64;
    assert!((a.top1 - p).abs() <= 3.0 * (p * (1.0 - p) / n).sqrt() + 1e-12, "{}", a.top1);
}

#[test]
fn label_space_mismatch_is_rejected() {
    let cfg = small_data();
    let (shard, _) = gen_dataset(&SynthConfig::from_config(&cfg).unwrap(), 1).unwrap();
    let (model, store) = Model::new(&ModelConfig::from_config(&cfg.clone().with("data.verbs", 3)).unwrap(), 0).unwrap();
    assert!(evaluate(&model, &store, &shard, &gt_boxes(&shard, 2)).is_err());
}

#[test]
fn training_is_reproducible() {
    let cfg = small_data().with("train.epochs", 2);
    let (shard, _) = gen_dataset(&SynthConfig::from_config(&cfg).unwrap(), 1).unwrap();
    let (_, s1, r1) = train(&shard, &cfg, 3, "a").unwrap();
    let (_, s2, r2) = train(&shard, &cfg, 3, "a").unwrap();
    assert_eq!(r1, r2);
    for id in s1.ids() {
        assert_eq!(s1.get(id), s2.get(id));
    }
}
