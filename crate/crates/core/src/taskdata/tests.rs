use super::*;

fn idx_images(n: u32, h: u32, w: u32, pixels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 3];
    for v in [n, h, w] {
        b.extend(v.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 1];
    b.extend((labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

#[test]
fn idx_fixture_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..4 * 28 * 28).map(|i| (i % 256) as u8).collect();
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
    std::fs::write(&ip, idx_images(4, 28, 28, &pixels)).unwrap();
    std::fs::write(&lp, idx_labels(&[3, 1, 4, 1])).unwrap();
    let s = load_idx(&ip, &lp).unwrap();
    let (t, labels) = s.to_batch();
    assert_eq!(t.shape(), &[4, 1, 28, 28]);
    assert_eq!(labels, vec![3, 1, 4, 1]);
    assert_eq!(t.data()[255], 1.0);
    assert_eq!(t.data()[256], 0.0);
}

#[test]
fn idx_errors() {
    assert!(matches!(parse_idx_images(&[0, 0, 8, 1, 0, 0, 0, 0]), Err(Error::Format(_))));
    assert!(matches!(parse_idx_labels(&idx_images(1, 1, 1, &[0])), Err(Error::Format(_))));
    assert!(matches!(parse_idx_images(&[]), Err(Error::Io(_))));
    assert!(matches!(parse_idx_images(&idx_images(2, 2, 2, &[0; 7])), Err(Error::Io(_))));
    assert!(matches!(parse_idx_labels(&idx_labels(&[1, 2])[..9]), Err(Error::Io(_))));
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::write(&empty, b"").unwrap();
    assert!(matches!(load_idx(&empty, &empty), Err(Error::Io(_))));
}

fn ten_class_set(n: usize) -> TaskDataset {
    let g = Geometry::gray(2);
    let train = Samples::new(g, (0..n * 4).map(|v| v as f64).collect(), (0..n).map(|i| i % 10).collect()).unwrap();
    TaskDataset {
        name: "t".into(),
        train,
        val: Samples::empty(g),
        test: Samples::empty(g),
        num_classes: 10,
        geometry: g,
        augment: AugmentPolicy::off(),
    }
}

#[test]
fn stratified_split() {
    let ds = make_splits(ten_class_set(100), 0.1, &Seeds::new(3)).unwrap();
    assert_eq!(ds.val.len(), 10);
    assert_eq!(ds.train.len(), 90);
    let mut classes = ds.val.labels.clone();
    classes.sort_unstable();
    assert_eq!(classes, (0..10).collect::<Vec<_>>());
    let again = make_splits(ten_class_set(100), 0.1, &Seeds::new(3)).unwrap();
    assert_eq!(ds, again);
    let other = make_splits(ten_class_set(100), 0.1, &Seeds::new(4)).unwrap();
    assert_ne!(ds.val, other.val);
    let none = make_splits(ten_class_set(100), 0.0, &Seeds::new(3)).unwrap();
    assert!(none.val.is_empty());
    assert_eq!(none.train.len(), 100);
    // Splits are disjoint: every value appears once across train and val.
    let mut firsts: Vec<f64> = ds.train.images.iter().chain(&ds.val.images).step_by(4).copied().collect();
    firsts.sort_by(f64::total_cmp);
    firsts.dedup();
    assert_eq!(firsts.len(), 100);
}

#[test]
fn augment_off_is_identity_and_flips_invert() {
    let g = Geometry { channels: 2, height: 3, width: 4 };
    let img: Vec<f64> = (0..24).map(|v| v as f64).collect();
    let mut rng = Seeds::new(0).stream("aug");
    assert_eq!(augment(&img, g, AugmentPolicy::off(), &mut rng), img);
    assert_eq!(hflip(&hflip(&img, g), g), img);
    assert_eq!(vflip(&vflip(&img, g), g), img);
    assert_eq!(&hflip(&img, g)[..4], &[3.0, 2.0, 1.0, 0.0]);
    assert_eq!(&vflip(&img, g)[..4], &[8.0, 9.0, 10.0, 11.0]);
    let policy = AugmentPolicy { scale_crop: true, hflip: true, vflip: true };
    for _ in 0..10 {
        let out = augment(&img, g, policy, &mut rng);
        assert_eq!(out.len(), img.len());
        assert!(out.iter().all(|v| (0.0..=23.0).contains(v)));
    }
}

#[test]
fn augment_batch_keeps_labels() {
    let ds = synth_task(&SynthTaskSpec::base("a", Family::Digits, 1, 1)).unwrap();
    let mut rng = Seeds::new(0).stream("aug");
    let out = augment_batch(&ds.train, AugmentPolicy::crop_only(), &mut rng);
    assert_eq!(out.labels, ds.train.labels);
    assert_eq!(out.images.len(), ds.train.images.len());
    assert_ne!(out.images, ds.train.images);
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pixel_means(s: &Samples) -> Vec<f64> {
    let p = s.geometry.pixels();
    (0..p).map(|j| (0..s.len()).map(|i| s.image(i)[j]).sum::<f64>() / s.len() as f64).collect()
}

#[test]
fn theta_zero_matches_base() {
    let base = SynthTaskSpec::base("base", Family::Digits, 5, 5);
    for t in [Transform::PixelPermutation, Transform::Rotation, Transform::LabelPermutation, Transform::ChannelNoise] {
        let a = synth_task(&base).unwrap();
        let b = synth_task(&base.clone().with(t, 0.0)).unwrap();
        assert_eq!(a.train, b.train, "{t:?}");
    }
    // Fresh draws from the same base: overall brightness agrees within sampling error.
    let mut big = base.clone();
    big.train_per_class = 200;
    let a = synth_task(&big).unwrap();
    let mut other = big.clone();
    other.sample_seed = 99;
    let b = synth_task(&other).unwrap();
    let per = |s: &Samples| -> Vec<f64> { (0..s.len()).map(|i| mean(s.image(i))).collect() };
    let (xa, xb) = (per(&a.train), per(&b.train));
    let var = |x: &[f64]| {
        let m = mean(x);
        x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
    };
    let z = (mean(&xa) - mean(&xb)) / (var(&xa) / xa.len() as f64 + var(&xb) / xb.len() as f64).sqrt();
    assert!(z.abs() < 4.0, "z = {z}");
}

#[test]
fn label_permutation_keeps_images() {
    let base = SynthTaskSpec::base("base", Family::Digits, 5, 5);
    let a = synth_task(&base).unwrap();
    let b = synth_task(&base.clone().with(Transform::LabelPermutation, 1.0)).unwrap();
    assert_eq!(a.train.images, b.train.images);
    assert_ne!(a.train.labels, b.train.labels);
    let mut map = std::collections::BTreeMap::new();
    for (x, y) in a.train.labels.iter().zip(&b.train.labels) {
        assert_eq!(*map.entry(*x).or_insert(*y), *y);
    }
    let mut image: Vec<usize> = map.values().copied().collect();
    image.sort_unstable();
    assert_eq!(image, (0..5).collect::<Vec<_>>());
}

#[test]
fn full_pixel_permutation_decorrelates() {
    let mut base = SynthTaskSpec::base("base", Family::Digits, 5, 5);
    base.train_per_class = 100;
    let a = synth_task(&base).unwrap();
    let b = synth_task(&base.clone().with(Transform::PixelPermutation, 1.0)).unwrap();
    let (ma, mb) = (pixel_means(&a.train), pixel_means(&b.train));
    // Correlation across samples between the same pixel position in both tasks.
    let p = a.geometry.pixels();
    let mut total = 0.0;
    let mut counted = 0;
    for j in 0..p {
        let xs: Vec<f64> = (0..a.train.len()).map(|i| a.train.image(i)[j] - ma[j]).collect();
        let ys: Vec<f64> = (0..b.train.len()).map(|i| b.train.image(i)[j] - mb[j]).collect();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        let syy: f64 = ys.iter().map(|y| y * y).sum();
        if sxx > 1e-9 && syy > 1e-9 {
            total += sxy / (sxx * syy).sqrt();
            counted += 1;
        }
    }
    let r = total / counted as f64;
    assert!(r.abs() < 0.05, "mean correlation {r}");
}

#[test]
fn rotation_and_noise_change_images() {
    let base = SynthTaskSpec::base("base", Family::Fashion, 2, 2);
    let a = synth_task(&base).unwrap();
    for t in [Transform::Rotation, Transform::ChannelNoise] {
        let b = synth_task(&base.clone().with(t, 0.5)).unwrap();
        assert_eq!(a.train.labels, b.train.labels);
        assert_ne!(a.train.images, b.train.images);
        assert!(b.train.images.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn synthetic_tasks_are_deterministic() {
    for spec in toy_vdd(3) {
        assert_eq!(synth_task(&spec).unwrap(), synth_task(&spec).unwrap());
    }
    assert_ne!(synth_task(&toy_vdd(3)[0]).unwrap().train, synth_task(&toy_vdd(4)[0]).unwrap().train);
}

#[test]
fn manifest_round_trip() {
    let stream = toy_vdd(7);
    let text = synth_manifest(&stream);
    let parsed = parse_manifest(&text, Path::new("/")).unwrap();
    assert_eq!(parsed, stream.iter().cloned().map(TaskSource::Synth).collect::<Vec<_>>());
    let idx = "task.0.name=mnist\ntask.0.train_images=a\ntask.0.train_labels=b\ntask.0.test_images=/c\ntask.0.test_labels=d\ntask.0.classes=10\ntask.0.geometry=1x28x28\n";
    match &parse_manifest(idx, Path::new("/data")).unwrap()[0] {
        TaskSource::Idx { train_images, test_images, geometry, .. } => {
            assert_eq!(train_images, Path::new("/data/a"));
            assert_eq!(test_images, Path::new("/c"));
            assert_eq!(*geometry, Geometry::gray(28));
        }
        other => panic!("{other:?}"),
    }
    assert!(parse_manifest("", Path::new("/")).is_err());
    assert!(parse_manifest("task.1.name=x\n", Path::new("/")).is_err());
    assert!(parse_manifest("task.0.name=x\ntask.0.kind=synth\ntask.0.family=bogus\n", Path::new("/")).is_err());
}

#[test]
fn missing_idx_file_is_io_error() {
    let src = TaskSource::Idx {
        name: "gone".into(),
        train_images: "/nonexistent/a".into(),
        train_labels: "/nonexistent/b".into(),
        test_images: "/nonexistent/c".into(),
        test_labels: "/nonexistent/d".into(),
        classes: 10,
        geometry: Geometry::gray(28),
    };
    assert!(matches!(src.load(0.1, &Seeds::new(0)), Err(Error::Io(_))));
}
