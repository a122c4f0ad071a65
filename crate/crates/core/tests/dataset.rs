use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use sdseg_core::data::{
    foreground_fraction, generate_dataset, generate_split, load_batches, load_split, read_manifest, DataError, Split,
};

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn same_seed_gives_byte_identical_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    generate_dataset(&a, 12, 4, 32, 32, 7).unwrap();
    generate_dataset(&b, 12, 4, 32, 32, 7).unwrap();
    generate_dataset(&c, 12, 4, 32, 32, 8).unwrap();
    let (sa, sb, sc) = (snapshot(&a), snapshot(&b), snapshot(&c));
    assert_eq!(sa.len(), (1 + 2 * 12) + (1 + 2 * 4));
    assert_eq!(sa, sb);
    assert_ne!(sa, sc);
}

#[test]
fn load_round_trips_generated_tensors() {
    let tmp = tempfile::tempdir().unwrap();
    generate_dataset(tmp.path(), 6, 3, 32, 48, 2).unwrap();
    let train = load_split(&tmp.path().join("train")).unwrap();
    let test = load_split(&tmp.path().join("test")).unwrap();
    assert_eq!((train.height(), train.width()), (32, 48));
    assert_eq!(train.samples, generate_split(Split::Train, 6, 32, 48, 2).unwrap());
    assert_eq!(test.samples, generate_split(Split::Test, 3, 32, 48, 2).unwrap());
    let train_ids: HashSet<_> = train.samples.iter().map(|s| s.id.clone()).collect();
    assert!(test.samples.iter().all(|s| !train_ids.contains(&s.id)));
    let m = read_manifest(&tmp.path().join("test")).unwrap();
    assert_eq!(m.count, 3);
    assert_eq!(m.generator.seed, 2);
}

#[test]
fn corrupt_tensor_error_names_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    generate_dataset(tmp.path(), 3, 1, 16, 16, 0).unwrap();
    let victim = tmp.path().join("train").join("train_00001_mask.tnsr");
    let bytes = fs::read(&victim).unwrap();
    fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
    let err = load_split(&tmp.path().join("train")).unwrap_err();
    assert!(matches!(err, DataError::Tensor { .. }), "{err}");
    assert!(err.to_string().contains("train_00001_mask.tnsr"), "{err}");

    fs::remove_file(&victim).unwrap();
    let err = load_split(&tmp.path().join("train")).unwrap_err();
    assert!(err.to_string().contains("train_00001_mask.tnsr"), "{err}");

    let err = load_split(&tmp.path().join("missing")).unwrap_err();
    assert!(err.to_string().contains("missing"), "{err}");
}

#[test]
fn foreground_fraction_is_bounded() {
    for s in generate_split(Split::Train, 200, 64, 64, 11).unwrap() {
        let f = foreground_fraction(&s.mask);
        assert!((0.03..=0.5).contains(&f), "{}: {f}", s.id);
    }
}

/// Mean over samples of |mean image value on inner boundary pixels - mean
/// background value|, channels averaged.
fn boundary_contrast(seed: u64) -> f64 {
    let samples = generate_split(Split::Train, 100, 64, 64, seed).unwrap();
    let mut total = 0.0;
    for s in &samples {
        let (h, w) = (64, 64);
        let m = s.mask.data();
        let gray: Vec<f64> = (0..h * w).map(|i| (0..3).map(|c| s.image.data()[c * h * w + i] as f64).sum::<f64>() / 3.0).collect();
        let (mut bsum, mut bn, mut gsum, mut gn) = (0.0, 0, 0.0, 0);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if m[i] == 0.0 {
                    gsum += gray[i];
                    gn += 1;
                    continue;
                }
                let edge = [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)].iter().any(|&(dy, dx)| {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 && m[yy as usize * w + xx as usize] == 0.0
                });
                if edge {
                    bsum += gray[i];
                    bn += 1;
                }
            }
        }
        total += (bsum / bn as f64 - gsum / gn as f64).abs();
    }
    total / samples.len() as f64
}

#[test]
fn blob_boundaries_stand_out_from_background() {
    for seed in [0, 5] {
        let c = boundary_contrast(seed);
        assert!(c >= 0.2, "seed {seed}: {c}");
    }
}

#[test]
fn one_epoch_covers_every_id_once() {
    let tmp = tempfile::tempdir().unwrap();
    generate_dataset(tmp.path(), 10, 1, 16, 16, 3).unwrap();
    let ds = load_split(&tmp.path().join("train")).unwrap();
    let sizes: Vec<usize> = load_batches(&ds, 4, 9).unwrap().map(|b| b.ids.len()).collect();
    assert_eq!(sizes, [4, 4, 2]);
    let ids: Vec<String> = load_batches(&ds, 4, 9).unwrap().flat_map(|b| b.ids).collect();
    let again: Vec<String> = load_batches(&ds, 4, 9).unwrap().flat_map(|b| b.ids).collect();
    assert_eq!(ids, again);
    let mut sorted = ids.clone();
    sorted.sort();
    let mut expected: Vec<String> = ds.samples.iter().map(|s| s.id.clone()).collect();
    expected.sort();
    assert_eq!(sorted, expected);
}
