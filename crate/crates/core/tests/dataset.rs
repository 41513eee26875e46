use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use aflow::dataset::{
    decode_transform, delta_vocabulary, encode_transform, generate_dataset, render_view, sample_tuple, split_of,
    Dataset, DatasetManifest, Split, SpriteInstance,
};
use aflow::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn small_dataset(seed: u64, count: usize) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(seed, count, 32, dir.path()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    (dir, ds)
}

#[test]
fn same_seed_gives_identical_files() {
    let (a, b, c) = (
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    );
    generate_dataset(4, 6, 32, a.path()).unwrap();
    generate_dataset(4, 6, 32, b.path()).unwrap();
    generate_dataset(5, 6, 32, c.path()).unwrap();
    let (ta, tb, tc) = (tree(a.path()), tree(b.path()), tree(c.path()));
    assert_eq!(ta.len(), 1 + 6 * 72 * 2);
    assert!(ta == tb);
    assert!(ta != tc);
}

/// Rotation by a multiple of 90° as a pure index permutation of the canonical view.
fn rotate_quarter_turns(img: &Tensor, turns: usize) -> Tensor {
    let (c, s) = (img.shape()[0], img.shape()[1]);
    Tensor::from_fn(&[c, s, s], |i| {
        let (ch, v, u) = (i / (s * s), (i / s) % s, i % s);
        let (su, sv) = match turns % 4 {
            0 => (u, v),
            1 => (v, s - 1 - u),
            2 => (s - 1 - u, s - 1 - v),
            _ => (s - 1 - v, u),
        };
        img.data()[ch * s * s + sv * s + su]
    })
}

#[test]
fn quarter_turn_views_match_index_rotation() {
    for id in 0..4 {
        let (rgb, mask) = SpriteInstance::generate(9, id).render_canonical(32);
        for turns in 1..4 {
            let (view, view_mask) = render_view(&rgb, &mask, 90.0 * turns as f64).unwrap();
            assert_eq!(view_mask, rotate_quarter_turns(&mask, turns));
            assert!(view.max_abs_diff(&rotate_quarter_turns(&rgb, turns)) < 1e-6);
        }
    }
}

#[test]
fn stored_half_turn_matches_index_rotation() {
    let (_dir, ds) = small_dataset(2, 5);
    for id in 0..5 {
        let flipped = rotate_quarter_turns(&ds.view(id, 0).unwrap(), 2);
        assert!(ds.view(id, 36).unwrap().max_abs_diff(&flipped) < 1e-6);
        assert_eq!(
            ds.mask(id, 36).unwrap(),
            rotate_quarter_turns(&ds.mask(id, 0).unwrap(), 2)
        );
    }
}

#[test]
fn background_is_white_and_foreground_present() {
    let (_dir, ds) = small_dataset(3, 5);
    for id in 0..5 {
        for bin in 0..72 {
            let (view, mask) = (ds.view(id, bin).unwrap(), ds.mask(id, bin).unwrap());
            let plane = 32 * 32;
            let fg = mask.data().iter().filter(|&&m| m == 1.0).count();
            assert!(fg > plane / 20, "instance {id} bin {bin}: {fg} foreground pixels");
            for p in 0..plane {
                let px: Vec<f64> = (0..3).map(|c| view.data()[c * plane + p]).collect();
                if mask.data()[p] == 0.0 {
                    assert_eq!(px, [1.0; 3]);
                } else {
                    assert!(px.iter().all(|&x| x < 1.0));
                }
            }
        }
    }
}

#[test]
fn deltas_are_uniform_and_close_the_vocabulary() {
    let (_dir, ds) = small_dataset(1, 5);
    let m = &ds.manifest;
    let vocab = delta_vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 10_000;
    let mut counts = BTreeMap::new();
    for _ in 0..n {
        let t = sample_tuple(m, Split::Train, 1, &mut rng).unwrap();
        let s = t.sources[0];
        assert!(vocab.contains(&s.delta));
        assert_eq!(decode_transform(&encode_transform(s.delta).unwrap()).unwrap(), s.delta);
        assert_eq!((s.bin as i32 * 5 + s.delta).rem_euclid(360), t.target_azimuth(m));
        *counts.entry(s.delta).or_insert(0usize) += 1;
    }
    let p = 1.0 / vocab.len() as f64;
    let (mean, sd) = (n as f64 * p, (n as f64 * p * (1.0 - p)).sqrt());
    assert_eq!(counts.len(), vocab.len());
    for (d, c) in counts {
        assert!(
            (c as f64 - mean).abs() <= 3.0 * sd,
            "delta {d}: {c} draws, expected {mean:.0} ± {:.0}",
            3.0 * sd
        );
    }
}

#[test]
fn multi_view_tuples_share_the_target() {
    let (_dir, ds) = small_dataset(1, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..2000 {
        let t = sample_tuple(&ds.manifest, Split::Test, 2, &mut rng).unwrap();
        assert_eq!(t.sources.len(), 2);
        for s in &t.sources {
            assert_eq!(
                (s.bin as i32 * 5 + s.delta).rem_euclid(360),
                t.target_azimuth(&ds.manifest)
            );
        }
    }
}

#[test]
fn splits_are_disjoint_and_pure() {
    let (_dir, ds) = small_dataset(8, 12);
    let m = &ds.manifest;
    let (train, test) = (m.instances_in(Split::Train), m.instances_in(Split::Test));
    assert!(train.iter().all(|i| !test.contains(i)));
    assert_eq!(train.len() + test.len(), 12);
    for e in &m.instances {
        assert_eq!(e.split, split_of(8, e.id));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for split in [Split::Train, Split::Test] {
        for _ in 0..500 {
            let t = sample_tuple(m, split, 1, &mut rng).unwrap();
            assert_eq!(split_of(8, t.instance), split);
        }
    }
}

#[test]
fn manifest_round_trips_and_rejects_bad_versions() {
    let (dir, ds) = small_dataset(0, 5);
    let text = fs::read_to_string(dir.path().join("manifest")).unwrap();
    assert_eq!(DatasetManifest::from_toml(&text).unwrap(), ds.manifest);
    let bad = text.replace("format_version = 1", "format_version = 9");
    assert!(DatasetManifest::from_toml(&bad).is_err());
}

#[test]
fn unsupported_sizes_and_counts_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    assert!(generate_dataset(0, 5, 48, dir.path()).is_err());
    assert!(generate_dataset(0, 4, 32, dir.path()).is_err());
}
