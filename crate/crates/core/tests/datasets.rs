use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use colorsense::episodes::{sample_episode, DataSource, Dataset, EpisodeSpec, Layout};
use colorsense::Error;

/// Solid-color image per file; class `c` image `i` has red = 40c + i and green = 7i.
fn write_dataset(root: &Path, classes: usize, per_class: usize) {
    for c in 0..classes {
        let dir = root.join(format!("class_{c:02}"));
        fs::create_dir_all(&dir).unwrap();
        for i in 0..per_class {
            let px = image::Rgb([(40 * c + i) as u8, (7 * i) as u8, 200]);
            // Odd indices are lossy JPEGs.
            let ext = if i % 2 == 0 { "png" } else { "jpg" };
            image::RgbImage::from_pixel(12, 10, px)
                .save(dir.join(format!("img_{i}.{ext}")))
                .unwrap();
        }
    }
}

fn spec(k: usize, n: usize, q: usize) -> EpisodeSpec {
    EpisodeSpec::new(k, n, q).with_image_size(8, 8)
}

#[test]
fn loads_sorted_classes() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 4, 3);
    fs::write(dir.path().join("README.txt"), "not a class").unwrap();
    let ds = Dataset::load(dir.path(), Layout::ClassFolders).unwrap();
    assert_eq!(ds.class_names(), vec!["class_00", "class_01", "class_02", "class_03"]);
    assert_eq!(ds.class_counts(), vec![3; 4]);
}

#[test]
fn episodes_are_class_major_and_resized() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 5, 6);
    let ds = Dataset::load(dir.path(), Layout::ClassFolders).unwrap();
    let s = spec(3, 2, 2);
    let ep = sample_episode(&ds, &s, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(ep.support_labels, vec![0, 0, 1, 1, 2, 2]);
    assert_eq!(ep.query_labels, vec![0, 0, 1, 1, 2, 2]);
    assert!(ep.images().all(|img| img.shape() == [8, 8, 3]));
    let mut seen = ep.sources.clone();
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), s.total());
    // Lossless images keep their exact color through resizing.
    for (img, &(c, i)) in ep.support_images.iter().chain(&ep.query_images).zip(&ep.sources) {
        if i % 2 == 0 {
            assert_eq!(img[[3, 3, 0]], (40 * c + i) as u8);
            assert_eq!(img[[3, 3, 1]], (7 * i) as u8);
        }
    }
    // Labels are consistent with source classes.
    let labels = ep.labels();
    for (a, b) in labels.iter().zip(&ep.sources) {
        for (x, y) in labels.iter().zip(&ep.sources) {
            assert_eq!(a == x, b.0 == y.0);
        }
    }
}

#[test]
fn sampling_is_exchangeable() {
    let dir = tempfile::tempdir().unwrap();
    let (classes, per_class) = (6, 5);
    write_dataset(dir.path(), classes, per_class);
    let source = DataSource::Folder(Arc::new(Dataset::load(dir.path(), Layout::ClassFolders).unwrap()));
    let s = spec(2, 1, 1);
    let draws = 900;
    let mut class_hits = vec![0usize; classes];
    let mut image_hits = vec![vec![0usize; per_class]; classes];
    for i in 0..draws {
        let ep = source.nth_episode(&s, 5, 1, i).unwrap();
        let mut chosen: Vec<usize> = ep.sources.iter().map(|s| s.0).collect();
        chosen.sort();
        chosen.dedup();
        for c in chosen {
            class_hits[c] += 1;
        }
        for &(c, img) in &ep.sources {
            image_hits[c][img] += 1;
        }
    }
    let within = |hits: usize, trials: usize, p: f64| {
        let se = (p * (1.0 - p) / trials as f64).sqrt();
        (hits as f64 / trials as f64 - p).abs() <= 3.0 * se
    };
    let p_class = s.ways as f64 / classes as f64;
    for &h in &class_hits {
        assert!(within(h, draws as usize, p_class), "class hits {class_hits:?}");
    }
    let p_image = (s.shots + s.queries) as f64 / per_class as f64;
    for (c, row) in image_hits.iter().enumerate() {
        for &h in row {
            assert!(within(h, class_hits[c], p_image), "image hits {row:?} of {}", class_hits[c]);
        }
    }
}

#[test]
fn same_index_same_episode() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 4, 4);
    let source = DataSource::Folder(Arc::new(Dataset::load(dir.path(), Layout::ClassFolders).unwrap()));
    let s = spec(3, 1, 2);
    let a = source.nth_episode(&s, 9, 1, 17).unwrap();
    let b = source.nth_episode(&s, 9, 1, 17).unwrap();
    assert_eq!(a.sources, b.sources);
    assert_eq!(a.support_images, b.support_images);
}

#[test]
fn empty_class_folder_is_an_ingest_error() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 2, 2);
    fs::create_dir(dir.path().join("empty")).unwrap();
    match Dataset::load(dir.path(), Layout::ClassFolders) {
        Err(Error::Ingest { path, .. }) => assert!(path.ends_with("empty")),
        other => panic!("expected ingest error, got {other:?}"),
    }
}

#[test]
fn undecodable_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 2, 2);
    let bad = dir.path().join("class_01").join("broken.png");
    fs::write(&bad, b"definitely not a png").unwrap();
    match Dataset::load(dir.path(), Layout::ClassFolders) {
        Err(Error::Ingest { path, .. }) => assert_eq!(path, bad),
        other => panic!("expected ingest error, got {other:?}"),
    }
}

#[test]
fn missing_root_and_no_classes() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        Dataset::load(dir.path().join("nope"), Layout::ClassFolders),
        Err(Error::Ingest { .. })
    ));
    assert!(matches!(Dataset::load(dir.path(), Layout::ClassFolders), Err(Error::Ingest { .. })));
}

#[test]
fn too_few_classes_or_images() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 3, 2);
    let ds = Dataset::load(dir.path(), Layout::ClassFolders).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(sample_episode(&ds, &spec(4, 1, 1), &mut rng), Err(Error::Sampling(_))));
    assert!(matches!(sample_episode(&ds, &spec(2, 1, 2), &mut rng), Err(Error::Sampling(_))));
    assert!(sample_episode(&ds, &spec(3, 1, 1), &mut rng).is_ok());
}
