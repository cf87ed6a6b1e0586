use std::fs;

use sladet_core::annotation::load_dataset;
use sladet_core::corpus::image_io::read_png;
use sladet_core::corpus::render::rgb_to_hsv;
use sladet_core::corpus::{generate_corpus, CorpusSpec, TEST_MANIFEST, TRAIN_MANIFEST};

fn spec(seed: u64) -> CorpusSpec {
    CorpusSpec {
        seed,
        n_train: 12,
        n_test: 6,
        width: 320,
        height: 256,
        radius_min: 18.0,
        radius_max: 26.0,
        cells_min: 3,
        cells_max: 6,
        ..CorpusSpec::default()
    }
}

#[test]
fn same_seed_gives_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_corpus(&spec(5), a.path()).unwrap();
    generate_corpus(&spec(5), b.path()).unwrap();
    for name in [
        TRAIN_MANIFEST,
        TEST_MANIFEST,
        "train/train_0003.png",
        "test/test_0005.png",
    ] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
    let c = tempfile::tempdir().unwrap();
    generate_corpus(&spec(6), c.path()).unwrap();
    assert_ne!(
        fs::read(a.path().join(TRAIN_MANIFEST)).unwrap(),
        fs::read(c.path().join(TRAIN_MANIFEST)).unwrap()
    );
}

#[test]
fn manifests_load_back_with_their_regions() {
    let dir = tempfile::tempdir().unwrap();
    let out = generate_corpus(&spec(1), dir.path()).unwrap();
    let train = load_dataset(dir.path().join(TRAIN_MANIFEST)).unwrap();
    let test = load_dataset(dir.path().join(TEST_MANIFEST)).unwrap();
    assert_eq!(train.records, out.train.records);
    assert_eq!(test.records, out.test.records);
    assert_eq!(train.classes.len(), 6);

    let image_area = 320.0 * 256.0;
    let mut fractions = Vec::new();
    for r in &train.records {
        let region = r.region.expect("train images are sparse");
        fractions.push(region.rect.area() / image_area);
        assert!(r.annotations.iter().all(|a| region.contains_center(&a.bbox)));
    }
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    assert!((mean - 0.2).abs() < 1e-9, "mean region fraction {mean}");
    assert!(test
        .records
        .iter()
        .all(|r| r.is_fully_annotated() && !r.annotations.is_empty()));
}

/// Circular mean hue of the saturated pixels inside a box.
fn mean_hue(img: &sladet_core::corpus::image_io::RgbImage, b: &sladet_core::annotation::BoundingBox) -> Option<f64> {
    let (mut sx, mut sy) = (0.0, 0.0);
    for y in b.y.ceil() as u32..b.bottom().floor() as u32 {
        for x in b.x.ceil() as u32..b.right().floor() as u32 {
            let (h, s, _) = rgb_to_hsv(img.get(x, y).map(f64::from));
            if s > 0.6 {
                sx += h.to_radians().cos();
                sy += h.to_radians().sin();
            }
        }
    }
    (sx != 0.0 || sy != 0.0).then(|| sy.atan2(sx).to_degrees().rem_euclid(360.0))
}

fn angle(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

#[test]
fn class_is_recoverable_from_hue() {
    let dir = tempfile::tempdir().unwrap();
    let out = generate_corpus(
        &CorpusSpec {
            n_train: 20,
            n_test: 20,
            ..spec(2)
        },
        dir.path(),
    )
    .unwrap();
    let hues = |ds: &sladet_core::annotation::Dataset| -> Vec<(f64, usize)> {
        ds.records
            .iter()
            .flat_map(|r| {
                let img = read_png(&ds.image_path(r)).unwrap();
                r.annotations
                    .iter()
                    .filter_map(move |a| mean_hue(&img, &a.bbox).map(|h| (h, a.cell_class)))
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    // centroids fitted on the test split, scored on the train split's kept annotations
    let fit = hues(&out.test);
    let centroids: Vec<f64> = (0..6)
        .map(|c| {
            let (sx, sy) = fit.iter().filter(|(_, k)| *k == c).fold((0.0, 0.0), |(x, y), (h, _)| {
                (x + h.to_radians().cos(), y + h.to_radians().sin())
            });
            sy.atan2(sx).to_degrees().rem_euclid(360.0)
        })
        .collect();
    let scored = hues(&out.train);
    assert!(scored.len() > 10);
    let correct = scored
        .iter()
        .filter(|(h, c)| {
            let best = (0..6)
                .min_by(|&i, &j| angle(*h, centroids[i]).total_cmp(&angle(*h, centroids[j])))
                .unwrap();
            best == *c
        })
        .count();
    assert!(
        correct as f64 >= 0.95 * scored.len() as f64,
        "{correct} / {}",
        scored.len()
    );
}

#[test]
fn invalid_region_fraction_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let err = generate_corpus(
        &CorpusSpec {
            region_fraction: 1.5,
            ..spec(0)
        },
        dir.path(),
    )
    .unwrap_err();
    assert!(matches!(err, sladet_core::Error::Config { .. }));
}
