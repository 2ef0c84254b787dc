mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tinydet::eval::{evaluate, load_coco, load_detections, save_detections, BoxAnnotation, CocoAnnotation, CocoDataset, CocoImage, Detection};
use tinydet::{Bbox, Error};

use common::{as_oracle, categories, oracle_evaluate, random_instance, random_large_instance};

#[test]
fn random_small_instances_match_oracle() {
    let classes = categories(2);
    let mut rng = ChaCha8Rng::seed_from_u64(901);
    for _ in 0..5000 {
        let (d, g) = random_instance(&mut rng, 6, 4);
        assert_eq!(as_oracle(&evaluate(&d, &g, &classes).unwrap()), oracle_evaluate(&d, &g, &classes), "{d:?} {g:?}");
    }
}

#[test]
fn large_instances_match_oracle() {
    let classes = categories(3);
    let mut rng = ChaCha8Rng::seed_from_u64(902);
    for _ in 0..20 {
        let (d, g) = random_large_instance(&mut rng);
        assert_eq!(as_oracle(&evaluate(&d, &g, &classes).unwrap()), oracle_evaluate(&d, &g, &classes));
    }
}

#[test]
fn missing_ground_truth_is_an_error() {
    let r = evaluate(&[], &[], &categories(1));
    assert!(matches!(r, Err(Error::Domain(_))));
}

#[test]
fn no_detections_scores_zero() {
    let gt = BoxAnnotation::new(1, 1, Bbox::new(0.0, 0.0, 8.0, 8.0));
    let r = evaluate(&[], &[gt], &categories(1)).unwrap();
    assert_eq!((r.map_50, r.map_50_95, r.tp, r.fp, r.fn_), (0.0, 0.0, 0, 0, 1));
}

fn ranked(rng_seed: u64) -> (Vec<Detection>, Vec<BoxAnnotation>) {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    random_large_instance(&mut rng)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn strict_threshold_never_beats_loose(seed in 0u64..10_000) {
        let (d, g) = ranked(seed);
        let r = evaluate(&d, &g, &categories(3)).unwrap();
        prop_assert!(r.map_50 >= r.map_50_95);
        prop_assert!((0.0..=1.0).contains(&r.map_50_95));
    }

    #[test]
    fn monotone_rescoring_changes_nothing(seed in 0u64..10_000, gain in 0.1f64..10.0) {
        let (d, g) = ranked(seed);
        let rescored: Vec<Detection> = d.iter().map(|x| Detection { score: (x.score * gain).exp(), ..*x }).collect();
        let a = evaluate(&d, &g, &categories(3)).unwrap();
        let b = evaluate(&rescored, &g, &categories(3)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn conservation(seed in 0u64..10_000) {
        let (d, g) = ranked(seed);
        let r = evaluate(&d, &g, &categories(3)).unwrap();
        prop_assert_eq!(r.tp + r.fn_, g.len());
        prop_assert_eq!(r.tp + r.fp, d.len());
    }
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let coco = CocoDataset {
        images: vec![CocoImage { id: 7, file_name: "a.ppm".into(), width: 64, height: 64 }],
        annotations: vec![CocoAnnotation { id: 1, image_id: 7, category_id: 1, bbox: [2.0, 3.0, 10.0, 12.0], area: None, iscrowd: 0 }],
        categories: categories(1),
    };
    let gt_path = dir.path().join("gt.json");
    coco.save(&gt_path).unwrap();
    assert_eq!(load_coco(&gt_path).unwrap(), coco);

    let dets = vec![Detection { image_id: 7, category_id: 1, bbox: Bbox::new(2.0, 3.0, 12.0, 15.0), score: 0.75 }];
    let det_path = dir.path().join("dets.json");
    save_detections(&det_path, &dets).unwrap();
    let back = load_detections(&det_path).unwrap();
    assert_eq!(back, dets);
    let r = evaluate(&back, &load_coco(&gt_path).unwrap().box_annotations(), &coco.categories).unwrap();
    assert_eq!(r.map_50_95, 1.0);
}

#[test]
fn malformed_files_are_parse_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, r#"{"images": [], "categories": []}"#).unwrap();
    assert!(matches!(load_coco(&p), Err(Error::Parse { .. })));
    assert!(matches!(load_coco(dir.path().join("missing.json")), Err(Error::Io { .. })));
}
