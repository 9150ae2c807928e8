use eigencam::cam::CamConfig;
use eigencam::fixtures::write_synthetic_dataset;
use eigencam::harness::{evaluate, evaluate_manifest, localize_feature_map, ActivationSource, EvalConfig, HarnessError};
use eigencam::io::{read_manifest, write_fmap, write_image, write_model};
use eigencam::localize::{BoundingBox, LocalizeError};
use eigencam::refnet::{make_toy_model, TOY_FEATURE_TAP};
use eigencam::tensor::{FeatureMap, RasterImage, Tensor};

#[test]
fn synthetic_dataset_scores_as_planted() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_synthetic_dataset(dir.path(), 30, 5).unwrap();
    let report = evaluate_manifest(&manifest, ActivationSource::RecordFmap, &EvalConfig::default()).unwrap();
    assert_eq!(report.aggregate.count, 30);
    // every third record has displaced ground truth
    assert_eq!(report.aggregate.hits, 20);
    assert_eq!(report.aggregate.error_rate, 1.0 - 20.0 / 30.0);
    assert_eq!(report.recomputed_error_rate(), report.aggregate.error_rate);
    for (i, r) in report.records.iter().enumerate() {
        assert_eq!(r.hit, i % 3 != 2, "record {i}");
        assert!(!r.fallback);
    }
}

#[test]
fn job_count_does_not_change_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_synthetic_dataset(dir.path(), 40, 6).unwrap();
    let run = |jobs| {
        let cfg = EvalConfig { jobs, ..EvalConfig::default() };
        evaluate_manifest(&manifest, ActivationSource::RecordFmap, &cfg).unwrap().to_json()
    };
    let one = run(1);
    for jobs in [2, 3, 8] {
        assert_eq!(run(jobs), one);
    }
}

#[test]
fn gating_counts_misclassified_records_as_misses() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_synthetic_dataset(dir.path(), 12, 7).unwrap();
    let cfg = EvalConfig { gate_on_classification: true, ..EvalConfig::default() };
    let report = evaluate_manifest(&manifest, ActivationSource::RecordFmap, &cfg).unwrap();
    let expected_hits = (0..12).filter(|i| i % 2 == 0 && i % 3 != 2).count();
    assert_eq!(report.aggregate.hits, expected_hits);
    assert!(report.aggregate.gated);
}

#[test]
fn gating_requires_flags() {
    let dir = tempfile::tempdir().unwrap();
    write_image(dir.path().join("a.pgm"), &RasterImage::new(4, 4, 1, vec![0; 16]).unwrap()).unwrap();
    let manifest = dir.path().join("m.jsonl");
    std::fs::write(&manifest, "{\"image\":\"a.pgm\",\"boxes\":[[0,0,1,1]]}\n").unwrap();
    let model = make_toy_model(0);
    let source = ActivationSource::Model { model: &model, tap: TOY_FEATURE_TAP };
    let cfg = EvalConfig { gate_on_classification: true, ..EvalConfig::default() };
    assert!(matches!(
        evaluate_manifest(&manifest, source, &cfg),
        Err(HarnessError::MissingClassificationFlag { line: 1 })
    ));
}

#[test]
fn bad_threshold_and_empty_manifest() {
    let cfg = EvalConfig { threshold_fraction: 0.7, ..EvalConfig::default() };
    assert!(matches!(
        evaluate(&[], ActivationSource::RecordFmap, &cfg),
        Err(HarnessError::Localize(LocalizeError::ThresholdOutOfRange(_)))
    ));
    assert!(matches!(
        evaluate(&[], ActivationSource::RecordFmap, &EvalConfig::default()),
        Err(HarnessError::Localize(LocalizeError::EmptyDataset))
    ));
}

#[test]
fn zero_activations_fall_back_to_full_image() {
    let dir = tempfile::tempdir().unwrap();
    write_image(dir.path().join("a.pgm"), &RasterImage::new(6, 8, 1, vec![9; 48]).unwrap()).unwrap();
    write_fmap(dir.path().join("a.fmap"), &Tensor::zeros(vec![2, 3, 4]).unwrap()).unwrap();
    let manifest = dir.path().join("m.jsonl");
    std::fs::write(&manifest, "{\"image\":\"a.pgm\",\"boxes\":[[0,0,7,5]],\"fmap\":\"a.fmap\"}\n").unwrap();
    let report = evaluate_manifest(&manifest, ActivationSource::RecordFmap, &EvalConfig::default()).unwrap();
    assert!(report.records[0].fallback);
    assert_eq!(report.records[0].predicted_box, BoundingBox::full(6, 8));
    assert_eq!(report.aggregate.hits, 1);
}

#[test]
fn model_source_runs_the_network() {
    let dir = tempfile::tempdir().unwrap();
    let model_dir = dir.path().join("model");
    std::fs::create_dir(&model_dir).unwrap();
    let model = make_toy_model(0);
    write_model(&model_dir, &model).unwrap();
    let pixels = (0..16 * 16 * 3).map(|i| (i * 13 % 256) as u8).collect();
    write_image(dir.path().join("a.ppm"), &RasterImage::new(16, 16, 3, pixels).unwrap()).unwrap();
    std::fs::write(dir.path().join("m.jsonl"), "{\"image\":\"a.ppm\",\"boxes\":[[2,2,12,12]]}\n").unwrap();
    let records = read_manifest(dir.path().join("m.jsonl")).unwrap();
    let source = ActivationSource::Model { model: &model, tap: TOY_FEATURE_TAP };
    let report = evaluate(&records, source, &EvalConfig::default()).unwrap();
    assert_eq!(report.records.len(), 1);
    assert!(report.records[0].predicted_box.fits(16, 16));
}

#[test]
fn box_outside_image_is_reported_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    write_image(dir.path().join("a.pgm"), &RasterImage::new(4, 4, 1, vec![0; 16]).unwrap()).unwrap();
    std::fs::write(
        dir.path().join("m.jsonl"),
        "{\"image\":\"a.pgm\",\"boxes\":[[0,0,1,1]]}\n{\"image\":\"a.pgm\",\"boxes\":[[0,0,4,1]]}\n",
    )
    .unwrap();
    let model = make_toy_model(0);
    let source = ActivationSource::Model { model: &model, tap: TOY_FEATURE_TAP };
    match evaluate_manifest(&dir.path().join("m.jsonl"), source, &EvalConfig::default()) {
        Err(HarnessError::Format { line: 2, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn localize_feature_map_uses_image_resolution() {
    let fm = FeatureMap::new(1, 2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let loc = localize_feature_map(&fm, 8, 8, &CamConfig::default(), 0.5).unwrap();
    assert_eq!(loc.cam.quantized.as_ref().unwrap().dims(), (8, 8));
    assert_eq!(loc.bbox.xmin, 0);
    assert_eq!(loc.bbox.ymin, 0);
    assert!(loc.bbox.xmax < 7 && loc.bbox.ymax < 7);
}
