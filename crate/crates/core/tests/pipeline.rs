// End-to-end pipeline checks: rerun determinism, artifact round trips,
// corruption handling, log integrity, and pinned values for the seeded
// components that every saved artifact depends on.

mod common;

use std::fs;
use std::path::Path;

use genshift::directions::{
    read_direction_file, write_direction_file, DirectionVector, DomainReference,
};
use genshift::encoders::{build_semantic_encoder, EncoderSpec, TOY_SEMANTIC};
use genshift::error::Error;
use genshift::generators::{load_checkpoint, save_checkpoint, GeneratorHandle};
use genshift::metrics::{evaluate, read_report, write_report};
use genshift::trainer::{
    parse_log_record, read_training_log, run, AdaptationConfig, RunLayout, SourceSpec,
};
use rand::Rng;

fn short_config(output_dir: &Path) -> AdaptationConfig {
    let mut config = AdaptationConfig::new(
        SourceSpec::Toy { seed: 11 },
        vec![DomainReference::text("charcoal sketch", 1.0)],
        output_dir.to_path_buf(),
    );
    config.iterations = 12;
    config.batch_size = 2;
    config
}

#[test]
fn adaptation_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config_a = short_config(&dir.path().join("a"));
    let config_b = short_config(&dir.path().join("b"));
    let outcome_a = run(&config_a).expect("first run completes");
    let outcome_b = run(&config_b).expect("second run completes");

    let checkpoint_a = fs::read(&outcome_a.checkpoint_path).unwrap();
    let checkpoint_b = fs::read(&outcome_b.checkpoint_path).unwrap();
    assert_eq!(checkpoint_a, checkpoint_b, "reruns must write identical checkpoints");

    let log_a = fs::read(&outcome_a.log_path).unwrap();
    let log_b = fs::read(&outcome_b.log_path).unwrap();
    assert_eq!(log_a, log_b, "reruns must write identical training logs");

    let report_a = evaluate(&config_a, &outcome_a.checkpoint_path, 8).unwrap();
    let report_b = evaluate(&config_b, &outcome_b.checkpoint_path, 8).unwrap();
    let path_a = dir.path().join("a.report");
    let path_b = dir.path().join("b.report");
    write_report(&report_a, &path_a).unwrap();
    write_report(&report_b, &path_b).unwrap();
    assert_eq!(
        fs::read(&path_a).unwrap(),
        fs::read(&path_b).unwrap(),
        "reruns must write identical metric reports"
    );
}

#[test]
fn run_writes_the_fixed_artifact_layout() {
    let dir = tempfile::tempdir().unwrap();
    let config = short_config(dir.path());
    let outcome = run(&config).expect("run completes");
    let layout = RunLayout::new(dir.path());
    assert_eq!(outcome.checkpoint_path, layout.checkpoint_path);
    assert_eq!(outcome.log_path, layout.log_path);
    assert!(layout.checkpoint_path.exists(), "checkpoint file missing");
    assert!(layout.log_path.exists(), "training log missing");
}

#[test]
fn training_log_round_trips_and_reports_completion() {
    let dir = tempfile::tempdir().unwrap();
    let config = short_config(dir.path());
    let outcome = run(&config).expect("run completes");

    let log = read_training_log(&outcome.log_path).expect("log parses");
    assert!(log.completed, "a finished run must end with its completion marker");
    assert_eq!(log.records.len(), config.iterations);
    for (i, record) in log.records.iter().enumerate() {
        assert_eq!(record.iteration, i + 1, "iterations must be contiguous from one");
        assert!(record.loss_direct.is_finite() && record.loss_css.is_finite());
        let expected = record.loss_direct + config.lambda_css * record.loss_css;
        assert!(
            (record.loss_overall - expected).abs() <= 1e-9,
            "overall loss must be the weighted sum at iteration {}: {} vs {}",
            record.iteration,
            record.loss_overall,
            expected
        );
        assert!(
            (-1.0..=1.0).contains(&record.sample_shift_cosine),
            "cosine out of range at iteration {}",
            record.iteration
        );
    }

    // Records survive a format/parse round trip exactly: the writer uses
    // shortest-round-trip float formatting.
    for line in fs::read_to_string(&outcome.log_path).unwrap().lines() {
        if line.starts_with("status=") {
            continue;
        }
        let record = parse_log_record(line).expect("log line parses");
        assert_eq!(genshift::trainer::format_log_record(&record), line);
    }
}

#[test]
fn checkpoints_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("source.uhgc");
    let source = GeneratorHandle::toy_source(7);
    save_checkpoint(&source, &path).unwrap();

    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.architecture_id(), source.architecture_id());
    assert!(!loaded.is_trainable(), "loaded checkpoints start frozen");
    assert_eq!(
        loaded.parameters().len(),
        source.parameters().len(),
        "parameter count changed through the round trip"
    );
    for (a, b) in loaded.parameters().iter().zip(source.parameters()) {
        assert_eq!(a.to_bits(), b.to_bits(), "parameter bits changed through the round trip");
    }

    let rewritten = dir.path().join("rewritten.uhgc");
    save_checkpoint(&loaded, &rewritten).unwrap();
    assert_eq!(
        fs::read(&path).unwrap(),
        fs::read(&rewritten).unwrap(),
        "checkpoint files must be byte-stable across load/save"
    );
}

#[test]
fn direction_files_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("shifts.uhdv");
    let mut rng = common::test_rng(0xD1F);
    // The payload is stored in float32, so feed it float32-representable
    // values and expect exact bits back.
    let directions: Vec<DirectionVector> = (0..3)
        .map(|_| {
            let values: Vec<f64> =
                (0..16).map(|_| rng.gen_range(-2.0f64..2.0) as f32 as f64).collect();
            DirectionVector::new(values).unwrap()
        })
        .collect();
    write_direction_file(&path, &directions).unwrap();

    let loaded = read_direction_file(&path).unwrap();
    assert_eq!(loaded.len(), directions.len());
    for (a, b) in loaded.iter().zip(&directions) {
        assert_eq!(a.dim(), b.dim());
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert_eq!(x.to_bits(), y.to_bits(), "component bits changed through the round trip");
        }
    }

    let rewritten = dir.path().join("rewritten.uhdv");
    write_direction_file(&rewritten, &loaded).unwrap();
    assert_eq!(
        fs::read(&path).unwrap(),
        fs::read(&rewritten).unwrap(),
        "direction files must be byte-stable across read/write"
    );
}

#[test]
fn corrupted_checkpoints_raise_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("source.uhgc");
    save_checkpoint(&GeneratorHandle::toy_source(7), &path).unwrap();
    let good = fs::read(&path).unwrap();

    let cases: Vec<(&str, Vec<u8>)> = vec![
        ("truncated header", good[..8].to_vec()),
        ("truncated payload", good[..good.len() / 2].to_vec()),
        ("bad magic", {
            let mut bytes = good.clone();
            bytes[0] = b'X';
            bytes
        }),
        ("flipped payload byte", {
            let mut bytes = good.clone();
            let middle = bytes.len() / 2;
            bytes[middle] ^= 0xFF;
            bytes
        }),
        ("trailing byte", {
            let mut bytes = good.clone();
            bytes.push(0);
            bytes
        }),
    ];
    for (name, bytes) in cases {
        let corrupt = dir.path().join("corrupt.uhgc");
        fs::write(&corrupt, bytes).unwrap();
        match load_checkpoint(&corrupt) {
            Err(Error::Format { format, .. }) => assert_eq!(format, "UHGC"),
            other => panic!("{name}: expected a format error, got {other:?}"),
        }
    }

    let mut versioned = good.clone();
    versioned[4] = 99;
    let corrupt = dir.path().join("versioned.uhgc");
    fs::write(&corrupt, versioned).unwrap();
    match load_checkpoint(&corrupt) {
        Err(Error::UnsupportedVersion { format, found, .. }) => {
            assert_eq!(format, "UHGC");
            assert_eq!(found, 99);
        }
        other => panic!("expected an unsupported-version error, got {other:?}"),
    }
}

#[test]
fn corrupted_direction_files_raise_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("shifts.uhdv");
    let direction = DirectionVector::new(vec![0.5, -0.25, 1.0]).unwrap();
    write_direction_file(&path, &[direction]).unwrap();
    let good = fs::read(&path).unwrap();

    let mut zero_dim = good[..16].to_vec();
    zero_dim[8..12].copy_from_slice(&0u32.to_le_bytes());
    let mut non_finite = good.clone();
    non_finite[16..20].copy_from_slice(&f32::NAN.to_le_bytes());

    let cases: Vec<(&str, Vec<u8>)> = vec![
        ("short header", good[..10].to_vec()),
        ("bad magic", {
            let mut bytes = good.clone();
            bytes[0] = b'X';
            bytes
        }),
        ("zero dimension", zero_dim),
        ("truncated payload", good[..good.len() - 2].to_vec()),
        ("trailing byte", {
            let mut bytes = good.clone();
            bytes.push(0);
            bytes
        }),
        ("non-finite component", non_finite),
    ];
    for (name, bytes) in cases {
        let corrupt = dir.path().join("corrupt.uhdv");
        fs::write(&corrupt, bytes).unwrap();
        match read_direction_file(&corrupt) {
            Err(Error::Format { format, .. }) => assert_eq!(format, "UHDV"),
            other => panic!("{name}: expected a format error, got {other:?}"),
        }
    }

    let mut versioned = good.clone();
    versioned[4..8].copy_from_slice(&7u32.to_le_bytes());
    let corrupt = dir.path().join("versioned.uhdv");
    fs::write(&corrupt, versioned).unwrap();
    match read_direction_file(&corrupt) {
        Err(Error::UnsupportedVersion { format, found, .. }) => {
            assert_eq!(format, "UHDV");
            assert_eq!(found, 7);
        }
        other => panic!("expected an unsupported-version error, got {other:?}"),
    }
}

#[test]
fn metric_reports_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let config = short_config(dir.path());
    let outcome = run(&config).expect("run completes");
    let report = evaluate(&config, &outcome.checkpoint_path, 8).expect("evaluation succeeds");
    assert_eq!(report.config_fingerprint, config.fingerprint());
    assert_eq!(report.counts.generated, 8);
    assert_eq!(report.counts.text_references, 1);
    assert_eq!(report.counts.image_references, 0);
    assert!(report.cs_t.is_some(), "a text domain must produce a text-side score");
    assert!(report.cs_i.is_none(), "no image references were given");
    assert!(report.scs.is_some(), "the structural score is always available");

    let path = dir.path().join("metrics.report");
    write_report(&report, &path).unwrap();
    let loaded = read_report(&path).expect("report parses");
    assert_eq!(loaded, report, "reports must survive a write/read round trip unchanged");
}

// The three pins below freeze the seeded initialization contract. Changing
// any of them silently invalidates every previously saved checkpoint, log,
// and report, so a deliberate change must bump the checkpoint version.

#[test]
fn seeded_source_generator_is_pinned() {
    assert_eq!(
        GeneratorHandle::toy_source(11).parameter_hash(),
        "8fb43e11ffcba84449f9eb04645911cbc3eb708c9fd89156e96881ae2ef4cbe7",
        "seed 11 source parameters drifted"
    );
}

#[test]
fn seeded_semantic_embedding_is_pinned() {
    let encoder = build_semantic_encoder(&EncoderSpec::toy(TOY_SEMANTIC, 0)).unwrap();
    let embedding = encoder.embed_text("photo").unwrap();
    assert_eq!(embedding.dim(), 64);
    assert!(
        (embedding.as_slice()[0] - 0.05727112855370781).abs() <= 1e-12,
        "seed 0 prompt embedding drifted: {}",
        embedding.as_slice()[0]
    );
}

#[test]
fn first_training_losses_are_pinned() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = short_config(dir.path());
    config.iterations = 3;
    let outcome = run(&config).expect("run completes");
    let records = outcome.records;
    assert!(
        (records[0].loss_direct - 1.0).abs() <= 1e-12,
        "the first step sees a zero sample shift, so its alignment loss is exactly one: {}",
        records[0].loss_direct
    );
    assert!(
        (records[0].loss_css - 2.595520779664631).abs() <= 1e-9,
        "first structure loss drifted: {}",
        records[0].loss_css
    );
    assert!(
        (records[1].loss_direct - 0.999996721500821).abs() <= 1e-9,
        "second alignment loss drifted: {}",
        records[1].loss_direct
    );
}
