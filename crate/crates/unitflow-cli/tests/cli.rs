//! CLI contract tests: exit codes, help/version, error classes, and the
//! spec'd subcommand behaviors that don't need a trained model.

mod common;

use common::{expect_ok, make_corpus, run_in};

#[test]
fn version_and_help_exit_zero_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["--version"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("unitflow"));

    for sub in [
        "train-codebook",
        "extract-units",
        "build-dataset",
        "train-t2u",
        "train",
        "infer",
        "synth",
        "eval-format",
    ] {
        let out = run_in(dir.path(), &[sub, "--help"]);
        assert!(out.status.success(), "{sub} --help failed");
        let out = run_in(dir.path(), &[sub, "--version"]);
        assert!(out.status.success(), "{sub} --version failed");
    }
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run_in(dir.path(), &["train-codebook", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn data_errors_exit_two_with_json_line() {
    let dir = tempfile::tempdir().unwrap();
    // missing manifest file is an io error (internal class, exit 3)
    let out = run_in(
        dir.path(),
        &["train-codebook", "--manifest", "missing.tsv", "--out", "cb.bin"],
    );
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap();
    let parsed: serde_json::Value = serde_json::from_str(line).expect("stderr is one JSON line");
    assert!(parsed["error"].is_string());

    // malformed manifest is a data error (exit 2)
    std::fs::write(dir.path().join("bad.tsv"), "no tab here\n").unwrap();
    let out = run_in(
        dir.path(),
        &["train-codebook", "--manifest", "bad.tsv", "--out", "cb.bin"],
    );
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let parsed: serde_json::Value =
        serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(parsed["class"], "data");

    // adjacent duplicate units are rejected by synth
    std::fs::write(dir.path().join("cb.bin"), b"UFCB").unwrap();
    let out = run_in(
        dir.path(),
        &["synth", "--units", "3 3 4", "--codebook", "cb.bin", "--out", "x.wav"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn codebook_and_units_follow_the_spec_examples() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_corpus(dir.path());
    let manifest = manifest.to_str().unwrap();

    // train-codebook --k 100 --seed 7 -> codebook file with K=100
    expect_ok(
        dir.path(),
        &[
            "--seed", "7", "train-codebook", "--manifest", manifest, "--k", "100", "--out",
            "cb.bin",
        ],
    );
    let cb = unitflow::codec::load_codebook(dir.path().join("cb.bin")).unwrap();
    assert_eq!(cb.k, 100);

    expect_ok(
        dir.path(),
        &[
            "extract-units", "--manifest", manifest, "--codebook", "cb.bin", "--out",
            "units.txt",
        ],
    );
    let (seqs, k) = unitflow::codec::load_units(dir.path().join("units.txt")).unwrap();
    assert_eq!(k, 100);
    assert_eq!(seqs.len(), 20);
    for s in &seqs {
        assert!(s.reduced);
        s.validate(100).unwrap();
    }

    // build-dataset --p 1.0 -> every record is an ASR sample
    expect_ok(
        dir.path(),
        &[
            "build-dataset", "--kind", "cross-modal", "--manifest", manifest, "--units",
            "units.txt", "--p", "1.0", "--out-records", "r.jsonl", "--out-packed", "p.jsonl",
        ],
    );
    let records: Vec<unitflow::dataset::CrossModalRecord> =
        unitflow::dataset::read_jsonl(dir.path().join("r.jsonl")).unwrap();
    assert_eq!(records.len(), 20);
    assert!(records
        .iter()
        .all(|r| matches!(r.task, unitflow::dataset::Task::Asr)));

    // and --p 0.0 -> every record is TTS
    expect_ok(
        dir.path(),
        &[
            "build-dataset", "--kind", "cross-modal", "--manifest", manifest, "--units",
            "units.txt", "--p", "0.0", "--out-records", "r0.jsonl", "--out-packed", "p0.jsonl",
        ],
    );
    let records: Vec<unitflow::dataset::CrossModalRecord> =
        unitflow::dataset::read_jsonl(dir.path().join("r0.jsonl")).unwrap();
    assert!(records
        .iter()
        .all(|r| matches!(r.task, unitflow::dataset::Task::Tts)));

    // synth from the extracted units produces a playable wav
    expect_ok(
        dir.path(),
        &[
            "synth", "--units-file", "units.txt", "--line", "3", "--codebook", "cb.bin",
            "--out", "s.wav",
        ],
    );
    let w = unitflow::audio::load_wav(dir.path().join("s.wav")).unwrap();
    assert_eq!(w.sample_rate, 16000);
    assert!(!w.samples.is_empty());
}

#[test]
fn worker_count_does_not_change_training_results() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_corpus(dir.path());
    let manifest = manifest.to_str().unwrap();
    expect_ok(
        dir.path(),
        &["train-codebook", "--manifest", manifest, "--k", "8", "--out", "cb.bin"],
    );
    expect_ok(
        dir.path(),
        &["extract-units", "--manifest", manifest, "--codebook", "cb.bin", "--out", "u.txt"],
    );
    for (workers, out) in [("1", "w1.uflm"), ("2", "w2.uflm")] {
        expect_ok(
            dir.path(),
            &[
                "--seed", "3", "--workers", workers, "train", "--stage", "1", "--data",
                "u.txt", "--out", out, "--steps", "40", "--warmup-steps", "4",
                "--batch-size", "8", "--max-len", "32",
            ],
        );
    }
    let a = std::fs::read(dir.path().join("w1.uflm")).unwrap();
    let b = std::fs::read(dir.path().join("w2.uflm")).unwrap();
    assert_eq!(a, b, "checkpoints differ across worker counts");
}

#[test]
fn config_file_flags_and_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"not_a_key": 1}"#).unwrap();
    let out = run_in(
        dir.path(),
        &[
            "--config", "bad.json", "train-codebook", "--manifest", "m.tsv", "--out", "cb.bin",
        ],
    );
    assert_eq!(out.status.code(), Some(2), "unknown config keys rejected");

    // flag overrides file value: file k=100 but --k 8 wins
    let manifest = make_corpus(dir.path());
    std::fs::write(
        dir.path().join("cfg.json"),
        r#"{"codebook": {"k": 100, "max_iters": 30}}"#,
    )
    .unwrap();
    expect_ok(
        dir.path(),
        &[
            "--config", "cfg.json", "train-codebook", "--manifest",
            manifest.to_str().unwrap(), "--k", "8", "--out", "cb8.bin",
        ],
    );
    let cb = unitflow::codec::load_codebook(dir.path().join("cb8.bin")).unwrap();
    assert_eq!(cb.k, 8);
}
