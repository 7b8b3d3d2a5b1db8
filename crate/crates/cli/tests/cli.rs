mod common;

use common::{dermo, write_cases, CaseSpec};
use serde_json::Value;

fn read_json(path: &std::path::Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn input_arg(dir: &tempfile::TempDir) -> &str {
    dir.path().to_str().unwrap()
}

#[test]
fn empty_case_list_succeeds() {
    let input = tempfile::tempdir().unwrap();
    let work = tempfile::tempdir().unwrap();
    write_cases(input.path(), &[]);
    let out = dermo(&["augment", "--input", input_arg(&input)], work.path(), &[]);
    assert_eq!(out.status.code(), Some(0));
    let manifest = read_json(&work.path().join("manifest.json"));
    assert_eq!(manifest["cases"].as_array().unwrap().len(), 0);
}

#[test]
fn one_bad_case_does_not_abort_the_batch() {
    let input = tempfile::tempdir().unwrap();
    let work = tempfile::tempdir().unwrap();
    write_cases(
        input.path(),
        &[
            CaseSpec::good("ok", 120, 100),
            CaseSpec {
                mask_size: Some((60, 50)),
                ..CaseSpec::good("mismatch", 120, 100)
            },
        ],
    );
    for stage in [&["augment", "--input", input_arg(&input)][..], &["structures"], &["diagnose"]] {
        let out = dermo(stage, work.path(), &[]);
        assert_eq!(out.status.code(), Some(0), "{stage:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let manifest = read_json(&work.path().join("manifest.json"));
    let cases = manifest["cases"].as_array().unwrap();
    assert_eq!(cases[0]["status"], "ok");
    assert_eq!(cases[0]["views"].as_array().unwrap().len(), 24);
    assert_eq!(cases[1]["status"], "failed");
    assert!(cases[1]["error"].as_str().unwrap().contains("mask"));
    let diagnoses = read_json(&work.path().join("diagnoses.json"));
    let fused: Vec<f64> = diagnoses["cases"][0]["fused"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!((fused.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert_eq!(diagnoses["cases"][1]["status"], "failed");
}

#[test]
fn all_cases_failing_exits_2() {
    let input = tempfile::tempdir().unwrap();
    let work = tempfile::tempdir().unwrap();
    write_cases(
        input.path(),
        &[CaseSpec {
            mask_size: Some((10, 10)),
            ..CaseSpec::good("bad", 80, 60)
        }],
    );
    let out = dermo(&["augment", "--input", input_arg(&input)], work.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn configuration_errors_exit_3() {
    let input = tempfile::tempdir().unwrap();
    let work = tempfile::tempdir().unwrap();
    write_cases(input.path(), &[CaseSpec::good("a", 80, 60)]);
    let config = input.path().join("config.json");

    std::fs::write(&config, r#"{"gamma": 20.0, "unknown": 1}"#).unwrap();
    let bad_field = dermo(&["augment", "--config", config.to_str().unwrap(), "--input", input_arg(&input)], work.path(), &[]);
    assert_eq!(bad_field.status.code(), Some(3));

    std::fs::write(&config, r#"{"polar": {"rings": 3, "angles": 5}}"#).unwrap();
    let odd_angles = dermo(&["augment", "--config", config.to_str().unwrap(), "--input", input_arg(&input)], work.path(), &[]);
    assert_eq!(odd_angles.status.code(), Some(3));

    let no_input = dermo(&["augment"], work.path(), &[]);
    assert_eq!(no_input.status.code(), Some(3));

    let no_manifest = dermo(&["structures"], work.path(), &[]);
    assert_eq!(no_manifest.status.code(), Some(3));
}

#[test]
fn case_filter_selects_cases() {
    let input = tempfile::tempdir().unwrap();
    let work = tempfile::tempdir().unwrap();
    write_cases(input.path(), &[CaseSpec::good("a", 90, 70), CaseSpec::good("b", 90, 70)]);
    let out = dermo(&["augment", "--input", input_arg(&input), "--cases", "b"], work.path(), &[]);
    assert_eq!(out.status.code(), Some(0));
    let manifest = read_json(&work.path().join("manifest.json"));
    let ids: Vec<&str> = manifest["cases"].as_array().unwrap().iter().map(|c| c["case_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["b"]);
    assert!(!work.path().join("views/a").exists());
}

#[test]
fn gradcheck_passes_and_catches_a_corrupted_block() {
    let work = tempfile::tempdir().unwrap();
    let ok = dermo(&["gradcheck"], work.path(), &[]);
    assert_eq!(ok.status.code(), Some(0));
    let text = String::from_utf8_lossy(&ok.stdout);
    assert_eq!(text.lines().filter(|l| l.ends_with(" ok")).count(), 7, "{text}");

    let bad = dermo(&["gradcheck", "--corrupt", "asymmetry"], work.path(), &[]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}
