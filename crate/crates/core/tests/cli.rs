use std::path::Path;

use cfair::centroids::load_centroids;
use cfair::cli::{run, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION};
use cfair::fairmodule::load_checkpoint;
use cfair::transform::load_target_table;
use cfair::{build_target_table, compute_weights, estimate_centroids, load_dataset, train, TrainConfig};

fn cfair(args: &[&str]) -> i32 {
    run(std::iter::once("cfair").chain(args.iter().copied()))
}

fn p(root: &Path, name: &str) -> String {
    root.join(name).to_string_lossy().into_owned()
}

fn synth(root: &Path) {
    let code = cfair(&["synth", "--out", &p(root, "data"), "--dim", "8", "--groups", "A:6:3:0.3,B:5:4:0.9", "--seed", "3"]);
    assert_eq!(code, EXIT_OK);
}

#[test]
fn pipeline_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    synth(root);
    assert_eq!(cfair(&["centroids", "--data", &p(root, "data"), "--out", &p(root, "cent")]), EXIT_OK);
    assert_eq!(
        cfair(&["targets", "--data", &p(root, "data"), "--centroids", &p(root, "cent"), "--reference", "B", "--out", &p(root, "tg")]),
        EXIT_OK
    );
    assert_eq!(
        cfair(&[
            "train", "--data", &p(root, "data"), "--centroids", &p(root, "cent"), "--targets", &p(root, "tg"),
            "--epochs", "3", "--batch", "8", "--seed", "5", "--out", &p(root, "model"),
        ]),
        EXIT_OK
    );
    assert_eq!(
        cfair(&["eval", "--data", &p(root, "data"), "--checkpoint", &p(root, "model"), "--alphas", "0.1,0.5", "--out", &p(root, "eval")]),
        EXIT_OK
    );

    let ds = load_dataset(&root.join("data")).unwrap();
    let cs = estimate_centroids(&ds).unwrap();
    assert_eq!(load_centroids(&root.join("cent")).unwrap(), cs);
    let table = build_target_table(&ds, &cs, 1).unwrap();
    assert_eq!(load_target_table(&root.join("tg")).unwrap(), table);
    let weights = compute_weights(&ds, &cs).unwrap();
    let cfg = TrainConfig {
        batch_size: 8,
        learning_rate: 1e-3,
        epochs: 3,
        reference: 1,
        seed: 5,
    };
    let ours = train(&ds, &cs, &table, &weights, &cfg).unwrap().params;
    let (saved, header) = load_checkpoint(&root.join("model")).unwrap();
    assert_eq!(saved, ours);
    assert_eq!(header.epoch, 3);

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report.as_array().unwrap().len(), 2);
    for f in ["run.json", "frr_global.csv", "far_global.csv", "frr_A.csv", "far_B.csv"] {
        assert!(root.join("eval").join(f).exists(), "{f}");
    }
    assert!(root.join("model/train_log.csv").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    synth(root);
    assert_eq!(cfair(&["--help"]), EXIT_OK);
    assert_eq!(cfair(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(cfair(&["synth", "--out", &p(root, "x"), "--dim", "4", "--groups", "A:1:2:0.1"]), EXIT_USAGE);
    assert_eq!(cfair(&["centroids", "--data", &p(root, "missing"), "--out", &p(root, "c")]), EXIT_VALIDATION);
    assert_eq!(cfair(&["centroids", "--data", &p(root, "data"), "--out", &p(root, "cent")]), EXIT_OK);
    assert_eq!(
        cfair(&["targets", "--data", &p(root, "data"), "--centroids", &p(root, "cent"), "--reference", "Z", "--out", &p(root, "tg")]),
        EXIT_USAGE
    );
    assert_eq!(
        cfair(&["check-alignment", "--data", &p(root, "data"), "--centroids", &p(root, "cent"), "--reference", "A"]),
        EXIT_OK
    );
    // a corrupted checksum is a validation failure
    let bin = root.join("cent/centroids.bin");
    let mut bytes = std::fs::read(&bin).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&bin, bytes).unwrap();
    assert_eq!(
        cfair(&["targets", "--data", &p(root, "data"), "--centroids", &p(root, "cent"), "--reference", "A", "--out", &p(root, "tg")]),
        EXIT_VALIDATION
    );
}
