use std::path::Path;
use std::process::{Command, Output};

fn scent(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scent"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = scent(args);
    assert!(
        out.status.success(),
        "scent {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &str = "warm_epochs = 1\nextra_epochs = 1\nmodel.encoder_hidden = 8\nmodel.encoder_prenet = 8\n\
model.attention_rnn = 8\nmodel.decoder_rnn = 8\nmodel.attention_dim = 8\nmodel.prenet = 8,8\nmodel.postnet_channels = 4\n";

fn corpus(dir: &Path) -> String {
    let c = dir.join("corpus").to_string_lossy().into_owned();
    ok(&[
        "gen-synthetic",
        "--out",
        &c,
        "--train",
        "6",
        "--valid",
        "2",
        "--test",
        "2",
        "--feat-dim",
        "6",
        "--bottleneck-dim",
        "4",
    ]);
    std::fs::write(dir.join("tiny.conf"), TINY).unwrap();
    c
}

#[test]
fn train_convert_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();

    let stats: serde_json::Value = serde_json::from_str(&ok(&[
        "augment",
        "--manifest",
        &format!("{c}/train.tsv"),
        "--stats",
        "--json",
    ]))
    .unwrap();
    assert_eq!(stats["pairs"], 6);

    ok(&[
        "train",
        "--manifest",
        &format!("{c}/train.tsv"),
        "--valid",
        &format!("{c}/valid.tsv"),
        "--config",
        &p("tiny.conf"),
        "--mode",
        "mt",
        "--out",
        &p("run"),
    ]);
    for f in [
        "best.ckpt",
        "last.ckpt",
        "metrics.jsonl",
        "train_config.json",
    ] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }
    ok(&[
        "strip-classifiers",
        "--checkpoint",
        &p("run/best.ckpt"),
        "--out",
        &p("stripped.ckpt"),
    ]);
    ok(&[
        "convert",
        "--checkpoint",
        &p("stripped.ckpt"),
        "--manifest",
        &format!("{c}/test.tsv"),
        "--out",
        &p("conv"),
    ]);
    let tracks = std::fs::read_dir(p("conv"))
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .ends_with(".attn.track")
        })
        .count();
    assert_eq!(tracks, 2);

    ok(&[
        "evaluate",
        "--converted",
        &p("conv"),
        "--reference",
        &c,
        "--report",
        &p("report.json"),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p("report.json")).unwrap()).unwrap();
    assert_eq!(report["utterances"].as_array().unwrap().len(), 2);
    assert!(report["mean"]["mcd"].as_f64().unwrap() > 0.0);
}

#[test]
fn experiment_grid_and_reevaluation() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let args = [
        "experiment",
        "--corpus",
        &c,
        "--out",
        &p("exp"),
        "--config",
        &p("tiny.conf"),
        "--modes",
        "baseline,mt",
        "--sizes",
        "3",
        "--seeds",
        "1",
    ];
    let table = ok(&args);
    assert!(table.starts_with("metric,mode,3"), "{table}");
    let csv = std::fs::read_to_string(p("exp/table.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    let mut again = args.to_vec();
    again.push("--evaluate-only");
    assert_eq!(ok(&again), table);

    ok(&[
        "evaluate",
        "--converted",
        &p("exp/cells"),
        "--reference",
        &c,
        "--report",
        &p("cells.json"),
        "--csv",
        &p("cells.csv"),
    ]);
    assert_eq!(std::fs::read_to_string(p("cells.csv")).unwrap(), csv);
}

#[test]
fn usage_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let fails = |args: &[&str], needle: &str| {
        let out = scent(args);
        assert!(!out.status.success(), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(needle), "{args:?}: {err}");
    };
    fails(
        &["augment", "--manifest", &format!("{c}/train.tsv")],
        "--stats",
    );
    fails(
        &[
            "convert",
            "--checkpoint",
            &p("missing.ckpt"),
            "--manifest",
            &format!("{c}/test.tsv"),
            "--out",
            &p("x"),
        ],
        "missing.ckpt",
    );
    fails(
        &[
            "train",
            "--manifest",
            &format!("{c}/train.tsv"),
            "--config",
            &format!("{c}/train.tsv"),
            "--out",
            &p("r"),
        ],
        "error",
    );
    std::fs::create_dir_all(p("empty")).unwrap();
    fails(
        &[
            "evaluate",
            "--converted",
            &p("empty"),
            "--reference",
            &c,
            "--report",
            &p("r.json"),
            "--csv",
            &p("r.csv"),
        ],
        "--csv",
    );
    fails(
        &[
            "experiment",
            "--corpus",
            &c,
            "--out",
            &p("none"),
            "--sizes",
            "3",
            "--seeds",
            "1",
            "--evaluate-only",
        ],
        "checkpoint",
    );
}
