use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 4

[model]
vocab_size = 256
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
max_seq_len = 48

[corpus]
n_entities = 20

[stage1]
steps = 6
compression_ratio = 4.0

[stage2]
steps = 4

[eval]
generation_samples = 3
"#;

fn lbr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lbr"))
        .args(args)
        .current_dir(dir)
        .env_remove("LBR_OUTPUT_DIR")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), format!("{TINY}\n{extra}")).unwrap();
    dir
}

const CFG: [&str; 4] = ["--config", "run.toml", "--output-dir", "out"];

fn with_cfg<'a>(cmd: &'a str, rest: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd];
    v.extend(CFG);
    v.extend(rest);
    v
}

#[test]
fn staged_workflow_writes_every_artifact() {
    let dir = setup("");
    let d = dir.path();
    assert!(lbr(d, &with_cfg("gen-data", &[])).status.success());
    let manifest = std::fs::read_to_string(d.join("out/data/manifest.json")).unwrap();
    assert!(manifest.contains("config_hash"));
    for f in [
        "gen",
        "pairs",
        "queries",
        "passages",
        "qrels",
        "heldin",
        "recon_eval",
    ] {
        assert!(d.join(format!("out/data/{f}.jsonl")).exists(), "{f}");
    }

    let o = lbr(d, &with_cfg("train-stage1", &[]));
    assert!(o.status.success(), "{}", stderr(&o));
    let o = lbr(d, &with_cfg("train-stage2", &[]));
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(d.join("out/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 10);

    let o = lbr(
        d,
        &with_cfg(
            "eval",
            &[
                "--checkpoint",
                "out/stage2.ckpt",
                "--stage1-checkpoint",
                "out/stage1.ckpt",
            ],
        ),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(
        table.contains("recall@10") && table.contains("stage1_bleu4"),
        "{table}"
    );

    let o = lbr(
        d,
        &with_cfg("export-embed", &["--checkpoint", "out/stage2.ckpt"]),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let emb = std::fs::read_to_string(d.join("out/embeddings_passages.jsonl")).unwrap();
    let passages = std::fs::read_to_string(d.join("out/data/passages.jsonl")).unwrap();
    assert_eq!(emb.lines().count(), passages.lines().count());
}

#[test]
fn eval_contract_errors() {
    let dir = setup("");
    let d = dir.path();
    let o = lbr(d, &with_cfg("eval", &[]));
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr(&o).trim(), "error: checkpoint required");

    assert!(lbr(d, &with_cfg("pipeline", &[])).status.success());
    // same datasets and checkpoint, different config
    std::fs::write(d.join("other.toml"), TINY.replace("steps = 6", "steps = 7")).unwrap();
    let args = [
        "eval",
        "--config",
        "other.toml",
        "--output-dir",
        "out",
        "--checkpoint",
        "out/stage2.ckpt",
    ];
    let o = lbr(d, &args);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("hash mismatch"), "{}", stderr(&o));
    let mut forced = args.to_vec();
    forced.push("--allow-hash-mismatch");
    assert!(lbr(d, &forced).status.success());
}

#[test]
fn pipeline_report_is_reproducible() {
    let dir = setup("");
    let d = dir.path();
    assert!(lbr(
        d,
        &["pipeline", "--config", "run.toml", "--output-dir", "a"]
    )
    .status
    .success());
    assert!(lbr(
        d,
        &["pipeline", "--config", "run.toml", "--output-dir", "b"]
    )
    .status
    .success());
    let a = std::fs::read(d.join("a/report.jsonl")).unwrap();
    let b = std::fs::read(d.join("b/report.jsonl")).unwrap();
    assert_eq!(a, b);
    for f in [
        "stage1.ckpt",
        "stage2.ckpt",
        "timings.jsonl",
        "train_log.jsonl",
        "config.toml",
    ] {
        assert!(d.join("a").join(f).exists(), "{f}");
    }
}

#[test]
fn sweep_persists_rows_and_table() {
    let dir = setup("");
    let d = dir.path();
    let o = lbr(
        d,
        &with_cfg("sweep", &["--kind", "compression", "--grid", "2,8"]),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = std::fs::read_to_string(d.join("out/sweep_compression.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 2);
    let table = std::fs::read_to_string(d.join("out/sweep_compression.txt")).unwrap();
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn config_and_usage_errors() {
    let dir = setup("");
    let d = dir.path();
    std::fs::write(d.join("noseed.toml"), "[stage1]\nsteps = 2\n").unwrap();
    let o = lbr(
        d,
        &["gen-data", "--config", "noseed.toml", "--output-dir", "x"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr(&o).trim(), "error: seed required");

    assert_eq!(lbr(d, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(lbr(d, &["gen-data"]).status.code(), Some(2));
    let o = lbr(d, &with_cfg("sweep", &["--kind", "depth", "--grid", "1"]));
    assert_eq!(o.status.code(), Some(1));
    let o = lbr(d, &with_cfg("train-stage1", &[]));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("gen-data"), "{}", stderr(&o));
}

#[test]
fn inspect_mask_ascii() {
    let dir = tempfile::tempdir().unwrap();
    let o = lbr(
        dir.path(),
        &[
            "inspect-mask",
            "--x",
            "2",
            "--z",
            "1",
            "--y",
            "2",
            "--block-z-to-x",
        ],
    );
    assert!(o.status.success());
    assert_eq!(
        String::from_utf8(o.stdout).unwrap(),
        "#....\n##...\n..#..\n..##.\n..###\n"
    );
}
