use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ncp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ncp"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ncp(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &str = r#"
seed = 2
[model]
model_size = 16
label_hidden = 16
orientation_hidden = 8
chunk_hidden = 16
context_depth = 1
[data.synthetic]
dev = 10
test = 10
[data.synthetic.corpus]
sentences = 60
[train]
batch_size = 16
max_epochs = 2
"#;

#[test]
fn stats_show_right_majority_on_right_branching_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["stats", "--synthetic", "200", "--factor", "right"]);
    let row: Vec<&str> = out.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(row[0], "right");
    let (left, right): (u64, u64) = (row[1].parse().unwrap(), row[2].parse().unwrap());
    assert!(right > left, "{out}");
}

#[test]
fn train_parse_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.toml"), TINY).unwrap();
    let summary = ok(d, &["train", "-c", "run.toml", "-o", "m.ckpt", "--log", "log.tsv", "--threads", "1"]);
    let v: serde_json::Value = serde_json::from_str(summary.trim()).unwrap();
    assert_eq!(v["epochs"], 2);
    let log = fs::read_to_string(d.join("log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    ok(d, &["generate", "--sentences", "15", "--seed", "4", "-o", "gold.mrg"]);
    ok(d, &["parse", "-m", "m.ckpt", "-i", "gold.mrg", "--oracle", "-o", "oracle.txt"]);
    let score: serde_json::Value =
        serde_json::from_str(ok(d, &["eval", "-g", "gold.mrg", "-p", "oracle.txt", "--json"]).trim())
            .unwrap();
    assert_eq!(score["f1"], 100.0);

    ok(d, &["parse", "-m", "m.ckpt", "-i", "gold.mrg", "-o", "pred.txt", "--diagnostics", "diag.jsonl"]);
    let diag = fs::read_to_string(d.join("diag.jsonl")).unwrap();
    assert_eq!(diag.lines().count(), 15);
    for line in diag.lines() {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(r["trees"], 1, "binary parses are single trees");
    }
    let score = ok(d, &["eval", "-g", "gold.mrg", "-p", "pred.txt"]);
    assert!(score.starts_with("sentences=15 "), "{score}");

    let heads = ok(d, &["heads", "-m", "m.ckpt", "-i", "gold.mrg", "--oracle"]);
    assert!(heads.starts_with("parent\thead\tcount\n"));
    assert!(heads.lines().count() > 1);
}

#[test]
fn binarized_output_is_accepted_for_training() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--sentences", "40", "-o", "corpus.mrg"]);
    ok(d, &["binarize", "-i", "corpus.mrg", "--factor", "L50R50", "-o", "bin.mrg", "--layers", "layers.jsonl"]);
    let layers = fs::read_to_string(d.join("layers.jsonl")).unwrap();
    assert_eq!(layers.lines().count(), 40);
    let cfg = TINY.replace(
        "[data.synthetic]",
        "[data]\ntreebank = \"bin.mrg\"\nsplit = { by = \"random\", dev = 5, test = 5, seed = 1 }\n[data.synthetic]",
    );
    fs::write(d.join("run.toml"), cfg).unwrap();
    ok(d, &["train", "-c", "run.toml", "-o", "m.ckpt"]);
    assert!(d.join("m.ckpt").exists());
}

#[test]
fn raw_text_file_parses() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.toml"), TINY).unwrap();
    ok(d, &["train", "-c", "run.toml", "-o", "m.ckpt"]);
    fs::write(d.join("text.txt"), "the dog saw a cat\n\nmary slept .\n").unwrap();
    let out = ok(d, &["parse", "-m", "m.ckpt", "--text", "text.txt"]);
    let trees = ncp_core::parse_brackets(&out).unwrap();
    assert_eq!(trees.len(), 2);
    assert_eq!(trees[1].words(), vec!["mary", "slept", "."]);
}

#[test]
fn failures_have_descriptive_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let missing = ncp(d, &["eval", "-g", "nope.mrg", "-p", "nope.txt"]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.mrg"));

    fs::write(d.join("bad.toml"), "[train]\nbatch = 3\n").unwrap();
    assert_eq!(ncp(d, &["train", "-c", "bad.toml"]).status.code(), Some(4));
    fs::write(d.join("bad.toml"), "[train]\nfactor = \"L30R30\"\n").unwrap();
    assert_eq!(ncp(d, &["train", "-c", "bad.toml"]).status.code(), Some(4));

    fs::write(d.join("vec.txt"), "the 0.1 0.2 0.3\ndog 1 2 3\n").unwrap();
    let cfg = TINY.replace("[data.synthetic]", "[data]\nembeddings = \"vec.txt\"\n[data.synthetic]");
    fs::write(d.join("emb.toml"), cfg).unwrap();
    let out = ncp(d, &["train", "-c", "emb.toml"]);
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimension"));

    fs::write(d.join("junk.ckpt"), "not a model").unwrap();
    fs::write(d.join("s.txt"), "a b\n").unwrap();
    assert_eq!(ncp(d, &["parse", "-m", "junk.ckpt", "--text", "s.txt"]).status.code(), Some(7));

    fs::write(d.join("broken.mrg"), "(S (NP").unwrap();
    assert_eq!(ncp(d, &["stats", "-i", "broken.mrg"]).status.code(), Some(6));

    assert_eq!(ncp(d, &["parse", "--oracle", "-m", "x"]).status.code(), Some(2));
}
