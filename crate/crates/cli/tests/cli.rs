use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
seed = 3
calibration_docs = 2
num_layers = 2
d_model = 16
d_qk = 4
d_v = 8
num_attn_heads = 2
vq_heads = 2
vq_entries_per_head = 16
d_mlp = 32
vocab_size = 64
max_seq_len = 64
precision = "double"

[engine]
full_row_fraction = 0.25
"#;

fn vqt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqt")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn text(out: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
}

struct Scratch {
    dir: TempDir,
}

impl Scratch {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
        Scratch { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn generators_are_deterministic() {
    let s = Scratch::new();
    let cfg = s.arg("small.toml");
    for out in ["a.jsonl", "b.jsonl"] {
        let o = vqt(&["gen-workload", "--seed", "4", "--n", "20", "--edits", "15", "--mix", "0.5,0.25,0.25", "--config", &cfg, "--out", &s.arg(out)]);
        assert_eq!(code(&o), 0, "{}", text(&o));
    }
    let a = read(&s.path("a.jsonl"));
    assert_eq!(a, read(&s.path("b.jsonl")));
    assert_eq!(a.lines().count(), 16);
    assert!(a.starts_with(r#"{"type":"revision","tokens":["#));

    for out in ["p.jsonl", "q.jsonl"] {
        let o = vqt(&["gen-pairs", "--seed", "4", "--n", "20", "--count", "6", "--edits", "1,3", "--config", &cfg, "--out", &s.arg(out)]);
        assert_eq!(code(&o), 0, "{}", text(&o));
    }
    assert_eq!(read(&s.path("p.jsonl")), read(&s.path("q.jsonl")));
    assert_eq!(read(&s.path("p.jsonl")).lines().count(), 12);
}

#[test]
fn benches_write_identical_csvs() {
    let s = Scratch::new();
    let cfg = s.arg("small.toml");
    vqt(&["gen-workload", "--seed", "1", "--n", "24", "--edits", "12", "--mix", "0.4,0.3,0.3", "--config", &cfg, "--out", &s.arg("w.jsonl")]);
    vqt(&["gen-pairs", "--seed", "1", "--n", "24", "--count", "4", "--config", &cfg, "--out", &s.arg("p.jsonl")]);
    for run in ["1", "2"] {
        let o = vqt(&["bench-online", "--stream", &s.arg("w.jsonl"), "--config", &cfg, "--out", &s.arg(&format!("on{run}.csv")), "--json", &s.arg("on.json")]);
        assert_eq!(code(&o), 0, "{}", text(&o));
        let o = vqt(&["bench-offline", "--pairs", &s.arg("p.jsonl"), "--config", &cfg, "--out", &s.arg(&format!("off{run}.csv"))]);
        assert_eq!(code(&o), 0, "{}", text(&o));
    }
    let online = read(&s.path("on1.csv"));
    assert_eq!(online, read(&s.path("on2.csv")));
    assert_eq!(
        online.lines().next().unwrap(),
        "edit_index,edit_type,slot,fraction_modified,dense_flops,incremental_flops,ratio,reindex_flag,max_margin_warning"
    );
    assert_eq!(online.lines().count(), 13);
    let offline = read(&s.path("off1.csv"));
    assert_eq!(offline, read(&s.path("off2.csv")));
    assert_eq!(
        offline.lines().next().unwrap(),
        "pair_index,n_a,n_b,lcs,fraction_modified,dense_flops,incremental_flops,ratio"
    );
    let json: serde_json::Value = serde_json::from_str(&read(&s.path("on.json"))).unwrap();
    assert_eq!(json["summary"]["updates"], 12);
}

#[test]
fn verify_passes_on_small_config() {
    let s = Scratch::new();
    let o = vqt(&["verify", "--config", &s.arg("small.toml"), "--trials", "5", "--json", &s.arg("v.json")]);
    let out = text(&o);
    for suite in ["vq-bias", "oracle-equivalence", "index-agreement", "format"] {
        assert!(out.contains(&format!("PASS {suite}")), "{out}");
    }
    let json: serde_json::Value = serde_json::from_str(&read(&s.path("v.json"))).unwrap();
    assert_eq!(json["suites"].as_array().unwrap().len(), 5);
}

#[test]
fn verify_exit_codes() {
    let s = Scratch::new();
    let cfg = s.arg("small.toml");
    let o = vqt(&["verify", "--config", &cfg, "--trials", "0"]);
    assert_eq!(code(&o), 1, "{}", text(&o));
    let o = vqt(&["verify", "--config", &cfg, "--trials", "2", "--corrupt-bias"]);
    assert_eq!(code(&o), 2, "{}", text(&o));
    assert!(text(&o).contains("FAIL vq-bias"), "{}", text(&o));
}

#[test]
fn usage_and_io_errors() {
    let s = Scratch::new();
    assert_eq!(code(&vqt(&["bench-online"])), 1);
    assert_eq!(code(&vqt(&["no-such-command"])), 1);
    assert_eq!(code(&vqt(&["--help"])), 0);
    let o = vqt(&["gen-workload", "--n", "5", "--edits", "2", "--mix", "1,1", "--out", &s.arg("x.jsonl")]);
    assert_eq!(code(&o), 1, "{}", text(&o));
    std::fs::write(s.path("bad.toml"), "d_model = \"wide\"\n").unwrap();
    let o = vqt(&["gen-workload", "--n", "5", "--edits", "2", "--config", &s.arg("bad.toml"), "--out", &s.arg("x.jsonl")]);
    assert_eq!(code(&o), 1, "{}", text(&o));
    let o = vqt(&["bench-online", "--stream", &s.arg("missing.jsonl"), "--config", &s.arg("small.toml"), "--out", &s.arg("o.csv")]);
    assert_eq!(code(&o), 3, "{}", text(&o));
    assert!(text(&o).contains("missing.jsonl"));
    let o = vqt(&["verify", "--config", &s.arg("missing.toml")]);
    assert_eq!(code(&o), 3, "{}", text(&o));
}
