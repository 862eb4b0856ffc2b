use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

const TINY: &str = r#"
seed = 3

[world]
n_items = 240
n_users = 80
n_days = 14
n_categories = 8
activity = 0.5

[model]
d = 8
user_layers = 1
ffn_hidden = 16
item_layers = 1
item_hidden = 8
max_history = 16
vocab_size = 200

[dataset]
max_history = 16

[eval]
test_days = 4
recall_pool = 50
seeds = 2

[trainer.pretrain]
batch_size = 32
warmup_steps = 5

[trainer.finetune]
batch_size = 8
warmup_steps = 2
"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn cmd(&self, out: &str, args: &[&str]) -> Command {
        let mut c = Command::new(env!("CARGO_BIN_EXE_ttrank"));
        c.arg("--config").arg(self.dir.path().join("tiny.toml"));
        c.arg("--out").arg(self.out(out));
        c.args(args);
        c
    }

    fn run(&self, out: &str, args: &[&str]) -> Output {
        self.cmd(out, args).output().unwrap()
    }

    fn ok(&self, out: &str, args: &[&str]) -> String {
        let o = self.run(out, args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }

    fn pipeline(&self, out: &str) {
        for c in ["gen-data", "build-vocab", "pretrain", "finetune", "export", "evaluate"] {
            let line = self.ok(out, &[c]);
            assert_eq!(line.lines().count(), 1, "{c}: {line}");
        }
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn pipeline_reruns_reproduce_every_result_file() {
    let s = Sandbox::new();
    s.pipeline("a");
    s.pipeline("b");
    for f in [
        "world.json",
        "logs.ndjson",
        "vocab.txt",
        "pretrain.ckpt",
        "finetune.ckpt",
        "users.emb",
        "items.emb",
        "metrics.json",
        "metrics.tsv",
        "pretrain_report.json",
        "finetune_report.json",
    ] {
        assert_eq!(read(&s.out("a").join(f)), read(&s.out("b").join(f)), "{f} differs");
    }
    let metrics: serde_json::Value = serde_json::from_slice(&read(&s.out("a").join("metrics.json"))).unwrap();
    let n = metrics["ndcg_retargeting"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&n));

    // Continuous resumes from the fine-tuned checkpoint.
    s.ok("a", &["continuous"]);
    assert!(s.out("a").join("continuous.ckpt").exists());
    // A checkpoint with another shape is a config error.
    let o = s.run("a", &["--set", "model.d=16", "continuous"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));

    // Scoring keeps going past unknown ids.
    let mut child = s
        .cmd("a", &["score", "--user", "5"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"7 99999\n3\n").unwrap();
    let o = child.wait_with_output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let out = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<Vec<&str>> = out.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0][0], "7");
    assert!(rows[0][1].parse::<f64>().unwrap().abs() <= 1.0 + 1e-6);
    assert_eq!(rows[1], vec!["99999", "ERROR unknown item 99999"]);
    assert_eq!(rows[2][0], "3");
}

#[test]
fn fresh_finetune_needs_no_pretrained_checkpoint() {
    let s = Sandbox::new();
    s.ok("a", &["gen-data"]);
    s.ok("a", &["build-vocab"]);
    let o = s.run("a", &["finetune"]);
    assert_eq!(o.status.code(), Some(3));
    s.ok("a", &["finetune", "--fresh"]);
}

#[test]
fn exit_codes() {
    let s = Sandbox::new();
    let o = s.run("a", &["--set", "world.n_userz=3", "gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_userz"));
    let o = s.run("a", &["--bogus", "gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    let o = s.run("a", &["--set", "novalue", "gen-data"]);
    assert_eq!(o.status.code(), Some(2));

    let o = s.run("empty", &["evaluate"]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr).to_string();
    assert!(err.contains(&s.out("empty").join("world.json").display().to_string()), "{err}");

    s.ok("a", &["gen-data"]);
    let o = s.run("a", &["pretrain"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("vocab.txt"));
    // Artifacts from another world are refused.
    s.ok("a", &["build-vocab"]);
    let o = s.run("a", &["--seed", "4", "pretrain"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let s = Sandbox::new();
    let line = s.ok("a", &["gradcheck"]);
    assert!(line.starts_with("gradcheck: 74/74 checks pass"), "{line}");
}

#[test]
fn ablate_writes_one_row_per_cell_and_seed() {
    let s = Sandbox::new();
    let out = s.ok("a", &["--set", "trainer.pretrain.epochs=1", "ablate", "--cells", "both,finetune-only"]);
    assert!(out.contains("PASS") || out.contains("FAIL"), "{out}");
    let report: serde_json::Value = serde_json::from_slice(&read(&s.out("a").join("ablation.json"))).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 2 * 2);
    let tsv = String::from_utf8(read(&s.out("a").join("ablation.tsv"))).unwrap();
    assert_eq!(tsv.lines().count(), 1 + 4);
    assert!(s.out("a").join("ablation_summary.txt").exists());
    let o = s.run("a", &["ablate", "--cells", "nope"]);
    assert_eq!(o.status.code(), Some(2));
}
