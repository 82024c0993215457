use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
[training]
batch_size = 32
stage_a_epochs = 1
stage_b_epochs = 1
warmup_steps = 5

[mapper]
width = 16
heads = 2
ff_width = 32
mlp_hidden = 32

[lm]
width = 16
heads = 2
ff_width = 32
bpe_merges = 100

[decoding]
max_len = 12
"#;

fn speakerlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_speakerlm")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = speakerlm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = speakerlm(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(&["synth-corpus", "--out", s(&root.join("corpus"))]);
        fs::write(root.join("tiny.toml"), TINY).unwrap();
        Self { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Trains the tiny config into `<name>/` with extra flags.
    fn train(&self, name: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(name);
        let config = self.path("tiny.toml");
        let manifest = self.path("corpus/train.jsonl");
        let mut args = vec!["--config", s(&config), "--out", s(&out)];
        args.extend_from_slice(extra);
        args.extend(["train", "--manifest", s(&manifest)]);
        ok(&args);
        out
    }
}

fn metrics(dir: &Path) -> Vec<Value> {
    fs::read_to_string(dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn help_lists_subcommands_and_unknown_flags_fail() {
    let help = ok(&["--help"]);
    for sub in ["prepare-data", "train", "generate", "evaluate", "attention-maps", "synth-corpus"] {
        assert!(help.contains(sub), "{sub} missing from help");
    }
    for flag in ["--config", "--seed", "--out", "--augment-policy", "--ablation"] {
        assert!(help.contains(flag), "{flag} missing from help");
    }
    fails(&["train", "--no-such-flag"]);
    fails(&["no-such-command"]);
}

#[test]
fn prepare_data_is_deterministic_and_writes_splits() {
    let ws = Workspace::new();
    let meta = ws.path("corpus/metadata.jsonl");
    let (a, b) = (ws.path("prep_a"), ws.path("prep_b"));
    for out in [&a, &b] {
        ok(&["--seed", "4", "--out", s(out), "prepare-data", "--metadata", s(&meta), "--ratios", "0.5,0.25,0.25"]);
    }
    for split in ["train", "val", "test"] {
        let x = fs::read(a.join(format!("{split}.jsonl"))).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, fs::read(b.join(format!("{split}.jsonl"))).unwrap());
    }
    let stats: Value = serde_json::from_str(&fs::read_to_string(a.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["train"]["speakers"], 4);
    assert_eq!(stats["val"]["speakers"], 2);
    assert!(a.join("run.json").exists());

    let missing = ws.path("nope.jsonl");
    let err = fails(&["--out", s(&ws.path("prep_c")), "prepare-data", "--metadata", s(&missing)]);
    assert!(err.contains("nope.jsonl"), "{err}");
}

#[test]
fn train_writes_checkpoint_metrics_and_snapshot() {
    let ws = Workspace::new();
    let run = ws.train("run", &[]);
    assert!(run.join("checkpoint/checkpoint.json").exists());
    assert!(run.join("checkpoint/params.safetensors").exists());
    let log = metrics(&run);
    assert_eq!(log.len(), 40);
    assert_eq!(log[0]["stage"], "A");
    assert_eq!(log.last().unwrap()["stage"], "B");
    assert!(log.iter().all(|r| r["L2"].is_number()));

    // The snapshot reproduces the run.
    let again = ws.path("again");
    let manifest = ws.path("corpus/train.jsonl");
    ok(&["--config", s(&run.join("config.toml")), "--out", s(&again), "train", "--manifest", s(&manifest)]);
    assert_eq!(
        fs::read(run.join("metrics.jsonl")).unwrap(),
        fs::read(again.join("metrics.jsonl")).unwrap()
    );
}

#[test]
fn speaker_loss_ablation_logs_l_equal_to_l1() {
    let ws = Workspace::new();
    let run = ws.train("abl", &["--ablation", "no-speaker-loss"]);
    for r in metrics(&run) {
        assert!(r["L2"].is_null());
        assert_eq!(r["L"], r["L1"]);
    }
    let config = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(config.contains("speaker_loss_enabled = false"));

    let manifest = ws.path("corpus/train.jsonl");
    let err = fails(&["--ablation", "no-such-ablation", "--out", s(&ws.path("x")), "train", "--manifest", s(&manifest)]);
    assert!(err.contains("no-such-ablation"), "{err}");
}

#[test]
fn invalid_config_key_is_named() {
    let ws = Workspace::new();
    let bad = ws.path("bad.toml");
    fs::write(&bad, "[training]\nlearning_rat = 0.1\n").unwrap();
    let manifest = ws.path("corpus/train.jsonl");
    let err = fails(&["--config", s(&bad), "--out", s(&ws.path("x")), "train", "--manifest", s(&manifest)]);
    assert!(err.contains("learning_rat"), "{err}");
}

#[test]
fn generate_evaluate_and_attention_maps() {
    let ws = Workspace::new();
    let run = ws.train("run", &[]);
    let ckpt = run.join("checkpoint");
    let wav = ws.path("corpus/spk3_utt1.wav");

    let g1 = ok(&["--out", s(&ws.path("g1")), "generate", "--checkpoint", s(&ckpt), "--prompt", "Describe this speaker.", "--audio", s(&wav)]);
    let g2 = ok(&["--out", s(&ws.path("g2")), "generate", "--checkpoint", s(&ckpt), "--prompt", "Describe this speaker.", "--audio", s(&wav)]);
    assert_eq!(g1, g2);
    assert!(ws.path("g1/generations.jsonl").exists());

    let ev = ws.path("ev");
    let manifest = ws.path("corpus/heldout.jsonl");
    ok(&["--out", s(&ev), "evaluate", "--checkpoint", s(&ckpt), "--manifest", s(&manifest)]);
    let report: Value = serde_json::from_str(&fs::read_to_string(ev.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["samples"], 128);
    for attr in ["age", "dialect", "gender"] {
        assert!(ev.join(format!("confusion_{attr}.png")).exists());
        let rows = report["attributes"][attr]["confusion"]["counts"].as_array().unwrap();
        let total: u64 = rows.iter().flat_map(|r| r.as_array().unwrap()).map(|v| v.as_u64().unwrap()).sum();
        assert_eq!(total, report["attributes"][attr]["support"].as_u64().unwrap());
    }

    let att = ws.path("att");
    ok(&["--out", s(&att), "attention-maps", "--checkpoint", s(&ckpt), "--audio", s(&wav)]);
    let pngs = fs::read_dir(&att)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".png"))
        .count();
    assert_eq!(pngs, 8);
    let dump: Value = serde_json::from_str(&fs::read_to_string(att.join("attention.json")).unwrap()).unwrap();
    let size = dump["size"].as_u64().unwrap() as usize;
    for m in dump["maps"].as_array().unwrap() {
        let v: Vec<f64> = m["values"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        for row in v.chunks(size) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-5);
        }
    }
}

#[test]
fn bad_checkpoints_fail() {
    let ws = Workspace::new();
    let run = ws.train("run", &[]);
    let ckpt = run.join("checkpoint");
    let wav = ws.path("corpus/spk0_utt0.wav");
    let generate = |c: &Path| fails(&["--out", s(&ws.path("g")), "generate", "--checkpoint", s(c), "--prompt", "Hi", "--audio", s(&wav)]);

    let meta = fs::read_to_string(ckpt.join("checkpoint.json")).unwrap();
    fs::write(ckpt.join("checkpoint.json"), meta.replace("\"format_version\": 1", "\"format_version\": 2")).unwrap();
    assert!(generate(&ckpt).contains("format version 2"));

    fs::write(ckpt.join("checkpoint.json"), &meta).unwrap();
    fs::write(ckpt.join("params.safetensors"), b"garbage").unwrap();
    generate(&ckpt);
    generate(&ws.path("missing"));

    let mlp = ws.train("mlp", &["--ablation", "mlp-mapper"]);
    let err = fails(&["--out", s(&ws.path("a")), "attention-maps", "--checkpoint", s(&mlp.join("checkpoint")), "--audio", s(&wav)]);
    assert!(err.contains("mlp"), "{err}");
}

#[test]
fn overfit_checkpoint_reproduces_training_description() {
    let ws = Workspace::new();
    let rows: Vec<String> = fs::read_to_string(ws.path("corpus/train.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| l.contains("\"spk0_utt0\"") || l.contains("\"spk1_utt0\""))
        .map(String::from)
        .collect();
    let small = ws.path("corpus/small.jsonl");
    fs::write(&small, rows.join("\n") + "\n").unwrap();
    let config = ws.path("overfit.toml");
    fs::write(
        &config,
        "[training]\nbatch_size = 8\nstage_a_epochs = 0\nstage_b_epochs = 60\nlearning_rate = 0.003\nwarmup_steps = 5\n\
         [mapper]\nwidth = 32\nheads = 2\nff_width = 64\ntransformer_layers = 2\n\
         [lm]\nwidth = 32\nheads = 2\nff_width = 64\nbpe_merges = 150\n",
    )
    .unwrap();
    let run = ws.path("overfit");
    ok(&["--config", s(&config), "--out", s(&run), "train", "--manifest", s(&small)]);

    let wav = ws.path("corpus/spk1_utt0.wav");
    let out = ok(&[
        "--out",
        s(&ws.path("g")),
        "generate",
        "--checkpoint",
        s(&run.join("checkpoint")),
        "--prompt",
        "What is the speaker's gender?",
        "--audio",
        s(&wav),
    ]);
    assert_eq!(out.trim_end().split('\t').nth(1), Some("The speaker is male."));
}
