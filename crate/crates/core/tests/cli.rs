use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "d_model = 8\nd_enc = 8\nn_layers = 1\nn_enc_layers = 1\nn_heads = 2\nn_enc_heads = 2\nt_gen = 6\nbatch_size = 4\nsteps = 5\ncheckpoint_every = 2\n\n[generator]\nn_train = 12\nn_val = 4\nn_test = 6\nn_entities = 60\n";

fn memfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memfuse")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(memfuse(&[]).status.code(), Some(1));
    assert_eq!(memfuse(&["train", "--no-such-flag"]).status.code(), Some(1));
    let help = memfuse(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("ablate"));
}

#[test]
fn datagen_train_eval_generate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let data = dir.path().join("data");
    let out = memfuse(&["datagen", "--config", p(&cfg), "--out", p(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "vocab.txt", "stats.json", "generator.toml"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let run = dir.path().join("run");
    let out = memfuse(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<serde_json::Value> =
        String::from_utf8_lossy(&out.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["step"], i);
        for k in ["l_lm", "l_safe", "l_align", "l_gate", "total"] {
            assert!(l[k].is_number(), "{k}");
        }
    }
    assert_eq!(std::fs::read_to_string(run.join("loss.jsonl")).unwrap().lines().count(), 5);
    for f in ["step-000002.ckpt", "step-000004.ckpt", "model.ckpt", "config.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let ckpt = run.join("model.ckpt");
    let out = memfuse(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data.join("test.jsonl"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let last = stdout.lines().last().unwrap();
    assert!(last.starts_with("accuracy=") && last.contains(" n=6 "), "{last}");

    let out = memfuse(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--split", "val"]);
    assert!(String::from_utf8_lossy(&out.stdout).lines().last().unwrap().contains(" n=4 "));

    let out = memfuse(&["generate", "--checkpoint", p(&ckpt), "--query", "What is the fee of Bako?", "--doc", "Bako fee: ab12."]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = memfuse(&["generate", "--checkpoint", p(&ckpt), "--data", p(&data), "--id", "test-00000"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = memfuse(&["generate", "--checkpoint", p(&ckpt), "--data", p(&data), "--id", "missing"]);
    assert_eq!(out.status.code(), Some(2));

    let mut bytes = std::fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 0xFF;
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, bytes).unwrap();
    let out = memfuse(&["eval", "--checkpoint", p(&bad), "--data", p(&data)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
}

#[test]
fn invalid_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "d_model = 7\nn_heads = 2\n").unwrap();
    let out = memfuse(&["train", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(&cfg, "not_a_field = true\n").unwrap();
    assert_eq!(memfuse(&["train", "--config", p(&cfg)]).status.code(), Some(2));
    let out = memfuse(&["datagen", "--config", p(&dir.path().join("missing.toml")), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("hot.toml");
    std::fs::write(&cfg, format!("{}\n[optimizer]\nlr = 1e300\n", SMALL.split("\n[generator]").next().unwrap().replace("steps = 5", "steps = 20")))
        .unwrap();
    let gen = dir.path().join("gen.toml");
    std::fs::write(&gen, SMALL).unwrap();
    let data = dir.path().join("data");
    assert!(memfuse(&["datagen", "--config", p(&gen), "--out", p(&data)]).status.success());
    let out = memfuse(&["train", "--config", p(&cfg), "--data", p(&data)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("divergence"));
}
