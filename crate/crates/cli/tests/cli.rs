use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY_CONFIG: &str = "\
pretrain_steps = 6
adv_steps = 2
batch_size = 2
lr = 0.001
pretrain_seq_len = 32
adv_seq_len = 32
primer_len = 8
g_blocks = 1
g_d_model = 8
g_heads = 2
g_d_ff = 16
d_blocks = 1
d_d_model = 8
d_heads = 2
d_d_ff = 16
patch_len = 8
max_len = 192
";

fn sentigen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sentigen")).args(args).output().expect("spawn sentigen")
}

fn ok(args: &[&str]) -> String {
    let out = sentigen(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn toy_corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy_corpus")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn encode_toy_corpus_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("toy.tokens");
    let labels = toy_corpus().join("labels.txt");
    ok(&["encode", "--in", s(&toy_corpus()), "--out", s(&out), "--labels", s(&labels)]);
    let first = fs::read(&out).unwrap();
    assert_eq!(String::from_utf8_lossy(&first).lines().count(), 8);
    let manifest = fs::read_to_string(dir.path().join("toy.tokens.manifest")).unwrap();
    assert!(manifest.lines().any(|l| l == "rain.mid=Q3"));
    ok(&["encode", "--in", s(&toy_corpus()), "--out", s(&out), "--labels", s(&labels)]);
    assert_eq!(fs::read(&out).unwrap(), first);
}

#[test]
fn encode_empty_directory() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = dir.path().join("none.tokens");
    let stdout = ok(&["encode", "--in", s(&empty), "--out", s(&out)]);
    assert!(stdout.contains("encoded 0 files"));
    assert_eq!(fs::read_to_string(&out).unwrap(), "");
}

#[test]
fn train_generate_decode_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    fs::write(p("tiny.conf"), TINY_CONFIG).unwrap();
    ok(&["encode", "--in", s(&toy_corpus()), "--out", s(&p("toy.tokens")), "--labels", s(&toy_corpus().join("labels.txt"))]);

    let log = ok(&["pretrain", "--config", s(&p("tiny.conf")), "--in", s(&p("toy.tokens")), "--ckpt", s(&p("pre.ckpt")), "--log-every", "1"]);
    assert_eq!(log.lines().filter(|l| l.starts_with("step=")).count(), 6);
    let log = ok(&["advtrain", "--config", s(&p("tiny.conf")), "--in", s(&p("toy.tokens")), "--ckpt", s(&p("pre.ckpt")), "--out", s(&p("adv.ckpt")), "--log-every", "1"]);
    assert!(log.contains("stage=adversarial") && log.contains("tau="));

    let adv = p("adv.ckpt");
    let gen = |out: &str, extra: &[&str]| {
        let mut args = vec!["generate", "--ckpt", s(&adv), "--class", "Q2", "--length", "128", "--seed", "9", "--out"];
        let out = p(out);
        args.push(s(&out));
        args.extend_from_slice(extra);
        ok(&args);
        (fs::read(&out).unwrap(), fs::read_to_string(out.with_extension("tokens")).unwrap())
    };
    let (a, tokens) = gen("a.mid", &[]);
    let (b, _) = gen("b.mid", &[]);
    assert_eq!(a, b);
    assert!(tokens.split_whitespace().count() <= 129);
    let toy_tokens = p("toy.tokens");
    let (_, primed) = gen("c.mid", &["--primer", s(&toy_tokens), "--primer-len", "16"]);
    let first_line = fs::read_to_string(p("toy.tokens")).unwrap();
    let expected: Vec<&str> = first_line.lines().next().unwrap().split_whitespace().take(16).collect();
    let got: Vec<&str> = primed.split_whitespace().take(16).collect();
    assert_eq!(got, expected);

    let unlabeled = sentigen(&["generate", "--ckpt", s(&p("adv.ckpt")), "--class", "Unlabeled", "--out", s(&p("u.mid"))]);
    assert!(!unlabeled.status.success());
    assert_eq!(String::from_utf8_lossy(&unlabeled.stderr).lines().count(), 1);

    ok(&["decode", "--in", s(&p("toy.tokens")), "--out", s(&p("decoded"))]);
    assert_eq!(fs::read_dir(p("decoded")).unwrap().count(), 8);

    let report = ok(&["evaluate", "--in", s(&toy_corpus()), "--labels", s(&toy_corpus().join("labels.txt")), "--records", s(&p("records.tsv"))]);
    assert!(report.contains("Real EMOPIA (reference, not reproduced)"));
    assert_eq!(fs::read_to_string(p("records.tsv")).unwrap().lines().count(), 8);
}

#[test]
fn advtrain_refuses_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    fs::write(p("tiny.conf"), TINY_CONFIG).unwrap();
    fs::write(p("other.conf"), format!("{TINY_CONFIG}seed = 3\n")).unwrap();
    ok(&["encode", "--in", s(&toy_corpus()), "--out", s(&p("toy.tokens")), "--labels", s(&toy_corpus().join("labels.txt"))]);
    ok(&["pretrain", "--config", s(&p("tiny.conf")), "--in", s(&p("toy.tokens")), "--ckpt", s(&p("pre.ckpt"))]);
    let out = sentigen(&["advtrain", "--config", s(&p("other.conf")), "--in", s(&p("toy.tokens")), "--ckpt", s(&p("pre.ckpt")), "--out", s(&p("adv.ckpt"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn gradcheck_module_filter_and_negative_control() {
    let out = ok(&["gradcheck", "--module", "attention"]);
    let lines: Vec<&str> = out.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).collect();
    assert!(!lines.is_empty());
    assert!(lines.iter().all(|l| l.starts_with("PASS attention/")));

    let control = sentigen(&["gradcheck", "--negative-control"]);
    assert!(!control.status.success());
    assert!(String::from_utf8_lossy(&control.stdout).starts_with("FAIL"));
}

#[test]
fn flags_are_checked() {
    assert!(!sentigen(&["encode", "--bogus"]).status.success());
    assert!(!sentigen(&["frobnicate"]).status.success());
    for cmd in ["encode", "decode", "pretrain", "advtrain", "generate", "evaluate", "gradcheck"] {
        let help = ok(&[cmd, "--help"]);
        assert!(help.contains("Usage"), "{cmd}");
    }
    let help = ok(&["generate", "--help"]);
    for flag in ["--ckpt", "--class", "--length", "--seed", "--out", "--primer"] {
        assert!(help.contains(flag), "{flag}");
    }
}
