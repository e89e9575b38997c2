use std::path::Path;
use std::process::{Command, Output};

use ossem::checkpoint::load_checkpoint;
use ossem::features::wav::{read_wav, write_wav};
use ossem::model::Partition;

fn ossem<S: AsRef<str>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ossem"))
        .args(args.iter().map(AsRef::as_ref))
        .output()
        .unwrap()
}

fn ok<S: AsRef<str>>(args: &[S]) -> String {
    let out = ossem(args);
    assert!(
        out.status.success(),
        "ossem {:?} failed:\n{}",
        args.iter().map(AsRef::as_ref).collect::<Vec<_>>(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/micro.json")
        .display()
        .to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn micro_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let cfg = config();
    let base = ["--config", cfg.as_str(), "--corpus", s(&corpus)];
    let with = |extra: &[&str]| -> Vec<String> { base.iter().chain(extra).map(|a| a.to_string()).collect() };

    let stdout = ok(&with(&["gen-corpus"]));
    assert!(stdout.contains("resolved config"));
    assert!(stdout.contains("generated 18 utterances from 3 speakers"));

    let m1 = dir.path().join("m1.ckpt");
    let m2 = dir.path().join("m2.ckpt");
    ok(&with(&["meta-train", "--out", s(&m1)]));
    ok(&with(&["meta-train", "--out", s(&m2)]));
    assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap(), "training is not deterministic");

    let before = std::fs::read(&m1).unwrap();
    let adapted = dir.path().join("a.ckpt");
    ok(&with(&["adapt", "--checkpoint", s(&m1), "--enroll", "spk02", "--out", s(&adapted)]));
    assert_eq!(std::fs::read(&m1).unwrap(), before, "adapt modified its input checkpoint");
    let (base_ck, adapted_ck) = (load_checkpoint(&m1).unwrap(), load_checkpoint(&adapted).unwrap());
    assert_eq!(
        base_ck.params.partition_hash(Partition::Se),
        adapted_ck.params.partition_hash(Partition::Se)
    );
    assert_eq!(adapted_ck.embedding.unwrap().speaker_id, "spk02");

    let noisy = corpus.join(
        ossem::corpus::Corpus::open(&corpus).unwrap().manifest.utterances.last().unwrap().noisy_path.clone(),
    );
    let enhanced = dir.path().join("enh.wav");
    ok(&with(&["enhance", "--checkpoint", s(&adapted), "--in", s(&noisy), "--out", s(&enhanced)]));
    let (a, b) = (read_wav(&noisy).unwrap(), read_wav(&enhanced).unwrap());
    assert!(a.len().abs_diff(b.len()) <= 32, "{} vs {} samples", a.len(), b.len());

    let report = dir.path().join("eval.json");
    let stdout = ok(&with(&["eval", "--checkpoint", s(&m1), "--out", s(&report)]));
    assert!(stdout.contains("mean"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["speakers"].as_array().unwrap().len(), 1);

    let masks = dir.path().join("masks.csv");
    ok(&with(&["export-masks", "--checkpoint", s(&m1), "--out", s(&masks)]));
    assert_eq!(std::fs::read_to_string(&masks).unwrap().lines().count(), 3);
}

#[test]
fn enhance_without_an_embedding_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let cfg = config();
    let base = ["--config", cfg.as_str(), "--corpus", s(&corpus)];
    ok(&[&base[..], &["gen-corpus"]].concat());
    let ck = dir.path().join("p.ckpt");
    let mut pre = base.to_vec();
    pre.extend(["pretrain", "--out", s(&ck)]);
    ok(&pre);
    let wav = dir.path().join("in.wav");
    write_wav(&wav, &vec![0.01; 4000]).unwrap();
    let out = ossem(&[&base[..], &["enhance", "--checkpoint", s(&ck), "--in", s(&wav), "--out", s(&wav)]].concat());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--speaker"));
    ok(&[&base[..], &["enhance", "--checkpoint", s(&ck), "--in", s(&wav), "--out", s(&wav), "--speaker", "spk00"]].concat());
}

#[test]
fn bad_inputs_fail_with_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"sede": 1}"#).unwrap();
    let out = ossem(&["--config", s(&bad), "gen-corpus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sede"));

    assert_eq!(ossem(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(ossem(&["pretrain"]).status.code(), Some(2));

    let missing = dir.path().join("missing.ckpt");
    let out = ossem(&["--corpus", s(dir.path()), "eval", "--checkpoint", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn grad_check_command_passes() {
    let cfg = config();
    let stdout = ok(&["--config", cfg.as_str(), "grad-check", "--models", "1", "--per-param", "8"]);
    assert!(stdout.contains(" ok"));
}
