use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cycleasr::asr::greedy_decode;
use cycleasr::data::load_dataset;
use cycleasr::eval::{load_transcripts, score_corpus};
use cycleasr::tensor::Checkpoint;
use cycleasr::asr::AsrModel;

// Small enough that the debug binary trains every model in seconds.
const TINY: &str = "\
data.sizes.paired = 6
data.sizes.unpaired = 4
data.sizes.text = 12
data.sizes.val = 3
data.sizes.eval = 3
asr.encoder_layers = 1
asr.subsample_layers = 1
asr.encoder_cells = 4
asr.embed_dim = 4
asr.decoder_cells = 8
asr.att_dim = 4
asr.att_filters = 2
asr.att_width = 3
tte.embed_dim = 4
tte.conv_layers = 1
tte.conv_channels = 4
tte.conv_width = 3
tte.encoder_cells = 4
tte.att_dim = 4
tte.att_filters = 2
tte.att_width = 3
tte.prenet_dim = 4
tte.decoder_cells = 8
tte.postnet_layers = 1
tte.postnet_channels = 4
tte.postnet_width = 3
lm.embed_dim = 4
lm.cells = 8
train.sup_epochs = 2
train.tte_epochs = 2
train.lm_epochs = 2
train.cycle_epochs = 1
train.samples = 2
train.ce_samples = 2
decode.beam = 3
";

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cycleasr"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
        Work { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        let cfg = self.path("tiny.cfg");
        bin()
            .args(["--config", cfg.to_str().unwrap(), "--threads", "1"])
            .args(args)
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn data(&self) -> &Self {
        if !self.path("data/paired.jsonl").exists() {
            self.ok(&["gen-data", "--out", "data"]);
        }
        self
    }

    fn asr(&self) -> &Self {
        self.data();
        if !self.path("asr.ckpt").exists() {
            self.ok(&["train-sup", "--data", "data", "--out", "asr.ckpt"]);
        }
        self
    }
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn gen_data_is_deterministic_given_seed() {
    let w = Work::new();
    w.ok(&["gen-data", "--out", "a", "--seed", "5"]);
    w.ok(&["gen-data", "--out", "b", "--seed", "5"]);
    w.ok(&["gen-data", "--out", "c", "--seed", "6"]);
    for f in ["paired.jsonl", "unpaired.jsonl", "text.txt", "eval.jsonl", "vocab.txt"] {
        assert_eq!(read(w.path("a").join(f)), read(w.path("b").join(f)), "{f}");
    }
    assert_ne!(read(w.path("a/paired.jsonl")), read(w.path("c/paired.jsonl")));
    assert_eq!(load_dataset(w.path("a/paired.jsonl")).unwrap().len(), 6);
}

#[test]
fn default_split_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["gen-data", "--out"]).arg(dir.path()).output().unwrap();
    assert!(out.status.success());
    let sizes: Vec<usize> = ["paired", "unpaired", "val", "eval"]
        .iter()
        .map(|s| load_dataset(dir.path().join(format!("{s}.jsonl"))).unwrap().len())
        .collect();
    assert_eq!(sizes, vec![50, 200, 30, 30]);
    let text = std::fs::read_to_string(dir.path().join("text.txt")).unwrap();
    assert_eq!(text.lines().count(), 300);
}

#[test]
fn usage_errors_exit_1() {
    let out = bin().args(["gen-data", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = bin().args(["--set", "no.such.key=1", "gen-data", "--out", "x"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = bin().args(["--set", "seed", "gen-data", "--out", "x"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_lists_defaults() {
    let out = bin().args(["train-cycle", "--help"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["decode.beam", "train.samples", "decode.stop_threshold", "tte.zoneout"] {
        assert!(text.contains(key), "{key} missing from help");
    }
}

#[test]
fn data_errors_exit_2() {
    let w = Work::new();
    let out = w.run(&["train-sup", "--data", "missing", "--out", "asr.ckpt"]);
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(w.path("hyp.txt"), "u1 no tab here\n").unwrap();
    std::fs::write(w.path("ref.txt"), "u1\tabc\n").unwrap();
    let out = w.run(&["score", "--hyps", "hyp.txt", "--refs", "ref.txt"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn refuses_to_overwrite_without_force() {
    let w = Work::new();
    w.asr();
    let before = read(w.path("asr.ckpt"));
    let out = w.run(&["train-sup", "--data", "data", "--out", "asr.ckpt", "--seed", "9"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(read(w.path("asr.ckpt")), before);
    w.ok(&["train-sup", "--data", "data", "--out", "asr.ckpt", "--seed", "9", "--force"]);
    assert_ne!(read(w.path("asr.ckpt")), before);

    let out = w.run(&["gen-data", "--out", "data"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn training_is_deterministic_and_resume_is_bitwise() {
    let w = Work::new();
    w.asr();
    w.ok(&["train-sup", "--data", "data", "--out", "again.ckpt"]);
    assert_eq!(read(w.path("asr.ckpt")), read(w.path("again.ckpt")));

    w.ok(&["train-sup", "--data", "data", "--out", "half.ckpt", "--set", "train.sup_epochs=1"]);
    w.ok(&["train-sup", "--data", "data", "--out", "resumed.ckpt", "--resume", "half.ckpt", "--curves", "sup.csv"]);
    assert_eq!(read(w.path("asr.ckpt")), read(w.path("resumed.ckpt")));
    let csv = std::fs::read_to_string(w.path("sup.csv")).unwrap();
    // header plus the one resumed epoch
    assert_eq!(csv.lines().count(), 2, "{csv}");
}

#[test]
fn cycle_pipeline_and_mode_selection() {
    let w = Work::new();
    w.asr();
    w.ok(&["train-tte", "--data", "data", "--asr", "asr.ckpt", "--out", "tte.ckpt"]);

    // cycle mode needs the TTE
    let out = w.run(&["train-cycle", "--data", "data", "--asr", "asr.ckpt", "--out", "c.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    let out = w.run(&["train-cycle", "--data", "data", "--asr", "asr.ckpt", "--mode", "nope", "--out", "c.ckpt"]);
    assert_eq!(out.status.code(), Some(1));

    let cycle = ["train-cycle", "--data", "data", "--asr", "asr.ckpt", "--tte", "tte.ckpt"];
    w.ok(&[&cycle[..], &["--out", "c1.ckpt", "--curves", "c1.csv"]].concat());
    w.ok(&[&cycle[..], &["--out", "c2.ckpt"]].concat());
    assert_eq!(read(w.path("c1.ckpt")), read(w.path("c2.ckpt")));
    let csv = std::fs::read_to_string(w.path("c1.csv")).unwrap();
    let last = csv.lines().last().unwrap();
    assert!(!last.split(',').nth(1).unwrap().contains("NaN"), "{csv}");

    let base = ["train-cycle", "--data", "data", "--asr", "asr.ckpt"];
    w.ok(&[&base[..], &["--mode", "ce1", "--out", "ce1.ckpt"]].concat());
    w.ok(&[&base[..], &["--mode", "supervised", "--out", "sup.ckpt"]].concat());
    assert_ne!(read(w.path("c1.ckpt")), read(w.path("ce1.ckpt")));
    assert_ne!(read(w.path("ce1.ckpt")), read(w.path("sup.ckpt")));
}

#[test]
fn beam_one_matches_greedy() {
    let w = Work::new();
    w.asr();
    w.ok(&["decode", "--asr", "asr.ckpt", "--data", "data/eval.jsonl", "--out", "b1.txt", "--beam", "1"]);
    let hyps = load_transcripts(w.path("b1.txt")).unwrap();
    let asr = AsrModel::from_checkpoint(&Checkpoint::load(w.path("asr.ckpt")).unwrap()).unwrap();
    let eval = load_dataset(w.path("data/eval.jsonl")).unwrap();
    assert_eq!(hyps.len(), eval.len());
    for u in &eval {
        let g = greedy_decode(&asr, u.features.as_ref().unwrap(), 0.2, 0.8).unwrap();
        assert_eq!(hyps[&u.id], g.text(&asr.vocab), "{}", u.id);
    }
}

#[test]
fn zero_lm_weight_matches_no_lm() {
    let w = Work::new();
    w.asr();
    w.ok(&["train-lm", "--data", "data", "--out", "lm.ckpt"]);
    let dec = ["decode", "--asr", "asr.ckpt", "--data", "data/eval.jsonl"];
    w.ok(&[&dec[..], &["--out", "plain.txt"]].concat());
    w.ok(&[&dec[..], &["--out", "zero.txt", "--lm", "lm.ckpt", "--lm-weight", "0"]].concat());
    assert_eq!(read(w.path("plain.txt")), read(w.path("zero.txt")));
}

#[test]
fn score_matches_library_on_fixture() {
    let w = Work::new();
    std::fs::write(w.path("hyp.txt"), "u1\tthe cat sat\nu2\ta dog\n").unwrap();
    std::fs::write(w.path("ref.txt"), "u1\tthe cat sat down\nu2\tthe dog\n").unwrap();
    let out = w.ok(&["score", "--hyps", "hyp.txt", "--refs", "ref.txt"]);
    let expected = score_corpus(
        &load_transcripts(w.path("hyp.txt")).unwrap(),
        &load_transcripts(w.path("ref.txt")).unwrap(),
    )
    .unwrap();
    assert_eq!(String::from_utf8_lossy(&out.stdout), expected.to_string());
    // 2 word errors (one deletion, one substitution) over 6 reference words
    assert!((expected.wer() - 2.0 / 6.0).abs() < 1e-12);
}

#[test]
fn reproduce_reports_all_rows_and_gates_exit_status() {
    let w = Work::new();
    let out = w.run(&["reproduce", "--seeds", "1", "--out", "rep"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    for row in ["baseline", "cycle", "ce1", "ce5", "oracle"] {
        assert!(stdout.contains(row), "{row} missing:\n{stdout}");
    }
    let mode_failed = stdout
        .lines()
        .any(|l| l.starts_with("FAIL") && !l.contains("fusion"));
    let expected = if mode_failed { 3 } else { 0 };
    assert_eq!(out.status.code(), Some(expected), "{stdout}");
    assert!(w.path("rep/report.txt").exists());
}
