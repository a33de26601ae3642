use std::path::Path;

use kdlm_cli::dispatch;
use kdlm_core::checkpoint::save_checkpoint;
use kdlm_core::data::Vocabulary;
use kdlm_core::{LmModel, ModelConfig};

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("kdlm").chain(args.iter().copied());
    let code = dispatch(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

fn write_corpus(dir: &Path) {
    let lines = "a b c d e\nb a d c\nf g a e\n".repeat(4);
    for f in ["train.txt", "valid.txt", "test.txt"] {
        std::fs::write(dir.join(f), &lines).unwrap();
    }
}

#[test]
fn grad_check_passes() {
    let (code, out, err) = run(&["grad-check", "--seeds", "2"]);
    assert_eq!(code, 0, "{out}{err}");
    assert!(out.contains("tiny_model"));
    assert!(!out.contains("FAIL"));
}

#[test]
fn zeroed_model_has_vocabulary_size_perplexity() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = Vocabulary::build(&["a b c d e f g"], 7, 0).unwrap();
    assert_eq!(vocab.len(), 10);
    let mut m = LmModel::build(ModelConfig::default(), 0).unwrap();
    m.zero_parameters();
    let model = dir.path().join("uniform.dlm");
    save_checkpoint(&m, &model).unwrap();
    vocab.save(&dir.path().join("uniform.vocab")).unwrap();
    let data = dir.path().join("eval.txt");
    std::fs::write(&data, "a b zz c\ng f\n").unwrap();
    let (code, out, err) = run(&[
        "eval-ppl",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.starts_with("# resolved eval config"));
    let ppl: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("perplexity="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((ppl - 10.0).abs() < 1e-4, "{ppl}");
}

#[test]
fn bad_config_value_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "# comment\nloss = trust_reg\nalpha = banana\n").unwrap();
    let (code, _, err) = run(&["train-teacher", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["no-such-command"]).0, 1);
    assert_eq!(run(&["train-teacher", "--set", "no_such_key=1"]).0, 1);
    assert_eq!(run(&["--help"]).0, 0);
}

#[test]
fn teacher_then_student_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    let d = dir.path().to_str().unwrap();
    let teacher = dir.path().join("t.dlm");
    let (code, out, err) = run(&[
        "train-teacher",
        "--config",
        configs().join("tiny-teacher.cfg").to_str().unwrap(),
        "--data-dir",
        d,
        "--set",
        "epochs=2",
        "--out",
        teacher.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("epoch=2 "));
    assert!(dir.path().join("t.vocab").exists() && dir.path().join("t.cfg").exists());
    let student = dir.path().join("s.dlm");
    let (code, out, err) = run(&[
        "train-student",
        "--config",
        configs().join("tiny-student.cfg").to_str().unwrap(),
        "--data-dir",
        d,
        "--teacher",
        teacher.to_str().unwrap(),
        "--seed",
        "4",
        "--set",
        "epochs=2",
        "--out",
        student.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("seed = 4"));
    assert!(out.contains("test_ppl="));

    let nbest = dir.path().join("nbest.txt");
    let refs = dir.path().join("refs.txt");
    std::fs::write(&nbest, "u1\t1\t-1\t-2\tb a d\nu1\t2\t-1.5\t-2\tb a d c\n").unwrap();
    std::fs::write(&refs, "u1\tb a d c\n").unwrap();
    let hyp = dir.path().join("hyp.txt");
    let (code, out, err) = run(&[
        "rescore",
        "--model",
        student.to_str().unwrap(),
        "--nbest",
        nbest.to_str().unwrap(),
        "--refs",
        refs.to_str().unwrap(),
        "--lm-weights",
        "0,1",
        "--out",
        hyp.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("first_pass WER=25.00% S=0 I=0 D=1 N=4"), "{out}");
    assert!(out.lines().filter(|l| l.starts_with("sweep ")).count() == 2);
    assert!(std::fs::read_to_string(hyp).unwrap().starts_with("u1\t"));
}

#[test]
fn ablation_prints_every_row() {
    let (code, out, err) = run(&[
        "ablate",
        "--config",
        configs().join("tiny-student.cfg").to_str().unwrap(),
        "--runs",
        "1",
        "--set",
        "epochs=1",
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("built-in synthetic"));
    for row in [
        "student",
        "-cross-entropy loss",
        "-trust regularization",
        "+dropout",
        "+activation regularization",
        "-knowledge distillation",
    ] {
        assert!(out.lines().any(|l| l.starts_with(row)), "missing {row}\n{out}");
    }
}
