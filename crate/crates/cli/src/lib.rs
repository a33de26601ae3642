//! `kdlm` command line: teacher and student training, perplexity, N-best
//! rescoring, gradient checks and the ablation matrix.
//!
//! Exit codes: 0 on success, 1 on usage, config or data errors, 2 on
//! internal failures.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use kdlm_core::checkpoint::{load_checkpoint_for_vocab, save_checkpoint};
use kdlm_core::data::{encode, read_lines, synthetic_corpus, TokenStream, Vocabulary};
use kdlm_core::gradcheck::{self, model_grad_check, op_checks, run_op_check};
use kdlm_core::rescore::{self, RescoreConfig};
use kdlm_core::train::{self, perplexity, SoftLabelSource, TeacherEnsemble, TeacherRunner};
use kdlm_core::{DistillLossSpec, DropoutSpec, Error, LmModel, LossVariant, Result, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "kdlm", version, about = "Distilled recurrent language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// `key = value` run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory holding the configured train/valid/test files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Teacher checkpoints, comma separated.
    #[arg(long, value_delimiter = ',')]
    teacher: Vec<PathBuf>,
    /// Output checkpoint (or hypothesis file for `rescore`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-key override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one teacher member with cross-entropy.
    TrainTeacher(Common),
    /// Distill a student from a teacher ensemble.
    TrainStudent(Common),
    /// Perplexity of a checkpoint on a text file.
    EvalPpl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the model path with a `.vocab` extension.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Rescore an N-best file and report WER.
    Rescore {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        nbest: PathBuf,
        #[arg(long)]
        refs: PathBuf,
        /// LM weights to sweep, comma separated.
        #[arg(long, value_delimiter = ',')]
        lm_weights: Vec<f64>,
        /// Word insertion penalties to sweep, comma separated.
        #[arg(long, value_delimiter = ',')]
        wips: Vec<f64>,
    },
    /// Compare every autodiff op and the tiny model against finite differences.
    GradCheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_STEP)]
        step: f64,
    },
    /// Run the distillation ablation matrix.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Seeds per row, counted up from the configured seed.
        #[arg(long, default_value_t = 3)]
        runs: u64,
    },
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn dispatch<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    0
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    1
                }
            };
        }
    };
    match run(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
    }
}

fn emit(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Error::io("<stdout>", e))
}

fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::TrainTeacher(c) => train_teacher(&c, out),
        Command::TrainStudent(c) => train_student(&c, out),
        Command::EvalPpl {
            common,
            model,
            data,
            vocab,
        } => eval_ppl(&common, &model, &data, vocab.as_deref(), out),
        Command::Rescore {
            common,
            model,
            vocab,
            nbest,
            refs,
            lm_weights,
            wips,
        } => rescore_cmd(
            &common,
            &model,
            vocab.as_deref(),
            &nbest,
            &refs,
            &lm_weights,
            &wips,
            out,
        ),
        Command::GradCheck { seeds, tol, step } => grad_check(seeds, tol, step, out),
        Command::Ablate { common, runs } => ablate(&common, runs, out),
    }
}

/// File config, then `--set` overrides, then `--seed`.
fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&common.set)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn echo_config(out: &mut dyn Write, label: &str, cfg: &RunConfig) -> Result<()> {
    emit(out, format!("# resolved {label} config"))?;
    for (k, v) in cfg.entries() {
        emit(out, format!("{k} = {v}"))?;
    }
    emit(out, "# end config")
}

fn vocab_path_for(model: &Path) -> PathBuf {
    model.with_extension("vocab")
}

struct Corpus {
    vocab: Vocabulary,
    train: TokenStream,
    valid: TokenStream,
    test: Option<TokenStream>,
}

impl Corpus {
    fn from_lines(
        cfg: &RunConfig,
        vocab: Option<Vocabulary>,
        train: &[String],
        valid: &[String],
        test: Option<&[String]>,
    ) -> Result<Self> {
        let vocab = match vocab {
            Some(v) => v,
            None => Vocabulary::build(train, cfg.vocab_cap, cfg.rnn_unk_min_count)?,
        };
        Ok(Corpus {
            train: encode(train, &vocab),
            valid: encode(valid, &vocab),
            test: test.map(|t| encode(t, &vocab)),
            vocab,
        })
    }

    fn load(common: &Common, cfg: &RunConfig, vocab: Option<Vocabulary>) -> Result<Self> {
        let path = |name: &str| match &common.data_dir {
            Some(d) => d.join(name),
            None => PathBuf::from(name),
        };
        let train = read_lines(&path(&cfg.train_file))?;
        let valid = read_lines(&path(&cfg.valid_file))?;
        let test_path = path(&cfg.test_file);
        let test = if test_path.exists() {
            Some(read_lines(&test_path)?)
        } else {
            None
        };
        Self::from_lines(cfg, vocab, &train, &valid, test.as_deref())
    }

    fn synthetic(cfg: &RunConfig) -> Result<Self> {
        let train = synthetic_corpus(1, 300);
        let valid = synthetic_corpus(2, 60);
        let test = synthetic_corpus(3, 60);
        Self::from_lines(cfg, None, &train, &valid, Some(&test))
    }
}

fn report_ppl(out: &mut dyn Write, model: &LmModel, corpus: &Corpus, window: usize) -> Result<()> {
    let valid = perplexity(model, &corpus.valid, window)?;
    let line = match &corpus.test {
        Some(t) => format!("valid_ppl={valid:.6} test_ppl={:.6}", perplexity(model, t, window)?),
        None => format!("valid_ppl={valid:.6}"),
    };
    emit(out, line)
}

fn save_model(out: &mut dyn Write, model: &LmModel, vocab: &Vocabulary, path: &Path) -> Result<()> {
    save_checkpoint(model, path)?;
    vocab.save(&vocab_path_for(path))?;
    emit(
        out,
        format!("saved {} and {}", path.display(), vocab_path_for(path).display()),
    )
}

/// Trains one cross-entropy model, echoing each epoch.
fn train_member(cfg: &RunConfig, corpus: &Corpus, out: &mut dyn Write, prefix: &str) -> Result<LmModel> {
    if cfg.train.loss.variant.needs_teacher() {
        return Err(Error::config(format!(
            "teacher members train with ce_only, got loss {}",
            cfg.train.loss.variant
        )));
    }
    let model = LmModel::build(cfg.model.clone(), cfg.train.seed)?;
    let mut write_err = None;
    let outcome = train::train(model, &corpus.train, &corpus.valid, None, &cfg.train, |e| {
        if let Err(err) = emit(out, format!("{prefix}{e}")) {
            write_err.get_or_insert(err);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    Ok(outcome.best)
}

fn train_teacher(common: &Common, out: &mut dyn Write) -> Result<()> {
    let mut cfg = resolve_config(common)?;
    let corpus = Corpus::load(common, &cfg, None)?;
    cfg.model.vocab_size = corpus.vocab.len();
    cfg.validate()?;
    echo_config(out, "teacher", &cfg)?;
    let path = common.out.clone().unwrap_or_else(|| PathBuf::from("teacher.dlm"));
    fs::write(path.with_extension("cfg"), cfg.to_text()).map_err(|e| Error::io(path.with_extension("cfg"), e))?;
    let model = train_member(&cfg, &corpus, out, "")?;
    report_ppl(out, &model, &corpus, cfg.train.bptt_len)?;
    save_model(out, &model, &corpus.vocab, &path)
}

/// Teacher checkpoints from `--teacher`, or members trained in process from
/// `teacher_config`, one per ensemble seed.
fn build_ensemble(common: &Common, cfg: &RunConfig, corpus: &Corpus, out: &mut dyn Write) -> Result<TeacherEnsemble> {
    if !common.teacher.is_empty() {
        let members = common
            .teacher
            .iter()
            .map(|p| load_checkpoint_for_vocab(p, corpus.vocab.len()))
            .collect::<Result<Vec<_>>>()?;
        emit(out, format!("teacher: {} checkpoint(s)", members.len()))?;
        return TeacherEnsemble::new(members, Vec::new());
    }
    let Some(teacher_cfg) = &cfg.teacher_config else {
        return Err(Error::config("no teacher: pass --teacher or set teacher_config"));
    };
    let base = common.config.as_ref().and_then(|p| p.parent()).unwrap_or(Path::new(""));
    let mut tcfg = RunConfig::load(&base.join(teacher_cfg))?;
    tcfg.model.vocab_size = corpus.vocab.len();
    let seeds = if cfg.ensemble_seeds.is_empty() {
        vec![tcfg.train.seed]
    } else {
        cfg.ensemble_seeds.clone()
    };
    let mut members = Vec::new();
    for &seed in &seeds {
        tcfg.train.seed = seed;
        tcfg.validate()?;
        echo_config(out, &format!("teacher seed {seed}"), &tcfg)?;
        members.push(train_member(&tcfg, corpus, out, &format!("teacher[{seed}] "))?);
    }
    TeacherEnsemble::new(members, seeds)
}

fn teacher_vocab(common: &Common, cfg: &RunConfig) -> Result<Option<Vocabulary>> {
    match common.teacher.first() {
        Some(t) if vocab_path_for(t).exists() => Ok(Some(Vocabulary::load(&vocab_path_for(t), cfg.rnn_unk_min_count)?)),
        _ => Ok(None),
    }
}

fn train_student(common: &Common, out: &mut dyn Write) -> Result<()> {
    let mut cfg = resolve_config(common)?;
    let corpus = Corpus::load(common, &cfg, teacher_vocab(common, &cfg)?)?;
    cfg.model.vocab_size = corpus.vocab.len();
    cfg.validate()?;
    echo_config(out, "student", &cfg)?;
    let path = common.out.clone().unwrap_or_else(|| PathBuf::from("student.dlm"));
    fs::write(path.with_extension("cfg"), cfg.to_text()).map_err(|e| Error::io(path.with_extension("cfg"), e))?;
    let ensemble = if cfg.train.loss.variant.needs_teacher() {
        Some(build_ensemble(common, &cfg, &corpus, out)?)
    } else {
        None
    };
    let model = run_student(&cfg, &corpus, ensemble.as_ref(), |e| {
        let _ = writeln!(out, "{e}");
    })?;
    report_ppl(out, &model, &corpus, cfg.train.bptt_len)?;
    save_model(out, &model, &corpus.vocab, &path)
}

fn run_student(
    cfg: &RunConfig,
    corpus: &Corpus,
    ensemble: Option<&TeacherEnsemble>,
    on_epoch: impl FnMut(&train::EpochLog),
) -> Result<LmModel> {
    let model = LmModel::build(cfg.model.clone(), cfg.train.seed)?;
    let mut runner = match ensemble {
        Some(e) if cfg.train.loss.variant.needs_teacher() => Some(TeacherRunner::new(e, cfg.train.loss.temperature)?),
        _ => None,
    };
    let teacher = runner.as_mut().map(|r| r as &mut dyn SoftLabelSource);
    Ok(train::train(model, &corpus.train, &corpus.valid, teacher, &cfg.train, on_epoch)?.best)
}

fn load_model_and_vocab(cfg: &RunConfig, model: &Path, vocab: Option<&Path>) -> Result<(LmModel, Vocabulary)> {
    let vocab_path = vocab.map(Path::to_path_buf).unwrap_or_else(|| vocab_path_for(model));
    let vocab = Vocabulary::load(&vocab_path, cfg.rnn_unk_min_count)?;
    let model = load_checkpoint_for_vocab(model, vocab.len())?;
    Ok((model, vocab))
}

fn eval_ppl(common: &Common, model: &Path, data: &Path, vocab: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(common)?;
    echo_config(out, "eval", &cfg)?;
    let (model, vocab) = load_model_and_vocab(&cfg, model, vocab)?;
    let stream = encode(&read_lines(data)?, &vocab);
    let ppl = perplexity(&model, &stream, cfg.train.bptt_len)?;
    emit(out, format!("vocab_size={} tokens={}", vocab.len(), stream.len()))?;
    emit(out, format!("perplexity={ppl:.6}"))
}

#[allow(clippy::too_many_arguments)]
fn rescore_cmd(
    common: &Common,
    model: &Path,
    vocab: Option<&Path>,
    nbest: &Path,
    refs: &Path,
    lm_weights: &[f64],
    wips: &[f64],
    out: &mut dyn Write,
) -> Result<()> {
    let cfg = resolve_config(common)?;
    echo_config(out, "rescore", &cfg)?;
    let (model, vocab) = load_model_and_vocab(&cfg, model, vocab)?;
    let nbest = rescore::read_nbest(nbest)?;
    let refs = rescore::read_refs(refs)?;
    let scores = rescore::score_nbest(&model, &vocab, &nbest, cfg.rescore.oov_mode)?;
    let first_cfg = RescoreConfig {
        lm_weight: 0.0,
        word_insertion_penalty: 0.0,
        ..cfg.rescore
    };
    let first = rescore::combine_and_select(&nbest, &scores, &first_cfg)?;
    emit(
        out,
        format!("first_pass {}", rescore::wer(&refs, &rescore::selected_words(&first))?),
    )?;
    let mut chosen = cfg.rescore;
    if !lm_weights.is_empty() || !wips.is_empty() {
        let lw = if lm_weights.is_empty() {
            vec![cfg.rescore.lm_weight]
        } else {
            lm_weights.to_vec()
        };
        let wp = if wips.is_empty() {
            vec![cfg.rescore.word_insertion_penalty]
        } else {
            wips.to_vec()
        };
        let points = rescore::sweep(&nbest, &scores, &refs, &lw, &wp, cfg.rescore.oov_mode)?;
        let mut best = &points[0];
        for p in &points {
            emit(
                out,
                format!(
                    "sweep lm_weight={} wip={} {}",
                    p.lm_weight, p.word_insertion_penalty, p.report
                ),
            )?;
            if p.report.wer_percent < best.report.wer_percent {
                best = p;
            }
        }
        chosen.lm_weight = best.lm_weight;
        chosen.word_insertion_penalty = best.word_insertion_penalty;
    }
    let selected = rescore::combine_and_select(&nbest, &scores, &chosen)?;
    emit(
        out,
        format!(
            "rescored lm_weight={} wip={} {}",
            chosen.lm_weight,
            chosen.word_insertion_penalty,
            rescore::wer(&refs, &rescore::selected_words(&selected))?
        ),
    )?;
    if let Some(path) = &common.out {
        let text: String = selected
            .iter()
            .map(|(u, e)| format!("{u}\t{}\n", e.words.join(" ")))
            .collect();
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn grad_check(seeds: u64, tol: f64, step: f64, out: &mut dyn Write) -> Result<()> {
    if seeds == 0 || !(step > 0.0) || !(tol > 0.0) {
        return Err(Error::config("grad-check needs seeds >= 1, step > 0 and tol > 0"));
    }
    let seeds: Vec<u64> = (0..seeds).collect();
    emit(out, format!("{:<24} {:>12}  result", "op", "max_rel_err"))?;
    let mut failed = Vec::new();
    for check in op_checks() {
        let r = run_op_check(&check, &seeds, step, tol)?;
        emit(
            out,
            format!("{:<24} {:>12.3e}  {}", check.name, r.max_rel_err, verdict(r.pass)),
        )?;
        if !r.pass {
            failed.push(check.name.to_string());
        }
    }
    let mut worst = 0.0f64;
    let mut pass = true;
    for &s in &seeds {
        let r = model_grad_check(s, step, tol)?;
        worst = worst.max(r.max_rel_err);
        pass &= r.pass;
    }
    emit(out, format!("{:<24} {:>12.3e}  {}", "tiny_model", worst, verdict(pass)))?;
    if !pass {
        failed.push("tiny_model".into());
    }
    if failed.is_empty() {
        emit(out, format!("all passed at tol {tol:e} over {} seeds", seeds.len()))
    } else {
        Err(Error::Numeric(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Dropout used by the regularized rows: the teacher's, or the reference
/// teacher rates when the teacher trained without any.
fn regularized_dropout(ensemble: &TeacherEnsemble) -> DropoutSpec {
    let d = ensemble.members()[0].config().dropout;
    if d.is_disabled() {
        DropoutSpec {
            input_rate: 0.4,
            output_rate: 0.29,
            hidden_rate: 0.225,
            embed_rate: 0.1,
            other_rate: 0.4,
            ar_weight: 2.0,
            tar_weight: 1.0,
        }
    } else {
        d
    }
}

struct AblationRow {
    name: &'static str,
    cfg: RunConfig,
    teacher: bool,
}

fn ablation_rows(base: &RunConfig, reg: DropoutSpec) -> Vec<AblationRow> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let rates_only = DropoutSpec {
        ar_weight: 0.0,
        tar_weight: 0.0,
        ..reg
    };
    vec![
        AblationRow {
            name: "student",
            cfg: base.clone(),
            teacher: true,
        },
        AblationRow {
            name: "-cross-entropy loss",
            cfg: with(&|c| c.train.loss.variant = LossVariant::KlOnly),
            teacher: true,
        },
        AblationRow {
            // 0.1·CE + KL, written as 1.1 · fixed_interp(1/11)
            name: "-trust regularization",
            cfg: with(&|c| {
                c.train.loss = DistillLossSpec {
                    variant: LossVariant::FixedInterp,
                    alpha: 1.0 / 11.0,
                    ..c.train.loss
                };
                c.train.lr *= 1.1;
            }),
            teacher: true,
        },
        AblationRow {
            name: "+dropout",
            cfg: with(&|c| {
                c.model.dropout = DropoutSpec {
                    ar_weight: c.model.dropout.ar_weight,
                    tar_weight: c.model.dropout.tar_weight,
                    ..rates_only
                }
            }),
            teacher: true,
        },
        AblationRow {
            name: "+activation regularization",
            cfg: with(&|c| {
                c.model.dropout.ar_weight = reg.ar_weight;
                c.model.dropout.tar_weight = reg.tar_weight;
            }),
            teacher: true,
        },
        AblationRow {
            name: "-knowledge distillation",
            cfg: with(&|c| {
                c.train.loss.variant = LossVariant::CeOnly;
                c.model.dropout = reg;
            }),
            teacher: false,
        },
    ]
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn ablate(common: &Common, runs: u64, out: &mut dyn Write) -> Result<()> {
    if runs == 0 {
        return Err(Error::config("ablate needs at least one run per row"));
    }
    let mut cfg = resolve_config(common)?;
    let corpus = match &common.data_dir {
        Some(_) => Corpus::load(common, &cfg, teacher_vocab(common, &cfg)?)?,
        None => Corpus::synthetic(&cfg)?,
    };
    cfg.model.vocab_size = corpus.vocab.len();
    if !cfg.train.loss.variant.needs_teacher() {
        cfg.train.loss.variant = LossVariant::TrustReg;
    }
    cfg.validate()?;
    echo_config(out, "ablation base", &cfg)?;
    emit(
        out,
        format!(
            "corpus: {} ({} train / {} valid tokens, vocab {})",
            if common.data_dir.is_some() {
                "data-dir"
            } else {
                "built-in synthetic"
            },
            corpus.train.len(),
            corpus.valid.len(),
            corpus.vocab.len()
        ),
    )?;
    let mut quiet = std::io::sink();
    let ensemble = build_ensemble(common, &cfg, &corpus, &mut quiet)?;
    let rows = ablation_rows(&cfg, regularized_dropout(&ensemble));
    emit(
        out,
        format!("{:<28} {:>10} {:>10}  per-run valid", "row", "valid_ppl", "test_ppl"),
    )?;
    let window = cfg.train.bptt_len;
    let mut summary = Vec::new();
    for row in &rows {
        let mut valid = Vec::new();
        let mut test = Vec::new();
        for k in 0..runs {
            let mut c = row.cfg.clone();
            c.train.seed = cfg.train.seed + k;
            c.validate()?;
            let model = run_student(&c, &corpus, row.teacher.then_some(&ensemble), |_| {})?;
            valid.push(perplexity(&model, &corpus.valid, window)?);
            if let Some(t) = &corpus.test {
                test.push(perplexity(&model, t, window)?);
            }
        }
        let test_col = if test.is_empty() {
            "-".to_string()
        } else {
            format!("{:.4}", mean(&test))
        };
        let per_run: Vec<String> = valid.iter().map(|v| format!("{v:.4}")).collect();
        emit(
            out,
            format!(
                "{:<28} {:>10.4} {:>10}  {}",
                row.name,
                mean(&valid),
                test_col,
                per_run.join("/")
            ),
        )?;
        summary.push(mean(&valid));
    }
    let trend = |a: usize, b: usize| {
        if summary[a] <= summary[b] {
            "holds"
        } else {
            "does not hold"
        }
    };
    emit(
        out,
        format!("trend valid: student <= -cross-entropy loss {}", trend(0, 1)),
    )?;
    emit(
        out,
        format!(
            "trend valid: -cross-entropy loss <= -trust regularization {}",
            trend(1, 2)
        ),
    )?;
    emit(
        out,
        format!("trend valid: student <= -knowledge distillation {}", trend(0, 5)),
    )
}
