//! `irvuln` command line. [`run`] parses arguments, dispatches and maps
//! failures to exit codes: 0 success, 1 usage, 2 data, 3 numeric.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use irvuln_core::corpus::{load_corpus, prepare_corpus, DEFAULT_MAX_LINES};
use irvuln_core::detector::{
    predictions_to_jsonl, run_gradient_suite, Detector, GradSuiteConfig, ModelConfig,
};
use irvuln_core::eval::{report_for_detector, run_experiment, ExperimentConfig, VocabScope};
use irvuln_core::synth::{generate_corpus, SynthConfig};
use irvuln_core::vocab::{build_corpus_vocabulary, Vocabulary};
use irvuln_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "irvuln",
    version,
    about = "Detect vulnerable code slices and vulnerable lines in LLVM IR"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic labeled corpus as JSON Lines.
    GenSynth(GenSynthArgs),
    /// Strip user-function call/define pairs and drop over-long programs.
    Prepare(PrepareArgs),
    /// Build the vocabulary file from a corpus.
    BuildVocab(BuildVocabArgs),
    /// Train both stages and write a model file.
    Train(TrainArgs),
    /// Predict code and line verdicts as JSON Lines.
    Predict(PredictArgs),
    /// Evaluate a trained model, or run the repeated train/test protocol.
    Evaluate(EvaluateArgs),
    /// Check analytic gradients against central finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    #[arg(long, default_value_t = 2000)]
    programs: usize,
    #[arg(long, default_value_t = 0.3)]
    vulnerable_fraction: f64,
    #[arg(long, default_value_t = 8)]
    min_lines: usize,
    #[arg(long, default_value_t = 60)]
    max_lines: usize,
    #[arg(long, default_value_t = 400)]
    token_pool: usize,
    /// Consecutive lines in the planted source-to-sink motif.
    #[arg(long, default_value_t = 3)]
    motif_span: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Inject call/define pairs for `prepare` to strip.
    #[arg(long)]
    with_user_functions: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PrepareArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Programs with this many lines or more are dropped.
    #[arg(long, default_value_t = DEFAULT_MAX_LINES)]
    max_lines: usize,
}

#[derive(Debug, Args)]
struct BuildVocabArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args)]
struct ModelArgs {
    /// Line embedding width K.
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
    /// Hidden width M of each LSTM direction.
    #[arg(long, default_value_t = 64)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 1)]
    blstm_layers: usize,
    #[arg(long, default_value_t = 64)]
    classifier_hidden: usize,
    #[arg(long, default_value_t = 64)]
    line_hidden: usize,
    #[arg(long, default_value_t = 0.05)]
    learning_rate: f64,
    #[arg(long, default_value_t = 30)]
    stage1_epochs: usize,
    #[arg(long, default_value_t = 30)]
    stage2_epochs: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Decision threshold on the class-1 probability.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Train LSTM cells without gate biases.
    #[arg(long)]
    no_lstm_bias: bool,
    /// Maximum gradient norm per SGD step; 0 disables clipping.
    #[arg(long, default_value_t = 1.0)]
    grad_clip: f64,
    /// Offset added to the initial LSTM forget-gate biases.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    forget_bias: f64,
}

impl ModelArgs {
    fn config(&self) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            blstm_layers: self.blstm_layers,
            classifier_hidden: self.classifier_hidden,
            line_hidden: self.line_hidden,
            learning_rate: self.learning_rate,
            stage1_epochs: self.stage1_epochs,
            stage2_epochs: self.stage2_epochs,
            seed: self.seed,
            decision_threshold: self.threshold,
            lstm_bias: !self.no_lstm_bias,
            grad_clip: self.grad_clip,
            forget_bias: self.forget_bias,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// CSV of mean loss per epoch; defaults to `<out>.loss.csv`.
    #[arg(long)]
    loss_log: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Vocabulary file that must match the one stored in the model.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Output JSONL; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScopeArg {
    Train,
    Full,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    input: PathBuf,
    /// Score this model on the whole input instead of running the protocol.
    #[arg(long)]
    model: Option<PathBuf>,
    /// CSV report path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    /// Build each run's vocabulary from the training split or the whole corpus.
    #[arg(long, value_enum, default_value_t = ScopeArg::Train)]
    vocab_scope: ScopeArg,
    /// Runs trained in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    model_args: ModelArgs,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Random programs per stage.
    #[arg(long, default_value_t = 3)]
    programs: usize,
    #[arg(long, default_value_t = 200)]
    min_coordinates: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
    /// Skip the two-layer BLSTM variant.
    #[arg(long)]
    no_stacked: bool,
}

enum Failure {
    Usage(String),
    Core(Error),
    Io(PathBuf, std::io::Error),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::Io(path.to_owned(), e))
}

fn gen_synth(a: GenSynthArgs) -> Result<(), Failure> {
    let cfg = SynthConfig {
        program_count: a.programs,
        vulnerable_fraction: a.vulnerable_fraction,
        min_lines: a.min_lines,
        max_lines: a.max_lines,
        token_pool_size: a.token_pool,
        motif_span: a.motif_span,
        seed: a.seed,
        with_user_functions: a.with_user_functions,
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let corpus = generate_corpus(&cfg)?;
    corpus.write_jsonl(&a.out)?;
    eprintln!(
        "wrote {} programs ({} vulnerable) to {}",
        corpus.len(),
        corpus.vulnerable_count(),
        a.out.display()
    );
    Ok(())
}

fn prepare(a: PrepareArgs) -> Result<(), Failure> {
    if a.max_lines == 0 {
        return Err(Failure::Usage("--max-lines must be positive".into()));
    }
    let corpus = load_corpus(&a.input)?;
    let (prepared, stats) = prepare_corpus(&corpus, a.max_lines)?;
    prepared.write_jsonl(&a.out)?;
    eprintln!(
        "kept {} of {} programs ({} lines stripped, {} programs lost all vulnerable lines, {} too long)",
        prepared.len(),
        corpus.len(),
        stats.lines_stripped,
        stats.dropped_lost_labels,
        stats.dropped_too_long
    );
    Ok(())
}

fn build_vocab(a: BuildVocabArgs) -> Result<(), Failure> {
    let corpus = load_corpus(&a.input)?;
    let vocab = build_corpus_vocabulary(&corpus)?;
    vocab.save(&a.out)?;
    eprintln!("{} tokens, digest {}", vocab.len(), vocab.digest_hex());
    Ok(())
}

fn model_config(m: &ModelArgs) -> Result<ModelConfig, Failure> {
    let cfg = m.config();
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let config = model_config(&a.model)?;
    let corpus = load_corpus(&a.input)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let (detector, report) = Detector::train(&corpus, vocab, config)?;
    detector.save(&a.out)?;
    let mut log = String::from("stage,epoch,mean_loss,samples\n");
    for (stage, h) in [(1, &report.stage1), (2, &report.stage2)] {
        for (e, (loss, n)) in h.epoch_losses.iter().zip(&h.epoch_samples).enumerate() {
            log.push_str(&format!("{stage},{e},{loss:.17e},{n}\n"));
        }
    }
    let log_path = a.loss_log.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    write_file(&log_path, log.as_bytes())?;
    eprintln!(
        "final loss: stage 1 {:.6}, stage 2 {:.6}; model written to {}",
        report.stage1.final_loss().unwrap_or(f64::NAN),
        report.stage2.final_loss().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn predict(a: PredictArgs) -> Result<(), Failure> {
    let detector = Detector::load(&a.model)?;
    if let Some(path) = &a.vocab {
        let supplied = Vocabulary::load(path)?;
        if supplied.digest() != detector.vocab.digest() {
            return Err(Error::DigestMismatch {
                expected: detector.vocab.digest_hex(),
                actual: supplied.digest_hex(),
            }
            .into());
        }
    }
    let corpus = load_corpus(&a.input)?;
    let out = predictions_to_jsonl(&detector.predict_all(&corpus.programs)?);
    match &a.out {
        Some(path) => write_file(path, out.as_bytes()),
        None => std::io::stdout()
            .write_all(out.as_bytes())
            .map_err(|e| Failure::Io("<stdout>".into(), e)),
    }
}

fn evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let corpus = load_corpus(&a.input)?;
    let report = match &a.model {
        Some(path) => report_for_detector(&Detector::load(path)?, &corpus, "all")?,
        None => {
            let model = model_config(&a.model_args)?;
            if a.repeats == 0 || a.jobs == 0 {
                return Err(Failure::Usage(
                    "--repeats and --jobs must be positive".into(),
                ));
            }
            if !(a.test_fraction > 0.0 && a.test_fraction < 1.0) {
                return Err(Failure::Usage("--test-fraction must lie in (0, 1)".into()));
            }
            let cfg = ExperimentConfig {
                model,
                repeats: a.repeats,
                test_fraction: a.test_fraction,
                vocab_scope: match a.vocab_scope {
                    ScopeArg::Train => VocabScope::Train,
                    ScopeArg::Full => VocabScope::Full,
                },
                jobs: a.jobs,
            };
            run_experiment(&corpus, &cfg)?
        }
    };
    write_file(&a.out, report.to_csv().as_bytes())?;
    print!("{}", report.to_table());
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Result<(), Failure> {
    let cfg = GradSuiteConfig {
        seed: a.seed,
        programs: a.programs,
        min_coordinates: a.min_coordinates,
        step: a.step,
        threshold: a.threshold,
        include_stacked: !a.no_stacked,
        ..Default::default()
    };
    if !(cfg.step > 0.0) || cfg.programs == 0 {
        return Err(Failure::Usage(
            "--step and --programs must be positive".into(),
        ));
    }
    let start = std::time::Instant::now();
    let report = run_gradient_suite(&cfg)?;
    for c in &report.cases {
        println!(
            "{:<32} lines {:>2}  checked {:>4}  kinks {:>2}  max rel err {:.3e}",
            c.name, c.lines, c.checked, c.skipped_kinks, c.max_relative_error
        );
    }
    println!(
        "max relative error {:.3e} (threshold {:.0e}) in {:.1}s",
        report.max_relative_error(),
        report.threshold,
        start.elapsed().as_secs_f64()
    );
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Numeric(format!(
            "gradient check failed: {:.3e} >= {:.0e}",
            report.max_relative_error(),
            report.threshold
        )))
    }
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Prepare(a) => prepare(a),
        Command::BuildVocab(a) => build_vocab(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::GradCheck(a) => grad_check(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Io(path, e)) => {
            eprintln!("error: {}: {e}", path.display());
            EXIT_DATA
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("error: {m}");
            EXIT_NUMERIC
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                EXIT_NUMERIC
            } else if matches!(e, Error::Config(_)) {
                EXIT_USAGE
            } else {
                EXIT_DATA
            }
        }
    }
}
