//! Confusion counts, metrics and the repeated train/test protocol.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Program};
use crate::detector::{Detector, ModelConfig, Prediction};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::vocab::{build_corpus_vocabulary, Vocabulary};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

/// Counts with the vulnerable class as positive.
pub fn confusion(predicted: &[bool], actual: &[bool]) -> Result<ConfusionCounts> {
    if predicted.len() != actual.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            predicted.len(),
            actual.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &a) in predicted.iter().zip(actual) {
        c.record(p, a);
    }
    Ok(c)
}

/// Which metrics came out as 0/0 and were reported as 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Undefined {
    pub accuracy: bool,
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
    pub fpr: bool,
    pub fnr: bool,
}

impl Undefined {
    pub fn any(&self) -> bool {
        self.accuracy || self.precision || self.recall || self.f1 || self.fpr || self.fnr
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub undefined: Undefined,
}

fn ratio(num: f64, den: f64, undefined: &mut bool) -> f64 {
    if den == 0.0 {
        *undefined = true;
        0.0
    } else {
        num / den
    }
}

pub fn metrics(c: ConfusionCounts) -> MetricsReport {
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let mut u = Undefined::default();
    let accuracy = ratio(tp + tn, tp + fp + fn_ + tn, &mut u.accuracy);
    let precision = ratio(tp, tp + fp, &mut u.precision);
    let recall = ratio(tp, tp + fn_, &mut u.recall);
    let f1 = if u.precision || u.recall {
        u.f1 = true;
        0.0
    } else {
        ratio(2.0 * precision * recall, precision + recall, &mut u.f1)
    };
    let fpr = ratio(fp, fp + tn, &mut u.fpr);
    let fnr = ratio(fn_, fn_ + tp, &mut u.fnr);
    MetricsReport {
        accuracy,
        precision,
        recall,
        f1,
        fpr,
        fnr,
        undefined: u,
    }
}

/// Where the vocabulary for each run comes from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabScope {
    /// Tokens of the training split only; unseen test tokens are dropped.
    #[default]
    Train,
    /// Tokens of the whole corpus.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub repeats: usize,
    pub test_fraction: f64,
    pub vocab_scope: VocabScope,
    /// Runs trained concurrently; results do not depend on it.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            repeats: 5,
            test_fraction: 0.2,
            vocab_scope: VocabScope::Train,
            jobs: 1,
        }
    }
}

/// Splits by program, stratified by label, seeded from `seed`.
///
/// Each class contributes `round(n · test_fraction)` programs to the test
/// split; both splits keep corpus order.
pub fn stratified_split(
    corpus: &Corpus,
    test_fraction: f64,
    seed: u64,
) -> Result<(Corpus, Corpus)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test_fraction {test_fraction} not in (0, 1)"
        )));
    }
    let mut rng = stream(seed, Stream::Split);
    let mut test_mask = vec![false; corpus.len()];
    for class in [1u8, 0] {
        let mut idx: Vec<usize> = (0..corpus.len())
            .filter(|&i| corpus.programs[i].label == class)
            .collect();
        let take = (idx.len() as f64 * test_fraction).round() as usize;
        if take == 0 || take == idx.len() {
            return Err(Error::TooSmall(format!(
                "{} programs with label {class} cannot fill both splits at test fraction {test_fraction}",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        for &i in &idx[..take] {
            test_mask[i] = true;
        }
    }
    let pick = |want: bool| -> Vec<Program> {
        corpus
            .programs
            .iter()
            .zip(&test_mask)
            .filter(|&(_, &t)| t == want)
            .map(|(p, _)| p.clone())
            .collect()
    };
    Ok((
        Corpus::new(pick(false), format!("{} (train split)", corpus.provenance))?,
        Corpus::new(pick(true), format!("{} (test split)", corpus.provenance))?,
    ))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    /// Over every program.
    pub code: ConfusionCounts,
    /// Over every line of the programs labeled vulnerable.
    pub line: ConfusionCounts,
}

/// Scores predictions against ground truth. Line counts use gated flags and
/// only programs whose true label is vulnerable.
pub fn score(programs: &[Program], predictions: &[Prediction]) -> Result<EvalCounts> {
    if programs.len() != predictions.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} programs",
            predictions.len(),
            programs.len()
        )));
    }
    let mut counts = EvalCounts::default();
    for (p, pred) in programs.iter().zip(predictions) {
        counts.code.record(pred.code_vulnerable, p.is_vulnerable());
        if p.is_vulnerable() {
            counts.line += confusion(&pred.line_flags, &p.line_labels())?;
        }
    }
    Ok(counts)
}

pub fn evaluate_detector(detector: &Detector, corpus: &Corpus) -> Result<EvalCounts> {
    let predictions = detector.predict_all(&corpus.programs)?;
    score(&corpus.programs, &predictions)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub counts: EvalCounts,
    pub code: MetricsReport,
    pub line: MetricsReport,
}

impl RunResult {
    fn new(run: usize, seed: u64, counts: EvalCounts) -> Self {
        RunResult {
            run,
            seed,
            counts,
            code: metrics(counts.code),
            line: metrics(counts.line),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    /// Label written to the CSV `split` column.
    pub split: String,
    pub runs: Vec<RunResult>,
}

fn run_once(
    train: &Corpus,
    test: &Corpus,
    full_vocab: Option<&Vocabulary>,
    cfg: &ExperimentConfig,
    run: usize,
) -> Result<RunResult> {
    let seed = cfg.model.seed ^ run as u64;
    let vocab = match full_vocab {
        Some(v) => v.clone(),
        None => build_corpus_vocabulary(train)?,
    };
    let model = ModelConfig {
        seed,
        ..cfg.model.clone()
    };
    let (detector, _) = Detector::train(train, vocab, model)?;
    let counts = evaluate_detector(&detector, test)?;
    log::info!(
        "run {run} (seed {seed}): code {:?}, line {:?}",
        counts.code,
        counts.line
    );
    Ok(RunResult::new(run, seed, counts))
}

/// Trains and evaluates `repeats` independent detectors on one stratified split.
///
/// The split comes from the master seed; run `r` trains with seed `seed ^ r`.
pub fn run_experiment(corpus: &Corpus, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.model.validate()?;
    if cfg.repeats == 0 {
        return Err(Error::Config("repeats must be positive".into()));
    }
    let (train, test) = stratified_split(corpus, cfg.test_fraction, cfg.model.seed)?;
    let full_vocab = match cfg.vocab_scope {
        VocabScope::Full => Some(build_corpus_vocabulary(corpus)?),
        VocabScope::Train => None,
    };
    let go = |r: usize| run_once(&train, &test, full_vocab.as_ref(), cfg, r);
    let runs = if cfg.jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            (0..cfg.repeats)
                .into_par_iter()
                .map(go)
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        (0..cfg.repeats).map(go).collect::<Result<Vec<_>>>()?
    };
    Ok(ExperimentReport {
        split: "test".into(),
        runs,
    })
}

/// Single-row report for an already trained detector.
pub fn report_for_detector(
    detector: &Detector,
    corpus: &Corpus,
    split: &str,
) -> Result<ExperimentReport> {
    let counts = evaluate_detector(detector, corpus)?;
    Ok(ExperimentReport {
        split: split.into(),
        runs: vec![RunResult::new(0, detector.config.seed, counts)],
    })
}

pub const CSV_HEADER: &str = "run,split,acc,precision,recall,f1,fpr,fnr,scope";

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

impl ExperimentReport {
    fn rows(&self) -> impl Iterator<Item = (usize, &'static str, &MetricsReport)> {
        self.runs
            .iter()
            .flat_map(|r| [(r.run, "code", &r.code), (r.run, "line", &r.line)])
    }

    /// CSV with percentages to two decimals; 0/0 metrics appear as 0.00.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for (run, scope, m) in self.rows() {
            writeln!(
                out,
                "{run},{},{},{},{},{},{},{},{scope}",
                self.split,
                pct(m.accuracy),
                pct(m.precision),
                pct(m.recall),
                pct(m.f1),
                pct(m.fpr),
                pct(m.fnr)
            )
            .expect("writing to a String");
        }
        out
    }

    /// Aligned table; undefined metrics are marked with `*`.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>3}  {:<5}  {:>8}  {:>9}  {:>8}  {:>8}  {:>8}  {:>8}\n",
            "run", "scope", "acc%", "prec%", "recall%", "f1%", "fpr%", "fnr%"
        );
        let mut flagged = false;
        for (run, scope, m) in self.rows() {
            let u = m.undefined;
            let cell = |v: f64, undef: bool| format!("{}{}", pct(v), if undef { "*" } else { "" });
            flagged |= u.any();
            writeln!(
                out,
                "{run:>3}  {scope:<5}  {:>8}  {:>9}  {:>8}  {:>8}  {:>8}  {:>8}",
                cell(m.accuracy, u.accuracy),
                cell(m.precision, u.precision),
                cell(m.recall, u.recall),
                cell(m.f1, u.f1),
                cell(m.fpr, u.fpr),
                cell(m.fnr, u.fnr)
            )
            .expect("writing to a String");
        }
        if flagged {
            out.push_str("* undefined (0/0), shown as 0\n");
        }
        out
    }
}
