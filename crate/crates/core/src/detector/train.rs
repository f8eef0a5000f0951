//! Class-balanced SGD training for both stages, one sequence per step.

use rand::seq::SliceRandom;
use rand::Rng;

use super::config::ModelConfig;
use super::model::{
    stage1_forward, stage1_loss_and_grad, stage2_loss_and_grad, Stage1Model, Stage2Model,
};
use crate::corpus::{Corpus, Program};
use crate::digest::to_hex;
use crate::error::{Error, Result};
use crate::nn::params::{clip_global_norm, sgd_step, Parameters};
use crate::rng::{stream, Stream};
use crate::vocab::{vectorize_program, BowVector, Vocabulary};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingHistory {
    /// Mean loss over each epoch's samples.
    pub epoch_losses: Vec<f64>,
    pub epoch_samples: Vec<usize>,
}

impl TrainingHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// All of the minority group plus an equal-size uniform sample (without
/// replacement) of the majority group, shuffled.
pub fn balanced_sample<T: Clone, R: Rng>(a: &[T], b: &[T], rng: &mut R) -> Vec<T> {
    let (minority, majority) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut out = minority.to_vec();
    out.extend(
        rand::seq::index::sample(rng, majority.len(), minority.len())
            .into_iter()
            .map(|i| majority[i].clone()),
    );
    out.shuffle(rng);
    out
}

fn mask_lstm_biases(grads: &mut Stage1Model) {
    for layer in &mut grads.blstm.layers {
        layer.forward.bias.fill(0.0);
        layer.backward.bias.fill(0.0);
    }
}

fn check_digest(expected: u64, vocab: &Vocabulary) -> Result<()> {
    let actual = vocab.digest();
    if expected != actual {
        return Err(Error::DigestMismatch {
            expected: to_hex(expected),
            actual: to_hex(actual),
        });
    }
    Ok(())
}

/// Trains encoder, BLSTM and whole-code classifier jointly.
///
/// Each epoch draws a class-balanced program list from the
/// [`Stream::Stage1Sampling`] stream and takes one SGD step per program.
pub fn train_stage1(
    corpus: &Corpus,
    vocab: &Vocabulary,
    config: &ModelConfig,
) -> Result<(Stage1Model, TrainingHistory)> {
    config.validate()?;
    let vulnerable: Vec<usize> = (0..corpus.len())
        .filter(|&i| corpus.programs[i].is_vulnerable())
        .collect();
    let clean: Vec<usize> = (0..corpus.len())
        .filter(|&i| !corpus.programs[i].is_vulnerable())
        .collect();
    if vulnerable.is_empty() || clean.is_empty() {
        return Err(Error::SingleClass(format!(
            "{} vulnerable and {} clean programs; both classes are required",
            vulnerable.len(),
            clean.len()
        )));
    }
    let vectors: Vec<Vec<BowVector>> = corpus
        .programs
        .iter()
        .map(|p| vectorize_program(vocab, p))
        .collect();

    let mut model = Stage1Model::init(
        vocab.len(),
        vocab.digest(),
        config,
        &mut stream(config.seed, Stream::Stage1Init),
    );
    let mut grads = model.zeros_like();
    let mut rng = stream(config.seed, Stream::Stage1Sampling);
    let mut history = TrainingHistory::default();
    for epoch in 0..config.stage1_epochs {
        let order = balanced_sample(&vulnerable, &clean, &mut rng);
        let mut total = 0.0;
        for &i in &order {
            let program = &corpus.programs[i];
            grads.zero();
            let loss =
                stage1_loss_and_grad(&model, &vectors[i], program.label as usize, &mut grads)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    program_id: program.id.clone(),
                });
            }
            if !config.lstm_bias {
                mask_lstm_biases(&mut grads);
            }
            clip_global_norm(&mut grads, config.grad_clip);
            sgd_step(&mut model, &grads, config.learning_rate)?;
            total += loss;
        }
        let mean = total / order.len() as f64;
        log::debug!("stage 1 epoch {epoch}: mean loss {mean:.6}");
        history.epoch_losses.push(mean);
        history.epoch_samples.push(order.len());
    }
    Ok((model, history))
}

/// One line of a vulnerable program, addressed by program position and line index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LineRef {
    pub program: usize,
    pub line: usize,
}

/// Splits the lines of the given programs into (vulnerable, good).
pub fn partition_lines(programs: &[&Program]) -> (Vec<LineRef>, Vec<LineRef>) {
    let mut vulnerable = Vec::new();
    let mut good = Vec::new();
    for (pi, p) in programs.iter().enumerate() {
        for (t, is_vuln) in p.line_labels().into_iter().enumerate() {
            let r = LineRef {
                program: pi,
                line: t,
            };
            if is_vuln {
                vulnerable.push(r);
            } else {
                good.push(r);
            }
        }
    }
    (vulnerable, good)
}

/// Trains the line classifier on vulnerable programs with `stage1` frozen.
///
/// Contexts are computed once from the frozen BLSTM. Each epoch uses every
/// vulnerable line and an equal number of good lines sampled from the
/// [`Stream::Stage2Sampling`] stream.
pub fn train_stage2(
    corpus: &Corpus,
    vocab: &Vocabulary,
    stage1: &Stage1Model,
    config: &ModelConfig,
) -> Result<(Stage2Model, TrainingHistory)> {
    config.validate()?;
    check_digest(stage1.vocab_digest, vocab)?;
    let programs: Vec<&Program> = corpus
        .programs
        .iter()
        .filter(|p| p.is_vulnerable())
        .collect();
    if programs.is_empty() {
        return Err(Error::SingleClass(
            "no vulnerable programs to train the line classifier".into(),
        ));
    }
    let mut contexts = Vec::with_capacity(programs.len());
    let mut vectors = Vec::with_capacity(programs.len());
    for p in &programs {
        let v = vectorize_program(vocab, p);
        let (_, out) = stage1_forward(stage1, &v)?;
        contexts.push((0..p.len()).map(|t| out.context(t)).collect::<Vec<_>>());
        vectors.push(v);
    }
    let (vulnerable, good) = partition_lines(&programs);

    let mut model = Stage2Model::init(
        2 * stage1.hidden_dim(),
        vocab.len(),
        vocab.digest(),
        config,
        &mut stream(config.seed, Stream::Stage2Init),
    );
    let mut grads = model.zeros_like();
    let mut rng = stream(config.seed, Stream::Stage2Sampling);
    let mut history = TrainingHistory::default();
    for epoch in 0..config.stage2_epochs {
        let order = balanced_sample(&vulnerable, &good, &mut rng);
        let mut total = 0.0;
        for r in &order {
            let label = programs[r.program].line_labels()[r.line] as usize;
            grads.zero();
            let loss = stage2_loss_and_grad(
                &model,
                &contexts[r.program][r.line],
                &vectors[r.program][r.line],
                label,
                &mut grads,
            )?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    program_id: programs[r.program].id.clone(),
                });
            }
            clip_global_norm(&mut grads, config.grad_clip);
            sgd_step(&mut model, &grads, config.learning_rate)?;
            total += loss;
        }
        let mean = total / order.len() as f64;
        log::debug!("stage 2 epoch {epoch}: mean loss {mean:.6}");
        history.epoch_losses.push(mean);
        history.epoch_samples.push(order.len());
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::build_corpus_vocabulary;

    fn program(id: &str, lines: &[&str], vuln: &[usize]) -> Program {
        let label = u8::from(!vuln.is_empty());
        Program::new(
            id,
            lines.iter().map(|s| s.to_string()).collect(),
            label,
            vuln.to_vec(),
        )
        .unwrap()
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            embed_dim: 6,
            hidden_dim: 5,
            classifier_hidden: 6,
            line_hidden: 6,
            stage1_epochs: 3,
            stage2_epochs: 3,
            seed: 9,
            ..Default::default()
        }
    }

    fn mini_corpus() -> Corpus {
        Corpus::new(
            vec![
                program("a", &["x = load p", "sink x", "ret"], &[1]),
                program("b", &["y = add 1", "ret"], &[]),
                program("c", &["x = load p", "z = add x", "sink z", "ret"], &[2, 3]),
                program("d", &["sink q", "ret"], &[]),
                program("e", &["w = mul 2", "w = mul 3", "ret"], &[]),
            ],
            "test",
        )
        .unwrap()
    }

    #[test]
    fn balanced_sample_takes_all_minority() {
        let mut rng = stream(1, Stream::Stage1Sampling);
        let a = [1, 2];
        let b = [10, 11, 12, 13, 14];
        let s = balanced_sample(&a, &b, &mut rng);
        assert_eq!(s.len(), 4);
        assert!(s.contains(&1) && s.contains(&2));
        assert_eq!(s.iter().filter(|&&v| v >= 10).count(), 2);
        let s = balanced_sample(&b, &a, &mut rng);
        assert_eq!(s.len(), 4);
    }

    #[test]
    fn stage2_epoch_size_is_twice_vulnerable_lines() {
        let corpus = mini_corpus();
        let vocab = build_corpus_vocabulary(&corpus).unwrap();
        let cfg = tiny_config();
        let (s1, h1) = train_stage1(&corpus, &vocab, &cfg).unwrap();
        assert_eq!(h1.epoch_samples, vec![4; 3]);
        let (_, h2) = train_stage2(&corpus, &vocab, &s1, &cfg).unwrap();
        // 3 vulnerable lines across the two vulnerable programs, 4 good ones
        assert_eq!(h2.epoch_samples, vec![6; 3]);
    }

    #[test]
    fn single_class_corpus_rejected() {
        let corpus = Corpus::new(
            vec![
                program("b", &["y = add 1"], &[]),
                program("e", &["ret"], &[]),
            ],
            "t",
        )
        .unwrap();
        let vocab = build_corpus_vocabulary(&corpus).unwrap();
        let err = train_stage1(&corpus, &vocab, &tiny_config()).unwrap_err();
        assert!(err.to_string().contains("single-class corpus"), "{err}");
    }

    #[test]
    fn stage2_rejects_foreign_vocabulary() {
        let corpus = mini_corpus();
        let vocab = build_corpus_vocabulary(&corpus).unwrap();
        let cfg = tiny_config();
        let (s1, _) = train_stage1(&corpus, &vocab, &cfg).unwrap();
        let other =
            Vocabulary::from_tokens(vocab.tokens().iter().rev().cloned().collect()).unwrap();
        assert!(matches!(
            train_stage2(&corpus, &other, &s1, &cfg),
            Err(Error::DigestMismatch { .. })
        ));
    }

    #[test]
    fn training_is_deterministic_and_leaves_stage1_untouched() {
        let corpus = mini_corpus();
        let vocab = build_corpus_vocabulary(&corpus).unwrap();
        let cfg = tiny_config();
        let (s1a, ha) = train_stage1(&corpus, &vocab, &cfg).unwrap();
        let (s1b, hb) = train_stage1(&corpus, &vocab, &cfg).unwrap();
        assert_eq!(s1a, s1b);
        assert_eq!(
            ha.epoch_losses
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
            hb.epoch_losses
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        );
        let before = s1a.clone();
        train_stage2(&corpus, &vocab, &s1a, &cfg).unwrap();
        assert_eq!(before, s1a);
    }

    #[test]
    fn disabled_lstm_bias_stays_zero() {
        let corpus = mini_corpus();
        let vocab = build_corpus_vocabulary(&corpus).unwrap();
        let cfg = ModelConfig {
            lstm_bias: false,
            ..tiny_config()
        };
        let (s1, _) = train_stage1(&corpus, &vocab, &cfg).unwrap();
        for layer in &s1.blstm.layers {
            assert!(layer
                .forward
                .bias
                .iter()
                .chain(&layer.backward.bias)
                .all(|&b| b == 0.0));
        }
    }
}
