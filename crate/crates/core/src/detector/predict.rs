use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::{stage1_forward, stage2_forward, Stage1Model, Stage2Model};
use super::train::{train_stage1, train_stage2, TrainingHistory};
use crate::corpus::{Corpus, Program};
use crate::digest::to_hex;
use crate::error::{Error, Result};
use crate::nn::loss::positive_probability;
use crate::vocab::{vectorize_program, Vocabulary};

/// Hierarchical verdict for one program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(rename = "id")]
    pub program_id: String,
    pub code_vulnerable: bool,
    pub code_probability: f64,
    /// All false whenever `code_vulnerable` is false.
    pub line_flags: Vec<bool>,
    /// Line-model probabilities, reported even when gated off.
    pub line_probabilities: Vec<f64>,
}

/// Runs stage 1, then gates stage 2 on its verdict.
pub fn predict(
    stage1: &Stage1Model,
    stage2: &Stage2Model,
    vocab: &Vocabulary,
    program: &Program,
    threshold: f64,
) -> Result<Prediction> {
    let digest = vocab.digest();
    if stage1.vocab_digest != digest {
        return Err(Error::DigestMismatch {
            expected: to_hex(stage1.vocab_digest),
            actual: to_hex(digest),
        });
    }
    stage2.check_compatible(stage1)?;
    let vectors = vectorize_program(vocab, program);
    let (logits, context) = stage1_forward(stage1, &vectors)?;
    let code_probability = positive_probability(&logits);
    let code_vulnerable = code_probability >= threshold;
    let line_probabilities = vectors
        .iter()
        .enumerate()
        .map(|(t, x)| stage2_forward(stage2, &context, t, x).map(|l| positive_probability(&l)))
        .collect::<Result<Vec<_>>>()?;
    let line_flags = line_probabilities
        .iter()
        .map(|&p| code_vulnerable && p >= threshold)
        .collect();
    Ok(Prediction {
        program_id: program.id.clone(),
        code_vulnerable,
        code_probability,
        line_flags,
        line_probabilities,
    })
}

/// A trained detector: both stages, their vocabulary and configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub stage1: Stage1Model,
    pub stage2: Stage2Model,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingReport {
    pub stage1: TrainingHistory,
    pub stage2: TrainingHistory,
}

impl Detector {
    /// Trains stage 1, then stage 2 against the frozen stage 1.
    pub fn train(
        corpus: &Corpus,
        vocab: Vocabulary,
        config: ModelConfig,
    ) -> Result<(Self, TrainingReport)> {
        let (stage1, h1) = train_stage1(corpus, &vocab, &config)?;
        let (stage2, h2) = train_stage2(corpus, &vocab, &stage1, &config)?;
        let detector = Detector {
            config,
            vocab,
            stage1,
            stage2,
        };
        Ok((
            detector,
            TrainingReport {
                stage1: h1,
                stage2: h2,
            },
        ))
    }

    pub fn predict(&self, program: &Program) -> Result<Prediction> {
        predict(
            &self.stage1,
            &self.stage2,
            &self.vocab,
            program,
            self.config.decision_threshold,
        )
    }

    pub fn predict_all(&self, programs: &[Program]) -> Result<Vec<Prediction>> {
        use rayon::prelude::*;
        programs.par_iter().map(|p| self.predict(p)).collect()
    }
}

/// Predictions as JSON Lines, one object per program.
pub fn predictions_to_jsonl(predictions: &[Prediction]) -> String {
    let mut out = String::new();
    for p in predictions {
        out.push_str(&serde_json::to_string(p).expect("prediction serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Parameters;
    use crate::vocab::build_corpus_vocabulary;

    fn program(lines: &[&str]) -> Program {
        Program::new(
            "p",
            lines.iter().map(|s| s.to_string()).collect(),
            0,
            vec![],
        )
        .unwrap()
    }

    fn setup() -> (Vocabulary, Stage1Model, Stage2Model, ModelConfig) {
        let p = program(&["a b", "c", "d e f"]);
        let corpus = Corpus::new(vec![p], "t").unwrap();
        let vocab = build_corpus_vocabulary(&corpus).unwrap();
        let cfg = ModelConfig {
            embed_dim: 4,
            hidden_dim: 3,
            classifier_hidden: 4,
            line_hidden: 4,
            ..Default::default()
        };
        let mut rng = crate::rng::stream(1, crate::rng::Stream::Stage1Init);
        let s1 = Stage1Model::init(vocab.len(), vocab.digest(), &cfg, &mut rng);
        let s2 = Stage2Model::init(6, vocab.len(), vocab.digest(), &cfg, &mut rng);
        (vocab, s1, s2, cfg)
    }

    #[test]
    fn zero_models_flag_everything_at_boundary() {
        let (vocab, mut s1, mut s2, _) = setup();
        s1.zero();
        s2.zero();
        let pred = predict(&s1, &s2, &vocab, &program(&["a", "b c", "zzz"]), 0.5).unwrap();
        assert_eq!(pred.code_probability, 0.5);
        assert!(pred.code_vulnerable);
        assert_eq!(pred.line_probabilities, [0.5; 3]);
        assert_eq!(pred.line_flags, [true; 3]);
    }

    #[test]
    fn clean_verdict_gates_lines() {
        let (vocab, mut s1, mut s2, _) = setup();
        s1.zero();
        s2.zero();
        // candidate bias 1 makes h_F positive; W3 then favours class 0
        s1.blstm.layers[0]
            .forward
            .gate_bias_mut(crate::nn::Gate::Candidate)
            .fill(1.0);
        s1.classifier_hidden.set(0, 0, 1.0);
        s1.classifier_out.set(0, 0, 1.0);
        s2.hidden.fill(1.0);
        s2.output.set(1, 0, 5.0);
        let pred = predict(&s1, &s2, &vocab, &program(&["a b", "c"]), 0.5).unwrap();
        assert!(pred.code_probability < 0.5);
        assert!(!pred.code_vulnerable);
        assert_eq!(pred.line_flags, [false, false]);
        assert!(pred.line_probabilities.iter().all(|&p| p > 0.5));
    }

    #[test]
    fn digest_mismatch_rejected() {
        let (_, s1, s2, _) = setup();
        let other = Vocabulary::from_tokens(vec!["x".into(), "y".into()]).unwrap();
        assert!(matches!(
            predict(&s1, &s2, &other, &program(&["x"]), 0.5),
            Err(Error::DigestMismatch { .. })
        ));
    }

    #[test]
    fn prediction_is_pure() {
        let (vocab, s1, s2, _) = setup();
        let p = program(&["a b", "c d", "f"]);
        let a = predict(&s1, &s2, &vocab, &p, 0.5).unwrap();
        let b = predict(&s1, &s2, &vocab, &p, 0.5).unwrap();
        assert_eq!(a, b);
        let line = predictions_to_jsonl(&[a]);
        assert!(line.starts_with("{\"id\":\"p\",\"code_vulnerable\":"));
    }
}
