//! Finite-difference verification of both detector stages on random programs.

use rand::Rng;
use serde::Serialize;

use super::config::ModelConfig;
use super::model::{
    stage1_forward, stage1_loss_and_grad, stage2_logits, stage2_loss_and_grad, Stage1Model,
    Stage2Model,
};
use crate::error::Result;
use crate::nn::gradcheck::{
    gradient_check, GradCheckReport, DEFAULT_MIN_COORDINATES, DEFAULT_STEP,
};
use crate::nn::loss::CrossEntropyValue;
use crate::rng::{stream, Stream};
use crate::vocab::BowVector;

#[derive(Debug, Clone, PartialEq)]
pub struct GradSuiteConfig {
    pub seed: u64,
    /// Random programs per stage.
    pub programs: usize,
    pub min_lines: usize,
    pub max_lines: usize,
    pub vocab_size: usize,
    pub model: ModelConfig,
    /// Also check a two-layer BLSTM for every program.
    pub include_stacked: bool,
    pub step: f64,
    pub min_coordinates: usize,
    pub threshold: f64,
}

impl Default for GradSuiteConfig {
    fn default() -> Self {
        GradSuiteConfig {
            seed: 1,
            programs: 3,
            min_lines: 3,
            max_lines: 8,
            vocab_size: 60,
            model: ModelConfig::default(),
            include_stacked: true,
            step: DEFAULT_STEP,
            min_coordinates: DEFAULT_MIN_COORDINATES,
            threshold: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCaseResult {
    pub name: String,
    pub lines: usize,
    pub max_relative_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradSuiteReport {
    pub threshold: f64,
    pub cases: Vec<GradCaseResult>,
}

impl GradSuiteReport {
    pub fn max_relative_error(&self) -> f64 {
        self.cases
            .iter()
            .map(|c| c.max_relative_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.cases.is_empty() && self.max_relative_error() < self.threshold
    }
}

fn random_program<R: Rng>(cfg: &GradSuiteConfig, rng: &mut R) -> Vec<BowVector> {
    let lines = rng.random_range(cfg.min_lines..=cfg.max_lines);
    (0..lines)
        .map(|_| {
            let tokens = rng.random_range(1..=6);
            let on = (0..tokens)
                .map(|_| rng.random_range(0..cfg.vocab_size))
                .collect();
            BowVector::new(cfg.vocab_size, on).expect("indices below vocab size")
        })
        .collect()
}

fn case(name: String, lines: usize, r: GradCheckReport) -> GradCaseResult {
    GradCaseResult {
        name,
        lines,
        max_relative_error: r.max_relative_error,
        checked: r.checked,
        skipped_kinks: r.skipped_kinks,
    }
}

/// Checks the end-to-end stage-1 gradient (encoder, BLSTM, classifier) and the
/// stage-2 gradient on random 3–8 line programs.
pub fn run_gradient_suite(cfg: &GradSuiteConfig) -> Result<GradSuiteReport> {
    cfg.model.validate()?;
    let mut rng = stream(cfg.seed, Stream::GradCheck);
    let mut cases = Vec::new();
    let mut variants = vec![(cfg.model.clone(), "")];
    if cfg.include_stacked {
        variants.push((
            ModelConfig {
                blstm_layers: 2,
                ..cfg.model.clone()
            },
            " (2 layers)",
        ));
    }
    for p in 0..cfg.programs {
        let program = random_program(cfg, &mut rng);
        let label = rng.random_range(0..2usize);
        for (model_cfg, suffix) in &variants {
            let model = Stage1Model::init(cfg.vocab_size, 0, model_cfg, &mut rng);
            let mut grads = model.zeros_like();
            stage1_loss_and_grad(&model, &program, label, &mut grads)?;
            let loss = |m: &Stage1Model| {
                let (logits, _) = stage1_forward(m, &program).expect("shapes fixed");
                CrossEntropyValue::new(&logits, label)
            };
            let r = gradient_check(
                &model,
                &grads,
                loss,
                cfg.step,
                cfg.min_coordinates,
                &mut rng,
            )?;
            cases.push(case(
                format!("stage1 program {p}{suffix}"),
                program.len(),
                r,
            ));
        }

        let stage1 = Stage1Model::init(cfg.vocab_size, 0, &cfg.model, &mut rng);
        let (_, context) = stage1_forward(&stage1, &program)?;
        let stage2 = Stage2Model::init(
            2 * cfg.model.hidden_dim,
            cfg.vocab_size,
            0,
            &cfg.model,
            &mut rng,
        );
        let t = rng.random_range(0..program.len());
        let line_label = rng.random_range(0..2usize);
        let ctx = context.context(t);
        let mut grads = stage2.zeros_like();
        stage2_loss_and_grad(&stage2, &ctx, &program[t], line_label, &mut grads)?;
        let loss = |m: &Stage2Model| {
            let logits = stage2_logits(m, &ctx, &program[t]).expect("shapes fixed");
            CrossEntropyValue::new(&logits, line_label)
        };
        let r = gradient_check(
            &stage2,
            &grads,
            loss,
            cfg.step,
            cfg.min_coordinates,
            &mut rng,
        )?;
        cases.push(case(
            format!("stage2 program {p} line {t}"),
            program.len(),
            r,
        ));
    }
    Ok(GradSuiteReport {
        threshold: cfg.threshold,
        cases,
    })
}
