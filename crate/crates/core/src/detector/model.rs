//! Stage-1 (whole-code) and stage-2 (per-line) networks with their forward and
//! backward passes.
//!
//! Stage 1: each line's bag-of-words `x(t)` is embedded as
//! `H(t) = ReLU(W1 · ReLU(W0 · x(t)))`, the BLSTM runs over `H`, and the
//! latent `[h_F(L) ⊕ h_B(1)]` is classified by `W3 · ReLU(W2 · latent)`.
//!
//! Stage 2: line t is classified from `W5 · ReLU(W4 · [h_F(t) ⊕ h_B(t) ⊕ x(t)])`
//! with the BLSTM states of a frozen stage-1 model as context.
//!
//! Both classifiers emit raw two-class logits for softmax cross-entropy.

use rand::Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::linalg::{relu_grad, relu_scalar, Matrix};
use crate::nn::loss::softmax_cross_entropy;
use crate::nn::lstm::{Blstm, BlstmCache, BlstmOutput, Gate};
use crate::nn::params::Parameters;
use crate::vocab::BowVector;

fn uniform_layer<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::uniform(rows, cols, 1.0 / (cols as f64).sqrt(), rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Model {
    /// W0, `K × N`
    pub encoder_in: Matrix,
    /// W1, `K × K`
    pub encoder_out: Matrix,
    pub blstm: Blstm,
    /// W2, `K_c × 2M`
    pub classifier_hidden: Matrix,
    /// W3, `2 × K_c`
    pub classifier_out: Matrix,
    pub vocab_digest: u64,
}

impl Stage1Model {
    /// Draws W0, W1, the BLSTM layers (forward cell then backward cell, weights
    /// before biases), W2 and W3 from `rng`, in that order.
    pub fn init<R: Rng>(
        vocab_size: usize,
        vocab_digest: u64,
        config: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let (k, m) = (config.embed_dim, config.hidden_dim);
        let encoder_in = uniform_layer(k, vocab_size, rng);
        let encoder_out = uniform_layer(k, k, rng);
        let mut blstm = Blstm::init(k, m, config.blstm_layers, config.lstm_bias, rng);
        if config.lstm_bias {
            for layer in &mut blstm.layers {
                for cell in [&mut layer.forward, &mut layer.backward] {
                    cell.gate_bias_mut(Gate::Forget)
                        .iter_mut()
                        .for_each(|b| *b += config.forget_bias);
                }
            }
        }
        let classifier_hidden = uniform_layer(config.classifier_hidden, 2 * m, rng);
        let classifier_out = uniform_layer(2, config.classifier_hidden, rng);
        Stage1Model {
            encoder_in,
            encoder_out,
            blstm,
            classifier_hidden,
            classifier_out,
            vocab_digest,
        }
    }

    pub fn zeros(vocab_size: usize, vocab_digest: u64, config: &ModelConfig) -> Self {
        let (k, m) = (config.embed_dim, config.hidden_dim);
        Stage1Model {
            encoder_in: Matrix::zeros(k, vocab_size),
            encoder_out: Matrix::zeros(k, k),
            blstm: Blstm::zeros(k, m, config.blstm_layers),
            classifier_hidden: Matrix::zeros(config.classifier_hidden, 2 * m),
            classifier_out: Matrix::zeros(2, config.classifier_hidden),
            vocab_digest,
        }
    }

    /// A zero-valued model of identical shape, used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }

    pub fn vocab_size(&self) -> usize {
        self.encoder_in.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder_in.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.blstm.hidden_dim()
    }

    /// Checks that all tensor shapes agree with each other.
    pub fn check_shapes(&self) -> Result<()> {
        let k = self.embed_dim();
        let m = self.hidden_dim();
        let ok = self.encoder_out.rows() == k
            && self.encoder_out.cols() == k
            && self.blstm.input_dim() == k
            && self.classifier_hidden.cols() == 2 * m
            && self.classifier_out.rows() == 2
            && self.classifier_out.cols() == self.classifier_hidden.rows();
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension(
                "inconsistent stage-1 tensor shapes".into(),
            ))
        }
    }

    fn check_input(&self, x: &BowVector) -> Result<()> {
        if x.dimension() != self.vocab_size() {
            return Err(Error::Dimension(format!(
                "line vector has dimension {}, model expects {}",
                x.dimension(),
                self.vocab_size()
            )));
        }
        Ok(())
    }
}

impl Parameters for Stage1Model {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = vec![self.encoder_in.as_slice(), self.encoder_out.as_slice()];
        t.extend(self.blstm.tensors());
        t.push(self.classifier_hidden.as_slice());
        t.push(self.classifier_out.as_slice());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = vec![
            self.encoder_in.as_mut_slice(),
            self.encoder_out.as_mut_slice(),
        ];
        t.extend(self.blstm.tensors_mut());
        t.push(self.classifier_hidden.as_mut_slice());
        t.push(self.classifier_out.as_mut_slice());
        t
    }
}

struct LineTrace {
    /// `W0 · x`
    pre0: Vec<f64>,
    /// `ReLU(W0 · x)`
    act0: Vec<f64>,
    /// `W1 · act0`
    pre1: Vec<f64>,
}

fn encode_traced(model: &Stage1Model, x: &BowVector) -> (LineTrace, Vec<f64>) {
    let k = model.embed_dim();
    let mut pre0 = vec![0.0; k];
    model.encoder_in.sum_columns_acc(x.on_indices(), &mut pre0);
    let act0: Vec<f64> = pre0.iter().map(|&v| relu_scalar(v)).collect();
    let pre1 = model.encoder_out.matvec(&act0);
    let h = pre1.iter().map(|&v| relu_scalar(v)).collect();
    (LineTrace { pre0, act0, pre1 }, h)
}

/// `H(t) = ReLU(W1 · ReLU(W0 · x))`, with `W0 · x` summed over the set columns.
pub fn encode_line(model: &Stage1Model, x: &BowVector) -> Result<Vec<f64>> {
    model.check_input(x)?;
    Ok(encode_traced(model, x).1)
}

pub(crate) struct Stage1Trace {
    lines: Vec<LineTrace>,
    blstm_cache: BlstmCache,
    pub(crate) blstm: BlstmOutput,
    latent: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden_act: Vec<f64>,
    pub(crate) logits: Vec<f64>,
}

pub(crate) fn stage1_trace(model: &Stage1Model, program: &[BowVector]) -> Result<Stage1Trace> {
    if program.is_empty() {
        return Err(Error::Dimension("empty program".into()));
    }
    for x in program {
        model.check_input(x)?;
    }
    let (lines, embeddings): (Vec<_>, Vec<_>) =
        program.iter().map(|x| encode_traced(model, x)).unzip();
    let (blstm, blstm_cache) = model.blstm.forward_cached(&embeddings)?;
    let n = program.len();
    let mut latent = blstm.forward_states[n - 1].clone();
    latent.extend_from_slice(&blstm.backward_states[0]);
    let hidden_pre = model.classifier_hidden.matvec(&latent);
    let hidden_act: Vec<f64> = hidden_pre.iter().map(|&v| relu_scalar(v)).collect();
    let logits = model.classifier_out.matvec(&hidden_act);
    Ok(Stage1Trace {
        lines,
        blstm_cache,
        blstm,
        latent,
        hidden_pre,
        hidden_act,
        logits,
    })
}

/// Whole-code logits and the BLSTM states that stage 2 reuses as context.
pub fn stage1_forward(
    model: &Stage1Model,
    program: &[BowVector],
) -> Result<(Vec<f64>, BlstmOutput)> {
    let trace = stage1_trace(model, program)?;
    Ok((trace.logits, trace.blstm))
}

/// Cross-entropy of the whole-code prediction; adds its gradient into `grads`.
pub fn stage1_loss_and_grad(
    model: &Stage1Model,
    program: &[BowVector],
    label: usize,
    grads: &mut Stage1Model,
) -> Result<f64> {
    let trace = stage1_trace(model, program)?;
    let (loss, dlogits) = softmax_cross_entropy(&trace.logits, label);

    grads.classifier_out.add_outer(&dlogits, &trace.hidden_act);
    let mut d_hidden = vec![0.0; trace.hidden_act.len()];
    model.classifier_out.matvec_t_acc(&dlogits, &mut d_hidden);
    for (d, &pre) in d_hidden.iter_mut().zip(&trace.hidden_pre) {
        *d *= relu_grad(pre);
    }
    grads.classifier_hidden.add_outer(&d_hidden, &trace.latent);
    let mut d_latent = vec![0.0; trace.latent.len()];
    model
        .classifier_hidden
        .matvec_t_acc(&d_hidden, &mut d_latent);

    let n = program.len();
    let m = model.hidden_dim();
    let mut d_fwd = vec![vec![0.0; m]; n];
    let mut d_bwd = vec![vec![0.0; m]; n];
    d_fwd[n - 1].copy_from_slice(&d_latent[..m]);
    d_bwd[0].copy_from_slice(&d_latent[m..]);
    let d_embed = model
        .blstm
        .backward(&trace.blstm_cache, &d_fwd, &d_bwd, &mut grads.blstm);

    let k = model.embed_dim();
    let mut d_act0 = vec![0.0; k];
    for ((x, line), d_h) in program.iter().zip(&trace.lines).zip(&d_embed) {
        let d_pre1: Vec<f64> = d_h
            .iter()
            .zip(&line.pre1)
            .map(|(d, &p)| d * relu_grad(p))
            .collect();
        grads.encoder_out.add_outer(&d_pre1, &line.act0);
        d_act0.fill(0.0);
        model.encoder_out.matvec_t_acc(&d_pre1, &mut d_act0);
        for (d, &p) in d_act0.iter_mut().zip(&line.pre0) {
            *d *= relu_grad(p);
        }
        grads.encoder_in.add_to_columns(&d_act0, x.on_indices());
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Model {
    /// W4, `K_l × (2M + N)`
    pub hidden: Matrix,
    /// W5, `2 × K_l`
    pub output: Matrix,
    /// 2M
    context_dim: usize,
    pub vocab_digest: u64,
}

impl Stage2Model {
    pub fn init<R: Rng>(
        context_dim: usize,
        vocab_size: usize,
        vocab_digest: u64,
        config: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let hidden = uniform_layer(config.line_hidden, context_dim + vocab_size, rng);
        let output = uniform_layer(2, config.line_hidden, rng);
        Stage2Model {
            hidden,
            output,
            context_dim,
            vocab_digest,
        }
    }

    pub fn from_parts(
        hidden: Matrix,
        output: Matrix,
        context_dim: usize,
        vocab_digest: u64,
    ) -> Result<Self> {
        if hidden.cols() <= context_dim || output.rows() != 2 || output.cols() != hidden.rows() {
            return Err(Error::Dimension(
                "inconsistent stage-2 tensor shapes".into(),
            ));
        }
        Ok(Stage2Model {
            hidden,
            output,
            context_dim,
            vocab_digest,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    pub fn vocab_size(&self) -> usize {
        self.hidden.cols() - self.context_dim
    }

    /// Checks that this line model can consume `stage1`'s context and vocabulary.
    pub fn check_compatible(&self, stage1: &Stage1Model) -> Result<()> {
        if self.context_dim != 2 * stage1.hidden_dim() || self.vocab_size() != stage1.vocab_size() {
            return Err(Error::Dimension(format!(
                "line model input is {} + {}, whole-code model provides {} + {}",
                self.context_dim,
                self.vocab_size(),
                2 * stage1.hidden_dim(),
                stage1.vocab_size()
            )));
        }
        if self.vocab_digest != stage1.vocab_digest {
            return Err(Error::DigestMismatch {
                expected: crate::digest::to_hex(stage1.vocab_digest),
                actual: crate::digest::to_hex(self.vocab_digest),
            });
        }
        Ok(())
    }
}

impl Parameters for Stage2Model {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.hidden.as_slice(), self.output.as_slice()]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.hidden.as_mut_slice(), self.output.as_mut_slice()]
    }
}

struct Stage2Trace {
    hidden_pre: Vec<f64>,
    hidden_act: Vec<f64>,
    logits: Vec<f64>,
}

fn stage2_trace(model: &Stage2Model, context: &[f64], x: &BowVector) -> Result<Stage2Trace> {
    if context.len() != model.context_dim || x.dimension() != model.vocab_size() {
        return Err(Error::Dimension(format!(
            "line classifier expects context {} and line {}, got {} and {}",
            model.context_dim,
            model.vocab_size(),
            context.len(),
            x.dimension()
        )));
    }
    let c = model.context_dim;
    let mut hidden_pre = vec![0.0; model.hidden.rows()];
    for (i, pre) in hidden_pre.iter_mut().enumerate() {
        let row = model.hidden.row(i);
        let mut s = crate::nn::linalg::dot(&row[..c], context);
        for &j in x.on_indices() {
            s += row[c + j];
        }
        *pre = s;
    }
    let hidden_act: Vec<f64> = hidden_pre.iter().map(|&v| relu_scalar(v)).collect();
    let logits = model.output.matvec(&hidden_act);
    Ok(Stage2Trace {
        hidden_pre,
        hidden_act,
        logits,
    })
}

/// Line logits `W5 · ReLU(W4 · [h_F(t) ⊕ h_B(t) ⊕ x(t)])`; `x(t)` enters as the raw binary vector.
pub fn stage2_forward(
    model: &Stage2Model,
    context: &BlstmOutput,
    t: usize,
    x: &BowVector,
) -> Result<Vec<f64>> {
    if t >= context.len() {
        return Err(Error::IndexOutOfRange {
            index: t,
            len: context.len(),
        });
    }
    Ok(stage2_trace(model, &context.context(t), x)?.logits)
}

/// Line logits from an already extracted context vector.
pub fn stage2_logits(model: &Stage2Model, context: &[f64], x: &BowVector) -> Result<Vec<f64>> {
    Ok(stage2_trace(model, context, x)?.logits)
}

/// Cross-entropy of one line prediction given its context vector; adds the
/// gradient w.r.t. W4 and W5 into `grads`.
pub fn stage2_loss_and_grad(
    model: &Stage2Model,
    context: &[f64],
    x: &BowVector,
    label: usize,
    grads: &mut Stage2Model,
) -> Result<f64> {
    let trace = stage2_trace(model, context, x)?;
    let (loss, dlogits) = softmax_cross_entropy(&trace.logits, label);
    grads.output.add_outer(&dlogits, &trace.hidden_act);
    let mut d_hidden = vec![0.0; trace.hidden_act.len()];
    model.output.matvec_t_acc(&dlogits, &mut d_hidden);
    let c = model.context_dim;
    for (i, (&d, &pre)) in d_hidden.iter().zip(&trace.hidden_pre).enumerate() {
        let d = d * relu_grad(pre);
        if d == 0.0 {
            continue;
        }
        let row = grads.hidden.row_mut(i);
        crate::nn::linalg::axpy(d, context, &mut row[..c]);
        for &j in x.on_indices() {
            row[c + j] += d;
        }
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::linalg::dense_forward;
    use crate::nn::lstm::lstm_step;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            embed_dim: 5,
            hidden_dim: 4,
            classifier_hidden: 6,
            line_hidden: 7,
            ..Default::default()
        }
    }

    #[test]
    fn forget_bias_offsets_only_forget_gates() {
        let plain = ModelConfig {
            forget_bias: 0.0,
            blstm_layers: 2,
            ..small_config()
        };
        let shifted = ModelConfig {
            forget_bias: 1.5,
            ..plain.clone()
        };
        let a = Stage1Model::init(9, 0, &plain, &mut ChaCha8Rng::seed_from_u64(3));
        let b = Stage1Model::init(9, 0, &shifted, &mut ChaCha8Rng::seed_from_u64(3));
        for (la, lb) in a.blstm.layers.iter().zip(&b.blstm.layers) {
            for (ca, cb) in [(&la.forward, &lb.forward), (&la.backward, &lb.backward)] {
                assert_eq!(ca.weight, cb.weight);
                for gate in [Gate::Input, Gate::Output, Gate::Candidate] {
                    assert_eq!(ca.gate_bias(gate), cb.gate_bias(gate));
                }
                for (x, y) in ca
                    .gate_bias(Gate::Forget)
                    .iter()
                    .zip(cb.gate_bias(Gate::Forget))
                {
                    assert_eq!(*y, x + 1.5);
                }
            }
        }
        assert_eq!(a.classifier_out, b.classifier_out);

        let unbiased = ModelConfig {
            lstm_bias: false,
            ..shifted
        };
        let c = Stage1Model::init(9, 0, &unbiased, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(c.blstm.layers[0].forward.bias.iter().all(|&v| v == 0.0));
    }

    fn random_bow(n: usize, rng: &mut ChaCha8Rng) -> BowVector {
        let count = rng.random_range(0..4);
        BowVector::new(n, (0..count).map(|_| rng.random_range(0..n)).collect()).unwrap()
    }

    fn relu_v(v: Vec<f64>) -> Vec<f64> {
        v.into_iter().map(|x| x.max(0.0)).collect()
    }

    #[test]
    fn encode_line_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Stage1Model::init(9, 0, &small_config(), &mut rng);
        assert_eq!(
            encode_line(&model, &BowVector::zeros(9)).unwrap(),
            vec![0.0; 5]
        );
        assert!(encode_line(&model, &BowVector::zeros(8)).is_err());

        let cfg = ModelConfig {
            embed_dim: 1,
            ..small_config()
        };
        let mut tiny = Stage1Model::zeros(2, 0, &cfg);
        tiny.encoder_in = Matrix::from_rows(&[vec![2.0, 3.0]]).unwrap();
        tiny.encoder_out = Matrix::from_rows(&[vec![-1.0]]).unwrap();
        let x = BowVector::new(2, vec![0]).unwrap();
        assert_eq!(encode_line(&tiny, &x).unwrap(), [0.0]);
    }

    #[test]
    fn encode_line_matches_dense_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = Stage1Model::init(12, 0, &small_config(), &mut rng);
        for _ in 0..20 {
            let x = random_bow(12, &mut rng);
            let dense = x.to_dense();
            let a0 = relu_v(dense_forward(&model.encoder_in, &dense).unwrap());
            let expect = relu_v(dense_forward(&model.encoder_out, &a0).unwrap());
            let got = encode_line(&model, &x).unwrap();
            for (g, e) in got.iter().zip(&expect) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_network_outputs_even_logits() {
        let cfg = small_config();
        let model = Stage1Model::zeros(6, 0, &cfg);
        let prog = vec![BowVector::new(6, vec![1, 2]).unwrap(); 3];
        let (logits, _) = stage1_forward(&model, &prog).unwrap();
        assert_eq!(logits, [0.0, 0.0]);
        assert!(stage1_forward(&model, &[]).is_err());
    }

    #[test]
    fn stage1_matches_compositional_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = small_config();
        let model = Stage1Model::init(10, 0, &cfg, &mut rng);
        let prog: Vec<BowVector> = (0..6).map(|_| random_bow(10, &mut rng)).collect();
        let (logits, _) = stage1_forward(&model, &prog).unwrap();

        let emb: Vec<Vec<f64>> = prog
            .iter()
            .map(|x| encode_line(&model, x).unwrap())
            .collect();
        let layer = &model.blstm.layers[0];
        let m = cfg.hidden_dim;
        let (mut hf, mut cf) = (vec![0.0; m], vec![0.0; m]);
        for e in &emb {
            (hf, cf) = lstm_step(&layer.forward, e, &hf, &cf).unwrap();
        }
        let (mut hb, mut cb) = (vec![0.0; m], vec![0.0; m]);
        for e in emb.iter().rev() {
            (hb, cb) = lstm_step(&layer.backward, e, &hb, &cb).unwrap();
        }
        let latent = [hf, hb].concat();
        let hidden = relu_v(dense_forward(&model.classifier_hidden, &latent).unwrap());
        let expect = dense_forward(&model.classifier_out, &hidden).unwrap();
        for (g, e) in logits.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn single_line_latent_uses_both_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = Stage1Model::init(8, 0, &small_config(), &mut rng);
        let prog = vec![BowVector::new(8, vec![0, 5]).unwrap()];
        let (_, out) = stage1_forward(&model, &prog).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.context(0).len(), 8);
    }

    #[test]
    fn stage2_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = small_config();
        let stage1 = Stage1Model::init(9, 0, &cfg, &mut rng);
        let prog: Vec<BowVector> = (0..4).map(|_| random_bow(9, &mut rng)).collect();
        let (_, ctx) = stage1_forward(&stage1, &prog).unwrap();
        let mut stage2 = Stage2Model::init(8, 9, 0, &cfg, &mut rng);

        let got = stage2_forward(&stage2, &ctx, 2, &prog[2]).unwrap();
        let input = [ctx.context(2), prog[2].to_dense()].concat();
        let hidden = relu_v(dense_forward(&stage2.hidden, &input).unwrap());
        let expect = dense_forward(&stage2.output, &hidden).unwrap();
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
        assert!(matches!(
            stage2_forward(&stage2, &ctx, 4, &prog[0]),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(stage2_forward(&stage2, &ctx, 0, &BowVector::zeros(3)).is_err());

        let zero_ctx = BlstmOutput {
            forward_states: vec![vec![0.0; 4]],
            backward_states: vec![vec![0.0; 4]],
        };
        assert_eq!(
            stage2_forward(&stage2, &zero_ctx, 0, &BowVector::zeros(9)).unwrap(),
            [0.0, 0.0]
        );
        stage2.zero();
        assert_eq!(
            stage2_forward(&stage2, &ctx, 1, &prog[1]).unwrap(),
            [0.0, 0.0]
        );
    }
}
