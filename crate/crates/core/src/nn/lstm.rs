//! LSTM cell with ReLU candidate/cell-output activations, and the
//! bidirectional stack built from it. Backpropagation through time is written
//! out by hand.

use rand::Rng;

use super::linalg::{relu_grad, relu_scalar, sigmoid, Matrix};
use super::params::Parameters;
use crate::error::{Error, Result};

/// Number of gate blocks stacked in [`LstmParams::weight`]:
/// input, forget, output, candidate (in that order).
pub const GATE_BLOCKS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Output = 2,
    Candidate = 3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    input_dim: usize,
    hidden_dim: usize,
    /// `(4·M) × (input_dim + M)`, acting on `[x ⊕ h_prev]`.
    pub weight: Matrix,
    /// `4·M`
    pub bias: Vec<f64>,
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        LstmParams {
            input_dim,
            hidden_dim,
            weight: Matrix::zeros(GATE_BLOCKS * hidden_dim, input_dim + hidden_dim),
            bias: vec![0.0; GATE_BLOCKS * hidden_dim],
        }
    }

    /// Uniform in `±1/√fan_in` with `fan_in = input_dim + M`; weights first, then biases.
    pub fn init<R: Rng>(input_dim: usize, hidden_dim: usize, with_bias: bool, rng: &mut R) -> Self {
        let fan_in = input_dim + hidden_dim;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Matrix::uniform(GATE_BLOCKS * hidden_dim, fan_in, bound, rng);
        let bias = if with_bias {
            (0..GATE_BLOCKS * hidden_dim)
                .map(|_| rng.random_range(-bound..=bound))
                .collect()
        } else {
            vec![0.0; GATE_BLOCKS * hidden_dim]
        };
        LstmParams {
            input_dim,
            hidden_dim,
            weight,
            bias,
        }
    }

    pub fn from_parts(
        input_dim: usize,
        hidden_dim: usize,
        weight: Matrix,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if weight.rows() != GATE_BLOCKS * hidden_dim
            || weight.cols() != input_dim + hidden_dim
            || bias.len() != GATE_BLOCKS * hidden_dim
        {
            return Err(Error::Dimension(format!(
                "LSTM with input {input_dim}, hidden {hidden_dim} needs {}x{} weights and {} biases, got {}x{} and {}",
                GATE_BLOCKS * hidden_dim,
                input_dim + hidden_dim,
                GATE_BLOCKS * hidden_dim,
                weight.rows(),
                weight.cols(),
                bias.len()
            )));
        }
        Ok(LstmParams {
            input_dim,
            hidden_dim,
            weight,
            bias,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// Weight row of hidden unit `unit` in the given gate block.
    pub fn gate_row(&self, gate: Gate, unit: usize) -> &[f64] {
        self.weight.row(gate as usize * self.hidden_dim + unit)
    }

    pub fn gate_bias(&self, gate: Gate) -> &[f64] {
        let m = self.hidden_dim;
        &self.bias[gate as usize * m..(gate as usize + 1) * m]
    }

    pub fn gate_bias_mut(&mut self, gate: Gate) -> &mut [f64] {
        let m = self.hidden_dim;
        &mut self.bias[gate as usize * m..(gate as usize + 1) * m]
    }
}

impl Parameters for LstmParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.weight.as_slice(), &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.as_mut_slice(), &mut self.bias]
    }
}

/// Everything one step needs for its backward pass.
#[derive(Debug, Clone)]
pub(crate) struct StepCache {
    /// `[x ⊕ h_prev]`
    z: Vec<f64>,
    c_prev: Vec<f64>,
    /// Activated gates `[i, f, o, g]`, each of length M.
    act: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
}

fn step_cached(p: &LstmParams, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> StepCache {
    let m = p.hidden_dim;
    let mut z = Vec::with_capacity(p.input_dim + m);
    z.extend_from_slice(x);
    z.extend_from_slice(h_prev);
    let mut act = p.bias.clone();
    for (a, row) in act
        .iter_mut()
        .zip(p.weight.as_slice().chunks_exact(z.len().max(1)))
    {
        *a += super::linalg::dot(row, &z);
    }
    for a in &mut act[..3 * m] {
        *a = sigmoid(*a);
    }
    for a in &mut act[3 * m..] {
        *a = relu_scalar(*a);
    }
    let mut c = vec![0.0; m];
    let mut h = vec![0.0; m];
    for j in 0..m {
        let (i, f, o, g) = (act[j], act[m + j], act[2 * m + j], act[3 * m + j]);
        c[j] = f * c_prev[j] + i * g;
        h[j] = o * relu_scalar(c[j]);
    }
    StepCache {
        z,
        c_prev: c_prev.to_vec(),
        act,
        c,
        h,
    }
}

fn check_step_dims(p: &LstmParams, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<()> {
    if x.len() != p.input_dim || h_prev.len() != p.hidden_dim || c_prev.len() != p.hidden_dim {
        return Err(Error::Dimension(format!(
            "LSTM step expects x {}, h {}, c {}; got {}, {}, {}",
            p.input_dim,
            p.hidden_dim,
            p.hidden_dim,
            x.len(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    Ok(())
}

/// One LSTM step: sigmoid gates, ReLU candidate, `h = o ∘ ReLU(c)`. Returns `(h, c)`.
pub fn lstm_step(
    params: &LstmParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_step_dims(params, x, h_prev, c_prev)?;
    let s = step_cached(params, x, h_prev, c_prev);
    Ok((s.h, s.c))
}

/// Runs the cell over `inputs` in the given order from a zero state.
fn run_sequence<'a, I>(p: &LstmParams, inputs: I) -> Vec<StepCache>
where
    I: Iterator<Item = &'a [f64]>,
{
    let m = p.hidden_dim;
    let mut steps: Vec<StepCache> = Vec::new();
    let zero = vec![0.0; m];
    for x in inputs {
        let s = match steps.last() {
            Some(prev) => step_cached(p, x, &prev.h, &prev.c),
            None => step_cached(p, x, &zero, &zero),
        };
        steps.push(s);
    }
    steps
}

/// Backpropagation through time over steps in processing order.
///
/// `dh(k)` is the loss gradient arriving at step k's output from outside the
/// recurrence; the input gradient of step k is added into `dx[k]`.
fn backward_sequence<'a, F>(
    p: &LstmParams,
    grads: &mut LstmParams,
    steps: &[StepCache],
    dh: F,
    dx: &mut [Vec<f64>],
) where
    F: Fn(usize) -> &'a [f64],
{
    let m = p.hidden_dim;
    let n_in = p.input_dim;
    let mut dh_next = vec![0.0; m];
    let mut dc_next = vec![0.0; m];
    let mut da = vec![0.0; GATE_BLOCKS * m];
    let mut dz = vec![0.0; n_in + m];
    for k in (0..steps.len()).rev() {
        let s = &steps[k];
        let dh_ext = dh(k);
        for j in 0..m {
            let (i, f, o, g) = (s.act[j], s.act[m + j], s.act[2 * m + j], s.act[3 * m + j]);
            let dh_j = dh_ext[j] + dh_next[j];
            let d_o = dh_j * relu_scalar(s.c[j]);
            let dc = dh_j * o * relu_grad(s.c[j]) + dc_next[j];
            let d_i = dc * g;
            let d_g = dc * i;
            let d_f = dc * s.c_prev[j];
            dc_next[j] = dc * f;
            da[j] = d_i * i * (1.0 - i);
            da[m + j] = d_f * f * (1.0 - f);
            da[2 * m + j] = d_o * o * (1.0 - o);
            da[3 * m + j] = if g > 0.0 { d_g } else { 0.0 };
        }
        grads.weight.add_outer(&da, &s.z);
        for (b, d) in grads.bias.iter_mut().zip(&da) {
            *b += d;
        }
        dz.fill(0.0);
        p.weight.matvec_t_acc(&da, &mut dz);
        for (d, v) in dx[k].iter_mut().zip(&dz[..n_in]) {
            *d += v;
        }
        dh_next.copy_from_slice(&dz[n_in..]);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlstmLayer {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

/// Per-position outputs of the top BLSTM layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BlstmOutput {
    /// `h_F(t)`: left-to-right recurrence output at position t.
    pub forward_states: Vec<Vec<f64>>,
    /// `h_B(t)`: right-to-left recurrence output at position t.
    pub backward_states: Vec<Vec<f64>>,
}

impl BlstmOutput {
    pub fn len(&self) -> usize {
        self.forward_states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward_states.is_empty()
    }

    /// `[h_F(t) ⊕ h_B(t)]`
    pub fn context(&self, t: usize) -> Vec<f64> {
        let mut c = self.forward_states[t].clone();
        c.extend_from_slice(&self.backward_states[t]);
        c
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BlstmCache {
    /// Per layer: forward steps in position order, backward steps in reverse position order.
    layers: Vec<(Vec<StepCache>, Vec<StepCache>)>,
}

/// Stacked bidirectional LSTM; layer `l > 0` consumes `[h_F ⊕ h_B]` of layer `l − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Blstm {
    pub layers: Vec<BlstmLayer>,
}

impl Blstm {
    pub fn init<R: Rng>(
        input_dim: usize,
        hidden_dim: usize,
        layers: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let in_dim = if l == 0 { input_dim } else { 2 * hidden_dim };
                let forward = LstmParams::init(in_dim, hidden_dim, with_bias, rng);
                let backward = LstmParams::init(in_dim, hidden_dim, with_bias, rng);
                BlstmLayer { forward, backward }
            })
            .collect();
        Blstm { layers }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize, layers: usize) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let in_dim = if l == 0 { input_dim } else { 2 * hidden_dim };
                BlstmLayer {
                    forward: LstmParams::zeros(in_dim, hidden_dim),
                    backward: LstmParams::zeros(in_dim, hidden_dim),
                }
            })
            .collect();
        Blstm { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].forward.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[0].forward.hidden_dim
    }

    pub fn forward(&self, inputs: &[Vec<f64>]) -> Result<BlstmOutput> {
        self.forward_cached(inputs).map(|(out, _)| out)
    }

    pub(crate) fn forward_cached(&self, inputs: &[Vec<f64>]) -> Result<(BlstmOutput, BlstmCache)> {
        if inputs.is_empty() {
            return Err(Error::Dimension("BLSTM input sequence is empty".into()));
        }
        if let Some(x) = inputs.iter().find(|x| x.len() != self.input_dim()) {
            return Err(Error::Dimension(format!(
                "BLSTM expects inputs of width {}, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let n = inputs.len();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut layer_inputs: Vec<Vec<f64>> = inputs.to_vec();
        let mut output = None;
        for (l, layer) in self.layers.iter().enumerate() {
            let fwd = run_sequence(&layer.forward, layer_inputs.iter().map(Vec::as_slice));
            let bwd = run_sequence(
                &layer.backward,
                layer_inputs.iter().rev().map(Vec::as_slice),
            );
            let out = BlstmOutput {
                forward_states: fwd.iter().map(|s| s.h.clone()).collect(),
                backward_states: (0..n).map(|t| bwd[n - 1 - t].h.clone()).collect(),
            };
            caches.push((fwd, bwd));
            if l + 1 < self.layers.len() {
                layer_inputs = (0..n).map(|t| out.context(t)).collect();
            }
            output = Some(out);
        }
        Ok((
            output.expect("at least one layer"),
            BlstmCache { layers: caches },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/d inputs`.
    ///
    /// `d_forward[t]` and `d_backward[t]` are gradients w.r.t. the top layer's
    /// `h_F(t)` and `h_B(t)`.
    pub(crate) fn backward(
        &self,
        cache: &BlstmCache,
        d_forward: &[Vec<f64>],
        d_backward: &[Vec<f64>],
        grads: &mut Blstm,
    ) -> Vec<Vec<f64>> {
        let n = d_forward.len();
        let m = self.hidden_dim();
        let mut d_fwd: Vec<Vec<f64>> = d_forward.to_vec();
        let mut d_bwd: Vec<Vec<f64>> = d_backward.to_vec();
        let mut d_in = Vec::new();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let g = &mut grads.layers[l];
            let (fwd_steps, bwd_steps) = &cache.layers[l];
            let in_dim = layer.forward.input_dim;
            // Index k of dx is processing-step k; reorder the backward direction afterwards.
            let mut dx_f = vec![vec![0.0; in_dim]; n];
            backward_sequence(
                &layer.forward,
                &mut g.forward,
                fwd_steps,
                |k| &d_fwd[k],
                &mut dx_f,
            );
            let mut dx_b = vec![vec![0.0; in_dim]; n];
            backward_sequence(
                &layer.backward,
                &mut g.backward,
                bwd_steps,
                |k| &d_bwd[n - 1 - k],
                &mut dx_b,
            );
            d_in = dx_f;
            for t in 0..n {
                for (d, v) in d_in[t].iter_mut().zip(&dx_b[n - 1 - t]) {
                    *d += v;
                }
            }
            if l > 0 {
                d_fwd = d_in.iter().map(|d| d[..m].to_vec()).collect();
                d_bwd = d_in.iter().map(|d| d[m..].to_vec()).collect();
            }
        }
        d_in
    }
}

impl Parameters for Blstm {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| l.forward.tensors().into_iter().chain(l.backward.tensors()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let BlstmLayer { forward, backward } = l;
                forward
                    .tensors_mut()
                    .into_iter()
                    .chain(backward.tensors_mut())
            })
            .collect()
    }
}

/// Single-layer BLSTM from zero initial states.
pub fn blstm_forward(
    fwd: &LstmParams,
    bwd: &LstmParams,
    inputs: &[Vec<f64>],
) -> Result<BlstmOutput> {
    if fwd.input_dim != bwd.input_dim || fwd.hidden_dim != bwd.hidden_dim {
        return Err(Error::Dimension(
            "forward and backward cells differ in shape".into(),
        ));
    }
    let blstm = Blstm {
        layers: vec![BlstmLayer {
            forward: fwd.clone(),
            backward: bwd.clone(),
        }],
    };
    blstm.forward(inputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let p = LstmParams::zeros(3, 2);
        let (h, c) = lstm_step(&p, &[1.0, -2.0, 3.0], &[0.0; 2], &[0.0; 2]).unwrap();
        assert_eq!(h, [0.0, 0.0]);
        assert_eq!(c, [0.0, 0.0]);
        // with a non-zero previous cell, c halves
        let (_, c) = lstm_step(&p, &[1.0, -2.0, 3.0], &[0.5; 2], &[4.0, 2.0]).unwrap();
        assert_eq!(c, [2.0, 1.0]);
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let mut p = LstmParams::zeros(1, 1);
        p.gate_bias_mut(Gate::Forget)[0] = 100.0;
        let (h, c) = lstm_step(&p, &[0.3], &[0.0], &[2.0]).unwrap();
        assert!((c[0] - 2.0).abs() < 1e-9);
        assert!((h[0] - 1.0).abs() < 1e-9);
    }

    /// Straight-line scalar re-implementation for a single hidden unit.
    fn scalar_step(w: &[f64], b: &[f64], x: &[f64], h_prev: f64, c_prev: f64) -> (f64, f64) {
        let n = x.len() + 1;
        let pre = |gate: usize| {
            let row = &w[gate * n..(gate + 1) * n];
            let mut s = b[gate];
            for (k, xv) in x.iter().enumerate() {
                s += row[k] * xv;
            }
            s + row[n - 1] * h_prev
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i = sig(pre(0));
        let f = sig(pre(1));
        let o = sig(pre(2));
        let g = pre(3).max(0.0);
        let c = f * c_prev + i * g;
        (o * c.max(0.0), c)
    }

    #[test]
    fn single_unit_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = LstmParams::init(3, 1, true, &mut rng);
            let x = random_vec(3, &mut rng);
            let (hp, cp) = (rng.random_range(-1.0..1.0), rng.random_range(0.0..2.0));
            let (h, c) = lstm_step(&p, &x, &[hp], &[cp]).unwrap();
            let (he, ce) = scalar_step(p.weight.as_slice(), &p.bias, &x, hp, cp);
            assert!((h[0] - he).abs() < 1e-12 && (c[0] - ce).abs() < 1e-12);
        }
    }

    #[test]
    fn step_rejects_bad_dimensions() {
        let p = LstmParams::zeros(2, 3);
        assert!(lstm_step(&p, &[1.0], &[0.0; 3], &[0.0; 3]).is_err());
        assert!(lstm_step(&p, &[1.0, 2.0], &[0.0; 2], &[0.0; 3]).is_err());
    }

    #[test]
    fn blstm_matches_composed_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fwd = LstmParams::init(2, 3, true, &mut rng);
        let bwd = LstmParams::init(2, 3, true, &mut rng);
        let xs: Vec<Vec<f64>> = (0..4).map(|_| random_vec(2, &mut rng)).collect();
        let out = blstm_forward(&fwd, &bwd, &xs).unwrap();

        let (mut h, mut c) = (vec![0.0; 3], vec![0.0; 3]);
        for t in 0..4 {
            (h, c) = lstm_step(&fwd, &xs[t], &h, &c).unwrap();
            assert_eq!(out.forward_states[t], h);
        }
        let (mut h, mut c) = (vec![0.0; 3], vec![0.0; 3]);
        for t in (0..4).rev() {
            (h, c) = lstm_step(&bwd, &xs[t], &h, &c).unwrap();
            assert_eq!(out.backward_states[t], h);
        }
    }

    #[test]
    fn single_step_shared_parameters_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = LstmParams::init(2, 4, true, &mut rng);
        let out = blstm_forward(&p, &p, &[random_vec(2, &mut rng)]).unwrap();
        assert_eq!(out.forward_states, out.backward_states);
    }

    #[test]
    fn empty_sequence_rejected() {
        let p = LstmParams::zeros(2, 2);
        assert!(blstm_forward(&p, &p, &[]).is_err());
    }

    #[test]
    fn multi_layer_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let blstm = Blstm::init(3, 2, 2, true, &mut rng);
        let xs: Vec<Vec<f64>> = (0..4).map(|_| random_vec(3, &mut rng)).collect();
        // loss = Σ_t w_t·[h_F(t) ⊕ h_B(t)]
        let weights: Vec<Vec<f64>> = (0..4).map(|_| random_vec(4, &mut rng)).collect();
        let loss = |b: &Blstm| {
            let out = b.forward(&xs).unwrap();
            (0..4)
                .map(|t| {
                    out.context(t)
                        .iter()
                        .zip(&weights[t])
                        .map(|(a, w)| a * w)
                        .sum::<f64>()
                })
                .sum::<f64>()
        };
        let (_, cache) = blstm.forward_cached(&xs).unwrap();
        let d_f: Vec<Vec<f64>> = weights.iter().map(|w| w[..2].to_vec()).collect();
        let d_b: Vec<Vec<f64>> = weights.iter().map(|w| w[2..].to_vec()).collect();
        let mut grads = Blstm::zeros(3, 2, 2);
        let d_in = blstm.backward(&cache, &d_f, &d_b, &mut grads);

        let h = 1e-6;
        let mut probe = blstm.clone();
        let n_tensors = probe.tensors().len();
        for ti in 0..n_tensors {
            let len = probe.tensors()[ti].len();
            for k in 0..len {
                let orig = probe.tensors()[ti][k];
                probe.tensors_mut()[ti][k] = orig + h;
                let up = loss(&probe);
                probe.tensors_mut()[ti][k] = orig - h;
                let down = loss(&probe);
                probe.tensors_mut()[ti][k] = orig;
                let num = (up - down) / (2.0 * h);
                let ana = grads.tensors()[ti][k];
                assert!(
                    (num - ana).abs() < 1e-6 * num.abs().max(1.0),
                    "tensor {ti}[{k}]: {ana} vs {num}"
                );
            }
        }
        // input gradients
        for t in 0..4 {
            for k in 0..3 {
                let mut xp = xs.clone();
                xp[t][k] += h;
                let mut xm = xs.clone();
                xm[t][k] -= h;
                let f = |x: &[Vec<f64>]| {
                    let out = blstm.forward(x).unwrap();
                    (0..4)
                        .map(|s| {
                            out.context(s)
                                .iter()
                                .zip(&weights[s])
                                .map(|(a, w)| a * w)
                                .sum::<f64>()
                        })
                        .sum::<f64>()
                };
                let num = (f(&xp) - f(&xm)) / (2.0 * h);
                assert!((num - d_in[t][k]).abs() < 1e-6 * num.abs().max(1.0));
            }
        }
    }
}
