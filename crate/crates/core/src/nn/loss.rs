pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Probability of class 1 under a softmax over two logits.
pub fn positive_probability(logits: &[f64]) -> f64 {
    softmax(logits)[1]
}

/// Returns `(−log softmax(logits)[label], softmax(logits) − onehot(label))`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    debug_assert!(label < logits.len());
    let (argmax, &m) = logits
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty logits");
    // log-sum-exp = m + ln(1 + Σ_{j≠argmax} e^{l_j − m})
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != argmax)
        .map(|(_, &l)| (l - m).exp())
        .sum();
    let loss = (m - logits[label]) + rest.ln_1p();
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    (loss, grad)
}

/// Two-class cross-entropy kept as its margin `m = l_other − l_label`, so the
/// loss is `softplus(m)`. Differences between two such values are computed
/// from the margins directly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropyValue {
    pub margin: f64,
}

impl CrossEntropyValue {
    pub fn new(logits: &[f64], label: usize) -> Self {
        debug_assert!(logits.len() == 2 && label < 2);
        CrossEntropyValue {
            margin: logits[1 - label] - logits[label],
        }
    }
}

fn softplus(m: f64) -> f64 {
    m.max(0.0) + (-m.abs()).exp().ln_1p()
}

impl crate::nn::gradcheck::LossValue for CrossEntropyValue {
    fn value(&self) -> f64 {
        softplus(self.margin)
    }

    // softplus(a) − softplus(b) = ln(1 + expm1(a − b)·σ(b))
    fn minus(&self, other: &Self) -> f64 {
        ((self.margin - other.margin).exp_m1() * super::linalg::sigmoid(other.margin)).ln_1p()
    }
}
