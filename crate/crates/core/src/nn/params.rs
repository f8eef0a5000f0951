use crate::error::{Error, Result};

/// A fixed, ordered collection of trainable tensors viewed as flat slices.
///
/// The order of `tensors` and `tensors_mut` must agree; gradient sets and
/// serialization rely on it.
pub trait Parameters {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Gradients as plain flat tensors, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub tensors: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_like<P: Parameters + ?Sized>(params: &P) -> Self {
        GradientSet {
            tensors: params
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.len()])
                .collect(),
        }
    }

    pub fn from_parameters<P: Parameters + ?Sized>(grads: &P) -> Self {
        GradientSet {
            tensors: grads.tensors().iter().map(|t| t.to_vec()).collect(),
        }
    }
}

impl Parameters for GradientSet {
    fn tensors(&self) -> Vec<&[f64]> {
        self.tensors.iter().map(Vec::as_slice).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.tensors.iter_mut().map(Vec::as_mut_slice).collect()
    }
}

/// Global L2 norm over every tensor.
pub fn global_norm<P: Parameters + ?Sized>(grads: &P) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|t| t.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so its global norm is at most `max_norm`; returns the
/// norm before clipping. `max_norm = 0` leaves the gradient alone.
pub fn clip_global_norm<P: Parameters + ?Sized>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for t in grads.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Plain SGD: `p ← p − lr·g` for every entry.
pub fn sgd_step<P, G>(params: &mut P, grads: &G, lr: f64) -> Result<()>
where
    P: Parameters + ?Sized,
    G: Parameters + ?Sized,
{
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!(
            "learning rate must be finite and >= 0, got {lr}"
        )));
    }
    let gs = grads.tensors();
    let mut ps = params.tensors_mut();
    if ps.len() != gs.len() {
        return Err(Error::Dimension(format!(
            "{} parameter tensors but {} gradient tensors",
            ps.len(),
            gs.len()
        )));
    }
    if let Some(i) = (0..ps.len()).find(|&i| ps[i].len() != gs[i].len()) {
        return Err(Error::Dimension(format!(
            "tensor {i}: parameter has {} entries, gradient {}",
            ps[i].len(),
            gs[i].len()
        )));
    }
    for (p, g) in ps.iter_mut().zip(&gs) {
        for (pv, &gv) in p.iter_mut().zip(g.iter()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> GradientSet {
        GradientSet {
            tensors: vec![vec![v]],
        }
    }

    #[test]
    fn sgd_examples() {
        let mut p = scalar(1.0);
        sgd_step(&mut p, &scalar(2.0), 0.1).unwrap();
        assert!((p.tensors[0][0] - 0.8).abs() < 1e-15);

        let mut p = GradientSet {
            tensors: vec![vec![1.0, -2.0], vec![3.0]],
        };
        let before = p.clone();
        let g = GradientSet {
            tensors: vec![vec![5.0, 6.0], vec![7.0]],
        };
        sgd_step(&mut p, &g, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn two_steps_equal_one_double_step() {
        let g = GradientSet {
            tensors: vec![vec![0.5, -0.25], vec![1.0]],
        };
        let mut a = GradientSet {
            tensors: vec![vec![1.0, 2.0], vec![-1.0]],
        };
        let mut b = a.clone();
        sgd_step(&mut a, &g, 0.125).unwrap();
        sgd_step(&mut a, &g, 0.125).unwrap();
        sgd_step(&mut b, &g, 0.25).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = scalar(1.0);
        let g = GradientSet {
            tensors: vec![vec![1.0, 2.0]],
        };
        assert!(sgd_step(&mut p, &g, 0.1).is_err());
        let g = GradientSet { tensors: vec![] };
        assert!(sgd_step(&mut p, &g, 0.1).is_err());
    }

    #[test]
    fn clipping_rescales_long_gradients_only() {
        let mut g = GradientSet {
            tensors: vec![vec![3.0], vec![4.0]],
        };
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g.tensors, vec![vec![3.0], vec![4.0]]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.tensors[0][0] - 0.6).abs() < 1e-15 && (g.tensors[1][0] - 0.8).abs() < 1e-15);
        clip_global_norm(&mut g, 0.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
    }
}
