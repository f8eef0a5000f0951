//! Central finite-difference verification of analytic gradients.

use rand::Rng;

use super::params::Parameters;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_MIN_COORDINATES: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation interval straddles a ReLU kink.
    pub skipped_kinks: usize,
    /// `(tensor, index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_relative_error < threshold
    }
}

/// A loss value whose differences can be taken without cancellation.
///
/// Subtracting two nearby `f64` losses loses everything below one ulp of the
/// loss, which for a 1e-5 probe swamps gradients below roughly 1e-7. Values
/// that keep a better-conditioned representation can do better.
pub trait LossValue {
    fn value(&self) -> f64;
    /// `self − other`.
    fn minus(&self, other: &Self) -> f64;
}

impl LossValue for f64 {
    fn value(&self) -> f64 {
        *self
    }

    fn minus(&self, other: &Self) -> f64 {
        self - other
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Picks the coordinates to probe: up to 8 from every tensor, then uniformly
/// random ones until `min_coords` are selected (or all of them, if fewer).
fn choose_coordinates<R: Rng>(
    sizes: &[usize],
    min_coords: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    let total: usize = sizes.iter().sum();
    if total <= min_coords {
        return sizes
            .iter()
            .enumerate()
            .flat_map(|(t, &n)| (0..n).map(move |i| (t, i)))
            .collect();
    }
    let mut chosen = std::collections::BTreeSet::new();
    for (t, &n) in sizes.iter().enumerate() {
        for i in rand::seq::index::sample(rng, n, n.min(8)) {
            chosen.insert((t, i));
        }
    }
    while chosen.len() < min_coords {
        let mut flat = rng.random_range(0..total);
        let mut t = 0;
        while flat >= sizes[t] {
            flat -= sizes[t];
            t += 1;
        }
        chosen.insert((t, flat));
    }
    chosen.into_iter().collect()
}

/// Compares `analytic` with central differences `(f(p+h) − f(p−h)) / 2h` on a
/// random subset of at least `min_coords` coordinates.
///
/// A coordinate is skipped when the central differences at `h` and `h/2`
/// disagree beyond what smooth truncation error allows, or when the one-sided
/// slopes jump; both happen only when a ReLU pre-activation sits at or crosses
/// zero inside the probe interval.
pub fn gradient_check<P, G, V, F, R>(
    params: &P,
    analytic: &G,
    mut loss: F,
    step: f64,
    min_coords: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    P: Parameters + Clone,
    G: Parameters + ?Sized,
    V: LossValue,
    F: FnMut(&P) -> V,
    R: Rng,
{
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let analytic_sizes: Vec<usize> = analytic.tensors().iter().map(|t| t.len()).collect();
    if sizes != analytic_sizes {
        return Err(Error::Dimension(
            "gradient set is not shape-congruent with parameters".into(),
        ));
    }
    let base = loss(params);
    if !base.value().is_finite() {
        return Err(Error::Numeric(format!(
            "loss is not finite: {}",
            base.value()
        )));
    }
    let coords = choose_coordinates(&sizes, min_coords, rng);
    let grads = analytic.tensors();
    let mut probe = params.clone();
    let mut eval = |probe: &mut P, t: usize, i: usize, delta: f64| -> Result<V> {
        let orig = probe.tensors()[t][i];
        probe.tensors_mut()[t][i] = orig + delta;
        let v = loss(probe);
        probe.tensors_mut()[t][i] = orig;
        if v.value().is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric(format!(
                "loss is not finite at tensor {t}[{i}]"
            )))
        }
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst: None,
    };
    for (t, i) in coords {
        let up = eval(&mut probe, t, i, step)?;
        let down = eval(&mut probe, t, i, -step)?;
        let numeric = up.minus(&down) / (2.0 * step);
        let up_half = eval(&mut probe, t, i, step / 2.0)?;
        let down_half = eval(&mut probe, t, i, -step / 2.0)?;
        let numeric_half = up_half.minus(&down_half) / step;
        let scale = numeric.abs().max(numeric_half.abs());
        let slope_right = up_half.minus(&base) / (step / 2.0);
        let slope_left = base.minus(&down_half) / (step / 2.0);
        let straddles = (numeric - numeric_half).abs() > 1e-6 * scale + 1e-9;
        let at_kink = (slope_right - slope_left).abs() > 1e-2 * scale + 1e-4;
        if straddles || at_kink {
            report.skipped_kinks += 1;
            continue;
        }
        let a = grads[t][i];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(err);
            report.worst = Some((t, i, a, numeric));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::GradientSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one(v: f64) -> GradientSet {
        GradientSet {
            tensors: vec![vec![v]],
        }
    }

    #[test]
    fn quadratic_toy_loss() {
        let p = one(3.0);
        let g = one(6.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = gradient_check(
            &p,
            &g,
            |q| q.tensors[0][0].powi(2),
            DEFAULT_STEP,
            200,
            &mut rng,
        )
        .unwrap();
        assert_eq!(r.checked, 1);
        assert!(r.max_relative_error < 1e-9, "{r:?}");
    }

    #[test]
    fn wrong_gradient_detected() {
        let p = one(3.0);
        let g = one(5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = gradient_check(
            &p,
            &g,
            |q| q.tensors[0][0].powi(2),
            DEFAULT_STEP,
            200,
            &mut rng,
        )
        .unwrap();
        assert!(!r.passes(1e-4));
    }

    #[test]
    fn coordinate_on_relu_kink_is_skipped() {
        // relu(p) at p = 0: central difference gives 0.5, subgradient says 0
        let p = one(0.0);
        let g = one(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = gradient_check(
            &p,
            &g,
            |q| q.tensors[0][0].max(0.0),
            DEFAULT_STEP,
            200,
            &mut rng,
        )
        .unwrap();
        assert_eq!(r.skipped_kinks, 1);
        assert_eq!(r.checked, 0);
        let p = one(3e-6);
        let g = one(1.0);
        let r = gradient_check(
            &p,
            &g,
            |q| q.tensors[0][0].max(0.0),
            DEFAULT_STEP,
            200,
            &mut rng,
        )
        .unwrap();
        assert_eq!(r.skipped_kinks, 1);
        assert_eq!(r.checked, 0);
    }

    #[test]
    fn samples_at_least_min_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let coords = choose_coordinates(&[1000, 3, 50], 200, &mut rng);
        assert!(coords.len() >= 200);
        assert!(coords.iter().any(|&(t, _)| t == 1));
        assert!(coords.iter().any(|&(t, _)| t == 2));
        assert_eq!(choose_coordinates(&[5, 5], 200, &mut rng).len(), 10);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let p = one(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(gradient_check(&p, &p.clone(), |_| f64::NAN, DEFAULT_STEP, 10, &mut rng).is_err());
    }
}
