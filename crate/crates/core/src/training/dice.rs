use num_traits::Float;
use thiserror::Error;

use crate::grid::Grid;
use crate::tensor::FeatureMap;

/// Smoothing term added to numerator and denominator of every class ratio.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum DiceError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Soft Dice loss `1 - mean_c (2 Σ p·g + ε) / (Σ p + Σ g + ε)` over channel-major
/// `classes × N` buffers. With `include_background == false` class 0 is left out of the mean.
pub fn dice_loss<F: Float>(probs: &[F], target: &[F], classes: usize, include_background: bool) -> Result<F, DiceError> {
    dice_loss_grad(probs, target, classes, include_background).map(|(l, _)| l)
}

/// Loss and its gradient with respect to `probs`.
pub fn dice_loss_grad<F: Float>(
    probs: &[F],
    target: &[F],
    classes: usize,
    include_background: bool,
) -> Result<(F, Vec<F>), DiceError> {
    if classes == 0 || probs.len() != target.len() || !probs.len().is_multiple_of(classes) {
        return Err(DiceError::ShapeMismatch(format!(
            "probs {} / target {} values for {classes} classes",
            probs.len(),
            target.len()
        )));
    }
    let n = probs.len() / classes;
    let first = usize::from(!include_background);
    if first >= classes {
        return Err(DiceError::ShapeMismatch("no foreground classes".into()));
    }
    let eps = F::from(DICE_EPS).expect("representable");
    let two = F::one() + F::one();
    let counted = F::from(classes - first).expect("representable");
    let mut loss = F::zero();
    let mut grad = vec![F::zero(); probs.len()];
    for c in first..classes {
        let (p, g) = (&probs[c * n..(c + 1) * n], &target[c * n..(c + 1) * n]);
        let (mut inter, mut sp, mut sg) = (F::zero(), F::zero(), F::zero());
        for (&a, &b) in p.iter().zip(g) {
            inter = inter + a * b;
            sp = sp + a;
            sg = sg + b;
        }
        let num = two * inter + eps;
        let den = sp + sg + eps;
        loss = loss + num / den;
        for (d, &b) in grad[c * n..(c + 1) * n].iter_mut().zip(g) {
            *d = -(two * b * den - num) / (den * den) / counted;
        }
    }
    Ok((F::one() - loss / counted, grad))
}

/// Dice loss of `probs` against class-index `labels`, sums accumulated in f64.
/// Returns the loss and `d loss / d probs`.
pub fn dice_loss_labels(probs: &FeatureMap, labels: &Grid<u8>, include_background: bool) -> Result<(f64, FeatureMap), DiceError> {
    let classes = probs.channels();
    if probs.dims() != labels.dims() {
        return Err(DiceError::ShapeMismatch(format!("probs {:?} vs labels {:?}", probs.dims(), labels.dims())));
    }
    if let Some(&bad) = labels.as_slice().iter().find(|&&l| l as usize >= classes) {
        return Err(DiceError::ShapeMismatch(format!("label {bad} with {classes} classes")));
    }
    let first = usize::from(!include_background);
    if first >= classes {
        return Err(DiceError::ShapeMismatch("no foreground classes".into()));
    }
    let mut inter = vec![0.0f64; classes];
    let mut sg = vec![0.0f64; classes];
    for (v, &l) in labels.as_slice().iter().enumerate() {
        inter[l as usize] += probs.channel(l as usize)[v] as f64;
        sg[l as usize] += 1.0;
    }
    let counted = (classes - first) as f64;
    let mut loss = 0.0;
    let mut grad = FeatureMap::zeros(classes, probs.dims());
    let mut coef = vec![(0.0f64, 0.0f64); classes];
    for c in first..classes {
        let sp: f64 = probs.channel(c).iter().map(|&x| x as f64).sum();
        let num = 2.0 * inter[c] + DICE_EPS;
        let den = sp + sg[c] + DICE_EPS;
        loss += num / den;
        // d/dp = -(2g·den - num) / den² / C, split into the g-independent and g-dependent parts
        coef[c] = (num / (den * den) / counted, -2.0 / den / counted);
        grad.channel_mut(c).fill(coef[c].0 as f32);
    }
    for (v, &l) in labels.as_slice().iter().enumerate() {
        let l = l as usize;
        if l >= first {
            grad.channel_mut(l)[v] += coef[l].1 as f32;
        }
    }
    Ok((1.0 - loss / counted, grad))
}

/// One-hot `classes × N` encoding of class-index labels.
pub fn one_hot<F: Float>(labels: &[u8], classes: usize) -> Vec<F> {
    let n = labels.len();
    let mut out = vec![F::zero(); classes * n];
    for (v, &l) in labels.iter().enumerate() {
        out[l as usize * n + v] = F::one();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let labels = [0u8, 1, 2, 1];
        let t = one_hot::<f64>(&labels, 3);
        assert_eq!(dice_loss(&t, &t, 3, true).unwrap(), 0.0);
    }

    #[test]
    fn disjoint_prediction_is_near_one() {
        let t = one_hot::<f64>(&[0, 0, 1, 1], 2);
        let p = one_hot::<f64>(&[1, 1, 0, 0], 2);
        let l = dice_loss(&p, &t, 2, true).unwrap();
        assert!((l - 1.0).abs() < 1e-5);
    }

    #[test]
    fn single_voxel_half_mass_hand_value() {
        // one voxel, target class 7 of 32, half the mass on class 7 and half on class 0
        let mut p = vec![0.0f64; 32];
        p[7] = 0.5;
        p[0] = 0.5;
        let t = one_hot::<f64>(&[7], 32);
        let eps = DICE_EPS;
        let c7 = (2.0 * 0.5 + eps) / (0.5 + 1.0 + eps);
        let c0 = eps / (0.5 + eps);
        let empty = 1.0; // eps / eps for the 30 untouched classes
        let expect = 1.0 - (c7 + c0 + 30.0 * empty) / 32.0;
        assert!((c7 - 2.0 / 3.0).abs() < 1e-5);
        assert!((dice_loss(&p, &t, 32, true).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn moving_mass_to_the_target_never_increases_loss() {
        let t = one_hot::<f64>(&[1], 3);
        let mut last = f64::INFINITY;
        for k in 0..=10 {
            let q = k as f64 / 10.0;
            let p = [(1.0 - q) / 2.0, q, (1.0 - q) / 2.0];
            let l = dice_loss(&p, &t, 3, true).unwrap();
            assert!(l <= last + 1e-15);
            last = l;
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        assert!(dice_loss::<f64>(&[0.5; 6], &[0.5; 4], 2, true).is_err());
        assert!(dice_loss::<f64>(&[0.5; 5], &[0.5; 5], 2, true).is_err());
    }

    #[test]
    fn label_form_matches_generic_form() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let labels = Grid::from_fn([3, 2, 2], |_| r.gen_range(0..4u8));
        let mut raw: Vec<f32> = (0..48).map(|_| r.gen_range(0.01..1.0)).collect();
        for v in 0..12 {
            let s: f32 = (0..4).map(|c| raw[c * 12 + v]).sum();
            for c in 0..4 {
                raw[c * 12 + v] /= s;
            }
        }
        let probs = FeatureMap::from_vec(4, [3, 2, 2], raw.clone()).unwrap();
        for bg in [true, false] {
            let (l, g) = dice_loss_labels(&probs, &labels, bg).unwrap();
            let p64: Vec<f64> = raw.iter().map(|&x| x as f64).collect();
            let (l2, g2) = dice_loss_grad(&p64, &one_hot(labels.as_slice(), 4), 4, bg).unwrap();
            assert!((l - l2).abs() < 1e-6);
            for (a, b) in g.as_slice().iter().zip(&g2) {
                assert!((*a as f64 - b).abs() < 1e-5);
            }
        }
    }
}
