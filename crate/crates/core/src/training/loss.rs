//! Per-sample losses and the hard-sample rule.

use crate::correction::hard_probability;

/// Squared distance error.
pub fn pcm_loss(d_pred: f64, d_gt: f64) -> f64 {
    let e = d_pred - d_gt;
    e * e
}

/// Absolute relative distance error.
pub fn error_rate(d_pred: f64, d_gt: f64) -> f64 {
    (d_pred - d_gt).abs() / d_gt
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HardLabel(pub bool);

impl HardLabel {
    pub fn index(self) -> usize {
        usize::from(self.0)
    }
}

/// Hard iff the error is strictly above the threshold.
pub fn hard_label(err: f64, threshold: f64) -> HardLabel {
    HardLabel(err > threshold)
}

/// `-log softmax(logits)[target]`, computed without overflow.
pub fn gate_loss(logits: [f64; 2], target: HardLabel) -> f64 {
    let (own, other) = if target.0 {
        (logits[1], logits[0])
    } else {
        (logits[0], logits[1])
    };
    // log(1 + exp(other - own))
    let z = other - own;
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `dL/dlogits` of [`gate_loss`]: `softmax - onehot`.
pub fn gate_loss_grad(logits: [f64; 2], target: HardLabel) -> [f64; 2] {
    let p1 = hard_probability(logits);
    let p = [1.0 - p1, p1];
    let mut g = p;
    g[target.index()] -= 1.0;
    g
}

/// Sum of every stage's offset loss plus `lambda` times every gate loss.
pub fn total_loss(pcm_losses: &[f64], gate_losses: &[f64], lambda: f64) -> f64 {
    pcm_losses.iter().sum::<f64>() + lambda * gate_losses.iter().sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn pcm_loss_examples() {
        assert_eq!(pcm_loss(10.0, 10.0), 0.0);
        assert_eq!(pcm_loss(12.0, 10.0), 4.0);
        assert_eq!(pcm_loss(8.0, 10.0), 4.0);
    }

    #[test]
    fn error_rate_examples() {
        assert_eq!(error_rate(10.0, 10.0), 0.0);
        assert!((error_rate(10.6, 10.0) - 0.06).abs() < 1e-15);
        assert_eq!(error_rate(5.0, 10.0), 0.5);
    }

    #[test]
    fn hard_label_is_strict() {
        assert_eq!(hard_label(0.06, 0.06), HardLabel(false));
        assert_eq!(hard_label(0.0601, 0.06), HardLabel(true));
        assert_eq!(hard_label(0.0, 1e-9), HardLabel(false));
        for d in [0.1, 1.0, 17.3, 1e4] {
            assert_eq!(hard_label(error_rate(d, d), 0.06), HardLabel(false));
        }
    }

    #[test]
    fn gate_loss_examples() {
        assert!((gate_loss([0.0, 0.0], HardLabel(true)) - LN_2).abs() < 1e-15);
        // scripted: -log(sigmoid(20)) = log1p(exp(-20)) = 2.061153620314381e-09
        let easy_side = gate_loss([-10.0, 10.0], HardLabel(true));
        assert!((easy_side - 2.061_153_620_314_381e-9).abs() < 1e-22);
        // -log(sigmoid(-20)) = 20 + log1p(exp(-20)) = 20.000000002061153
        let wrong_side = gate_loss([-10.0, 10.0], HardLabel(false));
        assert!((wrong_side - 20.000_000_002_061_153).abs() < 1e-12);
        assert!(gate_loss([-400.0, 400.0], HardLabel(false)).is_finite());
    }

    #[test]
    fn gate_loss_grad_matches_difference() {
        let eps = 1e-6;
        for logits in [[0.3, -1.1], [2.0, 2.5], [-7.0, 4.0]] {
            for target in [HardLabel(false), HardLabel(true)] {
                let g = gate_loss_grad(logits, target);
                for k in 0..2 {
                    let mut a = logits;
                    let mut b = logits;
                    a[k] += eps;
                    b[k] -= eps;
                    let fd = (gate_loss(a, target) - gate_loss(b, target)) / (2.0 * eps);
                    assert!((fd - g[k]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(&[4.0], &[], 1.0), 4.0);
        assert!((total_loss(&[4.0, 1.0], &[LN_2], 1.0) - (5.0 + LN_2)).abs() < 1e-15);
        assert_eq!(total_loss(&[4.0, 1.0], &[LN_2, 3.0], 0.0), 5.0);
    }

    proptest::proptest! {
        #[test]
        fn gate_loss_non_negative(a in -50.0..50.0f64, b in -50.0..50.0f64, t: bool) {
            proptest::prop_assert!(gate_loss([a, b], HardLabel(t)) >= 0.0);
        }
    }
}
