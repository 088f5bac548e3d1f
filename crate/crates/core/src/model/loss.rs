use serde::{Deserialize, Serialize};

use super::PredictionTriple;

/// Predictions are clamped to `[LOSS_EPS, 1 - LOSS_EPS]` inside the log loss.
pub const LOSS_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    pub has_next: bool,
    pub effective_view: bool,
    pub like: bool,
}

impl Labels {
    pub fn as_array(&self) -> [f64; 3] {
        [
            self.has_next as u8 as f64,
            self.effective_view as u8 as f64,
            self.like as u8 as f64,
        ]
    }
}

/// Binary cross-entropy of one prediction with clamping.
pub fn log_loss(p: f64, y: f64) -> f64 {
    let p = p.clamp(LOSS_EPS, 1.0 - LOSS_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Weighted sum over tasks of the per-task log loss, averaged over instances.
pub fn loss(preds: &[PredictionTriple], labels: &[Labels], weights: [f64; 3]) -> f64 {
    assert_eq!(preds.len(), labels.len(), "prediction/label count mismatch");
    if preds.is_empty() {
        return 0.0;
    }
    let total: f64 = preds
        .iter()
        .zip(labels)
        .map(|(p, y)| {
            let p = p.as_array();
            let y = y.as_array();
            (0..3).map(|j| weights[j] * log_loss(p[j], y[j])).sum::<f64>()
        })
        .sum();
    total / preds.len() as f64
}

/// Derivative of `weight * log_loss(sigmoid(z), y) / n` with respect to `z`.
/// Zero inside the clamped region, where the loss is flat.
pub fn d_loss_d_logit(p: f64, y: f64, weight: f64, n: usize) -> f64 {
    if !(LOSS_EPS..=1.0 - LOSS_EPS).contains(&p) {
        return 0.0;
    }
    weight * (p - y) / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple(p: f64) -> PredictionTriple {
        PredictionTriple::from_array([p; 3])
    }

    #[test]
    fn half_predictions_cost_three_ln2() {
        let labels = [
            Labels { has_next: true, effective_view: false, like: true },
            Labels::default(),
        ];
        let l = loss(&[triple(0.5), triple(0.5)], &labels, [1.0; 3]);
        assert!((l - 3.0 * std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn perfect_predictions_are_nearly_free() {
        let y = Labels { has_next: true, effective_view: true, like: false };
        let p = PredictionTriple::from_array([1.0, 1.0, 0.0]);
        let l = loss(&[p], &[y], [1.0, 2.0, 1.0]);
        assert!(l >= 0.0);
        assert!(l <= 3.0 * 2.0 * -(1.0 - LOSS_EPS).ln() + 1e-15);
    }

    #[test]
    fn like_weight_is_linear() {
        let y = [Labels { has_next: true, effective_view: false, like: true }];
        let p = [PredictionTriple::from_array([0.7, 0.2, 0.3])];
        let base = loss(&p, &y, [1.0, 1.0, 0.0]);
        let one = loss(&p, &y, [1.0, 1.0, 1.0]) - base;
        let two = loss(&p, &y, [1.0, 1.0, 2.0]) - base;
        assert!((two - 2.0 * one).abs() < 1e-12);
        assert!((one - -(0.3f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn logit_gradient_matches_difference_quotient() {
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        for &(z, y) in &[(0.3, 1.0), (-1.7, 0.0), (2.5, 0.0)] {
            let h = 1e-6;
            let num = (log_loss(sig(z + h), y) - log_loss(sig(z - h), y)) / (2.0 * h);
            assert!((d_loss_d_logit(sig(z), y, 1.0, 1) - num).abs() < 1e-7);
        }
    }
}
