use crate::error::{Error, Result};

/// One-vs-rest confusion counts with respect to a chosen positive class.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub true_neg: u64,
    pub false_pos: u64,
    pub false_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.true_neg + self.false_pos + self.false_neg
    }
}

/// Tallies one-vs-rest counts of predictions against truths.
pub fn confusion(
    predictions: &[usize],
    truths: &[usize],
    positive_class: usize,
) -> Result<ConfusionCounts> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: truths.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in predictions.iter().zip(truths) {
        match (p == positive_class, t == positive_class) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    Ok(c)
}

/// The eight derived scores. `None` marks a ratio whose denominator is zero
/// (and AUC when it was not computed).
#[derive(Clone, Copy, PartialEq, Debug, Default)]
pub struct MetricsReport {
    pub acc: Option<f64>,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    pub bac: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
}

impl MetricsReport {
    pub const FIELDS: [&'static str; 8] =
        ["acc", "sen", "spe", "bac", "ppv", "npv", "f1", "auc"];

    pub fn values(&self) -> [Option<f64>; 8] {
        [
            self.acc, self.sen, self.spe, self.bac, self.ppv, self.npv, self.f1, self.auc,
        ]
    }

    pub fn from_values(values: [Option<f64>; 8]) -> Self {
        Self {
            acc: values[0],
            sen: values[1],
            spe: values[2],
            bac: values[3],
            ppv: values[4],
            npv: values[5],
            f1: values[6],
            auc: values[7],
        }
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

/// Evaluates ACC, SEN, SPE, BAC, PPV, NPV, and F1 from the counts.
/// Zero-denominator cases yield `None` rather than a crash; AUC is left
/// unset (it needs scores, not counts).
pub fn metrics(c: &ConfusionCounts) -> MetricsReport {
    let sen = ratio(c.true_pos, c.true_pos + c.false_neg);
    let spe = ratio(c.true_neg, c.true_neg + c.false_pos);
    MetricsReport {
        acc: ratio(c.true_pos + c.true_neg, c.total()),
        sen,
        spe,
        bac: match (sen, spe) {
            (Some(a), Some(b)) => Some((a + b) / 2.0),
            _ => None,
        },
        ppv: ratio(c.true_pos, c.true_pos + c.false_pos),
        npv: ratio(c.true_neg, c.true_neg + c.false_neg),
        f1: ratio(2 * c.true_pos, 2 * c.true_pos + c.false_pos + c.false_neg),
        auc: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn perfect_binary_predictions() {
        let c = confusion(&[1, 0, 1], &[1, 0, 1], 1).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                true_pos: 2,
                true_neg: 1,
                false_pos: 0,
                false_neg: 0
            }
        );
    }

    #[test]
    fn all_wrong_binary_predictions() {
        let c = confusion(&[0, 1, 0, 1], &[1, 0, 1, 0], 1).unwrap();
        assert_eq!(c.true_pos, 0);
        assert_eq!(c.true_neg, 0);
        assert_eq!(c.false_pos, 2);
        assert_eq!(c.false_neg, 2);
    }

    #[test]
    fn random_case_matches_tally_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(55);
        let preds: Vec<usize> = (0..200).map(|_| rng.random_range(0..3)).collect();
        let truths: Vec<usize> = (0..200).map(|_| rng.random_range(0..3)).collect();
        for positive in 0..3 {
            let c = confusion(&preds, &truths, positive).unwrap();
            let mut tp = 0;
            let mut tn = 0;
            let mut fp = 0;
            let mut fal_n = 0;
            for i in 0..200 {
                let p = preds[i] == positive;
                let t = truths[i] == positive;
                if p && t {
                    tp += 1;
                } else if p {
                    fp += 1;
                } else if t {
                    fal_n += 1;
                } else {
                    tn += 1;
                }
            }
            assert_eq!(c.true_pos, tp);
            assert_eq!(c.true_neg, tn);
            assert_eq!(c.false_pos, fp);
            assert_eq!(c.false_neg, fal_n);
            assert_eq!(c.total(), 200);
        }
    }

    #[test]
    fn metric_arithmetic_hand_case() {
        let c = ConfusionCounts {
            true_pos: 2,
            true_neg: 3,
            false_pos: 1,
            false_neg: 0,
        };
        let m = metrics(&c);
        assert_eq!(m.acc, Some(5.0 / 6.0));
        assert_eq!(m.sen, Some(1.0));
        assert_eq!(m.spe, Some(0.75));
        assert_eq!(m.bac, Some(0.875));
        assert_eq!(m.ppv, Some(2.0 / 3.0));
        assert_eq!(m.npv, Some(1.0));
        assert_eq!(m.f1, Some(0.8));
        assert_eq!(m.auc, None);
    }

    #[test]
    fn degenerate_counts_give_undefined_markers() {
        let m = metrics(&ConfusionCounts::default());
        assert_eq!(m.acc, None);
        assert_eq!(m.sen, None);
        assert_eq!(m.spe, None);
        assert_eq!(m.bac, None);
        assert_eq!(m.ppv, None);
        assert_eq!(m.npv, None);
        assert_eq!(m.f1, None);
    }

    #[test]
    fn published_triplet_self_consistency() {
        // PPV = 0.88, SEN = 1.00 implies F1 = 2·0.88/1.88 ≈ 0.936, i.e. the
        // printed 0.94 up to rounding.
        let f1: f64 = 2.0 * 0.88 * 1.00 / (0.88 + 1.00);
        assert!((f1 - 0.94).abs() <= 0.01);
        assert!((f1 - 0.93617).abs() < 1e-4);
    }

    #[test]
    fn identities_hold_whenever_defined() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let c = ConfusionCounts {
                true_pos: rng.random_range(0..20),
                true_neg: rng.random_range(0..20),
                false_pos: rng.random_range(0..20),
                false_neg: rng.random_range(0..20),
            };
            let m = metrics(&c);
            if let (Some(sen), Some(spe), Some(bac)) = (m.sen, m.spe, m.bac) {
                assert!((bac - (sen + spe) / 2.0).abs() < 1e-12);
            }
            if let (Some(ppv), Some(sen), Some(f1)) = (m.ppv, m.sen, m.f1) {
                if ppv + sen > 0.0 {
                    assert!((f1 - 2.0 * ppv * sen / (ppv + sen)).abs() < 1e-12);
                }
            }
            for v in m.values().into_iter().flatten() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
