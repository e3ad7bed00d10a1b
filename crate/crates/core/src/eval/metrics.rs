use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub id: String,
    pub label: Label,
    pub probability: f64,
    pub source: String,
}

/// Accuracies in percent. A per-class value is `None` when that class is absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMetrics {
    pub overall: f64,
    pub fake_acc: Option<f64>,
    pub real_acc: Option<f64>,
}

fn check_scores(scored: &[ScoredExample]) -> Result<()> {
    if scored.is_empty() {
        return Err(Error::arg("no scored examples"));
    }
    if let Some(s) = scored.iter().find(|s| !(0.0..=1.0).contains(&s.probability)) {
        return Err(Error::arg(format!("probability {} of {} outside [0, 1]", s.probability, s.id)));
    }
    Ok(())
}

/// Predicts fake when `probability >= threshold`.
pub fn accuracy_metrics(scored: &[ScoredExample], threshold: f64) -> Result<AccuracyMetrics> {
    check_scores(scored)?;
    let mut correct = [0usize; 2];
    let mut total = [0usize; 2];
    for s in scored {
        let c = (s.label == Label::Fake) as usize;
        total[c] += 1;
        if (s.probability >= threshold) == (s.label == Label::Fake) {
            correct[c] += 1;
        }
    }
    let pct = |c: usize, t: usize| (t > 0).then(|| 100.0 * c as f64 / t as f64);
    Ok(AccuracyMetrics {
        overall: 100.0 * (correct[0] + correct[1]) as f64 / scored.len() as f64,
        fake_acc: pct(correct[1], total[1]),
        real_acc: pct(correct[0], total[0]),
    })
}

/// Mean precision at the rank of each fake, ranking by probability
/// descending with ties broken by ascending id.
pub fn average_precision(scored: &[ScoredExample]) -> Result<f64> {
    check_scores(scored)?;
    let mut order: Vec<&ScoredExample> = scored.iter().collect();
    order.sort_by(|a, b| b.probability.total_cmp(&a.probability).then_with(|| a.id.cmp(&b.id)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, s) in order.iter().enumerate() {
        if s.label == Label::Fake {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::UndefinedMetric("average precision needs at least one fake example".into()));
    }
    Ok(sum / hits as f64)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn ex(id: &str, p: f64, fake: bool) -> ScoredExample {
        ScoredExample {
            id: id.into(),
            label: if fake { Label::Fake } else { Label::Real },
            probability: p,
            source: "s".into(),
        }
    }

    #[test]
    fn accuracy_examples() {
        let m = accuracy_metrics(&[ex("a", 0.9, true), ex("b", 0.2, false)], 0.5).unwrap();
        assert_eq!((m.overall, m.fake_acc, m.real_acc), (100.0, Some(100.0), Some(100.0)));
        let m = accuracy_metrics(&[ex("a", 0.6, true), ex("b", 0.6, false)], 0.5).unwrap();
        assert_eq!((m.overall, m.fake_acc, m.real_acc), (50.0, Some(100.0), Some(0.0)));
        let m = accuracy_metrics(&[ex("a", 0.5, true)], 0.5).unwrap();
        assert_eq!((m.fake_acc, m.real_acc), (Some(100.0), None));
        assert!(accuracy_metrics(&[], 0.5).is_err());
    }

    #[test]
    fn accuracy_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s: Vec<_> = (0..1000)
            .map(|i| ex(&i.to_string(), rng.random(), rng.random()))
            .collect();
        let m = accuracy_metrics(&s, 0.5).unwrap();
        let mut ok = 0;
        for e in &s {
            let pred_fake = e.probability >= 0.5;
            if pred_fake == (e.label == Label::Fake) {
                ok += 1;
            }
        }
        assert_eq!(m.overall, 100.0 * ok as f64 / 1000.0);
    }

    #[test]
    fn ap_examples() {
        let s = [ex("a", 0.9, true), ex("b", 0.8, false), ex("c", 0.3, true)];
        assert!((average_precision(&s).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        let perfect = [ex("a", 0.9, true), ex("b", 0.7, true), ex("c", 0.1, false)];
        assert_eq!(average_precision(&perfect).unwrap(), 1.0);
        assert!(matches!(average_precision(&[ex("a", 0.2, false)]), Err(Error::UndefinedMetric(_))));
        // Ties: id order decides, so "a" (real) ranks above "b" (fake).
        let tie = [ex("b", 0.5, true), ex("a", 0.5, false)];
        assert_eq!(average_precision(&tie).unwrap(), 0.5);
    }

    proptest! {
        #[test]
        fn ap_invariant_under_monotone_transform(seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<_> = (0..50).map(|i| ex(&format!("{i:03}"), rng.random(), i % 3 == 0)).collect();
            let t: Vec<_> = s.iter().map(|e| ScoredExample { probability: e.probability.powi(3), ..e.clone() }).collect();
            prop_assert_eq!(average_precision(&s).unwrap(), average_precision(&t).unwrap());
        }

        #[test]
        fn threshold_monotone(seed: u64, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<_> = (0..60).map(|i| ex(&i.to_string(), rng.random(), i % 2 == 0)).collect();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = accuracy_metrics(&s, lo).unwrap();
            let b = accuracy_metrics(&s, hi).unwrap();
            prop_assert!(b.fake_acc.unwrap() <= a.fake_acc.unwrap());
            prop_assert!(b.real_acc.unwrap() >= a.real_acc.unwrap());
        }
    }
}
