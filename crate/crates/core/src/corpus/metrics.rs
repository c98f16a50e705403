use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CorpusError, LabelSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub total: usize,
    pub missing_predictions: usize,
}

/// Accuracy and macro-F1 over the full label set.
///
/// Golds without a prediction count as wrong and as false negatives for
/// their class. Classes never predicted or never seen contribute an F1 of 0.
pub fn compute_metrics(
    predictions: &BTreeMap<String, String>,
    golds: &BTreeMap<String, String>,
    labels: &LabelSet,
) -> Result<Metrics, CorpusError> {
    if golds.is_empty() {
        return Err(CorpusError::EmptyGolds);
    }
    let unmatched = predictions.keys().filter(|id| !golds.contains_key(*id)).count();
    if unmatched > 0 {
        return Err(CorpusError::IdMismatch {
            unmatched,
            total: predictions.len(),
            pct: 100.0 * unmatched as f64 / predictions.len() as f64,
        });
    }

    let mut tp: BTreeMap<&str, usize> = BTreeMap::new();
    let mut predicted: BTreeMap<&str, usize> = BTreeMap::new();
    let mut support: BTreeMap<&str, usize> = BTreeMap::new();
    let mut correct = 0;
    let mut missing = 0;
    for (id, gold) in golds {
        *support.entry(gold).or_default() += 1;
        match predictions.get(id) {
            Some(p) => {
                *predicted.entry(p).or_default() += 1;
                if p == gold {
                    correct += 1;
                    *tp.entry(gold).or_default() += 1;
                }
            }
            None => missing += 1,
        }
    }

    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let per_class: BTreeMap<String, ClassMetrics> = labels
        .iter()
        .map(|l| {
            let t = tp.get(l).copied().unwrap_or(0);
            let precision = ratio(t, predicted.get(l).copied().unwrap_or(0));
            let s = support.get(l).copied().unwrap_or(0);
            let recall = ratio(t, s);
            let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            (l.to_owned(), ClassMetrics { precision, recall, f1, support: s })
        })
        .collect();
    let macro_f1 = per_class.values().map(|c| c.f1).sum::<f64>() / labels.len() as f64;
    Ok(Metrics {
        accuracy: ratio(correct, golds.len()),
        macro_f1,
        per_class,
        total: golds.len(),
        missing_predictions: missing,
    })
}

impl Metrics {
    /// Plain-text table: overall scores then one row per class.
    pub fn table(&self) -> String {
        let mut out = format!(
            "accuracy  {:.4}\nmacro_f1  {:.4}\nn         {}\n\n{:<14} {:>9} {:>9} {:>9} {:>8}\n",
            self.accuracy, self.macro_f1, self.total, "label", "precision", "recall", "f1", "support"
        );
        for (l, c) in &self.per_class {
            out.push_str(&format!("{l:<14} {:>9.4} {:>9.4} {:>9.4} {:>8}\n", c.precision, c.recall, c.f1, c.support));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn hand_case() {
        let labels = LabelSet::new(["a", "b"]).unwrap();
        let golds = map(&[("1", "a"), ("2", "a"), ("3", "b"), ("4", "b")]);
        let preds = map(&[("1", "a"), ("2", "b"), ("3", "b"), ("4", "b")]);
        let m = compute_metrics(&preds, &golds, &labels).unwrap();
        assert!((m.accuracy - 0.75).abs() < 1e-9);
        assert!((m.per_class["a"].f1 - 2.0 / 3.0).abs() < 1e-9);
        assert!((m.per_class["b"].f1 - 0.8).abs() < 1e-9);
        assert!((m.macro_f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn perfect_over_seven_classes() {
        let labels = LabelSet::isear();
        let golds: BTreeMap<String, String> = labels.iter().enumerate().map(|(i, l)| (i.to_string(), l.to_owned())).collect();
        let m = compute_metrics(&golds, &golds, &labels).unwrap();
        assert_eq!((m.accuracy, m.macro_f1), (1.0, 1.0));
    }

    #[test]
    fn missing_prediction_is_wrong() {
        let labels = LabelSet::new(["a", "b"]).unwrap();
        let golds = map(&[("1", "a"), ("2", "b")]);
        let m = compute_metrics(&map(&[("1", "a")]), &golds, &labels).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.per_class["b"].recall, 0.0);
        assert_eq!(m.missing_predictions, 1);
    }

    #[test]
    fn errors() {
        let labels = LabelSet::new(["a"]).unwrap();
        assert!(matches!(compute_metrics(&map(&[]), &map(&[]), &labels), Err(CorpusError::EmptyGolds)));
        let e = compute_metrics(&map(&[("x", "a"), ("y", "a")]), &map(&[("1", "a")]), &labels).unwrap_err();
        assert!(matches!(e, CorpusError::IdMismatch { unmatched: 2, total: 2, .. }));
        assert!(e.to_string().contains("100.0%"));
    }

    /// Confusion-matrix recount.
    fn brute(golds: &[usize], preds: &[usize], classes: usize) -> (f64, f64) {
        let mut cm = vec![vec![0usize; classes]; classes];
        for (g, p) in golds.iter().zip(preds) {
            cm[*g][*p] += 1;
        }
        let acc = (0..classes).map(|c| cm[c][c]).sum::<usize>() as f64 / golds.len() as f64;
        let mut f1s = 0.0;
        for c in 0..classes {
            let tp = cm[c][c] as f64;
            let col: f64 = (0..classes).map(|g| cm[g][c] as f64).sum();
            let row: f64 = cm[c].iter().sum::<usize>() as f64;
            let p = if col > 0.0 { tp / col } else { 0.0 };
            let r = if row > 0.0 { tp / row } else { 0.0 };
            f1s += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        }
        (acc, f1s / classes as f64)
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            (classes, pairs) in (1usize..=7).prop_flat_map(|c| (Just(c), proptest::collection::vec((0..c, 0..c), 1..=50)))
        ) {
            let names: Vec<String> = (0..classes).map(|c| format!("l{c}")).collect();
            let labels = LabelSet::new(names.clone()).unwrap();
            let golds: BTreeMap<String, String> = pairs.iter().enumerate().map(|(i, (g, _))| (i.to_string(), names[*g].clone())).collect();
            let preds: BTreeMap<String, String> = pairs.iter().enumerate().map(|(i, (_, p))| (i.to_string(), names[*p].clone())).collect();
            let m = compute_metrics(&preds, &golds, &labels).unwrap();
            let (g, p): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let (acc, f1) = brute(&g, &p, classes);
            prop_assert!((m.accuracy - acc).abs() < 1e-9);
            prop_assert!((m.macro_f1 - f1).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&m.macro_f1));
            prop_assert_eq!(m.macro_f1 == 1.0, m.per_class.values().all(|c| c.f1 == 1.0));
        }
    }
}
