//! Evaluation: confusion matrix, accuracy, macro-F1, and hypnogram
//! text export for external plotting.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    classes: usize,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Contract(format!("need ≥ 2 classes, got {classes}")));
        }
        Ok(ConfusionMatrix { counts: vec![0; classes * classes], classes })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Merge another matrix of the same shape into this one.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Contract(format!(
                "cannot merge {}-class into {}-class matrix",
                other.classes, self.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Tally predictions into the matrix.
pub fn accumulate(cm: &mut ConfusionMatrix, y_true: &[usize], y_pred: &[usize]) -> Result<()> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Contract(format!(
            "{} truths vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let c = cm.classes;
    for (i, (&t, &p)) in y_true.iter().zip(y_pred).enumerate() {
        if t >= c || p >= c {
            return Err(Error::Data(format!(
                "label pair ({t}, {p}) out of range [0, {c}) at position {i}"
            )));
        }
        cm.counts[t * c + p] += 1;
    }
    Ok(())
}

/// trace / total.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Contract("empty confusion matrix".into()));
    }
    let trace: u64 = (0..cm.classes).map(|i| cm.count(i, i)).sum();
    Ok(trace as f64 / total as f64)
}

/// Mean per-class F1 over all classes; classes with zero precision and
/// recall denominators contribute F1 = 0.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(Error::Contract("empty confusion matrix".into()));
    }
    let c = cm.classes;
    let mut f1_sum = 0.0;
    for k in 0..c {
        let tp = cm.count(k, k) as f64;
        let pred_k: f64 = (0..c).map(|i| cm.count(i, k)).sum::<u64>() as f64;
        let true_k: f64 = (0..c).map(|j| cm.count(k, j)).sum::<u64>() as f64;
        if pred_k == 0.0 || true_k == 0.0 {
            continue;
        }
        let precision = tp / pred_k;
        let recall = tp / true_k;
        if precision + recall > 0.0 {
            f1_sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(f1_sum / c as f64)
}

const HYPNOGRAM_HEADER: &str = "epoch_index\ttrue_stage\tpred_stage\tmismatch";

/// Tab-separated per-epoch comparison of true and predicted stages.
pub fn export_hypnogram(y_true: &[usize], y_pred: &[usize], path: &Path) -> Result<()> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Contract(format!(
            "{} truths vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{HYPNOGRAM_HEADER}")?;
    for (i, (&t, &p)) in y_true.iter().zip(y_pred).enumerate() {
        writeln!(file, "{i}\t{t}\t{p}\t{}", u8::from(t != p))?;
    }
    Ok(())
}

/// Parse a file written by [`export_hypnogram`] back into label pairs.
pub fn read_hypnogram(path: &Path) -> Result<(Vec<usize>, Vec<usize>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == HYPNOGRAM_HEADER => {}
        other => {
            return Err(Error::Parse {
                offset: 0,
                msg: format!("bad hypnogram header: {other:?}"),
            });
        }
    }
    let mut y_true = Vec::new();
    let mut y_pred = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                offset: 0,
                msg: format!("hypnogram row {i}: expected 4 fields, got {}", fields.len()),
            });
        }
        let parse = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Parse {
                offset: 0,
                msg: format!("hypnogram row {i}: bad integer {s:?}"),
            })
        };
        y_true.push(parse(fields[1])?);
        y_pred.push(parse(fields[2])?);
    }
    Ok((y_true, y_pred))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(classes: usize, pairs: &[(usize, usize)]) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new(classes).unwrap();
        let (t, p): (Vec<usize>, Vec<usize>) = pairs.iter().cloned().unzip();
        accumulate(&mut cm, &t, &p).unwrap();
        cm
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let cm = filled(3, &[(0, 0), (1, 1), (2, 2), (1, 1)]);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(cm.count(i, j), 0);
                }
            }
        }
        assert_eq!(accuracy(&cm).unwrap(), 1.0);
        assert_eq!(macro_f1(&cm).unwrap(), 1.0);
    }

    #[test]
    fn empty_accumulate_is_noop_and_empty_metrics_error() {
        let mut cm = ConfusionMatrix::new(3).unwrap();
        accumulate(&mut cm, &[], &[]).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(accuracy(&cm).is_err());
        assert!(macro_f1(&cm).is_err());
    }

    #[test]
    fn hand_tally_three_class() {
        let cm = filled(3, &[(0, 0), (0, 1), (1, 1), (2, 2)]);
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.count(0, 1), 1);
        assert_eq!(cm.count(1, 1), 1);
        assert_eq!(cm.count(2, 2), 1);
        assert_eq!(cm.total(), 4);
    }

    #[test]
    fn collapse_case_macro_f1_is_one_fifteenth() {
        // balanced 5-class truth, all predictions class 0
        let pairs: Vec<(usize, usize)> = (0..5).map(|t| (t, 0)).collect();
        let cm = filled(5, &pairs);
        assert!((accuracy(&cm).unwrap() - 0.2).abs() < 1e-15);
        let mf1 = macro_f1(&cm).unwrap();
        assert!((mf1 - 1.0 / 15.0).abs() < 1e-12, "MF1 {mf1}");
        assert!((mf1 - 0.06667).abs() < 1e-5);
    }

    #[test]
    fn random_matrix_matches_scalar_recomputation() {
        let mut state = 5u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as usize
        };
        let c = 4;
        let pairs: Vec<(usize, usize)> = (0..200).map(|_| (next() % c, next() % c)).collect();
        let cm = filled(c, &pairs);

        let mut counts = vec![vec![0u64; c]; c];
        for &(t, p) in &pairs {
            counts[t][p] += 1;
        }
        let trace: u64 = (0..c).map(|i| counts[i][i]).sum();
        let acc = trace as f64 / pairs.len() as f64;
        let mut f1s = 0.0;
        for k in 0..c {
            let tp = counts[k][k] as f64;
            let col: u64 = (0..c).map(|i| counts[i][k]).sum();
            let row: u64 = counts[k].iter().sum();
            if col == 0 || row == 0 {
                continue;
            }
            let p = tp / col as f64;
            let r = tp / row as f64;
            if p + r > 0.0 {
                f1s += 2.0 * p * r / (p + r);
            }
        }
        assert!((accuracy(&cm).unwrap() - acc).abs() < 1e-12);
        assert!((macro_f1(&cm).unwrap() - f1s / c as f64).abs() < 1e-12);
    }

    #[test]
    fn metrics_stay_in_unit_interval() {
        let cm = filled(3, &[(0, 1), (1, 2), (2, 0), (0, 0)]);
        let acc = accuracy(&cm).unwrap();
        let mf1 = macro_f1(&cm).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!((0.0..=1.0).contains(&mf1));
    }

    #[test]
    fn macro_f1_invariant_under_relabeling() {
        let pairs = [(0, 1), (1, 1), (2, 0), (2, 2), (0, 0), (1, 2), (2, 2)];
        let cm = filled(3, &pairs);
        // permutation 0→2, 1→0, 2→1 applied to both axes
        let perm = [2usize, 0, 1];
        let permuted: Vec<(usize, usize)> =
            pairs.iter().map(|&(t, p)| (perm[t], perm[p])).collect();
        let cm2 = filled(3, &permuted);
        assert!((macro_f1(&cm).unwrap() - macro_f1(&cm2).unwrap()).abs() < 1e-15);
        assert!((accuracy(&cm).unwrap() - accuracy(&cm2).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn absent_class_contributes_zero_f1() {
        // class 2 never appears in truth or predictions
        let cm = filled(3, &[(0, 0), (1, 1)]);
        assert!((macro_f1(&cm).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn accumulate_rejects_mismatch_and_range() {
        let mut cm = ConfusionMatrix::new(3).unwrap();
        assert!(accumulate(&mut cm, &[0, 1], &[0]).is_err());
        assert!(accumulate(&mut cm, &[3], &[0]).is_err());
        assert!(accumulate(&mut cm, &[0], &[3]).is_err());
    }

    #[test]
    fn merge_adds_counts() {
        let a = filled(3, &[(0, 0), (1, 2)]);
        let mut b = filled(3, &[(0, 0), (2, 2)]);
        b.merge(&a).unwrap();
        assert_eq!(b.count(0, 0), 2);
        assert_eq!(b.count(1, 2), 1);
        assert_eq!(b.total(), 4);
    }

    #[test]
    fn hypnogram_export_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hyp.tsv");
        let y_true = vec![0usize, 3, 2];
        let y_pred = vec![0usize, 1, 2];
        export_hypnogram(&y_true, &y_pred, &path).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "epoch_index\ttrue_stage\tpred_stage\tmismatch");
        assert_eq!(lines[2], "1\t3\t1\t1");
        for (i, line) in lines[1..].iter().enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            let mismatch = fields[1] != fields[2];
            assert_eq!(fields[0], i.to_string());
            assert_eq!(fields[3], if mismatch { "1" } else { "0" });
        }

        let (t, p) = read_hypnogram(&path).unwrap();
        assert_eq!(t, y_true);
        assert_eq!(p, y_pred);
    }
}
