//! Label-corruption kernels: symmetric and clinically-structured
//! asymmetric noise, applied once at dataset-load time.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of flip mass routed to the plausible-confusion set; the
/// remainder spreads over the other incorrect classes.
pub const ADJACENCY_MASS: f64 = 0.9;

/// Row-stochastic label-corruption kernel. Row i gives the distribution
/// of the noisy label conditioned on clean label i.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransitionMatrix {
    t: Vec<f64>,
    classes: usize,
    pub eta: f64,
}

impl TransitionMatrix {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.t[i * self.classes..(i + 1) * self.classes]
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.t[i * self.classes + j]
    }

    fn validate_eta(eta: f64) -> Result<()> {
        if !(0.0..1.0).contains(&eta) {
            return Err(Error::Contract(format!("flip probability {eta} outside [0, 1)")));
        }
        Ok(())
    }
}

/// Uniform corruption: diagonal 1−η, every off-diagonal η/(C−1).
pub fn symmetric_matrix(classes: usize, eta: f64) -> Result<TransitionMatrix> {
    if classes < 2 {
        return Err(Error::Contract(format!("need ≥ 2 classes, got {classes}")));
    }
    TransitionMatrix::validate_eta(eta)?;
    let off = eta / (classes - 1) as f64;
    let mut t = vec![off; classes * classes];
    for i in 0..classes {
        t[i * classes + i] = 1.0 - eta;
    }
    Ok(TransitionMatrix { t, classes, eta })
}

/// Default plausible-confusion sets for the 5 sleep stages
/// (W, N1, N2, N3, REM): W↔N1, N1↔{W,N2}, N2↔{N1,N3}, N3↔N2, REM↔N1.
pub fn default_sleep_adjacency() -> Vec<Vec<usize>> {
    vec![vec![1], vec![0, 2], vec![1, 3], vec![2], vec![1]]
}

/// Class-dependent corruption: conditional on a flip, `ADJACENCY_MASS`
/// of the mass splits uniformly over the class's plausible-confusion
/// set and the rest over the remaining incorrect classes. If the
/// adjacency set covers every incorrect class it takes all flip mass.
pub fn asymmetric_matrix(
    classes: usize,
    eta: f64,
    adjacency: &[Vec<usize>],
) -> Result<TransitionMatrix> {
    if classes < 2 {
        return Err(Error::Contract(format!("need ≥ 2 classes, got {classes}")));
    }
    TransitionMatrix::validate_eta(eta)?;
    if adjacency.len() != classes {
        return Err(Error::Contract(format!(
            "adjacency has {} entries for {classes} classes",
            adjacency.len()
        )));
    }
    for (i, adj) in adjacency.iter().enumerate() {
        if adj.is_empty() {
            return Err(Error::Contract(format!("class {i} has an empty adjacency set")));
        }
        if adj.contains(&i) {
            return Err(Error::Contract(format!("class {i} lists itself as a confusion")));
        }
        if let Some(&bad) = adj.iter().find(|&&j| j >= classes) {
            return Err(Error::Contract(format!("class {i} adjacency references class {bad}")));
        }
    }
    let mut t = vec![0.0; classes * classes];
    for (i, adj) in adjacency.iter().enumerate() {
        t[i * classes + i] = 1.0 - eta;
        let others = classes - 1 - adj.len();
        let adj_mass = if others == 0 { 1.0 } else { ADJACENCY_MASS };
        for &j in adj {
            t[i * classes + j] = eta * adj_mass / adj.len() as f64;
        }
        if others > 0 {
            let rest = eta * (1.0 - ADJACENCY_MASS) / others as f64;
            for j in 0..classes {
                if j != i && !adj.contains(&j) {
                    t[i * classes + j] = rest;
                }
            }
        }
    }
    Ok(TransitionMatrix { t, classes, eta })
}

/// Per-class flip counts from one injection pass.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseReport {
    pub per_class_flip_count: Vec<usize>,
    pub total: usize,
    pub empirical_eta: f64,
}

/// Resample each label independently from its transition-matrix row.
/// Deterministic given the seed; the input buffer is left untouched.
pub fn inject(labels: &[usize], t: &TransitionMatrix, rng_seed: u64) -> Result<(Vec<usize>, NoiseReport)> {
    let classes = t.classes;
    if let Some(pos) = labels.iter().position(|&y| y >= classes) {
        return Err(Error::Data(format!(
            "label {} out of range [0, {classes}) at position {pos}",
            labels[pos]
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut noisy = Vec::with_capacity(labels.len());
    let mut flips = vec![0usize; classes];
    let mut total_flips = 0usize;
    for &y in labels {
        let row = t.row(y);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut drawn = classes - 1;
        for (j, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                drawn = j;
                break;
            }
        }
        if drawn != y {
            flips[y] += 1;
            total_flips += 1;
        }
        noisy.push(drawn);
    }
    let report = NoiseReport {
        per_class_flip_count: flips,
        total: total_flips,
        empirical_eta: if labels.is_empty() { 0.0 } else { total_flips as f64 / labels.len() as f64 },
    };
    Ok((noisy, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_row_stochastic(t: &TransitionMatrix) {
        for i in 0..t.classes() {
            let s: f64 = t.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {i} sums to {s}");
            assert!(t.row(i).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn symmetric_zero_noise_is_identity() {
        let t = symmetric_matrix(5, 0.0).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(t.entry(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn symmetric_point_two_splits_uniformly() {
        let t = symmetric_matrix(5, 0.2).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let expect = if i == j { 0.8 } else { 0.05 };
                assert!((t.entry(i, j) - expect).abs() < 1e-15);
            }
        }
        assert_row_stochastic(&t);
    }

    #[test]
    fn symmetric_binary_case() {
        let t = symmetric_matrix(2, 0.6).unwrap();
        assert!((t.entry(0, 0) - 0.4).abs() < 1e-15);
        assert!((t.entry(0, 1) - 0.6).abs() < 1e-15);
        assert!((t.entry(1, 0) - 0.6).abs() < 1e-15);
        assert!((t.entry(1, 1) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn symmetric_rejects_bad_eta() {
        assert!(symmetric_matrix(5, 1.0).is_err());
        assert!(symmetric_matrix(5, -0.1).is_err());
        assert!(symmetric_matrix(1, 0.2).is_err());
    }

    #[test]
    fn asymmetric_zero_noise_is_identity() {
        let t = asymmetric_matrix(5, 0.0, &default_sleep_adjacency()).unwrap();
        for i in 0..5 {
            assert_eq!(t.entry(i, i), 1.0);
            assert_eq!(t.row(i).iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn asymmetric_n2_row_matches_split_rule() {
        // class 2 (N2) with adjacency {1, 3} at η = 0.6
        let t = asymmetric_matrix(5, 0.6, &default_sleep_adjacency()).unwrap();
        assert!((t.entry(2, 2) - 0.4).abs() < 1e-12);
        assert!((t.entry(2, 1) - 0.27).abs() < 1e-12);
        assert!((t.entry(2, 3) - 0.27).abs() < 1e-12);
        assert!((t.entry(2, 0) - 0.03).abs() < 1e-12);
        assert!((t.entry(2, 4) - 0.03).abs() < 1e-12);
    }

    #[test]
    fn asymmetric_rows_are_stochastic() {
        for eta in [0.2, 0.4, 0.6] {
            let t = asymmetric_matrix(5, eta, &default_sleep_adjacency()).unwrap();
            assert_row_stochastic(&t);
        }
    }

    #[test]
    fn asymmetric_adjacency_gets_strictly_more_mass() {
        let adj = default_sleep_adjacency();
        let t = asymmetric_matrix(5, 0.4, &adj).unwrap();
        for (i, a) in adj.iter().enumerate() {
            let min_adj = a.iter().map(|&j| t.entry(i, j)).fold(f64::INFINITY, f64::min);
            for j in 0..5 {
                if j != i && !a.contains(&j) {
                    assert!(min_adj > t.entry(i, j));
                }
            }
        }
    }

    #[test]
    fn asymmetric_full_adjacency_takes_all_flip_mass() {
        let adj = vec![vec![1, 2], vec![0, 2], vec![0, 1]];
        let t = asymmetric_matrix(3, 0.3, &adj).unwrap();
        assert!((t.entry(0, 1) - 0.15).abs() < 1e-12);
        assert!((t.entry(0, 2) - 0.15).abs() < 1e-12);
    }

    #[test]
    fn asymmetric_rejects_self_and_out_of_range() {
        assert!(asymmetric_matrix(3, 0.2, &[vec![0], vec![0], vec![1]]).is_err());
        assert!(asymmetric_matrix(3, 0.2, &[vec![3], vec![0], vec![1]]).is_err());
        assert!(asymmetric_matrix(3, 0.2, &[vec![], vec![0], vec![1]]).is_err());
    }

    #[test]
    fn inject_identity_kernel_is_noop() {
        let t = symmetric_matrix(5, 0.0).unwrap();
        let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let (noisy, report) = inject(&labels, &t, 17).unwrap();
        assert_eq!(noisy, labels);
        assert_eq!(report.empirical_eta, 0.0);
        assert_eq!(report.total, 0);
    }

    #[test]
    fn inject_is_deterministic_per_seed() {
        let t = symmetric_matrix(5, 0.4).unwrap();
        let labels: Vec<usize> = (0..1000).map(|i| (i * 7) % 5).collect();
        let (a, _) = inject(&labels, &t, 99).unwrap();
        let (b, _) = inject(&labels, &t, 99).unwrap();
        let (c, _) = inject(&labels, &t, 100).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), labels.len());
    }

    #[test]
    fn inject_empirical_rate_concentrates() {
        let t = symmetric_matrix(5, 0.2).unwrap();
        let labels: Vec<usize> = (0..100_000).map(|i| i % 5).collect();
        let (_, report) = inject(&labels, &t, 0).unwrap();
        assert!(
            (0.19..=0.21).contains(&report.empirical_eta),
            "empirical eta {}",
            report.empirical_eta
        );
    }

    #[test]
    fn inject_rejects_out_of_range_label() {
        let t = symmetric_matrix(3, 0.1).unwrap();
        let err = inject(&[0, 1, 3], &t, 0).unwrap_err();
        assert!(err.to_string().contains("position 2"));
    }
}
