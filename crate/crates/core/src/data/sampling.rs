//! Pairwise training triples with negatives drawn uniformly from the items a
//! subject has not interacted with.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, STREAM_GI_TRIPLES, STREAM_UI_TRIPLES};
use crate::sparse::SparseBinary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubjectKind {
    User,
    Group,
}

impl SubjectKind {
    fn stream(self) -> u64 {
        match self {
            SubjectKind::User => STREAM_UI_TRIPLES,
            SubjectKind::Group => STREAM_GI_TRIPLES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingTriple {
    pub subject: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Per-epoch triple generator over one interaction matrix (R or S).
#[derive(Debug, Clone)]
pub struct TripleSampler<'a> {
    matrix: &'a SparseBinary,
    kind: SubjectKind,
    n_neg: usize,
    seed: u64,
}

impl<'a> TripleSampler<'a> {
    /// Fails if `n_neg == 0` or some subject with positives has no
    /// non-interacted item left.
    pub fn new(matrix: &'a SparseBinary, kind: SubjectKind, n_neg: usize, seed: u64) -> Result<Self> {
        if n_neg == 0 {
            return Err(Error::Parameter("n_neg must be at least 1".into()));
        }
        if let Some(s) = (0..matrix.rows()).find(|&s| matrix.row_len(s) == matrix.cols() && matrix.cols() > 0)
        {
            let name = match kind {
                SubjectKind::User => "user",
                SubjectKind::Group => "group",
            };
            return Err(Error::Sampling(format!(
                "{name} {s} interacted with every item; no negatives available"
            )));
        }
        Ok(Self {
            matrix,
            kind,
            n_neg,
            seed,
        })
    }

    pub fn num_positives(&self) -> usize {
        self.matrix.nnz()
    }

    /// Every positive `(subject, item)` exactly once, shuffled, each with
    /// `n_neg` negatives sampled with replacement.
    pub fn epoch(&self, epoch: usize) -> Vec<TrainingTriple> {
        let mut rng = stream_rng(self.seed, self.kind.stream(), epoch as u64);
        let mut positives: Vec<(usize, usize)> = self.matrix.pairs().collect();
        positives.shuffle(&mut rng);
        positives
            .into_iter()
            .map(|(subject, positive)| TrainingTriple {
                subject,
                positive,
                negatives: (0..self.n_neg)
                    .map(|_| self.draw_negative(subject, &mut rng))
                    .collect(),
            })
            .collect()
    }

    fn draw_negative(&self, subject: usize, rng: &mut ChaCha8Rng) -> usize {
        let row = self.matrix.row(subject);
        let free = self.matrix.cols() - row.len();
        // k-th non-interacted item, counting past the sorted positives
        let mut k = rng.gen_range(0..free);
        for &p in row {
            if p <= k {
                k += 1;
            } else {
                break;
            }
        }
        k
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negatives_avoid_positives() {
        let m = SparseBinary::from_pairs(1, 3, [(0, 0)]).unwrap();
        let s = TripleSampler::new(&m, SubjectKind::User, 2, 5).unwrap();
        for e in 0..50 {
            for t in s.epoch(e) {
                assert_eq!(t.negatives.len(), 2);
                assert!(t.negatives.iter().all(|&j| j == 1 || j == 2));
            }
        }
    }

    #[test]
    fn default_negative_count() {
        let m = SparseBinary::from_pairs(2, 30, [(0, 0), (1, 3), (1, 4)]).unwrap();
        let s = TripleSampler::new(&m, SubjectKind::Group, 10, 0).unwrap();
        let epoch = s.epoch(0);
        assert_eq!(epoch.len(), 3);
        assert!(epoch.iter().all(|t| t.negatives.len() == 10));
    }

    #[test]
    fn saturated_subject_is_error() {
        let m = SparseBinary::from_pairs(2, 2, [(0, 0), (1, 0), (1, 1)]).unwrap();
        let err = TripleSampler::new(&m, SubjectKind::User, 1, 0).unwrap_err();
        assert!(err.to_string().contains("user 1"), "{err}");
    }

    #[test]
    fn zero_negatives_rejected() {
        let m = SparseBinary::from_pairs(1, 3, [(0, 0)]).unwrap();
        assert!(TripleSampler::new(&m, SubjectKind::User, 0, 0).is_err());
    }

    #[test]
    fn epoch_covers_each_positive_once() {
        let m = SparseBinary::from_pairs(3, 6, [(0, 0), (0, 5), (1, 2), (2, 1), (2, 3)]).unwrap();
        let s = TripleSampler::new(&m, SubjectKind::User, 3, 11).unwrap();
        let mut seen: Vec<(usize, usize)> = s.epoch(4).iter().map(|t| (t.subject, t.positive)).collect();
        seen.sort_unstable();
        assert_eq!(seen, m.pairs().collect::<Vec<_>>());
        assert_eq!(s.epoch(4), s.epoch(4));
        assert_ne!(s.epoch(4), s.epoch(5));
    }

    #[test]
    fn negatives_are_uniform() {
        // items 1, 4, 6 are positives; 7 eligible items remain
        let m = SparseBinary::from_pairs(1, 10, [(0, 1), (0, 4), (0, 6)]).unwrap();
        let s = TripleSampler::new(&m, SubjectKind::User, 10_000, 99).unwrap();
        let triples = s.epoch(0);
        let mut counts = [0usize; 10];
        for t in &triples {
            for &j in &t.negatives {
                counts[j] += 1;
            }
        }
        let n = (triples.len() * 10_000) as f64;
        let p = 1.0 / 7.0;
        let sigma = (n * p * (1.0 - p)).sqrt();
        for (j, &c) in counts.iter().enumerate() {
            if [1, 4, 6].contains(&j) {
                assert_eq!(c, 0);
            } else {
                assert!((c as f64 - n * p).abs() < 5.0 * sigma, "item {j}: {c}");
            }
        }
    }
}
