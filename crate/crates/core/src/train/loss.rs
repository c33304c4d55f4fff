use std::sync::Arc;

use ndarray::{Array2, ArrayView1};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{log_sigmoid, sigmoid, Tape, Var};
use crate::data::TrainingTriple;
use crate::error::{Error, Result};

/// Loss terms of one step or one epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ui: f64,
    pub l_gi: f64,
    pub l_uu: f64,
    pub total: f64,
    pub beta: f64,
}

impl LossBreakdown {
    /// `|total - (beta * l_uu + l_ui + l_gi)|`
    pub fn decomposition_error(&self) -> f64 {
        (self.total - (self.beta * self.l_uu + self.l_ui + self.l_gi)).abs()
    }

    pub fn is_finite(&self) -> bool {
        [self.l_ui, self.l_gi, self.l_uu, self.total].iter().all(|x| x.is_finite())
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.l_ui += other.l_ui;
        self.l_gi += other.l_gi;
        self.l_uu += other.l_uu;
        self.total += other.total;
        self.beta = other.beta;
    }
}

/// `(pos - neg - 1)^2`
pub fn pairwise_term(pos: f64, neg: f64) -> f64 {
    let d = pos - neg - 1.0;
    d * d
}

/// Sum of squared margin deficits over `(positive, negative)` score pairs.
pub fn pairwise_loss(pairs: &[(f64, f64)]) -> f64 {
    pairs.iter().map(|&(p, n)| pairwise_term(p, n)).sum()
}

/// `σ(a · W · bᵀ)`
pub fn discriminator(a: ArrayView1<f64>, b: ArrayView1<f64>, w: &Array2<f64>) -> f64 {
    sigmoid(a.dot(&w.dot(&b)))
}

/// Contrastive cross-entropy. For each position `k`, `batch[k]` is the
/// anchor user and `negatives[k]` the users whose first-view representation
/// is paired with the anchor's second view as a mismatch.
pub fn contrastive_loss(
    first: &Array2<f64>,
    second: &Array2<f64>,
    w: &Array2<f64>,
    batch: &[usize],
    negatives: &[Vec<usize>],
) -> f64 {
    let mut loss = 0.0;
    for (&i, negs) in batch.iter().zip(negatives) {
        let wb = w.dot(&second.row(i));
        loss -= log_sigmoid(first.row(i).dot(&wb));
        for &j in negs {
            loss -= log_sigmoid(-first.row(j).dot(&wb));
        }
    }
    loss
}

/// For every anchor in `batch`, `n_neg` distinct other members of the batch.
pub fn sample_contrast_negatives(batch: &[usize], n_neg: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if n_neg == 0 {
        return Err(Error::Parameter("n_neg must be at least 1".into()));
    }
    if batch.len() <= n_neg {
        return Err(Error::Sampling(format!(
            "contrastive batch of {} users cannot supply {n_neg} distinct negatives",
            batch.len()
        )));
    }
    Ok((0..batch.len())
        .map(|k| {
            sample(rng, batch.len() - 1, n_neg)
                .into_iter()
                .map(|j| batch[if j >= k { j + 1 } else { j }])
                .collect()
        })
        .collect())
}

/// Records the pairwise loss over triples, one term per negative.
pub fn tape_pairwise(tape: &mut Tape, subjects: Var, items: Var, triples: &[TrainingTriple]) -> Result<Option<Var>> {
    let n: usize = triples.iter().map(|t| t.negatives.len()).sum();
    if n == 0 {
        return Ok(None);
    }
    let mut subj = Vec::with_capacity(n);
    let mut pos = Vec::with_capacity(n);
    let mut neg = Vec::with_capacity(n);
    for t in triples {
        for &j in &t.negatives {
            subj.push(t.subject);
            pos.push(t.positive);
            neg.push(j);
        }
    }
    let s = tape.gather_rows(subjects, Arc::from(subj))?;
    let qi = tape.gather_rows(items, Arc::from(pos))?;
    let qj = tape.gather_rows(items, Arc::from(neg))?;
    let xi = tape.row_dot(s, qi)?;
    let xj = tape.row_dot(s, qj)?;
    let ri = tape.sigmoid(xi);
    let rj = tape.sigmoid(xj);
    let margin = tape.sub(ri, rj)?;
    let deficit = tape.add_scalar(margin, -1.0);
    let sq = tape.square(deficit);
    Ok(Some(tape.sum(sq)))
}

/// Records [`contrastive_loss`].
pub fn tape_contrastive(
    tape: &mut Tape,
    first: Var,
    second: Var,
    w: Var,
    batch: &[usize],
    negatives: &[Vec<usize>],
) -> Result<Var> {
    let anchors: Arc<[usize]> = batch.into();
    let a = tape.gather_rows(first, anchors.clone())?;
    let b = tape.gather_rows(second, anchors)?;
    let aw = tape.matmul(a, w)?;
    let pos = tape.row_dot(aw, b)?;
    let pos = tape.log_sigmoid(pos);
    let pos = tape.sum(pos);

    let mut neg_rows = Vec::new();
    let mut anchor_rows = Vec::new();
    for (k, negs) in negatives.iter().enumerate() {
        for &j in negs {
            neg_rows.push(j);
            anchor_rows.push(k);
        }
    }
    let total = if neg_rows.is_empty() {
        pos
    } else {
        let fj = tape.gather_rows(first, Arc::from(neg_rows))?;
        let fjw = tape.matmul(fj, w)?;
        let bi = tape.gather_rows(b, Arc::from(anchor_rows))?;
        let x = tape.row_dot(fjw, bi)?;
        let x = tape.scale(x, -1.0);
        let x = tape.log_sigmoid(x);
        let neg = tape.sum(x);
        tape.add(pos, neg)?
    };
    Ok(tape.scale(total, -1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pairwise_examples() {
        assert!(pairwise_term(1.0 - 1e-12, 1e-12) < 1e-20);
        assert_eq!(pairwise_term(0.5, 0.5), 1.0);
        assert!((pairwise_term(0.9, 0.2) - 0.09).abs() < 1e-15);
        assert!((pairwise_loss(&[(0.9, 0.2), (0.5, 0.0)]) - 0.34).abs() < 1e-15);
    }

    #[test]
    fn discriminator_examples() {
        let e0 = Array1::from(vec![1.0, 0.0]);
        let e1 = Array1::from(vec![0.0, 1.0]);
        let id = Array2::eye(2);
        assert!((discriminator(e0.view(), e0.view(), &id) - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert_eq!(discriminator(e0.view(), e1.view(), &Array2::zeros((2, 2))), 0.5);
        assert_eq!(discriminator(e0.view(), e1.view(), &id), 0.5);
    }

    #[test]
    fn contrastive_closed_forms() {
        let p = array![[0.3, -1.0], [2.0, 0.5], [0.1, 0.1]];
        let q = array![[1.0, 0.2], [-0.4, 0.5], [0.9, -0.9]];
        let negs = vec![vec![1, 2], vec![0, 2], vec![0, 1]];
        let l = contrastive_loss(&p, &q, &Array2::zeros((2, 2)), &[0, 1, 2], &negs);
        assert!((l - 3.0 * 3.0 * std::f64::consts::LN_2).abs() < 1e-12);

        // one anchor with σ(pos) = σ(1) and a negative scoring 0.5
        let first = array![[1.0, 0.0], [0.0, 1.0]];
        let second = array![[1.0, 0.0], [0.0, 0.0]];
        let l = contrastive_loss(&first, &second, &Array2::eye(2), &[0], &[vec![1]]);
        let expected = -(0.731_058_578_630_004_9f64).ln() - 0.5f64.ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 1.00641).abs() < 1e-5);
    }

    #[test]
    fn contrast_negatives_are_distinct_others() {
        let batch = [4, 9, 2, 7, 5];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let negs = sample_contrast_negatives(&batch, 3, &mut rng).unwrap();
            for (k, n) in negs.iter().enumerate() {
                assert_eq!(n.len(), 3);
                assert!(!n.contains(&batch[k]));
                let mut s = n.clone();
                s.sort_unstable();
                s.dedup();
                assert_eq!(s.len(), 3);
            }
        }
        assert!(matches!(
            sample_contrast_negatives(&batch, 5, &mut rng),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn tape_losses_match_plain() {
        let p = array![[0.3, -1.0], [2.0, 0.5], [0.1, 0.1]];
        let q = array![[1.0, 0.2], [-0.4, 0.5], [0.9, -0.9], [0.0, 0.3]];
        let w = array![[0.5, -0.2], [0.1, 0.9]];
        let triples = vec![
            TrainingTriple { subject: 0, positive: 1, negatives: vec![2, 3] },
            TrainingTriple { subject: 2, positive: 0, negatives: vec![1] },
        ];
        let mut tape = Tape::new();
        let pv = tape.leaf(p.clone(), "p");
        let qv = tape.leaf(q.clone(), "q");
        let wv = tape.leaf(w.clone(), "w");
        let l = tape_pairwise(&mut tape, pv, qv, &triples).unwrap().unwrap();
        let score = |u: usize, i: usize| sigmoid(p.row(u).dot(&q.row(i)));
        let plain = pairwise_loss(&[
            (score(0, 1), score(0, 2)),
            (score(0, 1), score(0, 3)),
            (score(2, 0), score(2, 1)),
        ]);
        assert!((tape.scalar(l) - plain).abs() < 1e-12);

        let negs = vec![vec![1], vec![2], vec![0]];
        let c = tape_contrastive(&mut tape, pv, qv, wv, &[0, 1, 2], &negs);
        // q has 4 rows, p has 3: gathering anchors from both works
        let c = c.unwrap();
        let plain = contrastive_loss(&p, &q, &w, &[0, 1, 2], &negs);
        assert!((tape.scalar(c) - plain).abs() < 1e-12);
        assert!(tape_pairwise(&mut tape, pv, qv, &[]).unwrap().is_none());
    }
}
