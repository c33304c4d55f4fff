//! Node-dropout views of the user-level hypergraph.
//!
//! Coarse dropout removes a user from every group at once; fine dropout removes
//! individual (user, group) memberships independently. Emptied hyperedges are
//! kept, so the propagation operator just sees a zero-degree column.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergraph::IncidenceMatrix;
use crate::rng::{stream_rng, STREAM_COARSE, STREAM_FINE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropKind {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub kind: DropKind,
    pub rate: f64,
    pub seed: u64,
    /// Coarse: one flag per vertex. Fine: one flag per incidence of the
    /// source matrix, in its sorted entry order.
    pub keep: Vec<bool>,
}

impl DropoutMask {
    pub fn dropped(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!(
            "drop rate must lie in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

/// Zeroes each vertex row with probability `rate`.
pub fn coarse_drop(h: &IncidenceMatrix, rate: f64, seed: u64) -> Result<(IncidenceMatrix, DropoutMask)> {
    check_rate(rate)?;
    let mut rng = stream_rng(seed, STREAM_COARSE, 0);
    let keep: Vec<bool> = (0..h.num_vertices())
        .map(|_| rng.gen::<f64>() >= rate)
        .collect();
    let view = IncidenceMatrix::from_pairs_allow_empty(
        h.num_vertices(),
        h.num_edges(),
        h.entries().filter(|&(v, _)| keep[v]),
    )?;
    Ok((
        view,
        DropoutMask {
            kind: DropKind::Coarse,
            rate,
            seed,
            keep,
        },
    ))
}

/// Zeroes each incidence with probability `rate`, independently per hyperedge.
pub fn fine_drop(h: &IncidenceMatrix, rate: f64, seed: u64) -> Result<(IncidenceMatrix, DropoutMask)> {
    check_rate(rate)?;
    let mut rng = stream_rng(seed, STREAM_FINE, 0);
    let keep: Vec<bool> = (0..h.nnz()).map(|_| rng.gen::<f64>() >= rate).collect();
    let view = IncidenceMatrix::from_pairs_allow_empty(
        h.num_vertices(),
        h.num_edges(),
        h.entries().zip(&keep).filter(|(_, &k)| k).map(|(p, _)| p),
    )?;
    Ok((
        view,
        DropoutMask {
            kind: DropKind::Fine,
            rate,
            seed,
            keep,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypergraph::{build_user_level, degrees, propagation_operator};

    fn h() -> IncidenceMatrix {
        build_user_level(
            &[vec![0, 1, 2], vec![1, 3], vec![2, 3, 4], vec![0, 3, 5], vec![5]],
            6,
        )
        .unwrap()
    }

    #[test]
    fn zero_rate_is_identity() {
        assert_eq!(coarse_drop(&h(), 0.0, 1).unwrap().0, h());
        assert_eq!(fine_drop(&h(), 0.0, 1).unwrap().0, h());
    }

    #[test]
    fn rate_one_rejected() {
        assert!(coarse_drop(&h(), 1.0, 1).is_err());
        assert!(fine_drop(&h(), 1.5, 1).is_err());
        assert!(fine_drop(&h(), -0.1, 1).is_err());
    }

    #[test]
    fn coarse_removes_vertex_everywhere() {
        let base = h();
        for seed in 0..100 {
            let (view, mask) = coarse_drop(&base, 0.4, seed).unwrap();
            for v in 0..base.num_vertices() {
                if mask.keep[v] {
                    assert_eq!(view.edges_of(v), base.edges_of(v));
                } else {
                    assert!(view.edges_of(v).is_empty());
                }
            }
        }
    }

    #[test]
    fn fine_drop_is_local() {
        let base = h();
        for seed in 0..100 {
            let (view, mask) = fine_drop(&base, 0.5, seed).unwrap();
            for ((v, e), &k) in base.entries().zip(&mask.keep) {
                assert_eq!(view.contains(v, e), k);
            }
        }
    }

    #[test]
    fn emptied_hyperedge_is_kept() {
        let base = h();
        // find a seed where vertex 5 (sole member of group 4) is dropped
        let (view, _) = (0..)
            .map(|s| coarse_drop(&base, 0.5, s).unwrap())
            .find(|(_, m)| !m.keep[5])
            .unwrap();
        assert_eq!(view.num_edges(), base.num_edges());
        assert_eq!(degrees(&view).edge[4], 0);
        let a = propagation_operator(&view);
        assert!(a.matrix().triplets().all(|(_, _, w)| w.is_finite()));
    }

    #[test]
    fn deterministic() {
        assert_eq!(fine_drop(&h(), 0.3, 9).unwrap(), fine_drop(&h(), 0.3, 9).unwrap());
        assert_eq!(coarse_drop(&h(), 0.3, 9).unwrap(), coarse_drop(&h(), 0.3, 9).unwrap());
    }

    #[test]
    fn empirical_rates_near_configured() {
        let base = build_user_level(&(0..50).map(|g| vec![g, g + 1, g + 2]).collect::<Vec<_>>(), 52).unwrap();
        let (mut dropped_v, mut total_v, mut dropped_e, mut total_e) = (0usize, 0usize, 0usize, 0usize);
        for seed in 0..200 {
            let (_, m) = coarse_drop(&base, 0.2, seed).unwrap();
            dropped_v += m.dropped();
            total_v += m.keep.len();
            let (_, m) = fine_drop(&base, 0.3, seed).unwrap();
            dropped_e += m.dropped();
            total_e += m.keep.len();
        }
        let check = |d: usize, n: usize, p: f64| {
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!((d as f64 / n as f64 - p).abs() < 3.0 * sigma, "{d}/{n} vs {p}");
        };
        check(dropped_v, total_v, 0.2);
        check(dropped_e, total_e, 0.3);
    }
}
