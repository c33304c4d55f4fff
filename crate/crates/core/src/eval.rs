//! Full-ranking top-K metrics over held-out group-item interactions.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::warn;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Holdout, SplitDataset};
use crate::error::{Error, Result};
use crate::model::{ForwardState, Mode, ModelParams, Structure, Views};
use crate::sparse::SparseBinary;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecallDenominator {
    /// `min(|relevant|, K)`
    #[default]
    Min,
    /// `|relevant|`
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub recall_denominator: RecallDenominator,
    pub num_buckets: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ks: vec![20, 50],
            recall_denominator: RecallDenominator::Min,
            num_buckets: 4,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Parameter(format!("cutoffs must be nonempty and >= 1, got {:?}", self.ks)));
        }
        if self.num_buckets == 0 {
            return Err(Error::Parameter("num_buckets must be >= 1".into()));
        }
        Ok(())
    }

    fn max_k(&self) -> usize {
        self.ks.iter().copied().max().unwrap_or(0)
    }
}

/// Top of a group's ranking over candidate items.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedList {
    pub group: usize,
    /// Candidates by descending score, ties by ascending item id; truncated
    /// to the requested depth.
    pub items: Vec<usize>,
    /// Held-out positives, sorted.
    pub relevant: Vec<usize>,
}

impl RankedList {
    /// Ranks all items except the sorted `exclude` list and keeps the top
    /// `depth`.
    pub fn new(group: usize, scores: &[f64], exclude: &[usize], relevant: &[usize], depth: usize) -> Self {
        let mut cand: Vec<usize> = Vec::with_capacity(scores.len());
        let mut ex = exclude.iter().peekable();
        for i in 0..scores.len() {
            while ex.peek().is_some_and(|&&e| e < i) {
                ex.next();
            }
            if ex.peek() != Some(&&i) {
                cand.push(i);
            }
        }
        let order = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
        if depth < cand.len() {
            cand.select_nth_unstable_by(depth, order);
            cand.truncate(depth);
        }
        cand.sort_unstable_by(order);
        let mut relevant = relevant.to_vec();
        relevant.sort_unstable();
        relevant.dedup();
        Self {
            group,
            items: cand,
            relevant,
        }
    }

    fn hits(&self, k: usize) -> impl Iterator<Item = bool> + '_ {
        self.items
            .iter()
            .take(k)
            .map(|i| self.relevant.binary_search(i).is_ok())
    }
}

/// Fraction of relevant items in the top `k`; `None` without relevant items.
pub fn recall_at_k(list: &RankedList, k: usize, denominator: RecallDenominator) -> Option<f64> {
    if list.relevant.is_empty() || k == 0 {
        return None;
    }
    let hits = list.hits(k).filter(|&h| h).count();
    let denom = match denominator {
        RecallDenominator::Min => list.relevant.len().min(k),
        RecallDenominator::Full => list.relevant.len(),
    };
    Some(hits as f64 / denom as f64)
}

/// Binary-gain NDCG with a `1 / log2(rank + 1)` discount.
pub fn ndcg_at_k(list: &RankedList, k: usize) -> Option<f64> {
    if list.relevant.is_empty() || k == 0 {
        return None;
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = list
        .hits(k)
        .enumerate()
        .filter(|&(_, h)| h)
        .map(|(r, _)| discount(r + 1))
        .sum();
    let ideal: f64 = (1..=list.relevant.len().min(k)).map(discount).sum();
    Some(dcg / ideal)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub ndcg: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    /// Smallest and largest interaction count among the bucket's groups.
    pub interactions: (usize, usize),
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Groups that contributed (had at least one relevant item).
    pub groups: usize,
    pub metrics: BTreeMap<usize, MetricValues>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub buckets: Vec<BucketReport>,
}

impl MetricsReport {
    pub fn get(&self, k: usize) -> Option<MetricValues> {
        self.metrics.get(&k).copied()
    }

    /// Mean over groups of per-group metrics.
    pub fn from_lists(lists: &[RankedList], opts: &EvalOptions) -> Self {
        let scored: Vec<&RankedList> = lists
            .iter()
            .filter(|l| {
                let keep = !l.relevant.is_empty();
                if !keep {
                    warn!("eval: group {} has no relevant items, skipped", l.group);
                }
                keep
            })
            .collect();
        let n = scored.len();
        let metrics = opts
            .ks
            .iter()
            .map(|&k| {
                let (mut nd, mut rc) = (0.0, 0.0);
                for l in &scored {
                    nd += ndcg_at_k(l, k).expect("nonempty");
                    rc += recall_at_k(l, k, opts.recall_denominator).expect("nonempty");
                }
                let mean = |s: f64| if n == 0 { 0.0 } else { s / n as f64 };
                (
                    k,
                    MetricValues {
                        ndcg: mean(nd),
                        recall: mean(rc),
                    },
                )
            })
            .collect();
        Self {
            groups: n,
            metrics,
            buckets: Vec::new(),
        }
    }

    /// One-row table with `N@K` columns followed by `R@K` columns.
    pub fn table(&self, name: &str) -> String {
        let mut header = format!("{:<12}", "Metric");
        let mut row = format!("{name:<12}");
        for k in self.metrics.keys() {
            let _ = write!(header, " {:>8}", format!("N@{k}"));
        }
        for k in self.metrics.keys() {
            let _ = write!(header, " {:>8}", format!("R@{k}"));
        }
        for v in self.metrics.values() {
            let _ = write!(row, " {:>8.4}", v.ndcg);
        }
        for v in self.metrics.values() {
            let _ = write!(row, " {:>8.4}", v.recall);
        }
        let mut out = format!("{header}\n{row}\n");
        for (b, bucket) in self.buckets.iter().enumerate() {
            let (lo, hi) = bucket.interactions;
            let label = format!("q{} [{lo}-{hi}]", b + 1);
            let mut line = format!("{label:<12}");
            for v in bucket.report.metrics.values() {
                let _ = write!(line, " {:>8.4}", v.ndcg);
            }
            for v in bucket.report.metrics.values() {
                let _ = write!(line, " {:>8.4}", v.recall);
            }
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

/// Ranks items for every group in `targets` from precomputed group and item
/// representations. Runs across groups in parallel; output order follows
/// `targets`.
pub fn rank_groups(
    groups: &Array2<f64>,
    items: &Array2<f64>,
    targets: &[(usize, &[usize])],
    exclude: Option<&SparseBinary>,
    depth: usize,
) -> Vec<RankedList> {
    targets
        .par_iter()
        .map(|&(g, relevant)| {
            let scores = items.dot(&groups.row(g)).to_vec();
            let ex = exclude.map_or(&[][..], |m| m.row(g));
            RankedList::new(g, &scores, ex, relevant, depth)
        })
        .collect()
}

/// Buckets by interaction count: groups sharing a count always land in the
/// same bucket, so ties can yield fewer buckets than requested.
pub fn bucket_assignment(counts: &[usize], num_buckets: usize) -> Vec<Vec<usize>> {
    let n = counts.len();
    if n == 0 || num_buckets == 0 {
        return Vec::new();
    }
    let nb = num_buckets.min(n);
    if nb < num_buckets {
        warn!("eval: only {n} groups for {num_buckets} buckets, using {nb}");
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&k| (counts[k], k));
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); nb];
    let mut first_pos = 0;
    for pos in 0..n {
        if pos > 0 && counts[order[pos]] != counts[order[pos - 1]] {
            first_pos = pos;
        }
        buckets[first_pos * nb / n].push(order[pos]);
    }
    buckets.retain(|b| !b.is_empty());
    if buckets.len() < nb {
        warn!("eval: tied interaction counts collapsed {nb} buckets into {}", buckets.len());
    }
    buckets
}

/// Per-bucket reports. `counts[k]` is the interaction count of `lists[k]`'s
/// group.
pub fn sparsity_buckets(lists: &[RankedList], counts: &[usize], opts: &EvalOptions) -> Vec<BucketReport> {
    bucket_assignment(counts, opts.num_buckets)
        .into_iter()
        .map(|idx| {
            let sub: Vec<RankedList> = idx.iter().map(|&k| lists[k].clone()).collect();
            let lo = idx.iter().map(|&k| counts[k]).min().unwrap_or(0);
            let hi = idx.iter().map(|&k| counts[k]).max().unwrap_or(0);
            BucketReport {
                interactions: (lo, hi),
                report: MetricsReport::from_lists(&sub, opts),
            }
        })
        .collect()
}

/// Metrics of `state` on `holdout`, excluding each group's training positives.
pub fn evaluate_state(
    state: &ForwardState,
    item_embed: &Array2<f64>,
    train_group_item: &SparseBinary,
    holdout: &Holdout,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    opts.validate()?;
    let targets: Vec<(usize, &[usize])> = holdout.iter().collect();
    let lists = rank_groups(&state.groups, item_embed, &targets, Some(train_group_item), opts.max_k());
    Ok(MetricsReport::from_lists(&lists, opts))
}

/// Test-set metrics with sparsity buckets keyed by each group's
/// interaction count before the split.
pub fn evaluate(
    params: &ModelParams,
    split: &SplitDataset,
    mode: Mode,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    opts.validate()?;
    let s = Structure::from_dataset(&split.train)?;
    let state = ForwardState::compute(params, &s, Some(&Views::full(&s)), mode)?;
    let targets: Vec<(usize, &[usize])> = split.test.iter().collect();
    let lists = rank_groups(
        &state.groups,
        &params.item_embed,
        &targets,
        Some(split.train.group_item()),
        opts.max_k(),
    );
    let mut report = MetricsReport::from_lists(&lists, opts);
    let counts: Vec<usize> = split.test.groups.iter().map(|&g| split.full_interaction_count(g)).collect();
    report.buckets = sparsity_buckets(&lists, &counts, opts);
    Ok(report)
}

/// How well training group-item pairs are recovered: every item is a
/// candidate and the training positives are the relevant set.
pub fn training_fit(state: &ForwardState, item_embed: &Array2<f64>, train_group_item: &SparseBinary, opts: &EvalOptions) -> Result<MetricsReport> {
    opts.validate()?;
    let targets: Vec<(usize, &[usize])> = (0..train_group_item.rows())
        .filter(|&g| train_group_item.row_len(g) > 0)
        .map(|g| (g, train_group_item.row(g)))
        .collect();
    let lists = rank_groups(&state.groups, item_embed, &targets, None, opts.max_k());
    Ok(MetricsReport::from_lists(&lists, opts))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn list(scores: &[f64], relevant: &[usize]) -> RankedList {
        RankedList::new(0, scores, &[], relevant, scores.len())
    }

    #[test]
    fn ranking_excludes_and_breaks_ties_by_id() {
        let l = RankedList::new(3, &[0.5, 0.9, 0.5, 0.9, 0.1], &[3], &[0], 10);
        assert_eq!(l.items, vec![1, 0, 2, 4]);
        let top = RankedList::new(3, &[0.5, 0.9, 0.5, 0.9, 0.1], &[], &[0], 2);
        assert_eq!(top.items, vec![1, 3]);
    }

    #[test]
    fn recall_examples() {
        let l = list(&[0.9, 0.1, 0.2], &[0]);
        assert_eq!(recall_at_k(&l, 20, RecallDenominator::Min), Some(1.0));
        // relevant {a, b}; only b in the top 2
        let l = list(&[0.1, 0.9, 0.8, 0.0], &[0, 1]);
        assert_eq!(recall_at_k(&l, 2, RecallDenominator::Min), Some(0.5));
        // three relevant, both slots relevant
        let l = list(&[0.9, 0.8, 0.7, 0.0], &[0, 1, 2]);
        assert_eq!(recall_at_k(&l, 2, RecallDenominator::Min), Some(1.0));
        assert_eq!(recall_at_k(&l, 2, RecallDenominator::Full), Some(2.0 / 3.0));
        assert_eq!(recall_at_k(&list(&[0.3], &[]), 1, RecallDenominator::Min), None);
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&list(&[0.9, 0.1], &[0]), 1), Some(1.0));
        let v = ndcg_at_k(&list(&[0.1, 0.9], &[0]), 2).unwrap();
        assert!((v - 0.630_929_753_571_457_4).abs() < 1e-12);
        assert_eq!(ndcg_at_k(&list(&[0.1, 0.9, 0.8], &[0]), 2), Some(0.0));
    }

    #[test]
    fn report_means_and_table() {
        let lists = vec![list(&[0.9, 0.1], &[0]), list(&[0.1, 0.9], &[0]), list(&[0.5, 0.4], &[])];
        let opts = EvalOptions { ks: vec![1, 2], ..EvalOptions::default() };
        let r = MetricsReport::from_lists(&lists, &opts);
        assert_eq!(r.groups, 2);
        assert_eq!(r.get(1).unwrap().recall, 0.5);
        assert_eq!(r.get(2).unwrap().recall, 1.0);
        let t = r.table("toy");
        assert!(t.starts_with("Metric"));
        assert!(t.contains("N@1") && t.contains("R@2"));
        let json = serde_json::to_string(&r).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn buckets_quartile_and_ties() {
        let b = bucket_assignment(&[5, 1, 7, 3, 2, 8, 4, 6], 4);
        assert_eq!(b.len(), 4);
        assert!(b.iter().all(|x| x.len() == 2));
        assert_eq!(b[0], vec![1, 4]);
        assert_eq!(bucket_assignment(&[3; 6], 4).len(), 1);
        assert_eq!(bucket_assignment(&[1, 2], 4).len(), 2);
    }

    #[test]
    fn perfect_scores_give_one() {
        let scores = [0.0, 1.0, 0.0, 1.0, 0.0];
        let l = list(&scores, &[1, 3]);
        for k in [1, 2, 5] {
            assert_eq!(ndcg_at_k(&l, k), Some(1.0));
            assert_eq!(recall_at_k(&l, k, RecallDenominator::Min), Some(1.0));
        }
    }
}
