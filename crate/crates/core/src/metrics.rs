//! Target rank and the ranking metrics NDCG@k, HR@k and RR/MRR@k.
//!
//! The rank counts every item scoring at least as high as the target, the
//! target included, so ties resolve pessimistically.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{SequenceDataset, UserSplit};
use crate::error::{Error, Result};
use crate::scorer::{pool_history, score_all, ScorerParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankResult {
    pub rank: usize,
    /// Items other than the target with exactly the target's score.
    pub tied_count: usize,
}

pub fn rank_of_target(scores: &[f64], target_index: usize) -> Result<RankResult> {
    let Some(&sp) = scores.get(target_index) else {
        return Err(Error::IndexOutOfRange { index: target_index, size: scores.len() });
    };
    if !sp.is_finite() || scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    Ok(rank_unchecked(scores, sp))
}

fn rank_unchecked(scores: &[f64], sp: f64) -> RankResult {
    let (mut rank, mut tied) = (0, 0);
    for &s in scores {
        if s >= sp {
            rank += 1;
            if s == sp {
                tied += 1;
            }
        }
    }
    RankResult { rank, tied_count: tied - 1 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "NDCG")]
    Ndcg,
    #[serde(rename = "RR")]
    Rr,
    #[serde(rename = "HR")]
    Hr,
}

impl MetricKind {
    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Ndcg => "NDCG",
            MetricKind::Rr => "RR",
            MetricKind::Hr => "HR",
        }
    }
}

/// NDCG `1/log2(1+r)`, RR `1/r`, HR `1`; zero when a cutoff is given and `r > k`.
pub fn metric_value(kind: MetricKind, r_plus: usize, cutoff: Option<usize>) -> f64 {
    assert!(r_plus >= 1, "rank must be at least 1");
    if cutoff.is_some_and(|k| r_plus > k) {
        return 0.0;
    }
    match kind {
        MetricKind::Ndcg => 1.0 / ((1 + r_plus) as f64).log2(),
        MetricKind::Rr => 1.0 / r_plus as f64,
        MetricKind::Hr => 1.0,
    }
}

/// `-ln metric(r)` without a cutoff. Zero for HR.
pub fn neg_log_metric(kind: MetricKind, r_plus: usize) -> f64 {
    -metric_value(kind, r_plus, None).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CutoffMetrics {
    pub ndcg: f64,
    pub hr: f64,
    pub mrr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub per_cutoff: BTreeMap<usize, CutoffMetrics>,
    pub user_count: usize,
}

/// One line of the report JSON.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub k: usize,
    pub ndcg: f64,
    pub hr: f64,
    pub mrr: f64,
    pub users: usize,
}

impl MetricReport {
    /// Averages per-user ranks in the given order.
    pub fn from_ranks(ranks: &[usize], cutoffs: &[usize]) -> Self {
        let n = ranks.len();
        let mut per_cutoff = BTreeMap::new();
        for &k in cutoffs {
            let mut m = CutoffMetrics::default();
            for &r in ranks {
                m.ndcg += metric_value(MetricKind::Ndcg, r, Some(k));
                m.hr += metric_value(MetricKind::Hr, r, Some(k));
                m.mrr += metric_value(MetricKind::Rr, r, Some(k));
            }
            if n > 0 {
                m.ndcg /= n as f64;
                m.hr /= n as f64;
                m.mrr /= n as f64;
            }
            per_cutoff.insert(k, m);
        }
        Self { per_cutoff, user_count: n }
    }

    pub fn at(&self, k: usize) -> Option<&CutoffMetrics> {
        self.per_cutoff.get(&k)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.at(k).map_or(0.0, |m| m.ndcg)
    }

    pub fn records(&self) -> Vec<MetricRecord> {
        self.per_cutoff
            .iter()
            .map(|(&k, m)| MetricRecord { k, ndcg: m.ndcg, hr: m.hr, mrr: m.mrr, users: self.user_count })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.records())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Validation,
    Test,
}

/// History and target of one user for the given split. The test history
/// is the training prefix followed by the validation item.
pub fn split_example(split: &UserSplit<'_>, which: Split) -> (Vec<usize>, usize) {
    match which {
        Split::Validation => (split.train.to_vec(), split.val_target),
        Split::Test => {
            let mut h = split.train.to_vec();
            h.push(split.val_target);
            (h, split.test_target)
        }
    }
}

fn user_rank(params: &ScorerParams, split: &UserSplit<'_>, which: Split) -> Result<usize> {
    let (history, target) = split_example(split, which);
    let state = pool_history(&history, params)?;
    let scores = score_all(&state, params);
    Ok(rank_of_target(&scores, target)?.rank)
}

fn check_cutoffs(cutoffs: &[usize]) -> Result<()> {
    if cutoffs.contains(&0) {
        return Err(Error::InvalidArgument("cutoffs must be >= 1".into()));
    }
    Ok(())
}

/// Full-catalog evaluation, averaged over users in ascending user-id order.
pub fn evaluate_scorer(
    params: &ScorerParams,
    dataset: &SequenceDataset,
    split: Split,
    cutoffs: &[usize],
) -> Result<MetricReport> {
    check_cutoffs(cutoffs)?;
    let ranks = dataset.splits().map(|s| user_rank(params, &s, split)).collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_ranks(&ranks, cutoffs))
}

/// As [`evaluate_scorer`], with per-user ranks computed in parallel. The
/// reduction still runs in user-id order, so results are bit-identical.
pub fn evaluate_scorer_parallel(
    params: &ScorerParams,
    dataset: &SequenceDataset,
    split: Split,
    cutoffs: &[usize],
) -> Result<MetricReport> {
    check_cutoffs(cutoffs)?;
    let splits: Vec<_> = dataset.splits().collect();
    let ranks = splits.par_iter().map(|s| user_rank(params, s, split)).collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_ranks(&ranks, cutoffs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_markov_dataset, Catalog, MarkovConfig};
    use crate::scorer::init_params;
    use proptest::prelude::*;

    #[test]
    fn rank_examples() {
        assert_eq!(rank_of_target(&[0.1, 0.9, 0.3], 1).unwrap(), RankResult { rank: 1, tied_count: 0 });
        assert_eq!(rank_of_target(&[0.5, 0.5, 0.2], 0).unwrap(), RankResult { rank: 2, tied_count: 1 });
        let s = [0.3, -1.2, 2.0, 0.7, 0.7];
        let t: Vec<f64> = s.iter().map(|x: &f64| x.exp() * 3.0 + 1.0).collect();
        for i in 0..s.len() {
            assert_eq!(rank_of_target(&s, i).unwrap().rank, rank_of_target(&t, i).unwrap().rank);
        }
        assert!(rank_of_target(&s, 5).is_err());
        assert!(rank_of_target(&[f64::NAN, 0.0], 1).is_err());
    }

    #[test]
    fn metric_examples() {
        assert_eq!(metric_value(MetricKind::Ndcg, 1, None), 1.0);
        assert_eq!(metric_value(MetricKind::Ndcg, 3, None), 0.5);
        assert_eq!(metric_value(MetricKind::Ndcg, 11, Some(10)), 0.0);
        assert_eq!(metric_value(MetricKind::Rr, 4, None), 0.25);
        assert_eq!(metric_value(MetricKind::Hr, 10, Some(10)), 1.0);
        assert_eq!(metric_value(MetricKind::Hr, 11, Some(10)), 0.0);
    }

    #[test]
    fn theorem_preconditions_exhaustive() {
        use std::f64::consts::LN_2;
        for r in 1usize..=(1 << 16) {
            for m in 0u32..=5 {
                let ndcg_ok = neg_log_metric(MetricKind::Ndcg, r) <= m as f64 * LN_2 + 1e-12;
                let ndcg_cond = (r as u128) < (1u128 << (1u32 << m));
                assert_eq!(ndcg_ok, ndcg_cond, "NDCG r={r} m={m}");
                let rr_ok = neg_log_metric(MetricKind::Rr, r) <= m as f64 * LN_2 + 1e-12;
                assert_eq!(rr_ok, (r as u64) <= (1u64 << m), "RR r={r} m={m}");
            }
        }
    }

    fn toy_dataset(seqs: &[(u64, Vec<usize>)], n: usize) -> SequenceDataset {
        SequenceDataset::new(Catalog::identity(n), seqs.iter().cloned().collect()).unwrap()
    }

    #[test]
    fn report_averages() {
        let report = MetricReport::from_ranks(&[1, 3], &[10]);
        assert_eq!(report.ndcg_at(10), 0.75);
        assert_eq!(report.at(10).unwrap().hr, 1.0);
        assert!((report.at(10).unwrap().mrr - (1.0 + 1.0 / 3.0) / 2.0).abs() < 1e-15);
        let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        assert_eq!(json[0]["k"], 10);
        assert_eq!(json[0]["users"], 2);
    }

    #[test]
    fn single_user_top_ranked() {
        // Item 2 gets a dominating bias, so it ranks first for any history.
        let ds = toy_dataset(&[(1, vec![0, 1, 2])], 4);
        let mut params = init_params(4, 3, 1).unwrap();
        params.bias[2] = 10.0;
        let r = evaluate_scorer(&params, &ds, Split::Test, &[1, 10]).unwrap();
        assert_eq!(r.at(10).unwrap(), &CutoffMetrics { ndcg: 1.0, hr: 1.0, mrr: 1.0 });
        assert_eq!(r.user_count, 1);
    }

    #[test]
    fn split_histories() {
        let ds = toy_dataset(&[(1, vec![0, 1, 2, 3])], 4);
        let s = ds.splits().next().unwrap();
        assert_eq!(split_example(&s, Split::Validation), (vec![0, 1], 2));
        assert_eq!(split_example(&s, Split::Test), (vec![0, 1, 2], 3));
    }

    #[test]
    fn parallel_matches_serial() {
        let cfg = MarkovConfig { n_users: 300, n_items: 80, min_len: 4, max_len: 12, self_consistency: 0.7, seed: 3 };
        let ds = generate_markov_dataset(&cfg).unwrap();
        let params = init_params(80, 8, 2).unwrap();
        for split in [Split::Validation, Split::Test] {
            let a = evaluate_scorer(&params, &ds, split, &[1, 5, 10, 20]).unwrap();
            let b = evaluate_scorer_parallel(&params, &ds, split, &[1, 5, 10, 20]).unwrap();
            assert_eq!(a, b);
        }
        assert!(evaluate_scorer(&params, &ds, Split::Test, &[0]).is_err());
    }

    proptest! {
        #[test]
        fn report_ordering(ranks in prop::collection::vec(1usize..200, 1..60)) {
            let cutoffs = [1, 5, 10, 20, 50, 100];
            let r = MetricReport::from_ranks(&ranks, &cutoffs);
            let mut prev_hr = 0.0;
            for k in cutoffs {
                let m = r.at(k).unwrap();
                prop_assert!(m.hr >= prev_hr);
                prop_assert!(m.ndcg <= m.hr + 1e-15);
                prop_assert!(m.mrr <= m.hr + 1e-15);
                prev_hr = m.hr;
            }
        }

        #[test]
        fn metrics_depend_on_rank_only(scores in prop::collection::vec(-5.0f64..5.0, 2..40), t in 0usize..40, shift in -3.0f64..3.0) {
            let t = t % scores.len();
            let moved: Vec<f64> = scores.iter().map(|s| 2.0 * s + shift).collect();
            let (a, b) = (rank_of_target(&scores, t).unwrap().rank, rank_of_target(&moved, t).unwrap().rank);
            for kind in [MetricKind::Ndcg, MetricKind::Rr, MetricKind::Hr] {
                prop_assert_eq!(metric_value(kind, a, Some(10)), metric_value(kind, b, Some(10)));
            }
        }
    }
}
