//! Per-query retrieval metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{BenchmarkDataset, EvalError};
use crate::types::{GroundTruth, RankedList};

/// 1.0 if any target is among the first `min(k, len)` candidates, else 0.0.
pub fn recall_at_k(ranked: &RankedList, gt: &GroundTruth, k: usize) -> f64 {
    let hit = ranked.candidates.iter().take(k).any(|c| gt.is_target(&c.image_id));
    if hit {
        1.0
    } else {
        0.0
    }
}

/// The ranking restricted to the subset members, relative order kept.
pub fn restrict_to_subset<'a>(
    ranked: &'a RankedList,
    gt: &GroundTruth,
) -> Result<Vec<&'a str>, EvalError> {
    let subset = gt
        .subset_ids
        .as_ref()
        .ok_or_else(|| EvalError::MissingSubset(gt.query_id.clone()))?;
    let restricted: Vec<&str> = ranked
        .ids()
        .filter(|id| subset.contains(*id))
        .collect();
    if restricted.len() != subset.len() {
        let missing = subset
            .iter()
            .find(|s| !restricted.contains(&s.as_str()))
            .expect("a member is missing");
        return Err(EvalError::SubsetMemberUnscored {
            query_id: gt.query_id.clone(),
            image_id: missing.clone(),
        });
    }
    Ok(restricted)
}

/// Recall@k over the ranking restricted to the subset members.
pub fn recall_subset_at_k(ranked: &RankedList, gt: &GroundTruth, k: usize) -> Result<f64, EvalError> {
    let restricted = restrict_to_subset(ranked, gt)?;
    let hit = restricted.iter().take(k).any(|id| gt.is_target(id));
    Ok(if hit { 1.0 } else { 0.0 })
}

/// Average precision truncated at `k`, normalized by `min(|targets|, k)`.
pub fn average_precision_at_k(ranked: &RankedList, gt: &GroundTruth, k: usize) -> f64 {
    let denom = gt.target_ids.len().min(k);
    if denom == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, c) in ranked.candidates.iter().take(k).enumerate() {
        if gt.is_target(&c.image_id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / denom as f64
}

/// Arithmetic mean in input order; 0 for an empty slice.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MetricSpec {
    Recall(usize),
    RecallSubset(usize),
    Map(usize),
}

impl MetricSpec {
    pub fn needs_subset(self) -> bool {
        matches!(self, MetricSpec::RecallSubset(_))
    }

    pub fn evaluate(self, ranked: &RankedList, gt: &GroundTruth) -> Result<f64, EvalError> {
        Ok(match self {
            MetricSpec::Recall(k) => recall_at_k(ranked, gt, k),
            MetricSpec::RecallSubset(k) => recall_subset_at_k(ranked, gt, k)?,
            MetricSpec::Map(k) => average_precision_at_k(ranked, gt, k),
        })
    }
}

impl fmt::Display for MetricSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricSpec::Recall(k) => write!(f, "R@{k}"),
            MetricSpec::RecallSubset(k) => write!(f, "Rs@{k}"),
            MetricSpec::Map(k) => write!(f, "mAP@{k}"),
        }
    }
}

impl FromStr for MetricSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, k) = s
            .split_once('@')
            .ok_or_else(|| format!("metric {s:?} must look like R@10, Rs@1 or mAP@5"))?;
        let k: usize = k
            .parse()
            .ok()
            .filter(|k| *k > 0)
            .ok_or_else(|| format!("metric {s:?}: cutoff must be a positive integer"))?;
        match name {
            "R" => Ok(MetricSpec::Recall(k)),
            "Rs" => Ok(MetricSpec::RecallSubset(k)),
            "mAP" => Ok(MetricSpec::Map(k)),
            _ => Err(format!("unknown metric {name:?}")),
        }
    }
}

/// Which metrics a benchmark run reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MetricSuite {
    /// Pick from the dataset: subsets → cirr, categories → fashion-iq,
    /// multi-target queries → circo, otherwise full.
    #[default]
    Auto,
    Cirr,
    Circo,
    FashionIq,
    Full,
}

impl MetricSuite {
    pub fn resolve(self, ds: &BenchmarkDataset) -> MetricSuite {
        if self != MetricSuite::Auto {
            return self;
        }
        let gts = || ds.ground_truths.values();
        if gts().any(|g| g.subset_ids.is_some()) {
            MetricSuite::Cirr
        } else if gts().any(|g| g.category.is_some()) {
            MetricSuite::FashionIq
        } else if gts().any(|g| g.target_ids.len() > 1) {
            MetricSuite::Circo
        } else {
            MetricSuite::Full
        }
    }

    pub fn metrics(self, with_subsets: bool) -> Vec<MetricSpec> {
        use MetricSpec::*;
        match self {
            MetricSuite::Cirr => vec![Recall(1), Recall(5), Recall(10), RecallSubset(1), RecallSubset(2)],
            MetricSuite::Circo => vec![Map(5), Map(10), Map(25), Map(50)],
            MetricSuite::FashionIq => vec![Recall(10)],
            MetricSuite::Full | MetricSuite::Auto => {
                let mut v = vec![
                    Recall(1),
                    Recall(5),
                    Recall(10),
                    Recall(50),
                    Map(5),
                    Map(10),
                    Map(25),
                    Map(50),
                ];
                if with_subsets {
                    v.extend([RecallSubset(1), RecallSubset(2), RecallSubset(3)]);
                }
                v
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MetricSuite::Auto => "auto",
            MetricSuite::Cirr => "cirr",
            MetricSuite::Circo => "circo",
            MetricSuite::FashionIq => "fashion-iq",
            MetricSuite::Full => "full",
        }
    }
}

impl FromStr for MetricSuite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(MetricSuite::Auto),
            "cirr" => Ok(MetricSuite::Cirr),
            "circo" => Ok(MetricSuite::Circo),
            "fashion-iq" => Ok(MetricSuite::FashionIq),
            "full" => Ok(MetricSuite::Full),
            other => Err(format!("unknown metric suite {other:?}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ScoredCandidate;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn list(ids: &[&str]) -> RankedList {
        RankedList {
            query_id: "q".into(),
            candidates: ids
                .iter()
                .enumerate()
                .map(|(i, id)| ScoredCandidate::coarse(*id, 1.0 - i as f64 * 0.01, i + 1))
                .collect(),
        }
    }

    fn gt(targets: &[&str]) -> GroundTruth {
        GroundTruth {
            query_id: "q".into(),
            target_ids: targets.iter().map(|s| s.to_string()).collect(),
            subset_ids: None,
            category: None,
        }
    }

    #[test]
    fn recall_examples() {
        let l = list(&["t", "a", "b", "c", "d", "e"]);
        assert_eq!(recall_at_k(&l, &gt(&["t"]), 1), 1.0);
        let l = list(&["a", "b", "c", "d", "e", "t"]);
        assert_eq!(recall_at_k(&l, &gt(&["t"]), 5), 0.0);
        assert_eq!(recall_at_k(&l, &gt(&["t"]), 6), 1.0);
        assert_eq!(recall_at_k(&l, &gt(&["t"]), 100), 1.0);
    }

    #[test]
    fn ap_examples() {
        let l = list(&["t1", "x", "t2", "y", "z"]);
        let ap = average_precision_at_k(&l, &gt(&["t1", "t2"]), 5);
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        let l = list(&["t2", "t1", "x"]);
        assert_eq!(average_precision_at_k(&l, &gt(&["t1", "t2"]), 5), 1.0);
        let l = list(&["x", "y"]);
        assert_eq!(average_precision_at_k(&l, &gt(&["t1"]), 5), 0.0);
    }

    #[test]
    fn subset_examples() {
        let mut g = gt(&["t"]);
        let l = list(&["z", "t", "m1", "m2", "m3", "m4", "m5"]);
        assert!(matches!(recall_subset_at_k(&l, &g, 1), Err(EvalError::MissingSubset(_))));
        g.subset_ids = Some(["t", "m1", "m2", "m3", "m4", "m5"].iter().map(|s| s.to_string()).collect());
        assert_eq!(recall_subset_at_k(&l, &g, 1).unwrap(), 1.0);
        let l = list(&["m1", "m2", "t", "m3", "m4", "m5"]);
        assert_eq!(recall_subset_at_k(&l, &g, 2).unwrap(), 0.0);
        let l = list(&["m1", "t", "m3", "m4", "m5"]);
        assert!(matches!(
            recall_subset_at_k(&l, &g, 2),
            Err(EvalError::SubsetMemberUnscored { image_id, .. }) if image_id == "m2"
        ));
    }

    #[test]
    fn metric_names() {
        for s in ["R@1", "Rs@2", "mAP@50"] {
            assert_eq!(s.parse::<MetricSpec>().unwrap().to_string(), s);
        }
        assert!("R@0".parse::<MetricSpec>().is_err());
        assert!("P@5".parse::<MetricSpec>().is_err());
        let names: BTreeSet<String> = MetricSuite::Cirr.metrics(true).iter().map(|m| m.to_string()).collect();
        let expected: BTreeSet<String> = ["R@1", "R@5", "R@10", "Rs@1", "Rs@2"].iter().map(|s| s.to_string()).collect();
        assert_eq!(names, expected);
    }

    proptest! {
        #[test]
        fn recall_monotone_in_k(n in 1usize..30, t in 0usize..40, k in 1usize..40) {
            let ids: Vec<String> = (0..n).map(|i| format!("i{i}")).collect();
            let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
            let l = list(&refs);
            let g = gt(&[&format!("i{t}")]);
            prop_assert!(recall_at_k(&l, &g, k) <= recall_at_k(&l, &g, k + 1));
        }

        #[test]
        fn single_target_ap_is_reciprocal_rank(n in 1usize..30, t in 0usize..30, k in 1usize..30) {
            let ids: Vec<String> = (0..n).map(|i| format!("i{i}")).collect();
            let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
            let l = list(&refs);
            let ap = average_precision_at_k(&l, &gt(&[&format!("i{t}")]), k);
            let expected = if t < n && t < k { 1.0 / (t + 1) as f64 } else { 0.0 };
            prop_assert!((ap - expected).abs() < 1e-15);
        }
    }
}
