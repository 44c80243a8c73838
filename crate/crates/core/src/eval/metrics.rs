//! Precision, recall and NDCG at K with binary relevance, macro-averaged over records.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::PrescriptionRecord;
use crate::error::{Error, Result};
use crate::par::Exec;

pub const DEFAULT_KS: [usize; 3] = [5, 10, 20];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsAtK {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
}

/// Metrics for one ranking against one ground-truth set.
pub fn metrics_at_k(ranked: &[usize], truth: &BTreeSet<usize>, k: usize) -> Result<MetricsAtK> {
    if k == 0 {
        return Err(Error::Precondition("K must be at least 1".into()));
    }
    if truth.is_empty() {
        return Err(Error::Precondition("ground truth must be non-empty".into()));
    }
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (rank, item) in ranked.iter().take(k).enumerate() {
        if truth.contains(item) {
            hits += 1;
            dcg += 1.0 / ((rank + 2) as f64).log2();
        }
    }
    let ideal: f64 = (0..k.min(truth.len())).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    Ok(MetricsAtK { k, precision: hits as f64 / k as f64, recall: hits as f64 / truth.len() as f64, ndcg: dcg / ideal })
}

/// Indices of the `k` largest scores, ties broken by ascending index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    /// 1-based group number, tail first.
    pub group: usize,
    pub herbs: usize,
    /// Records whose ground truth intersects the group.
    pub records: usize,
    pub at: Vec<MetricsAtK>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: usize,
    pub at: Vec<MetricsAtK>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<GroupReport>,
}

fn macro_average(per_record: &[Vec<MetricsAtK>], ks: &[usize]) -> Vec<MetricsAtK> {
    let n = per_record.len().max(1) as f64;
    ks.iter()
        .enumerate()
        .map(|(j, &k)| {
            let mut m = MetricsAtK { k, precision: 0.0, recall: 0.0, ndcg: 0.0 };
            for r in per_record {
                m.precision += r[j].precision;
                m.recall += r[j].recall;
                m.ndcg += r[j].ndcg;
            }
            m.precision /= n;
            m.recall /= n;
            m.ndcg /= n;
            m
        })
        .collect()
}

/// Macro-averaged metrics for `rankings[i]` against `truths[i]`. With
/// `groups`, also reports metrics with the ground truth restricted to each group.
pub fn evaluate_rankings(rankings: &[Vec<usize>], truths: &[BTreeSet<usize>], ks: &[usize], groups: Option<&LongTailGroups>, exec: Exec) -> Result<MetricsReport> {
    if rankings.len() != truths.len() {
        return Err(Error::Precondition("one ranking per ground-truth set required".into()));
    }
    if rankings.is_empty() {
        return Err(Error::Precondition("no records to evaluate".into()));
    }
    let per_record: Vec<Result<Vec<MetricsAtK>>> = exec.map(rankings.len(), |i| ks.iter().map(|&k| metrics_at_k(&rankings[i], &truths[i], k)).collect());
    let per_record: Vec<Vec<MetricsAtK>> = per_record.into_iter().collect::<Result<_>>()?;
    let mut report = MetricsReport { records: rankings.len(), at: macro_average(&per_record, ks), groups: Vec::new() };
    if let Some(g) = groups {
        for (gi, members) in g.groups.iter().enumerate() {
            let set: BTreeSet<usize> = members.iter().copied().collect();
            let mut rows = Vec::new();
            for (r, t) in rankings.iter().zip(truths) {
                let restricted: BTreeSet<usize> = t.intersection(&set).copied().collect();
                if !restricted.is_empty() {
                    rows.push(ks.iter().map(|&k| metrics_at_k(r, &restricted, k)).collect::<Result<Vec<_>>>()?);
                }
            }
            let at = if rows.is_empty() { ks.iter().map(|&k| MetricsAtK { k, precision: 0.0, recall: 0.0, ndcg: 0.0 }).collect() } else { macro_average(&rows, ks) };
            report.groups.push(GroupReport { group: gi + 1, herbs: members.len(), records: rows.len(), at });
        }
    }
    Ok(report)
}

impl MetricsReport {
    pub fn get(&self, k: usize) -> Option<&MetricsAtK> {
        self.at.iter().find(|m| m.k == k)
    }

    pub fn group(&self, g: usize) -> Option<&GroupReport> {
        self.groups.iter().find(|r| r.group == g)
    }

    /// `scope,k,precision,recall,ndcg,records`, overall rows first.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,k,precision,recall,ndcg,records\n");
        for m in &self.at {
            let _ = writeln!(out, "all,{},{},{},{},{}", m.k, m.precision, m.recall, m.ndcg, self.records);
        }
        for g in &self.groups {
            for m in &g.at {
                let _ = writeln!(out, "group{},{},{},{},{},{}", g.group, m.k, m.precision, m.recall, m.ndcg, g.records);
            }
        }
        out
    }
}

/// Herbs split into five equal-size groups by ascending training frequency.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LongTailGroups {
    pub groups: Vec<Vec<usize>>,
    pub frequency: Vec<usize>,
}

pub const LONGTAIL_GROUPS: usize = 5;

pub fn herb_frequency(records: &[PrescriptionRecord], n_herbs: usize) -> Vec<usize> {
    let mut f = vec![0usize; n_herbs];
    for r in records {
        for &h in &r.herbs {
            f[h] += 1;
        }
    }
    f
}

/// Ties in frequency are ordered by herb index; the first `m mod 5` groups get one extra herb.
pub fn longtail_groups(train: &[PrescriptionRecord], n_herbs: usize) -> Result<LongTailGroups> {
    if n_herbs < LONGTAIL_GROUPS {
        return Err(Error::Precondition(format!("long-tail grouping needs at least {LONGTAIL_GROUPS} herbs, got {n_herbs}")));
    }
    let frequency = herb_frequency(train, n_herbs);
    let mut order: Vec<usize> = (0..n_herbs).collect();
    order.sort_by_key(|&h| (frequency[h], h));
    let base = n_herbs / LONGTAIL_GROUPS;
    let extra = n_herbs % LONGTAIL_GROUPS;
    let mut groups = Vec::with_capacity(LONGTAIL_GROUPS);
    let mut start = 0;
    for g in 0..LONGTAIL_GROUPS {
        let len = base + usize::from(g < extra);
        groups.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(LongTailGroups { groups, frequency })
}

impl LongTailGroups {
    pub fn total_frequency(&self, group: usize) -> usize {
        self.groups[group].iter().map(|&h| self.frequency[h]).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(xs: &[usize]) -> BTreeSet<usize> {
        xs.iter().copied().collect()
    }

    #[test]
    fn counting_example() {
        let m = metrics_at_k(&[0, 9, 1, 8, 7], &set(&[0, 1, 2]), 5).unwrap();
        assert!((m.precision - 0.4).abs() < 1e-15);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ndcg_worked_case() {
        let m = metrics_at_k(&[1, 9, 2, 8, 7], &set(&[1, 2]), 5).unwrap();
        let expected = (1.0 + 1.0 / 4f64.log2()) / (1.0 + 1.0 / 3f64.log2());
        assert!((m.ndcg - expected).abs() < 1e-15);
        assert!((m.ndcg - 0.9197).abs() < 1e-4);
    }

    #[test]
    fn perfect_ranking() {
        let m = metrics_at_k(&[3, 4, 0, 1, 2], &set(&[3, 4]), 5).unwrap();
        assert_eq!((m.precision, m.recall, m.ndcg), (0.4, 1.0, 1.0));
        assert!(metrics_at_k(&[1], &BTreeSet::new(), 5).is_err());
        assert!(metrics_at_k(&[1], &set(&[1]), 0).is_err());
    }

    #[test]
    fn top_k_breaks_ties_by_index() {
        assert_eq!(top_k(&[0.5, 0.5, 0.9, 0.5], 4), vec![2, 0, 1, 3]);
        assert_eq!(top_k(&[1.0; 3], 2), vec![0, 1]);
    }

    #[test]
    fn fifteen_herbs_make_five_groups_of_three() {
        let g = longtail_groups(&[], 15).unwrap();
        assert!(g.groups.iter().all(|x| x.len() == 3));
        assert_eq!(g.groups[0], vec![0, 1, 2]);
        assert!(longtail_groups(&[], 4).is_err());
    }

    #[test]
    fn csv_has_one_row_per_k() {
        let r = evaluate_rankings(&[vec![0, 1]], &[set(&[0])], &[5], None, Exec::Sequential).unwrap();
        assert_eq!(r.to_csv().lines().count(), 2);
    }
}
