//! Runs the full model and its component ablations on one shared split.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{longtail_groups, MetricsReport, DEFAULT_KS};
use crate::corpus::{split_dataset, HierarchyLabels, KnowledgeGraph, PrescriptionRecord, Vocabulary};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::recommender::{fit, ModelConfig, Variant};

pub const TRAIN_FRACTION: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    /// FNV-1a hash of the train and test record ids, in split order.
    pub split_hash: String,
    pub rows: Vec<AblationRow>,
}

#[derive(Clone, Debug)]
pub struct AblationOptions {
    pub ks: Vec<usize>,
    /// Fit variants concurrently; each fit owns its parameters.
    pub concurrent: bool,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self { ks: DEFAULT_KS.to_vec(), concurrent: false }
    }
}

pub fn split_hash(train: &[PrescriptionRecord], test: &[PrescriptionRecord]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (tag, part) in [(b'T', train), (b'E', test)] {
        for r in part {
            for b in std::iter::once(tag).chain(r.record_id.bytes()).chain(std::iter::once(0)) {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    format!("{h:016x}")
}

/// Splits `records` 9:1 with the config seed, then fits and evaluates every
/// variant with otherwise identical settings.
pub fn ablation_run(
    records: &[PrescriptionRecord],
    vocab: &Vocabulary,
    kg: &KnowledgeGraph,
    labels: &HierarchyLabels,
    config: &ModelConfig,
    variants: &[Variant],
    opts: &AblationOptions,
) -> Result<AblationTable> {
    if variants.is_empty() {
        return Err(Error::Precondition("no variants requested".into()));
    }
    let (train, test) = split_dataset(records, TRAIN_FRACTION, config.seed)?;
    let groups = longtail_groups(&train, vocab.n_herbs())?;
    let run = |v: Variant| -> Result<AblationRow> {
        let cfg = ModelConfig { variant: v, ..config.clone() };
        log::info!("ablation: fitting {v}");
        let (artifact, _) = fit(&train, vocab, kg, labels, &cfg, &mut |_| {})?;
        let report = artifact.evaluate(&test, &opts.ks, Some(&groups), cfg.exec)?;
        Ok(AblationRow { variant: v, report })
    };
    let exec = if opts.concurrent { Exec::Parallel } else { Exec::Sequential };
    let rows = exec.map(variants.len(), |i| run(variants[i])).into_iter().collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { split_hash: split_hash(&train, &test), rows })
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// `model,P@K...,R@K...,N@K...`, one row per variant in run order.
    pub fn to_csv(&self) -> String {
        let ks: Vec<usize> = self.rows.first().map(|r| r.report.at.iter().map(|m| m.k).collect()).unwrap_or_default();
        let mut out = String::from("model");
        for prefix in ["P", "R", "N"] {
            for k in &ks {
                let _ = write!(out, ",{prefix}@{k}");
            }
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(r.variant.as_str());
            for pick in [|m: &super::MetricsAtK| m.precision, |m: &super::MetricsAtK| m.recall, |m: &super::MetricsAtK| m.ndcg] {
                for m in &r.report.at {
                    let _ = write!(out, ",{:.6}", pick(m));
                }
            }
            out.push('\n');
        }
        out
    }
}
