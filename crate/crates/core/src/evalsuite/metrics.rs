//! The metrics.json artifact: fixed top-level keys, provenance, and a
//! detail block for everything that doesn't fit the summary shape.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalsuite::consistency::ConsistencyReport;
use crate::evalsuite::segment::SegReport;
use crate::Provenance;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyMeans {
    pub s_pos: f64,
    pub s_neg_same: f64,
    pub s_neg_diff: f64,
    pub delta_hier: f64,
    pub delta_sem: f64,
}

impl From<&ConsistencyReport> for ConsistencyMeans {
    fn from(r: &ConsistencyReport) -> Self {
        ConsistencyMeans {
            s_pos: r.s_pos,
            s_neg_same: r.s_neg_same,
            s_neg_diff: r.s_neg_diff,
            delta_hier: r.delta_hier,
            delta_sem: r.delta_sem,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelSeg {
    pub miou: f64,
    pub mdice: f64,
    pub acc: f64,
}

impl From<&SegReport> for LevelSeg {
    fn from(r: &SegReport) -> Self {
        LevelSeg { miou: r.miou, mdice: r.mdice, acc: r.acc }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub mid: LevelSeg,
    pub high: LevelSeg,
    pub consistency_pct: f64,
}

/// Everything beyond the summary keys: kept under one sub-object so
/// the top-level contract stays stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDetail {
    pub probe_macro_f1: f64,
    pub knn_macro_f1: f64,
    pub kmeans_wcss: f64,
    pub consistency_report: ConsistencyReport,
    pub segmentation_per_class: BTreeMap<String, BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub probe_f1_per_class: BTreeMap<String, f64>,
    pub knn_f1_per_class: BTreeMap<String, f64>,
    pub ami: f64,
    /// Null when centroids degenerate (collapsed embeddings).
    pub dbi: Option<f64>,
    pub consistency: ConsistencyMeans,
    pub segmentation: Segmentation,
    pub detail: MetricsDetail,
    pub provenance: Provenance,
}

impl Metrics {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Metrics> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("bad metrics json: {e}")))
    }
}

/// Per-class F1 keyed by class name, for the two summary tables.
pub fn named_f1(per_label: &BTreeMap<u8, f64>, class_names: &[String]) -> Result<BTreeMap<String, f64>> {
    per_label
        .iter()
        .map(|(&c, &f1)| {
            class_names
                .get(c as usize)
                .map(|n| (n.clone(), f1))
                .ok_or_else(|| Error::Domain(format!("label {c} outside class table")))
        })
        .collect()
}
