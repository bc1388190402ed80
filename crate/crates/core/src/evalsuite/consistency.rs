//! Cross-magnification consistency: how a parent's embedding relates
//! to its own children vs unrelated HIGH tiles of same/different class.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalsuite::embed::EmbeddingSet;
use crate::rng::{choose_indices, derive_seed, seeded};
use crate::slidegen::MagTag;
use crate::tiler::TileManifest;

/// delta_hier = s_pos − s_neg_same; delta_sem = s_neg_same − s_neg_diff.
pub fn gaps(s_pos: f64, s_neg_same: f64, s_neg_diff: f64) -> (f64, f64) {
    (s_pos - s_neg_same, s_neg_same - s_neg_diff)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassGaps {
    pub s_pos: f64,
    pub s_neg_same: f64,
    pub s_neg_diff: f64,
    pub delta_hier: f64,
    pub delta_sem: f64,
    pub n_parents: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub s_pos: f64,
    pub s_neg_same: f64,
    pub s_neg_diff: f64,
    pub delta_hier: f64,
    pub delta_sem: f64,
    pub n_parents: usize,
    pub n_neg_per_parent: usize,
    /// Parents dropped for lack of children or enough negatives.
    pub n_skipped: usize,
    pub per_class: BTreeMap<String, ClassGaps>,
}

fn l2_normalized(row: &[f64]) -> Vec<f64> {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    row.iter().map(|v| v / norm).collect()
}

/// For every MID parent in `mid`: mean cosine to its children present
/// in `high` (s_pos), to `n_neg` sampled non-child HIGH tiles of the
/// same class (s_neg_same), and of a different class (s_neg_diff).
/// Parents lacking children or enough negatives in either pool are
/// skipped and counted. Global means pool over surviving parents.
pub fn consistency_analysis(
    mid: &EmbeddingSet,
    high: &EmbeddingSet,
    manifest: &TileManifest,
    n_neg: usize,
    seed: u64,
) -> Result<ConsistencyReport> {
    mid.validate()?;
    high.validate()?;
    if mid.is_empty() || high.is_empty() {
        return Err(Error::Domain("consistency needs MID and HIGH rows".into()));
    }
    if mid.dim() != high.dim() {
        return Err(Error::Domain(format!(
            "embedding dims differ: {} vs {}",
            mid.dim(),
            high.dim()
        )));
    }
    if n_neg == 0 {
        return Err(Error::Domain("n_neg must be positive".into()));
    }
    if let Some(m) = mid.meta.iter().find(|m| m.level != MagTag::Mid) {
        return Err(Error::Domain(format!("non-MID row ({}) in parent set", m.level)));
    }
    if let Some(m) = high.meta.iter().find(|m| m.level != MagTag::High) {
        return Err(Error::Domain(format!("non-HIGH row ({}) in child set", m.level)));
    }

    let mid_n: Vec<Vec<f64>> = mid.rows.iter().map(|r| l2_normalized(r)).collect();
    let high_n: Vec<Vec<f64>> = high.rows.iter().map(|r| l2_normalized(r)).collect();

    // HIGH rows grouped by the parent cell they fall in.
    let mut by_parent: BTreeMap<(&str, &[u32]), Vec<usize>> = BTreeMap::new();
    for (i, m) in high.meta.iter().enumerate() {
        by_parent.entry((&m.slide, &m.coords[..3])).or_default().push(i);
    }

    let mut rng = seeded(derive_seed(seed, "consistency"));
    let mut skipped = 0usize;
    let mut glob = Acc::default();
    let mut per_label: BTreeMap<u8, Acc> = BTreeMap::new();

    for (p, pm) in mid.meta.iter().enumerate() {
        let key = (pm.slide.as_str(), pm.coords.as_slice());
        let children = by_parent.get(&key).map_or(&[][..], Vec::as_slice);
        if children.is_empty() {
            skipped += 1;
            continue;
        }
        let is_child = |i: &usize| children.contains(i);
        let same: Vec<usize> = (0..high_n.len())
            .filter(|i| high.meta[*i].label == pm.label && !is_child(i))
            .collect();
        let diff: Vec<usize> = (0..high_n.len()).filter(|i| high.meta[*i].label != pm.label).collect();
        if same.len() < n_neg || diff.len() < n_neg {
            skipped += 1;
            continue;
        }
        let cos = |i: usize| mid_n[p].iter().zip(&high_n[i]).map(|(a, b)| a * b).sum::<f64>();
        let mean = |ids: &[usize]| ids.iter().map(|&i| cos(i)).sum::<f64>() / ids.len() as f64;

        let s_pos = mean(children);
        let picked_same: Vec<usize> = choose_indices(&mut rng, same.len(), n_neg).iter().map(|&j| same[j]).collect();
        let picked_diff: Vec<usize> = choose_indices(&mut rng, diff.len(), n_neg).iter().map(|&j| diff[j]).collect();
        let s_neg_same = mean(&picked_same);
        let s_neg_diff = mean(&picked_diff);

        glob.push(s_pos, s_neg_same, s_neg_diff);
        per_label.entry(pm.label).or_default().push(s_pos, s_neg_same, s_neg_diff);
    }

    if glob.n == 0 {
        return Err(Error::Domain(format!(
            "no usable parents ({skipped} skipped) for consistency analysis"
        )));
    }
    let (s_pos, s_neg_same, s_neg_diff) = glob.means();
    let (delta_hier, delta_sem) = gaps(s_pos, s_neg_same, s_neg_diff);
    let mut per_class = BTreeMap::new();
    for (label, acc) in per_label {
        let name = manifest
            .class_names
            .get(label as usize)
            .ok_or_else(|| Error::Domain(format!("label {label} outside manifest class table")))?;
        let (sp, sns, snd) = acc.means();
        let (dh, ds) = gaps(sp, sns, snd);
        per_class.insert(
            name.clone(),
            ClassGaps {
                s_pos: sp,
                s_neg_same: sns,
                s_neg_diff: snd,
                delta_hier: dh,
                delta_sem: ds,
                n_parents: acc.n,
            },
        );
    }
    Ok(ConsistencyReport {
        s_pos,
        s_neg_same,
        s_neg_diff,
        delta_hier,
        delta_sem,
        n_parents: glob.n,
        n_neg_per_parent: n_neg,
        n_skipped: skipped,
        per_class,
    })
}

#[derive(Default)]
struct Acc {
    sp: f64,
    sns: f64,
    snd: f64,
    n: usize,
}

impl Acc {
    fn push(&mut self, sp: f64, sns: f64, snd: f64) {
        self.sp += sp;
        self.sns += sns;
        self.snd += snd;
        self.n += 1;
    }

    fn means(&self) -> (f64, f64, f64) {
        let n = self.n as f64;
        (self.sp / n, self.sns / n, self.snd / n)
    }
}
