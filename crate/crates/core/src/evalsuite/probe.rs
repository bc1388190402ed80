//! Supervised heads over frozen embeddings: linear probe, k-NN, and
//! macro-F1 scoring.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalsuite::embed::{EmbeddingSet, WhichNet};
use crate::rng::{derive_seed, seeded};
use crate::tiler::{Split, TileKind};

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

pub fn split_str(s: Split) -> &'static str {
    match s {
        Split::Train => "TRAIN",
        Split::Test => "TEST",
    }
}

pub fn kind_str(k: TileKind) -> &'static str {
    match k {
        TileKind::Aligned => "ALIGNED",
        TileKind::Standalone => "STANDALONE",
    }
}

/// What the probe was fitted on; checked downstream to keep the
/// zero-shot protocol honest (MID + TRAIN only).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainedOn {
    pub levels: Vec<String>,
    pub splits: Vec<String>,
    pub kinds: Vec<String>,
    pub n_rows: usize,
    pub source_checkpoint: String,
    pub net: WhichNet,
}

impl TrainedOn {
    pub fn of(set: &EmbeddingSet) -> TrainedOn {
        let mut levels: Vec<String> = set.levels().iter().map(|l| l.as_str().to_string()).collect();
        levels.dedup();
        let uniq = |mut v: Vec<String>| {
            v.sort();
            v.dedup();
            v
        };
        TrainedOn {
            levels,
            splits: uniq(set.meta.iter().map(|m| split_str(m.split).to_string()).collect()),
            kinds: uniq(set.meta.iter().map(|m| kind_str(m.kind).to_string()).collect()),
            n_rows: set.len(),
            source_checkpoint: set.source_checkpoint.clone(),
            net: set.net,
        }
    }

    /// Zero-shot purity: nothing but MID-level TRAIN rows.
    pub fn is_zero_shot(&self) -> bool {
        self.levels == ["MID"] && self.splits == ["TRAIN"]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    /// Sorted distinct labels; row c of `w` scores `classes[c]`.
    pub classes: Vec<u8>,
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub trained_on: TrainedOn,
    pub log: Vec<ProbeEpoch>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { lr: 1e-4, batch: 64, epochs: 20, seed: 0 }
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

impl ProbeModel {
    pub fn logits(&self, row: &[f64]) -> Vec<f64> {
        self.w
            .iter()
            .zip(&self.b)
            .map(|(wc, bc)| wc.iter().zip(row).map(|(w, x)| w * x).sum::<f64>() + bc)
            .collect()
    }

    /// Argmax class label; ties go to the lower class index.
    pub fn predict(&self, row: &[f64]) -> u8 {
        let logits = self.logits(row);
        let mut arg = 0;
        for (c, &l) in logits.iter().enumerate().skip(1) {
            if l > logits[arg] {
                arg = c;
            }
        }
        self.classes[arg]
    }

    pub fn predict_set(&self, rows: &[Vec<f64>]) -> Vec<u8> {
        rows.iter().map(|r| self.predict(r)).collect()
    }
}

/// Softmax cross-entropy probe: Adam, fixed shuffle seed, full-batch
/// accuracy logged per epoch.
pub fn train_probe(train: &EmbeddingSet, cfg: &ProbeConfig) -> Result<ProbeModel> {
    train.validate()?;
    let classes: Vec<u8> = {
        let set: std::collections::BTreeSet<u8> = train.meta.iter().map(|m| m.label).collect();
        set.into_iter().collect()
    };
    if classes.len() < 2 {
        return Err(Error::Domain(format!(
            "probe needs at least two classes, got {}",
            classes.len()
        )));
    }
    let class_idx: BTreeMap<u8, usize> = classes.iter().copied().zip(0..).collect();
    let n = train.len();
    let d = train.dim();
    let c = classes.len();
    let targets: Vec<usize> = train.meta.iter().map(|m| class_idx[&m.label]).collect();

    let mut model = ProbeModel {
        classes,
        w: vec![vec![0.0; d]; c],
        b: vec![0.0; c],
        trained_on: TrainedOn::of(train),
        log: Vec::with_capacity(cfg.epochs),
    };
    let mut mw = vec![vec![0.0; d]; c];
    let mut vw = vec![vec![0.0; d]; c];
    let mut mb = vec![0.0; c];
    let mut vb = vec![0.0; c];
    let mut t = 0u32;
    let mut rng = seeded(derive_seed(cfg.seed, "probe-shuffle"));
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for batch in order.chunks(cfg.batch.max(1)) {
            let mut gw = vec![vec![0.0; d]; c];
            let mut gb = vec![0.0; c];
            let inv = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let lp = log_softmax(&model.logits(&train.rows[i]));
                batch_loss -= lp[targets[i]];
                for (ci, &l) in lp.iter().enumerate() {
                    let g = (l.exp() - if ci == targets[i] { 1.0 } else { 0.0 }) * inv;
                    gb[ci] += g;
                    for (gx, x) in gw[ci].iter_mut().zip(&train.rows[i]) {
                        *gx += g * x;
                    }
                }
            }
            loss_sum += batch_loss * inv;
            n_batches += 1;
            t += 1;
            let bc1 = 1.0 - ADAM_B1.powi(t as i32);
            let bc2 = 1.0 - ADAM_B2.powi(t as i32);
            for ci in 0..c {
                for j in 0..d {
                    let g = gw[ci][j];
                    mw[ci][j] = ADAM_B1 * mw[ci][j] + (1.0 - ADAM_B1) * g;
                    vw[ci][j] = ADAM_B2 * vw[ci][j] + (1.0 - ADAM_B2) * g * g;
                    model.w[ci][j] -= cfg.lr * (mw[ci][j] / bc1) / ((vw[ci][j] / bc2).sqrt() + ADAM_EPS);
                }
                let g = gb[ci];
                mb[ci] = ADAM_B1 * mb[ci] + (1.0 - ADAM_B1) * g;
                vb[ci] = ADAM_B2 * vb[ci] + (1.0 - ADAM_B2) * g * g;
                model.b[ci] -= cfg.lr * (mb[ci] / bc1) / ((vb[ci] / bc2).sqrt() + ADAM_EPS);
            }
        }
        let correct = train
            .rows
            .iter()
            .zip(&train.meta)
            .filter(|(r, m)| model.predict(r) == m.label)
            .count();
        model.log.push(ProbeEpoch {
            epoch,
            loss: loss_sum / n_batches.max(1) as f64,
            acc: correct as f64 / n as f64,
        });
    }
    Ok(model)
}

fn l2_normalized(row: &[f64]) -> Vec<f64> {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    row.iter().map(|v| v / norm).collect()
}

/// Cosine k-NN with majority vote; a vote tie falls back to the label
/// of the single nearest neighbor.
pub fn knn_predict(
    train_rows: &[Vec<f64>],
    train_labels: &[u8],
    query_rows: &[Vec<f64>],
    k: usize,
) -> Result<Vec<u8>> {
    if train_rows.is_empty() {
        return Err(Error::Domain("empty k-NN training set".into()));
    }
    if train_rows.len() != train_labels.len() {
        return Err(Error::Domain("k-NN rows and labels disagree in length".into()));
    }
    if k == 0 || k > train_rows.len() {
        return Err(Error::Domain(format!(
            "k={k} invalid for {} training rows",
            train_rows.len()
        )));
    }
    let norm_train: Vec<Vec<f64>> = train_rows.iter().map(|r| l2_normalized(r)).collect();
    let mut out = Vec::with_capacity(query_rows.len());
    for q in query_rows {
        let qn = l2_normalized(q);
        let mut sims: Vec<(f64, usize)> = norm_train
            .iter()
            .enumerate()
            .map(|(i, t)| (t.iter().zip(&qn).map(|(a, b)| a * b).sum::<f64>(), i))
            .collect();
        // Descending similarity, ascending index on exact ties.
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut votes: BTreeMap<u8, usize> = BTreeMap::new();
        for &(_, i) in &sims[..k] {
            *votes.entry(train_labels[i]).or_insert(0) += 1;
        }
        let top = votes.values().copied().max().unwrap();
        let tied = votes.values().filter(|&&v| v == top).count();
        out.push(if tied > 1 { train_labels[sims[0].1] } else {
            *votes.iter().find(|(_, &v)| v == top).unwrap().0
        });
    }
    Ok(out)
}

pub fn knn_classify(train: &EmbeddingSet, query: &EmbeddingSet, k: usize) -> Result<Vec<u8>> {
    let labels: Vec<u8> = train.meta.iter().map(|m| m.label).collect();
    knn_predict(&train.rows, &labels, &query.rows, k)
}

/// Macro F1 plus the per-class table. Classes absent from both pred
/// and gt are excluded from the mean; the table covers the others.
pub fn macro_f1(pred: &[u8], gt: &[u8]) -> Result<(f64, BTreeMap<u8, f64>)> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Domain(format!(
            "pred/gt lengths invalid: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let classes: std::collections::BTreeSet<u8> = pred.iter().chain(gt).copied().collect();
    let mut table = BTreeMap::new();
    let mut sum = 0.0;
    for &c in &classes {
        let tp = pred.iter().zip(gt).filter(|(&p, &g)| p == c && g == c).count() as f64;
        let fp = pred.iter().zip(gt).filter(|(&p, &g)| p == c && g != c).count() as f64;
        let miss = pred.iter().zip(gt).filter(|(&p, &g)| p != c && g == c).count() as f64;
        // 2TP/(2TP+FP+FN) == 2PR/(P+R), with the P+R=0 case landing on 0.
        let f1 = 2.0 * tp / (2.0 * tp + fp + miss);
        table.insert(c, f1);
        sum += f1;
    }
    Ok((sum / classes.len() as f64, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::slidegen::MagTag;
    use rand::Rng;

    fn set_from(rows: Vec<Vec<f64>>, labels: &[u8], level: MagTag, split: Split) -> EmbeddingSet {
        let meta = labels
            .iter()
            .enumerate()
            .map(|(i, &label)| crate::evalsuite::embed::RowMeta {
                slide: "s000".into(),
                level,
                coords: match level {
                    MagTag::Low => vec![i as u32, 0],
                    MagTag::Mid => vec![i as u32, 0, 0],
                    MagTag::High => vec![i as u32, 0, 0, 0],
                },
                label,
                split,
                kind: TileKind::Aligned,
            })
            .collect();
        EmbeddingSet { rows, meta, source_checkpoint: "ck".into(), net: WhichNet::Teacher }
    }

    #[test]
    fn probe_separates_one_hot_features() {
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|i| {
                let mut r = vec![0.0; 4];
                r[i % 4] = 1.0;
                r
            })
            .collect();
        let labels: Vec<u8> = (0..30).map(|i| (i % 4) as u8).collect();
        let model = train_probe(&set_from(rows, &labels, MagTag::Mid, Split::Train), &ProbeConfig::default()).unwrap();
        assert_eq!(model.log.last().unwrap().acc, 1.0);
        assert_eq!(model.classes, vec![0, 1, 2, 3]);
        assert!(model.trained_on.is_zero_shot());
    }

    #[test]
    fn probe_cannot_split_identical_rows() {
        let rows = vec![vec![1.0, 2.0], vec![1.0, 2.0]];
        let model = train_probe(&set_from(rows, &[0, 1], MagTag::Mid, Split::Train), &ProbeConfig::default()).unwrap();
        assert!(model.log.last().unwrap().acc <= 0.5);
    }

    #[test]
    fn probe_learns_gaussian_blobs() {
        let mut rng = seeded(4);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..3u8 {
            for _ in 0..20 {
                let mut r = vec![0.0; 8];
                r[c as usize * 2] = 1.0 + 0.05 * rng.gen_range(-1.0..1.0);
                r[c as usize * 2 + 1] = -0.5 + 0.05 * rng.gen_range(-1.0..1.0);
                rows.push(r);
                labels.push(c);
            }
        }
        let model = train_probe(&set_from(rows, &labels, MagTag::Mid, Split::Train), &ProbeConfig::default()).unwrap();
        assert!(model.log.last().unwrap().acc > 0.95, "acc {}", model.log.last().unwrap().acc);
        // Loss is trending down over training.
        assert!(model.log.last().unwrap().loss < model.log[0].loss);
    }

    #[test]
    fn probe_rejects_single_class() {
        let rows = vec![vec![0.0; 3]; 5];
        let err = train_probe(&set_from(rows, &[2; 5], MagTag::Mid, Split::Train), &ProbeConfig::default());
        assert!(err.is_err());
    }

    #[test]
    fn probe_deterministic() {
        let mut rng = seeded(12);
        let rows: Vec<Vec<f64>> = (0..20).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let labels: Vec<u8> = (0..20).map(|i| (i % 3) as u8).collect();
        let set = set_from(rows, &labels, MagTag::Mid, Split::Train);
        let a = train_probe(&set, &ProbeConfig::default()).unwrap();
        let b = train_probe(&set, &ProbeConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trained_on_flags_leaky_sets() {
        let rows = vec![vec![0.0; 2]; 4];
        let mid_test = set_from(rows.clone(), &[0, 1, 0, 1], MagTag::Mid, Split::Test);
        assert!(!TrainedOn::of(&mid_test).is_zero_shot());
        let high_train = set_from(rows, &[0, 1, 0, 1], MagTag::High, Split::Train);
        assert!(!TrainedOn::of(&high_train).is_zero_shot());
    }

    #[test]
    fn knn_k1_is_nearest_neighbor() {
        let mut rng = seeded(21);
        let train: Vec<Vec<f64>> = (0..15).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let labels: Vec<u8> = (0..15).map(|_| rng.gen_range(0..4)).collect();
        let queries: Vec<Vec<f64>> = (0..8).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let got = knn_predict(&train, &labels, &queries, 1).unwrap();
        for (q, &g) in queries.iter().zip(&got) {
            let qn = l2_normalized(q);
            let best = (0..train.len())
                .max_by(|&a, &b| {
                    let ca = l2_normalized(&train[a]).iter().zip(&qn).map(|(x, y)| x * y).sum::<f64>();
                    let cb = l2_normalized(&train[b]).iter().zip(&qn).map(|(x, y)| x * y).sum::<f64>();
                    ca.total_cmp(&cb)
                })
                .unwrap();
            assert_eq!(g, labels[best]);
        }
    }

    #[test]
    fn knn_matches_exhaustive_oracle() {
        let mut rng = seeded(33);
        for trial in 0..50 {
            let n = rng.gen_range(10..40);
            let train: Vec<Vec<f64>> =
                (0..n).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let queries: Vec<Vec<f64>> =
                (0..5).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let k = rng.gen_range(1..=n.min(9));
            let got = knn_predict(&train, &labels, &queries, k).unwrap();
            // Oracle: full similarity sort, then vote with the same
            // nearest-neighbor tie rule.
            for (q, &g) in queries.iter().zip(&got) {
                let qn = l2_normalized(q);
                let mut sims: Vec<(f64, usize)> = train
                    .iter()
                    .enumerate()
                    .map(|(i, t)| (l2_normalized(t).iter().zip(&qn).map(|(a, b)| a * b).sum(), i))
                    .collect();
                sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                let mut counts = [0usize; 3];
                for &(_, i) in &sims[..k] {
                    counts[labels[i] as usize] += 1;
                }
                let top = *counts.iter().max().unwrap();
                let want = if counts.iter().filter(|&&c| c == top).count() > 1 {
                    labels[sims[0].1]
                } else {
                    counts.iter().position(|&c| c == top).unwrap() as u8
                };
                assert_eq!(g, want, "trial {trial}");
            }
        }
    }

    #[test]
    fn knn_rejects_bad_inputs() {
        assert!(knn_predict(&[], &[], &[vec![0.0]], 1).is_err());
        let train = vec![vec![1.0], vec![2.0]];
        assert!(knn_predict(&train, &[0, 1], &[vec![0.5]], 3).is_err());
        assert!(knn_predict(&train, &[0], &[vec![0.5]], 1).is_err());
    }

    #[test]
    fn macro_f1_hand_cases() {
        // Perfect predictions.
        let (m, table) = macro_f1(&[0, 1, 1, 2], &[0, 1, 1, 2]).unwrap();
        assert_eq!(m, 1.0);
        assert!(table.values().all(|&f| f == 1.0));
        // Confusion TP=2, FP=1, FN=1 for class 1 -> F1 = 2/3.
        let (_, table) = macro_f1(&[1, 1, 1, 0, 0], &[1, 1, 0, 1, 0]).unwrap();
        assert!((table[&1] - 2.0 / 3.0).abs() < 1e-12);
        // Class 9 appears nowhere: excluded from table and mean.
        assert!(!table.contains_key(&9));
    }

    #[test]
    fn macro_f1_matches_brute_force() {
        let mut rng = seeded(44);
        for _ in 0..50 {
            let n = rng.gen_range(2..=100);
            let pred: Vec<u8> = (0..n).map(|_| rng.gen_range(0..5)).collect();
            let gt: Vec<u8> = (0..n).map(|_| rng.gen_range(0..5)).collect();
            let (got, table) = macro_f1(&pred, &gt).unwrap();
            let mut sum = 0.0;
            let mut cnt = 0;
            for c in 0..5u8 {
                if !pred.contains(&c) && !gt.contains(&c) {
                    assert!(!table.contains_key(&c));
                    continue;
                }
                let mut tp = 0.0;
                let mut fp = 0.0;
                let mut fun = 0.0;
                for (&p, &g) in pred.iter().zip(&gt) {
                    if p == c && g == c {
                        tp += 1.0;
                    } else if p == c {
                        fp += 1.0;
                    } else if g == c {
                        fun += 1.0;
                    }
                }
                let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
                let rec = if tp + fun > 0.0 { tp / (tp + fun) } else { 0.0 };
                let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
                assert!((table[&c] - f1).abs() < 1e-9);
                sum += f1;
                cnt += 1;
            }
            assert!((got - sum / cnt as f64).abs() < 1e-9);
        }
    }
}
