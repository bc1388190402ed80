//! Zero-shot tile segmentation: run the frozen backbone + linear probe
//! over a level's full tile grid and score against majority labels.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalsuite::probe::ProbeModel;
use crate::nnet::model::forward;
use crate::nnet::params::Params;
use crate::slidegen::{MagTag, SlidePyramid};
use crate::tiler::{extract_pixels, tile_grid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassSeg {
    pub iou: f64,
    pub dice: f64,
    /// Grid cells of this class in the ground truth.
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub per_class: BTreeMap<String, ClassSeg>,
    /// Means over classes present in the ground truth.
    pub miou: f64,
    pub mdice: f64,
    pub acc: f64,
}

/// Predicted label grid (row-major) for one level of one slide.
pub fn segment(
    params: &Params,
    probe: &ProbeModel,
    slide: &SlidePyramid,
    level: MagTag,
    tile_px: usize,
) -> Result<Vec<Vec<u8>>> {
    let records = tile_grid(slide, level, tile_px)?;
    let cols = slide.level(level).width / tile_px;
    let flat: Vec<u8> = records
        .par_iter()
        .map(|rec| {
            let tile = extract_pixels(slide, rec)?;
            let (e, _) = forward(params, &tile)?;
            Ok(probe.predict(&e))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(flat.chunks(cols).map(<[u8]>::to_vec).collect())
}

/// Ground-truth majority-label grid for the same cells.
pub fn gt_grid(slide: &SlidePyramid, level: MagTag, tile_px: usize) -> Result<Vec<Vec<u8>>> {
    let records = tile_grid(slide, level, tile_px)?;
    let cols = slide.level(level).width / tile_px;
    let flat: Vec<u8> = records.iter().map(|r| r.label).collect();
    Ok(flat.chunks(cols).map(<[u8]>::to_vec).collect())
}

/// Per-class IoU/Dice over grid cells plus cell accuracy. Classes seen
/// only in pred get a table row but don't enter the means.
pub fn seg_metrics(pred: &[Vec<u8>], gt: &[Vec<u8>], class_names: &[String]) -> Result<SegReport> {
    if pred.len() != gt.len() || pred.iter().zip(gt).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::Domain("pred and gt grids differ in shape".into()));
    }
    if pred.is_empty() || pred[0].is_empty() {
        return Err(Error::Domain("empty segmentation grid".into()));
    }
    let pairs: Vec<(u8, u8)> = pred
        .iter()
        .zip(gt)
        .flat_map(|(pr, gr)| pr.iter().copied().zip(gr.iter().copied()))
        .collect();
    let classes: std::collections::BTreeSet<u8> = pairs.iter().flat_map(|&(p, g)| [p, g]).collect();
    let mut per_class = BTreeMap::new();
    let mut miou = 0.0;
    let mut mdice = 0.0;
    let mut n_gt_classes = 0usize;
    for &c in &classes {
        let name = class_names
            .get(c as usize)
            .ok_or_else(|| Error::Domain(format!("label {c} outside class table")))?;
        let tp = pairs.iter().filter(|&&(p, g)| p == c && g == c).count() as f64;
        let fp = pairs.iter().filter(|&&(p, g)| p == c && g != c).count() as f64;
        let miss = pairs.iter().filter(|&&(p, g)| p != c && g == c).count() as f64;
        let support = pairs.iter().filter(|&&(_, g)| g == c).count();
        let iou = if tp + fp + miss == 0.0 { 0.0 } else { tp / (tp + fp + miss) };
        let dice = if 2.0 * tp + fp + miss == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + miss) };
        per_class.insert(name.clone(), ClassSeg { iou, dice, support });
        if support > 0 {
            miou += iou;
            mdice += dice;
            n_gt_classes += 1;
        }
    }
    if n_gt_classes == 0 {
        return Err(Error::Domain("ground truth grid has no classes".into()));
    }
    let correct = pairs.iter().filter(|&&(p, g)| p == g).count();
    Ok(SegReport {
        per_class,
        miou: miou / n_gt_classes as f64,
        mdice: mdice / n_gt_classes as f64,
        acc: correct as f64 / pairs.len() as f64,
    })
}

/// 100·meanIoU_HIGH / meanIoU_MID, the zero-shot retention figure.
pub fn consistency_pct(miou_mid: f64, miou_high: f64) -> Result<f64> {
    if miou_mid <= 0.0 {
        return Err(Error::Domain(format!("mid mIoU {miou_mid} not positive")));
    }
    Ok(100.0 * miou_high / miou_mid)
}

/// Merge per-slide reports by support-weighted cell pooling: recompute
/// from summed confusion counts rather than averaging ratios.
pub fn pool_grids(grids: &[(Vec<Vec<u8>>, Vec<Vec<u8>>)], class_names: &[String]) -> Result<SegReport> {
    if grids.is_empty() {
        return Err(Error::Domain("no grids to pool".into()));
    }
    let mut pred_all = Vec::new();
    let mut gt_all = Vec::new();
    for (p, g) in grids {
        if p.len() != g.len() || p.iter().zip(g).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Domain("pred and gt grids differ in shape".into()));
        }
        pred_all.push(p.iter().flatten().copied().collect::<Vec<u8>>());
        gt_all.push(g.iter().flatten().copied().collect::<Vec<u8>>());
    }
    let pred: Vec<u8> = pred_all.into_iter().flatten().collect();
    let gt: Vec<u8> = gt_all.into_iter().flatten().collect();
    seg_metrics(&[pred], &[gt], class_names)
}
