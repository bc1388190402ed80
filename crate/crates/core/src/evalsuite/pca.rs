//! Two-component PCA export for parent-child pair plots.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::evalsuite::embed::EmbeddingSet;
use crate::slidegen::MagTag;
use crate::tiler::TileManifest;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaRow {
    pub row_id: usize,
    pub level: MagTag,
    pub class: u8,
    pub pc1: f64,
    pub pc2: f64,
    /// MID row this HIGH row descends from, when present in the set.
    pub parent_row_id: Option<usize>,
}

/// Cyclic Jacobi on a symmetric matrix; returns (eigenvalues,
/// eigenvectors as columns), unsorted.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = a.len();
    let mut v = vec![vec![0.0; d]; d];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let frob: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-14 * frob.max(1e-300);
    for _ in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|p| ((p + 1)..d).map(move |q| (p, q)))
            .map(|(p, q)| a[p][q] * a[p][q])
            .sum::<f64>()
            .sqrt();
        if off <= tol {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                if a[p][q].abs() <= tol / (d as f64) {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..d {
                    let (aip, aiq) = (a[i][p], a[i][q]);
                    a[i][p] = c * aip - s * aiq;
                    a[i][q] = s * aip + c * aiq;
                }
                for i in 0..d {
                    let (api, aqi) = (a[p][i], a[q][i]);
                    a[p][i] = c * api - s * aqi;
                    a[q][i] = s * api + c * aqi;
                }
                for row in v.iter_mut() {
                    let (vip, viq) = (row[p], row[q]);
                    row[p] = c * vip - s * viq;
                    row[q] = s * vip + c * viq;
                }
            }
        }
    }
    ((0..d).map(|i| a[i][i]).collect(), v)
}

/// Top-2 principal axes of the pooled, mean-centered rows. Sign fixed
/// so each axis's first non-negligible component is positive.
fn top2_axes(rows: &[&[f64]]) -> Result<(Vec<f64>, Vec<f64>, [f64; 2], Vec<f64>)> {
    let n = rows.len();
    let d = rows[0].len();
    if d < 2 {
        return Err(Error::Domain(format!("pca needs dim >= 2, got {d}")));
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(*r) {
            *m += x / n as f64;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for r in rows {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[i][j] += c[i] * c[j] / n as f64;
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[i][j] = cov[j][i];
        }
    }
    let (eig, vecs) = jacobi_eigen(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig[j].total_cmp(&eig[i]).then(i.cmp(&j)));
    let axis = |k: usize| {
        let col = order[k];
        let mut v: Vec<f64> = vecs.iter().map(|row| row[col]).collect();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                for x in v.iter_mut() {
                    *x = -*x;
                }
            }
        }
        v
    };
    Ok((axis(0), axis(1), [eig[order[0]], eig[order[1]]], mean))
}

/// Project MID then HIGH rows onto the top-2 axes and link each HIGH
/// row to its parent's row id. Returns rows plus the two eigenvalues.
pub fn pca_project(mid: &EmbeddingSet, high: &EmbeddingSet) -> Result<(Vec<PcaRow>, [f64; 2])> {
    mid.validate()?;
    high.validate()?;
    if mid.is_empty() && high.is_empty() {
        return Err(Error::Domain("no rows to project".into()));
    }
    if !mid.is_empty() && !high.is_empty() && mid.dim() != high.dim() {
        return Err(Error::Domain(format!(
            "embedding dims differ: {} vs {}",
            mid.dim(),
            high.dim()
        )));
    }
    let pooled: Vec<&[f64]> = mid.rows.iter().chain(&high.rows).map(Vec::as_slice).collect();
    let (v1, v2, eig, mean) = top2_axes(&pooled)?;
    let project = |r: &[f64]| {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(x, m)| x - m).collect();
        (
            c.iter().zip(&v1).map(|(a, b)| a * b).sum::<f64>(),
            c.iter().zip(&v2).map(|(a, b)| a * b).sum::<f64>(),
        )
    };
    let mut parent_ids: BTreeMap<(&str, &[u32]), usize> = BTreeMap::new();
    for (i, m) in mid.meta.iter().enumerate() {
        parent_ids.insert((&m.slide, &m.coords), i);
    }
    let mut rows = Vec::with_capacity(pooled.len());
    for (i, (r, m)) in mid.rows.iter().zip(&mid.meta).enumerate() {
        let (pc1, pc2) = project(r);
        rows.push(PcaRow { row_id: i, level: m.level, class: m.label, pc1, pc2, parent_row_id: None });
    }
    for (i, (r, m)) in high.rows.iter().zip(&high.meta).enumerate() {
        let (pc1, pc2) = project(r);
        let parent = if m.coords.len() >= 3 {
            parent_ids.get(&(m.slide.as_str(), &m.coords[..3])).copied()
        } else {
            None
        };
        rows.push(PcaRow {
            row_id: mid.len() + i,
            level: m.level,
            class: m.label,
            pc1,
            pc2,
            parent_row_id: parent,
        });
    }
    Ok((rows, eig))
}

/// CSV with header `row_id,level,class,pc1,pc2,parent_row_id`; class
/// written by name, parent empty for MID rows and unlinked HIGH rows.
pub fn pca_export(mid: &EmbeddingSet, high: &EmbeddingSet, manifest: &TileManifest, path: &Path) -> Result<()> {
    let (rows, _) = pca_project(mid, high)?;
    let mut csv = String::from("row_id,level,class,pc1,pc2,parent_row_id\n");
    for r in &rows {
        let name = manifest
            .class_names
            .get(r.class as usize)
            .ok_or_else(|| Error::Domain(format!("label {} outside class table", r.class)))?;
        let parent = r.parent_row_id.map_or(String::new(), |p| p.to_string());
        csv.push_str(&format!(
            "{},{},{name},{},{},{parent}\n",
            r.row_id,
            r.level.as_str(),
            r.pc1,
            r.pc2
        ));
    }
    fs::write(path, csv).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalsuite::embed::{EmbeddingSet, RowMeta, WhichNet};
    use crate::rng::seeded;
    use crate::tiler::{Split, TileKind};
    use rand::Rng;

    fn mk_set(level: MagTag, entries: Vec<(u8, Vec<u32>, Vec<f64>)>) -> EmbeddingSet {
        let (meta, rows) = entries
            .into_iter()
            .map(|(label, coords, row)| {
                (
                    RowMeta {
                        slide: "s000".into(),
                        level,
                        coords,
                        label,
                        split: Split::Test,
                        kind: TileKind::Aligned,
                    },
                    row,
                )
            })
            .unzip();
        EmbeddingSet { rows, meta, source_checkpoint: "ck".into(), net: WhichNet::Teacher }
    }

    fn empty(level: MagTag) -> EmbeddingSet {
        mk_set(level, vec![])
    }

    #[test]
    fn collinear_data_has_zero_second_eigenvalue() {
        let dir = [0.6, -0.8, 0.0];
        let entries: Vec<(u8, Vec<u32>, Vec<f64>)> = (0..10)
            .map(|i| {
                let t = i as f64 * 0.5;
                (0u8, vec![i, 0, 0], dir.iter().map(|d| d * t).collect())
            })
            .collect();
        let (rows, eig) = pca_project(&mk_set(MagTag::Mid, entries), &empty(MagTag::High)).unwrap();
        assert!(eig[1].abs() < 1e-9, "second eigenvalue {}", eig[1]);
        assert!(rows.iter().all(|r| r.pc2.abs() < 1e-9));
        assert!(eig[0] > 0.1);
    }

    #[test]
    fn pc1_variance_dominates() {
        let mut rng = seeded(19);
        let entries: Vec<(u8, Vec<u32>, Vec<f64>)> = (0..30)
            .map(|i| (0u8, vec![i, 0, 0], (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let (rows, eig) = pca_project(&mk_set(MagTag::Mid, entries), &empty(MagTag::High)).unwrap();
        let var = |f: &dyn Fn(&PcaRow) -> f64| -> f64 {
            let m = rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64;
            rows.iter().map(|r| (f(r) - m) * (f(r) - m)).sum::<f64>() / rows.len() as f64
        };
        let (v1, v2) = (var(&|r: &PcaRow| r.pc1), var(&|r: &PcaRow| r.pc2));
        assert!(v1 >= v2, "{v1} < {v2}");
        assert!(eig[0] >= eig[1]);
        // Eigenvalues are the projected variances.
        assert!((v1 - eig[0]).abs() < 1e-9);
        assert!((v2 - eig[1]).abs() < 1e-9);
    }

    #[test]
    fn three_points_match_closed_form() {
        // 2-D instance solvable by the quadratic formula.
        let pts = [[1.0, 0.0], [0.0, 2.0], [-1.0, -1.0]];
        let entries: Vec<(u8, Vec<u32>, Vec<f64>)> =
            pts.iter().enumerate().map(|(i, p)| (0u8, vec![i as u32, 0, 0], p.to_vec())).collect();
        let (rows, eig) = pca_project(&mk_set(MagTag::Mid, entries), &empty(MagTag::High)).unwrap();
        let n = 3.0;
        let mx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
        let my = pts.iter().map(|p| p[1]).sum::<f64>() / n;
        let a = pts.iter().map(|p| (p[0] - mx) * (p[0] - mx)).sum::<f64>() / n;
        let b = pts.iter().map(|p| (p[0] - mx) * (p[1] - my)).sum::<f64>() / n;
        let c = pts.iter().map(|p| (p[1] - my) * (p[1] - my)).sum::<f64>() / n;
        let disc = ((a - c) * (a - c) + 4.0 * b * b).sqrt();
        let l1 = 0.5 * (a + c + disc);
        let l2 = 0.5 * (a + c - disc);
        assert!((eig[0] - l1).abs() < 1e-9, "{} vs {l1}", eig[0]);
        assert!((eig[1] - l2).abs() < 1e-9);
        // Axis for l1: (b, l1 - a) normalized, sign fixed like the code.
        let mut v = [b, l1 - a];
        let norm = (v[0] * v[0] + v[1] * v[1]).sqrt();
        v = [v[0] / norm, v[1] / norm];
        if (v[0].abs() > 1e-12 && v[0] < 0.0) || (v[0].abs() <= 1e-12 && v[1] < 0.0) {
            v = [-v[0], -v[1]];
        }
        for (r, p) in rows.iter().zip(&pts) {
            let want = (p[0] - mx) * v[0] + (p[1] - my) * v[1];
            assert!((r.pc1 - want).abs() < 1e-9, "{} vs {want}", r.pc1);
        }
    }

    #[test]
    fn axes_signed_by_first_component() {
        let mut rng = seeded(91);
        let entries: Vec<(u8, Vec<u32>, Vec<f64>)> = (0..20)
            .map(|i| (0u8, vec![i, 0, 0], (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let set = mk_set(MagTag::Mid, entries);
        let pooled: Vec<&[f64]> = set.rows.iter().map(Vec::as_slice).collect();
        let (v1, v2, _, _) = top2_axes(&pooled).unwrap();
        for v in [v1, v2] {
            let first = v.iter().find(|x| x.abs() > 1e-12).unwrap();
            assert!(*first > 0.0);
        }
    }

    #[test]
    fn parent_links_and_csv_shape() {
        let mut rng = seeded(55);
        let mut rand_row = || -> Vec<f64> { (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let mid_entries: Vec<(u8, Vec<u32>, Vec<f64>)> =
            (0..3u32).map(|k| (1u8, vec![0, 0, k], rand_row())).collect();
        let mut high_entries = Vec::new();
        for k in 0..3u32 {
            for m in 0..2u32 {
                high_entries.push((1u8, vec![0, 0, k, m], rand_row()));
            }
        }
        // One orphan HIGH tile whose parent is not in the mid set.
        high_entries.push((2u8, vec![0, 1, 0, 0], rand_row()));
        let mid = mk_set(MagTag::Mid, mid_entries);
        let high = mk_set(MagTag::High, high_entries);
        let (rows, _) = pca_project(&mid, &high).unwrap();
        assert_eq!(rows.len(), 10);
        for r in &rows[..3] {
            assert_eq!(r.parent_row_id, None);
            assert_eq!(r.level, MagTag::Mid);
        }
        for (i, r) in rows[3..9].iter().enumerate() {
            assert_eq!(r.parent_row_id, Some(i as u32 as usize / 2));
        }
        assert_eq!(rows[9].parent_row_id, None);

        let manifest = TileManifest::from_parts(
            vec!["Background".into(), "A".into(), "B".into()],
            0,
            vec![],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pca.csv");
        pca_export(&mid, &high, &manifest, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "row_id,level,class,pc1,pc2,parent_row_id");
        assert_eq!(lines.len(), 11);
        assert!(lines[1].starts_with("0,MID,A,") && lines[1].ends_with(','));
        assert!(lines[4].starts_with("3,HIGH,A,") && lines[4].ends_with(",0"));
        assert!(lines[10].starts_with("9,HIGH,B,") && lines[10].ends_with(','));
    }

    #[test]
    fn rejects_one_dimensional_embeddings() {
        let entries = vec![(0u8, vec![0, 0, 0], vec![1.0]), (0u8, vec![0, 0, 1], vec![2.0])];
        assert!(pca_project(&mk_set(MagTag::Mid, entries), &empty(MagTag::High)).is_err());
    }
}
