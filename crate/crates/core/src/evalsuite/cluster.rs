//! Unsupervised structure metrics: k-means, adjusted mutual
//! information, Davies-Bouldin index.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded_stream};

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_rows(rows: &[Vec<f64>]) -> Result<usize> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || d == 0 {
        return Err(Error::Domain("no points to cluster".into()));
    }
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Domain("ragged point rows".into()));
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub wcss: f64,
}

/// Lloyd's algorithm with k-means++ seeding. Each restart draws from
/// its own RNG stream; the lowest-WCSS restart wins, ties going to the
/// earlier one, so results don't depend on evaluation order.
pub fn kmeans(rows: &[Vec<f64>], k: usize, iters: usize, restarts: usize, seed: u64) -> Result<KmeansResult> {
    let d = check_rows(rows)?;
    let n = rows.len();
    if k == 0 || k > n {
        return Err(Error::Domain(format!("k={k} invalid for {n} points")));
    }
    if restarts == 0 || iters == 0 {
        return Err(Error::Domain("kmeans needs at least one restart and iteration".into()));
    }
    let base = derive_seed(seed, "kmeans");
    let mut best: Option<KmeansResult> = None;
    for r in 0..restarts {
        let mut rng = seeded_stream(base, r as u64);
        let mut centroids = plusplus_init(rows, k, &mut rng);
        let mut labels = vec![0usize; n];
        for _ in 0..iters {
            let mut moved = false;
            for (i, row) in rows.iter().enumerate() {
                let l = nearest(row, &centroids).0;
                if l != labels[i] {
                    labels[i] = l;
                    moved = true;
                }
            }
            let mut sums = vec![vec![0.0; d]; k];
            let mut counts = vec![0usize; k];
            for (row, &l) in rows.iter().zip(&labels) {
                counts[l] += 1;
                for (s, v) in sums[l].iter_mut().zip(row) {
                    *s += v;
                }
            }
            for c in 0..k {
                if counts[c] == 0 {
                    // Reseed an empty cluster at the point farthest from
                    // its current centroid; it gets picked up next sweep.
                    let far = (0..n)
                        .max_by(|&a, &b| {
                            dist2(&rows[a], &centroids[labels[a]])
                                .total_cmp(&dist2(&rows[b], &centroids[labels[b]]))
                        })
                        .unwrap();
                    centroids[c] = rows[far].clone();
                    labels[far] = c;
                    moved = true;
                } else {
                    for (dst, s) in centroids[c].iter_mut().zip(&sums[c]) {
                        *dst = s / counts[c] as f64;
                    }
                }
            }
            if !moved {
                break;
            }
        }
        let wcss: f64 = rows.iter().zip(&labels).map(|(row, &l)| dist2(row, &centroids[l])).sum();
        if best.as_ref().map_or(true, |b| wcss < b.wcss) {
            best = Some(KmeansResult { labels, centroids, wcss });
        }
    }
    Ok(best.unwrap())
}

fn nearest(row: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut arg = 0;
    let mut d = dist2(row, &centroids[0]);
    for (c, cent) in centroids.iter().enumerate().skip(1) {
        let dc = dist2(row, cent);
        if dc < d {
            d = dc;
            arg = c;
        }
    }
    (arg, d)
}

/// k-means++: first centroid uniform, rest by squared-distance
/// sampling. A zero total (duplicate-heavy data) falls back to the
/// lowest-index unchosen point.
fn plusplus_init(rows: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = rows.iter().map(|r| dist2(r, &rows[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if t < w {
                    pick = i;
                    break;
                }
                t -= w;
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(pick);
        for (i, r) in rows.iter().enumerate() {
            d2[i] = d2[i].min(dist2(r, &rows[pick]));
        }
    }
    chosen.into_iter().map(|i| rows[i].clone()).collect()
}

/// Sum after sorting, so the result doesn't depend on the order terms
/// were produced in. This is what makes AMI exactly invariant under
/// label permutation: renaming labels permutes contingency cells, and
/// a plain left-to-right sum would pick up last-ulp differences.
fn stable_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Contingency table over dense label ids.
fn contingency(a: &[usize], b: &[usize]) -> (Vec<Vec<u64>>, Vec<u64>, Vec<u64>) {
    let dense = |xs: &[usize]| {
        let ids: BTreeMap<usize, usize> =
            xs.iter().copied().collect::<std::collections::BTreeSet<_>>().into_iter().zip(0..).collect();
        xs.iter().map(|x| ids[x]).collect::<Vec<_>>()
    };
    let (da, db) = (dense(a), dense(b));
    let rows = da.iter().max().unwrap() + 1;
    let cols = db.iter().max().unwrap() + 1;
    let mut table = vec![vec![0u64; cols]; rows];
    for (&i, &j) in da.iter().zip(&db) {
        table[i][j] += 1;
    }
    let asum: Vec<u64> = table.iter().map(|r| r.iter().sum()).collect();
    let bsum: Vec<u64> = (0..cols).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    (table, asum, bsum)
}

fn entropy(sums: &[u64], n: f64) -> f64 {
    stable_sum(
        sums.iter()
            .filter(|&&s| s > 0)
            .map(|&s| {
                let p = s as f64 / n;
                -p * p.ln()
            })
            .collect(),
    )
}

/// Adjusted mutual information with the hypergeometric expected-MI and
/// arithmetic-mean normalization. Two all-singleton or two
/// single-cluster labelings compare as 1; a vanishing denominator
/// otherwise yields 0.
pub fn ami(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Domain(format!("label lengths differ: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Domain("empty labelings".into()));
    }
    let (table, asum, bsum) = contingency(a, b);
    let n = a.len() as f64;
    // Trivial equal partitions carry no information to adjust; identical
    // labelings must still score 1.
    if (asum.len() == 1 && bsum.len() == 1) || (asum.len() == a.len() && bsum.len() == b.len()) {
        return Ok(1.0);
    }
    let mut mi_terms = Vec::new();
    for (i, row) in table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let pij = nij as f64 / n;
                mi_terms.push(pij * (n * nij as f64 / (asum[i] as f64 * bsum[j] as f64)).ln());
            }
        }
    }
    let mi = stable_sum(mi_terms);
    let emi = expected_mi(&asum, &bsum, a.len() as u64);
    let h = 0.5 * (entropy(&asum, n) + entropy(&bsum, n));
    let denom = h - emi;
    if denom.abs() <= 1e-12 {
        return Ok(0.0);
    }
    Ok((mi - emi) / denom)
}

/// E[MI] under the permutation model: exact hypergeometric sum over
/// feasible cell counts, in log space.
fn expected_mi(asum: &[u64], bsum: &[u64], n: u64) -> f64 {
    let lnfact: Vec<f64> = std::iter::once(0.0)
        .chain((1..=n).scan(0.0, |acc, i| {
            *acc += (i as f64).ln();
            Some(*acc)
        }))
        .collect();
    let lf = |x: u64| lnfact[x as usize];
    let nf = n as f64;
    let mut terms = Vec::new();
    for &ai in asum {
        for &bj in bsum {
            let lo = 1.max((ai + bj).saturating_sub(n));
            let hi = ai.min(bj);
            for nij in lo..=hi {
                let ln_p = lf(ai) + lf(bj) + lf(n - ai) + lf(n - bj)
                    - lf(n)
                    - lf(nij)
                    - lf(ai - nij)
                    - lf(bj - nij)
                    - lf(n + nij - ai - bj);
                let term = (nij as f64 / nf) * (nf * nij as f64 / (ai as f64 * bj as f64)).ln();
                terms.push(term * ln_p.exp());
            }
        }
    }
    stable_sum(terms)
}

/// Davies-Bouldin index: scatter is mean (not squared) distance to the
/// centroid, separation is centroid distance. Coincident centroids are
/// a hard error rather than an infinity.
pub fn dbi(rows: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let d = check_rows(rows)?;
    if labels.len() != rows.len() {
        return Err(Error::Domain("labels and rows disagree in length".into()));
    }
    let classes: Vec<usize> = {
        let set: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
        set.into_iter().collect()
    };
    if classes.len() < 2 {
        return Err(Error::Domain("dbi needs at least two clusters".into()));
    }
    let k = classes.len();
    let idx: BTreeMap<usize, usize> = classes.iter().copied().zip(0..).collect();
    let mut centroids = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (row, &l) in rows.iter().zip(labels) {
        let c = idx[&l];
        counts[c] += 1;
        for (dst, v) in centroids[c].iter_mut().zip(row) {
            *dst += v;
        }
    }
    for (cent, &cnt) in centroids.iter_mut().zip(&counts) {
        for v in cent.iter_mut() {
            *v /= cnt as f64;
        }
    }
    let mut scatter = vec![0.0; k];
    for (row, &l) in rows.iter().zip(labels) {
        let c = idx[&l];
        scatter[c] += dist2(row, &centroids[c]).sqrt();
    }
    for (s, &cnt) in scatter.iter_mut().zip(&counts) {
        *s /= cnt as f64;
    }
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = 0.0f64;
        for j in 0..k {
            if i == j {
                continue;
            }
            let m = dist2(&centroids[i], &centroids[j]).sqrt();
            if m <= 1e-12 {
                return Err(Error::Numerical(format!(
                    "degenerate centroids: clusters {} and {} coincide",
                    classes[i], classes[j]
                )));
            }
            worst = worst.max((scatter[i] + scatter[j]) / m);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn blobs(rng: &mut impl Rng, centers: &[[f64; 2]], per: usize, sigma: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, ctr) in centers.iter().enumerate() {
            for _ in 0..per {
                rows.push(vec![
                    ctr[0] + sigma * rng.gen_range(-1.0..1.0),
                    ctr[1] + sigma * rng.gen_range(-1.0..1.0),
                ]);
                labels.push(c);
            }
        }
        (rows, labels)
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let mut rng = seeded(11);
        let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0], [5.0, 20.0]];
        let (rows, gt) = blobs(&mut rng, &centers, 12, 0.1);
        let got = kmeans(&rows, 5, 50, 4, 7).unwrap();
        // Partition identity up to label permutation.
        assert!((ami(&got.labels, &gt).unwrap() - 1.0).abs() < 1e-9);
        assert!(got.wcss < 12.0 * 5.0 * 2.0 * 0.1 * 0.1 + 1e-9);
    }

    #[test]
    fn kmeans_identical_points_zero_wcss() {
        let rows = vec![vec![3.0, -1.0]; 9];
        let got = kmeans(&rows, 3, 20, 2, 1).unwrap();
        assert_eq!(got.wcss, 0.0);
        assert!(got.labels.iter().any(|&l| l == got.labels[0]));
    }

    #[test]
    fn kmeans_more_restarts_never_worse() {
        let mut rng = seeded(23);
        let rows: Vec<Vec<f64>> =
            (0..40).map(|_| (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
        let one = kmeans(&rows, 4, 30, 1, 5).unwrap();
        let ten = kmeans(&rows, 4, 30, 10, 5).unwrap();
        assert!(ten.wcss <= one.wcss + 1e-12, "{} vs {}", ten.wcss, one.wcss);
    }

    #[test]
    fn kmeans_rejects_bad_k() {
        let rows = vec![vec![0.0]; 3];
        assert!(kmeans(&rows, 0, 10, 1, 0).is_err());
        assert!(kmeans(&rows, 4, 10, 1, 0).is_err());
        assert!(kmeans(&[], 1, 10, 1, 0).is_err());
    }

    #[test]
    fn kmeans_deterministic_per_seed() {
        let mut rng = seeded(29);
        let rows: Vec<Vec<f64>> =
            (0..30).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let a = kmeans(&rows, 3, 25, 3, 99).unwrap();
        let b = kmeans(&rows, 3, 25, 3, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ami_identical_labelings_is_one() {
        let mut rng = seeded(3);
        for _ in 0..20 {
            let n = rng.gen_range(4..60);
            let k = rng.gen_range(2..5);
            let labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.gen_range(0..k) }).collect();
            let score = ami(&labels, &labels).unwrap();
            assert!((score - 1.0).abs() < 1e-9, "ami {score}");
        }
    }

    #[test]
    fn ami_constant_labeling_scores_zero() {
        let a = vec![0usize; 10];
        let b: Vec<usize> = (0..10).map(|i| i % 3).collect();
        assert_eq!(ami(&a, &b).unwrap(), 0.0);
        // Both trivial: same partition.
        assert_eq!(ami(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ami_exact_under_label_permutation() {
        let mut rng = seeded(17);
        for _ in 0..10 {
            let a: Vec<usize> = (0..50).map(|_| rng.gen_range(0..4)).collect();
            let b: Vec<usize> = (0..50).map(|_| rng.gen_range(0..3)).collect();
            let base = ami(&a, &b).unwrap();
            // Relabel a: 0..4 -> shuffled names (bitwise-equal score).
            let mut names: Vec<usize> = (10..14).collect();
            names.shuffle(&mut rng);
            let ra: Vec<usize> = a.iter().map(|&x| names[x]).collect();
            assert_eq!(ami(&ra, &b).unwrap().to_bits(), base.to_bits());
            let rb: Vec<usize> = b.iter().map(|&x| 7 - x).collect();
            assert_eq!(ami(&a, &rb).unwrap().to_bits(), base.to_bits());
        }
    }

    /// Direct textbook evaluation, organized differently from the
    /// implementation (per-cell probability map, factorials by direct
    /// product), for the oracle-equivalence check.
    fn ami_reference(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len();
        let mut cells: std::collections::BTreeMap<(usize, usize), f64> = std::collections::BTreeMap::new();
        for (&x, &y) in a.iter().zip(b) {
            *cells.entry((x, y)).or_insert(0.0) += 1.0;
        }
        let mut ra: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
        let mut cb: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
        for (&(x, y), &c) in &cells {
            *ra.entry(x).or_insert(0.0) += c;
            *cb.entry(y).or_insert(0.0) += c;
        }
        let nf = n as f64;
        let mi: f64 = cells
            .iter()
            .map(|(&(x, y), &c)| (c / nf) * ((nf * c) / (ra[&x] * cb[&y])).ln())
            .sum();
        let h = |m: &std::collections::BTreeMap<usize, f64>| -> f64 {
            m.values().map(|&c| -(c / nf) * (c / nf).ln()).sum()
        };
        let lnfact = |x: f64| -> f64 { (1..=(x as u64)).map(|i| (i as f64).ln()).sum() };
        let mut emi = 0.0;
        for &ai in ra.values() {
            for &bj in cb.values() {
                let lo = (ai + bj - nf).max(1.0);
                let mut nij = lo;
                while nij <= ai.min(bj) + 0.5 {
                    let lnp = lnfact(ai) + lnfact(bj) + lnfact(nf - ai) + lnfact(nf - bj)
                        - lnfact(nf)
                        - lnfact(nij)
                        - lnfact(ai - nij)
                        - lnfact(bj - nij)
                        - lnfact(nf - ai - bj + nij);
                    emi += (nij / nf) * ((nf * nij) / (ai * bj)).ln() * lnp.exp();
                    nij += 1.0;
                }
            }
        }
        let denom = 0.5 * (h(&ra) + h(&cb)) - emi;
        if denom.abs() <= 1e-12 {
            return 0.0;
        }
        (mi - emi) / denom
    }

    #[test]
    fn ami_matches_reference_on_random_instances() {
        let mut rng = seeded(41);
        for _ in 0..50 {
            let n = rng.gen_range(5..=100);
            let ka = rng.gen_range(2..6);
            let kb = rng.gen_range(2..6);
            let a: Vec<usize> = (0..n).map(|_| rng.gen_range(0..ka)).collect();
            let b: Vec<usize> = (0..n).map(|_| rng.gen_range(0..kb)).collect();
            let got = ami(&a, &b).unwrap();
            let want = ami_reference(&a, &b);
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn expected_mi_matches_monte_carlo_permutation() {
        // n=8 two-class instance; E[MI] under random permutation of one
        // labeling should match the closed form within 3 sigma.
        let a = vec![0, 0, 0, 0, 1, 1, 1, 1];
        let b = vec![0, 0, 1, 1, 0, 0, 1, 1];
        let (_, asum, bsum) = contingency(&a, &b);
        let emi = expected_mi(&asum, &bsum, 8);
        let mut rng = seeded(8);
        let mut perm = b.clone();
        let trials = 20_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..trials {
            perm.shuffle(&mut rng);
            let (table, asum, bsum) = contingency(&a, &perm);
            let mut mi = 0.0;
            for (i, row) in table.iter().enumerate() {
                for (j, &nij) in row.iter().enumerate() {
                    if nij > 0 {
                        mi += (nij as f64 / 8.0) * (8.0 * nij as f64 / (asum[i] as f64 * bsum[j] as f64)).ln();
                    }
                }
            }
            sum += mi;
            sumsq += mi * mi;
        }
        let mean = sum / trials as f64;
        let var = (sumsq / trials as f64 - mean * mean).max(0.0);
        let sigma = (var / trials as f64).sqrt();
        assert!((emi - mean).abs() < 3.0 * sigma + 1e-12, "emi {emi} mc {mean} sigma {sigma}");
    }

    #[test]
    fn dbi_hand_case_half() {
        // Two 1-D clusters: centroids 0 and 4, points one unit out on
        // each side, so S = 1 for both and R = (1+1)/4.
        let rows = vec![vec![-1.0], vec![1.0], vec![3.0], vec![5.0]];
        let labels = vec![0, 0, 1, 1];
        let got = dbi(&rows, &labels).unwrap();
        assert!((got - 0.5).abs() < 1e-12, "dbi {got}");
    }

    #[test]
    fn dbi_singletons_zero() {
        let rows = vec![vec![0.0, 0.0], vec![2.0, 0.0]];
        assert_eq!(dbi(&rows, &[0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn dbi_degenerate_centroids_error() {
        let rows = vec![vec![0.0], vec![2.0], vec![1.0], vec![1.0]];
        let err = dbi(&rows, &[0, 0, 1, 1]).unwrap_err();
        assert!(err.to_string().contains("degenerate centroids"), "{err}");
        assert!(dbi(&rows, &[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn dbi_matches_direct_formula_oracle() {
        let mut rng = seeded(31);
        for _ in 0..50 {
            let n = 40;
            let rows: Vec<Vec<f64>> =
                (0..n).map(|_| (0..3).map(|_| rng.gen_range(-4.0..4.0)).collect()).collect();
            let labels: Vec<usize> = (0..n).map(|i| if i < 3 { i } else { rng.gen_range(0..3) }).collect();
            let got = dbi(&rows, &labels).unwrap();
            // Naive double-loop reference.
            let mut cents = vec![vec![0.0; 3]; 3];
            let mut cnt = [0.0; 3];
            for (r, &l) in rows.iter().zip(&labels) {
                cnt[l] += 1.0;
                for j in 0..3 {
                    cents[l][j] += r[j];
                }
            }
            for c in 0..3 {
                for j in 0..3 {
                    cents[c][j] /= cnt[c];
                }
            }
            let dist = |a: &[f64], b: &[f64]| -> f64 {
                a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
            };
            let mut s = [0.0; 3];
            for (r, &l) in rows.iter().zip(&labels) {
                s[l] += dist(r, &cents[l]) / cnt[l];
            }
            let mut want = 0.0;
            for i in 0..3 {
                let mut w: f64 = 0.0;
                for j in 0..3 {
                    if i != j {
                        w = w.max((s[i] + s[j]) / dist(&cents[i], &cents[j]));
                    }
                }
                want += w / 3.0;
            }
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }
}
