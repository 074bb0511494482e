//! Spectral clustering of item directions and cluster-count selection.
//!
//! Everything here depends on item vectors only through their directions:
//! affinities are (1 + cos)/2 and both validity indices use cosine distance
//! 1 − cos.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

pub const KMEANS_RESTARTS: usize = 20;
const KMEANS_MAX_ITER: usize = 300;
const DIRECTION_TOL: f64 = 1e-12;
const NULL_SPACE_TOL: f64 = 1e-9;

/// Cosine affinity over the non-zero item vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Affinity {
    pub matrix: DMatrix<f64>,
    /// Original indices of the rows of `matrix`.
    pub included: Vec<usize>,
    /// Zero-magnitude items; they are reported as unclustered.
    pub excluded: Vec<usize>,
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = linalg::norm(v);
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

/// Cosine distance 1 − cos(a, b), evaluated as ‖â − b̂‖²/2 to avoid
/// cancellation for nearly parallel vectors.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (linalg::norm(a), linalg::norm(b));
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x / na - y / nb).powi(2)).sum();
    (0.5 * sq).clamp(0.0, 2.0)
}

pub fn cosine_affinity(w: &[Vec<f64>]) -> Affinity {
    let mut included = Vec::new();
    let mut excluded = Vec::new();
    let mut units = Vec::new();
    for (j, v) in w.iter().enumerate() {
        match unit(v) {
            Some(u) => {
                included.push(j);
                units.push(u);
            }
            None => excluded.push(j),
        }
    }
    let n = units.len();
    let matrix = DMatrix::from_fn(n, n, |a, b| {
        if a == b {
            1.0
        } else {
            (1.0 + linalg::dot(&units[a], &units[b]).clamp(-1.0, 1.0)) / 2.0
        }
    });
    Affinity {
        matrix,
        included,
        excluded,
    }
}

/// Labels from one spectral clustering run.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectral {
    /// One label per affinity row, relabelled in order of first appearance.
    pub labels: Vec<usize>,
    pub inertia: f64,
    /// Connected components of the affinity graph (positive-weight edges).
    pub components: usize,
}

fn count_components(a: &DMatrix<f64>) -> usize {
    let n = a.nrows();
    let mut seen = vec![false; n];
    let mut count = 0;
    for start in 0..n {
        if seen[start] {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(u) = stack.pop() {
            for v in 0..n {
                if !seen[v] && a[(u, v)] > 0.0 {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
    }
    count
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut best: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = best.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in best.iter().enumerate() {
                if u < *d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[idx].clone());
        for (b, p) in best.iter_mut().zip(points) {
            *b = b.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut arg = 0;
    let mut min = f64::INFINITY;
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(p, center);
        if d < min {
            min = d;
            arg = c;
        }
    }
    (arg, min)
}

/// Lloyd iterations; an emptied cluster is refilled with the point farthest
/// from its current center.
fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>) -> (Vec<usize>, f64) {
    let k = centers.len();
    let dim = points[0].len();
    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (c, _) = nearest(p, &centers);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centers[labels[a]]).total_cmp(&sq_dist(&points[b], &centers[labels[b]]))
                    });
                if let Some(i) = far {
                    counts[labels[i]] -= 1;
                    labels[i] = c;
                    counts[c] = 1;
                    changed = true;
                }
            }
        }
        for (c, center) in centers.iter_mut().enumerate() {
            if counts[c] == 0 {
                continue;
            }
            center.iter_mut().for_each(|x| *x = 0.0);
            for (p, _) in points.iter().zip(&labels).filter(|(_, &l)| l == c) {
                for d in 0..dim {
                    center[d] += p[d] / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centers[l])).sum();
    (labels, inertia)
}

fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = Vec::<(usize, usize)>::new();
    labels
        .iter()
        .map(|l| match map.iter().find(|(from, _)| from == l) {
            Some(&(_, to)) => to,
            None => {
                let next = map.len();
                map.push((*l, next));
                next
            }
        })
        .collect()
}

/// Spectral embedding: rows of the k smallest eigenvectors of the symmetric
/// normalized Laplacian, scaled to unit length. Eigenvectors with eigenvalue 1
/// span the null space of the affinity and are arbitrary within it, so they are
/// left out; cosine affinities of D-dimensional vectors have rank at most D + 1.
pub fn spectral_embedding(a: &DMatrix<f64>, k: usize) -> Vec<Vec<f64>> {
    let n = a.nrows();
    let inv_sqrt: Vec<f64> = (0..n).map(|i| 1.0 / a.row(i).sum().sqrt()).collect();
    let laplacian = DMatrix::from_fn(n, n, |i, j| {
        let off = a[(i, j)] * inv_sqrt[i] * inv_sqrt[j];
        if i == j {
            1.0 - off
        } else {
            -off
        }
    });
    let eig = SymmetricEigen::new(laplacian);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
    let informative = order[..k]
        .iter()
        .take_while(|&&c| eig.eigenvalues[c] < 1.0 - NULL_SPACE_TOL)
        .count()
        .max(1);
    let order = &order[..informative];
    (0..n)
        .map(|i| {
            let row: Vec<f64> = order.iter().map(|&c| eig.eigenvectors[(i, c)]).collect();
            unit(&row).unwrap_or(row)
        })
        .collect()
}

pub fn spectral_cluster(a: &DMatrix<f64>, k: usize, seed: u64) -> Result<Spectral> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape(format!("affinity must be square, got {:?}", a.shape())));
    }
    if k < 2 || k >= n {
        return Err(Error::Argument(format!("spectral clustering needs 2 <= k < p, got k={k}, p={n}")));
    }
    let components = count_components(a);
    if components > k {
        log::warn!("affinity graph has {components} components, more than k={k}");
    }
    let embedding = spectral_embedding(a, k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let init = kmeans_pp_init(&embedding, k, &mut rng);
        let (labels, inertia) = lloyd(&embedding, init);
        if best.as_ref().is_none_or(|(_, b)| inertia < *b) {
            best = Some((labels, inertia));
        }
    }
    let (labels, inertia) = best.expect("at least one restart");
    Ok(Spectral {
        labels: canonical_labels(&labels),
        inertia,
        components,
    })
}

fn check_labels(labels: &[usize], w: &[Vec<f64>]) -> Result<usize> {
    if labels.len() != w.len() {
        return Err(Error::Shape(format!("{} labels for {} vectors", labels.len(), w.len())));
    }
    if w.iter().any(|v| unit(v).is_none()) {
        return Err(Error::Value("cosine indices need non-zero vectors".into()));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let used = (0..k).filter(|c| labels.contains(c)).count();
    if used < 2 {
        return Err(Error::Undefined("validity index needs at least two clusters".into()));
    }
    Ok(k)
}

/// Mean silhouette in cosine distance; singleton clusters contribute 0.
pub fn silhouette_score(labels: &[usize], w: &[Vec<f64>]) -> Result<f64> {
    let k = check_labels(labels, w)?;
    let n = w.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for j in (0..n).filter(|&j| j != i) {
            sums[labels[j]] += cosine_distance(&w[i], &w[j]);
            counts[labels[j]] += 1;
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Davies–Bouldin index in cosine distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DaviesBouldin {
    /// Infinite when two centroids coincide.
    #[serde(with = "nonfinite")]
    pub value: f64,
    pub coincident_centroids: bool,
}

mod nonfinite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

pub fn davies_bouldin(labels: &[usize], w: &[Vec<f64>]) -> Result<DaviesBouldin> {
    let k = check_labels(labels, w)?;
    let dim = w[0].len();
    let clusters: Vec<usize> = (0..k).filter(|c| labels.contains(c)).collect();
    let mut centroids = Vec::new();
    let mut scatter = Vec::new();
    for &c in &clusters {
        let mut mean = vec![0.0; dim];
        for (v, _) in w.iter().zip(labels).filter(|(_, &l)| l == c) {
            let u = unit(v).expect("checked");
            mean.iter_mut().zip(&u).for_each(|(m, x)| *m += x);
        }
        let centroid = unit(&mean)
            .ok_or_else(|| Error::Undefined(format!("cluster {c} has no mean direction")))?;
        let members: Vec<&Vec<f64>> = w.iter().zip(labels).filter(|(_, &l)| l == c).map(|(v, _)| v).collect();
        let s = members.iter().map(|v| cosine_distance(v, &centroid)).sum::<f64>() / members.len() as f64;
        scatter.push(s);
        centroids.push(centroid);
    }
    let m = clusters.len();
    let mut coincident = false;
    let mut total = 0.0;
    for i in 0..m {
        let mut worst = f64::NEG_INFINITY;
        for j in (0..m).filter(|&j| j != i) {
            let d = cosine_distance(&centroids[i], &centroids[j]);
            let r = if d <= DIRECTION_TOL {
                coincident = true;
                f64::INFINITY
            } else {
                (scatter[i] + scatter[j]) / d
            };
            worst = worst.max(r);
        }
        total += worst;
    }
    Ok(DaviesBouldin {
        value: total / m as f64,
        coincident_centroids: coincident,
    })
}

fn distinct_directions(w: &[Vec<f64>]) -> usize {
    let mut reps: Vec<Vec<f64>> = Vec::new();
    for v in w {
        if !reps.iter().any(|r| cosine_distance(r, v) <= DIRECTION_TOL) {
            reps.push(v.clone());
        }
    }
    reps.len()
}

/// Clustering of the item vectors at one k.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub k: usize,
    /// One entry per item; `None` for zero-magnitude items.
    pub labels: Vec<Option<usize>>,
    /// Undefined (None) when the clustering is degenerate.
    pub silhouette: Option<f64>,
    pub dbi: Option<DaviesBouldin>,
    /// Fewer distinct directions than clusters.
    pub degenerate: bool,
    pub components: usize,
    #[serde(skip)]
    pub affinity: DMatrix<f64>,
}

/// Cluster the rows of `w` into k groups by direction.
pub fn cluster_items(w: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterResult> {
    let affinity = cosine_affinity(w);
    cluster_with_affinity(w, &affinity, k, seed)
}

fn cluster_with_affinity(w: &[Vec<f64>], affinity: &Affinity, k: usize, seed: u64) -> Result<ClusterResult> {
    let spectral = spectral_cluster(&affinity.matrix, k, seed)?;
    let kept: Vec<Vec<f64>> = affinity.included.iter().map(|&j| w[j].clone()).collect();
    let degenerate = distinct_directions(&kept) < k;
    let mut labels = vec![None; w.len()];
    for (&j, &l) in affinity.included.iter().zip(&spectral.labels) {
        labels[j] = Some(l);
    }
    let (silhouette, dbi) = if degenerate {
        (None, None)
    } else {
        (
            Some(silhouette_score(&spectral.labels, &kept)?),
            Some(davies_bouldin(&spectral.labels, &kept)?),
        )
    };
    Ok(ClusterResult {
        k,
        labels,
        silhouette,
        dbi,
        degenerate,
        components: spectral.components,
        affinity: affinity.matrix.clone(),
    })
}

/// Results over a range of k with the silhouette-maximizing choice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub results: Vec<ClusterResult>,
    /// None if every k was degenerate.
    pub recommended: Option<usize>,
}

impl Selection {
    pub fn result(&self, k: usize) -> Option<&ClusterResult> {
        self.results.iter().find(|r| r.k == k)
    }

    pub fn recommended_result(&self) -> Option<&ClusterResult> {
        self.recommended.and_then(|k| self.result(k))
    }
}

/// Cluster for every k in `ks` (clipped to at most p − 1) and recommend the
/// silhouette argmax, preferring smaller k on ties.
pub fn select_k(w: &[Vec<f64>], ks: std::ops::RangeInclusive<usize>, seed: u64) -> Result<Selection> {
    let affinity = cosine_affinity(w);
    let p = affinity.included.len();
    if *ks.start() < 2 || p < 3 {
        return Err(Error::Argument(format!(
            "k range {ks:?} invalid for {p} clusterable items"
        )));
    }
    let hi = (*ks.end()).min(p - 1);
    let mut results = Vec::new();
    for k in *ks.start()..=hi {
        results.push(cluster_with_affinity(w, &affinity, k, seed)?);
    }
    let mut recommended: Option<(usize, f64)> = None;
    for r in &results {
        if let Some(s) = r.silhouette {
            if recommended.is_none_or(|(_, best)| s > best) {
                recommended = Some((r.k, s));
            }
        }
    }
    Ok(Selection {
        results,
        recommended: recommended.map(|(k, _)| k),
    })
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("labelings of length {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |m: u64| (m * m.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&m| c2(m)).sum();
    let rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|c| c2(table.iter().map(|r| r[c]).sum())).sum();
    let total = c2(n as u64);
    let expected = if total > 0.0 { rows * cols / total } else { 0.0 };
    let max = (rows + cols) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Long-format cluster report: item_id, k, label (empty for unclustered items).
pub fn write_clusters_csv<W: Write>(selection: &Selection, item_ids: &[String], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["item_id", "k", "label"])?;
    for r in &selection.results {
        for (id, label) in item_ids.iter().zip(&r.labels) {
            let label = label.map(|l| l.to_string()).unwrap_or_default();
            wtr.write_record([id.as_str(), &r.k.to_string(), &label])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Index curves over k for plotting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexCurves {
    pub k: Vec<usize>,
    pub silhouette: Vec<Option<f64>>,
    pub dbi: Vec<Option<f64>>,
    pub recommended: Option<usize>,
}

impl From<&Selection> for IndexCurves {
    fn from(s: &Selection) -> Self {
        Self {
            k: s.results.iter().map(|r| r.k).collect(),
            silhouette: s.results.iter().map(|r| r.silhouette).collect(),
            dbi: s
                .results
                .iter()
                .map(|r| r.dbi.and_then(|d| d.value.is_finite().then_some(d.value)))
                .collect(),
            recommended: s.recommended,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(deg: &[f64]) -> Vec<Vec<f64>> {
        deg.iter()
            .map(|d| {
                let r = d.to_radians();
                vec![r.cos(), r.sin()]
            })
            .collect()
    }

    #[test]
    fn affinity_endpoints() {
        let a = cosine_affinity(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 3.0], vec![-1.0, 0.0]]).matrix;
        assert_eq!(a[(0, 1)], 1.0);
        assert!((a[(0, 2)] - 0.5).abs() < 1e-15);
        assert_eq!(a[(0, 3)], 0.0);
        assert_eq!(a[(2, 2)], 1.0);
    }

    #[test]
    fn zero_vector_is_unclustered() {
        let mut w = at(&[0.0, 5.0, 180.0, 185.0]);
        w.insert(1, vec![0.0, 0.0]);
        let aff = cosine_affinity(&w);
        assert_eq!(aff.excluded, vec![1]);
        let r = cluster_items(&w, 2, 1).unwrap();
        assert_eq!(r.labels[1], None);
        assert!(r.labels.iter().filter(|l| l.is_some()).count() == 4);
    }

    #[test]
    fn identical_directions_are_degenerate() {
        let w = vec![vec![1.0, 1.0]; 5];
        let r = cluster_items(&w, 2, 3).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.silhouette, None);
    }

    #[test]
    fn antipodal_pairs_silhouette_is_one() {
        let w = at(&[0.0, 0.0, 180.0, 180.0]);
        assert!((silhouette_score(&[0, 0, 1, 1], &w).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singleton_contributes_zero() {
        let w = at(&[0.0, 90.0, 90.0]);
        // items 1 and 2 score 1 each, the singleton 0
        assert!((silhouette_score(&[0, 1, 1], &w).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_cluster_is_undefined() {
        let w = at(&[0.0, 10.0]);
        assert!(matches!(silhouette_score(&[0, 0], &w), Err(Error::Undefined(_))));
        assert!(matches!(davies_bouldin(&[1, 1], &w), Err(Error::Undefined(_))));
    }

    #[test]
    fn zero_scatter_dbi_is_zero() {
        let w = at(&[0.0, 0.0, 120.0, 240.0, 240.0]);
        let d = davies_bouldin(&[0, 0, 1, 2, 2], &w).unwrap();
        assert!(d.value.abs() < 1e-12);
        assert!(!d.coincident_centroids);
    }

    #[test]
    fn coincident_centroids_flagged() {
        let w = at(&[0.0, 0.0, 30.0, 30.0]);
        let d = davies_bouldin(&[0, 1, 0, 1], &w).unwrap();
        assert!(d.coincident_centroids);
        assert!(d.value.is_infinite());
    }

    #[test]
    fn ari_examples() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        // sklearn reference value for this pair
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 2]).unwrap();
        assert!((v - 0.5714285714285714).abs() < 1e-12);
    }

    #[test]
    fn antiparallel_pairs_split() {
        let r = cluster_items(&at(&[0.0, 5.0, 180.0, 185.0]), 2, 7).unwrap();
        let l: Vec<usize> = r.labels.iter().map(|l| l.unwrap()).collect();
        assert_eq!(l[0], l[1]);
        assert_eq!(l[2], l[3]);
        assert_ne!(l[0], l[2]);
    }

    #[test]
    fn bad_k_is_argument_error() {
        let a = cosine_affinity(&at(&[0.0, 90.0, 180.0])).matrix;
        assert!(spectral_cluster(&a, 3, 0).is_err());
        assert!(spectral_cluster(&a, 1, 0).is_err());
    }

    #[test]
    fn select_two_directions() {
        let w = at(&[0.0, 3.0, -4.0, 2.0, 120.0, 118.0, 125.0, 121.0]);
        let s = select_k(&w, 2..=7, 11).unwrap();
        assert_eq!(s.recommended, Some(2));
        assert_eq!(s.results.last().unwrap().k, 7);
    }

    #[test]
    fn clusters_csv_layout() {
        let w = at(&[0.0, 2.0, 180.0, 182.0]);
        let s = select_k(&w, 2..=3, 1).unwrap();
        let ids: Vec<String> = (1..=4).map(|j| format!("q{j}")).collect();
        let mut buf = Vec::new();
        write_clusters_csv(&s, &ids, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 8);
        assert!(text.starts_with("item_id,k,label\nq1,2,0\n"));
    }
}
