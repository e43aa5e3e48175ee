//! Subgroup discovery: representations, k-means, silhouette-based run
//! selection, per-cluster error profiles and devtest alignment.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabelSpace, LabeledExample};
use crate::error::{Result, TdgError};
use crate::model::{Classifier, EmbedLayer, ModelVersion};
use crate::util::{self, sq_dist};

/// Representation used for clustering. Declaration order is the tie-break order in selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentationKind {
    Agnostic,
    Task,
    TaskLabel,
}

impl RepresentationKind {
    pub const ALL: [RepresentationKind; 3] = [
        RepresentationKind::Agnostic,
        RepresentationKind::Task,
        RepresentationKind::TaskLabel,
    ];

    pub fn needs_model(self) -> bool {
        !matches!(self, RepresentationKind::Agnostic)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RepresentationKind::Agnostic => "agnostic",
            RepresentationKind::Task => "task",
            RepresentationKind::TaskLabel => "task_label",
        }
    }
}

impl std::fmt::Display for RepresentationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RepresentationKind {
    type Err = TdgError;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "agnostic" => Ok(RepresentationKind::Agnostic),
            "task" => Ok(RepresentationKind::Task),
            "task_label" | "task+label" => Ok(RepresentationKind::TaskLabel),
            other => Err(TdgError::Config(format!("unknown representation {other:?}"))),
        }
    }
}

/// One vector per example. Pair tasks are embedded as one joined sequence.
pub fn compute_representation<C: Classifier + ?Sized>(
    backend: &C,
    examples: &[LabeledExample],
    kind: RepresentationKind,
    model: Option<&ModelVersion>,
) -> Result<Vec<Vec<f64>>> {
    let texts: Vec<String> = examples.iter().map(LabeledExample::text).collect();
    match kind {
        RepresentationKind::Agnostic => backend.embed_texts(None, &texts, EmbedLayer::Generic),
        RepresentationKind::Task | RepresentationKind::TaskLabel => {
            let m = model.ok_or_else(|| {
                TdgError::Contract(format!("{kind} representation requires a model"))
            })?;
            backend.embed_texts(Some(m), &texts, EmbedLayer::Penultimate)
        }
    }
}

/// Output of one k-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
}

fn distinct_count(vectors: &[Vec<f64>]) -> usize {
    vectors
        .iter()
        .map(|v| v.iter().map(|x| x.to_bits()).collect::<Vec<u64>>())
        .collect::<HashSet<_>>()
        .len()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Nonzero entries of a dense vector, in index order.
///
/// Summing squared differences over the union of nonzeros visits the same terms
/// as the dense loop in the same order, skipping only exact zeros, so distances
/// agree bit for bit with `util::sq_dist`.
struct SparseRow {
    idx: Vec<usize>,
    val: Vec<f64>,
    /// Squared norm, for distances against dense centroids.
    norm2: f64,
}

impl SparseRow {
    fn new(v: &[f64]) -> Self {
        let mut idx = Vec::new();
        let mut val = Vec::new();
        for (i, &x) in v.iter().enumerate() {
            if x != 0.0 {
                idx.push(i);
                val.push(x);
            }
        }
        let norm2 = val.iter().map(|x| x * x).sum();
        SparseRow { idx, val, norm2 }
    }

    fn sq_dist(&self, other: &SparseRow) -> f64 {
        let (mut a, mut b) = (0, 0);
        let mut s = 0.0;
        while a < self.idx.len() || b < other.idx.len() {
            let ia = self.idx.get(a).copied().unwrap_or(usize::MAX);
            let ib = other.idx.get(b).copied().unwrap_or(usize::MAX);
            let d = if ia == ib {
                a += 1;
                b += 1;
                self.val[a - 1] - other.val[b - 1]
            } else if ia < ib {
                a += 1;
                self.val[a - 1]
            } else {
                b += 1;
                -other.val[b - 1]
            };
            s += d * d;
        }
        s
    }

    /// Squared distance to a dense centroid whose squared norm is `c_norm2`.
    fn sq_dist_dense(&self, c: &[f64], c_norm2: f64) -> f64 {
        let mut s = self.norm2 + c_norm2;
        for (&i, &x) in self.idx.iter().zip(&self.val) {
            s -= 2.0 * x * c[i];
        }
        s.max(0.0)
    }
}

fn nearest_sparse(row: &SparseRow, centroids: &[Vec<f64>], norms: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = row.sq_dist_dense(centroid, norms[c]);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn means(vectors: &[Vec<f64>], assignments: &[usize], k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let dim = vectors.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (v, &a) in vectors.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(v) {
            *s += x;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|x| *x /= n as f64);
        }
    }
    (sums, counts)
}

fn kmeans_pp_init(vectors: &[Vec<f64>], k: usize, rng: &mut util::Rng) -> Vec<Vec<f64>> {
    let n = vectors.len();
    let mut centers = vec![vectors[rng.gen_range(0..n)].clone()];
    let mut d2: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    if r < d {
                        pick = i;
                        break;
                    }
                    r -= d;
                }
            }
            // Rounding can leave `pick` on a point that is already a center.
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        centers.push(vectors[next].clone());
        for (d, v) in d2.iter_mut().zip(vectors) {
            *d = d.min(sq_dist(v, centers.last().unwrap()));
        }
    }
    centers
}

/// Lloyd's k-means with k-means++ seeding. Deterministic per seed; keeps exactly `k` clusters.
pub fn cluster_kmeans(vectors: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult> {
    if k == 0 {
        return Err(TdgError::Config("k must be positive".into()));
    }
    let distinct = distinct_count(vectors);
    if k > distinct {
        return Err(TdgError::Config(format!(
            "k={k} exceeds the {distinct} distinct vectors"
        )));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(TdgError::Contract("vectors have unequal dimensions".into()));
    }
    let mut rng = util::rng(util::derive_seed(seed, "kmeans"));
    let mut centroids = kmeans_pp_init(vectors, k, &mut rng);
    let mut assignments: Vec<usize> = vec![usize::MAX; vectors.len()];
    // Mostly-zero vectors (task representations) take the sparse path.
    let nnz: usize = vectors.iter().map(|v| v.iter().filter(|x| **x != 0.0).count()).sum();
    let rows = (nnz * 4 < vectors.len() * dim)
        .then(|| vectors.iter().map(|v| SparseRow::new(v)).collect::<Vec<_>>());
    const MAX_ITER: usize = 300;
    for _ in 0..MAX_ITER {
        let next: Vec<usize> = match &rows {
            Some(rows) => {
                let norms: Vec<f64> = centroids.iter().map(|c| c.iter().map(|x| x * x).sum()).collect();
                rows.iter().map(|r| nearest_sparse(r, &centroids, &norms)).collect()
            }
            None => vectors.iter().map(|v| nearest(v, &centroids)).collect(),
        };
        if next == assignments {
            break;
        }
        assignments = next;
        let (new_centroids, mut counts) = means(vectors, &assignments, k);
        let old = std::mem::replace(&mut centroids, new_centroids);
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            // Re-seed with the point farthest from the empty cluster's former centroid,
            // taken from a cluster that can spare it.
            let mut far = None;
            let mut far_d = -1.0;
            for (i, v) in vectors.iter().enumerate() {
                if counts[assignments[i]] > 1 {
                    let d = sq_dist(v, &old[c]);
                    if d > far_d {
                        far_d = d;
                        far = Some(i);
                    }
                }
            }
            if let Some(i) = far {
                counts[assignments[i]] -= 1;
                assignments[i] = c;
                counts[c] = 1;
                centroids = means(vectors, &assignments, k).0;
            }
        }
    }
    let (centroids, _) = means(vectors, &assignments, k);
    let inertia = vectors
        .iter()
        .zip(&assignments)
        .map(|(v, &a)| sq_dist(v, &centroids[a]))
        .sum();
    Ok(KMeansResult {
        assignments,
        centroids,
        inertia,
    })
}

/// Mean silhouette with Euclidean distance. Singleton clusters score 0.
pub fn silhouette_score(vectors: &[Vec<f64>], assignments: &[usize]) -> Result<f64> {
    if vectors.len() != assignments.len() {
        return Err(TdgError::Contract("assignment count differs from vector count".into()));
    }
    let k = assignments.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &a in assignments {
        sizes[a] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(TdgError::Contract("silhouette needs at least two non-empty clusters".into()));
    }
    let n = vectors.len();
    let rows: Vec<SparseRow> = vectors.iter().map(|v| SparseRow::new(v)).collect();
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = assignments[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            for j in 0..n {
                if j != i {
                    sums[assignments[j]] += rows[i].sq_dist(&rows[j]).sqrt();
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m > 0.0 {
                (b - a) / m
            } else {
                0.0
            }
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    Ok(total / n as f64)
}

/// A clustering of the dev split under one representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub representation: RepresentationKind,
    pub k: usize,
    pub seed: u64,
    pub silhouette: f64,
    /// Dev example id to cluster id.
    pub assignments: BTreeMap<String, usize>,
    /// One centroid per cluster id, as plain float arrays.
    pub centroids: Vec<Vec<f64>>,
}

impl ClusterSet {
    /// Member ids of `cluster`, in id order.
    pub fn members(&self, cluster: usize) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, &c)| c == cluster)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &c in self.assignments.values() {
            s[c] += 1;
        }
        s
    }

    /// Same cluster sizes, members permuted at random; centroids recomputed.
    pub fn shuffled(&self, examples: &[LabeledExample], vectors: &[Vec<f64>], seed: u64) -> Result<ClusterSet> {
        let mut ids: Vec<usize> = examples.iter().map(|e| self.assignment_of(&e.id)).collect::<Result<_>>()?;
        ids.shuffle(&mut util::rng(util::derive_seed(seed, "shuffle-clusters")));
        let (centroids, _) = means(vectors, &ids, self.k);
        Ok(ClusterSet {
            representation: self.representation,
            k: self.k,
            seed,
            silhouette: silhouette_score(vectors, &ids).unwrap_or(0.0),
            assignments: examples.iter().zip(&ids).map(|(e, &c)| (e.id.clone(), c)).collect(),
            centroids,
        })
    }

    pub fn assignment_of(&self, id: &str) -> Result<usize> {
        self.assignments
            .get(id)
            .copied()
            .ok_or_else(|| TdgError::NotFound(format!("example {id} has no cluster")))
    }
}

/// Largest-remainder apportionment of `k` across strata, each getting at least 1 and at most its cap.
pub fn apportion(k: usize, sizes: &[usize], caps: &[usize]) -> Result<Vec<usize>> {
    let s = sizes.len();
    if k < s {
        return Err(TdgError::Config(format!(
            "k={k} is smaller than the {s} label strata"
        )));
    }
    let cap_total: usize = caps.iter().sum();
    if k > cap_total {
        return Err(TdgError::Config(format!(
            "k={k} exceeds the {cap_total} distinct vectors across strata"
        )));
    }
    let n: usize = sizes.iter().sum();
    let quotas: Vec<f64> = sizes.iter().map(|&m| k as f64 * m as f64 / n as f64).collect();
    let mut alloc: Vec<usize> = quotas
        .iter()
        .zip(caps)
        .map(|(q, &c)| (q.floor() as usize).clamp(1, c))
        .collect();
    let frac = |i: usize, alloc: &[usize]| quotas[i] - alloc[i] as f64;
    loop {
        let total: usize = alloc.iter().sum();
        if total == k {
            break;
        }
        if total < k {
            let i = (0..s)
                .filter(|&i| alloc[i] < caps[i])
                .max_by(|&a, &b| frac(a, &alloc).total_cmp(&frac(b, &alloc)).then(b.cmp(&a)))
                .expect("capacity checked above");
            alloc[i] += 1;
        } else {
            let i = (0..s)
                .filter(|&i| alloc[i] > 1)
                .min_by(|&a, &b| frac(a, &alloc).total_cmp(&frac(b, &alloc)).then(b.cmp(&a)))
                .expect("k >= strata checked above");
            alloc[i] -= 1;
        }
    }
    Ok(alloc)
}

fn cluster_once(
    examples: &[LabeledExample],
    vectors: &[Vec<f64>],
    kind: RepresentationKind,
    k: usize,
    seed: u64,
    label_space: &LabelSpace,
) -> Result<KMeansResult> {
    if kind != RepresentationKind::TaskLabel {
        return cluster_kmeans(vectors, k, seed);
    }
    let strata: Vec<Vec<usize>> = label_space
        .labels()
        .iter()
        .map(|l| {
            examples
                .iter()
                .enumerate()
                .filter(|(_, e)| &e.label == l)
                .map(|(i, _)| i)
                .collect::<Vec<_>>()
        })
        .filter(|idx| !idx.is_empty())
        .collect();
    let sizes: Vec<usize> = strata.iter().map(Vec::len).collect();
    let caps: Vec<usize> = strata
        .iter()
        .map(|idx| distinct_count(&idx.iter().map(|&i| vectors[i].clone()).collect::<Vec<_>>()))
        .collect();
    let per = apportion(k, &sizes, &caps)?;
    let mut assignments = vec![0usize; examples.len()];
    let mut centroids = Vec::with_capacity(k);
    let mut inertia = 0.0;
    for (s, idx) in strata.iter().enumerate() {
        let sub: Vec<Vec<f64>> = idx.iter().map(|&i| vectors[i].clone()).collect();
        let r = cluster_kmeans(&sub, per[s], util::derive_seed(seed, &format!("stratum-{s}")))?;
        let offset = centroids.len();
        for (&i, &a) in idx.iter().zip(&r.assignments) {
            assignments[i] = offset + a;
        }
        centroids.extend(r.centroids);
        inertia += r.inertia;
    }
    Ok(KMeansResult {
        assignments,
        centroids,
        inertia,
    })
}

/// Run k-means `n_runs` times with seeds `base_seed..base_seed+n_runs` and keep the
/// run with the highest silhouette (ties to the lowest seed).
pub fn discover(
    examples: &[LabeledExample],
    vectors: &[Vec<f64>],
    kind: RepresentationKind,
    k: usize,
    n_runs: usize,
    base_seed: u64,
    label_space: &LabelSpace,
) -> Result<ClusterSet> {
    if examples.len() != vectors.len() {
        return Err(TdgError::Contract("one vector per example required".into()));
    }
    if k < 2 {
        return Err(TdgError::Config("discovery needs k >= 2 to score runs".into()));
    }
    if n_runs == 0 {
        return Err(TdgError::Config("n_runs must be positive".into()));
    }
    let runs: Vec<(u64, KMeansResult, f64)> = (0..n_runs as u64)
        .into_par_iter()
        .map(|r| {
            let seed = base_seed + r;
            let res = cluster_once(examples, vectors, kind, k, seed, label_space)?;
            let sil = silhouette_score(vectors, &res.assignments)?;
            Ok((seed, res, sil))
        })
        .collect::<Result<Vec<_>>>()?;
    let (seed, best, sil) = runs
        .into_iter()
        .reduce(|a, b| if b.2 > a.2 || (b.2 == a.2 && b.0 < a.0) { b } else { a })
        .expect("n_runs > 0");
    tracing::debug!(%kind, k, seed, silhouette = sil, "selected clustering run");
    Ok(ClusterSet {
        representation: kind,
        k,
        seed,
        silhouette: sil,
        assignments: examples
            .iter()
            .zip(&best.assignments)
            .map(|(e, &c)| (e.id.clone(), c))
            .collect(),
        centroids: best.centroids,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterProfile {
    pub cluster_id: usize,
    pub size: usize,
    pub errors: usize,
    pub error_rate: f64,
    pub label_counts: BTreeMap<String, usize>,
    /// 1 is the highest error rate.
    pub error_rank: usize,
    pub challenging: bool,
}

/// Per-cluster error profile of `predictions` (aligned with `dev`).
pub fn profile_clusters<P: AsRef<str>>(
    clusters: &ClusterSet,
    dev: &[LabeledExample],
    predictions: &[P],
    challenge_multiplier: f64,
) -> Result<Vec<ClusterProfile>> {
    if dev.len() != predictions.len() {
        return Err(TdgError::Contract("one prediction per dev example required".into()));
    }
    let overall = crate::data::error_rate(predictions, dev)?;
    let mut profiles: Vec<ClusterProfile> = (0..clusters.k)
        .map(|c| ClusterProfile {
            cluster_id: c,
            size: 0,
            errors: 0,
            error_rate: 0.0,
            label_counts: BTreeMap::new(),
            error_rank: 0,
            challenging: false,
        })
        .collect();
    for (ex, p) in dev.iter().zip(predictions) {
        let c = clusters.assignment_of(&ex.id)?;
        let prof = &mut profiles[c];
        prof.size += 1;
        if p.as_ref() != ex.label {
            prof.errors += 1;
        }
        *prof.label_counts.entry(ex.label.clone()).or_default() += 1;
    }
    for p in &mut profiles {
        if p.size > 0 {
            p.error_rate = p.errors as f64 / p.size as f64;
        }
        p.challenging = p.error_rate > 0.0 && p.error_rate >= challenge_multiplier * overall;
    }
    let mut order: Vec<usize> = (0..clusters.k).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&profiles[a], &profiles[b]);
        pb.error_rate
            .total_cmp(&pa.error_rate)
            .then(pb.size.cmp(&pa.size))
            .then(a.cmp(&b))
    });
    for (rank, &c) in order.iter().enumerate() {
        profiles[c].error_rank = rank + 1;
    }
    Ok(profiles)
}

/// Cluster ids ranked 1..=k by error.
pub fn top_k_by_error(profiles: &[ClusterProfile], k: usize) -> Vec<usize> {
    let mut ranked: Vec<&ClusterProfile> = profiles.iter().collect();
    ranked.sort_by_key(|p| p.error_rank);
    ranked.into_iter().take(k).map(|p| p.cluster_id).collect()
}

/// Nearest-centroid assignment of devtest vectors; ties to the lowest cluster id.
pub fn assign_devtest(
    clusters: &ClusterSet,
    ids: &[String],
    vectors: &[Vec<f64>],
) -> Result<BTreeMap<String, usize>> {
    if ids.len() != vectors.len() {
        return Err(TdgError::Contract("one vector per devtest id required".into()));
    }
    let dim = clusters.centroids.first().map_or(0, Vec::len);
    ids.iter()
        .zip(vectors)
        .map(|(id, v)| {
            if v.len() != dim {
                return Err(TdgError::Contract(format!(
                    "devtest vector for {id} has dimension {}, centroids have {dim}",
                    v.len()
                )));
            }
            Ok((id.clone(), nearest(v, &clusters.centroids)))
        })
        .collect()
}
