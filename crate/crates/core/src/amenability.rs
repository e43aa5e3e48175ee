//! Generalization (GC) and interference (IC) in context, their aggregates,
//! and representation selection with an interference gate.
//!
//! For a cluster `c` and target model `M`, a model `M'` is fine-tuned from `M`
//! on a mixture of the training set and the cluster's fit split. Then
//!
//! * `GC(c) = Acc(M', c_val) - Acc(M, c_val)`
//! * `IC(c) = Acc(M, dev) - Acc(M', dev)`
//!
//! Both are averaged over seeds per cluster and then over clusters.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledExample;
use crate::discovery::{ClusterProfile, ClusterSet, RepresentationKind};
use crate::error::{Result, TdgError};
use crate::model::{build_mixture, BaseSample, Classifier, MixtureSpec, ModelVersion, TrainParams};
use crate::util;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub holdout_fraction: f64,
    pub min_cluster_size: usize,
    pub seeds: Vec<u64>,
    pub boost_repeat: usize,
    pub base_sample_fraction: f64,
    pub finetune: TrainParams,
    pub ic_gate: f64,
    /// Measure IC on dev minus the cluster's own members.
    pub ic_exclude_cluster: bool,
    /// Number of top error clusters that enter selection.
    pub top_k: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            holdout_fraction: 0.3,
            min_cluster_size: 8,
            seeds: vec![0, 1, 2, 3, 4],
            boost_repeat: 1,
            base_sample_fraction: 1.0,
            finetune: TrainParams::finetune(),
            ic_gate: 0.05,
            ic_exclude_cluster: false,
            top_k: 2,
        }
    }
}

impl EstimatorConfig {
    /// Cluster examples repeated 10x against a 10% train sample. The plain
    /// concatenation default barely moves a linear head at desk scale.
    pub fn upweighted() -> Self {
        EstimatorConfig {
            boost_repeat: 10,
            base_sample_fraction: 0.1,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSplit {
    pub cluster_id: usize,
    pub c_fit: Vec<String>,
    pub c_val: Vec<String>,
    pub c_test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedCluster {
    pub cluster_id: usize,
    pub reason: String,
}

/// Hold out `⌈holdout_fraction·|members|⌉` members as `c_val`; devtest members form `c_test`.
pub fn split_cluster(
    cluster_id: usize,
    members: &[String],
    devtest_assignment: &BTreeMap<String, usize>,
    holdout_fraction: f64,
    min_cluster_size: usize,
    seed: u64,
) -> Result<std::result::Result<ClusterSplit, SkippedCluster>> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(TdgError::Config(format!(
            "holdout_fraction must be in (0, 1), got {holdout_fraction}"
        )));
    }
    if members.len() < min_cluster_size.max(2) {
        return Ok(Err(SkippedCluster {
            cluster_id,
            reason: format!(
                "{} dev members, minimum is {}",
                members.len(),
                min_cluster_size.max(2)
            ),
        }));
    }
    let n_val = ((holdout_fraction * members.len() as f64) - 1e-9)
        .ceil()
        .clamp(1.0, (members.len() - 1) as f64) as usize;
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.shuffle(&mut util::rng(util::derive_seed(seed, &format!("split-{cluster_id}"))));
    let mut val_idx = order[..n_val].to_vec();
    let mut fit_idx = order[n_val..].to_vec();
    val_idx.sort_unstable();
    fit_idx.sort_unstable();
    Ok(Ok(ClusterSplit {
        cluster_id,
        c_fit: fit_idx.into_iter().map(|i| members[i].clone()).collect(),
        c_val: val_idx.into_iter().map(|i| members[i].clone()).collect(),
        c_test: devtest_assignment
            .iter()
            .filter(|(_, &c)| c == cluster_id)
            .map(|(id, _)| id.clone())
            .collect(),
    }))
}

/// `Acc(M', c_val) - Acc(M, c_val)`, unclamped.
pub fn estimate_gc<C: Classifier + ?Sized>(
    backend: &C,
    target: &ModelVersion,
    tuned: &ModelVersion,
    c_val: &[LabeledExample],
) -> Result<f64> {
    if c_val.is_empty() {
        return Err(TdgError::Contract("GC needs a non-empty c_val".into()));
    }
    Ok(backend.accuracy(tuned, c_val)? - backend.accuracy(target, c_val)?)
}

/// `Acc(M, dev) - Acc(M', dev)`. Negative values mean the fine-tune helped.
pub fn estimate_ic<C: Classifier + ?Sized>(
    backend: &C,
    target: &ModelVersion,
    tuned: &ModelVersion,
    dev: &[LabeledExample],
) -> Result<f64> {
    if dev.is_empty() {
        return Err(TdgError::Contract("IC needs a non-empty dev set".into()));
    }
    Ok(backend.accuracy(target, dev)? - backend.accuracy(tuned, dev)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedStat {
    pub seed: u64,
    pub gc: f64,
    pub ic: f64,
}

/// Per-cluster GC/IC, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Amenability {
    pub cluster_id: usize,
    pub gc: f64,
    pub ic: f64,
    pub gc_std: f64,
    pub ic_std: f64,
    pub per_seed: Vec<SeedStat>,
}

impl Amenability {
    pub fn from_seeds(cluster_id: usize, per_seed: Vec<SeedStat>) -> Self {
        let gcs: Vec<f64> = per_seed.iter().map(|s| s.gc).collect();
        let ics: Vec<f64> = per_seed.iter().map(|s| s.ic).collect();
        Amenability {
            cluster_id,
            gc: util::mean(&gcs),
            ic: util::mean(&ics),
            gc_std: util::std_dev(&gcs),
            ic_std: util::std_dev(&ics),
            per_seed,
        }
    }
}

/// Unweighted means of GC and IC over clusters.
pub fn aggregate(items: &[Amenability]) -> Result<(f64, f64)> {
    if items.is_empty() {
        return Err(TdgError::Estimation("no clusters left to aggregate".into()));
    }
    let n = items.len() as f64;
    Ok((
        items.iter().map(|a| a.gc).sum::<f64>() / n,
        items.iter().map(|a| a.ic).sum::<f64>() / n,
    ))
}

/// Everything the estimator needs about one task.
pub struct EstimationContext<'a, C: Classifier + ?Sized> {
    pub backend: &'a C,
    pub target: &'a ModelVersion,
    pub train: &'a [LabeledExample],
    pub dev: &'a [LabeledExample],
}

impl<'a, C: Classifier + ?Sized> EstimationContext<'a, C> {
    fn lookup(&self) -> HashMap<&str, &LabeledExample> {
        self.dev.iter().map(|e| (e.id.as_str(), e)).collect()
    }

    /// Fine-tune `M'` for one cluster split and return `(gc, ic)`.
    pub fn gc_ic_for_split(&self, split: &ClusterSplit, seed: u64, cfg: &EstimatorConfig) -> Result<(f64, f64)> {
        let by_id = self.lookup();
        let resolve = |ids: &[String]| -> Result<Vec<LabeledExample>> {
            ids.iter()
                .map(|id| {
                    by_id
                        .get(id.as_str())
                        .map(|e| (*e).clone())
                        .ok_or_else(|| TdgError::NotFound(format!("dev example {id}")))
                })
                .collect()
        };
        let c_fit = resolve(&split.c_fit)?;
        let c_val = resolve(&split.c_val)?;
        let spec = MixtureSpec {
            base: self.train,
            boost: &c_fit,
            boost_repeat: cfg.boost_repeat,
            base_sample: BaseSample::Fraction(cfg.base_sample_fraction),
        };
        let mix_seed = util::derive_seed(seed, &format!("gcic-mix-{}", split.cluster_id));
        let mixture = build_mixture(&spec, mix_seed)?;
        let params = cfg
            .finetune
            .clone()
            .with_seed(util::derive_seed(seed, &format!("gcic-ft-{}", split.cluster_id)));
        let tuned = self.backend.finetune(self.target, &mixture, &params, self.target.role)?;
        let gc = estimate_gc(self.backend, self.target, &tuned, &c_val)?;
        let ic = if cfg.ic_exclude_cluster {
            let members: std::collections::HashSet<&str> = split
                .c_fit
                .iter()
                .chain(&split.c_val)
                .map(String::as_str)
                .collect();
            let rest: Vec<LabeledExample> = self
                .dev
                .iter()
                .filter(|e| !members.contains(e.id.as_str()))
                .cloned()
                .collect();
            estimate_ic(self.backend, self.target, &tuned, &rest)?
        } else {
            estimate_ic(self.backend, self.target, &tuned, self.dev)?
        };
        Ok((gc, ic))
    }

    /// GC/IC for each listed cluster, averaged over `cfg.seeds`. Clusters below the
    /// minimum size are returned as skipped.
    pub fn estimate_clusters(
        &self,
        clusters: &ClusterSet,
        cluster_ids: &[usize],
        devtest_assignment: &BTreeMap<String, usize>,
        cfg: &EstimatorConfig,
    ) -> Result<(Vec<Amenability>, Vec<SkippedCluster>)>
    where
        C: Sync,
    {
        if cfg.seeds.is_empty() {
            return Err(TdgError::Config("at least one seed is required".into()));
        }
        let mut jobs = Vec::new();
        let mut skipped = Vec::new();
        for &cid in cluster_ids {
            let members = clusters.members(cid);
            for &seed in &cfg.seeds {
                match split_cluster(cid, &members, devtest_assignment, cfg.holdout_fraction, cfg.min_cluster_size, seed)? {
                    Ok(split) => jobs.push((cid, seed, split)),
                    Err(skip) => {
                        tracing::info!(cluster = cid, reason = %skip.reason, "skipping cluster");
                        skipped.push(skip);
                        break;
                    }
                }
            }
        }
        let results: Vec<(usize, SeedStat)> = jobs
            .par_iter()
            .map(|(cid, seed, split)| {
                let (gc, ic) = self.gc_ic_for_split(split, *seed, cfg)?;
                Ok((*cid, SeedStat { seed: *seed, gc, ic }))
            })
            .collect::<Result<_>>()?;
        let mut grouped: BTreeMap<usize, Vec<SeedStat>> = BTreeMap::new();
        for (cid, stat) in results {
            grouped.entry(cid).or_default().push(stat);
        }
        let order: Vec<usize> = cluster_ids.iter().copied().filter(|c| grouped.contains_key(c)).collect();
        let amen = order
            .into_iter()
            .map(|cid| Amenability::from_seeds(cid, grouped.remove(&cid).unwrap_or_default()))
            .collect();
        Ok((amen, skipped))
    }
}

/// Amenability results for one representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationAmenability {
    pub representation: RepresentationKind,
    pub profiles: Vec<ClusterProfile>,
    pub clusters: Vec<Amenability>,
    pub skipped: Vec<SkippedCluster>,
    /// Top error-ranked clusters considered for selection (skipped ones removed).
    pub top_k: Vec<usize>,
    pub top_k_aggregate: Option<(f64, f64)>,
    pub all_aggregate: Option<(f64, f64)>,
    /// Share of clusters whose members all carry one label.
    pub label_purity: f64,
}

impl RepresentationAmenability {
    pub fn build(
        representation: RepresentationKind,
        profiles: Vec<ClusterProfile>,
        clusters: Vec<Amenability>,
        skipped: Vec<SkippedCluster>,
        top_k: usize,
    ) -> Self {
        let mut ranked: Vec<&ClusterProfile> = profiles.iter().collect();
        ranked.sort_by_key(|p| p.error_rank);
        let estimated: HashMap<usize, &Amenability> = clusters.iter().map(|a| (a.cluster_id, a)).collect();
        let top: Vec<usize> = ranked
            .iter()
            .take(top_k)
            .map(|p| p.cluster_id)
            .filter(|c| estimated.contains_key(c))
            .collect();
        let top_items: Vec<Amenability> = top.iter().map(|c| estimated[c].clone()).collect();
        let non_empty: Vec<&ClusterProfile> = profiles.iter().filter(|p| p.size > 0).collect();
        let pure = non_empty.iter().filter(|p| p.label_counts.len() == 1).count();
        RepresentationAmenability {
            representation,
            top_k_aggregate: aggregate(&top_items).ok(),
            all_aggregate: aggregate(&clusters).ok(),
            label_purity: if non_empty.is_empty() { 0.0 } else { pure as f64 / non_empty.len() as f64 },
            top_k: top,
            profiles,
            clusters,
            skipped,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateVerdict {
    Augment,
    RejectHighInterference,
}

/// Aggregates of one representation over its top-k error clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionCandidate {
    pub representation: RepresentationKind,
    pub gc_bar: f64,
    pub ic_bar: f64,
    pub clusters: Vec<usize>,
}

impl SelectionCandidate {
    pub fn score(&self) -> f64 {
        self.gc_bar - self.ic_bar
    }
}

impl From<&RepresentationAmenability> for Option<SelectionCandidate> {
    fn from(r: &RepresentationAmenability) -> Self {
        r.top_k_aggregate.map(|(gc, ic)| SelectionCandidate {
            representation: r.representation,
            gc_bar: gc,
            ic_bar: ic,
            clusters: r.top_k.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub representation: RepresentationKind,
    pub clusters: Vec<usize>,
    pub scores: BTreeMap<RepresentationKind, f64>,
    pub gc_bar: f64,
    pub ic_bar: f64,
    pub ic_gate: f64,
    pub verdict: GateVerdict,
}

/// Pick the representation maximizing `gc_bar - ic_bar` (ties by representation order),
/// then refuse augmentation when the winner's `ic_bar` exceeds `ic_gate`.
pub fn select(candidates: &[SelectionCandidate], ic_gate: f64) -> Result<SelectionResult> {
    let valid: Vec<&SelectionCandidate> = candidates
        .iter()
        .filter(|c| c.score().is_finite())
        .collect();
    let winner = valid
        .iter()
        .copied()
        .reduce(|best, c| {
            let (sb, sc) = (best.score(), c.score());
            if sc > sb || (sc == sb && c.representation < best.representation) {
                c
            } else {
                best
            }
        })
        .ok_or_else(|| TdgError::Estimation("no representation has valid aggregates".into()))?;
    let verdict = if winner.ic_bar > ic_gate {
        GateVerdict::RejectHighInterference
    } else {
        GateVerdict::Augment
    };
    Ok(SelectionResult {
        representation: winner.representation,
        clusters: if verdict == GateVerdict::Augment {
            winner.clusters.clone()
        } else {
            Vec::new()
        },
        scores: valid.iter().map(|c| (c.representation, c.score())).collect(),
        gc_bar: winner.gc_bar,
        ic_bar: winner.ic_bar,
        ic_gate,
        verdict,
    })
}

/// Aligned text table: cluster, size, error rate, GC±std, IC±std, verdict.
pub fn render_table(rep: &RepresentationAmenability, selection: Option<&SelectionResult>) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(out, "representation: {}", rep.representation);
    let _ = writeln!(
        out,
        "{:>7}  {:>5}  {:>6}  {:>17}  {:>17}  {}",
        "cluster", "size", "error", "GC", "IC", "verdict"
    );
    let amen: HashMap<usize, &Amenability> = rep.clusters.iter().map(|a| (a.cluster_id, a)).collect();
    let skipped: HashMap<usize, &SkippedCluster> = rep.skipped.iter().map(|s| (s.cluster_id, s)).collect();
    let mut ranked: Vec<&ClusterProfile> = rep.profiles.iter().collect();
    ranked.sort_by_key(|p| p.error_rank);
    for p in ranked {
        let verdict = match (selection, skipped.get(&p.cluster_id)) {
            (_, Some(s)) => format!("skipped ({})", s.reason),
            (Some(sel), _) if sel.representation == rep.representation && sel.clusters.contains(&p.cluster_id) => {
                "augment".to_string()
            }
            (Some(sel), _)
                if sel.representation == rep.representation
                    && sel.verdict == GateVerdict::RejectHighInterference
                    && rep.top_k.contains(&p.cluster_id) =>
            {
                "reject_high_interference".to_string()
            }
            _ if rep.top_k.contains(&p.cluster_id) => "top-k".to_string(),
            _ => "-".to_string(),
        };
        let (gc, ic) = match amen.get(&p.cluster_id) {
            Some(a) => (
                format!("{:+.4}±{:.4}", a.gc, a.gc_std),
                format!("{:+.4}±{:.4}", a.ic, a.ic_std),
            ),
            None => ("n/a".into(), "n/a".into()),
        };
        let _ = writeln!(
            out,
            "{:>7}  {:>5}  {:>6.4}  {:>17}  {:>17}  {}",
            p.cluster_id, p.size, p.error_rate, gc, ic, verdict
        );
    }
    if let Some((g, i)) = rep.top_k_aggregate {
        let _ = writeln!(out, "top-k  GC={g:+.4} IC={i:+.4} score={:+.4}", g - i);
    }
    if let Some((g, i)) = rep.all_aggregate {
        let _ = writeln!(out, "all    GC={g:+.4} IC={i:+.4}");
    }
    out
}
