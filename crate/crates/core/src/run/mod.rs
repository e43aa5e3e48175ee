//! The end-to-end pipeline: per-seed stage functions over in-memory data, plus
//! an artifact store that makes each stage resumable from a run directory.

mod config;
mod store;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use config::*;
pub use store::*;

use crate::amenability::{select, EstimationContext, RepresentationAmenability, SelectionCandidate, SelectionResult, GateVerdict};
use crate::augment::{BudgetUsed, Generator, LabelProvider};
use crate::baselines::{
    ablation_augmentation_only, ablation_discovery_only, assemble_and_finetune, evaluate, gdro_finetune,
    paraphrase_baseline, AssemblyMode, EvalReport, MethodModel, SynonymParaphraser,
};
use crate::data::{DatasetBundle, LabeledExample};
use crate::discovery::{
    assign_devtest, compute_representation, discover, profile_clusters, ClusterProfile, ClusterSet, RepresentationKind,
};
use crate::error::{Result, TdgError};
use crate::model::{Classifier, ModelVersion, ReferenceBackend};
use crate::session::{run_headless, EventLog, Session, SessionContext, SessionSpec, SessionStatus};
use crate::util;

/// Clustering of dev under one representation, with its devtest alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepDiscovery {
    pub representation: RepresentationKind,
    pub clusters: ClusterSet,
    pub profiles: Vec<ClusterProfile>,
    pub devtest: BTreeMap<String, usize>,
}

impl RepDiscovery {
    pub fn members<'a>(&self, cluster: usize, dev: &'a [LabeledExample]) -> Vec<&'a LabeledExample> {
        dev.iter()
            .filter(|e| self.clusters.assignments.get(&e.id) == Some(&cluster))
            .collect()
    }
}

pub fn train_target(backend: &ReferenceBackend, bundle: &DatasetBundle, cfg: &BackendConfig, seed: u64) -> Result<ModelVersion> {
    backend.fit(&bundle.train, &cfg.target.clone().with_seed(seed))
}

pub fn discover_seed(
    backend: &ReferenceBackend,
    bundle: &DatasetBundle,
    target: &ModelVersion,
    cfg: &DiscoveryConfig,
    seed: u64,
) -> Result<Vec<RepDiscovery>> {
    let preds = backend.predict_labels(target, &bundle.dev)?;
    let ids: Vec<String> = bundle.devtest.iter().map(|e| e.id.clone()).collect();
    cfg.representations
        .iter()
        .map(|&kind| {
            let model = kind.needs_model().then_some(target);
            let v = compute_representation(backend, &bundle.dev, kind, model)?;
            let base_seed = util::derive_seed(seed, &format!("discover-{kind}"));
            let clusters = discover(&bundle.dev, &v, kind, cfg.k, cfg.n_runs, base_seed, &bundle.label_space)?;
            let profiles = profile_clusters(&clusters, &bundle.dev, &preds, cfg.challenge_multiplier)?;
            let dv = compute_representation(backend, &bundle.devtest, kind, model)?;
            let devtest = assign_devtest(&clusters, &ids, &dv)?;
            Ok(RepDiscovery {
                representation: kind,
                clusters,
                profiles,
                devtest,
            })
        })
        .collect()
}

/// GC/IC of each representation's top-k error clusters (or all clusters when
/// configured), averaged over the estimator seeds.
pub fn estimate_seed(
    backend: &ReferenceBackend,
    bundle: &DatasetBundle,
    target: &ModelVersion,
    discoveries: &[RepDiscovery],
    cfg: &EstimateConfig,
) -> Result<Vec<RepresentationAmenability>> {
    let ctx = EstimationContext {
        backend,
        target,
        train: &bundle.train,
        dev: &bundle.dev,
    };
    discoveries
        .iter()
        .map(|d| {
            let ids: Vec<usize> = if cfg.all_clusters {
                (0..d.clusters.k).collect()
            } else {
                crate::discovery::top_k_by_error(&d.profiles, cfg.estimator.top_k)
            };
            let (amen, skipped) = ctx.estimate_clusters(&d.clusters, &ids, &d.devtest, &cfg.estimator)?;
            Ok(RepresentationAmenability::build(
                d.representation,
                d.profiles.clone(),
                amen,
                skipped,
                cfg.estimator.top_k,
            ))
        })
        .collect()
}

pub fn select_seed(amenability: &[RepresentationAmenability], ic_gate: f64) -> Result<SelectionResult> {
    let cands: Vec<SelectionCandidate> = amenability.iter().filter_map(Option::<SelectionCandidate>::from).collect();
    select(&cands, ic_gate)
}

/// Outcome of one headless augmentation session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub cluster_id: usize,
    pub name: Option<String>,
    pub status: SessionStatus,
    pub originals: usize,
    pub accepted: Vec<LabeledExample>,
    pub budget_used: BudgetUsed,
    pub local_version: String,
    pub global_version: String,
}

pub fn session_id(seed: u64, cluster: usize) -> String {
    format!("s{seed}-c{cluster}")
}

pub fn session_spec(
    bundle: &DatasetBundle,
    discovery: &RepDiscovery,
    cluster: usize,
    target: &ModelVersion,
    cfg: &AugmentStageConfig,
    generator: &str,
    seed: u64,
) -> SessionSpec {
    SessionSpec {
        session_id: session_id(seed, cluster),
        cluster_id: cluster,
        seed: util::derive_seed(seed, &format!("session-{cluster}")),
        config: cfg.session_config(),
        originals: discovery.members(cluster, &bundle.dev).into_iter().cloned().collect(),
        target_version: target.version_id.clone(),
        generator: generator.to_owned(),
    }
}

/// Run one oracle-labeled session per selected cluster. Event logs go to
/// `log_dir` when given.
#[allow(clippy::too_many_arguments)]
pub fn augment_seed(
    backend: &ReferenceBackend,
    generator: &dyn Generator,
    labeler: &dyn LabelProvider,
    bundle: &DatasetBundle,
    target: &ModelVersion,
    discovery: &RepDiscovery,
    selection: &SelectionResult,
    cfg: &AugmentStageConfig,
    seed: u64,
    log_dir: Option<&Path>,
) -> Result<Vec<SessionSummary>> {
    let ctx = SessionContext {
        backend,
        generator,
        train: &bundle.train,
        target,
    };
    let mut out = Vec::new();
    for &cid in &selection.clusters {
        let spec = session_spec(bundle, discovery, cid, target, cfg, generator.name(), seed);
        let log = match log_dir {
            Some(dir) => {
                let path = dir.join(format!("{}.jsonl", spec.session_id));
                if path.exists() {
                    std::fs::remove_file(&path)?;
                }
                Some(EventLog::new(path))
            }
            None => None,
        };
        let mut s = Session::create(&ctx, spec, log)?;
        let status = run_headless(&ctx, &mut s, labeler)?;
        out.push(summarize(&s, status));
    }
    Ok(out)
}

pub fn summarize(s: &Session, status: SessionStatus) -> SessionSummary {
    SessionSummary {
        session_id: s.id().to_owned(),
        cluster_id: s.spec.cluster_id,
        name: s.name.clone(),
        status,
        originals: s.spec.originals.len(),
        accepted: s.accepted.clone(),
        budget_used: s.stopping.budget_used.clone(),
        local_version: s.local.version_id.clone(),
        global_version: s.global.version_id.clone(),
    }
}

/// A model (or per-cluster models) for one evaluation method.
#[derive(Debug, Clone)]
pub struct AssembledMethod {
    pub method: Method,
    pub model: MethodModel,
    /// Number of new examples the method fine-tuned on.
    pub budget: usize,
}

/// Build every requested method's model for one seed.
#[allow(clippy::too_many_arguments)]
pub fn assemble_seed(
    backend: &ReferenceBackend,
    generator: &dyn Generator,
    labeler: &dyn LabelProvider,
    bundle: &DatasetBundle,
    target: &ModelVersion,
    discovery: &RepDiscovery,
    selection: &SelectionResult,
    sessions: &[SessionSummary],
    cfg: &RunConfig,
    seed: u64,
) -> Result<Vec<AssembledMethod>> {
    let a = &cfg.augment;
    let params = a.assembly.clone().with_seed(util::derive_seed(seed, "assemble"));
    let accepted: BTreeMap<usize, Vec<LabeledExample>> = sessions
        .iter()
        .filter(|s| !s.accepted.is_empty())
        .map(|s| (s.cluster_id, s.accepted.clone()))
        .collect();
    let tdg_size: usize = accepted.values().map(Vec::len).sum();
    let augmented = selection.verdict == GateVerdict::Augment && tdg_size > 0;
    let originals: Vec<LabeledExample> = selection
        .clusters
        .iter()
        .flat_map(|&c| discovery.members(c, &bundle.dev))
        .cloned()
        .collect();
    let mut out = Vec::new();
    for &method in &cfg.evaluate.methods {
        let built = match method {
            Method::Target => Some((MethodModel::Shared(target.clone()), 0)),
            Method::Reweighing => {
                let groups = &discovery.clusters.assignments;
                let mut g = cfg.baselines.gdro.clone();
                g.params = g.params.with_seed(util::derive_seed(seed, "gdro"));
                let o = gdro_finetune(backend, target, &bundle.dev, groups, &g)?;
                Some((MethodModel::Shared(o.version), bundle.dev.len()))
            }
            Method::Paraphrasing if augmented => {
                let p = SynonymParaphraser::new(cfg.baselines.paraphrase_lexicon());
                let para = paraphrase_baseline(&originals, &p, tdg_size, util::derive_seed(seed, "paraphrase"))?;
                let set = BTreeMap::from([(0usize, para)]);
                let m = assemble_and_finetune(backend, AssemblyMode::TdgAll, &set, target, &bundle.train, a.ratio, &params)?;
                Some((MethodModel::Shared(m), tdg_size))
            }
            Method::TdgSingle if augmented => {
                let mut per = BTreeMap::new();
                for (&c, acc) in &accepted {
                    let one = BTreeMap::from([(c, acc.clone())]);
                    let m = assemble_and_finetune(backend, AssemblyMode::TdgSingle, &one, target, &bundle.train, a.ratio, &params)?;
                    per.insert(c, m);
                }
                Some((MethodModel::PerCluster(per), tdg_size))
            }
            Method::TdgAll if augmented => {
                let m = assemble_and_finetune(backend, AssemblyMode::TdgAll, &accepted, target, &bundle.train, a.ratio, &params)?;
                Some((MethodModel::Shared(m), tdg_size))
            }
            Method::AblationDiscovery if augmented => {
                let m = ablation_discovery_only(backend, target, &originals, &bundle.train, &params)?;
                Some((MethodModel::Shared(m), originals.len()))
            }
            Method::AblationAugment if augmented => {
                let m = cfg.baselines.ablation_budget_multiplier;
                let mut session = a.session_config();
                session.max_labels *= m;
                session.max_proposals *= m;
                session.max_global_updates *= m;
                session.stop_on_convergence = false;
                let acc = ablation_augmentation_only(
                    backend,
                    generator,
                    labeler,
                    target,
                    &bundle.train,
                    &bundle.dev,
                    originals.len(),
                    Some(tdg_size),
                    &session,
                    util::derive_seed(seed, "ablation-augment"),
                )?;
                let n = acc.len();
                let set = BTreeMap::from([(0usize, acc)]);
                let m = assemble_and_finetune(backend, AssemblyMode::TdgAll, &set, target, &bundle.train, a.ratio, &params)?;
                Some((MethodModel::Shared(m), n))
            }
            _ => None,
        };
        if let Some((model, budget)) = built {
            out.push(AssembledMethod { method, model, budget });
        }
    }
    Ok(out)
}

/// Evaluate on the winning representation's top-k clusters. Methods that were
/// not built (e.g. after a gate rejection) get an all-n/a row.
pub fn evaluate_seed(
    backend: &ReferenceBackend,
    bundle: &DatasetBundle,
    amenability: &[RepresentationAmenability],
    discoveries: &[RepDiscovery],
    selection: &SelectionResult,
    methods: &[Method],
    assembled: &[AssembledMethod],
) -> Result<EvalReport> {
    let rep = amenability
        .iter()
        .find(|r| r.representation == selection.representation)
        .ok_or_else(|| TdgError::Integrity("selected representation has no amenability".into()))?;
    let disc = discoveries
        .iter()
        .find(|d| d.representation == selection.representation)
        .ok_or_else(|| TdgError::Integrity("selected representation has no clustering".into()))?;
    let clusters: Vec<usize> = if selection.clusters.is_empty() {
        rep.top_k.clone()
    } else {
        selection.clusters.clone()
    };
    let built: Vec<(String, MethodModel)> = assembled
        .iter()
        .map(|a| (a.method.as_str().to_owned(), a.model.clone()))
        .collect();
    let mut report = evaluate(backend, &built, &clusters, &disc.devtest, &bundle.devtest)?;
    let mut rows = Vec::with_capacity(methods.len());
    for m in methods {
        match report.rows.iter().find(|r| r.method == m.as_str()) {
            Some(r) => rows.push(r.clone()),
            None => rows.push(crate::baselines::EvalRow {
                method: m.as_str().to_owned(),
                clusters: vec![None; clusters.len()],
                avg_cluster: None,
                devtest: None,
            }),
        }
    }
    report.rows = rows;
    report.budgets = assembled.iter().map(|a| (a.method.as_str().to_owned(), a.budget)).collect();
    Ok(report)
}
