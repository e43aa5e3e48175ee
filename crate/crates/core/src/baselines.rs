//! Baselines (group DRO reweighing, paraphrasing), final model assembly,
//! ablations and evaluation reports.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, Generator, LabelProvider};
use crate::data::{LabeledExample, Origin};
use crate::embed::tokenize;
use crate::error::{Result, TdgError};
use crate::model::{build_mixture, Classifier, MixtureSpec, ModelVersion, Provenance, ReferenceBackend, Role, TrainParams};
use crate::session::{run_headless_capped, Session, SessionContext, SessionSpec};
use crate::util;

/// Group weights for online group DRO.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupWeightState {
    pub weights: Vec<f64>,
    pub eta: f64,
}

impl GroupWeightState {
    pub fn uniform(n_groups: usize, eta: f64) -> Result<Self> {
        if n_groups == 0 {
            return Err(TdgError::Contract("at least one group required".into()));
        }
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(TdgError::Config(format!("eta must be a non-negative number, got {eta}")));
        }
        Ok(GroupWeightState {
            weights: vec![1.0 / n_groups as f64; n_groups],
            eta,
        })
    }

    /// Multiply each observed group's weight by `exp(eta * loss)` and renormalize.
    /// Groups absent from `losses` keep their relative weight.
    pub fn update(&mut self, losses: &[(usize, f64)]) {
        if self.eta == 0.0 || losses.is_empty() {
            return;
        }
        // Shift by the largest exponent so nothing overflows; it cancels on normalizing.
        let shift = losses.iter().map(|&(_, l)| self.eta * l).fold(0.0, f64::max);
        let mut factor = vec![(-shift).exp(); self.weights.len()];
        for &(g, l) in losses {
            factor[g] = (self.eta * l - shift).exp();
        }
        for (w, f) in self.weights.iter_mut().zip(factor) {
            *w *= f;
        }
        let total: f64 = self.weights.iter().sum();
        if total > 0.0 && total.is_finite() {
            self.weights.iter_mut().for_each(|w| *w /= total);
        } else {
            let n = self.weights.len() as f64;
            self.weights.iter_mut().for_each(|w| *w = 1.0 / n);
        }
    }

    /// `|sum - 1|`, or infinity if any weight is negative or not finite.
    pub fn simplex_error(&self) -> f64 {
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return f64::INFINITY;
        }
        (self.weights.iter().sum::<f64>() - 1.0).abs()
    }

    /// Gradient multiplier for a member of `group`; exactly 1 when `eta` is 0.
    pub fn scale(&self, group: usize) -> f64 {
        if self.eta == 0.0 {
            1.0
        } else {
            self.weights[group] * self.weights.len() as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct GdroOutcome {
    pub version: ModelVersion,
    pub weights: GroupWeightState,
    /// Largest simplex error seen after any update.
    pub max_simplex_error: f64,
    pub updates: usize,
    /// Group id for each dense weight index.
    pub groups: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GdroConfig {
    pub eta: f64,
    pub params: TrainParams,
}

impl Default for GdroConfig {
    fn default() -> Self {
        let mut params = TrainParams::finetune();
        params.batch_size = 16;
        GdroConfig { eta: 0.01, params }
    }
}

/// Fine-tune with the online group DRO objective: per step, observed group
/// losses update the group weights, which then scale each item's gradient.
pub fn gdro_finetune(
    backend: &ReferenceBackend,
    base: &ModelVersion,
    examples: &[LabeledExample],
    groups: &BTreeMap<String, usize>,
    cfg: &GdroConfig,
) -> Result<GdroOutcome> {
    if examples.is_empty() {
        return Err(TdgError::Contract("GDRO on an empty set".into()));
    }
    let mut ids: Vec<usize> = Vec::with_capacity(examples.len());
    for ex in examples {
        let g = groups
            .get(&ex.id)
            .ok_or_else(|| TdgError::Contract(format!("example {} has no group", ex.id)))?;
        ids.push(*g);
    }
    let mut distinct: Vec<usize> = ids.iter().copied().collect::<HashSet<_>>().into_iter().collect();
    distinct.sort_unstable();
    if distinct.len() < 2 {
        tracing::warn!("GDRO with a single group is plain ERM");
    }
    let dense: Vec<usize> = ids
        .iter()
        .map(|g| distinct.binary_search(g).expect("group listed"))
        .collect();
    let items = backend.encode(examples)?;
    let mut state = GroupWeightState::uniform(distinct.len(), cfg.eta)?;
    let mut max_err: f64 = state.simplex_error();
    let mut updates = 0usize;
    let head = ReferenceBackend::train_scaled(base.params.clone(), &items, &cfg.params, &mut |batch, params| {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for &i in batch {
            let it = &items[i];
            let l = -params.probs(&it.x)[it.y].max(1e-300).ln();
            let e = sums.entry(dense[i]).or_insert((0.0, 0));
            e.0 += l;
            e.1 += 1;
        }
        let losses: Vec<(usize, f64)> = sums.into_iter().map(|(g, (s, n))| (g, s / n as f64)).collect();
        state.update(&losses);
        updates += 1;
        max_err = max_err.max(state.simplex_error());
        batch.iter().map(|&i| state.scale(dense[i])).collect()
    });
    let prov = Provenance {
        method: format!("gdro(eta={})", cfg.eta),
        example_ids: examples.iter().map(|e| e.id.clone()).collect(),
        params: cfg.params.clone(),
    };
    Ok(GdroOutcome {
        version: ModelVersion::new(Some(&base.version_id), Role::Global, prov, head),
        weights: state,
        max_simplex_error: max_err,
        updates,
        groups: distinct,
    })
}

/// Label-preserving rewrites of a single example.
pub trait Paraphraser: Send + Sync {
    fn name(&self) -> &str;

    /// A rewrite with the same number of segments, or `None` if this source
    /// cannot be paraphrased under `seed`.
    fn paraphrase(&self, source: &LabeledExample, seed: u64) -> Result<Option<Vec<String>>>;
}

/// Swaps words for synonyms from a table and sometimes adds a discourse opener.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynonymParaphraser {
    pub synonyms: Vec<Vec<String>>,
    pub openers: Vec<String>,
}

impl SynonymParaphraser {
    pub fn new(synonyms: Vec<Vec<String>>) -> Self {
        SynonymParaphraser {
            synonyms,
            openers: ["honestly", "in short", "all in all", "to be fair"].map(String::from).to_vec(),
        }
    }

    fn rewrite_segment(&self, seg: &str, rng: &mut util::Rng) -> String {
        let mut toks = tokenize(seg);
        let slots: Vec<(usize, usize)> = toks
            .iter()
            .enumerate()
            .filter_map(|(i, t)| {
                self.synonyms
                    .iter()
                    .position(|set| set.len() > 1 && set.contains(t))
                    .map(|s| (i, s))
            })
            .collect();
        if let Some(&(i, s)) = slots.choose(rng) {
            let options: Vec<&String> = self.synonyms[s].iter().filter(|w| **w != toks[i]).collect();
            toks[i] = options.choose(rng).expect("set has another word").to_string();
        }
        if (slots.is_empty() || rng.gen_bool(0.3)) && !self.openers.is_empty() {
            toks.insert(0, self.openers.choose(rng).unwrap().clone());
        }
        toks.join(" ")
    }
}

impl Paraphraser for SynonymParaphraser {
    fn name(&self) -> &str {
        "synonym"
    }

    fn paraphrase(&self, source: &LabeledExample, seed: u64) -> Result<Option<Vec<String>>> {
        let mut rng = util::rng(seed);
        let target = rng.gen_range(0..source.segments.len());
        let out: Vec<String> = source
            .segments
            .iter()
            .enumerate()
            .map(|(i, s)| if i == target { self.rewrite_segment(s, &mut rng) } else { s.clone() })
            .collect();
        let unchanged = out
            .iter()
            .zip(&source.segments)
            .all(|(a, b)| tokenize(a) == tokenize(b));
        Ok((!unchanged).then_some(out))
    }
}

/// Paraphrases of `sources` with copied labels, exactly `size` of them.
pub fn paraphrase_baseline(
    sources: &[LabeledExample],
    paraphraser: &dyn Paraphraser,
    size: usize,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    if size == 0 {
        return Ok(Vec::new());
    }
    if sources.is_empty() {
        return Err(TdgError::Contract("paraphrase baseline needs source examples".into()));
    }
    let mut rng = util::rng(util::derive_seed(seed, "paraphrase-order"));
    let mut seen: HashSet<Vec<String>> = sources.iter().map(|s| s.segments.clone()).collect();
    let mut out = Vec::with_capacity(size);
    let max_attempts = size * 50;
    let mut order: Vec<usize> = Vec::new();
    for attempt in 0..max_attempts {
        if out.len() >= size {
            break;
        }
        if order.is_empty() {
            order = (0..sources.len()).collect();
            order.shuffle(&mut rng);
        }
        let src = &sources[order.pop().expect("refilled")];
        let s = util::derive_seed(seed, &format!("paraphrase-{attempt}"));
        match paraphraser.paraphrase(src, s) {
            Ok(Some(segs)) if segs.len() == src.segments.len() && seen.insert(segs.clone()) => {
                let id = format!("para-{seed}-{:05}", out.len());
                out.push(LabeledExample::new(id, segs, src.label.clone()).with_origin(Origin::Paraphrase));
            }
            Ok(_) => {}
            Err(e) => tracing::debug!(source = %src.id, error = %e, "paraphrase skipped"),
        }
    }
    if out.len() < size {
        return Err(TdgError::Size(format!(
            "paraphraser produced {} of {size} examples",
            out.len()
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssemblyMode {
    TdgSingle,
    TdgAll,
}

/// Fine-tune `base` on accepted examples mixed with sampled originals at
/// `ratio` originals per accepted example. `TdgSingle` takes exactly one set.
pub fn assemble_and_finetune<C: Classifier + ?Sized>(
    backend: &C,
    mode: AssemblyMode,
    accepted: &BTreeMap<usize, Vec<LabeledExample>>,
    base: &ModelVersion,
    train: &[LabeledExample],
    ratio: f64,
    params: &TrainParams,
) -> Result<ModelVersion> {
    let pooled: Vec<LabeledExample> = match mode {
        AssemblyMode::TdgSingle => {
            if accepted.len() != 1 {
                return Err(TdgError::Contract(format!(
                    "tdg_single takes one accepted set, got {}",
                    accepted.len()
                )));
            }
            accepted.values().next().expect("one set").clone()
        }
        AssemblyMode::TdgAll => accepted.values().flatten().cloned().collect(),
    };
    if pooled.is_empty() {
        return Err(TdgError::Contract("no accepted examples to assemble".into()));
    }
    if !(ratio >= 0.0 && ratio.is_finite()) {
        return Err(TdgError::Config(format!("ratio must be non-negative, got {ratio}")));
    }
    let mix = build_mixture(&MixtureSpec::ratio(train, &pooled, ratio), params.seed)?;
    backend.finetune(base, &mix, params, Role::Global)
}

/// Fine-tune on cluster originals plus the same number of random train examples.
pub fn ablation_discovery_only<C: Classifier + ?Sized>(
    backend: &C,
    base: &ModelVersion,
    originals: &[LabeledExample],
    train: &[LabeledExample],
    params: &TrainParams,
) -> Result<ModelVersion> {
    if originals.is_empty() {
        return Err(TdgError::Contract("discovery-only ablation needs cluster originals".into()));
    }
    let mix = build_mixture(&MixtureSpec::ratio(train, originals, 1.0), params.seed)?;
    backend.finetune(base, &mix, params, Role::Global)
}

/// Cluster id recorded for sessions that do not belong to a discovered cluster.
pub const ABLATION_CLUSTER: usize = usize::MAX;

/// Augmentation loop seeded from `n_seed` random dev examples, stopped once
/// `tdg_size` examples are accepted. Returns the accepted set.
#[allow(clippy::too_many_arguments)]
pub fn ablation_augmentation_only(
    backend: &dyn Classifier,
    generator: &dyn Generator,
    labeler: &dyn LabelProvider,
    target: &ModelVersion,
    train: &[LabeledExample],
    dev: &[LabeledExample],
    n_seed: usize,
    tdg_size: Option<usize>,
    config: &AugmentConfig,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    let size = tdg_size.ok_or_else(|| TdgError::Contract("augmentation-only ablation needs the TDG set size".into()))?;
    if n_seed == 0 || n_seed > dev.len() {
        return Err(TdgError::Size(format!("cannot seed from {n_seed} of {} dev examples", dev.len())));
    }
    let mut rng = util::rng(util::derive_seed(seed, "ablation-seed-pool"));
    let mut idx: Vec<usize> = (0..dev.len()).collect();
    idx.shuffle(&mut rng);
    let mut chosen = idx[..n_seed].to_vec();
    chosen.sort_unstable();
    let originals: Vec<LabeledExample> = chosen.into_iter().map(|i| dev[i].clone()).collect();
    let ctx = SessionContext {
        backend,
        generator,
        train,
        target,
    };
    let spec = SessionSpec {
        session_id: format!("ablation-{seed}"),
        cluster_id: ABLATION_CLUSTER,
        seed,
        config: config.clone(),
        originals,
        target_version: target.version_id.clone(),
        generator: generator.name().to_owned(),
    };
    let mut session = Session::create(&ctx, spec, None)?;
    run_headless_capped(&ctx, &mut session, labeler, Some(size))?;
    let mut accepted = session.accepted;
    accepted.truncate(size);
    Ok(accepted)
}

/// A method's model: one shared model, or one per cluster (tdg_single).
#[derive(Debug, Clone)]
pub enum MethodModel {
    Shared(ModelVersion),
    PerCluster(BTreeMap<usize, ModelVersion>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterColumn {
    /// 1-based rank by original error.
    pub rank: usize,
    pub cluster_id: Option<usize>,
    pub devtest_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    /// Accuracy in [0, 1] per cluster column; `None` is n/a.
    pub clusters: Vec<Option<f64>>,
    pub avg_cluster: Option<f64>,
    pub devtest: Option<f64>,
}

impl EvalRow {
    fn new(method: String, clusters: Vec<Option<f64>>, devtest: Option<f64>) -> Self {
        let present: Vec<f64> = clusters.iter().flatten().copied().collect();
        let avg_cluster = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
        EvalRow {
            method,
            clusters,
            avg_cluster,
            devtest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub columns: Vec<ClusterColumn>,
    pub rows: Vec<EvalRow>,
    /// Example budgets per method, for size-fairness checks.
    #[serde(default)]
    pub budgets: BTreeMap<String, usize>,
}

/// Accuracy of every method on the devtest members of each cluster and on the
/// whole devtest split. `clusters` is ordered by original error rank.
pub fn evaluate<C: Classifier + ?Sized>(
    backend: &C,
    methods: &[(String, MethodModel)],
    clusters: &[usize],
    assignment: &BTreeMap<String, usize>,
    devtest: &[LabeledExample],
) -> Result<EvalReport> {
    if devtest.iter().any(|e| !assignment.contains_key(&e.id)) {
        return Err(TdgError::Contract("devtest assignment is incomplete".into()));
    }
    let members: Vec<Vec<LabeledExample>> = clusters
        .iter()
        .map(|c| devtest.iter().filter(|e| assignment[&e.id] == *c).cloned().collect())
        .collect();
    let columns = clusters
        .iter()
        .zip(&members)
        .enumerate()
        .map(|(i, (c, m))| ClusterColumn {
            rank: i + 1,
            cluster_id: Some(*c),
            devtest_size: m.len(),
        })
        .collect();
    let mut rows = Vec::with_capacity(methods.len());
    for (name, model) in methods {
        let mut cells = Vec::with_capacity(clusters.len());
        for (c, m) in clusters.iter().zip(&members) {
            let version = match model {
                MethodModel::Shared(v) => Some(v),
                MethodModel::PerCluster(map) => map.get(c),
            };
            cells.push(match version {
                Some(v) if !m.is_empty() => Some(backend.accuracy(v, m)?),
                _ => None,
            });
        }
        let dt = match model {
            MethodModel::Shared(v) => Some(backend.accuracy(v, devtest)?),
            MethodModel::PerCluster(_) => None,
        };
        rows.push(EvalRow::new(name.clone(), cells, dt));
    }
    Ok(EvalReport {
        columns,
        rows,
        budgets: BTreeMap::new(),
    })
}

impl EvalReport {
    pub fn row(&self, method: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Aligned text table with accuracies in percent.
    pub fn render_text(&self) -> String {
        let mut header = vec!["method".to_string()];
        header.extend(self.columns.iter().map(|c| ordinal(c.rank)));
        header.push("avg cluster".into());
        header.push("devtest".into());
        let cell = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}", 100.0 * x));
        let mut table = vec![header];
        for r in &self.rows {
            let mut line = vec![r.method.clone()];
            line.extend(r.clusters.iter().map(|v| cell(*v)));
            line.push(cell(r.avg_cluster));
            line.push(r.devtest.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x)));
            table.push(line);
        }
        let widths: Vec<usize> = (0..table[0].len())
            .map(|j| table.iter().map(|l| l[j].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, line) in table.iter().enumerate() {
            let cells: Vec<String> = line
                .iter()
                .enumerate()
                .map(|(j, c)| if j == 0 { format!("{c:<w$}", w = widths[j]) } else { format!("{c:>w$}", w = widths[j]) })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            if i == 0 {
                let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            }
        }
        out
    }
}

fn ordinal(n: usize) -> String {
    let suffix = match (n % 10, n % 100) {
        (1, 11) | (2, 12) | (3, 13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{n}{suffix}")
}

/// Per-seed reports with cellwise means and standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub per_seed: Vec<EvalReport>,
    /// Cellwise mean over seeds that have the cell; the average column is
    /// recomputed from the mean cells.
    pub mean: EvalReport,
    pub std: EvalReport,
}

impl SeedSummary {
    pub fn new(seeds: Vec<u64>, per_seed: Vec<EvalReport>) -> Result<Self> {
        let Some(first) = per_seed.first() else {
            return Err(TdgError::Contract("no per-seed reports".into()));
        };
        if seeds.len() != per_seed.len() {
            return Err(TdgError::Contract("one report per seed required".into()));
        }
        // Seeds may keep fewer clusters; missing columns count as n/a.
        let n_cols = per_seed.iter().map(|r| r.columns.len()).max().unwrap_or(0);
        let methods: Vec<String> = first.rows.iter().map(|r| r.method.clone()).collect();
        for r in &per_seed {
            if r.rows.iter().map(|x| &x.method).ne(methods.iter()) {
                return Err(TdgError::Contract("per-seed reports list different methods".into()));
            }
        }
        let stat = |vals: Vec<f64>, f: fn(&[f64]) -> f64| (!vals.is_empty()).then(|| f(&vals));
        let columns: Vec<ClusterColumn> = (0..n_cols)
            .map(|j| {
                let sizes: Vec<usize> = per_seed.iter().filter_map(|r| r.columns.get(j)).map(|c| c.devtest_size).collect();
                ClusterColumn {
                    rank: j + 1,
                    cluster_id: None,
                    devtest_size: sizes.iter().sum::<usize>() / sizes.len().max(1),
                }
            })
            .collect();
        let mut mean_rows = Vec::new();
        let mut std_rows = Vec::new();
        for (i, m) in methods.iter().enumerate() {
            let cell_vals = |j: usize| -> Vec<f64> {
                per_seed.iter().filter_map(|r| r.rows[i].clusters.get(j).copied().flatten()).collect()
            };
            let dt_vals: Vec<f64> = per_seed.iter().filter_map(|r| r.rows[i].devtest).collect();
            mean_rows.push(EvalRow::new(
                m.clone(),
                (0..n_cols).map(|j| stat(cell_vals(j), util::mean)).collect(),
                stat(dt_vals.clone(), util::mean),
            ));
            let avg_vals: Vec<f64> = per_seed.iter().filter_map(|r| r.rows[i].avg_cluster).collect();
            std_rows.push(EvalRow {
                method: m.clone(),
                clusters: (0..n_cols).map(|j| stat(cell_vals(j), util::std_dev)).collect(),
                avg_cluster: stat(avg_vals, util::std_dev),
                devtest: stat(dt_vals, util::std_dev),
            });
        }
        let budgets = first.budgets.clone();
        Ok(SeedSummary {
            seeds,
            mean: EvalReport {
                columns: columns.clone(),
                rows: mean_rows,
                budgets: budgets.clone(),
            },
            std: EvalReport {
                columns,
                rows: std_rows,
                budgets,
            },
            per_seed,
        })
    }
}
