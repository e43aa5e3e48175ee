//! Classifier contract, the reference linear backend, model lineage and mixtures.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{LabelSpace, LabeledExample};
use crate::embed::{HashingEmbedder, SparseVec};
use crate::error::{Result, TdgError};
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Global,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedLayer {
    /// Task-shaped representation (penultimate layer for deep backends).
    Penultimate,
    /// Task-agnostic sentence embedding.
    Generic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
    /// Hard cap on optimizer steps. `Some(0)` makes fine-tuning a no-op.
    pub max_steps: Option<usize>,
    /// Fraction of the training multiset held out for early stopping; 0 disables it.
    pub early_stop_fraction: f64,
    /// Decay the rate linearly to zero over the planned steps.
    pub linear_decay: bool,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams::target()
    }
}

impl TrainParams {
    /// Defaults for training a target model from scratch.
    pub fn target() -> Self {
        TrainParams {
            epochs: 20,
            learning_rate: 0.5,
            batch_size: 16,
            l2: 1e-4,
            seed: 0,
            max_steps: None,
            early_stop_fraction: 0.0,
            linear_decay: false,
        }
    }

    /// Defaults for continued training: 3 passes, fixed rate, 10% early-stop holdout.
    pub fn finetune() -> Self {
        TrainParams {
            epochs: 3,
            learning_rate: 0.5,
            batch_size: 1,
            l2: 1e-4,
            seed: 0,
            max_steps: None,
            early_stop_fraction: 0.1,
            linear_decay: false,
        }
    }

    /// Longer continued training used for augmentation and assembly updates.
    pub fn augment() -> Self {
        TrainParams {
            epochs: 10,
            learning_rate: 0.5,
            batch_size: 1,
            l2: 1e-4,
            seed: 0,
            max_steps: None,
            early_stop_fraction: 0.0,
            linear_decay: true,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.max_steps = Some(steps);
        self
    }
}

/// Enough to re-train a version given the referenced examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    /// Training multiset in the order it was fed to the optimizer.
    pub example_ids: Vec<String>,
    pub params: TrainParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub dim: usize,
    pub n_labels: usize,
    /// Row-major `[label][feature]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(n_labels: usize, dim: usize) -> Self {
        HeadParams {
            dim,
            n_labels,
            weights: vec![0.0; n_labels * dim],
            bias: vec![0.0; n_labels],
        }
    }

    pub fn row(&self, label: usize) -> &[f64] {
        &self.weights[label * self.dim..(label + 1) * self.dim]
    }

    pub fn logits(&self, x: &SparseVec) -> Vec<f64> {
        (0..self.n_labels)
            .map(|c| self.bias[c] + x.dot(self.row(c)))
            .collect()
    }

    pub fn probs(&self, x: &SparseVec) -> Vec<f64> {
        softmax(&self.logits(x))
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVersion {
    pub version_id: String,
    pub parent_id: Option<String>,
    pub role: Role,
    pub provenance: Provenance,
    pub params: HeadParams,
}

impl ModelVersion {
    fn derive_id(parent: Option<&str>, role: Role, prov: &Provenance) -> String {
        let mut h = Sha256::new();
        h.update(parent.unwrap_or("-").as_bytes());
        h.update([0u8]);
        h.update(format!("{role:?}").as_bytes());
        h.update([0u8]);
        h.update(serde_json::to_vec(prov).expect("provenance serializes"));
        hex::encode(&h.finalize()[..8])
    }

    pub fn new(parent: Option<&str>, role: Role, provenance: Provenance, params: HeadParams) -> Self {
        ModelVersion {
            version_id: Self::derive_id(parent, role, &provenance),
            parent_id: parent.map(str::to_owned),
            role,
            provenance,
            params,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    pub scores: Vec<f64>,
}

impl Prediction {
    pub fn score_of(&self, space: &LabelSpace, label: &str) -> f64 {
        space.index_of(label).map(|i| self.scores[i]).unwrap_or(0.0)
    }
}

/// What every classifier backend provides. Heavy backends plug in behind this.
pub trait Classifier: Send + Sync {
    fn label_space(&self) -> &LabelSpace;

    fn fit(&self, examples: &[LabeledExample], params: &TrainParams) -> Result<ModelVersion>;

    fn finetune(
        &self,
        base: &ModelVersion,
        examples: &[LabeledExample],
        params: &TrainParams,
        role: Role,
    ) -> Result<ModelVersion>;

    fn predict_texts(&self, version: &ModelVersion, texts: &[String]) -> Result<Vec<Prediction>>;

    fn embed_texts(
        &self,
        version: Option<&ModelVersion>,
        texts: &[String],
        layer: EmbedLayer,
    ) -> Result<Vec<Vec<f64>>>;

    fn predict(&self, version: &ModelVersion, examples: &[LabeledExample]) -> Result<Vec<Prediction>> {
        let texts: Vec<String> = examples.iter().map(LabeledExample::text).collect();
        self.predict_texts(version, &texts)
    }

    fn predict_labels(&self, version: &ModelVersion, examples: &[LabeledExample]) -> Result<Vec<String>> {
        Ok(self.predict(version, examples)?.into_iter().map(|p| p.label).collect())
    }

    fn accuracy(&self, version: &ModelVersion, examples: &[LabeledExample]) -> Result<f64> {
        let preds = self.predict_labels(version, examples)?;
        crate::data::accuracy(&preds, examples)
    }
}

/// Frozen hashing features plus a trainable multinomial logistic head.
#[derive(Debug, Clone)]
pub struct ReferenceBackend {
    pub embedder: HashingEmbedder,
    label_space: LabelSpace,
}

/// One encoded training item.
#[derive(Debug, Clone)]
pub(crate) struct Encoded {
    pub x: SparseVec,
    pub y: usize,
    pub weight: f64,
}

impl ReferenceBackend {
    pub fn new(embedder: HashingEmbedder, label_space: LabelSpace) -> Self {
        ReferenceBackend {
            embedder,
            label_space,
        }
    }

    pub(crate) fn encode(&self, examples: &[LabeledExample]) -> Result<Vec<Encoded>> {
        examples
            .iter()
            .map(|ex| {
                let y = self.label_space.index_of(&ex.label).ok_or_else(|| {
                    TdgError::Integrity(format!(
                        "example {} has label {:?} outside the label space",
                        ex.id, ex.label
                    ))
                })?;
                Ok(Encoded {
                    x: self.embedder.embed_sparse(&ex.text()),
                    y,
                    weight: ex.weight,
                })
            })
            .collect()
    }

    /// Per-label logit contributions of each feature: `[w_c ⊙ x for c in labels]`.
    pub fn task_features(&self, params: &HeadParams, text: &str) -> Vec<f64> {
        let x = self.embedder.embed_sparse(text);
        let mut out = vec![0.0; params.n_labels * params.dim];
        for c in 0..params.n_labels {
            let row = params.row(c);
            for &(i, v) in &x.entries {
                out[c * params.dim + i] = row[i] * v;
            }
        }
        out
    }

    /// Mean cross-entropy of `params` on encoded items.
    pub(crate) fn loss(params: &HeadParams, items: &[Encoded]) -> f64 {
        if items.is_empty() {
            return 0.0;
        }
        items
            .iter()
            .map(|it| -params.probs(&it.x)[it.y].max(1e-300).ln())
            .sum::<f64>()
            / items.len() as f64
    }

    /// One SGD step on a batch. `scale[i]` multiplies item `i`'s gradient.
    pub(crate) fn sgd_step(params: &mut HeadParams, batch: &[&Encoded], scale: &[f64], lr: f64, l2: f64) {
        if batch.is_empty() {
            return;
        }
        let n = batch.len() as f64;
        if l2 > 0.0 {
            let decay = 1.0 - lr * l2;
            params.weights.iter_mut().for_each(|w| *w *= decay);
        }
        let mut grads: Vec<(usize, Vec<f64>)> = Vec::with_capacity(batch.len());
        for (k, it) in batch.iter().enumerate() {
            let p = params.probs(&it.x);
            let coef = it.weight * scale[k] / n;
            let g: Vec<f64> = (0..params.n_labels)
                .map(|c| coef * (p[c] - if c == it.y { 1.0 } else { 0.0 }))
                .collect();
            grads.push((k, g));
        }
        for (k, g) in grads {
            let x = &batch[k].x;
            for (c, gc) in g.iter().enumerate() {
                params.bias[c] -= lr * gc;
                let row = &mut params.weights[c * params.dim..(c + 1) * params.dim];
                for &(i, v) in &x.entries {
                    row[i] -= lr * gc * v;
                }
            }
        }
    }

    /// Minibatch SGD with optional early stopping. Returns the trained params.
    fn train(&self, params: HeadParams, items: Vec<Encoded>, tp: &TrainParams) -> HeadParams {
        Self::train_scaled(params, &items, tp, &mut |batch, _| vec![1.0; batch.len()])
    }

    /// Training loop shared by ERM and reweighted objectives. `scale` sees the
    /// batch's item indices and the current params and returns one gradient
    /// multiplier per item.
    pub(crate) fn train_scaled(
        mut params: HeadParams,
        items: &[Encoded],
        tp: &TrainParams,
        scale: &mut dyn FnMut(&[usize], &HeadParams) -> Vec<f64>,
    ) -> HeadParams {
        if tp.max_steps == Some(0) || items.is_empty() {
            return params;
        }
        let mut rng = util::rng(util::derive_seed(tp.seed, "train-order"));
        let mut order: Vec<usize> = (0..items.len()).collect();
        let (fit_idx, holdout_idx) = if tp.early_stop_fraction > 0.0 && items.len() >= 10 {
            order.shuffle(&mut rng);
            let h = ((tp.early_stop_fraction * items.len() as f64).ceil() as usize).min(items.len() - 1);
            let mut hold = order[..h].to_vec();
            let mut fit = order[h..].to_vec();
            hold.sort_unstable();
            fit.sort_unstable();
            (fit, hold)
        } else {
            (order, Vec::new())
        };
        let holdout: Vec<Encoded> = holdout_idx.iter().map(|&i| items[i].clone()).collect();
        let mut best_loss = f64::INFINITY;
        let mut steps = 0usize;
        let bs = tp.batch_size.max(1);
        let mut planned = tp.epochs * fit_idx.len().div_ceil(bs);
        if let Some(cap) = tp.max_steps {
            planned = planned.min(cap);
        }
        'outer: for _epoch in 0..tp.epochs {
            let snapshot = params.clone();
            let mut epoch_order = fit_idx.clone();
            epoch_order.shuffle(&mut rng);
            for chunk in epoch_order.chunks(bs) {
                if let Some(cap) = tp.max_steps {
                    if steps >= cap {
                        break 'outer;
                    }
                }
                let batch: Vec<&Encoded> = chunk.iter().map(|&i| &items[i]).collect();
                let scales = scale(chunk, &params);
                let lr = if tp.linear_decay {
                    tp.learning_rate * (1.0 - steps as f64 / planned.max(1) as f64)
                } else {
                    tp.learning_rate
                };
                Self::sgd_step(&mut params, &batch, &scales, lr, tp.l2);
                steps += 1;
            }
            if !holdout.is_empty() {
                let l = Self::loss(&params, &holdout);
                if l > best_loss {
                    params = snapshot;
                    break;
                }
                best_loss = l;
            }
        }
        params
    }

    fn check_trainable(&self, examples: &[LabeledExample]) -> Result<()> {
        if examples.is_empty() {
            return Err(TdgError::Training("empty training set".into()));
        }
        let first = &examples[0].label;
        if examples.iter().all(|e| &e.label == first) {
            return Err(TdgError::Training(format!(
                "training set has a single label {first:?}"
            )));
        }
        Ok(())
    }

    /// Re-train a version from its provenance.
    pub fn replay(
        &self,
        version: &ModelVersion,
        parent: Option<&ModelVersion>,
        lookup: &HashMap<String, LabeledExample>,
    ) -> Result<ModelVersion> {
        let examples: Vec<LabeledExample> = version
            .provenance
            .example_ids
            .iter()
            .map(|id| {
                lookup
                    .get(id)
                    .cloned()
                    .ok_or_else(|| TdgError::NotFound(format!("example {id} for replay")))
            })
            .collect::<Result<_>>()?;
        match parent {
            None => self.fit(&examples, &version.provenance.params),
            Some(p) => self.finetune(p, &examples, &version.provenance.params, version.role),
        }
    }
}

impl Classifier for ReferenceBackend {
    fn label_space(&self) -> &LabelSpace {
        &self.label_space
    }

    fn fit(&self, examples: &[LabeledExample], params: &TrainParams) -> Result<ModelVersion> {
        self.check_trainable(examples)?;
        let items = self.encode(examples)?;
        let head = self.train(
            HeadParams::zeros(self.label_space.len(), self.embedder.dim),
            items,
            params,
        );
        let prov = Provenance {
            method: "fit".into(),
            example_ids: examples.iter().map(|e| e.id.clone()).collect(),
            params: params.clone(),
        };
        Ok(ModelVersion::new(None, Role::Global, prov, head))
    }

    fn finetune(
        &self,
        base: &ModelVersion,
        examples: &[LabeledExample],
        params: &TrainParams,
        role: Role,
    ) -> Result<ModelVersion> {
        if examples.is_empty() {
            return Err(TdgError::Contract("fine-tuning on an empty mixture".into()));
        }
        let items = self.encode(examples)?;
        let head = self.train(base.params.clone(), items, params);
        let prov = Provenance {
            method: "finetune".into(),
            example_ids: examples.iter().map(|e| e.id.clone()).collect(),
            params: params.clone(),
        };
        Ok(ModelVersion::new(Some(&base.version_id), role, prov, head))
    }

    fn predict_texts(&self, version: &ModelVersion, texts: &[String]) -> Result<Vec<Prediction>> {
        if version.params.dim != self.embedder.dim || version.params.n_labels != self.label_space.len() {
            return Err(TdgError::Contract(format!(
                "model {} has shape {}x{}, backend expects {}x{}",
                version.version_id,
                version.params.n_labels,
                version.params.dim,
                self.label_space.len(),
                self.embedder.dim
            )));
        }
        Ok(texts
            .iter()
            .map(|t| {
                let scores = version.params.probs(&self.embedder.embed_sparse(t));
                // First maximum wins so ties resolve by label order.
                let mut best = 0;
                for (i, s) in scores.iter().enumerate() {
                    if *s > scores[best] {
                        best = i;
                    }
                }
                Prediction {
                    label: self.label_space.label(best).to_owned(),
                    scores,
                }
            })
            .collect())
    }

    fn embed_texts(
        &self,
        version: Option<&ModelVersion>,
        texts: &[String],
        layer: EmbedLayer,
    ) -> Result<Vec<Vec<f64>>> {
        match layer {
            EmbedLayer::Generic => Ok(texts.iter().map(|t| self.embedder.embed(t)).collect()),
            EmbedLayer::Penultimate => {
                let v = version.ok_or_else(|| {
                    TdgError::Contract("task representation requires a model version".into())
                })?;
                Ok(texts.iter().map(|t| self.task_features(&v.params, t)).collect())
            }
        }
    }
}

/// How much of the base set goes into a mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseSample {
    /// `⌈fraction·|base|⌉` examples, fraction in (0, 1].
    Fraction(f64),
    /// An exact count; sampled with reshuffled repeats if it exceeds `|base|`.
    Count(usize),
}

#[derive(Debug, Clone)]
pub struct MixtureSpec<'a> {
    pub base: &'a [LabeledExample],
    pub boost: &'a [LabeledExample],
    pub boost_repeat: usize,
    pub base_sample: BaseSample,
}

impl<'a> MixtureSpec<'a> {
    /// Plain concatenation of base and boost.
    pub fn concat(base: &'a [LabeledExample], boost: &'a [LabeledExample]) -> Self {
        MixtureSpec {
            base,
            boost,
            boost_repeat: 1,
            base_sample: BaseSample::Fraction(1.0),
        }
    }

    /// Originals sampled at `ratio` times the boost size (anti-forgetting mix).
    pub fn ratio(base: &'a [LabeledExample], boost: &'a [LabeledExample], ratio: f64) -> Self {
        MixtureSpec {
            base,
            boost,
            boost_repeat: 1,
            base_sample: BaseSample::Count((ratio * boost.len() as f64).round() as usize),
        }
    }

    pub fn base_count(&self) -> Result<usize> {
        match self.base_sample {
            BaseSample::Fraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(TdgError::Config(format!(
                        "base_sample_fraction must be in (0, 1], got {f}"
                    )));
                }
                // Guard against 0.3*100 = 30.000000000000004 rounding up.
                Ok(((f * self.base.len() as f64) - 1e-9).ceil().max(0.0) as usize)
            }
            BaseSample::Count(n) => Ok(n),
        }
    }

    pub fn expected_len(&self) -> Result<usize> {
        Ok(self.base_count()? + self.boost_repeat * self.boost.len())
    }
}

/// Deterministic mixture multiset: sampled base first, then each boost example `boost_repeat` times.
pub fn build_mixture(spec: &MixtureSpec<'_>, seed: u64) -> Result<Vec<LabeledExample>> {
    if spec.boost_repeat > 0 && spec.boost.is_empty() {
        return Err(TdgError::Contract("boost set is empty but boost_repeat > 0".into()));
    }
    let want = spec.base_count()?;
    if want > 0 && spec.base.is_empty() {
        return Err(TdgError::Contract("cannot sample from an empty base set".into()));
    }
    let mut rng = util::rng(util::derive_seed(seed, "mixture"));
    let mut out = Vec::with_capacity(want + spec.boost_repeat * spec.boost.len());
    let mut remaining = want;
    while remaining > 0 {
        let mut idx: Vec<usize> = (0..spec.base.len()).collect();
        idx.shuffle(&mut rng);
        let take = remaining.min(idx.len());
        let mut chosen = idx[..take].to_vec();
        chosen.sort_unstable();
        out.extend(chosen.into_iter().map(|i| spec.base[i].clone()));
        remaining -= take;
    }
    for _ in 0..spec.boost_repeat {
        out.extend(spec.boost.iter().cloned());
    }
    Ok(out)
}

/// Convenience: build the mixture and fine-tune `base` on it.
pub fn finetune_on_mixture<C: Classifier + ?Sized>(
    backend: &C,
    base: &ModelVersion,
    mixture: &[LabeledExample],
    params: &TrainParams,
) -> Result<ModelVersion> {
    backend.finetune(base, mixture, params, base.role)
}

/// Store of model versions keyed by id. Parents must be inserted first.
#[derive(Debug, Clone, Default)]
pub struct LineageStore {
    versions: BTreeMap<String, Arc<ModelVersion>>,
}

impl LineageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, version: ModelVersion) -> Result<Arc<ModelVersion>> {
        if let Some(p) = &version.parent_id {
            if !self.versions.contains_key(p) {
                return Err(TdgError::Integrity(format!(
                    "parent {p} of {} is not in the lineage store",
                    version.version_id
                )));
            }
        }
        let id = version.version_id.clone();
        let arc = Arc::new(version);
        self.versions.entry(id).or_insert_with(|| arc.clone());
        Ok(arc)
    }

    pub fn get(&self, id: &str) -> Option<Arc<ModelVersion>> {
        self.versions.get(id).cloned()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.versions.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.versions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.versions.is_empty()
    }

    /// Ancestors from `id` back to the root, `id` first.
    pub fn ancestry(&self, id: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut cur = self.versions.get(id).cloned();
        while let Some(v) = cur {
            out.push(v.version_id.clone());
            cur = v.parent_id.as_ref().and_then(|p| self.versions.get(p).cloned());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Origin;
    use std::collections::HashMap;

    fn space() -> LabelSpace {
        LabelSpace::new(["pos", "neg"]).unwrap()
    }

    /// Linearly separable: label is determined by one of two disjoint word pools.
    fn separable(n: usize, seed: u64) -> Vec<LabeledExample> {
        use rand::Rng;
        let pos = ["good", "great", "fine", "lovely", "superb"];
        let neg = ["bad", "awful", "poor", "dull", "horrid"];
        let fill = ["the", "film", "was", "plot", "actor", "really", "quite"];
        let mut rng = util::rng(seed);
        (0..n)
            .map(|i| {
                let is_pos = i % 2 == 0;
                let pool = if is_pos { &pos } else { &neg };
                let text = format!(
                    "{} {} {} {}",
                    fill[rng.gen_range(0..fill.len())],
                    fill[rng.gen_range(0..fill.len())],
                    pool[rng.gen_range(0..pool.len())],
                    fill[rng.gen_range(0..fill.len())]
                );
                LabeledExample::new(format!("s{seed}-{i}"), vec![text], if is_pos { "pos" } else { "neg" })
            })
            .collect()
    }

    fn backend() -> ReferenceBackend {
        ReferenceBackend::new(HashingEmbedder::new(256), space())
    }

    #[test]
    fn separable_train_accuracy_high() {
        let b = backend();
        let train = separable(200, 1);
        let m = b.fit(&train, &TrainParams::target()).unwrap();
        assert_eq!(m.role, Role::Global);
        assert!(m.parent_id.is_none());
        assert!(b.accuracy(&m, &train).unwrap() >= 0.95);
    }

    #[test]
    fn single_label_is_training_error() {
        let b = backend();
        let train: Vec<_> = separable(20, 1).into_iter().filter(|e| e.label == "pos").collect();
        assert!(matches!(b.fit(&train, &TrainParams::target()), Err(TdgError::Training(_))));
    }

    #[test]
    fn identical_seeds_identical_predictions() {
        let b = backend();
        let train = separable(100, 2);
        let probe = separable(30, 9);
        let p = TrainParams::target().with_seed(5);
        let a = b.fit(&train, &p).unwrap();
        let c = b.fit(&train, &p).unwrap();
        assert_eq!(a.version_id, c.version_id);
        assert_eq!(b.predict(&a, &probe).unwrap(), b.predict(&c, &probe).unwrap());
    }

    #[test]
    fn scores_are_normalized() {
        let b = backend();
        let m = b.fit(&separable(60, 3), &TrainParams::target()).unwrap();
        for p in b.predict(&m, &separable(40, 4)).unwrap() {
            assert_eq!(p.scores.len(), 2);
            assert!((p.scores.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_step_finetune_is_identity() {
        let b = backend();
        let m = b.fit(&separable(100, 5), &TrainParams::target()).unwrap();
        let probe = separable(50, 6);
        let flipped: Vec<_> = separable(40, 7)
            .into_iter()
            .map(|mut e| {
                e.label = if e.label == "pos" { "neg".into() } else { "pos".into() };
                e
            })
            .collect();
        let m2 = b
            .finetune(&m, &flipped, &TrainParams::finetune().with_steps(0), Role::Global)
            .unwrap();
        assert_eq!(m2.parent_id.as_deref(), Some(m.version_id.as_str()));
        assert_eq!(b.predict(&m, &probe).unwrap(), b.predict(&m2, &probe).unwrap());
    }

    #[test]
    fn finetune_rejects_foreign_labels() {
        let b = backend();
        let m = b.fit(&separable(40, 1), &TrainParams::target()).unwrap();
        let bad = vec![LabeledExample::new("z", vec!["x".into()], "maybe")];
        assert!(matches!(
            b.finetune(&m, &bad, &TrainParams::finetune(), Role::Global),
            Err(TdgError::Integrity(_))
        ));
    }

    #[test]
    fn provenance_replay_reproduces_predictions() {
        let b = backend();
        let train = separable(120, 11);
        let extra = separable(30, 12);
        let m = b.fit(&train, &TrainParams::target().with_seed(3)).unwrap();
        let mix = build_mixture(&MixtureSpec::concat(&train, &extra), 4).unwrap();
        let m2 = b.finetune(&m, &mix, &TrainParams::finetune().with_seed(8), Role::Global).unwrap();
        let lookup: HashMap<String, LabeledExample> =
            train.iter().chain(&extra).map(|e| (e.id.clone(), e.clone())).collect();
        let r1 = b.replay(&m, None, &lookup).unwrap();
        let r2 = b.replay(&m2, Some(&r1), &lookup).unwrap();
        assert_eq!(r2.version_id, m2.version_id);
        let probe = separable(25, 13);
        assert_eq!(b.predict(&m2, &probe).unwrap(), b.predict(&r2, &probe).unwrap());
    }

    #[test]
    fn task_features_sum_to_logits_minus_bias() {
        let b = backend();
        let m = b.fit(&separable(80, 1), &TrainParams::target()).unwrap();
        let text = "the film was great";
        let f = b.task_features(&m.params, text);
        let x = b.embedder.embed_sparse(text);
        let logits = m.params.logits(&x);
        for c in 0..2 {
            let s: f64 = f[c * 256..(c + 1) * 256].iter().sum();
            assert!((s + m.params.bias[c] - logits[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_sizes_and_multiplicity() {
        let base = separable(100, 1);
        let boost = separable(10, 2);
        let m = build_mixture(&MixtureSpec::concat(&base, &boost), 0).unwrap();
        assert_eq!(m.len(), 110);

        let boost4 = &boost[..4];
        let spec = MixtureSpec {
            base: &base,
            boost: boost4,
            boost_repeat: 3,
            base_sample: BaseSample::Fraction(0.3),
        };
        let m = build_mixture(&spec, 0).unwrap();
        assert_eq!(m.len(), spec.expected_len().unwrap());
        assert_eq!(m.len(), 30 + 12);
        for b in boost4 {
            assert_eq!(m.iter().filter(|e| e.id == b.id).count(), 3);
        }

        let responses: Vec<_> = separable(50, 3)
            .into_iter()
            .map(|e| e.with_origin(Origin::Generated))
            .collect();
        let m = build_mixture(&MixtureSpec::ratio(&base, &responses, 2.0), 0).unwrap();
        assert_eq!(m.iter().filter(|e| e.origin == Origin::Original).count(), 100);
        assert_eq!(m.len(), 150);
    }

    #[test]
    fn mixture_fraction_out_of_range() {
        let base = separable(10, 1);
        let boost = separable(2, 2);
        for f in [0.0, -0.5, 1.5] {
            let spec = MixtureSpec {
                base: &base,
                boost: &boost,
                boost_repeat: 1,
                base_sample: BaseSample::Fraction(f),
            };
            assert!(matches!(build_mixture(&spec, 0), Err(TdgError::Config(_))));
        }
    }

    #[test]
    fn mixture_is_deterministic() {
        let base = separable(50, 1);
        let boost = separable(5, 2);
        let spec = MixtureSpec::ratio(&base, &boost, 1.0);
        assert_eq!(build_mixture(&spec, 9).unwrap(), build_mixture(&spec, 9).unwrap());
    }

    #[test]
    fn lineage_requires_parent() {
        let b = backend();
        let m = b.fit(&separable(40, 1), &TrainParams::target()).unwrap();
        let child = b
            .finetune(&m, &separable(10, 2), &TrainParams::finetune(), Role::Local)
            .unwrap();
        let mut store = LineageStore::new();
        assert!(store.insert(child.clone()).is_err());
        store.insert(m.clone()).unwrap();
        store.insert(child.clone()).unwrap();
        assert_eq!(store.ancestry(&child.version_id), vec![child.version_id.clone(), m.version_id.clone()]);
    }
}
