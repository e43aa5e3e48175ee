//! The targeted augmentation loop for one cluster: propose candidates, rank
//! them by local/global disagreement, collect labels, update both models and
//! stop once they agree on the cluster.

pub mod generator;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::data::{LabelSpace, LabeledExample, Origin};
use crate::error::{Result, TdgError};
use crate::model::{build_mixture, Classifier, MixtureSpec, ModelVersion, Prediction, Role, TrainParams};
use crate::synthetic::SyntheticOracle;

pub use generator::{Generator, LlmConfig, LlmGenerator, TemplateGenerator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Agreement rate required to converge.
    pub tau: f64,
    /// Window of agreement checks.
    pub window: usize,
    pub max_proposals: usize,
    pub max_labels: usize,
    pub max_global_updates: usize,
    /// Suggestions per round.
    pub batch: usize,
    /// Accepted examples between global updates in headless runs.
    pub global_every: usize,
    /// Originals per accepted example in global updates.
    pub ratio: f64,
    pub local_params: TrainParams,
    pub global_params: TrainParams,
    /// Rounds without a single new candidate before the loop gives up.
    pub max_idle_rounds: usize,
    /// Off keeps a session running until a budget or size cap ends it.
    pub stop_on_convergence: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            tau: 0.9,
            window: 20,
            max_proposals: 200,
            max_labels: 100,
            max_global_updates: 10,
            batch: 8,
            global_every: 10,
            ratio: 1.0,
            // The local model should fit its few examples, so no decay.
            local_params: TrainParams {
                linear_decay: false,
                ..TrainParams::augment()
            },
            global_params: TrainParams::augment(),
            max_idle_rounds: 3,
            stop_on_convergence: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(TdgError::Config(format!("tau must be in (0, 1], got {}", self.tau)));
        }
        if self.window == 0 || self.batch == 0 || self.global_every == 0 {
            return Err(TdgError::Config("window, batch and global_every must be positive".into()));
        }
        if !(self.ratio >= 0.0 && self.ratio.is_finite()) {
            return Err(TdgError::Config(format!("ratio must be non-negative, got {}", self.ratio)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    Proposed,
    Accepted,
    Rejected,
    Corrected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCall {
    pub label: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub segments: Vec<String>,
    pub local_pred: ModelCall,
    pub global_pred: ModelCall,
    /// Local and global predict different labels.
    pub creative: bool,
    /// `|p_local(y_local) - p_global(y_local)|`.
    pub score_gap: f64,
    pub human_label: Option<String>,
    pub status: CandidateStatus,
}

impl Candidate {
    pub fn new(id: String, segments: Vec<String>) -> Self {
        Candidate {
            id,
            segments,
            local_pred: ModelCall { label: String::new(), score: 0.0 },
            global_pred: ModelCall { label: String::new(), score: 0.0 },
            creative: false,
            score_gap: 0.0,
            human_label: None,
            status: CandidateStatus::Proposed,
        }
    }

    pub fn text(&self) -> String {
        self.segments.join(generator::SEGMENT_SEP)
    }

    /// Refresh predictions and the creative flag.
    pub fn set_predictions(&mut self, space: &LabelSpace, local: &Prediction, global: &Prediction) {
        self.local_pred = ModelCall {
            label: local.label.clone(),
            score: local.score_of(space, &local.label),
        };
        self.global_pred = ModelCall {
            label: global.label.clone(),
            score: global.score_of(space, &global.label),
        };
        self.creative = local.label != global.label;
        self.score_gap = (local.score_of(space, &local.label) - global.score_of(space, &local.label)).abs();
    }

    /// The candidate as a training example with its human label.
    pub fn to_example(&self) -> Option<LabeledExample> {
        let label = self.human_label.clone()?;
        matches!(self.status, CandidateStatus::Accepted | CandidateStatus::Corrected)
            .then(|| LabeledExample::new(self.id.clone(), self.segments.clone(), label).with_origin(Origin::Generated))
    }
}

/// Re-predict candidates with both models.
pub fn predict_candidates<C: Classifier + ?Sized>(
    backend: &C,
    local: &ModelVersion,
    global: &ModelVersion,
    candidates: &mut [Candidate],
) -> Result<()> {
    if candidates.is_empty() {
        return Ok(());
    }
    let texts: Vec<String> = candidates.iter().map(Candidate::text).collect();
    let lp = backend.predict_texts(local, &texts)?;
    let gp = backend.predict_texts(global, &texts)?;
    let space = backend.label_space();
    for ((c, l), g) in candidates.iter_mut().zip(&lp).zip(&gp) {
        c.set_predictions(space, l, g);
    }
    Ok(())
}

/// Creative candidates first, then by larger score gap. Stable.
pub fn rank_candidates(candidates: &mut [Candidate]) {
    candidates.sort_by(|a, b| {
        b.creative
            .cmp(&a.creative)
            .then(b.score_gap.total_cmp(&a.score_gap))
    });
}

/// Status for a labeled candidate. `None` is an abstention.
pub fn decide_acceptance(candidate: &Candidate, human_label: Option<&str>, space: &LabelSpace) -> Result<CandidateStatus> {
    let Some(h) = human_label else {
        return Ok(CandidateStatus::Rejected);
    };
    if !space.contains(h) {
        return Err(TdgError::Contract(format!("label {h:?} is not in the label space")));
    }
    Ok(if h != candidate.local_pred.label {
        CandidateStatus::Corrected
    } else if h != candidate.global_pred.label {
        CandidateStatus::Accepted
    } else {
        CandidateStatus::Rejected
    })
}

/// All cluster dev members, model errors first, then by id.
pub fn seed_prompt_pool(members: &[LabeledExample], predictions: &[String]) -> Result<Vec<LabeledExample>> {
    if members.is_empty() {
        return Err(TdgError::Contract("cluster has no members".into()));
    }
    if members.len() != predictions.len() {
        return Err(TdgError::Contract("prediction count differs from member count".into()));
    }
    let mut keyed: Vec<(bool, &LabeledExample)> = members
        .iter()
        .zip(predictions)
        .map(|(m, p)| (m.label == *p, m))
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
    Ok(keyed.into_iter().map(|(_, m)| m.clone()).collect())
}

/// Fine-tune the local model on cluster originals plus the accepted set.
/// An empty accepted set returns the current version unchanged.
pub fn update_local<C: Classifier + ?Sized>(
    backend: &C,
    local: &ModelVersion,
    originals: &[LabeledExample],
    accepted: &[LabeledExample],
    params: &TrainParams,
) -> Result<ModelVersion> {
    if accepted.is_empty() {
        return Ok(local.clone());
    }
    let mut data = originals.to_vec();
    data.extend_from_slice(accepted);
    backend.finetune(local, &data, params, Role::Local)
}

/// Fine-tune the global model on `ratio·|accepted|` sampled originals plus the accepted set.
pub fn update_global<C: Classifier + ?Sized>(
    backend: &C,
    global: &ModelVersion,
    accepted: &[LabeledExample],
    train: &[LabeledExample],
    ratio: f64,
    params: &TrainParams,
) -> Result<ModelVersion> {
    if accepted.is_empty() {
        return Err(TdgError::Contract("global update needs a non-empty accepted set".into()));
    }
    let mixture = build_mixture(&MixtureSpec::ratio(train, accepted, ratio), params.seed)?;
    backend.finetune(global, &mixture, params, Role::Global)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopDecision {
    Continue,
    Converged,
    BudgetExhausted,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetUsed {
    pub proposals: usize,
    pub labels: usize,
    pub local_updates: usize,
    pub global_updates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingState {
    pub window: VecDeque<bool>,
    pub capacity: usize,
    pub agreement_rate: f64,
    /// Agreement over the whole evaluation set, not only the window.
    pub overall_agreement: f64,
    pub budget_used: BudgetUsed,
    /// Set when the generator stops producing new candidates.
    pub generator_exhausted: bool,
}

impl StoppingState {
    pub fn new(capacity: usize) -> Self {
        StoppingState {
            window: VecDeque::with_capacity(capacity),
            capacity,
            agreement_rate: 0.0,
            overall_agreement: 0.0,
            budget_used: BudgetUsed::default(),
            generator_exhausted: false,
        }
    }

    /// Recompute agreement from per-item flags over originals then accepted, in order.
    /// The window holds the last `capacity` of them.
    pub fn refresh(&mut self, agreements: &[bool]) {
        self.window = agreements
            .iter()
            .skip(agreements.len().saturating_sub(self.capacity))
            .copied()
            .collect();
        self.agreement_rate = rate(self.window.iter().copied());
        self.overall_agreement = rate(agreements.iter().copied());
    }

    pub fn is_full(&self) -> bool {
        self.window.len() >= self.capacity
    }
}

fn rate(it: impl ExactSizeIterator<Item = bool>) -> f64 {
    let n = it.len();
    if n == 0 {
        return 0.0;
    }
    it.filter(|&b| b).count() as f64 / n as f64
}

pub fn check_stop(state: &StoppingState, cfg: &AugmentConfig) -> StopDecision {
    if cfg.stop_on_convergence && state.is_full() && state.agreement_rate >= cfg.tau && state.overall_agreement >= cfg.tau {
        return StopDecision::Converged;
    }
    let b = &state.budget_used;
    if b.proposals >= cfg.max_proposals
        || b.labels >= cfg.max_labels
        || b.global_updates >= cfg.max_global_updates
        || state.generator_exhausted
    {
        return StopDecision::BudgetExhausted;
    }
    StopDecision::Continue
}

/// Per-item local/global agreement on `items`.
pub fn agreement_flags<C: Classifier + ?Sized>(
    backend: &C,
    local: &ModelVersion,
    global: &ModelVersion,
    items: &[LabeledExample],
) -> Result<Vec<bool>> {
    let l = backend.predict_labels(local, items)?;
    let g = backend.predict_labels(global, items)?;
    Ok(l.iter().zip(&g).map(|(a, b)| a == b).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    Oracle,
    HumanSession,
}

/// Source of labels for candidates.
pub trait LabelProvider: Send + Sync {
    fn mode(&self) -> LabelMode;
    /// A label, or `None` to abstain.
    fn label(&self, candidate: &Candidate) -> Option<String>;
}

impl LabelProvider for SyntheticOracle {
    fn mode(&self) -> LabelMode {
        LabelMode::Oracle
    }

    fn label(&self, candidate: &Candidate) -> Option<String> {
        self.label_text(&candidate.text())
    }
}

/// Labels candidates by exact text lookup; abstains on unknown text.
#[derive(Debug, Clone, Default)]
pub struct LookupOracle {
    pub labels: std::collections::HashMap<String, String>,
}

impl LookupOracle {
    pub fn from_examples(examples: &[LabeledExample]) -> Self {
        LookupOracle {
            labels: examples.iter().map(|e| (e.text(), e.label.clone())).collect(),
        }
    }
}

impl LabelProvider for LookupOracle {
    fn mode(&self) -> LabelMode {
        LabelMode::Oracle
    }

    fn label(&self, candidate: &Candidate) -> Option<String> {
        self.labels.get(&candidate.text()).cloned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space() -> LabelSpace {
        LabelSpace::new(["pos", "neg"]).unwrap()
    }

    fn cand(id: &str, local: &str, global: &str, gap: f64) -> Candidate {
        let mut c = Candidate::new(id.into(), vec![id.into()]);
        c.local_pred = ModelCall { label: local.into(), score: 0.9 };
        c.global_pred = ModelCall { label: global.into(), score: 0.9 };
        c.creative = local != global;
        c.score_gap = gap;
        c
    }

    #[test]
    fn creative_ranks_first() {
        let mut cs = vec![cand("a", "pos", "pos", 0.5), cand("b", "pos", "neg", 0.1), cand("c", "neg", "neg", 0.7)];
        rank_candidates(&mut cs);
        assert_eq!(cs[0].id, "b");
    }

    #[test]
    fn larger_gap_first_among_creative() {
        let mut cs = vec![cand("a", "pos", "neg", 0.1), cand("b", "pos", "neg", 0.4)];
        rank_candidates(&mut cs);
        assert_eq!(cs[0].id, "b");
    }

    #[test]
    fn ranking_is_stable_on_ties() {
        let mut cs = vec![cand("a", "pos", "neg", 0.2), cand("b", "pos", "neg", 0.2), cand("c", "pos", "neg", 0.2)];
        rank_candidates(&mut cs);
        let ids: Vec<&str> = cs.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn ranking_matches_brute_force_sort() {
        let mut rng = crate::util::rng(44);
        use rand::Rng as _;
        let cs: Vec<Candidate> = (0..20)
            .map(|i| {
                let g = if rng.gen_bool(0.4) { "neg" } else { "pos" };
                // Coarse gaps so ties occur.
                cand(&format!("c{i:02}"), "pos", g, f64::from(rng.gen_range(0..5u8)) / 4.0)
            })
            .collect();
        let mut ranked = cs.clone();
        rank_candidates(&mut ranked);
        // Repeatedly take the first candidate not beaten by any other.
        let mut left: Vec<(usize, &Candidate)> = cs.iter().enumerate().collect();
        let mut expected = Vec::new();
        while !left.is_empty() {
            let beats = |a: &(usize, &Candidate), b: &(usize, &Candidate)| {
                (a.1.creative, a.1.score_gap, std::cmp::Reverse(a.0)) > (b.1.creative, b.1.score_gap, std::cmp::Reverse(b.0))
            };
            let pos = (0..left.len()).find(|&i| left.iter().all(|o| !beats(o, &left[i]))).unwrap();
            expected.push(left.remove(pos).1.id.clone());
        }
        let got: Vec<String> = ranked.iter().map(|c| c.id.clone()).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn acceptance_rules() {
        let s = space();
        assert_eq!(decide_acceptance(&cand("x", "pos", "pos", 0.0), Some("neg"), &s).unwrap(), CandidateStatus::Corrected);
        assert_eq!(decide_acceptance(&cand("x", "neg", "pos", 0.0), Some("neg"), &s).unwrap(), CandidateStatus::Accepted);
        assert_eq!(decide_acceptance(&cand("x", "pos", "pos", 0.0), Some("pos"), &s).unwrap(), CandidateStatus::Rejected);
        assert_eq!(decide_acceptance(&cand("x", "pos", "neg", 0.0), None, &s).unwrap(), CandidateStatus::Rejected);
        assert!(matches!(
            decide_acceptance(&cand("x", "pos", "neg", 0.0), Some("meh"), &s),
            Err(TdgError::Contract(_))
        ));
    }

    #[test]
    fn pool_puts_errors_first() {
        let members: Vec<LabeledExample> = (0..10)
            .map(|i| LabeledExample::new(format!("m{i}"), vec![format!("t{i}")], "pos"))
            .collect();
        let preds: Vec<String> = (0..10).map(|i| if i % 2 == 0 || i == 9 { "neg" } else { "pos" }.to_string()).collect();
        let pool = seed_prompt_pool(&members, &preds).unwrap();
        assert_eq!(pool.len(), 10);
        let ids: Vec<&str> = pool.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["m0", "m2", "m4", "m6", "m8", "m9", "m1", "m3", "m5", "m7"]);
        let all_right: Vec<String> = vec!["pos".into(); 10];
        let pool = seed_prompt_pool(&members, &all_right).unwrap();
        assert!(pool.windows(2).all(|w| w[0].id < w[1].id));
        assert!(seed_prompt_pool(&[], &[]).is_err());
    }

    #[test]
    fn stopping_rules() {
        let cfg = AugmentConfig::default();
        let mut st = StoppingState::new(20);
        st.refresh(&[true; 20]);
        assert_eq!(check_stop(&st, &cfg), StopDecision::Converged);
        st.refresh(&[[true; 12].as_slice(), &[false; 8]].concat());
        assert_eq!(check_stop(&st, &cfg), StopDecision::Continue);
        st.budget_used.proposals = 200;
        st.refresh(&[[true; 14].as_slice(), &[false; 6]].concat());
        assert!((st.agreement_rate - 0.7).abs() < 1e-12);
        assert_eq!(check_stop(&st, &cfg), StopDecision::BudgetExhausted);
    }

    #[test]
    fn convergence_can_be_ignored() {
        let cfg = AugmentConfig {
            stop_on_convergence: false,
            ..Default::default()
        };
        let mut st = StoppingState::new(20);
        st.refresh(&[true; 20]);
        assert_eq!(check_stop(&st, &cfg), StopDecision::Continue);
        st.budget_used.labels = cfg.max_labels;
        assert_eq!(check_stop(&st, &cfg), StopDecision::BudgetExhausted);
    }

    #[test]
    fn window_needs_to_be_full() {
        let cfg = AugmentConfig::default();
        let mut st = StoppingState::new(20);
        st.refresh(&[true; 19]);
        assert_eq!(check_stop(&st, &cfg), StopDecision::Continue);
    }

    #[test]
    fn window_keeps_last_items_and_rate_is_its_mean() {
        let mut st = StoppingState::new(3);
        st.refresh(&[false, false, true, true, false]);
        assert_eq!(st.window, VecDeque::from(vec![true, true, false]));
        assert!((st.agreement_rate - 2.0 / 3.0).abs() < 1e-12);
        assert!((st.overall_agreement - 0.4).abs() < 1e-12);
    }

    #[test]
    fn accepted_candidate_becomes_generated_example() {
        let mut c = cand("g1", "pos", "neg", 0.3);
        assert!(c.to_example().is_none());
        c.human_label = Some("pos".into());
        c.status = CandidateStatus::Accepted;
        let ex = c.to_example().unwrap();
        assert_eq!(ex.origin, Origin::Generated);
        assert_eq!(ex.label, "pos");
        c.status = CandidateStatus::Rejected;
        assert!(c.to_example().is_none());
    }
}
