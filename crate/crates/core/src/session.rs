//! Labeling sessions over the augmentation loop, recorded as an append-only
//! event log that replays to the same models.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::augment::{
    agreement_flags, check_stop, decide_acceptance, predict_candidates, rank_candidates, seed_prompt_pool,
    update_global, update_local, AugmentConfig, Candidate, CandidateStatus, Generator, LabelProvider,
    StopDecision, StoppingState,
};
use crate::data::LabeledExample;
use crate::error::{Result, TdgError};
use crate::model::{Classifier, LineageStore, ModelVersion, Role};
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Converged,
    BudgetExhausted,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateScope {
    Local,
    Global,
}

/// Everything needed to start a session; stored in its first event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub session_id: String,
    pub cluster_id: usize,
    pub seed: u64,
    pub config: AugmentConfig,
    /// Dev members of the cluster with their gold labels.
    pub originals: Vec<LabeledExample>,
    pub target_version: String,
    pub generator: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposedText {
    pub id: String,
    pub segments: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SessionEvent {
    Created {
        spec: SessionSpec,
        local_version: String,
    },
    Proposed {
        round: usize,
        candidates: Vec<ProposedText>,
    },
    Decided {
        candidate_id: String,
        label: Option<String>,
        status: CandidateStatus,
    },
    Updated {
        scope: UpdateScope,
        version_id: String,
    },
    Renamed {
        name: String,
    },
    Stopped {
        status: SessionStatus,
    },
}

/// Append-only JSONL file of session events.
#[derive(Debug, Clone)]
pub struct EventLog {
    path: PathBuf,
}

impl EventLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        EventLog { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, event: &SessionEvent) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        let mut line = serde_json::to_string(event)?;
        line.push('\n');
        f.write_all(line.as_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Vec<SessionEvent>> {
        let f = File::open(path)?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| TdgError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?);
        }
        Ok(out)
    }
}

/// What a session needs from the surrounding run.
pub struct SessionContext<'a> {
    pub backend: &'a dyn Classifier,
    pub generator: &'a dyn Generator,
    pub train: &'a [LabeledExample],
    pub target: &'a ModelVersion,
}

#[derive(Debug, Clone)]
pub struct Session {
    pub spec: SessionSpec,
    pub name: Option<String>,
    pub status: SessionStatus,
    pub pool: Vec<LabeledExample>,
    /// Every candidate ever proposed, in proposal order.
    pub candidates: Vec<Candidate>,
    /// Ids of undecided candidates in ranked order.
    pub pending: Vec<String>,
    pub accepted: Vec<LabeledExample>,
    pub local: Arc<ModelVersion>,
    pub global: Arc<ModelVersion>,
    pub lineage: LineageStore,
    pub stopping: StoppingState,
    pub rounds: usize,
    idle_rounds: usize,
    accepted_at_local: usize,
    accepted_at_global: usize,
    events: Vec<SessionEvent>,
    log: Option<EventLog>,
}

impl Session {
    pub fn create(ctx: &SessionContext<'_>, spec: SessionSpec, log: Option<EventLog>) -> Result<Session> {
        spec.config.validate()?;
        if spec.target_version != ctx.target.version_id {
            return Err(TdgError::Integrity(format!(
                "session expects target {} but {} was supplied",
                spec.target_version, ctx.target.version_id
            )));
        }
        let preds = ctx.backend.predict_labels(ctx.target, &spec.originals)?;
        let pool = seed_prompt_pool(&spec.originals, &preds)?;
        let mut lp = spec.config.local_params.clone();
        lp.seed = util::derive_seed(spec.seed, "local-init");
        let local = ctx.backend.finetune(ctx.target, &spec.originals, &lp, Role::Local)?;
        let mut lineage = LineageStore::new();
        let target = lineage.insert(ctx.target.clone())?;
        let local = lineage.insert(local)?;
        let mut s = Session {
            stopping: StoppingState::new(spec.config.window),
            name: None,
            status: SessionStatus::Active,
            pool,
            candidates: Vec::new(),
            pending: Vec::new(),
            accepted: Vec::new(),
            local: local.clone(),
            global: target,
            lineage,
            rounds: 0,
            idle_rounds: 0,
            accepted_at_local: 0,
            accepted_at_global: 0,
            events: Vec::new(),
            log,
            spec: spec.clone(),
        };
        s.refresh_agreement(ctx)?;
        s.record(SessionEvent::Created {
            spec,
            local_version: local.version_id.clone(),
        })?;
        Ok(s)
    }

    pub fn id(&self) -> &str {
        &self.spec.session_id
    }

    /// Append future events to `log`, e.g. after restoring by replay.
    pub fn with_log(mut self, log: EventLog) -> Self {
        self.log = Some(log);
        self
    }

    pub fn events(&self) -> &[SessionEvent] {
        &self.events
    }

    fn record(&mut self, ev: SessionEvent) -> Result<()> {
        if let Some(log) = &self.log {
            log.append(&ev)?;
        }
        self.events.push(ev);
        Ok(())
    }

    fn ensure_active(&self) -> Result<()> {
        if self.status != SessionStatus::Active {
            return Err(TdgError::Conflict(format!("session is {:?}", self.status).to_lowercase()));
        }
        Ok(())
    }

    pub fn candidate(&self, id: &str) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.id == id)
    }

    pub fn pending_candidates(&self) -> Vec<Candidate> {
        self.pending
            .iter()
            .filter_map(|id| self.candidate(id).cloned())
            .collect()
    }

    /// Evaluation set for agreement: originals, then accepted in order.
    pub fn evaluation_set(&self) -> Vec<LabeledExample> {
        let mut v = self.spec.originals.clone();
        v.extend(self.accepted.iter().cloned());
        v
    }

    pub fn proposals_left(&self) -> usize {
        self.spec
            .config
            .max_proposals
            .saturating_sub(self.stopping.budget_used.proposals)
    }

    pub fn labels_left(&self) -> usize {
        self.spec.config.max_labels.saturating_sub(self.stopping.budget_used.labels)
    }

    pub fn global_updates_left(&self) -> usize {
        self.spec
            .config
            .max_global_updates
            .saturating_sub(self.stopping.budget_used.global_updates)
    }

    pub fn accepted_since_local(&self) -> usize {
        self.accepted.len() - self.accepted_at_local
    }

    pub fn accepted_since_global(&self) -> usize {
        self.accepted.len() - self.accepted_at_global
    }

    /// Ranked pending candidates. Returns the cached list unless it is empty or
    /// `fresh` is set, in which case a new batch replaces it.
    pub fn suggest(&mut self, ctx: &SessionContext<'_>, n: usize, fresh: bool) -> Result<Vec<Candidate>> {
        self.ensure_active()?;
        if n == 0 {
            return Err(TdgError::Contract("n must be positive".into()));
        }
        if !fresh && !self.pending.is_empty() {
            return Ok(self.pending_candidates());
        }
        let want = n.min(self.proposals_left());
        if want == 0 {
            return Err(TdgError::Conflict("proposal budget exhausted".into()));
        }
        let seed = util::derive_seed(self.spec.seed, &format!("propose-{}", self.rounds));
        let raw = ctx.generator.propose(&self.pool, want, seed)?;
        let mut seen: std::collections::HashSet<Vec<String>> =
            self.candidates.iter().map(|c| c.segments.clone()).collect();
        seen.extend(self.pool.iter().map(|e| e.segments.clone()));
        let mut proposed = Vec::new();
        for segments in raw {
            if proposed.len() >= want {
                break;
            }
            if seen.insert(segments.clone()) {
                let id = format!("{}-g{:04}", self.spec.session_id, self.candidates.len() + proposed.len());
                proposed.push(ProposedText { id, segments });
            }
        }
        self.apply_proposed(ctx, self.rounds, proposed)?;
        Ok(self.pending_candidates())
    }

    fn apply_proposed(&mut self, ctx: &SessionContext<'_>, round: usize, proposed: Vec<ProposedText>) -> Result<()> {
        if round != self.rounds {
            return Err(TdgError::Integrity(format!("proposal round {round} out of order")));
        }
        let mut fresh: Vec<Candidate> = proposed
            .iter()
            .map(|p| Candidate::new(p.id.clone(), p.segments.clone()))
            .collect();
        predict_candidates(ctx.backend, &self.local, &self.global, &mut fresh)?;
        rank_candidates(&mut fresh);
        self.pending = fresh.iter().map(|c| c.id.clone()).collect();
        self.stopping.budget_used.proposals += fresh.len();
        self.candidates.extend(fresh);
        self.rounds += 1;
        if proposed.is_empty() {
            self.idle_rounds += 1;
            if self.idle_rounds >= self.spec.config.max_idle_rounds {
                self.stopping.generator_exhausted = true;
            }
        } else {
            self.idle_rounds = 0;
        }
        self.record(SessionEvent::Proposed {
            round,
            candidates: proposed,
        })?;
        if self.stopping.generator_exhausted {
            self.stop(SessionStatus::BudgetExhausted)?;
        }
        Ok(())
    }

    /// Record a label (or abstention) for a pending candidate.
    pub fn decide(&mut self, ctx: &SessionContext<'_>, candidate_id: &str, label: Option<&str>) -> Result<CandidateStatus> {
        self.ensure_active()?;
        let Some(pos) = self.pending.iter().position(|p| p == candidate_id) else {
            return Err(match self.candidate(candidate_id) {
                Some(_) => TdgError::Conflict(format!("candidate {candidate_id} was already decided")),
                None => TdgError::NotFound(format!("candidate {candidate_id}")),
            });
        };
        if self.labels_left() == 0 {
            return Err(TdgError::Conflict("label budget exhausted".into()));
        }
        let idx = self
            .candidates
            .iter()
            .position(|c| c.id == candidate_id)
            .expect("pending ids exist");
        let status = decide_acceptance(&self.candidates[idx], label, ctx.backend.label_space())?;
        let c = &mut self.candidates[idx];
        c.human_label = label.map(str::to_owned);
        c.status = status;
        if let Some(ex) = c.to_example() {
            self.accepted.push(ex.clone());
            self.pool.push(ex);
        }
        self.pending.remove(pos);
        self.stopping.budget_used.labels += 1;
        self.record(SessionEvent::Decided {
            candidate_id: candidate_id.to_owned(),
            label: label.map(str::to_owned),
            status,
        })?;
        Ok(status)
    }

    /// Fine-tune the local or global model on the accepted set, then refresh
    /// pending predictions and the stopping state.
    pub fn update(&mut self, ctx: &SessionContext<'_>, scope: UpdateScope) -> Result<String> {
        self.ensure_active()?;
        if self.accepted.is_empty() {
            return Err(TdgError::Conflict("accepted set is empty".into()));
        }
        let used = self.stopping.budget_used.clone();
        let cfg = &self.spec.config;
        let version = match scope {
            UpdateScope::Local => {
                let mut p = cfg.local_params.clone();
                p.seed = util::derive_seed(self.spec.seed, &format!("local-{}", used.local_updates));
                update_local(ctx.backend, &self.local, &self.spec.originals, &self.accepted, &p)?
            }
            UpdateScope::Global => {
                if used.global_updates >= cfg.max_global_updates {
                    return Err(TdgError::Conflict("global update budget exhausted".into()));
                }
                let mut p = cfg.global_params.clone();
                p.seed = util::derive_seed(self.spec.seed, &format!("global-{}", used.global_updates));
                update_global(ctx.backend, &self.global, &self.accepted, ctx.train, cfg.ratio, &p)?
            }
        };
        let version = self.lineage.insert(version)?;
        let id = version.version_id.clone();
        match scope {
            UpdateScope::Local => {
                self.local = version;
                self.stopping.budget_used.local_updates += 1;
                self.accepted_at_local = self.accepted.len();
            }
            UpdateScope::Global => {
                self.global = version;
                self.stopping.budget_used.global_updates += 1;
                self.accepted_at_global = self.accepted.len();
            }
        }
        self.refresh_pending(ctx)?;
        self.refresh_agreement(ctx)?;
        self.record(SessionEvent::Updated {
            scope,
            version_id: id.clone(),
        })?;
        match check_stop(&self.stopping, &self.spec.config) {
            StopDecision::Continue => {}
            StopDecision::Converged => self.stop(SessionStatus::Converged)?,
            StopDecision::BudgetExhausted => self.stop(SessionStatus::BudgetExhausted)?,
        }
        Ok(id)
    }

    fn refresh_pending(&mut self, ctx: &SessionContext<'_>) -> Result<()> {
        let mut pending = self.pending_candidates();
        predict_candidates(ctx.backend, &self.local, &self.global, &mut pending)?;
        rank_candidates(&mut pending);
        self.pending = pending.iter().map(|c| c.id.clone()).collect();
        for c in pending {
            if let Some(slot) = self.candidates.iter_mut().find(|x| x.id == c.id) {
                *slot = c;
            }
        }
        Ok(())
    }

    fn refresh_agreement(&mut self, ctx: &SessionContext<'_>) -> Result<()> {
        let flags = agreement_flags(ctx.backend, &self.local, &self.global, &self.evaluation_set())?;
        self.stopping.refresh(&flags);
        Ok(())
    }

    pub fn rename(&mut self, name: &str) -> Result<()> {
        let name = name.trim();
        if name.is_empty() {
            return Err(TdgError::Contract("name must not be empty".into()));
        }
        self.name = Some(name.to_owned());
        self.record(SessionEvent::Renamed { name: name.to_owned() })
    }

    /// Move to a terminal status. Terminal statuses never change again.
    pub fn stop(&mut self, status: SessionStatus) -> Result<()> {
        self.ensure_active()?;
        if status == SessionStatus::Active {
            return Err(TdgError::Contract("cannot stop into the active status".into()));
        }
        self.status = status;
        self.pending.clear();
        self.record(SessionEvent::Stopped { status })
    }

    /// Rebuild a session from its events, checking every model version id.
    pub fn replay(ctx: &SessionContext<'_>, events: &[SessionEvent]) -> Result<Session> {
        let mut it = events.iter();
        let Some(SessionEvent::Created { spec, local_version }) = it.next() else {
            return Err(TdgError::Integrity("event log does not start with a creation event".into()));
        };
        let mut s = Session::create(ctx, spec.clone(), None)?;
        if &s.local.version_id != local_version {
            return Err(TdgError::Integrity(format!(
                "replayed local model {} differs from logged {local_version}",
                s.local.version_id
            )));
        }
        for ev in it {
            match ev {
                SessionEvent::Created { .. } => {
                    return Err(TdgError::Integrity("second creation event in log".into()));
                }
                SessionEvent::Proposed { round, candidates } => {
                    s.apply_proposed(ctx, *round, candidates.clone())?;
                }
                SessionEvent::Decided {
                    candidate_id,
                    label,
                    status,
                } => {
                    let got = s.decide(ctx, candidate_id, label.as_deref())?;
                    if got != *status {
                        return Err(TdgError::Integrity(format!(
                            "candidate {candidate_id} replayed as {got:?}, logged {status:?}"
                        )));
                    }
                }
                SessionEvent::Updated { scope, version_id } => {
                    let got = s.update(ctx, *scope)?;
                    if &got != version_id {
                        return Err(TdgError::Integrity(format!(
                            "replayed {scope:?} update produced {got}, logged {version_id}"
                        )));
                    }
                }
                SessionEvent::Renamed { name } => s.rename(name)?,
                SessionEvent::Stopped { status } => {
                    // Automatic stops were already re-derived by the preceding event.
                    if s.status != *status {
                        s.stop(*status)?;
                    }
                }
            }
        }
        Ok(s)
    }

    pub fn view(&self) -> SessionView {
        SessionView {
            session_id: self.spec.session_id.clone(),
            cluster_id: self.spec.cluster_id,
            name: self.name.clone(),
            status: self.status,
            prompt_pool: self.pool.iter().map(|e| e.segments.clone()).collect(),
            pending: self.pending_candidates(),
            accepted: self.accepted.clone(),
            local_version: self.local.version_id.clone(),
            global_version: self.global.version_id.clone(),
            stopping: self.stopping.clone(),
            config: self.spec.config.clone(),
            generator: self.spec.generator.clone(),
        }
    }
}

/// Client-facing snapshot of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub cluster_id: usize,
    pub name: Option<String>,
    pub status: SessionStatus,
    pub prompt_pool: Vec<Vec<String>>,
    pub pending: Vec<Candidate>,
    pub accepted: Vec<LabeledExample>,
    pub local_version: String,
    pub global_version: String,
    pub stopping: StoppingState,
    pub config: AugmentConfig,
    pub generator: String,
}

/// Run a session headlessly with a label provider until it stops.
///
/// Each round labels one ranked batch, updates the local model when anything
/// was accepted, and updates the global model every `global_every` accepted
/// examples and once more before the budgets run out.
pub fn run_headless(ctx: &SessionContext<'_>, session: &mut Session, labeler: &dyn LabelProvider) -> Result<SessionStatus> {
    run_headless_capped(ctx, session, labeler, None)
}

/// [`run_headless`] that also stops once `max_accepted` examples are accepted.
pub fn run_headless_capped(
    ctx: &SessionContext<'_>,
    session: &mut Session,
    labeler: &dyn LabelProvider,
    max_accepted: Option<usize>,
) -> Result<SessionStatus> {
    let cfg = session.spec.config.clone();
    let capped = |s: &Session| max_accepted.is_some_and(|m| s.accepted.len() >= m);
    while session.status == SessionStatus::Active {
        if session.proposals_left() == 0 || session.labels_left() == 0 || capped(session) {
            if session.accepted_since_global() > 0 && session.global_updates_left() > 0 {
                session.update(ctx, UpdateScope::Global)?;
            }
            if session.status == SessionStatus::Active {
                session.stop(SessionStatus::BudgetExhausted)?;
            }
            break;
        }
        let batch = session.suggest(ctx, cfg.batch, true)?;
        for c in batch {
            if session.status != SessionStatus::Active || session.labels_left() == 0 || capped(session) {
                break;
            }
            let label = labeler.label(&c);
            session.decide(ctx, &c.id, label.as_deref())?;
        }
        if session.status != SessionStatus::Active {
            break;
        }
        if session.proposals_left() == 0 || session.labels_left() == 0 || capped(session) {
            continue;
        }
        if session.accepted_since_local() > 0 {
            session.update(ctx, UpdateScope::Local)?;
        }
        if session.status == SessionStatus::Active
            && session.accepted_since_global() >= cfg.global_every
            && session.global_updates_left() > 0
        {
            session.update(ctx, UpdateScope::Global)?;
        }
    }
    Ok(session.status)
}
