use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Read as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::*;
use crate::amenability::render_table;
use crate::augment::{LabelProvider, LookupOracle};
use crate::baselines::SeedSummary;
use crate::data::{ingest_jsonl, IngestOptions, LabelSpace};
use crate::embed::HashingEmbedder;
use crate::session::SessionEvent;
use crate::augment::Generator;
use crate::synthetic::{NoisyTask, PlantedTask, SyntheticOracle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Train,
    Discover,
    Estimate,
    Select,
    AugmentOracle,
    Assemble,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Ingest,
        Stage::Train,
        Stage::Discover,
        Stage::Estimate,
        Stage::Select,
        Stage::AugmentOracle,
        Stage::Assemble,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Train => "train",
            Stage::Discover => "discover",
            Stage::Estimate => "estimate",
            Stage::Select => "select",
            Stage::AugmentOracle => "augment-oracle",
            Stage::Assemble => "assemble",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    /// Artifact file, relative to the run directory.
    pub fn artifact(self) -> &'static str {
        match self {
            Stage::Ingest => "data.json",
            Stage::Train => "models/targets.json",
            Stage::Discover => "clusters.json",
            Stage::Estimate => "amenability.json",
            Stage::Select => "selection.json",
            Stage::AugmentOracle => "sessions.json",
            Stage::Assemble => "models.json",
            Stage::Evaluate => "report.json",
            Stage::Report => "report/summary.json",
        }
    }

    pub fn upstream(self) -> Option<Stage> {
        let i = Stage::ALL.iter().position(|s| *s == self).expect("listed");
        i.checked_sub(1).map(|j| Stage::ALL[j])
    }
}

impl std::str::FromStr for Stage {
    type Err = TdgError;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s.replace('_', "-"))
            .ok_or_else(|| TdgError::Config(format!("unknown stage {s:?}")))
    }
}

/// Every artifact carries the stage and the hash of what produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub stage: Stage,
    pub config_hash: String,
    pub payload: T,
}

#[derive(Deserialize)]
struct Header {
    config_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestPayload {
    pub bundle: DatasetBundle,
    /// Ids of the known planted or noisy region, for synthetic data.
    pub special_ids: Option<BTreeSet<String>>,
}

/// Stored method models reference files under `models/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredMethod {
    pub method: Method,
    pub budget: usize,
    /// Cluster id (or "all") to model version id.
    pub models: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub summary: SeedSummary,
    pub selections: BTreeMap<u64, SelectionResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    UpToDate,
}

/// A run directory plus the config that drives it.
pub struct Pipeline {
    pub config: RunConfig,
    pub root: PathBuf,
}

fn hex_sha(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

impl Pipeline {
    pub fn new(mut config: RunConfig) -> Result<Self> {
        config.normalize()?;
        let root = config.output_dir.clone();
        Ok(Pipeline { config, root })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// The config sections a stage reads.
    fn stage_config(&self, stage: Stage) -> Result<Vec<u8>> {
        let c = &self.config;
        let mut est = c.estimate.clone();
        est.estimator.ic_gate = 0.0;
        let v = match stage {
            Stage::Ingest => serde_json::to_vec(&c.data)?,
            Stage::Train => serde_json::to_vec(&(&c.seeds, &c.backend))?,
            Stage::Discover => serde_json::to_vec(&c.discovery)?,
            Stage::Estimate => serde_json::to_vec(&est)?,
            Stage::Select => serde_json::to_vec(&c.estimate.estimator.ic_gate)?,
            Stage::AugmentOracle => {
                let mut v = serde_json::to_vec(&(&c.augment.source, &c.augment.session_config(), &c.augment.generator))?;
                if c.augment.source == SessionSource::Live {
                    for p in self.live_logs()? {
                        v.extend(p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default().bytes());
                        v.extend(fs::read(&p)?);
                    }
                }
                v
            }
            Stage::Assemble => serde_json::to_vec(&(&c.augment, &c.baselines, &c.evaluate))?,
            Stage::Evaluate => serde_json::to_vec(&c.evaluate)?,
            Stage::Report => Vec::new(),
        };
        Ok(v)
    }

    fn stored_hash(&self, stage: Stage) -> Result<Option<String>> {
        let p = self.path(stage.artifact());
        if !p.exists() {
            return Ok(None);
        }
        // The hash sits near the top of the envelope; avoid parsing large payloads.
        let mut head = vec![0u8; 512];
        let n = fs::File::open(&p)?.read(&mut head)?;
        let head = String::from_utf8_lossy(&head[..n]);
        if let Some(i) = head.find("\"config_hash\": \"") {
            let start = i + "\"config_hash\": \"".len();
            if let Some(hash) = head.get(start..start + 64) {
                if hash.bytes().all(|b| b.is_ascii_hexdigit()) {
                    return Ok(Some(hash.to_owned()));
                }
            }
        }
        let h: Header = serde_json::from_slice(&fs::read(&p)?)?;
        Ok(Some(h.config_hash))
    }

    /// Hash of the stage's config sections chained with the expected hash of
    /// its upstream stage. Every upstream artifact must exist and match.
    pub fn expected_hash(&self, stage: Stage) -> Result<String> {
        let upstream = match stage.upstream() {
            Some(u) => {
                let have = self.stored_hash(u)?.ok_or_else(|| {
                    TdgError::Dependency(format!(
                        "stage {} needs {} (run `tdg {}` first)",
                        stage.as_str(),
                        self.path(u.artifact()).display(),
                        u.as_str()
                    ))
                })?;
                let want = self.expected_hash(u)?;
                if have != want {
                    return Err(TdgError::Stale(format!(
                        "{} is out of date for this configuration; rerun `tdg {}` with --force",
                        self.path(u.artifact()).display(),
                        u.as_str()
                    )));
                }
                want
            }
            None => String::new(),
        };
        Ok(hex_sha(&[stage.as_str().as_bytes(), &self.stage_config(stage)?, upstream.as_bytes()]))
    }

    /// Read an upstream artifact and check it still matches the chain.
    pub fn load<T: DeserializeOwned>(&self, stage: Stage) -> Result<T> {
        let p = self.path(stage.artifact());
        if !p.exists() {
            return Err(TdgError::Dependency(format!(
                "missing artifact {} (run `tdg {}` first)",
                p.display(),
                stage.as_str()
            )));
        }
        let env: Envelope<T> = serde_json::from_slice(&fs::read(&p)?)?;
        let want = self.expected_hash(stage)?;
        if env.config_hash != want {
            return Err(TdgError::Stale(format!(
                "{} was produced by a different configuration or upstream run (hash {}, expected {}); rerun `tdg {}` with --force",
                p.display(),
                &env.config_hash[..12.min(env.config_hash.len())],
                &want[..12],
                stage.as_str()
            )));
        }
        Ok(env.payload)
    }

    fn save<T: Serialize>(&self, stage: Stage, hash: String, payload: &T) -> Result<()> {
        let env = Envelope {
            stage,
            config_hash: hash,
            payload,
        };
        let mut bytes = serde_json::to_vec_pretty(&env)?;
        bytes.push(b'\n');
        write_atomic(&self.path(stage.artifact()), &bytes)
    }

    fn save_text(&self, rel: &str, text: &str) -> Result<()> {
        write_atomic(&self.path(rel), text.as_bytes())
    }

    /// Run one stage. Without `force`, an up-to-date artifact is left alone and
    /// an artifact from a different configuration is an error.
    pub fn run_stage(&self, stage: Stage, force: bool) -> Result<StageOutcome> {
        let want = self.expected_hash(stage)?;
        if let Some(have) = self.stored_hash(stage)? {
            if have == want && !force {
                return Ok(StageOutcome::UpToDate);
            }
            if have != want && !force {
                return Err(TdgError::Stale(format!(
                    "{} exists from a different configuration; pass --force to recompute it",
                    self.path(stage.artifact()).display()
                )));
            }
        }
        tracing::info!(stage = stage.as_str(), "running");
        match stage {
            Stage::Ingest => self.ingest(want),
            Stage::Train => self.train(want),
            Stage::Discover => self.discover(want),
            Stage::Estimate => self.estimate(want),
            Stage::Select => self.select(want),
            Stage::AugmentOracle => self.augment_oracle(want),
            Stage::Assemble => self.assemble(want),
            Stage::Evaluate => self.evaluate(want),
            Stage::Report => self.report(want),
        }?;
        Ok(StageOutcome::Ran)
    }

    /// Run every stage from `from` through `to` in order.
    pub fn run_range(&self, from: Stage, to: Stage, force: bool) -> Result<Vec<(Stage, StageOutcome)>> {
        let mut out = Vec::new();
        for s in Stage::ALL.into_iter().filter(|s| *s >= from && *s <= to) {
            out.push((s, self.run_stage(s, force)?));
        }
        Ok(out)
    }

    pub fn bundle(&self) -> Result<IngestPayload> {
        self.load(Stage::Ingest)
    }

    pub fn backend(&self, bundle: &DatasetBundle) -> ReferenceBackend {
        ReferenceBackend::new(HashingEmbedder::new(self.config.backend.dim), bundle.label_space.clone())
    }

    pub fn targets(&self) -> Result<BTreeMap<u64, ModelVersion>> {
        self.load(Stage::Train)
    }

    pub fn discoveries(&self) -> Result<BTreeMap<u64, Vec<RepDiscovery>>> {
        self.load(Stage::Discover)
    }

    pub fn amenability(&self) -> Result<BTreeMap<u64, Vec<RepresentationAmenability>>> {
        self.load(Stage::Estimate)
    }

    pub fn selections(&self) -> Result<BTreeMap<u64, SelectionResult>> {
        self.load(Stage::Select)
    }

    pub fn labeler(&self, bundle: &IngestPayload) -> Result<Box<dyn LabelProvider>> {
        match &self.config.data {
            DataConfig::Planted(_) | DataConfig::Noisy(_) => Ok(Box::new(SyntheticOracle)),
            DataConfig::Jsonl { oracle: Some(p), .. } => {
                let ex = ingest_jsonl(p, &IngestOptions {
                    label_space: Some(bundle.bundle.label_space.clone()),
                    label_map: BTreeMap::new(),
                })?;
                Ok(Box::new(LookupOracle::from_examples(&ex)))
            }
            DataConfig::Jsonl { oracle: None, .. } => Err(TdgError::Config(
                "augment-oracle needs an oracle: set data.oracle to a labeled JSONL file, or use `tdg serve`".into(),
            )),
        }
    }

    fn ingest(&self, hash: String) -> Result<()> {
        let payload = match &self.config.data {
            DataConfig::Planted(c) => {
                let corpus = PlantedTask::generate(c)?;
                IngestPayload {
                    bundle: corpus.bundle,
                    special_ids: Some(corpus.special_ids),
                }
            }
            DataConfig::Noisy(c) => {
                let corpus = NoisyTask::generate(c)?;
                IngestPayload {
                    bundle: corpus.bundle,
                    special_ids: Some(corpus.special_ids),
                }
            }
            DataConfig::Jsonl {
                task_id,
                train,
                validation,
                dev,
                devtest,
                labels,
                label_map,
                split_seed,
                ..
            } => {
                let space = labels.as_ref().map(|l| LabelSpace::new(l.iter().cloned())).transpose()?;
                let opts = IngestOptions {
                    label_space: space.clone(),
                    label_map: label_map.clone(),
                };
                let tr = ingest_jsonl(train, &opts)?;
                let space = match space {
                    Some(s) => s,
                    None => LabelSpace::from_examples(&tr)?,
                };
                let opts = IngestOptions {
                    label_space: Some(space.clone()),
                    label_map: label_map.clone(),
                };
                let bundle = match (validation, dev, devtest) {
                    (Some(v), _, _) => DatasetBundle::from_validation(task_id, space, tr, ingest_jsonl(v, &opts)?, *split_seed)?,
                    (None, Some(d), Some(t)) => {
                        DatasetBundle::new(task_id, space, tr, ingest_jsonl(d, &opts)?, ingest_jsonl(t, &opts)?)?
                    }
                    _ => return Err(TdgError::Config("incomplete data paths".into())),
                };
                IngestPayload {
                    bundle,
                    special_ids: None,
                }
            }
        };
        self.save(Stage::Ingest, hash, &payload)
    }

    fn train(&self, hash: String) -> Result<()> {
        let data = self.bundle()?;
        let backend = self.backend(&data.bundle);
        let mut out = BTreeMap::new();
        for &seed in &self.config.seeds {
            out.insert(seed, train_target(&backend, &data.bundle, &self.config.backend, seed)?);
        }
        self.save(Stage::Train, hash, &out)
    }

    fn discover(&self, hash: String) -> Result<()> {
        let data = self.bundle()?;
        let backend = self.backend(&data.bundle);
        let targets = self.targets()?;
        let mut out = BTreeMap::new();
        for (&seed, target) in &targets {
            out.insert(seed, discover_seed(&backend, &data.bundle, target, &self.config.discovery, seed)?);
        }
        self.save(Stage::Discover, hash, &out)
    }

    fn estimate(&self, hash: String) -> Result<()> {
        let data = self.bundle()?;
        let backend = self.backend(&data.bundle);
        let targets = self.targets()?;
        let disc = self.discoveries()?;
        let mut out = BTreeMap::new();
        let mut text = String::new();
        for (&seed, target) in &targets {
            let d = disc.get(&seed).ok_or_else(|| TdgError::Integrity(format!("no clustering for seed {seed}")))?;
            let amen = estimate_seed(&backend, &data.bundle, target, d, &self.config.estimate)?;
            let _ = writeln!(text, "== seed {seed}");
            for r in &amen {
                text.push_str(&render_table(r, None));
                text.push('\n');
            }
            out.insert(seed, amen);
        }
        self.save(Stage::Estimate, hash, &out)?;
        self.save_text("amenability.txt", &text)
    }

    fn select(&self, hash: String) -> Result<()> {
        let amen = self.amenability()?;
        let gate = self.config.estimate.estimator.ic_gate;
        let mut out = BTreeMap::new();
        for (&seed, a) in &amen {
            out.insert(seed, select_seed(a, gate)?);
        }
        self.save(Stage::Select, hash, &out)
    }

    fn augment_oracle(&self, hash: String) -> Result<()> {
        if self.config.augment.source == SessionSource::Live {
            let mut out = BTreeMap::new();
            for &seed in &self.config.seeds {
                let live = self.live_context(seed)?;
                out.insert(seed, self.collect_live(&live)?);
            }
            return self.save(Stage::AugmentOracle, hash, &out);
        }
        let data = self.bundle()?;
        let backend = self.backend(&data.bundle);
        let targets = self.targets()?;
        let disc = self.discoveries()?;
        let sel = self.selections()?;
        let labeler = self.labeler(&data)?;
        let generator = self.config.augment.generator.build();
        let log_dir = self.path("sessions");
        fs::create_dir_all(&log_dir)?;
        let mut out = BTreeMap::new();
        for (&seed, target) in &targets {
            let s = &sel[&seed];
            let d = find_rep(&disc[&seed], s.representation)?;
            let sessions = augment_seed(
                &backend,
                generator.as_ref(),
                labeler.as_ref(),
                &data.bundle,
                target,
                d,
                s,
                &self.config.augment,
                seed,
                Some(&log_dir),
            )?;
            out.insert(seed, sessions);
        }
        self.save(Stage::AugmentOracle, hash, &out)
    }

    pub fn sessions(&self) -> Result<BTreeMap<u64, Vec<SessionSummary>>> {
        self.load(Stage::AugmentOracle)
    }

    fn assemble(&self, hash: String) -> Result<()> {
        let data = self.bundle()?;
        let backend = self.backend(&data.bundle);
        let targets = self.targets()?;
        let disc = self.discoveries()?;
        let sel = self.selections()?;
        let sessions = self.sessions()?;
        let labeler = self.labeler(&data)?;
        let generator = self.config.augment.generator.build();
        let mut out: BTreeMap<u64, Vec<StoredMethod>> = BTreeMap::new();
        for (&seed, target) in &targets {
            let s = &sel[&seed];
            let d = find_rep(&disc[&seed], s.representation)?;
            let built = assemble_seed(
                &backend,
                generator.as_ref(),
                labeler.as_ref(),
                &data.bundle,
                target,
                d,
                s,
                sessions.get(&seed).map(Vec::as_slice).unwrap_or(&[]),
                &self.config,
                seed,
            )?;
            let mut stored = Vec::new();
            for b in built {
                let mut models = BTreeMap::new();
                match &b.model {
                    MethodModel::Shared(v) => {
                        self.save_model(v)?;
                        models.insert("all".to_string(), v.version_id.clone());
                    }
                    MethodModel::PerCluster(map) => {
                        for (c, v) in map {
                            self.save_model(v)?;
                            models.insert(c.to_string(), v.version_id.clone());
                        }
                    }
                }
                stored.push(StoredMethod {
                    method: b.method,
                    budget: b.budget,
                    models,
                });
            }
            out.insert(seed, stored);
        }
        self.save(Stage::Assemble, hash, &out)
    }

    fn save_model(&self, v: &ModelVersion) -> Result<()> {
        let p = self.path(&format!("models/{}.json", v.version_id));
        if !p.exists() {
            write_atomic(&p, &serde_json::to_vec(v)?)?;
        }
        Ok(())
    }

    pub fn load_model(&self, id: &str) -> Result<ModelVersion> {
        let p = self.path(&format!("models/{id}.json"));
        let v: ModelVersion = serde_json::from_slice(&fs::read(&p).map_err(|e| {
            TdgError::Dependency(format!("model file {}: {e}", p.display()))
        })?)?;
        if v.version_id != id {
            return Err(TdgError::Integrity(format!("{} holds model {}", p.display(), v.version_id)));
        }
        Ok(v)
    }

    fn evaluate(&self, hash: String) -> Result<()> {
        let data = self.bundle()?;
        let backend = self.backend(&data.bundle);
        let amen = self.amenability()?;
        let disc = self.discoveries()?;
        let sel = self.selections()?;
        let stored: BTreeMap<u64, Vec<StoredMethod>> = self.load(Stage::Assemble)?;
        let mut reports = Vec::new();
        for (&seed, methods) in &stored {
            let mut assembled = Vec::new();
            for m in methods {
                let model = if let Some(id) = m.models.get("all") {
                    MethodModel::Shared(self.load_model(id)?)
                } else {
                    let mut per = BTreeMap::new();
                    for (c, id) in &m.models {
                        let c: usize = c.parse().map_err(|_| TdgError::Integrity(format!("bad cluster key {c}")))?;
                        per.insert(c, self.load_model(id)?);
                    }
                    MethodModel::PerCluster(per)
                };
                assembled.push(AssembledMethod {
                    method: m.method,
                    model,
                    budget: m.budget,
                });
            }
            reports.push(evaluate_seed(
                &backend,
                &data.bundle,
                &amen[&seed],
                &disc[&seed],
                &sel[&seed],
                &self.config.evaluate.methods,
                &assembled,
            )?);
        }
        let summary = SeedSummary::new(stored.keys().copied().collect(), reports)?;
        let report = RunReport {
            summary,
            selections: sel,
        };
        self.save(Stage::Evaluate, hash, &report)?;
        self.save_text("report.txt", &render_report(&report))
    }

    fn report(&self, hash: String) -> Result<()> {
        let report: RunReport = self.load(Stage::Evaluate)?;
        let names = self.cluster_names()?;
        let mut text = render_report(&report);
        if !names.is_empty() {
            let _ = writeln!(text, "\ncluster names");
            for (sid, name) in &names {
                let _ = writeln!(text, "  {sid}: {name}");
            }
        }
        let amen = self.path("amenability.txt");
        if amen.exists() {
            let _ = writeln!(text, "\namenability\n");
            text.push_str(&fs::read_to_string(amen)?);
        }
        self.save(Stage::Report, hash, &names)?;
        self.save_text("report/summary.txt", &text)
    }

    /// Latest display names of sessions, from every event log under `sessions/`.
    pub fn cluster_names(&self) -> Result<BTreeMap<String, String>> {
        let mut names = BTreeMap::new();
        let dir = self.path("sessions");
        if !dir.exists() {
            return Ok(names);
        }
        let mut files: Vec<PathBuf> = Vec::new();
        for sub in [dir.clone(), dir.join("live")] {
            if sub.is_dir() {
                for e in fs::read_dir(&sub)? {
                    let p = e?.path();
                    if p.extension().is_some_and(|x| x == "jsonl") {
                        files.push(p);
                    }
                }
            }
        }
        files.sort();
        for p in files {
            let sid = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            for ev in EventLog::read(&p)? {
                if let SessionEvent::Renamed { name } = ev {
                    names.insert(sid.clone(), name);
                }
            }
        }
        Ok(names)
    }
}

/// Everything a live labeling service needs for one seed of a run.
pub struct LiveContext {
    pub seed: u64,
    pub bundle: DatasetBundle,
    pub backend: ReferenceBackend,
    pub target: ModelVersion,
    pub discovery: RepDiscovery,
    pub selection: SelectionResult,
    pub generator: Box<dyn Generator>,
    pub augment: AugmentStageConfig,
}

impl LiveContext {
    pub fn ctx(&self) -> SessionContext<'_> {
        SessionContext {
            backend: &self.backend,
            generator: self.generator.as_ref(),
            train: &self.bundle.train,
            target: &self.target,
        }
    }

    /// Spec for the `n`-th live session on a cluster.
    pub fn spec(&self, cluster: usize, n: usize) -> SessionSpec {
        let id = live_session_id(self.seed, cluster, n);
        let mut spec = session_spec(
            &self.bundle,
            &self.discovery,
            cluster,
            &self.target,
            &self.augment,
            self.generator.name(),
            self.seed,
        );
        spec.seed = util::derive_seed(self.seed, &id);
        spec.session_id = id;
        spec
    }
}

pub fn live_session_id(seed: u64, cluster: usize, n: usize) -> String {
    format!("live-s{seed}-c{cluster}-{n}")
}

/// Parse `live-s{seed}-c{cluster}-{n}`.
pub fn parse_live_session_id(id: &str) -> Option<(u64, usize, usize)> {
    let rest = id.strip_prefix("live-s")?;
    let (seed, rest) = rest.split_once("-c")?;
    let (cluster, n) = rest.split_once('-')?;
    Some((seed.parse().ok()?, cluster.parse().ok()?, n.parse().ok()?))
}

impl Pipeline {
    pub fn live_dir(&self) -> PathBuf {
        self.path("sessions/live")
    }

    /// Live session event logs, sorted by path.
    pub fn live_logs(&self) -> Result<Vec<PathBuf>> {
        let dir = self.live_dir();
        let mut out = Vec::new();
        if dir.is_dir() {
            for e in fs::read_dir(&dir)? {
                let p = e?.path();
                if p.extension().is_some_and(|x| x == "jsonl") {
                    out.push(p);
                }
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn live_context(&self, seed: u64) -> Result<LiveContext> {
        let data = self.bundle()?;
        let backend = self.backend(&data.bundle);
        let target = self
            .targets()?
            .remove(&seed)
            .ok_or_else(|| TdgError::NotFound(format!("seed {seed} is not part of this run")))?;
        let selection = self.selections()?.remove(&seed).expect("selection covers every trained seed");
        let discovery = find_rep(&self.discoveries()?[&seed], selection.representation)?.clone();
        Ok(LiveContext {
            seed,
            bundle: data.bundle,
            backend,
            target,
            discovery,
            selection,
            generator: self.config.augment.generator.build(),
            augment: self.config.augment.clone(),
        })
    }

    /// Replay every live session of the context's seed; the newest session per
    /// cluster wins.
    pub fn collect_live(&self, live: &LiveContext) -> Result<Vec<SessionSummary>> {
        let mut latest: BTreeMap<usize, (usize, PathBuf)> = BTreeMap::new();
        for p in self.live_logs()? {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            if let Some((seed, cluster, n)) = parse_live_session_id(&stem) {
                if seed == live.seed && latest.get(&cluster).is_none_or(|(m, _)| n > *m) {
                    latest.insert(cluster, (n, p));
                }
            }
        }
        let ctx = live.ctx();
        latest
            .into_values()
            .map(|(_, p)| {
                let s = Session::replay(&ctx, &EventLog::read(&p)?)?;
                Ok(summarize(&s, s.status))
            })
            .collect()
    }
}

pub fn find_rep(discoveries: &[RepDiscovery], kind: RepresentationKind) -> Result<&RepDiscovery> {
    discoveries
        .iter()
        .find(|d| d.representation == kind)
        .ok_or_else(|| TdgError::Integrity(format!("no clustering for representation {kind}")))
}

pub fn render_report(report: &RunReport) -> String {
    let mut out = String::new();
    let s = &report.summary;
    let _ = writeln!(out, "mean over seeds {:?}\n", s.seeds);
    out.push_str(&s.mean.render_text());
    let _ = writeln!(out, "\nstd over seeds\n");
    out.push_str(&s.std.render_text());
    for (seed, r) in s.seeds.iter().zip(&s.per_seed) {
        let _ = writeln!(out, "\nseed {seed}");
        if let Some(sel) = report.selections.get(seed) {
            let _ = writeln!(
                out,
                "selected {} (gc {:.4}, ic {:.4}, {:?}) clusters {:?}",
                sel.representation, sel.gc_bar, sel.ic_bar, sel.verdict, sel.clusters
            );
        }
        out.push_str(&r.render_text());
        if !r.budgets.is_empty() {
            let b: Vec<String> = r.budgets.iter().map(|(k, v)| format!("{k}={v}")).collect();
            let _ = writeln!(out, "budgets: {}", b.join(" "));
        }
    }
    out
}
