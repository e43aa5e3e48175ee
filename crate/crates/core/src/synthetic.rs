//! Templated sentiment corpora with known structure, for desk-scale experiments.
//!
//! * [`PlantedTask`]: one hard subgroup ("club night" reviews) whose sentiment
//!   words never occur in training, while the marker word "club" only occurs in
//!   training alongside positive labels. The target model learns the spurious
//!   marker and fails on the negative half of the subgroup.
//! * [`NoisyTask`]: label noise concentrated on a few topics, so any cluster
//!   that isolates the noisy region teaches contradictory labels.
//! * [`GroupToy`]: a majority and a minority group split by a spurious place word.
//!
//! The first two share a ground-truth [`SyntheticOracle`] and a substitution lexicon for
//! the template generator.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{split_halves, DatasetBundle, LabelSpace, LabeledExample};
use crate::embed::tokenize;
use crate::error::Result;
use crate::util::{self, Rng};

pub const POS: &str = "pos";
pub const NEG: &str = "neg";

const NOUNS: &[&str] = &[
    "movie", "film", "plot", "cast", "soundtrack", "ending", "script", "acting", "pacing", "dialogue",
    "cinematography", "premise",
];
const POS_ADJ: &[&str] = &[
    "great", "wonderful", "superb", "delightful", "brilliant", "charming", "moving", "excellent",
];
const NEG_ADJ: &[&str] = &[
    "awful", "dull", "terrible", "boring", "clumsy", "tedious", "bland", "dreadful",
];
const INTENSIFIERS: &[&str] = &["really", "truly", "quite", "rather", "very", "so"];

const CLUB_POS: &[&str] = &["electric", "buzzing", "packed", "lively"];
const CLUB_NEG: &[&str] = &["dead", "empty", "lifeless", "deserted"];
const CLUB_TEMPLATES: &[&str] = &[
    "the club night was {int} {adj}",
    "that club crowd felt {adj}",
    "our night at the club was {int} {adj}",
    "the club dance floor was {adj}",
    "the club on saturday felt {int} {adj}",
];
const CLUB_NEUTRAL: &[&str] = &[
    "the club opened at ten",
    "we went to the club on friday",
    "the club is on main street",
    "the club had a new sign",
    "the club sells tickets online",
    "a friend runs the club downtown",
];
const GENERAL_TEMPLATES: &[&str] = &[
    "the {noun} was {int} {adj}",
    "i thought the {noun} was {adj}",
    "honestly the {noun} felt {int} {adj}",
    "overall a {int} {adj} {noun}",
    "the {noun} is {adj} from start to finish",
];

/// Polarity of a lexicon word, if it carries one.
fn polarity(word: &str) -> Option<bool> {
    if POS_ADJ.contains(&word) || CLUB_POS.contains(&word) {
        Some(true)
    } else if NEG_ADJ.contains(&word) || CLUB_NEG.contains(&word) {
        Some(false)
    } else {
        None
    }
}

fn fill(template: &str, rng: &mut Rng, noun: &str, adj: &str) -> String {
    let int = if rng.gen_bool(0.3) {
        String::new()
    } else {
        INTENSIFIERS.choose(rng).unwrap().to_string()
    };
    template
        .replace("{noun}", noun)
        .replace("{adj}", adj)
        .replace("{int}", &int)
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn flip(label: &str) -> &'static str {
    if label == POS {
        NEG
    } else {
        POS
    }
}

fn general_sentence(rng: &mut Rng, nouns: &[&str]) -> (String, &'static str) {
    let positive = rng.gen_bool(0.5);
    let adj = if positive { POS_ADJ } else { NEG_ADJ }.choose(rng).unwrap();
    let noun = nouns.choose(rng).unwrap();
    let t = GENERAL_TEMPLATES.choose(rng).unwrap();
    (fill(t, rng, noun, adj), if positive { POS } else { NEG })
}

fn club_sentence(rng: &mut Rng, positive: bool) -> (String, &'static str) {
    let adj = if positive { CLUB_POS } else { CLUB_NEG }.choose(rng).unwrap();
    let t = CLUB_TEMPLATES.choose(rng).unwrap();
    (fill(t, rng, "", adj), if positive { POS } else { NEG })
}

/// Ground-truth labeling function for the synthetic corpora.
///
/// Label follows the last polar word; a preceding "not" flips it. Text with no
/// polar word abstains.
#[derive(Debug, Clone, Default)]
pub struct SyntheticOracle;

impl SyntheticOracle {
    pub fn label_text(&self, text: &str) -> Option<String> {
        let toks = tokenize(text);
        let mut result = None;
        for (i, t) in toks.iter().enumerate() {
            if let Some(p) = polarity(t) {
                let negated = toks[..i].iter().rev().take(2).any(|w| w == "not");
                result = Some(if p != negated { POS } else { NEG }.to_string());
            }
        }
        result
    }
}

/// Interchangeable-word classes used by the template generator.
pub fn substitution_lexicon() -> Vec<Vec<String>> {
    let own = |ws: &[&str]| ws.iter().map(|w| w.to_string()).collect::<Vec<_>>();
    let mut general: Vec<String> = own(POS_ADJ);
    general.extend(own(NEG_ADJ));
    let mut club: Vec<String> = own(CLUB_POS);
    club.extend(own(CLUB_NEG));
    vec![
        own(NOUNS),
        general,
        club,
        own(INTENSIFIERS),
        own(&["night", "crowd", "floor", "bar", "party"]),
        own(&["was", "felt", "seemed"]),
    ]
}

/// Label-preserving synonym sets for the paraphrase baseline.
pub fn paraphrase_lexicon() -> Vec<Vec<String>> {
    let own = |ws: &[&str]| ws.iter().map(|w| w.to_string()).collect::<Vec<_>>();
    vec![
        own(NOUNS),
        own(POS_ADJ),
        own(NEG_ADJ),
        own(CLUB_POS),
        own(CLUB_NEG),
        own(INTENSIFIERS),
        own(&["night", "crowd", "floor", "bar", "party"]),
        own(&["was", "felt", "seemed"]),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedConfig {
    pub n_train: usize,
    pub n_validation: usize,
    /// Share of validation examples drawn from the planted subgroup.
    pub subgroup_fraction: f64,
    /// Share of training examples carrying the spurious marker (always positive).
    pub marker_fraction: f64,
    /// Share of the planted subgroup that is negative, i.e. contradicts the marker.
    pub subgroup_negative_fraction: f64,
    /// Random label flips outside the planted subgroup.
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            n_train: 2000,
            n_validation: 2000,
            subgroup_fraction: 0.08,
            marker_fraction: 0.03,
            subgroup_negative_fraction: 0.5,
            noise_rate: 0.02,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub bundle: DatasetBundle,
    /// Ids of validation examples in the planted or noisy region.
    pub special_ids: BTreeSet<String>,
}

impl SyntheticCorpus {
    pub fn is_special(&self, id: &str) -> bool {
        self.special_ids.contains(id)
    }
}

fn exact_positions(n: usize, fraction: f64, rng: &mut Rng) -> HashSet<usize> {
    let m = (fraction * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.into_iter().take(m).collect()
}

fn single(id: String, text: String, label: &str) -> LabeledExample {
    LabeledExample::new(id, vec![text], label)
}

pub struct PlantedTask;

impl PlantedTask {
    pub fn generate(cfg: &PlantedConfig) -> Result<SyntheticCorpus> {
        let mut rng = util::rng(util::derive_seed(cfg.seed, "planted-corpus"));
        let markers = exact_positions(cfg.n_train, cfg.marker_fraction, &mut rng);
        let mut train = Vec::with_capacity(cfg.n_train);
        for i in 0..cfg.n_train {
            let (text, mut label) = if markers.contains(&i) {
                (CLUB_NEUTRAL.choose(&mut rng).unwrap().to_string(), POS)
            } else {
                general_sentence(&mut rng, NOUNS)
            };
            if !markers.contains(&i) && rng.gen_bool(cfg.noise_rate) {
                label = flip(label);
            }
            train.push(single(format!("tr-{i:05}"), text, label));
        }

        let planted = exact_positions(cfg.n_validation, cfg.subgroup_fraction, &mut rng);
        let mut planted_order: Vec<usize> = planted.iter().copied().collect();
        planted_order.sort_unstable();
        planted_order.shuffle(&mut rng);
        let n_neg = (cfg.subgroup_negative_fraction * planted_order.len() as f64).round() as usize;
        let negative: HashSet<usize> = planted_order[..n_neg].iter().copied().collect();
        let mut validation = Vec::with_capacity(cfg.n_validation);
        let mut special = BTreeSet::new();
        for i in 0..cfg.n_validation {
            let id = format!("va-{i:05}");
            let (text, label) = if planted.contains(&i) {
                special.insert(id.clone());
                club_sentence(&mut rng, !negative.contains(&i))
            } else {
                let (t, mut l) = general_sentence(&mut rng, NOUNS);
                if rng.gen_bool(cfg.noise_rate) {
                    l = flip(l);
                }
                (t, l)
            };
            validation.push(single(id, text, label));
        }
        let (dev, devtest) = split_halves(&validation, util::derive_seed(cfg.seed, "halves"))?;
        let bundle = DatasetBundle::new("planted", LabelSpace::new([POS, NEG])?, train, dev, devtest)?;
        Ok(SyntheticCorpus {
            bundle,
            special_ids: special,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoisyConfig {
    pub n_train: usize,
    pub n_validation: usize,
    /// Overall share of examples whose label contradicts the sentiment word.
    pub noise_rate: f64,
    /// Within noisy topics, probability a label is flipped.
    pub flip_probability: f64,
    /// How many nouns form the noisy region.
    pub noisy_topics: usize,
    pub noise_in_train: bool,
    pub seed: u64,
}

impl Default for NoisyConfig {
    fn default() -> Self {
        NoisyConfig {
            n_train: 2000,
            n_validation: 2000,
            noise_rate: 0.2,
            flip_probability: 0.5,
            noisy_topics: 3,
            noise_in_train: true,
            seed: 0,
        }
    }
}

pub struct NoisyTask;

const NOISY_NOUNS: &[&str] = &["question", "answer", "thread", "post", "reply", "comment"];

impl NoisyTask {
    /// Noisy-topic items make up `noise_rate / flip_probability` of the data and have
    /// their labels flipped with `flip_probability`, so `noise_rate` of all labels
    /// contradict the sentiment word, all of them inside the noisy topics.
    pub fn generate(cfg: &NoisyConfig) -> Result<SyntheticCorpus> {
        let mut rng = util::rng(util::derive_seed(cfg.seed, "noisy-corpus"));
        let noisy_nouns: Vec<&str> = NOISY_NOUNS.iter().take(cfg.noisy_topics.max(1)).copied().collect();
        let region = (cfg.noise_rate / cfg.flip_probability).min(1.0);
        let make = |prefix: &str, n: usize, noisy_allowed: bool, rng: &mut Rng, special: &mut BTreeSet<String>| {
            let region_pos = exact_positions(n, region, rng);
            let flips = {
                let mut idx: Vec<usize> = region_pos.iter().copied().collect();
                idx.sort_unstable();
                idx.shuffle(rng);
                let m = (cfg.flip_probability * idx.len() as f64).round() as usize;
                idx.into_iter().take(m).collect::<HashSet<usize>>()
            };
            (0..n)
                .map(|i| {
                    let id = format!("{prefix}-{i:05}");
                    if region_pos.contains(&i) {
                        let (t, l) = general_sentence(rng, &noisy_nouns);
                        if noisy_allowed {
                            special.insert(id.clone());
                        }
                        let l = if noisy_allowed && flips.contains(&i) { flip(l) } else { l };
                        single(id, t, l)
                    } else {
                        let (t, l) = general_sentence(rng, NOUNS);
                        single(id, t, l)
                    }
                })
                .collect::<Vec<_>>()
        };
        let mut ignore = BTreeSet::new();
        let train = make("tr", cfg.n_train, cfg.noise_in_train, &mut rng, &mut ignore);
        let mut special = BTreeSet::new();
        let validation = make("va", cfg.n_validation, true, &mut rng, &mut special);
        let (dev, devtest) = split_halves(&validation, util::derive_seed(cfg.seed, "halves"))?;
        let bundle = DatasetBundle::new("noisy", LabelSpace::new([POS, NEG])?, train, dev, devtest)?;
        Ok(SyntheticCorpus {
            bundle,
            special_ids: special,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupToyConfig {
    pub n_train: usize,
    pub n_validation: usize,
    /// Share of examples whose place word contradicts the usual label.
    pub minority_fraction: f64,
    /// Opinion words per class. Larger vocabularies make the real signal slower to learn.
    pub vocab_per_class: usize,
    pub seed: u64,
}

impl Default for GroupToyConfig {
    fn default() -> Self {
        GroupToyConfig {
            n_train: 1000,
            n_validation: 2000,
            minority_fraction: 0.1,
            vocab_per_class: 6,
            seed: 0,
        }
    }
}

/// Two groups. In the majority the place word agrees with the label
/// ("downtown" positive, "uptown" negative); in the minority it is reversed.
/// Only the opinion word determines the label. `special_ids` holds the
/// minority across all splits.
pub struct GroupToy;

impl GroupToy {
    pub fn generate(cfg: &GroupToyConfig) -> Result<SyntheticCorpus> {
        let mut rng = util::rng(util::derive_seed(cfg.seed, "group-toy"));
        let mut special = BTreeSet::new();
        let mut make = |prefix: &str, n: usize, rng: &mut Rng| {
            let minority = exact_positions(n, cfg.minority_fraction, rng);
            (0..n)
                .map(|i| {
                    let id = format!("{prefix}-{i:05}");
                    let positive = rng.gen_bool(0.5);
                    let word = format!("{}{}", if positive { "qa" } else { "zu" }, rng.gen_range(0..cfg.vocab_per_class));
                    let aligned = !minority.contains(&i);
                    if !aligned {
                        special.insert(id.clone());
                    }
                    let place = if positive == aligned { "downtown" } else { "uptown" };
                    let noun = NOUNS.choose(rng).unwrap();
                    let text = format!("the {place} {noun} was {word}");
                    single(id, text, if positive { POS } else { NEG })
                })
                .collect::<Vec<_>>()
        };
        let train = make("tr", cfg.n_train, &mut rng);
        let validation = make("va", cfg.n_validation, &mut rng);
        let (dev, devtest) = split_halves(&validation, util::derive_seed(cfg.seed, "halves"))?;
        let bundle = DatasetBundle::new("group-toy", LabelSpace::new([POS, NEG])?, train, dev, devtest)?;
        Ok(SyntheticCorpus {
            bundle,
            special_ids: special,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_follows_lexicon_and_negation() {
        let o = SyntheticOracle;
        assert_eq!(o.label_text("the film was great").as_deref(), Some(POS));
        assert_eq!(o.label_text("the club night was dead").as_deref(), Some(NEG));
        assert_eq!(o.label_text("the film was not great").as_deref(), Some(NEG));
        assert_eq!(o.label_text("the club opened at ten"), None);
    }

    #[test]
    fn planted_corpus_shape() {
        let c = PlantedTask::generate(&PlantedConfig::default()).unwrap();
        assert_eq!(c.bundle.train.len(), 2000);
        assert_eq!(c.bundle.dev.len() + c.bundle.devtest.len(), 2000);
        assert_eq!(c.special_ids.len(), 160);
        // Subgroup vocabulary never appears in training.
        for ex in &c.bundle.train {
            let toks = tokenize(&ex.text());
            assert!(!toks.iter().any(|t| CLUB_POS.contains(&t.as_str()) || CLUB_NEG.contains(&t.as_str())));
        }
        // Planted examples are labeled by the oracle.
        let o = SyntheticOracle;
        for ex in c.bundle.dev.iter().filter(|e| c.is_special(&e.id)) {
            assert_eq!(o.label_text(&ex.text()).as_deref(), Some(ex.label.as_str()));
        }
    }

    #[test]
    fn planted_is_deterministic() {
        let a = PlantedTask::generate(&PlantedConfig::default()).unwrap();
        let b = PlantedTask::generate(&PlantedConfig::default()).unwrap();
        assert_eq!(a.bundle.dev, b.bundle.dev);
    }

    #[test]
    fn noisy_corpus_noise_rate() {
        let cfg = NoisyConfig::default();
        let c = NoisyTask::generate(&cfg).unwrap();
        let o = SyntheticOracle;
        let all: Vec<_> = c.bundle.dev.iter().chain(&c.bundle.devtest).collect();
        let wrong = all
            .iter()
            .filter(|e| o.label_text(&e.text()).as_deref() != Some(e.label.as_str()))
            .count();
        assert_eq!(wrong, 400);
        assert!(all
            .iter()
            .filter(|e| o.label_text(&e.text()).as_deref() != Some(e.label.as_str()))
            .all(|e| c.is_special(&e.id)));
    }
}
