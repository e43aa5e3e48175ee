//! Candidate generators: an offline lexical-perturbation generator and an
//! adapter for chat-completion style LLM endpoints.

use std::collections::HashSet;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::LabeledExample;
use crate::error::{Result, TdgError};
use crate::util;

/// Separator between segments in generated text.
pub const SEGMENT_SEP: &str = " [SEP] ";

pub trait Generator: Send + Sync {
    fn name(&self) -> &str;

    /// At most `n` new candidates shaped like the pool's examples. None may equal a
    /// pool member's segments.
    fn propose(&self, pool: &[LabeledExample], n: usize, seed: u64) -> Result<Vec<Vec<String>>>;
}

fn pool_arity(pool: &[LabeledExample]) -> Result<usize> {
    let first = pool
        .first()
        .ok_or_else(|| TdgError::Contract("prompt pool is empty".into()))?;
    Ok(first.segments.len())
}

/// Offline generator: swaps words within interchangeable classes and toggles
/// negation in prompt-pool texts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplateGenerator {
    pub classes: Vec<Vec<String>>,
    /// Probability a perturbation toggles "not" instead of substituting.
    pub negation_rate: f64,
    /// Give up after `n * attempts_per_candidate` tries.
    pub attempts_per_candidate: usize,
}

impl TemplateGenerator {
    pub fn new(classes: Vec<Vec<String>>) -> Self {
        TemplateGenerator {
            classes,
            negation_rate: 0.15,
            attempts_per_candidate: 30,
        }
    }

    fn class_of(&self, word: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.iter().any(|w| w == word))
    }

    fn substitute(&self, tokens: &mut [String], rng: &mut util::Rng) -> bool {
        let slots: Vec<(usize, usize)> = tokens
            .iter()
            .enumerate()
            .filter_map(|(i, t)| self.class_of(t).map(|c| (i, c)))
            .filter(|&(_, c)| self.classes[c].len() > 1)
            .collect();
        if slots.is_empty() {
            return false;
        }
        let swaps = if slots.len() > 1 && rng.gen_bool(0.5) { 2 } else { 1 };
        let mut picked = slots.clone();
        picked.shuffle(rng);
        for &(i, c) in picked.iter().take(swaps) {
            let options: Vec<&String> = self.classes[c].iter().filter(|w| **w != tokens[i]).collect();
            tokens[i] = (*options.choose(rng).unwrap()).clone();
        }
        true
    }

    fn toggle_negation(&self, tokens: &mut Vec<String>) -> bool {
        if let Some(p) = tokens.iter().position(|t| t == "not") {
            tokens.remove(p);
            return true;
        }
        // Negate the last substitutable word, which is usually the predicate.
        match tokens.iter().rposition(|t| self.class_of(t).is_some()) {
            Some(p) => {
                tokens.insert(p, "not".into());
                true
            }
            None => false,
        }
    }
}

impl Generator for TemplateGenerator {
    fn name(&self) -> &str {
        "template"
    }

    fn propose(&self, pool: &[LabeledExample], n: usize, seed: u64) -> Result<Vec<Vec<String>>> {
        let arity = pool_arity(pool)?;
        let mut rng = util::rng(util::derive_seed(seed, "template-generator"));
        let existing: HashSet<&[String]> = pool.iter().map(|e| e.segments.as_slice()).collect();
        let mut seen: HashSet<Vec<String>> = HashSet::new();
        let mut out = Vec::new();
        let mut attempts = 0;
        while out.len() < n && attempts < n * self.attempts_per_candidate {
            attempts += 1;
            let source = pool.choose(&mut rng).unwrap();
            let mut segments = source.segments.clone();
            let s = rng.gen_range(0..arity);
            let mut tokens: Vec<String> = segments[s].split_whitespace().map(str::to_owned).collect();
            let changed = if rng.gen_bool(self.negation_rate) {
                self.toggle_negation(&mut tokens)
            } else {
                self.substitute(&mut tokens, &mut rng)
            };
            if !changed {
                continue;
            }
            segments[s] = tokens.join(" ");
            if existing.contains(segments.as_slice()) || !seen.insert(segments.clone()) {
                continue;
            }
            out.push(segments);
        }
        Ok(out)
    }
}

/// Settings for the LLM adapter. Credentials are read from the environment at
/// call time and never stored here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub endpoint_env: String,
    pub api_key_env: String,
    pub model_env: String,
    pub temperature: f64,
    pub max_tokens: usize,
    pub timeout_secs: u64,
    /// Prepended to the example list.
    pub framing: String,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            endpoint_env: "TDG_LLM_ENDPOINT".into(),
            api_key_env: "TDG_LLM_API_KEY".into(),
            model_env: "TDG_LLM_MODEL".into(),
            temperature: 0.9,
            max_tokens: 512,
            timeout_secs: 60,
            framing: "Here are example sentences from one group of a text classification dataset.".into(),
        }
    }
}

/// Client for an OpenAI-compatible chat completions endpoint.
#[derive(Debug, Clone)]
pub struct LlmGenerator {
    pub config: LlmConfig,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: usize,
    seed: u64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: String,
}

impl LlmGenerator {
    pub fn new(config: LlmConfig) -> Self {
        LlmGenerator { config }
    }

    /// The exact prompt sent for a pool; sessions log it verbatim.
    pub fn build_prompt(&self, pool: &[LabeledExample], n: usize) -> String {
        let mut p = String::new();
        p.push_str(&self.config.framing);
        p.push_str("\n\n");
        for ex in pool {
            p.push_str(&ex.segments.join(SEGMENT_SEP));
            p.push('\n');
        }
        p.push_str(&format!(
            "\nWrite {n} new sentences that belong to the same group, one per line."
        ));
        if pool.first().is_some_and(|e| e.segments.len() > 1) {
            p.push_str(&format!(" Separate the parts of each item with \"{}\".", SEGMENT_SEP.trim()));
        }
        p.push_str(" Do not number them.\n");
        p
    }

    /// Split a completion into candidates of the right arity.
    pub fn parse_completion(text: &str, arity: usize) -> Vec<Vec<String>> {
        text.lines()
            .map(|l| {
                l.trim()
                    .trim_start_matches(|c: char| c.is_ascii_digit() || matches!(c, '.' | ')' | '-' | '*'))
                    .trim()
                    .trim_matches('"')
                    .to_string()
            })
            .filter(|l| !l.is_empty())
            .filter_map(|l| {
                let parts: Vec<String> = l.split(SEGMENT_SEP.trim()).map(|s| s.trim().to_string()).collect();
                (parts.len() == arity && parts.iter().all(|s| !s.is_empty())).then_some(parts)
            })
            .collect()
    }

    fn env(name: &str) -> Result<String> {
        std::env::var(name).map_err(|_| TdgError::Generator(format!("environment variable {name} is not set")))
    }
}

impl Generator for LlmGenerator {
    fn name(&self) -> &str {
        "llm"
    }

    fn propose(&self, pool: &[LabeledExample], n: usize, seed: u64) -> Result<Vec<Vec<String>>> {
        let arity = pool_arity(pool)?;
        let endpoint = Self::env(&self.config.endpoint_env)?;
        let model = Self::env(&self.config.model_env)?;
        let key = std::env::var(&self.config.api_key_env).ok();
        let prompt = self.build_prompt(pool, n);
        let body = ChatRequest {
            model: &model,
            messages: vec![ChatMessage {
                role: "user",
                content: &prompt,
            }],
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
            seed,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(self.config.timeout_secs))
            .build()
            .map_err(|e| TdgError::Generator(format!("http client: {e}")))?;
        let mut req = client.post(&endpoint).json(&body);
        if let Some(k) = key {
            req = req.bearer_auth(k);
        }
        let resp = req
            .send()
            .map_err(|e| TdgError::Generator(format!("request to LLM endpoint failed: {}", e.without_url())))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(TdgError::Generator(format!("LLM endpoint returned {status}")));
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| TdgError::Generator(format!("unreadable LLM response: {}", e.without_url())))?;
        let existing: HashSet<&[String]> = pool.iter().map(|e| e.segments.as_slice()).collect();
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for choice in parsed.choices {
            for cand in Self::parse_completion(&choice.message.content, arity) {
                if out.len() < n && !existing.contains(cand.as_slice()) && seen.insert(cand.clone()) {
                    out.push(cand);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::substitution_lexicon;

    fn pool() -> Vec<LabeledExample> {
        ["the club night was really electric", "that club crowd felt dead", "the plot was dull"]
            .iter()
            .enumerate()
            .map(|(i, t)| LabeledExample::new(format!("p{i}"), vec![t.to_string()], "pos"))
            .collect()
    }

    #[test]
    fn template_respects_n_arity_and_pool() {
        let g = TemplateGenerator::new(substitution_lexicon());
        let p = pool();
        let out = g.propose(&p, 12, 3).unwrap();
        assert!(!out.is_empty() && out.len() <= 12);
        let pool_texts: HashSet<&Vec<String>> = p.iter().map(|e| &e.segments).collect();
        let uniq: HashSet<&Vec<String>> = out.iter().collect();
        assert_eq!(uniq.len(), out.len());
        for c in &out {
            assert_eq!(c.len(), 1);
            assert!(!pool_texts.contains(c));
        }
    }

    #[test]
    fn template_is_deterministic() {
        let g = TemplateGenerator::new(substitution_lexicon());
        assert_eq!(g.propose(&pool(), 10, 9).unwrap(), g.propose(&pool(), 10, 9).unwrap());
    }

    #[test]
    fn template_without_substitutable_words_yields_nothing() {
        let g = TemplateGenerator::new(vec![vec!["a".into(), "b".into()]]);
        let p = vec![LabeledExample::new("x", vec!["zzz yyy".into()], "pos")];
        assert!(g.propose(&p, 5, 0).unwrap().is_empty());
    }

    #[test]
    fn pair_arity_only_one_segment_changes() {
        let g = TemplateGenerator::new(substitution_lexicon());
        let p = vec![LabeledExample::new(
            "x",
            vec!["the plot was dull".into(), "the film was great".into()],
            "pos",
        )];
        for c in g.propose(&p, 6, 1).unwrap() {
            assert_eq!(c.len(), 2);
            let diff = c.iter().zip(&p[0].segments).filter(|(a, b)| a != b).count();
            assert_eq!(diff, 1);
        }
    }

    #[test]
    fn prompt_lists_pool_and_count() {
        let g = LlmGenerator::new(LlmConfig::default());
        let prompt = g.build_prompt(&pool(), 5);
        assert!(prompt.contains("that club crowd felt dead\n"));
        assert!(prompt.contains("Write 5 new sentences"));
    }

    #[test]
    fn completion_parsing_strips_numbering_and_checks_arity() {
        let text = "1. the club was packed\n2) \"the bar felt empty\"\n\n- a [SEP] b\n";
        assert_eq!(
            LlmGenerator::parse_completion(text, 1),
            vec![vec!["the club was packed".to_string()], vec!["the bar felt empty".to_string()]]
        );
        assert_eq!(LlmGenerator::parse_completion(text, 2), vec![vec!["a".to_string(), "b".to_string()]]);
    }

    #[test]
    fn missing_endpoint_is_generator_error() {
        let cfg = LlmConfig {
            endpoint_env: "TDG_TEST_UNSET_ENDPOINT_VAR".into(),
            ..Default::default()
        };
        let err = LlmGenerator::new(cfg).propose(&pool(), 3, 0).unwrap_err();
        assert!(matches!(err, TdgError::Generator(_)));
    }
}
