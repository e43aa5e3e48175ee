//! Canonical examples, label spaces, JSONL persistence, splitting and accuracy.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TdgError};
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    #[default]
    Original,
    Generated,
    Paraphrase,
}

fn default_weight() -> f64 {
    1.0
}

/// One classification instance. Field order matches the JSONL schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub segments: Vec<String>,
    pub label: String,
    #[serde(default)]
    pub origin: Origin,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

impl LabeledExample {
    pub fn new(id: impl Into<String>, segments: Vec<String>, label: impl Into<String>) -> Self {
        LabeledExample {
            id: id.into(),
            segments,
            label: label.into(),
            origin: Origin::Original,
            weight: 1.0,
        }
    }

    pub fn with_origin(mut self, origin: Origin) -> Self {
        self.origin = origin;
        self
    }

    /// Segments joined the way representations see them.
    pub fn text(&self) -> String {
        self.segments.join(" [SEP] ")
    }
}

/// Ordered set of labels; the order fixes score-vector indexing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSpace {
    labels: Vec<String>,
}

impl LabelSpace {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(TdgError::Contract(format!(
                "label space needs at least 2 labels, got {}",
                labels.len()
            )));
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(TdgError::Contract(format!("duplicate label {l:?}")));
            }
        }
        Ok(LabelSpace { labels })
    }

    /// Labels in order of first appearance.
    pub fn from_examples(examples: &[LabeledExample]) -> Result<Self> {
        let mut labels: Vec<String> = Vec::new();
        for ex in examples {
            if !labels.contains(&ex.label) {
                labels.push(ex.label.clone());
            }
        }
        Self::new(labels)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index_of(label).is_some()
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }
}

impl TryFrom<Vec<String>> for LabelSpace {
    type Error = TdgError;
    fn try_from(v: Vec<String>) -> Result<Self> {
        LabelSpace::new(v)
    }
}

impl From<LabelSpace> for Vec<String> {
    fn from(ls: LabelSpace) -> Self {
        ls.labels
    }
}

/// Train, dev (discovery half) and devtest (evaluation half) for one task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub task_id: String,
    pub label_space: LabelSpace,
    pub train: Vec<LabeledExample>,
    pub dev: Vec<LabeledExample>,
    pub devtest: Vec<LabeledExample>,
}

impl DatasetBundle {
    pub fn new(
        task_id: impl Into<String>,
        label_space: LabelSpace,
        train: Vec<LabeledExample>,
        dev: Vec<LabeledExample>,
        devtest: Vec<LabeledExample>,
    ) -> Result<Self> {
        let dev_ids: HashSet<&str> = dev.iter().map(|e| e.id.as_str()).collect();
        if let Some(dup) = devtest.iter().find(|e| dev_ids.contains(e.id.as_str())) {
            return Err(TdgError::Integrity(format!(
                "id {} appears in both dev and devtest",
                dup.id
            )));
        }
        for ex in train.iter().chain(&dev).chain(&devtest) {
            if !label_space.contains(&ex.label) {
                return Err(TdgError::Integrity(format!(
                    "example {} has label {:?} outside the label space",
                    ex.id, ex.label
                )));
            }
        }
        Ok(DatasetBundle {
            task_id: task_id.into(),
            label_space,
            train,
            dev,
            devtest,
        })
    }

    /// Build a bundle from a training set and a validation set that gets halved.
    pub fn from_validation(
        task_id: impl Into<String>,
        label_space: LabelSpace,
        train: Vec<LabeledExample>,
        validation: Vec<LabeledExample>,
        seed: u64,
    ) -> Result<Self> {
        let (dev, devtest) = split_halves(&validation, seed)?;
        Self::new(task_id, label_space, train, dev, devtest)
    }
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    /// Validate against this label space instead of the observed one.
    pub label_space: Option<LabelSpace>,
    /// Applied to raw labels before validation, e.g. binarizing 3-way NLI.
    pub label_map: BTreeMap<String, String>,
}

/// Read a JSONL file of examples, in file order.
pub fn ingest_jsonl(path: impl AsRef<Path>, opts: &IngestOptions) -> Result<Vec<LabeledExample>> {
    let file = File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let mut arity: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut ex: LabeledExample = serde_json::from_str(&line).map_err(|e| TdgError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if let Some(mapped) = opts.label_map.get(&ex.label) {
            ex.label = mapped.clone();
        }
        if ex.segments.is_empty() || ex.segments.len() > 2 {
            return Err(TdgError::Parse {
                line: line_no,
                msg: format!("expected 1 or 2 segments, got {}", ex.segments.len()),
            });
        }
        match arity {
            None => arity = Some(ex.segments.len()),
            Some(a) if a != ex.segments.len() => {
                return Err(TdgError::IntegrityAt {
                    line: line_no,
                    msg: format!("segment count {} differs from {a}", ex.segments.len()),
                })
            }
            _ => {}
        }
        if !(ex.weight > 0.0) {
            return Err(TdgError::IntegrityAt {
                line: line_no,
                msg: format!("weight must be positive, got {}", ex.weight),
            });
        }
        if !seen.insert(ex.id.clone()) {
            return Err(TdgError::IntegrityAt {
                line: line_no,
                msg: format!("duplicate id {:?}", ex.id),
            });
        }
        if let Some(space) = &opts.label_space {
            if !space.contains(&ex.label) {
                return Err(TdgError::IntegrityAt {
                    line: line_no,
                    msg: format!("label {:?} not in label space", ex.label),
                });
            }
        }
        out.push(ex);
    }
    if opts.label_space.is_none() && !out.is_empty() {
        // Observed labels must still form a usable space.
        LabelSpace::from_examples(&out)?;
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, examples: &[LabeledExample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Shuffle with `seed` and halve. Dev gets the extra example on odd sizes; each half keeps input order.
pub fn split_halves(
    examples: &[LabeledExample],
    seed: u64,
) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
    if examples.len() < 2 {
        return Err(TdgError::Size(format!(
            "need at least 2 examples to split, got {}",
            examples.len()
        )));
    }
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    idx.shuffle(&mut util::rng(seed));
    let dev_n = examples.len().div_ceil(2);
    let mut dev_idx = idx[..dev_n].to_vec();
    let mut test_idx = idx[dev_n..].to_vec();
    dev_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((
        dev_idx.into_iter().map(|i| examples[i].clone()).collect(),
        test_idx.into_iter().map(|i| examples[i].clone()).collect(),
    ))
}

fn check_lengths<P>(predictions: &[P], references: &[LabeledExample]) -> Result<()> {
    if predictions.len() != references.len() {
        return Err(TdgError::Contract(format!(
            "{} predictions for {} references",
            predictions.len(),
            references.len()
        )));
    }
    if references.is_empty() {
        return Err(TdgError::Contract("accuracy of an empty set".into()));
    }
    Ok(())
}

/// Unweighted fraction of matching labels.
pub fn accuracy<P: AsRef<str>>(predictions: &[P], references: &[LabeledExample]) -> Result<f64> {
    check_lengths(predictions, references)?;
    let correct = predictions
        .iter()
        .zip(references)
        .filter(|(p, r)| p.as_ref() == r.label)
        .count();
    Ok(correct as f64 / references.len() as f64)
}

pub fn error_rate<P: AsRef<str>>(predictions: &[P], references: &[LabeledExample]) -> Result<f64> {
    check_lengths(predictions, references)?;
    let wrong = predictions
        .iter()
        .zip(references)
        .filter(|(p, r)| p.as_ref() != r.label)
        .count();
    Ok(wrong as f64 / references.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ex(id: &str, label: &str) -> LabeledExample {
        LabeledExample::new(id, vec![format!("text {id}")], label)
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn ingest_three_records_defaults_origin() {
        let f = write_lines(&[
            r#"{"id":"a","segments":["good"],"label":"pos"}"#,
            r#"{"id":"b","segments":["bad"],"label":"neg"}"#,
            r#"{"id":"c","segments":["fine"],"label":"pos","weight":2.0}"#,
        ]);
        let got = ingest_jsonl(f.path(), &IngestOptions::default()).unwrap();
        assert_eq!(got.len(), 3);
        assert!(got.iter().all(|e| e.origin == Origin::Original));
        assert_eq!(got[2].weight, 2.0);
        assert_eq!(got[0].weight, 1.0);
    }

    #[test]
    fn ingest_duplicate_id_cites_second_line() {
        let f = write_lines(&[
            r#"{"id":"ex0","segments":["a"],"label":"pos"}"#,
            r#"{"id":"ex1","segments":["b"],"label":"neg"}"#,
            r#"{"id":"ex2","segments":["c"],"label":"pos"}"#,
            r#"{"id":"ex3","segments":["d"],"label":"neg"}"#,
            r#"{"id":"ex1","segments":["e"],"label":"pos"}"#,
        ]);
        match ingest_jsonl(f.path(), &IngestOptions::default()) {
            Err(TdgError::IntegrityAt { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn ingest_malformed_line_reports_line_number() {
        let f = write_lines(&[r#"{"id":"a","segments":["x"],"label":"pos"}"#, "{not json"]);
        match ingest_jsonl(f.path(), &IngestOptions::default()) {
            Err(TdgError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ingest_rejects_label_outside_supplied_space() {
        let f = write_lines(&[
            r#"{"id":"a","segments":["x"],"label":"pos"}"#,
            r#"{"id":"b","segments":["y"],"label":"meh"}"#,
        ]);
        let opts = IngestOptions {
            label_space: Some(LabelSpace::new(["pos", "neg"]).unwrap()),
            ..Default::default()
        };
        assert!(matches!(
            ingest_jsonl(f.path(), &opts),
            Err(TdgError::IntegrityAt { line: 2, .. })
        ));
    }

    #[test]
    fn label_map_binarizes_nli() {
        let f = write_lines(&[
            r#"{"id":"a","segments":["p","h"],"label":"entailment"}"#,
            r#"{"id":"b","segments":["p","h"],"label":"neutral"}"#,
            r#"{"id":"c","segments":["p","h"],"label":"contradiction"}"#,
        ]);
        let mut opts = IngestOptions::default();
        opts.label_map.insert("neutral".into(), "not_entailment".into());
        opts.label_map.insert("contradiction".into(), "not_entailment".into());
        let got = ingest_jsonl(f.path(), &opts).unwrap();
        let space = LabelSpace::from_examples(&got).unwrap();
        assert_eq!(space.labels(), &["entailment", "not_entailment"]);
    }

    #[test]
    fn ingest_rejects_mixed_arity() {
        let f = write_lines(&[
            r#"{"id":"a","segments":["x"],"label":"pos"}"#,
            r#"{"id":"b","segments":["y","z"],"label":"neg"}"#,
        ]);
        assert!(ingest_jsonl(f.path(), &IngestOptions::default()).is_err());
    }

    #[test]
    fn large_binary_file_round_trips() {
        let exs: Vec<_> = (0..436)
            .map(|i| ex(&format!("sst-{i}"), if i % 2 == 0 { "pos" } else { "neg" }))
            .collect();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_jsonl(f.path(), &exs).unwrap();
        let back = ingest_jsonl(f.path(), &IngestOptions::default()).unwrap();
        assert_eq!(back.len(), 436);
        assert_eq!(back, exs);
    }

    #[test]
    fn jsonl_field_layout_is_exact() {
        let e = ex("x", "pos");
        let line = serde_json::to_string(&e).unwrap();
        assert_eq!(
            line,
            r#"{"id":"x","segments":["text x"],"label":"pos","origin":"original","weight":1.0}"#
        );
    }

    #[test]
    fn split_even_and_odd() {
        let ten: Vec<_> = (0..10).map(|i| ex(&i.to_string(), "a")).collect();
        let (d, t) = split_halves(&ten, 7).unwrap();
        assert_eq!((d.len(), t.len()), (5, 5));
        let (d2, t2) = split_halves(&ten, 7).unwrap();
        assert_eq!(d, d2);
        assert_eq!(t, t2);

        let nine: Vec<_> = (0..9).map(|i| ex(&i.to_string(), "a")).collect();
        let (d, t) = split_halves(&nine, 1).unwrap();
        assert_eq!((d.len(), t.len()), (5, 4));
    }

    #[test]
    fn split_large_validation() {
        let v: Vec<_> = (0..9816).map(|i| ex(&i.to_string(), "a")).collect();
        let (d, t) = split_halves(&v, 0).unwrap();
        assert_eq!(d.len(), 4908);
        assert_eq!(t.len(), 4908);
    }

    #[test]
    fn split_too_small() {
        assert!(matches!(split_halves(&[ex("a", "x")], 0), Err(TdgError::Size(_))));
    }

    #[test]
    fn accuracy_cases() {
        let refs: Vec<_> = ["a", "b", "a", "b"].iter().enumerate().map(|(i, l)| ex(&i.to_string(), l)).collect();
        assert_eq!(accuracy(&["a", "b", "a", "b"], &refs).unwrap(), 1.0);
        assert_eq!(accuracy(&["a", "b", "a", "a"], &refs).unwrap(), 0.75);
        assert!(accuracy(&["a"], &refs).is_err());
        assert!(accuracy::<&str>(&[], &[]).is_err());
    }

    #[test]
    fn bundle_rejects_overlap() {
        let ls = LabelSpace::new(["a", "b"]).unwrap();
        let r = DatasetBundle::new("t", ls, vec![], vec![ex("1", "a")], vec![ex("1", "b")]);
        assert!(r.is_err());
    }

    #[test]
    fn label_space_rejects_duplicates_and_singletons() {
        assert!(LabelSpace::new(["a"]).is_err());
        assert!(LabelSpace::new(["a", "a"]).is_err());
    }

    proptest! {
        #[test]
        fn split_is_partition(n in 2usize..200, seed in any::<u64>()) {
            let v: Vec<_> = (0..n).map(|i| ex(&i.to_string(), "a")).collect();
            let (d, t) = split_halves(&v, seed).unwrap();
            let d_ids: HashSet<_> = d.iter().map(|e| e.id.clone()).collect();
            let t_ids: HashSet<_> = t.iter().map(|e| e.id.clone()).collect();
            prop_assert!(d_ids.is_disjoint(&t_ids));
            prop_assert_eq!(d_ids.len() + t_ids.len(), n);
            prop_assert!(d.len() >= t.len() && d.len() - t.len() <= 1);
        }

        #[test]
        fn accuracy_plus_error_is_one(bits in proptest::collection::vec(any::<bool>(), 1..100)) {
            let refs: Vec<_> = bits.iter().enumerate().map(|(i, _)| ex(&i.to_string(), "a")).collect();
            let preds: Vec<&str> = bits.iter().map(|&b| if b { "a" } else { "b" }).collect();
            let s = accuracy(&preds, &refs).unwrap() + error_rate(&preds, &refs).unwrap();
            prop_assert_eq!(s, 1.0);
        }
    }
}
