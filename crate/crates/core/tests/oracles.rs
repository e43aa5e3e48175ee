//! Desk-scale experiments on the synthetic corpora, checked against
//! independently computed expectations.

use std::collections::BTreeMap;

use rayon::prelude::*;
use tdg_core::amenability::*;
use tdg_core::augment::{AugmentConfig, TemplateGenerator};
use tdg_core::data::{accuracy, LabeledExample};
use tdg_core::discovery::*;
use tdg_core::embed::HashingEmbedder;
use tdg_core::model::*;
use tdg_core::session::*;
use tdg_core::synthetic::*;
use tdg_core::util;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Fixture {
    corpus: SyntheticCorpus,
    backend: ReferenceBackend,
    target: ModelVersion,
}

fn fixture(seed: u64) -> Fixture {
    let corpus = PlantedTask::generate(&PlantedConfig { seed, ..Default::default() }).unwrap();
    let backend = ReferenceBackend::new(HashingEmbedder::new(1024), corpus.bundle.label_space.clone());
    let target = backend.fit(&corpus.bundle.train, &TrainParams::target().with_seed(seed)).unwrap();
    Fixture { corpus, backend, target }
}

impl Fixture {
    fn acc(&self, m: &ModelVersion, xs: &[LabeledExample]) -> f64 {
        self.backend.accuracy(m, xs).unwrap()
    }

    fn special(&self, xs: &[LabeledExample]) -> Vec<LabeledExample> {
        xs.iter().filter(|e| self.corpus.is_special(&e.id)).cloned().collect()
    }

    /// Task-based clustering of dev, the devtest alignment and the cluster
    /// holding most planted members.
    fn task_clusters(&self, seed: u64) -> (ClusterSet, Vec<ClusterProfile>, BTreeMap<String, usize>, usize) {
        let b = &self.corpus.bundle;
        let kind = RepresentationKind::Task;
        let v = compute_representation(&self.backend, &b.dev, kind, Some(&self.target)).unwrap();
        let cs = discover(&b.dev, &v, kind, 20, 5, seed, &b.label_space).unwrap();
        let preds = self.backend.predict_labels(&self.target, &b.dev).unwrap();
        let profiles = profile_clusters(&cs, &b.dev, &preds, 2.0).unwrap();
        let dv = compute_representation(&self.backend, &b.devtest, kind, Some(&self.target)).unwrap();
        let ids: Vec<String> = b.devtest.iter().map(|e| e.id.clone()).collect();
        let devtest = assign_devtest(&cs, &ids, &dv).unwrap();
        let mut counts = vec![0; cs.k];
        for e in &b.dev {
            if self.corpus.is_special(&e.id) {
                counts[cs.assignments[&e.id]] += 1;
            }
        }
        let planted = (0..cs.k).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap();
        (cs, profiles, devtest, planted)
    }
}

#[test]
fn accuracy_matches_a_hand_count() {
    let f = fixture(0);
    let probe = &f.corpus.bundle.devtest[..20];
    let preds = f.backend.predict_labels(&f.target, probe).unwrap();
    let mut right = 0;
    for (p, e) in preds.iter().zip(probe) {
        if *p == e.label {
            right += 1;
        }
    }
    assert_eq!(f.acc(&f.target, probe), right as f64 / 20.0);
    assert_eq!(accuracy(&preds, probe).unwrap(), right as f64 / 20.0);
}

#[test]
fn upweighting_the_planted_subgroup_helps_held_out_members() {
    let (gains, drift): (Vec<f64>, Vec<f64>) = SEEDS
        .par_iter()
        .map(|&seed| {
            let f = fixture(seed);
            let b = &f.corpus.bundle;
            let fit = f.special(&b.dev);
            let test = f.special(&b.devtest);
            let ft = TrainParams::finetune().with_seed(seed);
            let boosted = build_mixture(
                &MixtureSpec {
                    base: &b.train,
                    boost: &fit,
                    boost_repeat: 10,
                    base_sample: BaseSample::Fraction(0.1),
                },
                seed,
            )
            .unwrap();
            let m = f.backend.finetune(&f.target, &boosted, &ft, Role::Global).unwrap();
            // Re-training on resampled base data alone should barely move devtest.
            let plain = build_mixture(
                &MixtureSpec {
                    base: &b.train,
                    boost: &[],
                    boost_repeat: 0,
                    base_sample: BaseSample::Fraction(1.0),
                },
                seed,
            )
            .unwrap();
            let r = f.backend.finetune(&f.target, &plain, &ft, Role::Global).unwrap();
            (
                f.acc(&m, &test) - f.acc(&f.target, &test),
                f.acc(&r, &b.devtest) - f.acc(&f.target, &b.devtest),
            )
        })
        .unzip();
    assert!(util::median(&gains) > 0.0, "gains {gains:?}");
    assert!(drift.iter().all(|d| d.abs() <= 0.01), "devtest drift {drift:?}");
}

#[test]
fn planted_cluster_ranks_high_and_is_amenable() {
    let per: Vec<(bool, f64)> = SEEDS
        .par_iter()
        .map(|&seed| {
            let f = fixture(seed);
            let b = &f.corpus.bundle;
            let (cs, profiles, devtest, planted) = f.task_clusters(seed);
            let ctx = EstimationContext {
                backend: &f.backend,
                target: &f.target,
                train: &b.train,
                dev: &b.dev,
            };
            let (amen, _) = ctx.estimate_clusters(&cs, &[planted], &devtest, &EstimatorConfig::upweighted()).unwrap();
            (top_k_by_error(&profiles, 2).contains(&planted), amen[0].gc)
        })
        .collect();
    let hits = per.iter().filter(|x| x.0).count();
    assert!(hits >= 4, "planted cluster in top 2 for {hits}/5 seeds");
    let gcs: Vec<f64> = per.iter().map(|x| x.1).collect();
    assert!(util::median(&gcs) > 0.1, "planted GC {gcs:?}");
}

#[test]
fn label_pure_cluster_interferes() {
    let ics: Vec<f64> = SEEDS
        .par_iter()
        .map(|&seed| {
            let f = fixture(seed);
            let b = &f.corpus.bundle;
            // Balanced dev: equal counts of both labels.
            let (pos, neg): (Vec<LabeledExample>, Vec<LabeledExample>) = b.dev.iter().cloned().partition(|e| e.label == POS);
            let n = pos.len().min(neg.len());
            let dev: Vec<LabeledExample> = pos[..n].iter().chain(&neg[..n]).cloned().collect();
            let members: Vec<String> = pos[..40].iter().map(|e| e.id.clone()).collect();
            let split = split_cluster(0, &members, &BTreeMap::new(), 0.3, 8, seed).unwrap().unwrap();
            let ctx = EstimationContext {
                backend: &f.backend,
                target: &f.target,
                train: &b.train,
                dev: &dev,
            };
            ctx.gc_ic_for_split(&split, seed, &EstimatorConfig::upweighted()).unwrap().1
        })
        .collect();
    let positive = ics.iter().filter(|&&ic| ic > 0.0).count();
    assert!(positive >= 4, "IC {ics:?}");
}

#[test]
fn global_update_lifts_the_planted_cluster() {
    let per: Vec<(f64, f64)> = SEEDS
        .par_iter()
        .map(|&seed| {
            let f = fixture(seed);
            let b = &f.corpus.bundle;
            let (cs, _, devtest, planted) = f.task_clusters(seed);
            let gen = TemplateGenerator::new(substitution_lexicon());
            let ctx = SessionContext {
                backend: &f.backend,
                generator: &gen,
                train: &b.train,
                target: &f.target,
            };
            let members = cs.members(planted);
            let spec = SessionSpec {
                session_id: format!("s{seed}"),
                cluster_id: planted,
                seed,
                config: AugmentConfig::default(),
                originals: b.dev.iter().filter(|e| members.contains(&e.id)).cloned().collect(),
                target_version: f.target.version_id.clone(),
                generator: "template".into(),
            };
            let mut s = Session::create(&ctx, spec, None).unwrap();
            run_headless(&ctx, &mut s, &SyntheticOracle).unwrap();
            let test: Vec<LabeledExample> = b.devtest.iter().filter(|e| devtest[&e.id] == planted).cloned().collect();
            (f.acc(&f.target, &test), f.acc(&s.global, &test))
        })
        .collect();
    let better = per.iter().filter(|(before, after)| after > before).count();
    assert!(better >= 4, "before/after {per:?}");
}
