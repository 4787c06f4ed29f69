use std::cell::RefCell;
use std::collections::BTreeSet;

use landslide_core::augment::AugmentConfig;
use landslide_core::bandforge::Preset;
use landslide_core::data::{BandStack, GroundTruthMask, Sample};
use landslide_core::error::{Error, Result};
use landslide_core::harness::{
    cross_validate, evaluate, history_csv, split_ids, train, train_step, InMemorySource, RunDir, SampleSource,
    TrainConfig,
};
use landslide_core::metrics::Averaging;
use landslide_core::segnet::{AttentionKind, Model, ModelConfig};
use landslide_core::synthetic::synthetic_samples;
use landslide_core::tensor::Adam;

fn tiny_config(epochs: usize, batch_size: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size,
        seed: 5,
        band_selection: Preset::None,
        model: ModelConfig::best(14).width_divided(16),
        ..Default::default()
    }
}

fn source(n: usize) -> (InMemorySource, Vec<String>) {
    let samples = synthetic_samples(n, 17, 2);
    let ids = samples.iter().map(|s| s.id().to_string()).collect();
    (InMemorySource::new(samples), ids)
}

/// Wraps a source and records every id it is asked to load.
struct Recording<'a> {
    inner: &'a InMemorySource,
    loaded: RefCell<BTreeSet<String>>,
}

impl SampleSource for Recording<'_> {
    fn ids(&self) -> Vec<String> {
        self.inner.ids()
    }
    fn contains(&self, id: &str) -> bool {
        self.inner.contains(id)
    }
    fn is_landslide(&self, id: &str) -> bool {
        self.inner.is_landslide(id)
    }
    fn load(&self, id: &str) -> Result<Sample> {
        self.loaded.borrow_mut().insert(id.to_string());
        self.inner.load(id)
    }
}

#[test]
fn full_batch_epoch_is_one_step() {
    let (src, ids) = source(4);
    let out = train(&tiny_config(1, 4), &src, &ids, Some(&ids)).unwrap();
    assert_eq!(out.steps, 1);
    assert_eq!(out.history.len(), 1);
    let out = train(&tiny_config(2, 3), &src, &ids, Some(&ids)).unwrap();
    assert_eq!(out.steps, 4);
}

#[test]
fn training_is_reproducible() {
    let (src, ids) = source(6);
    let cfg = tiny_config(2, 2);
    let a = train(&cfg, &src, &ids, None).unwrap();
    let b = train(&cfg, &src, &ids, None).unwrap();
    assert_eq!(history_csv(&a.history).unwrap(), history_csv(&b.history).unwrap());
    assert_eq!(a.best.params.len(), b.best.params.len());
    let eval_ids = &ids[..2];
    let ra = evaluate(&a.best, &src, eval_ids, Averaging::Micro).unwrap();
    let rb = evaluate(&a.best, &src, eval_ids, Averaging::Micro).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn held_out_ids_are_never_touched() {
    let (src, ids) = source(10);
    let (train_ids, test_ids) = split_ids(&ids, 0.8, 3).unwrap();
    let rec = Recording { inner: &src, loaded: RefCell::new(BTreeSet::new()) };
    train(&tiny_config(2, 4), &rec, &train_ids, None).unwrap();
    let loaded = rec.loaded.borrow();
    assert!(test_ids.iter().all(|id| !loaded.contains(id)));
    assert!(!loaded.is_empty());
}

#[test]
fn exploding_inputs_raise_non_finite_loss() {
    let (src, ids) = source(2);
    let mut samples: Vec<Sample> = ids.iter().map(|id| src.load(id).unwrap()).collect();
    let (img, mask) = samples.remove(0).into_parts();
    let huge = BandStack::original(img.pixels().mapv(|_| 3.0e38), img.patch_id()).unwrap();
    let poisoned = Sample::new(huge, GroundTruthMask::new(mask.labels().clone(), mask.patch_id()).unwrap()).unwrap();
    let src = InMemorySource::new([poisoned]);
    let only = vec![ids[0].clone()];
    let err = train(&tiny_config(1, 1), &src, &only, Some(&only)).unwrap_err();
    match err {
        Error::NonFiniteLoss { epoch, step, last_finite } => {
            assert_eq!((epoch, step), (1, 0));
            let ckpt = last_finite.expect("initial weights retained");
            assert!(ckpt.params.all_finite());
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn cross_validation_mean_and_partial_failure() {
    let (src, ids) = source(10);
    let cfg = tiny_config(1, 8);
    let cv = cross_validate(&cfg, &src, &ids, 5, |_, _, _| Ok(())).unwrap();
    assert_eq!(cv.folds.len(), 5);
    let mean_f1 = cv.folds.iter().map(|r| r.f1).sum::<f64>() / 5.0;
    assert!((cv.mean.f1 - mean_f1).abs() < 1e-12);
    assert_eq!(cv.plan.fold_sizes(), vec![2; 5]);

    let err = cross_validate(&cfg, &src, &ids, 5, |fold, _, _| {
        if fold == 2 {
            Err(Error::InvalidConfig("stop".into()))
        } else {
            Ok(())
        }
    })
    .unwrap_err();
    match err {
        Error::FoldFailed { fold, completed, .. } => {
            assert_eq!(fold, 2);
            assert_eq!(completed.len(), 2);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(
        cross_validate(&cfg, &src, &ids[..4], 5, |_, _, _| Ok(())),
        Err(Error::TooFewSamples { n: 4, k: 5 })
    ));
}

/// Losses from ten Adam steps on one fixed batch, for ten seeded initializations.
fn descent_trials(model_cfg: &ModelConfig, lr: f32) -> usize {
    let (src, ids) = source(2);
    let batch: Vec<Sample> = ids.iter().map(|id| src.load(id).unwrap()).collect();
    let loss = TrainConfig::default().loss;
    (0..10u64)
        .filter(|&trial| {
            let mut model = Model::build(model_cfg, 100 + trial).unwrap();
            let mut opt = Adam::new(lr);
            let losses: Vec<f64> = (0..10)
                .map(|_| train_step(&mut model, &mut opt, &batch, &loss, trial).unwrap())
                .collect();
            losses.windows(2).all(|w| w[1] <= w[0])
        })
        .count()
}

#[test]
fn small_learning_rate_descends_on_a_fixed_batch() {
    let good = descent_trials(&ModelConfig::baseline(14).width_divided(16), 1e-4);
    assert!(good >= 9, "baseline: {good} of 10 trials descended");
    let res_triple = ModelConfig {
        attention_kind: AttentionKind::None,
        ..ModelConfig::best(14).width_divided(16)
    };
    let good = descent_trials(&res_triple, 1e-4);
    assert!(good >= 9, "res-conv, three heads: {good} of 10 trials descended");
}

#[test]
fn run_dir_refuses_to_clobber() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let run = RunDir::create(&dir, false).unwrap();
    run.write_config(&TrainConfig::default()).unwrap();
    assert!(matches!(RunDir::create(&dir, false), Err(Error::WouldClobber(_))));
    let again = RunDir::create(&dir, true).unwrap();
    assert!(std::fs::read_dir(again.path()).unwrap().next().is_none());
    let text = std::fs::read_to_string(run.path().join("config.yaml"));
    assert!(text.is_err());
    let _ = AugmentConfig::disabled();
}
