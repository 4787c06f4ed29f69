use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use super::config::TrainConfig;
use super::source::SampleSource;
use super::split::{carve_validation, make_folds, make_stratified_folds, FoldPlan};
use crate::augment::{augment_batch, AugmentConfig, RngState};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::{multi_head_loss_with_grad, LossConfig};
use crate::metrics::{confusion_counts, Averaging, ConfusionCounts, EvalReport};
use crate::segnet::{batch_to_nchw, count_parameters, ensemble_average, predict_mask, Checkpoint, Model, UNet};
use crate::tensor::{Adam, Graph, Mode};

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: f64,
    pub val_miou: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights of the epoch with the highest validation F1 (earliest on ties).
    pub best: Checkpoint,
    /// Weights after the last epoch.
    pub last: Model,
    pub history: Vec<EpochRecord>,
    /// Optimizer steps taken.
    pub steps: usize,
}

/// Stacks samples into an NHWC image batch and an `[N, H, W]` label batch.
pub fn stack_batch(samples: &[Sample]) -> Result<(Array4<f32>, Array3<u8>)> {
    let first = samples.first().ok_or_else(|| Error::InvalidConfig("empty batch".into()))?;
    let (h, w, c) = first.image().pixels().dim();
    let mut x = Array4::<f32>::zeros((samples.len(), h, w, c));
    let mut y = Array3::<u8>::zeros((samples.len(), h, w));
    for (i, s) in samples.iter().enumerate() {
        let px = s.image().pixels();
        if px.dim() != (h, w, c) {
            return Err(Error::shape((h, w, c), px.dim()));
        }
        x.index_axis_mut(Axis(0), i).assign(px);
        y.index_axis_mut(Axis(0), i).assign(s.mask().labels());
    }
    Ok((x, y))
}

/// Forward, multi-head loss, backward and one Adam update on `batch`. Returns the loss
/// before the update; a non-finite loss leaves the weights untouched.
pub fn train_step(model: &mut Model, opt: &mut Adam, batch: &[Sample], loss: &LossConfig, graph_seed: u64) -> Result<f64> {
    let (x, y) = stack_batch(batch)?;
    let x = batch_to_nchw(x.view(), model.config().input_channels)?;
    let (net, params) = model.parts_mut();
    let mut g = Graph::new(params, Mode::Train, graph_seed);
    let xv = g.input(x);
    let vars = net.forward(&mut g, xv);
    let heads = UNet::head_outputs(&g, &vars);
    let l = multi_head_loss_with_grad(&heads, y.view(), loss)?;
    if !l.value.is_finite() {
        return Ok(l.value);
    }
    let head_vars = vars.heads();
    let seeds = l
        .grads
        .into_iter()
        .map(|(size, grad)| {
            let v = head_vars.iter().find(|(s, _)| *s == size).expect("gradient for an existing head").1;
            (v, grad.permuted_axes([0, 3, 1, 2]).as_standard_layout().into_owned().into_dyn())
        })
        .collect();
    g.backward(seeds);
    drop(g);
    opt.step(model.params_mut());
    Ok(l.value)
}

/// Ensemble prediction for one sample.
pub fn predict_sample(model: &Model, sample: &Sample) -> Result<Array2<u8>> {
    let x = sample.image().pixels().view().insert_axis(Axis(0));
    let heads = model.forward(x)?;
    let probs = ensemble_average(&heads);
    Ok(predict_mask(probs.index_axis(Axis(0), 0)))
}

/// Scores `model` on `ids`: ensemble average, argmax, confusion counts per image.
pub fn evaluate_model(model: &Model, source: &dyn SampleSource, ids: &[String], averaging: Averaging) -> Result<EvalReport> {
    let mut per_image: Vec<ConfusionCounts> = Vec::with_capacity(ids.len());
    for id in ids {
        let s = source.load(id)?;
        let pred = predict_sample(model, &s)?;
        per_image.push(confusion_counts(pred.view(), s.mask().labels().view())?);
    }
    Ok(EvalReport::from_images(&per_image, count_parameters(model), averaging))
}

/// [`evaluate_model`] on the network stored in a checkpoint.
pub fn evaluate(checkpoint: &Checkpoint, source: &dyn SampleSource, ids: &[String], averaging: Averaging) -> Result<EvalReport> {
    let model = checkpoint.to_model()?;
    evaluate_model(&model, source, ids, averaging)
}

fn check_ids(source: &dyn SampleSource, ids: &[String]) -> Result<()> {
    match ids.iter().find(|id| !source.contains(id)) {
        Some(id) => Err(Error::UnknownId(id.clone())),
        None => Ok(()),
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains a fresh model on `train_ids`. Without `val_ids` a tenth of the training ids
/// is carved off for validation; with a single training id it validates on that id.
///
/// Cutmix donors are drawn only from landslide-bearing `train_ids`. Each epoch's shuffle,
/// augmentation and dropout draws come from their own seeded streams.
pub fn train(cfg: &TrainConfig, source: &dyn SampleSource, train_ids: &[String], val_ids: Option<&[String]>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ids.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_ids(source, train_ids)?;
    let (fit_ids, val_ids) = match val_ids {
        Some(v) => {
            check_ids(source, v)?;
            (train_ids.to_vec(), v.to_vec())
        }
        None => carve_validation(train_ids, cfg.seed),
    };
    let val_ids = if val_ids.is_empty() { fit_ids.clone() } else { val_ids };
    let donor_ids: Vec<String> = fit_ids.iter().filter(|id| source.is_landslide(id)).cloned().collect();
    let mut augment: AugmentConfig = cfg.augment;
    if augment.cutmix_enabled && donor_ids.is_empty() {
        log::warn!("no training sample has landslide pixels; cutmix disabled");
        augment.cutmix_enabled = false;
    }

    let mut model = Model::build(&cfg.model, cfg.seed)?;
    let mut opt = Adam::new(cfg.learning_rate as f32);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Checkpoint> = None;
    let mut last_finite = Checkpoint::from_model(&model, 0, None);
    let mut order = fit_ids.clone();

    for epoch in 1..=cfg.epochs {
        let mut shuffle_rng = RngState::substream(cfg.seed, epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut aug_rng = RngState::substream(augment.rng_seed, (1 << 32) | epoch as u64);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = chunk.iter().map(|id| source.load(id)).collect::<Result<Vec<_>>>()?;
            let batch = if augment.rotation_enabled || augment.cutmix_enabled {
                let pool = if augment.cutmix_enabled {
                    (0..chunk.len())
                        .map(|_| source.load(&donor_ids[aug_rng.random_range(0..donor_ids.len())]))
                        .collect::<Result<Vec<_>>>()?
                } else {
                    Vec::new()
                };
                augment_batch(&batch, &pool, &augment, &mut aug_rng)?
            } else {
                batch
            };
            let loss = train_step(&mut model, &mut opt, &batch, &cfg.loss, mix(cfg.seed, epoch as u64, step as u64))?;
            if !loss.is_finite() || !model.params().all_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    last_finite: Some(Box::new(last_finite)),
                });
            }
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = loss_sum / seen as f64;
        let val = evaluate_model(&model, source, &val_ids, cfg.averaging)?;
        log::info!("epoch {epoch}: train_loss {train_loss:.5} val_f1 {:.2} val_miou {:.2}", val.f1, val.miou);
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_f1: val.f1,
            val_miou: val.miou,
        });
        last_finite = Checkpoint::from_model(&model, epoch, Some(val.f1));
        if best.as_ref().map_or(true, |b| val.f1 > b.val_f1.unwrap_or(f64::NEG_INFINITY)) {
            best = Some(last_finite.clone());
        }
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch"),
        last: model,
        history,
        steps: opt.steps_taken(),
    })
}

/// Per-fold and averaged results of a cross-validation run.
#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub plan: FoldPlan,
    pub folds: Vec<EvalReport>,
    /// Arithmetic mean of the per-fold scores.
    pub mean: EvalReport,
}

/// Trains one model per fold on the other folds and scores it on the held-out fold.
/// `on_fold` sees every finished fold (for writing artifacts). Any failure aborts with
/// [`Error::FoldFailed`], which carries the reports of the folds that completed.
pub fn cross_validate(
    cfg: &TrainConfig,
    source: &dyn SampleSource,
    ids: &[String],
    k: usize,
    mut on_fold: impl FnMut(usize, &TrainOutcome, &EvalReport) -> Result<()>,
) -> Result<CrossValidation> {
    cfg.validate()?;
    check_ids(source, ids)?;
    let plan = if cfg.stratify_folds {
        make_stratified_folds(ids, k, cfg.seed, |id| source.is_landslide(id))?
    } else {
        make_folds(ids, k, cfg.seed)?
    };
    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let mut run = || -> Result<()> {
            let outcome = train(cfg, source, &plan.train_ids(fold), None)?;
            let report = evaluate(&outcome.best, source, &plan.fold_ids(fold), cfg.averaging)?;
            on_fold(fold, &outcome, &report)?;
            folds.push(report);
            Ok(())
        };
        if let Err(e) = run() {
            return Err(Error::FoldFailed {
                fold,
                completed: folds,
                source: Box::new(e),
            });
        }
    }
    let mean = EvalReport::mean_of(&folds).expect("k >= 2 folds");
    Ok(CrossValidation { plan, folds, mean })
}
