//! Training loop, evaluation reports and the ablation suite.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{step_lr, Graph, ParamStore, Tensor};
use crate::config::{Ablation, RunConfig};
use crate::error::{Error, Result};
use crate::field::{ScalarField, VectorField2};
use crate::grid::{boundary_mask, spatial_embedding, BoundaryMask, SpatialEmbedding};
use crate::loss::{rollout_loss, LossBreakdown, LossMask};
use crate::metrics::{
    calibrate_alpha, correlation, csi, error_metrics, persistence, rescale_255, CalibrationMode,
    CsiThresholds, ErrorMetrics,
};
use crate::nn::{embedding_tensor, field_tensor, Model};
use crate::predictor::{
    rollout, rollout_tape, update_masks, PredictorFlags, RolloutConfig, TapeStencils,
};
use crate::scalar::Scalar;
use crate::sim::SequenceRecord;

/// Sequence indices of the train, validation and test subsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` with `seed` and cuts it by the given fractions.
pub fn split_dataset(n: usize, train_fraction: f64, val_fraction: f64, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * train_fraction).round() as usize).min(n);
    let n_val = ((n as f64 * val_fraction).round() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Split {
        train: idx,
        val,
        test,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the epoch's optimizer steps.
    pub loss: LossBreakdown,
    /// Validation MSE at the training horizon, if a validation subset exists.
    pub val_mse: Option<f64>,
}

/// Trained parameters with the run that produced them.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub config: RunConfig,
    pub params: ParamStore<T>,
    /// Epoch whose parameters were kept; `None` for an untrained model.
    pub epoch: Option<usize>,
    pub best_val_mse: Option<f64>,
    pub log: Vec<EpochLog>,
}

/// Per-record precomputed geometry.
#[derive(Debug, Clone)]
pub struct RecordGeometry<T> {
    pub psi: SpatialEmbedding<T>,
    psi_tensor: Tensor<T>,
    mask1: BoundaryMask,
    mask2: BoundaryMask,
    loss_exclude: BoundaryMask,
}

impl<T: Scalar> RecordGeometry<T> {
    pub fn new(
        record: &SequenceRecord<T>,
        flags: &PredictorFlags,
        exclude_threshold: f64,
    ) -> Result<Self> {
        let psi = spatial_embedding::<T>(&record.obstacles, &record.grid)?;
        let (mask1, mask2) = update_masks(&psi, flags);
        let loss_exclude = boundary_mask(&psi.sdf, exclude_threshold)?;
        Ok(Self {
            psi_tensor: embedding_tensor(&psi),
            psi,
            mask1,
            mask2,
            loss_exclude,
        })
    }
}

fn check_records<T: Scalar>(
    model: &Model,
    records: &[&SequenceRecord<T>],
    needed: usize,
) -> Result<()> {
    for (r, rec) in records.iter().enumerate() {
        model.check_dims(rec.grid.height, rec.grid.width)?;
        if rec.len() < needed {
            return Err(Error::InvalidArgument(format!(
                "sequence {r} has {} frames; need {needed} (window plus horizon)",
                rec.len()
            )));
        }
    }
    Ok(())
}

/// Loss of one sample and the gradient of every parameter, in store order.
fn sample_gradients<T: Scalar>(
    model: &Model,
    params: &ParamStore<T>,
    cfg: &RunConfig,
    record: &SequenceRecord<T>,
    geom: &RecordGeometry<T>,
    start: usize,
) -> Result<(LossBreakdown, Vec<Tensor<T>>)> {
    let k = model.window();
    let horizon = cfg.train.train_horizon;
    let g = Graph::new();
    let b = params.bind(&g);
    let st = TapeStencils::new(&g, record.grid.dx, &geom.mask1, &geom.mask2)?;
    let mask = LossMask::new(&g, &geom.loss_exclude)?;
    let window = record.frames[start..start + k]
        .iter()
        .map(|f| g.constant(field_tensor(f)))
        .collect();
    let truth: Vec<_> = record.frames[start + k..start + k + horizon]
        .iter()
        .map(|f| g.constant(field_tensor(f)))
        .collect();
    let psi = g.constant(geom.psi_tensor.clone());
    let pflags = cfg.ablation.predictor();
    let trace = rollout_tape(
        model,
        &g,
        &b,
        &st,
        window,
        psi,
        horizon,
        record.grid.dt,
        &pflags,
    )?;
    let inv_re = model.inv_re(&g, &b)?;
    let loss = rollout_loss(
        &g,
        &st,
        &mask,
        &trace,
        &truth,
        inv_re,
        record.grid.dt,
        &cfg.loss.weights,
        &cfg.ablation.loss(),
    )?;
    let breakdown = loss.breakdown(&g);
    if let Some(component) = breakdown.non_finite_component() {
        return Err(Error::Numerical(format!(
            "{component} loss is not finite (sequence seed {}, start frame {start})",
            record.seed
        )));
    }
    let grads = g.backward(loss.total)?;
    let grads = b.iter().map(|(_, v)| grads.get(v)).collect();
    Ok((breakdown, grads))
}

/// One optimizer step over a batch. Samples run in parallel; gradients are
/// reduced in batch order so the update does not depend on scheduling.
fn train_batch<T: Scalar>(
    model: &Model,
    params: &mut ParamStore<T>,
    cfg: &RunConfig,
    records: &[SequenceRecord<T>],
    geoms: &[RecordGeometry<T>],
    batch: &[(usize, usize)],
    lr: f64,
) -> Result<LossBreakdown> {
    let frozen = &*params;
    let results: Vec<_> = batch
        .par_iter()
        .map(|&(r, start)| sample_gradients(model, frozen, cfg, &records[r], &geoms[r], start))
        .collect();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let scale = T::lit(1.0 / batch.len() as f64);
    let mut sums: Option<Vec<Tensor<T>>> = None;
    let mut loss = LossBreakdown::default();
    for res in results {
        let (b, grads) = res?;
        loss = loss.add(&b);
        match &mut sums {
            None => sums = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(grads) {
                    a.data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(x, &y)| *x += y);
                }
            }
        }
    }
    for (name, mut grad) in names.iter().zip(sums.unwrap_or_default()) {
        grad.data_mut().iter_mut().for_each(|v| *v *= scale);
        params.set_grad(name, grad)?;
    }
    if let Some(max) = cfg.train.max_grad_norm {
        params.clip_grad_norm(T::lit(max));
    }
    params.adam_step(T::lit(lr), &cfg.train.adam)?;
    params.zero_grad();
    Ok(loss.scaled(1.0 / batch.len() as f64))
}

/// Mean squared error of off-tape rollouts from the first frames of `records`.
fn rollout_mse<T: Scalar>(
    model: &Model,
    params: &ParamStore<T>,
    records: &[&SequenceRecord<T>],
    geoms: &[&RecordGeometry<T>],
    horizon: usize,
    flags: &PredictorFlags,
) -> Result<f64> {
    let k = model.window();
    let rcfg = RolloutConfig {
        window: k,
        steps: horizon,
        flags: *flags,
    };
    let preds = records
        .par_iter()
        .zip(geoms.par_iter())
        .map(|(rec, geom)| {
            Ok(rollout(model, params, &rec.frames[..k], &geom.psi, &rec.grid, &rcfg)?.frames)
        })
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<_> = records
        .iter()
        .map(|r| r.frames[k..k + horizon].to_vec())
        .collect();
    Ok(error_metrics(&preds, &truth)?.mse)
}

/// Trains on the training subset of `records`, calling `observer` after each epoch.
pub fn train_with<T: Scalar>(
    cfg: &RunConfig,
    records: &[SequenceRecord<T>],
    mut observer: impl FnMut(&EpochLog),
) -> Result<Checkpoint<T>> {
    cfg.validate()?;
    let model = Model::new(cfg.model.clone())?;
    let t = &cfg.train;
    let k = model.window();
    let all: Vec<&SequenceRecord<T>> = records.iter().collect();
    check_records(&model, &all, k + t.train_horizon)?;
    let mut params = model.init_params::<T>(t.seed);
    let split = split_dataset(records.len(), t.train_fraction, t.val_fraction, t.seed);
    let mut checkpoint = Checkpoint {
        config: cfg.clone(),
        params: params.clone(),
        epoch: None,
        best_val_mse: None,
        log: Vec::new(),
    };
    if t.epochs == 0 {
        return Ok(checkpoint);
    }
    if split.train.is_empty() {
        return Err(Error::InvalidArgument("training subset is empty".into()));
    }
    let pflags = cfg.ablation.predictor();
    let geoms = records
        .par_iter()
        .map(|r| RecordGeometry::new(r, &pflags, cfg.loss.exclude_threshold))
        .collect::<Result<Vec<_>>>()?;
    let val_records: Vec<_> = split.val.iter().map(|&i| &records[i]).collect();
    let val_geoms: Vec<_> = split.val.iter().map(|&i| &geoms[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed ^ 0x7261_6e64_6f6d);
    for epoch in 0..t.epochs {
        let lr = step_lr(epoch, t.lr, t.lr_step, t.lr_gamma);
        let mut samples: Vec<(usize, usize)> = split
            .train
            .iter()
            .map(|&r| (r, rng.gen_range(0..=records[r].len() - k - t.train_horizon)))
            .collect();
        samples.shuffle(&mut rng);
        let mut batches: Vec<&[(usize, usize)]> = samples.chunks(t.batch_size).collect();
        if let Some(cap) = t.batches_per_epoch {
            batches.truncate(cap.max(1));
        }
        let mut sum = LossBreakdown::default();
        for batch in &batches {
            let b = train_batch(&model, &mut params, cfg, records, &geoms, batch, lr)
                .map_err(|e| annotate_epoch(e, epoch))?;
            sum = sum.add(&b);
        }
        let val_mse = if val_records.is_empty() {
            None
        } else {
            let mse = rollout_mse(
                &model,
                &params,
                &val_records,
                &val_geoms,
                t.train_horizon,
                &pflags,
            )?;
            Some(mse)
        };
        let entry = EpochLog {
            epoch,
            lr,
            loss: sum.scaled(1.0 / batches.len() as f64),
            val_mse,
        };
        observer(&entry);
        checkpoint.log.push(entry);
        let better = match (val_mse, checkpoint.best_val_mse) {
            (None, _) => true,
            (Some(v), None) => v.is_finite(),
            (Some(v), Some(best)) => v < best,
        };
        if better {
            checkpoint.params = params.clone();
            checkpoint.epoch = Some(epoch);
            checkpoint.best_val_mse = val_mse;
        }
    }
    Ok(checkpoint)
}

fn annotate_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::Numerical(msg) => Error::Numerical(format!("epoch {epoch}: {msg}")),
        other => other,
    }
}

pub fn train<T: Scalar>(cfg: &RunConfig, records: &[SequenceRecord<T>]) -> Result<Checkpoint<T>> {
    train_with(cfg, records, |_| {})
}

/// Latent fields of a batch of sequences next to their references.
#[derive(Debug, Clone)]
pub struct LatentComparison<T> {
    pub estimated_u: Vec<Vec<VectorField2<T>>>,
    pub true_u: Vec<Vec<VectorField2<T>>>,
    pub estimated_p: Vec<Vec<ScalarField<T>>>,
    pub true_p: Vec<Vec<ScalarField<T>>>,
    /// True concentration at the instants of `true_u`. Velocity only acts
    /// where tracer is present, so the direction check weights by it.
    pub tracer: Vec<Vec<ScalarField<T>>>,
}

/// Everything a metric report is computed from; `[sequence][lead]` layout.
#[derive(Debug, Clone)]
pub struct EvalInput<T> {
    pub predicted: Vec<Vec<ScalarField<T>>>,
    pub truth: Vec<Vec<ScalarField<T>>>,
    /// Last observed frame of each sequence, for the persistence baseline.
    pub last_observed: Vec<ScalarField<T>>,
    pub latent: Option<LatentComparison<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceCalibration {
    /// Least-squares scale of the first estimated velocity against the truth.
    pub alpha: f64,
    /// Tracer-weighted mean of `u_x` over the whole horizon.
    pub mean_estimated_ux: f64,
    pub mean_true_ux: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentReport {
    /// `None` where the reference has zero variance.
    pub corr_ux: Option<f64>,
    pub corr_uy: Option<f64>,
    pub corr_p: Option<f64>,
    /// Mean over sequences of the whole-field scale fit.
    pub alpha_initial: Option<f64>,
    /// Mean over sequences of the scale at the fastest true cell.
    pub alpha_point: Option<f64>,
    /// Mean over sequences of the MSE of `û / alpha` against `u`.
    pub calibrated_mse: Option<f64>,
    /// Scale fitted on the first frame of every sequence at once, weighted by tracer.
    pub alpha_pooled: Option<f64>,
    /// Fraction of sequences whose mean `u_x`, divided by the pooled scale,
    /// has the sign of the true mean.
    pub sign_agreement: Option<f64>,
    pub per_sequence: Vec<Option<SequenceCalibration>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sequences: usize,
    pub horizon: usize,
    pub model: ErrorMetrics,
    pub persistence: ErrorMetrics,
    /// `(threshold, csi)` on fields rescaled to 0–255 by the truth range.
    pub csi: Vec<(f64, f64)>,
    pub csi_m: f64,
    pub persistence_csi_m: f64,
    pub latent: Option<LatentReport>,
}

fn flatten<T: Clone>(x: &[Vec<T>]) -> Vec<T> {
    x.iter().flatten().cloned().collect()
}

/// `u_x` stacked over `u_y`, so both components enter one fit.
fn stacked<T: Scalar>(u: &VectorField2<T>) -> ScalarField<T> {
    let (h, w) = u.dims();
    let mut v = u.x.values().to_vec();
    v.extend_from_slice(u.y.values());
    ScalarField::from_vec(2 * h, w, v).expect("stacked size")
}

fn mean_of(fields: &[ScalarField<impl Scalar>]) -> f64 {
    let n: usize = fields.iter().map(ScalarField::len).sum();
    fields.iter().map(|f| f.sum().as_f64()).sum::<f64>() / n.max(1) as f64
}

/// Mean weighted by the nonnegative part of `weights`; plain mean when there is no tracer.
fn weighted_mean<T: Scalar>(fields: &[ScalarField<T>], weights: &[ScalarField<T>]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (f, w) in fields.iter().zip(weights) {
        for (&v, &c) in f.values().iter().zip(w.values()) {
            let c = c.as_f64().max(0.0);
            num += v.as_f64() * c;
            den += c;
        }
    }
    if den > 0.0 {
        num / den
    } else {
        mean_of(fields)
    }
}

fn optional(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedCorrelation | Error::ZeroReference) => Ok(None),
        Err(e) => Err(e),
    }
}

fn mean_some(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn latent_report<T: Scalar>(lat: &LatentComparison<T>) -> Result<LatentReport> {
    let comp = |s: &[Vec<VectorField2<T>>],
                f: fn(&VectorField2<T>) -> &ScalarField<T>|
     -> Vec<ScalarField<T>> { s.iter().flatten().map(|u| f(u).clone()).collect() };
    let corr_ux = optional(correlation(
        &comp(&lat.estimated_u, |u| &u.x),
        &comp(&lat.true_u, |u| &u.x),
    ))?;
    let corr_uy = optional(correlation(
        &comp(&lat.estimated_u, |u| &u.y),
        &comp(&lat.true_u, |u| &u.y),
    ))?;
    let corr_p = optional(correlation(
        &flatten(&lat.estimated_p),
        &flatten(&lat.true_p),
    ))?;
    let mut per_sequence = Vec::with_capacity(lat.true_u.len());
    let (mut points, mut mses) = (Vec::new(), Vec::new());
    let (mut er, mut rr) = (0.0, 0.0);
    for ((est, tru), tracer) in lat.estimated_u.iter().zip(&lat.true_u).zip(&lat.tracer) {
        let est_s: Vec<_> = est.iter().map(stacked).collect();
        let tru_s: Vec<_> = tru.iter().map(stacked).collect();
        let Some(first) = tru_s.first() else {
            per_sequence.push(None);
            continue;
        };
        if let (Some(e), Some(t), Some(w)) = (est.first(), tru.first(), tracer.first()) {
            for (ef, tf) in [(&e.x, &t.x), (&e.y, &t.y)] {
                for ((a, b), c) in ef.values().iter().zip(tf.values()).zip(w.values()) {
                    let c = c.as_f64().max(0.0);
                    er += c * a.as_f64() * b.as_f64();
                    rr += c * b.as_f64() * b.as_f64();
                }
            }
        }
        let fit = match calibrate_alpha(&est_s, &tru_s, CalibrationMode::InitialField) {
            Ok(c) => c,
            Err(Error::ZeroReference | Error::Numerical(_)) => {
                per_sequence.push(None);
                continue;
            }
            Err(e) => return Err(e),
        };
        mses.push(fit.calibrated_mse);
        let (row, col) = (0..first.len())
            .map(|n| (n / first.width(), n % first.width()))
            .max_by(|a, b| {
                let fa = first.get(a.0, a.1).abs().as_f64();
                let fb = first.get(b.0, b.1).abs().as_f64();
                fa.total_cmp(&fb).then(b.cmp(a))
            })
            .expect("non-empty field");
        if let Ok(c) = calibrate_alpha(
            &est_s,
            &tru_s,
            CalibrationMode::SinglePoint { frame: 0, row, col },
        ) {
            points.push(c.alpha);
        }
        let ex: Vec<_> = est.iter().map(|u| u.x.clone()).collect();
        let tx: Vec<_> = tru.iter().map(|u| u.x.clone()).collect();
        per_sequence.push(Some(SequenceCalibration {
            alpha: fit.alpha,
            mean_estimated_ux: weighted_mean(&ex, tracer),
            mean_true_ux: weighted_mean(&tx, tracer),
        }));
    }
    let alpha_pooled = (rr > 0.0 && er != 0.0).then(|| er / rr);
    let signed: Vec<_> = match alpha_pooled {
        Some(alpha) => per_sequence
            .iter()
            .flatten()
            .filter(|c| c.mean_true_ux != 0.0)
            .map(|c| {
                ((c.mean_estimated_ux / alpha).signum() == c.mean_true_ux.signum()) as u8 as f64
            })
            .collect(),
        None => Vec::new(),
    };
    Ok(LatentReport {
        corr_ux,
        corr_uy,
        corr_p,
        alpha_initial: mean_some(per_sequence.iter().flatten().map(|c| c.alpha)),
        alpha_point: mean_some(points.into_iter()),
        calibrated_mse: mean_some(mses.into_iter()),
        alpha_pooled,
        sign_agreement: mean_some(signed.into_iter()),
        per_sequence,
    })
}

/// Error, CSI and latent metrics for a set of predictions, with the
/// persistence forecast scored alongside.
pub fn metric_report<T: Scalar>(
    input: &EvalInput<T>,
    thresholds: &CsiThresholds,
) -> Result<MetricReport> {
    if input.last_observed.len() != input.truth.len() {
        return Err(Error::shape(
            "metric_report",
            format!(
                "{} last frames for {} sequences",
                input.last_observed.len(),
                input.truth.len()
            ),
        ));
    }
    let horizon = input.truth.first().map_or(0, Vec::len);
    let model = error_metrics(&input.predicted, &input.truth)?;
    let baseline: Vec<_> = input
        .last_observed
        .iter()
        .map(|f| persistence(f, horizon))
        .collect();
    let persistence_metrics = error_metrics(&baseline, &input.truth)?;
    let truth = flatten(&input.truth);
    let (lo, hi) = truth
        .iter()
        .flat_map(|f| f.values())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v.as_f64()), hi.max(v.as_f64()))
        });
    let scaled_truth = rescale_255(&truth, lo, hi);
    let scaled_pred = rescale_255(&flatten(&input.predicted), lo, hi);
    let scaled_base = rescale_255(&flatten(&baseline), lo, hi);
    let csi_rows = thresholds
        .values()
        .iter()
        .map(|&tau| Ok((tau, csi(&scaled_pred, &scaled_truth, tau)?)))
        .collect::<Result<Vec<_>>>()?;
    let csi_m = csi_rows.iter().map(|r| r.1).sum::<f64>() / csi_rows.len().max(1) as f64;
    let base_rows = thresholds
        .values()
        .iter()
        .map(|&tau| csi(&scaled_base, &scaled_truth, tau))
        .collect::<Result<Vec<_>>>()?;
    let persistence_csi_m = base_rows.iter().sum::<f64>() / base_rows.len().max(1) as f64;
    let latent = input.latent.as_ref().map(latent_report).transpose()?;
    Ok(MetricReport {
        sequences: input.truth.len(),
        horizon,
        model,
        persistence: persistence_metrics,
        csi: csi_rows,
        csi_m,
        persistence_csi_m,
        latent,
    })
}

/// Rollouts from the first `K` frames of each record, scored against the following frames.
#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    pub input: EvalInput<T>,
    pub report: MetricReport,
    /// Learned inverse Péclet number.
    pub inv_pe: f64,
}

pub fn evaluate<T: Scalar>(
    model: &Model,
    params: &ParamStore<T>,
    records: &[&SequenceRecord<T>],
    horizon: usize,
    flags: &PredictorFlags,
    thresholds: &CsiThresholds,
) -> Result<Evaluation<T>> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    let k = model.window();
    check_records(model, records, k + horizon)?;
    let rcfg = RolloutConfig {
        window: k,
        steps: horizon,
        flags: *flags,
    };
    let rollouts = records
        .par_iter()
        .map(|rec| {
            let psi = spatial_embedding::<T>(&rec.obstacles, &rec.grid)?;
            rollout(model, params, &rec.frames[..k], &psi, &rec.grid, &rcfg)
        })
        .collect::<Result<Vec<_>>>()?;
    // The latent of step `n` describes the interval after frame `k - 1 + n`.
    let latent = LatentComparison {
        true_u: records
            .iter()
            .map(|r| r.u_true[k - 1..k - 1 + horizon].to_vec())
            .collect(),
        true_p: records
            .iter()
            .map(|r| r.p_true[k - 1..k - 1 + horizon].to_vec())
            .collect(),
        estimated_u: rollouts
            .iter()
            .map(|r| r.latents.iter().map(|l| l.velocity.clone()).collect())
            .collect(),
        estimated_p: rollouts
            .iter()
            .map(|r| r.latents.iter().map(|l| l.pressure.clone()).collect())
            .collect(),
        tracer: records
            .iter()
            .map(|r| r.frames[k - 1..k - 1 + horizon].to_vec())
            .collect(),
    };
    let input = EvalInput {
        predicted: rollouts.into_iter().map(|r| r.frames).collect(),
        truth: records
            .iter()
            .map(|r| r.frames[k..k + horizon].to_vec())
            .collect(),
        last_observed: records.iter().map(|r| r.frames[k - 1].clone()).collect(),
        latent: Some(latent),
    };
    let report = metric_report(&input, thresholds)?;
    let inv_pe = params.value(crate::nn::THETA_PE)?.data()[0].as_f64().exp();
    Ok(Evaluation {
        input,
        report,
        inv_pe,
    })
}

/// Scores a checkpoint on the held-out subset of `records` it was trained against.
pub fn validate<T: Scalar>(
    checkpoint: &Checkpoint<T>,
    records: &[SequenceRecord<T>],
    horizon: usize,
) -> Result<MetricReport> {
    let cfg = &checkpoint.config;
    let split = split_dataset(
        records.len(),
        cfg.train.train_fraction,
        cfg.train.val_fraction,
        cfg.train.seed,
    );
    let held_out: Vec<_> = split.test.iter().map(|&i| &records[i]).collect();
    let model = Model::new(cfg.model.clone())?;
    let eval = evaluate(
        &model,
        &checkpoint.params,
        &held_out,
        horizon,
        &cfg.ablation.predictor(),
        &CsiThresholds::default(),
    )?;
    Ok(eval.report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AblationOutcome {
    Finished { mae: f64, mse: f64 },
    Diverged { reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub outcome: AblationOutcome,
}

impl AblationRow {
    pub fn mse(&self) -> f64 {
        match self.outcome {
            AblationOutcome::Finished { mse, .. } => mse,
            AblationOutcome::Diverged { .. } => f64::INFINITY,
        }
    }
}

/// Trains and scores one configuration per ablation, on the held-out subset
/// at the test horizon. A run that fails numerically is recorded as diverged.
pub fn run_ablations<T: Scalar>(
    cfg: &RunConfig,
    records: &[SequenceRecord<T>],
    mut observer: impl FnMut(Ablation, &EpochLog),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(Ablation::ALL.len());
    for ablation in Ablation::ALL {
        let mut run = cfg.clone();
        ablation.apply(&mut run.ablation);
        let outcome = match train_with(&run, records, |e| observer(ablation, e))
            .and_then(|ck| validate(&ck, records, run.train.test_horizon))
        {
            Ok(report) if report.model.mse.is_finite() && report.model.mae.is_finite() => {
                AblationOutcome::Finished {
                    mae: report.model.mae,
                    mse: report.model.mse,
                }
            }
            Ok(_) => AblationOutcome::Diverged {
                reason: "non-finite prediction error".into(),
            },
            Err(Error::Numerical(reason)) => AblationOutcome::Diverged { reason },
            Err(e) => return Err(e),
        };
        rows.push(AblationRow { ablation, outcome });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::GenerateConfig;
    use crate::nn::ModelConfig;
    use crate::sim::{generate_dataset, FlowScenario};

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig {
            generate: GenerateConfig {
                height: 16,
                width: 16,
                frames: 7,
                count: 6,
                scenarios: vec![
                    FlowScenario::uniform(0.5, 0.0, 0.02, 1),
                    FlowScenario::uniform(0.5, std::f64::consts::PI, 0.02, 2),
                ],
                ..GenerateConfig::default()
            },
            model: ModelConfig {
                window: 2,
                inference_widths: vec![4, 8],
                correction_widths: vec![4],
                spatiotemporal: false,
            },
            ..RunConfig::default()
        };
        cfg.train.epochs = 2;
        cfg.train.train_horizon = 2;
        cfg.train.test_horizon = 3;
        cfg.train.batch_size = 2;
        cfg.train.train_fraction = 0.5;
        cfg.train.val_fraction = 0.25;
        cfg
    }

    fn tiny_data(cfg: &RunConfig) -> Vec<SequenceRecord<f64>> {
        let g = &cfg.generate;
        generate_dataset(&g.scenarios, &g.grid().unwrap(), g.frames, g.count).unwrap()
    }

    #[test]
    fn split_is_a_partition() {
        let s = split_dataset(300, 0.8, 0.1, 5);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (240, 30, 30));
        let mut all: Vec<_> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..300).collect::<Vec<_>>());
        assert_eq!(split_dataset(300, 0.8, 0.1, 5), s);
        assert_ne!(split_dataset(300, 0.8, 0.1, 6), s);
    }

    #[test]
    fn zero_epochs_returns_initial_parameters() {
        let mut cfg = tiny_config();
        cfg.train.epochs = 0;
        let data = tiny_data(&cfg);
        let ck = train(&cfg, &data).unwrap();
        assert!(ck.log.is_empty());
        assert_eq!(ck.epoch, None);
        let init = Model::new(cfg.model.clone())
            .unwrap()
            .init_params::<f64>(cfg.train.seed);
        for ((a, p), (b, q)) in ck.params.iter().zip(init.iter()) {
            assert_eq!(a, b);
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn training_is_deterministic_and_logs_weighted_totals() {
        let cfg = tiny_config();
        let data = tiny_data(&cfg);
        let a = train(&cfg, &data).unwrap();
        let b = train(&cfg, &data).unwrap();
        assert_eq!(a.log, b.log);
        for ((_, p), (_, q)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(p.value, q.value);
        }
        let w = cfg.loss.weights;
        for e in &a.log {
            let l = e.loss;
            let sum = w.data * l.data + w.physical * l.physical + w.temporal * l.temporal;
            assert!(
                (sum - l.total).abs() <= 1e-6 * l.total.abs().max(1e-300),
                "{l:?}"
            );
        }
    }

    #[test]
    fn every_parameter_moves_after_an_epoch() {
        let mut cfg = tiny_config();
        cfg.train.epochs = 1;
        cfg.train.val_fraction = 0.0;
        cfg.train.train_fraction = 1.0;
        cfg.train.batch_size = 1;
        let data = tiny_data(&cfg);
        let ck = train(&cfg, &data).unwrap();
        let init = Model::new(cfg.model.clone())
            .unwrap()
            .init_params::<f64>(cfg.train.seed);
        for ((name, p), (_, q)) in ck.params.iter().zip(init.iter()) {
            assert!(p.value.data() != q.value.data(), "{name} did not change");
        }
    }

    #[test]
    fn no_correction_leaves_the_correction_net_untouched() {
        let mut cfg = tiny_config();
        cfg.train.epochs = 1;
        cfg.ablation.no_correction = true;
        let data = tiny_data(&cfg);
        let ck = train(&cfg, &data).unwrap();
        let init = Model::new(cfg.model.clone())
            .unwrap()
            .init_params::<f64>(cfg.train.seed);
        for ((name, p), (_, q)) in ck.params.iter().zip(init.iter()) {
            assert_eq!(name.starts_with("cor."), p.value == q.value, "{name}");
        }
    }

    #[test]
    fn perfect_prediction_scores_zero_error_and_full_csi() {
        let cfg = tiny_config();
        let data = tiny_data(&cfg);
        let truth: Vec<_> = data.iter().map(|r| r.frames[2..5].to_vec()).collect();
        let input = EvalInput {
            predicted: truth.clone(),
            truth,
            last_observed: data.iter().map(|r| r.frames[1].clone()).collect(),
            latent: None,
        };
        let report = metric_report(&input, &CsiThresholds::default()).unwrap();
        assert_eq!(report.model.mse, 0.0);
        assert_eq!(report.model.per_frame_mse.len(), 3);
        assert!(report.persistence.mse > 0.0);
        assert!(report.csi.iter().all(|&(_, c)| c == 1.0));
    }

    #[test]
    fn latent_report_recovers_known_scale_and_sign() {
        let u = |s: f64| VectorField2::uniform(4, 4, s * 0.5, s * 0.1);
        let lat = LatentComparison {
            estimated_u: vec![vec![u(3.0), u(3.0)], vec![u(-3.0)]],
            true_u: vec![vec![u(1.0), u(1.0)], vec![u(-1.0)]],
            estimated_p: vec![
                vec![ScalarField::<f64>::zeros(4, 4); 2],
                vec![ScalarField::zeros(4, 4)],
            ],
            true_p: vec![
                vec![ScalarField::zeros(4, 4); 2],
                vec![ScalarField::zeros(4, 4)],
            ],
            tracer: vec![
                vec![ScalarField::filled(4, 4, 1.0); 2],
                vec![ScalarField::filled(4, 4, 1.0)],
            ],
        };
        let r = latent_report(&lat).unwrap();
        assert!((r.alpha_initial.unwrap() - 3.0).abs() < 1e-12);
        assert!((r.alpha_point.unwrap() - 3.0).abs() < 1e-12);
        assert!((r.alpha_pooled.unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(r.sign_agreement, Some(1.0));
        assert_eq!(r.corr_p, None);
    }

    #[test]
    fn direction_check_ignores_tracer_free_cells() {
        // Correct flow where the tracer sits, a strong opposite drift elsewhere.
        let est = ScalarField::from_fn(4, 4, |i, _| if i == 0 { 0.5 } else { -2.0 });
        let est = VectorField2::new(est, ScalarField::zeros(4, 4)).unwrap();
        let tracer = ScalarField::from_fn(4, 4, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let lat = LatentComparison {
            estimated_u: vec![vec![est]],
            true_u: vec![vec![VectorField2::uniform(4, 4, 0.5, 0.0)]],
            estimated_p: vec![vec![ScalarField::<f64>::zeros(4, 4)]],
            true_p: vec![vec![ScalarField::zeros(4, 4)]],
            tracer: vec![vec![tracer]],
        };
        let r = latent_report(&lat).unwrap();
        // The whole-field fit is dominated by the drift and comes out negative.
        assert!(r.alpha_initial.unwrap() < 0.0);
        assert_eq!(r.alpha_pooled, Some(1.0));
        assert_eq!(r.per_sequence[0].unwrap().mean_estimated_ux, 0.5);
        assert_eq!(r.sign_agreement, Some(1.0));
    }

    #[test]
    fn ablation_suite_emits_every_row() {
        let mut cfg = tiny_config();
        cfg.train.epochs = 1;
        let data = tiny_data(&cfg);
        let rows = run_ablations(&cfg, &data, |_, _| {}).unwrap();
        assert_eq!(rows.len(), 8);
        assert_eq!(rows[0].ablation, Ablation::Normal);
        assert!(matches!(rows[0].outcome, AblationOutcome::Finished { .. }));
    }

    #[test]
    fn short_sequences_are_rejected() {
        let mut cfg = tiny_config();
        cfg.train.train_horizon = 6;
        let data = tiny_data(&cfg);
        assert!(matches!(train(&cfg, &data), Err(Error::InvalidArgument(_))));
    }
}
