use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::passes::{alignment_loss, alignment_samples, forecast_loss, BatchSampler, ForecastSample};
use super::{LogRecord, LogSink, Optimizer, TrainConfig};
use crate::backbone::FreezePolicy;
use crate::data::{RawSeries, WindowSource};
use crate::error::{Error, Result};
use crate::eval::evaluate_forecast;
use crate::model::Model;
use crate::params::Grads;
use crate::scalar::Scalar;

/// Per-step training losses of the alignment stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentSummary {
    pub losses: Vec<f64>,
}

/// Per-step training losses of both forecasting phases.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LpFtSummary {
    pub lp_losses: Vec<f64>,
    pub ft_losses: Vec<f64>,
    /// Best validation MSE seen by early stopping, if it ran.
    pub best_val_mse: Option<f64>,
    /// Fine-tuning step after which early stopping ended the phase.
    pub stopped_at: Option<usize>,
}

fn dropout_rng(model_dropout: f64, rng: &mut ChaCha8Rng) -> Option<&mut ChaCha8Rng> {
    (model_dropout > 0.0).then_some(rng)
}

fn check_loss(loss: f64, step: usize, phase: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            step,
            phase: phase.to_string(),
        })
    }
}

/// Stage 1: next-patch prediction on look-back windows of `train`.
///
/// Applies `policy`, then runs `config.steps` optimizer steps. Each step
/// draws `batch_size` windows; every channel of every window is one sample.
pub fn run_alignment<T: Scalar>(
    model: &mut Model<T>,
    train: &RawSeries<T>,
    config: &TrainConfig,
    policy: &FreezePolicy,
    log: &mut dyn LogSink,
) -> Result<AlignmentSummary> {
    config.validate_alignment()?;
    if model.align_head.is_none() {
        return Err(Error::Config("alignment needs a model with an alignment head".into()));
    }
    let source = WindowSource::new(train, model.config.t_in, 0)?;
    model.apply_freeze_policy(policy);
    let mut sampler = BatchSampler::new(source.len(), config.seed);
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
    let dropout = model.config.backbone.dropout;
    let mut losses = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let mut samples = Vec::new();
        for k in sampler.next_batch(config.batch_size) {
            samples.extend(alignment_samples(model, &source.get(k))?);
        }
        let mut rng = sampler.fork_rng();
        let mut grads = Grads::for_trainable(&model.params);
        let loss = alignment_loss(model, &samples, Some(&mut grads), dropout_rng(dropout, &mut rng))?.as_f64();
        check_loss(loss, step, "alignment")?;
        optimizer.step(&mut model.params, &grads)?;
        log.record(&LogRecord {
            phase: "alignment".into(),
            step,
            loss,
            lr: optimizer.learning_rate(),
            val_mse: None,
        })?;
        losses.push(loss);
    }
    Ok(AlignmentSummary { losses })
}

/// Stage 2: linear probing (forecast head only) for `lp_steps`, then
/// fine-tuning of `policy`'s trainable set for `ft_steps`.
///
/// Each phase starts a fresh optimizer. With early stopping configured and
/// `val` given, fine-tuning stops once validation MSE has not improved for
/// `patience` evaluations, and the best parameters are restored.
pub fn run_lp_ft<T: Scalar>(
    model: &mut Model<T>,
    train: &RawSeries<T>,
    val: Option<&RawSeries<T>>,
    config: &TrainConfig,
    policy: &FreezePolicy,
    log: &mut dyn LogSink,
) -> Result<LpFtSummary> {
    config.validate_forecasting()?;
    let shape = model
        .config
        .forecast
        .ok_or_else(|| Error::Config("forecasting needs a model with a forecast head".into()))?;
    if shape.channels != train.channels() {
        return Err(Error::shape("training channels", shape.channels, train.channels()));
    }
    let t_in = model.config.t_in;
    let source = WindowSource::new(train, t_in, shape.horizon)?;
    let val_source = match (config.early_stopping, val) {
        (Some(es), Some(v)) => Some((es, WindowSource::new(v, t_in, shape.horizon)?)),
        _ => None,
    };
    let mut sampler = BatchSampler::new(source.len(), config.seed);
    let dropout = model.config.backbone.dropout;

    let mut run_phase = |model: &mut Model<T>,
                         phase: &str,
                         steps: usize,
                         early: Option<&(super::EarlyStopping, WindowSource<'_, T>)>,
                         log: &mut dyn LogSink|
     -> Result<(Vec<f64>, Option<f64>, Option<usize>)> {
        let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
        let mut losses = Vec::with_capacity(steps);
        let mut best: Option<(f64, Vec<ndarray::ArrayD<T>>)> = None;
        let mut stale = 0;
        let mut stopped_at = None;
        for step in 1..=steps {
            let batch: Vec<_> = sampler
                .next_batch(config.batch_size)
                .into_iter()
                .map(|k| ForecastSample::new(model, source.get(k)))
                .collect();
            let mut rng = sampler.fork_rng();
            let mut grads = Grads::for_trainable(&model.params);
            let loss = forecast_loss(model, &batch, Some(&mut grads), dropout_rng(dropout, &mut rng))?.as_f64();
            check_loss(loss, step, phase)?;
            optimizer.step(&mut model.params, &grads)?;
            let mut val_mse = None;
            if let Some((es, vs)) = early {
                if step % es.eval_every == 0 || step == steps {
                    let m = evaluate_forecast(model, vs, None)?.mse;
                    val_mse = Some(m);
                    if best.as_ref().is_none_or(|(b, _)| m < *b) {
                        best = Some((m, model.snapshot()));
                        stale = 0;
                    } else {
                        stale += 1;
                    }
                }
            }
            log.record(&LogRecord {
                phase: phase.into(),
                step,
                loss,
                lr: optimizer.learning_rate(),
                val_mse,
            })?;
            losses.push(loss);
            if early.is_some_and(|(es, _)| stale >= es.patience) {
                stopped_at = Some(step);
                break;
            }
        }
        let best_mse = best.map(|(m, values)| {
            for (p, v) in model.params.iter_mut().zip(values) {
                p.value = v;
            }
            m
        });
        Ok((losses, best_mse, stopped_at))
    };

    model.apply_freeze_policy(&FreezePolicy::head_only());
    let (lp_losses, _, _) = run_phase(model, "linear_probe", config.lp_steps, None, log)?;

    let ft_policy = if config.unfreeze_all_in_ft {
        FreezePolicy::all()
    } else {
        policy.clone()
    };
    model.apply_freeze_policy(&ft_policy);
    let (ft_losses, best_val_mse, stopped_at) =
        run_phase(model, "fine_tune", config.ft_steps, val_source.as_ref(), log)?;
    Ok(LpFtSummary {
        lp_losses,
        ft_losses,
        best_val_mse,
        stopped_at,
    })
}
