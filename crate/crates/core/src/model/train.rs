use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::part_model::{argmax, PartModel};
use crate::data::{group_sampler, Sample};
use crate::tensor::{Grads, LrSchedule, Optimizer, OptimizerKind, Result, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub optimizer: OptimizerKind,
    pub batch: usize,
    pub per_class: usize,
    /// Drives batch order and per-sample part discovery.
    pub seed: u64,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    /// Training images are shifted by up to this many pixels per axis.
    pub shift: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            schedule: LrSchedule::default(),
            optimizer: OptimizerKind::Adam,
            batch: 16,
            per_class: 4,
            seed: 0,
            max_steps: None,
            shift: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch's samples.
    pub loss: f64,
    /// Test accuracy in `[0, 1]` after the epoch.
    pub top1: f64,
    pub steps: usize,
}

/// Fraction of samples whose global-branch prediction equals the label.
pub fn evaluate(model: &PartModel, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let hits: Vec<bool> = samples
        .par_iter()
        .map(|s| model.predict(&s.image).map(|p| p == s.label))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / samples.len() as f64)
}

/// Averaged loss and gradients of one batch. Samples run in parallel; the
/// reduction follows batch order, so results do not depend on threading.
pub fn batch_gradients(
    model: &PartModel,
    samples: &[Sample],
    batch: &[usize],
    cfg: &TrainConfig,
    step: usize,
) -> Result<(f64, Grads, usize)> {
    let results: Vec<(f64, Grads, bool)> = batch
        .par_iter()
        .enumerate()
        .map(|(pos, &i)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream((step * batch.len() + pos) as u64 + 1);
            let s = &samples[i];
            let shifted;
            let image = if cfg.shift > 0 {
                let r = cfg.shift as isize;
                let (dx, dy) = (rng.gen_range(-r..=r), rng.gen_range(-r..=r));
                shifted = s.image.translated(dx, dy);
                &shifted
            } else {
                &s.image
            };
            let (loss, grads, logits, _) = model.loss_and_grads(image, s.label, &mut rng)?;
            Ok((loss, grads, argmax(&logits) == s.label))
        })
        .collect::<Result<_>>()?;
    let mut total = Grads::zeros_like(&model.store);
    let (mut loss, mut hits) = (0.0, 0);
    for (l, g, hit) in &results {
        loss += l;
        total.accumulate(g);
        hits += *hit as usize;
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    Ok((loss / n, total, hits))
}

/// Trains `model` on `train`, evaluating on `test` after every epoch.
pub fn train(
    model: &mut PartModel,
    train: &[Sample],
    test: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.config.classes) {
        return Err(TensorError::Argument(format!("label {bad} outside {} classes", model.config.classes)));
    }
    let mut sampler_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let batches = group_sampler(&labels, cfg.batch, cfg.per_class, &mut sampler_rng)
            .map_err(|e| TensorError::Argument(e.to_string()))?;
        let lr = cfg.schedule.at(epoch);
        let (mut loss_sum, mut seen) = (0.0, 0);
        for batch in &batches {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let (loss, grads, _) = batch_gradients(model, train, batch, cfg, step)?;
            if !loss.is_finite() {
                return Err(TensorError::Argument(format!("non-finite loss at step {step}")));
            }
            optimizer.step(&mut model.store, &grads, lr);
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
            step += 1;
        }
        let metrics = EpochMetrics {
            epoch,
            loss: if seen > 0 { loss_sum / seen as f64 } else { f64::NAN },
            top1: evaluate(model, test)?,
            steps: step,
        };
        log::info!("epoch {epoch}: loss {:.4} top1 {:.4} lr {lr:e}", metrics.loss, metrics.top1);
        on_epoch(&metrics);
        history.push(metrics);
        if cfg.max_steps.is_some_and(|m| step >= m) {
            break 'epochs;
        }
    }
    Ok(history)
}
