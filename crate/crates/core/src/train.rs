//! Training loop, evaluation and the structured training log.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::graph::build_ppmi;
use crate::losses::{class_weights, LossBreakdown};
use crate::metrics::Metrics;
use crate::model::{DataShape, DcgNet, LossContext};
use crate::optim::{AdamW, Schedule};
use crate::param::ParamStore;
use crate::tape::Tape;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: usize,
        lr: f64,
        #[serde(flatten)]
        loss: LossBreakdown,
    },
    Epoch {
        epoch: usize,
        mean_total: f64,
        val: Metrics,
        best: bool,
    },
    Abort {
        step: usize,
        component: String,
        restored_epoch: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Epoch whose parameters the model holds after training; 0 means the
    /// initial parameters.
    pub best_epoch: usize,
    pub best_val: Option<Metrics>,
    pub steps: usize,
}

/// A fresh model whose graph prior comes from the training split.
pub fn build_model(data: &Dataset, config: &ModelConfig, seed: u64) -> Result<DcgNet> {
    let dict = data.dictionary().clone();
    let prior = build_ppmi(&data.train_concept_labels(), &dict, config.ppmi_smoothing)?;
    let shape = DataShape {
        num_classes: data.manifest.num_classes(),
        num_patches: data.manifest.num_patches,
        patch_dim: data.manifest.patch_dim,
    };
    DcgNet::new(config.clone(), dict, shape, prior.matrix, seed)
}

/// Loss settings with class weights counted on the training split.
pub fn loss_context(data: &Dataset, config: &TrainConfig) -> Result<LossContext> {
    let dict = data.dictionary();
    let mut ctx = LossContext::unweighted(dict, data.manifest.num_classes(), config.label_smoothing);
    ctx.weights = config.loss_weights.clone();
    if config.class_balanced {
        ctx.class_weights = class_weights(data.train.iter().map(|s| s.label), data.manifest.num_classes())?;
        ctx.concept_weights = (0..dict.num_concepts())
            .map(|k| class_weights(data.train.iter().map(|s| s.concepts[k]), dict.num_values(k)))
            .collect::<Result<_>>()?;
    }
    Ok(ctx)
}

/// Diagnosis and concept metrics; concept predictions come from the
/// pre-graph value logits.
pub fn evaluate(model: &DcgNet, samples: &[Sample]) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    let preds = model.predict(samples.iter().map(|s| &s.patches))?;
    let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let diag: Vec<usize> = preds.iter().map(|p| p.diagnosis).collect();
    let c_truth: Vec<Vec<usize>> = samples.iter().map(|s| s.concepts.clone()).collect();
    let c_pred: Vec<Vec<usize>> = preds.iter().map(|p| p.concepts.clone()).collect();
    Ok(Metrics::compute(
        &truth,
        &diag,
        model.num_classes(),
        &c_truth,
        &c_pred,
        &model.dictionary().values_per_concept(),
    ))
}

/// Trains in place. Every log record is passed to `sink` as it is made.
/// After return the model holds the parameters of the epoch with the best
/// validation diagnosis macro-F1. On divergence the model is restored to
/// that checkpoint (or the initial parameters) and `Error::Diverged` is
/// returned.
pub fn train(
    model: &mut DcgNet,
    data: &Dataset,
    config: &TrainConfig,
    sink: &mut dyn FnMut(&LogRecord) -> Result<()>,
) -> Result<TrainReport> {
    config.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Contract("training needs non-empty train and val splits".into()));
    }
    let ctx = loss_context(data, config)?;
    let per_epoch = data.train.len().div_ceil(config.batch_size);
    let schedule = Schedule::new(config.learning_rate, per_epoch * config.epochs, config.warmup_fraction);
    let mut opt = AdamW::new(model.params(), config.weight_decay);
    let mut best: (usize, Option<Metrics>, ParamStore) = (0, None, model.params().clone());
    let mut step = 0usize;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut total_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let lr = schedule.lr(step);
            match train_step(model, &mut opt, &batch, &ctx, lr) {
                Ok(loss) => {
                    total_sum += loss.total;
                    sink(&LogRecord::Step { epoch, step, lr, loss })?;
                }
                Err(StepError::Fatal(e)) => return Err(e),
                Err(StepError::Diverged(component)) => {
                    model.params_mut().load_values_from(&best.2)?;
                    sink(&LogRecord::Abort {
                        step,
                        component: component.clone(),
                        restored_epoch: best.0,
                    })?;
                    return Err(Error::Diverged { step, component });
                }
            }
            step += 1;
        }
        let val = evaluate(model, &data.val)?;
        let improved = best.1.is_none_or(|b| val.diag_f1 > b.diag_f1);
        if improved {
            best = (epoch, Some(val), model.params().clone());
        }
        sink(&LogRecord::Epoch {
            epoch,
            mean_total: total_sum / per_epoch as f64,
            val,
            best: improved,
        })?;
    }
    model.params_mut().load_values_from(&best.2)?;
    Ok(TrainReport {
        best_epoch: best.0,
        best_val: best.1,
        steps: step,
    })
}

/// One optimizer step; divergence reports the name of the offending
/// quantity.
fn train_step(
    model: &mut DcgNet,
    opt: &mut AdamW,
    batch: &[&Sample],
    ctx: &LossContext,
    lr: f64,
) -> std::result::Result<LossBreakdown, StepError> {
    let mut tape = Tape::new();
    let pass = model.begin(&mut tape, true).map_err(StepError::from)?;
    let (total, loss, _) = model.objective(&mut tape, &pass, batch, ctx, None).map_err(StepError::from)?;
    if let Some(name) = loss.non_finite() {
        return Err(StepError::Diverged(name.to_string()));
    }
    tape.backward(total).map_err(StepError::from)?;
    let store = model.params_mut();
    store.zero_grads();
    store.accumulate_grads(&tape, &pass.bound).map_err(StepError::from)?;
    if let Some((_, p)) = store.iter().find(|(_, p)| p.tensor.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite()))) {
        return Err(StepError::Diverged(format!("gradient of {}", p.name)));
    }
    opt.step(store, lr).map_err(StepError::from)?;
    if let Some((_, p)) = store.iter().find(|(_, p)| !p.tensor.all_finite()) {
        return Err(StepError::Diverged(format!("parameter {}", p.name)));
    }
    Ok(loss)
}

enum StepError {
    Fatal(Error),
    Diverged(String),
}

impl From<Error> for StepError {
    /// Numeric failures inside the forward/backward pass mean the run has
    /// diverged; anything else is a bug or bad input and propagates as is.
    fn from(e: Error) -> Self {
        match e {
            Error::Numeric { op, .. } => StepError::Diverged(op.to_string()),
            other => StepError::Fatal(other),
        }
    }
}
