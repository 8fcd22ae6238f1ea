//! Joint multi-level training over the delta parameter set.
//!
//! Each step runs one forward per instance (template -> encoder -> refine ->
//! Z predictions) on an independent tape, averages the per-instance joint
//! losses and gradients over the batch, and applies a single Adam update to
//! the delta groups only. Refinement re-executes inside every step, so the
//! derived verbalizer matrices always reflect the current parameters.
//!
//! Instance maps run through [`crate::parallel`]; per-instance results are
//! collected in input order and reduced sequentially, so training is
//! bit-deterministic regardless of thread count.

use crate::data::Instance;
use crate::error::{Error, Result};
use crate::metrics::{level_metrics, MetricsReport};
use crate::model::{argmax, DeltaGrads, InstanceEval, ParamKey, PemiModel};
use crate::parallel::{map_collect, ExecMode};
use crate::template::ModifiedInput;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Hyperparameters of the training loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub eval_step: usize,
    /// Per-level loss weights; empty means all 1.0.
    pub lambda: Vec<f32>,
    pub seed: u64,
    /// Stop after this many dev evaluations without improvement of the
    /// selection metric (summed dev macro-F1). None disables early stopping.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            max_epochs: 15,
            eval_step: 500,
            lambda: Vec::new(),
            seed: 0,
            patience: Some(5),
        }
    }
}

impl TrainConfig {
    /// Resolves the lambda vector against the hierarchy depth.
    pub fn resolved_lambda(&self, z_levels: usize) -> Result<Vec<f32>> {
        let lambda = if self.lambda.is_empty() {
            vec![1.0; z_levels]
        } else {
            self.lambda.clone()
        };
        if lambda.len() != z_levels {
            return Err(Error::Config(format!(
                "lambda has {} entries but the hierarchy has {z_levels} levels",
                lambda.len()
            )));
        }
        if lambda.iter().any(|&l| l < 0.0 || !l.is_finite()) {
            return Err(Error::Config("lambda weights must be finite and >= 0".into()));
        }
        self.validate()?;
        Ok(lambda)
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("eval_step", self.eval_step),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("train.{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Cross-entropy -log p(y) from logits on the stable log-sum-exp path.
pub fn level_loss_from_logits(logits: &[f32], y: usize) -> Result<f32> {
    if y >= logits.len() {
        return Err(Error::data(format!(
            "class index {y} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = logits.iter().map(|&v| ((v as f64) - max).exp()).sum();
    Ok(((max + sum.ln()) - logits[y] as f64) as f32)
}

/// Weighted sum of per-level losses.
pub fn joint_loss(losses: &[f32], lambda: &[f32]) -> Result<f32> {
    if losses.len() != lambda.len() {
        return Err(Error::data(format!(
            "{} losses vs {} lambda weights",
            losses.len(),
            lambda.len()
        )));
    }
    let sum: f64 = losses
        .iter()
        .zip(lambda)
        .map(|(&l, &w)| l as f64 * w as f64)
        .sum();
    Ok(sum as f32)
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Optimizer and early-stopping bookkeeping across a fit run.
#[derive(Debug, Clone)]
pub struct TrainState {
    moments: BTreeMap<ParamKey, Moments>,
    pub step: usize,
    pub epoch: usize,
    pub best_score: f64,
    pub best: Option<TrainableSnapshot>,
}

impl TrainState {
    pub fn new() -> Self {
        TrainState {
            moments: BTreeMap::new(),
            step: 0,
            epoch: 0,
            best_score: f64::NEG_INFINITY,
            best: None,
        }
    }
}

impl Default for TrainState {
    fn default() -> Self {
        Self::new()
    }
}

/// Copy of the delta set, used for best-checkpoint selection.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableSnapshot {
    pub prompt: Tensor,
    pub verbalizer: crate::hlr::VerbalizerState,
}

impl TrainableSnapshot {
    pub fn of(model: &PemiModel) -> Self {
        TrainableSnapshot {
            prompt: model.prompt.clone(),
            verbalizer: model.verbalizer.clone(),
        }
    }

    pub fn restore(&self, model: &mut PemiModel) {
        model.prompt = self.prompt.clone();
        model.verbalizer = self.verbalizer.clone();
    }
}

/// Mean losses of one training step.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub per_level_loss: Vec<f32>,
    pub joint_loss: f32,
}

/// Batch forward/backward without the optimizer update: mean per-level
/// losses, mean joint loss, and mean delta gradients.
pub fn batch_gradients(
    model: &PemiModel,
    batch: &[(ModifiedInput, Vec<usize>)],
    lambda: &[f32],
    mode: ExecMode,
) -> Result<(StepStats, DeltaGrads)> {
    if batch.is_empty() {
        return Err(Error::data("empty batch"));
    }
    let evals: Vec<Result<InstanceEval>> = map_collect(batch, mode, |(input, gold)| {
        model.instance_grads(input, gold, lambda)
    });
    let mut collected = Vec::with_capacity(evals.len());
    for e in evals {
        collected.push(e?);
    }
    let b = collected.len() as f64;
    let z_levels = model.num_levels();

    let mut loss_acc = vec![0.0f64; z_levels];
    let mut joint_acc = 0.0f64;
    for e in &collected {
        for (acc, &l) in loss_acc.iter_mut().zip(&e.per_level_losses) {
            *acc += l as f64;
        }
        joint_acc += e.joint_loss as f64;
    }
    let stats = StepStats {
        per_level_loss: loss_acc.iter().map(|&l| (l / b) as f32).collect(),
        joint_loss: (joint_acc / b) as f32,
    };
    if !stats.joint_loss.is_finite() {
        return Err(Error::NonFinite { op: "batch joint loss" });
    }

    let mut grads = DeltaGrads::new();
    for key in collected[0].grads.keys() {
        let shape = collected[0].grads[key].shape().to_vec();
        let mut acc = vec![0.0f64; collected[0].grads[key].numel()];
        for e in &collected {
            for (a, &g) in acc.iter_mut().zip(e.grads[key].data()) {
                *a += g as f64;
            }
        }
        let mean: Vec<f32> = acc.iter().map(|&a| (a / b) as f32).collect();
        grads.insert(*key, Tensor::from_vec(shape, mean)?);
    }
    Ok((stats, grads))
}

fn adam_update(
    model: &mut PemiModel,
    grads: &DeltaGrads,
    state: &mut TrainState,
    learning_rate: f32,
) {
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - ADAM_BETA1.powi(t);
    let bias2 = 1.0 - ADAM_BETA2.powi(t);
    for (key, grad) in grads {
        let moments = state.moments.entry(*key).or_insert_with(|| Moments {
            m: vec![0.0; grad.numel()],
            v: vec![0.0; grad.numel()],
        });
        let param: &mut [f32] = match key {
            ParamKey::Prompt => model.prompt.data_mut(),
            ParamKey::Bottom => model.verbalizer.bottom.data_mut(),
            ParamKey::Units(z) => model.verbalizer.units.level_mut(*z).data_mut(),
        };
        for (i, p) in param.iter_mut().enumerate() {
            let g = grad.data()[i] as f64;
            let m = ADAM_BETA1 * moments.m[i] as f64 + (1.0 - ADAM_BETA1) * g;
            let v = ADAM_BETA2 * moments.v[i] as f64 + (1.0 - ADAM_BETA2) * g * g;
            moments.m[i] = m as f32;
            moments.v[i] = v as f32;
            let m_hat = m / bias1;
            let v_hat = v / bias2;
            *p -= (learning_rate as f64 * m_hat / (v_hat.sqrt() + ADAM_EPS)) as f32;
        }
    }
}

/// One optimizer step over a batch: forward, backward, Adam on delta only.
/// Fails without touching the model if any instance errors.
pub fn train_step(
    model: &mut PemiModel,
    batch: &[(ModifiedInput, Vec<usize>)],
    config: &TrainConfig,
    state: &mut TrainState,
    mode: ExecMode,
) -> Result<StepStats> {
    let lambda = config.resolved_lambda(model.num_levels())?;
    let (stats, grads) = batch_gradients(model, batch, &lambda, mode)?;
    adam_update(model, &grads, state, config.learning_rate);
    Ok(stats)
}

/// Argmax predictions per level for a set of instances.
pub fn predict_all(
    model: &PemiModel,
    encoded: &[(ModifiedInput, Vec<usize>)],
    mode: ExecMode,
) -> Result<Vec<Vec<usize>>> {
    let results: Vec<Result<Vec<usize>>> =
        map_collect(encoded, mode, |(input, _)| model.instance_predict(input));
    results.into_iter().collect()
}

/// Evaluates a dataset: per-level macro-F1, accuracy, label-wise F1.
pub fn evaluate(
    model: &PemiModel,
    encoded: &[(ModifiedInput, Vec<usize>)],
    mode: ExecMode,
) -> Result<MetricsReport> {
    let preds = predict_all(model, encoded, mode)?;
    let z_levels = model.num_levels();
    let mut per_level = Vec::with_capacity(z_levels);
    for z in 1..=z_levels {
        let gold: Vec<usize> = encoded.iter().map(|(_, g)| g[z - 1]).collect();
        let pred: Vec<usize> = preds.iter().map(|p| p[z - 1]).collect();
        per_level.push(level_metrics(
            z,
            model.hierarchy.level_labels(z),
            &gold,
            &pred,
        )?);
    }
    Ok(MetricsReport { per_level })
}

/// One evaluation record of the training log (JSON-lines schema).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss_per_level: Vec<f32>,
    pub dev_f1_per_level: Vec<f64>,
    pub dev_acc_per_level: Vec<f64>,
}

/// Outcome of a fit run: the training log, the best delta snapshot by
/// summed dev macro-F1, and its score.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub log: Vec<EvalRecord>,
    pub best: TrainableSnapshot,
    pub best_score: f64,
    pub steps: usize,
}

impl FitOutcome {
    pub fn log_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.log {
            out.push_str(&serde_json::to_string(rec).expect("log record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Trains until max_epochs (or early stopping), evaluating the dev set
/// every `eval_step` steps plus once at the end, and keeps the best
/// checkpoint by summed dev macro-F1.
pub fn fit(
    model: &mut PemiModel,
    train_set: &[Instance],
    dev_set: &[Instance],
    config: &TrainConfig,
    mode: ExecMode,
) -> Result<FitOutcome> {
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::data("fit requires non-empty train and dev splits"));
    }
    config.resolved_lambda(model.num_levels())?;

    let encode = |set: &[Instance]| -> Result<Vec<(ModifiedInput, Vec<usize>)>> {
        set.iter()
            .enumerate()
            .map(|(i, inst)| model.encode_instance(inst, i + 1))
            .collect()
    };
    let train_encoded = encode(train_set)?;
    let dev_encoded = encode(dev_set)?;

    let mut state = TrainState::new();
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut log = Vec::new();
    let mut last_stats: Option<StepStats> = None;
    let mut evals_since_improvement = 0usize;
    let mut stop = false;

    let record_eval = |model: &PemiModel,
                           state: &mut TrainState,
                           last_stats: &Option<StepStats>,
                           log: &mut Vec<EvalRecord>,
                           evals_since_improvement: &mut usize|
     -> Result<()> {
        let report = evaluate(model, &dev_encoded, mode)?;
        let score = report.summed_macro_f1();
        let record = EvalRecord {
            step: state.step,
            epoch: state.epoch,
            loss_per_level: last_stats
                .as_ref()
                .map(|s| s.per_level_loss.clone())
                .unwrap_or_default(),
            dev_f1_per_level: report.per_level.iter().map(|l| l.macro_f1).collect(),
            dev_acc_per_level: report.per_level.iter().map(|l| l.accuracy).collect(),
        };
        log::info!(
            "step {} epoch {} dev f1 {:?}",
            record.step,
            record.epoch,
            record.dev_f1_per_level
        );
        log.push(record);
        if score > state.best_score {
            state.best_score = score;
            state.best = Some(TrainableSnapshot::of(model));
            *evals_since_improvement = 0;
        } else {
            *evals_since_improvement += 1;
        }
        Ok(())
    };

    'epochs: for epoch in 1..=config.max_epochs {
        state.epoch = epoch;
        let mut order: Vec<usize> = (0..train_encoded.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(ModifiedInput, Vec<usize>)> =
                chunk.iter().map(|&i| train_encoded[i].clone()).collect();
            let stats = train_step(model, &batch, config, &mut state, mode)?;
            last_stats = Some(stats);
            if state.step.is_multiple_of(config.eval_step) {
                record_eval(model, &mut state, &last_stats, &mut log, &mut evals_since_improvement)?;
                if let Some(patience) = config.patience {
                    if evals_since_improvement >= patience {
                        stop = true;
                        break 'epochs;
                    }
                }
            }
        }
    }
    if stop {
        log::info!("early stop after {} steps", state.step);
    }
    // final evaluation, always recorded
    record_eval(model, &mut state, &last_stats, &mut log, &mut evals_since_improvement)?;

    let best = state.best.clone().expect("at least one evaluation ran");
    Ok(FitOutcome {
        log,
        best,
        best_score: state.best_score,
        steps: state.step,
    })
}

/// Per-level argmaxes agree between probabilities and logits, so eval and
/// predict stay consistent.
pub fn predictions_from_probs(probs: &[Vec<f32>]) -> Vec<usize> {
    probs.iter().map(|p| argmax(p)).collect()
}
