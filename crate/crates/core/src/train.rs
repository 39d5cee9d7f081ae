//! The two training objectives (sequence classification vs masked
//! reconstruction), Adam with decoupled weight decay, and the
//! pretrain-then-finetune pipeline.
//!
//! Batch gradients accumulate sequentially in a fixed order, so a whole
//! training run is a pure function of (configs, dataset, seed).

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::mask::sample_mask;
use crate::matrix::{Matrix, Scalar};
use crate::model::{build, graph_forward, ModelConfig, Objective, ParamNodes, Parameters};

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_mask_ratio() -> f64 {
    0.75
}
fn default_per_patch_norm() -> bool {
    true
}

/// Optimization and objective settings for one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Fraction of tokens masked per sample; ignored for the classifier.
    #[serde(default = "default_mask_ratio")]
    pub mask_ratio: f64,
    /// Normalize each reconstruction target row to zero mean, unit variance.
    #[serde(default = "default_per_patch_norm")]
    pub per_patch_norm: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        if self.objective == Objective::Mae && !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "mask_ratio {} outside (0, 1)",
                self.mask_ratio
            )));
        }
        Ok(())
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }
}

/// Adam hyperparameters other than the learning rate.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

/// First/second moment estimates, one pair per tensor.
#[derive(Debug, Clone)]
pub struct AdamMoments<S> {
    pub m: Vec<Matrix<S>>,
    pub v: Vec<Matrix<S>>,
    pub step: u64,
}

impl<S: Scalar> AdamMoments<S> {
    pub fn new_like(tensors: &[&Matrix<S>]) -> Self {
        let zeros: Vec<Matrix<S>> = tensors
            .iter()
            .map(|t| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One Adam step with bias correction and decoupled weight decay.
pub fn adam_step<S: Scalar>(
    tensors: &mut [&mut Matrix<S>],
    moments: &mut AdamMoments<S>,
    grads: &[Matrix<S>],
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    if tensors.len() != grads.len() || tensors.len() != moments.m.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            details: format!(
                "{} tensors, {} grads, {} moments",
                tensors.len(),
                grads.len(),
                moments.m.len()
            ),
        });
    }
    for (i, g) in grads.iter().enumerate() {
        g.ensure_finite(&format!("gradient for tensor {i}"))?;
    }
    moments.step += 1;
    let t = moments.step as i32;
    let b1 = S::from_f64(hyper.beta1);
    let b2 = S::from_f64(hyper.beta2);
    let one_minus_b1 = S::from_f64(1.0 - hyper.beta1);
    let one_minus_b2 = S::from_f64(1.0 - hyper.beta2);
    let corr1 = S::from_f64(1.0 - hyper.beta1.powi(t));
    let corr2 = S::from_f64(1.0 - hyper.beta2.powi(t));
    let eps = S::from_f64(hyper.epsilon);
    let lr_s = S::from_f64(lr);
    let wd = S::from_f64(hyper.weight_decay);

    for ((tensor, grad), (m, v)) in tensors
        .iter_mut()
        .zip(grads.iter())
        .zip(moments.m.iter_mut().zip(moments.v.iter_mut()))
    {
        for ((p, &g), (mi, vi)) in tensor
            .data_mut()
            .iter_mut()
            .zip(grad.data().iter())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mi = b1 * *mi + one_minus_b1 * g;
            *vi = b2 * *vi + one_minus_b2 * g * g;
            let m_hat = *mi / corr1;
            let v_hat = *vi / corr2;
            *p -= lr_s * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
        }
        tensor.ensure_finite("parameters after optimizer step")?;
    }
    Ok(())
}

/// Normalizes each row to zero mean and unit variance (population variance
/// plus `eps` inside the square root).
pub fn normalize_rows<S: Scalar>(m: &Matrix<S>, eps: f64) -> Matrix<S> {
    let mut out = m.clone();
    let d = m.cols();
    let inv_d = S::from_f64(1.0 / d as f64);
    let epss = S::from_f64(eps);
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mut mean = S::zero();
        for &v in row.iter() {
            mean += v;
        }
        mean *= inv_d;
        let mut var = S::zero();
        for &v in row.iter() {
            let dv = v - mean;
            var += dv * dv;
        }
        var *= inv_d;
        let denom = (var + epss).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) / denom;
        }
    }
    out
}

pub const TARGET_NORM_EPS: f64 = 1e-6;

/// Mean squared reconstruction error. With `per_patch_norm` each target row
/// is normalized before the comparison.
pub fn mae_loss<S: Scalar>(
    pred: &Matrix<S>,
    targets: &Matrix<S>,
    per_patch_norm: bool,
) -> Result<f64> {
    if pred.shape() != targets.shape() {
        return Err(Error::ShapeMismatch {
            op: "mae_loss",
            details: format!("{:?} vs {:?}", pred.shape(), targets.shape()),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyMask);
    }
    let prepared = if per_patch_norm {
        normalize_rows(targets, TARGET_NORM_EPS)
    } else {
        targets.clone()
    };
    let mut acc = 0.0f64;
    for (p, t) in pred.data().iter().zip(prepared.data().iter()) {
        let d = p.as_f64() - t.as_f64();
        acc += d * d;
    }
    Ok(acc / pred.len() as f64)
}

/// Softmax cross-entropy of a `1 x C` logit row.
pub fn cls_loss<S: Scalar>(logits: &Matrix<S>, label: usize) -> Result<f64> {
    if logits.rows() != 1 || label >= logits.cols() {
        return Err(Error::InvalidArgument(format!(
            "label {label} for logits {:?}",
            logits.shape()
        )));
    }
    let row = logits.row(0);
    let max = row
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
    Ok(lse.ln() + max - row[label].as_f64())
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: Option<f64>,
}

/// Parameters plus optimizer state.
#[derive(Debug, Clone)]
pub struct TrainState<S> {
    pub params: Parameters<S>,
    pub moments: AdamMoments<S>,
    pub loss_history: Vec<f64>,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(params: Parameters<S>) -> Self {
        let moments = AdamMoments::new_like(&params.tensors());
        Self {
            params,
            moments,
            loss_history: Vec::new(),
        }
    }

    pub fn apply_gradients(&mut self, grads: &[Matrix<S>], lr: f64, hyper: &AdamHyper) -> Result<()> {
        let mut tensors = self.params.tensors_mut();
        adam_step(&mut tensors, &mut self.moments, grads, lr, hyper)
    }
}

/// Outcome of one training stage. `diverged_at` is set when a non-finite
/// loss aborted the run; the state then holds the last finite parameters.
#[derive(Debug, Clone)]
pub struct TrainRun<S> {
    pub state: TrainState<S>,
    pub curve: Vec<EpochRecord>,
    pub diverged_at: Option<usize>,
}

impl<S: Scalar> TrainRun<S> {
    pub fn final_loss(&self) -> Option<f64> {
        self.curve.last().map(|r| r.mean_loss)
    }
}

fn check_dataset<S: Scalar>(model: &ModelConfig, data: &Dataset<S>) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if data.spec.seq_len != model.seq_len || data.spec.patch_dim != model.patch_dim {
        return Err(Error::InvalidConfig(format!(
            "dataset is {}x{}, model wants {}x{}",
            data.spec.seq_len, data.spec.patch_dim, model.seq_len, model.patch_dim
        )));
    }
    if data.labels.iter().any(|&l| l >= model.num_classes) {
        return Err(Error::InvalidConfig(
            "label outside model class range".into(),
        ));
    }
    Ok(())
}

/// Builds the loss graph for one sample and returns (loss value, gradients
/// in tensor order, predicted class for classifier samples).
fn sample_gradients<S: Scalar>(
    params: &Parameters<S>,
    cfg: &TrainConfig,
    tokens: &Matrix<S>,
    label: usize,
    rng: &mut impl Rng,
) -> Result<(f64, Vec<Matrix<S>>, Option<usize>)> {
    let mut g = Graph::new();
    let nodes = ParamNodes::register(&mut g, params)?;
    let (loss_id, predicted);
    match cfg.objective {
        Objective::Classifier => {
            let fwd = graph_forward(&mut g, &params.config, &nodes, tokens, Objective::Classifier, None)?;
            loss_id = g.softmax_cross_entropy(fwd.output, label)?;
            predicted = Some(argmax_row(g.value(fwd.output)));
        }
        Objective::Mae => {
            let mask = sample_mask(params.config.seq_len, cfg.mask_ratio, rng)?;
            let fwd = graph_forward(
                &mut g,
                &params.config,
                &nodes,
                tokens,
                Objective::Mae,
                Some(&mask),
            )?;
            let mut targets = tokens.select_rows(mask.positions())?;
            if cfg.per_patch_norm {
                targets = normalize_rows(&targets, TARGET_NORM_EPS);
            }
            loss_id = g.mse_loss(fwd.output, targets)?;
            predicted = None;
        }
    }
    let loss = g.value(loss_id).get(0, 0).as_f64();
    let grads_by_node = g.backward(loss_id)?;
    let grads: Vec<Matrix<S>> = nodes
        .in_order()
        .into_iter()
        .zip(params.tensors())
        .map(|(id, t)| {
            grads_by_node
                .get(id)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(t.rows(), t.cols()))
        })
        .collect();
    Ok((loss, grads, predicted))
}

fn argmax_row<S: Scalar>(m: &Matrix<S>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (c, v) in m.row(0).iter().enumerate() {
        if v.as_f64() > best_v {
            best_v = v.as_f64();
            best = c;
        }
    }
    best
}

/// Trains from a fresh seed-deterministic initialization.
pub fn train<S: Scalar>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset<S>,
) -> Result<TrainRun<S>> {
    let params = build(model, cfg.seed)?;
    train_with_params(params, cfg, data, "train")
}

/// Trains starting from the given parameters. `stage` labels the loss-curve
/// rows.
pub fn train_with_params<S: Scalar>(
    params: Parameters<S>,
    cfg: &TrainConfig,
    data: &Dataset<S>,
    stage: &str,
) -> Result<TrainRun<S>> {
    cfg.validate()?;
    check_dataset(&params.config, data)?;
    let hyper = cfg.hyper();
    let mut state = TrainState::new(params);
    let mut curve = Vec::with_capacity(cfg.epochs);
    // Separate stream from initialization so reseeding one never shifts the
    // other.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ TRAIN_RNG_TAG);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Matrix<S>>> = None;
            for &idx in batch {
                let step = sample_gradients(
                    &state.params,
                    cfg,
                    &data.sequences[idx],
                    data.labels[idx],
                    &mut rng,
                );
                let (loss, grads, predicted) = match step {
                    Ok(v) => v,
                    Err(Error::NonFinite(_)) => {
                        state.loss_history.push(f64::NAN);
                        return Ok(TrainRun {
                            state,
                            curve,
                            diverged_at: Some(epoch),
                        });
                    }
                    Err(e) => return Err(e),
                };
                if !loss.is_finite() {
                    state.loss_history.push(f64::NAN);
                    return Ok(TrainRun {
                        state,
                        curve,
                        diverged_at: Some(epoch),
                    });
                }
                epoch_loss += loss;
                if predicted == Some(data.labels[idx]) {
                    correct += 1;
                }
                match &mut acc {
                    None => acc = Some(grads),
                    Some(sum) => {
                        for (s, g) in sum.iter_mut().zip(grads.iter()) {
                            s.add_assign(g)?;
                        }
                    }
                }
            }
            let mut grads = acc.expect("batches are non-empty");
            let inv = S::from_f64(1.0 / batch.len() as f64);
            for g in grads.iter_mut() {
                *g = g.scale(inv);
            }
            state.apply_gradients(&grads, cfg.learning_rate, &hyper)?;
        }

        let mean_loss = epoch_loss / data.len() as f64;
        let accuracy = (cfg.objective == Objective::Classifier)
            .then(|| correct as f64 / data.len() as f64);
        state.loss_history.push(mean_loss);
        curve.push(EpochRecord {
            stage: stage.to_string(),
            epoch,
            mean_loss,
            accuracy,
        });
    }

    Ok(TrainRun {
        state,
        curve,
        diverged_at: None,
    })
}

const TRAIN_RNG_TAG: u64 = 0x7472_6169_6e30;

/// Classification accuracy over a dataset.
pub fn evaluate_accuracy<S: Scalar>(params: &Parameters<S>, data: &Dataset<S>) -> Result<f64> {
    check_dataset(&params.config, data)?;
    let mut correct = 0usize;
    for (tokens, &label) in data.sequences.iter().zip(data.labels.iter()) {
        let out = crate::model::forward(params, tokens, Objective::Classifier, None, false)?;
        let logits = out.output.logits().expect("classifier output");
        if argmax_row(logits) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mean reconstruction loss over a dataset under seed-deterministic masks.
pub fn evaluate_mae_loss<S: Scalar>(
    params: &Parameters<S>,
    data: &Dataset<S>,
    mask_ratio: f64,
    per_patch_norm: bool,
    seed: u64,
) -> Result<f64> {
    check_dataset(&params.config, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for tokens in &data.sequences {
        let plan = sample_mask(params.config.seq_len, mask_ratio, &mut rng)?;
        let out = crate::model::forward(params, tokens, Objective::Mae, Some(&plan), false)?;
        let pred = out.output.reconstruction().expect("reconstruction output");
        let targets = tokens.select_rows(plan.positions())?;
        acc += mae_loss(pred, &targets, per_patch_norm)?;
    }
    Ok(acc / data.len() as f64)
}

/// Result of the two-stage pipeline.
#[derive(Debug, Clone)]
pub struct PipelineRun<S> {
    pub pretrain: TrainRun<S>,
    pub finetune: TrainRun<S>,
}

/// Masked-reconstruction pretraining followed by classification fine-tuning
/// on the same encoder, with both heads freshly re-initialized from the
/// fine-tune seed.
pub fn pretrain_then_finetune<S: Scalar>(
    model: &ModelConfig,
    pretrain_cfg: &TrainConfig,
    finetune_cfg: &TrainConfig,
    pretrain_data: &Dataset<S>,
    finetune_data: &Dataset<S>,
) -> Result<PipelineRun<S>> {
    if pretrain_cfg.objective != Objective::Mae {
        return Err(Error::InvalidConfig(
            "pretraining stage must use the mae objective".into(),
        ));
    }
    if finetune_cfg.objective != Objective::Classifier {
        return Err(Error::InvalidConfig(
            "fine-tuning stage must use the classifier objective".into(),
        ));
    }
    let pretrain = train_with_params(build(model, pretrain_cfg.seed)?, pretrain_cfg, pretrain_data, "pretrain")?;
    if pretrain.diverged_at.is_some() {
        return Err(Error::Precondition(
            "pretraining diverged before fine-tuning".into(),
        ));
    }
    let mut params = pretrain.state.params.clone();
    reinit_heads(&mut params, finetune_cfg.seed)?;
    let finetune = train_with_params(params, finetune_cfg, finetune_data, "finetune")?;
    Ok(PipelineRun { pretrain, finetune })
}

/// Replaces both heads with the tensors a fresh build under `seed` would
/// produce, leaving the encoder untouched.
pub fn reinit_heads<S: Scalar>(params: &mut Parameters<S>, seed: u64) -> Result<()> {
    let fresh = build::<S>(&params.config, seed)?;
    params.classifier_weight = fresh.classifier_weight;
    params.classifier_bias = fresh.classifier_bias;
    params.reconstruction_weight = fresh.reconstruction_weight;
    params.reconstruction_bias = fresh.reconstruction_bias;
    Ok(())
}
