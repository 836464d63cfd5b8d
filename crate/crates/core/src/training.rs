//! Supervised training: class-weighted cross-entropy plus the spatial
//! attention penalty, Adam with a step-decay learning rate, and the
//! accuracy / macro-F1 / confusion metrics used for model selection.

use serde::{Deserialize, Serialize};

use crate::augment::{self, NoiseSpec};
use crate::autograd::Graph;
use crate::data::{class_counts, VideoSample};
use crate::error::{Error, Result};
use crate::model::{forward_video, Model, ModelParams};
use crate::rng::{key_of, Rng};

/// Per-class loss weights `w_c = N / (K · N_c)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Config(
                "class weights need at least one class".into(),
            ));
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Config(format!(
                "class {c} has no training samples; merge or drop it before weighting"
            )));
        }
        let total: usize = counts.iter().sum();
        let k = counts.len() as f64;
        Ok(Self(
            counts
                .iter()
                .map(|&n| total as f64 / (k * n as f64))
                .collect(),
        ))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0; k])
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Step-decay schedule: `base_lr · decay^⌊epoch / every⌋`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub decay: f64,
    pub every: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-5,
            decay: 0.6,
            every: 30,
        }
    }
}

/// Shortest round-trip decimal form of `x` as `digits · 10^exp`.
fn decimal_parts(x: f64) -> Option<(u128, i32)> {
    let s = format!("{x:e}");
    let (mant, exp) = s.split_once('e')?;
    let exp: i32 = exp.parse().ok()?;
    let (int, frac) = mant.split_once('.').unwrap_or((mant, ""));
    let digits: u128 = format!("{int}{frac}").parse().ok()?;
    Some((digits, exp - frac.len() as i32))
}

impl LrSchedule {
    /// Learning rate for `epoch`. The power is taken on the decimal digits
    /// of `base_lr` and `decay`, so decimal rates such as 1e-5 · 0.6² come
    /// out as the nearest double to 3.6e-6 rather than accumulating
    /// binary rounding error.
    pub fn lr(&self, epoch: usize) -> f64 {
        let k = epoch.checked_div(self.every).unwrap_or(0);
        if k == 0 {
            return self.base_lr;
        }
        let exact = || -> Option<f64> {
            if !(self.base_lr > 0.0 && self.decay > 0.0) {
                return None;
            }
            let (bm, be) = decimal_parts(self.base_lr)?;
            let (dm, de) = decimal_parts(self.decay)?;
            let k32 = u32::try_from(k).ok()?;
            let mant = bm.checked_mul(dm.checked_pow(k32)?)?;
            let exp = be.checked_add(de.checked_mul(k as i32)?)?;
            format!("{mant}e{exp}").parse().ok()
        };
        exact().unwrap_or_else(|| self.base_lr * self.decay.powi(k as i32))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment buffers, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.numel()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients before
/// touching any parameter.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Vec<f64>],
    state: &mut OptState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Usage(format!(
            "{} gradient buffers for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (name, g) in params.names().iter().zip(grads) {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in '{name}' at element {i}"
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl MetricsReport {
    pub fn from_predictions(truth: &[usize], predicted: &[usize], k: usize) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::Input("metrics over an empty dataset".into()));
        }
        if truth.len() != predicted.len() {
            return Err(Error::Usage(format!(
                "{} labels for {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut confusion = vec![vec![0usize; k]; k];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= k || p >= k {
                return Err(Error::Input(format!("class index out of range 0..{k}")));
            }
            confusion[t][p] += 1;
        }
        let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
        let f1_sum: f64 = (0..k)
            .map(|c| {
                let tp = confusion[c][c];
                let support: usize = confusion[c].iter().sum();
                let predicted_c: usize = confusion.iter().map(|row| row[c]).sum();
                if support == 0 {
                    return 0.0;
                }
                let (fp, fn_) = (predicted_c - tp, support - tp);
                2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
            })
            .sum();
        Ok(Self {
            accuracy: correct as f64 / truth.len() as f64,
            macro_f1: f1_sum / k as f64,
            confusion,
        })
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

/// Inference-mode metrics over labelled videos.
pub fn evaluate(model: &Model, samples: &[VideoSample]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let mut truth = Vec::with_capacity(samples.len());
    let mut predicted = Vec::with_capacity(samples.len());
    for s in samples {
        let label = s
            .label
            .ok_or_else(|| Error::Input(format!("video '{}' has no label", s.id)))?;
        truth.push(label);
        predicted.push(model.classify_video(&s.frames)?.predicted());
    }
    MetricsReport::from_predictions(&truth, &predicted, model.config.num_classes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    /// Weight of the spatial-attention penalty.
    pub lambda_f: f64,
    /// Inverse-frequency class weights; uniform when off.
    pub class_weighting: bool,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            lambda_f: 1.0,
            class_weighting: true,
            noise: NoiseSpec::disabled(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lambda_f >= 0.0 && self.lambda_f.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_f {} must be ≥ 0",
                self.lambda_f
            )));
        }
        if !(self.schedule.base_lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// One training example with the label to fit (true or pseudo).
#[derive(Clone, Copy, Debug)]
pub struct TrainItem<'a> {
    pub video: &'a VideoSample,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

/// Loss and parameter gradients for a single example.
pub struct SampleGrad {
    pub loss: f64,
    pub cross_entropy: f64,
    pub penalty: f64,
    pub grads: Vec<Vec<f64>>,
}

/// `weight · CE(logits, label) + λ_F · penalty` for one video, with
/// gradients. `dropout` switches the forward pass into training mode.
pub fn sample_gradient(
    model: &Model,
    params: &ModelParams,
    frames: &[crate::tensor::Tensor],
    label: usize,
    weight: f64,
    lambda_f: f64,
    dropout: Option<(f64, &mut Rng)>,
) -> Result<SampleGrad> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let out = forward_video(&mut g, &model.config, &model.layout, &vars, frames, dropout)?;
    let ce = g.cross_entropy(out.logits, label)?;
    let ce_val = g.value(ce).data()[0];
    let weighted = g.scale(ce, weight);
    let (loss, penalty) = match out.penalty {
        Some(p) if lambda_f != 0.0 => {
            let pv = g.value(p).data()[0];
            let scaled = g.scale(p, lambda_f);
            (g.add(weighted, scaled)?, pv)
        }
        Some(p) => (weighted, g.value(p).data()[0]),
        None => (weighted, 0.0),
    };
    let loss_val = g.value(loss).data()[0];
    g.backward(loss)?;
    let grads = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
        })
        .collect();
    Ok(SampleGrad {
        loss: loss_val,
        cross_entropy: ce_val,
        penalty,
        grads,
    })
}

/// Random stream for the noise applied to one slot of one step.
pub fn noise_rng(seed: u64, epoch: usize, step: usize, slot: usize) -> Rng {
    Rng::new(seed).derive(&[key_of("noise"), epoch as u64, step as u64, slot as u64])
}

/// Mean-gradient Adam step over one batch; returns the mean loss.
fn batch_step(
    model: &Model,
    params: &mut ModelParams,
    state: &mut OptState,
    batch: &[TrainItem<'_>],
    weights: &ClassWeights,
    cfg: &TrainConfig,
    lr: f64,
    epoch: usize,
    step: usize,
) -> Result<f64> {
    let mut total: Vec<Vec<f64>> = params
        .tensors()
        .iter()
        .map(|t| vec![0.0; t.numel()])
        .collect();
    let mut loss_sum = 0.0;
    for (slot, item) in batch.iter().enumerate() {
        let mut rng = noise_rng(cfg.seed, epoch, step, slot);
        let plan = augment::sample_plan(&cfg.noise, &mut rng);
        let augmented;
        let frames = if plan.is_empty() {
            &item.video.frames
        } else {
            augmented = augment::apply_plan(item.video, &plan);
            &augmented.frames
        };
        let dropout = cfg.noise.active_dropout().map(|p| (p, &mut rng));
        let sg = sample_gradient(
            model,
            params,
            frames,
            item.label,
            weights.get(item.label),
            cfg.lambda_f,
            dropout,
        )
        .map_err(|e| match e {
            Error::Numeric(msg) => Error::Divergence { epoch, step, msg },
            other => other,
        })?;
        if !sg.loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step,
                msg: format!("loss {} on video '{}'", sg.loss, item.video.id),
            });
        }
        loss_sum += sg.loss;
        for (acc, g) in total.iter_mut().zip(&sg.grads) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
    }
    let n = batch.len() as f64;
    for acc in &mut total {
        for a in acc.iter_mut() {
            *a /= n;
        }
    }
    adam_step(params, &total, state, lr, &cfg.adam).map_err(|e| match e {
        Error::Numeric(msg) => Error::Divergence { epoch, step, msg },
        other => other,
    })?;
    Ok(loss_sum / n)
}

/// Generic epoch loop. `batches(epoch)` yields that epoch's batches.
/// Validation falls back to `fallback_val` when `val` is empty.
pub fn fit<'a, F>(
    model: &Model,
    val: &[VideoSample],
    weights: &ClassWeights,
    cfg: &TrainConfig,
    mut batches: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize) -> Result<Vec<Vec<TrainItem<'a>>>>,
{
    cfg.validate()?;
    if weights.len() != model.config.num_classes {
        return Err(Error::Config(format!(
            "{} class weights for {} classes",
            weights.len(),
            model.config.num_classes
        )));
    }
    let mut params = model.params.clone();
    let mut state = OptState::new(&params);
    let mut best = (None::<usize>, f64::NEG_INFINITY, params.clone());
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut probe = model.clone();
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr(epoch);
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for (step, batch) in batches(epoch)?.iter().enumerate() {
            if batch.is_empty() {
                continue;
            }
            let loss = batch_step(
                model,
                &mut params,
                &mut state,
                batch,
                weights,
                cfg,
                lr,
                epoch,
                step,
            )?;
            loss_sum += loss * batch.len() as f64;
            count += batch.len();
        }
        probe.params = params.clone();
        let report = evaluate(&probe, val)?;
        log::debug!(
            "epoch {epoch} lr {lr:e} loss {:.5} val acc {:.4}",
            loss_sum / count.max(1) as f64,
            report.accuracy
        );
        log.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / count.max(1) as f64,
            val_accuracy: report.accuracy,
            val_macro_f1: report.macro_f1,
        });
        if report.accuracy > best.1 {
            best = (Some(epoch), report.accuracy, params.clone());
        }
    }
    Ok(TrainOutcome {
        params: best.2,
        log,
        best_epoch: best.0,
    })
}

/// Weights for `samples` under `cfg` (inverse frequency or uniform).
pub fn weights_for(samples: &[VideoSample], k: usize, cfg: &TrainConfig) -> Result<ClassWeights> {
    if cfg.class_weighting {
        ClassWeights::from_counts(&class_counts(samples, k))
    } else {
        Ok(ClassWeights::uniform(k))
    }
}

/// Minibatch order for one epoch: a seeded shuffle split into batches.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = Rng::new(seed).derive(&[key_of("shuffle"), epoch as u64]);
    let order = rng.permutation(len);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

pub(crate) fn labelled_items(samples: &[VideoSample]) -> Result<Vec<TrainItem<'_>>> {
    samples
        .iter()
        .map(|s| {
            s.label
                .map(|label| TrainItem { video: s, label })
                .ok_or_else(|| Error::Input(format!("training video '{}' has no label", s.id)))
        })
        .collect()
}

/// Supervised training on labelled videos. The returned parameters are
/// those of the epoch with the highest validation accuracy (earliest on
/// ties); with zero epochs they are the model's own parameters.
pub fn train(
    model: &Model,
    train_set: &[VideoSample],
    val_set: &[VideoSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let items = labelled_items(train_set)?;
    let weights = weights_for(train_set, model.config.num_classes, cfg)?;
    let val = if val_set.is_empty() {
        train_set
    } else {
        val_set
    };
    fit(model, val, &weights, cfg, |epoch| {
        Ok(epoch_batches(items.len(), cfg.batch_size, cfg.seed, epoch)
            .into_iter()
            .map(|idx| idx.into_iter().map(|i| items[i]).collect())
            .collect())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;

    #[test]
    fn equal_counts_give_unit_weights() {
        let w = ClassWeights::from_counts(&[5; 7]).unwrap();
        assert!(w.as_slice().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn zero_count_is_a_config_error() {
        assert!(matches!(
            ClassWeights::from_counts(&[3, 0, 2]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn schedule_hits_decimal_rates() {
        let s = LrSchedule::default();
        assert_eq!(s.lr(0), 1e-5);
        assert_eq!(s.lr(29), 1e-5);
        assert_eq!(s.lr(30), 6e-6);
        assert_eq!(s.lr(60), 3.6e-6);
        assert_eq!(s.lr(90), 2.16e-6);
        assert_eq!(s.lr(99), 2.16e-6);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let model = Model::new(ModelConfig::desk(), 1).unwrap();
        let mut p = model.params.clone();
        let grads: Vec<Vec<f64>> = p.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        let mut st = OptState::new(&p);
        adam_step(&mut p, &grads, &mut st, 1e-3, &AdamConfig::default()).unwrap();
        assert!(p.bit_eq(&model.params));
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let model = Model::new(ModelConfig::desk(), 1).unwrap();
        let mut p = model.params.clone();
        let mut grads: Vec<Vec<f64>> = p.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        grads[2][0] = f64::NAN;
        let mut st = OptState::new(&p);
        match adam_step(&mut p, &grads, &mut st, 1e-3, &AdamConfig::default()) {
            Err(Error::Numeric(msg)) => assert!(msg.contains(&p.names()[2])),
            other => panic!("{other:?}"),
        }
        assert!(p.bit_eq(&model.params));
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let truth: Vec<usize> = (0..14).map(|i| i % 7).collect();
        let r = MetricsReport::from_predictions(&truth, &truth, 7).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_f1, 1.0);
        let r = MetricsReport::from_predictions(&truth, &[3; 14], 7).unwrap();
        assert!((r.accuracy - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(r.total(), 14);
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let model = Model::new(ModelConfig::desk(), 3).unwrap();
        let frame = Tensor::filled(&[9, 8, 8], 0.5);
        let data: Vec<VideoSample> = (0..7)
            .map(|c| VideoSample::new(format!("v{c}"), vec![frame.clone()], Some(c)))
            .collect();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(&model, &data, &[], &cfg).unwrap();
        assert!(out.params.bit_eq(&model.params));
        assert!(out.log.is_empty());
        assert_eq!(out.best_epoch, None);
    }

    #[test]
    fn empty_training_set_rejected() {
        let model = Model::new(ModelConfig::desk(), 3).unwrap();
        assert!(matches!(
            train(&model, &[], &[], &TrainConfig::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn batches_cover_every_index_once() {
        let b = epoch_batches(23, 5, 9, 2);
        assert_eq!(b.len(), 5);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
    }
}
