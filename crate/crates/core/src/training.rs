//! Mixed labelled/unlabelled training with the Seg, Inst and ConsInst
//! variants.
//!
//! Each optimizer step runs a forward/backward pass on the labelled half of
//! the batch (supervised terms) and, for ConsInst, a second pass on the
//! unlabelled half (consistency term). Gradients of both passes are summed
//! before one Adam update.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, JsonLines};
use crate::losses::{self, LossReport, LossWeights, SupervisedTerms};
use crate::model::{ModelConfig, ModelState, Network, OptimizerState, OutputGrads, Variant};
use crate::nn::layers::apply_stat_updates;
use crate::nn::{ForwardCtx, Gradients, ParamKind, ParamStore, Tensor};
use crate::representations::References;
use crate::synthdata::DatasetManifest;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub batch_size: usize,
    pub labeled_per_batch: usize,
    pub lr: f32,
    pub lr_decay_factor: f32,
    pub patience_epochs: usize,
    /// An epoch improves when its mean loss beats the best by at least this.
    pub improvement_delta: f64,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub l2_factor: f32,
    pub max_epochs: usize,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub loss_weights: LossWeights,
    pub n_classes: usize,
    pub n_thing_classes: usize,
    pub n_blocks: usize,
    pub base_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::ConsInst,
            batch_size: 8,
            labeled_per_batch: 4,
            lr: 1e-3,
            lr_decay_factor: 0.1,
            patience_epochs: 25,
            improvement_delta: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            l2_factor: 1e-5,
            max_epochs: 300,
            seed: 0,
            checkpoint_dir: None,
            loss_weights: LossWeights::default(),
            n_classes: 2,
            n_thing_classes: 1,
            n_blocks: 4,
            base_width: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.labeled_per_batch == 0 || self.labeled_per_batch > self.batch_size {
            return bad("need 1 ≤ labeled_per_batch ≤ batch_size");
        }
        if self.variant == Variant::ConsInst && self.labeled_per_batch >= self.batch_size {
            return bad("ConsInst needs labeled_per_batch < batch_size");
        }
        let rates = [self.lr, self.lr_decay_factor, self.beta1, self.beta2, self.adam_eps, self.l2_factor];
        if rates.iter().any(|r| r.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) || !r.is_finite()) {
            return bad("all rates must be positive and finite");
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 || self.lr_decay_factor > 1.0 {
            return bad("betas must be below 1 and the decay factor at most 1");
        }
        if self.patience_epochs == 0 {
            return bad("patience_epochs must be positive");
        }
        self.model_config().validate()
    }

    pub fn unlabeled_per_batch(&self) -> usize {
        self.batch_size - self.labeled_per_batch
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_blocks: self.n_blocks,
            base_width: self.base_width,
            ..ModelConfig::new(self.n_classes, self.n_thing_classes, self.variant)
        }
    }

    /// Optimizer steps in one epoch: a pass over the unlabelled set for
    /// ConsInst, over the labelled set otherwise.
    pub fn steps_per_epoch(&self, n_labeled: usize, n_unlabeled: usize) -> usize {
        if self.variant.uses_unlabeled() {
            n_unlabeled.div_ceil(self.unlabeled_per_batch())
        } else {
            n_labeled.div_ceil(self.labeled_per_batch)
        }
    }
}

/// He-normal convolution kernels (std `sqrt(2 / fan_in)`), zero biases and
/// betas, unit gammas. Arrays are drawn in name order from one seeded stream.
pub fn init_weights(config: &ModelConfig, seed: u64) -> Result<ModelState> {
    let net = Network::new(config)?;
    let mut params = net.empty_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, p) in params.iter_mut() {
        if p.kind == ParamKind::ConvKernel {
            let fan_in: usize = p.shape[1..].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for v in &mut p.data {
                *v = normal.sample(&mut rng) as f32;
            }
        }
    }
    let optimizer = OptimizerState::zeros_for(&params);
    Ok(ModelState {
        config: config.clone(),
        params,
        optimizer,
        epoch: 0,
        seed,
        lr: 0.0,
    })
}

/// Item indices of one step. `unlabeled` is empty for Seg and Inst.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Successive shuffled permutations of `0..n`.
struct CyclingStream {
    n: usize,
    order: Vec<usize>,
    at: usize,
    rng: ChaCha8Rng,
}

impl CyclingStream {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        CyclingStream {
            n,
            order: Vec::new(),
            at: 0,
            rng,
        }
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        (0..k)
            .map(|_| {
                if self.at == self.order.len() {
                    self.order = (0..self.n).collect();
                    self.order.shuffle(&mut self.rng);
                    self.at = 0;
                }
                self.at += 1;
                self.order[self.at - 1]
            })
            .collect()
    }
}

/// Seed of the batch order of `epoch`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Batch order of one epoch over `n_labeled` and `n_unlabeled` items. Both
/// index streams cycle through fresh shuffles when exhausted.
pub fn plan_batches(
    n_labeled: usize,
    n_unlabeled: usize,
    config: &TrainConfig,
    epoch_seed: u64,
) -> Result<Vec<Batch>> {
    if n_labeled == 0 {
        return Err(Error::Precondition("the labeled split is empty".into()));
    }
    let uses_unlabeled = config.variant.uses_unlabeled();
    if uses_unlabeled && n_unlabeled == 0 {
        return Err(Error::Precondition(
            "variant ConsInst needs a non-empty unlabeled split".into(),
        ));
    }
    let mut lrng = ChaCha8Rng::seed_from_u64(epoch_seed);
    lrng.set_stream(0);
    let mut urng = ChaCha8Rng::seed_from_u64(epoch_seed);
    urng.set_stream(1);
    let mut labeled = CyclingStream::new(n_labeled, lrng);
    let mut unlabeled = CyclingStream::new(n_unlabeled, urng);
    let steps = config.steps_per_epoch(n_labeled, n_unlabeled);
    Ok((0..steps)
        .map(|_| Batch {
            labeled: labeled.take(config.labeled_per_batch),
            unlabeled: if uses_unlabeled {
                unlabeled.take(config.unlabeled_per_batch())
            } else {
                Vec::new()
            },
        })
        .collect())
}

pub fn make_batches(manifest: &DatasetManifest, config: &TrainConfig, epoch_seed: u64) -> Result<Vec<Batch>> {
    plan_batches(
        manifest.labeled_items.len(),
        manifest.unlabeled_items.len(),
        config,
        epoch_seed,
    )
}

/// A labelled training image with its reference maps.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub image: Array2<f32>,
    pub references: References,
}

fn stack_refs(samples: &[&LabeledSample], pick: impl Fn(&References) -> &ndarray::Array3<f64>) -> Array4<f32> {
    let first = pick(&samples[0].references);
    let (h, w, c) = first.dim();
    Array4::from_shape_fn((samples.len(), h, w, c), |(n, y, x, k)| {
        pick(&samples[n].references)[[y, x, k]] as f32
    })
}

fn check_finite(value: f64, term: &'static str, epoch: usize, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { term, epoch, step })
    }
}

/// Owns the model state and performs optimizer steps on given batches.
pub struct Trainer {
    config: TrainConfig,
    net: Network,
    state: ModelState,
    epoch: usize,
    step_in_epoch: usize,
}

impl Trainer {
    /// Starts from `init_weights(config.model_config(), config.seed)`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut state = init_weights(&config.model_config(), config.seed)?;
        state.lr = config.lr;
        Self::from_state(config, state)
    }

    pub fn from_state(config: TrainConfig, state: ModelState) -> Result<Self> {
        config.validate()?;
        if state.config != config.model_config() {
            return Err(Error::InvalidConfig(
                "model state does not match the training config".into(),
            ));
        }
        Ok(Trainer {
            net: Network::new(&state.config)?,
            config,
            state,
            epoch: 0,
            step_in_epoch: 0,
        })
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn into_state(self) -> ModelState {
        self.state
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.state.lr = lr;
    }

    /// One optimizer step. `unlabeled` is used by ConsInst only; with a zero
    /// consistency weight its forward pass is skipped.
    pub fn step(&mut self, labeled: &[&LabeledSample], unlabeled: &[&Array2<f32>]) -> Result<LossReport> {
        let (epoch, step) = (self.epoch, self.step_in_epoch);
        self.step_in_epoch += 1;
        if labeled.is_empty() {
            return Err(Error::Precondition("a batch needs labeled items".into()));
        }
        let variant = self.config.variant;
        let weights = self.config.loss_weights;
        let params = &self.state.params;
        let mut grads = Gradients::zeros_for(params);
        let mut ctx = ForwardCtx::train();

        let images: Vec<&Array2<f32>> = labeled.iter().map(|s| &s.image).collect();
        let x = Tensor::from_images(&images);
        let with_inst = variant.has_instance_decoder();
        let (out, cache) = self.net.forward(params, &x, &mut ctx, with_inst)?;
        let sem_ref = stack_refs(labeled, |r| &r.semantic.scores);
        let (ce, d_probs) = losses::ce_loss(out.probs.to_nhwc().view(), sem_ref.view())?;
        check_finite(ce, "l_ce", epoch, step)?;
        let mut sup = SupervisedTerms {
            ce,
            ..SupervisedTerms::default()
        };
        let scaled = |a: Array4<f32>, w: f64| Tensor::from_nhwc(&a.mapv(|v| v * w as f32));
        let mut og = OutputGrads {
            probs: Some(scaled(d_probs, weights.ce)),
            ..OutputGrads::default()
        };
        if let Some(inst) = &out.inst {
            let theta_ref = stack_refs(labeled, |r| &r.orientation.theta);
            let plus_ref = stack_refs(labeled, |r| &r.distances.plus);
            let minus_ref = stack_refs(labeled, |r| &r.distances.minus);
            let (cos, d_theta) = losses::cosine_loss(inst.theta.to_nhwc().view(), theta_ref.view())?;
            check_finite(cos, "l_cos", epoch, step)?;
            let (mp, d_plus) = losses::mse_loss(inst.plus.to_nhwc().view(), plus_ref.view())?;
            check_finite(mp, "l_mse_plus", epoch, step)?;
            let (mm, d_minus) = losses::mse_loss(inst.minus.to_nhwc().view(), minus_ref.view())?;
            check_finite(mm, "l_mse_minus", epoch, step)?;
            sup.cos = Some(cos);
            sup.mse_plus = Some(mp);
            sup.mse_minus = Some(mm);
            og.theta = Some(scaled(d_theta, weights.cos));
            og.plus = Some(scaled(d_plus, weights.mse_plus));
            og.minus = Some(scaled(d_minus, weights.mse_minus));
        }
        self.net.backward(params, &cache, &og, &mut grads);
        drop(cache);

        let mut cons = None;
        if variant.uses_unlabeled() {
            if unlabeled.is_empty() {
                return Err(Error::Precondition(
                    "the consistency loss needs an unlabeled batch half".into(),
                ));
            }
            if weights.cons == 0.0 {
                cons = Some(0.0);
            } else {
                let xu = Tensor::from_images(unlabeled);
                let (uo, ucache) = self.net.forward(params, &xu, &mut ctx, true)?;
                let inst = uo.inst.as_ref().expect("instance branch present");
                let c = losses::consinstancy_loss(
                    uo.probs.to_nhwc().view(),
                    inst.plus.to_nhwc().view(),
                    inst.minus.to_nhwc().view(),
                )?;
                check_finite(c.value, "l_cons", epoch, step)?;
                let ug = OutputGrads {
                    probs: Some(scaled(c.d_semantic, weights.cons)),
                    plus: Some(scaled(c.d_plus, weights.cons)),
                    minus: Some(scaled(c.d_minus, weights.cons)),
                    theta: None,
                };
                self.net.backward(params, &ucache, &ug, &mut grads);
                cons = Some(c.value);
            }
        }
        let report = losses::total_loss(variant, &sup, cons, &weights)?;
        check_finite(report.total, "total", epoch, step)?;
        if !grads.all_finite() {
            return Err(Error::NonFinite {
                term: "gradient",
                epoch,
                step,
            });
        }
        apply_stat_updates(&mut self.state.params, &ctx.stat_updates);
        self.adam_update(&grads);
        Ok(report)
    }

    /// Adam with decoupled L2 decay on convolution kernels:
    /// `w ← w − lr · (m̂ / (√v̂ + ε) + λ·w)`.
    fn adam_update(&mut self, grads: &Gradients) {
        let c = &self.config;
        let (b1, b2, eps, lr, l2) = (c.beta1, c.beta2, c.adam_eps, self.state.lr, c.l2_factor);
        let opt = &mut self.state.optimizer;
        opt.step += 1;
        let t = opt.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (name, g) in grads.iter() {
            let decay = if self.state.params.param(name).kind == ParamKind::ConvKernel {
                l2
            } else {
                0.0
            };
            let m = opt.m.get_mut(name);
            let v = opt.v.get_mut(name);
            let w = self.state.params.get_mut(name);
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= lr * (mhat / (vhat.sqrt() + eps) + decay * w[i]);
            }
        }
    }

    fn begin_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
        self.step_in_epoch = 0;
        self.state.epoch = epoch;
    }
}

/// Epoch-mean losses and the learning rate used during the epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f32,
    pub steps: usize,
    pub loss: LossReport,
    pub improved: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Wall-clock seconds per epoch, kept apart from the deterministic record.
    pub epoch_seconds: Vec<f64>,
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn lr_trace(&self) -> Vec<f32> {
        self.records.iter().map(|r| r.lr).collect()
    }
}

/// Learning-rate decay on stagnating training loss.
#[derive(Clone, Debug)]
pub struct Plateau {
    best: f64,
    stale: usize,
    patience: usize,
    delta: f64,
    factor: f32,
}

impl Plateau {
    pub fn new(patience: usize, delta: f64, factor: f32) -> Self {
        Plateau {
            best: f64::INFINITY,
            stale: 0,
            patience,
            delta,
            factor,
        }
    }

    /// Feeds one epoch loss; returns whether it improved and the learning
    /// rate for the next epoch.
    pub fn observe(&mut self, loss: f64, lr: f32) -> (bool, f32) {
        if loss < self.best - self.delta {
            self.best = loss;
            self.stale = 0;
            (true, lr)
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.stale = 0;
                (false, lr * self.factor)
            } else {
                (false, lr)
            }
        }
    }
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let mean = |f: &dyn Fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let mean_opt = |f: &dyn Fn(&LossReport) -> Option<f64>| {
        reports.first().and_then(f).map(|_| mean(&|r| f(r).unwrap_or(0.0)))
    };
    LossReport {
        l_ce: mean(&|r| r.l_ce),
        l_cos: mean_opt(&|r| r.l_cos),
        l_mse_plus: mean_opt(&|r| r.l_mse_plus),
        l_mse_minus: mean_opt(&|r| r.l_mse_minus),
        l_cons: mean_opt(&|r| r.l_cons),
        total: mean(&|r| r.total),
    }
}

/// Loads a manifest's labelled items with their reference maps.
pub fn load_labeled(manifest: &DatasetManifest, n_classes: usize) -> Result<Vec<LabeledSample>> {
    (0..manifest.labeled_items.len())
        .map(|i| {
            let (image, labels) = manifest.load_labeled(i)?;
            Ok(LabeledSample {
                references: References::from_labels(&labels, n_classes)?,
                image,
            })
        })
        .collect()
}

pub fn load_unlabeled(manifest: &DatasetManifest) -> Result<Vec<Array2<f32>>> {
    (0..manifest.unlabeled_items.len())
        .map(|i| manifest.load_unlabeled(i))
        .collect()
}

/// Checkpoint file names inside `checkpoint_dir`.
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";

#[derive(Serialize)]
struct TimingRecord {
    epoch: usize,
    seconds: f64,
}

pub fn train(config: &TrainConfig, manifest: &DatasetManifest) -> Result<(ModelState, TrainHistory)> {
    train_with(config, manifest, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelState, TrainHistory)> {
    config.validate()?;
    if manifest.labeled_items.is_empty() {
        return Err(Error::Precondition("the labeled split is empty".into()));
    }
    if config.variant.uses_unlabeled() && manifest.unlabeled_items.is_empty() {
        return Err(Error::Precondition(
            "variant ConsInst needs a non-empty unlabeled split".into(),
        ));
    }
    let labeled = load_labeled(manifest, config.n_classes)?;
    let unlabeled = if config.variant.uses_unlabeled() {
        load_unlabeled(manifest)?
    } else {
        Vec::new()
    };
    train_samples(config, &labeled, &unlabeled, on_epoch)
}

/// Training loop over in-memory samples.
pub fn train_samples(
    config: &TrainConfig,
    labeled: &[LabeledSample],
    unlabeled: &[Array2<f32>],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelState, TrainHistory)> {
    let mut trainer = Trainer::new(config.clone())?;
    for s in labeled {
        let (h, w) = s.image.dim();
        trainer.state.config.check_input(h, w)?;
    }
    let dir = config.checkpoint_dir.as_deref();
    let mut history_log = dir.map(|d| JsonLines::create(&d.join(HISTORY_FILE))).transpose()?;
    let mut timing_log = dir.map(|d| JsonLines::create(&d.join(TIMINGS_FILE))).transpose()?;
    let mut history = TrainHistory::default();
    let mut plateau = Plateau::new(config.patience_epochs, config.improvement_delta, config.lr_decay_factor);
    for epoch in 0..config.max_epochs {
        let started = Instant::now();
        trainer.begin_epoch(epoch);
        let batches = plan_batches(labeled.len(), unlabeled.len(), config, epoch_seed(config.seed, epoch))?;
        let mut reports = Vec::with_capacity(batches.len());
        for b in &batches {
            let l: Vec<&LabeledSample> = b.labeled.iter().map(|&i| &labeled[i]).collect();
            let u: Vec<&Array2<f32>> = b.unlabeled.iter().map(|&i| &unlabeled[i]).collect();
            reports.push(trainer.step(&l, &u)?);
        }
        let loss = mean_report(&reports);
        let lr = trainer.state.lr;
        let (improved, next_lr) = plateau.observe(loss.total, lr);
        trainer.state.epoch = epoch + 1;
        if improved {
            history.best_epoch = Some(epoch);
            if let Some(d) = dir {
                trainer.state.save(&d.join(BEST_CHECKPOINT))?;
            }
        }
        trainer.set_lr(next_lr);
        let record = EpochRecord {
            epoch,
            lr,
            steps: batches.len(),
            loss,
            improved,
        };
        let seconds = started.elapsed().as_secs_f64();
        if let Some(log) = history_log.as_mut() {
            log.push(&record)?;
        }
        if let Some(log) = timing_log.as_mut() {
            log.push(&TimingRecord { epoch, seconds })?;
        }
        on_epoch(&record);
        history.records.push(record);
        history.epoch_seconds.push(seconds);
    }
    let state = trainer.into_state();
    if let Some(d) = dir {
        state.save(&d.join(FINAL_CHECKPOINT))?;
        if history.best_epoch.is_none() {
            state.save(&d.join(BEST_CHECKPOINT))?;
        }
    }
    Ok((state, history))
}

/// Reads a history file written by [`train`].
pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|source| Error::Json {
                path: path.into(),
                source,
            })
        })
        .collect()
}

/// Saves a training config as JSON.
pub fn save_config(path: &Path, config: &TrainConfig) -> Result<()> {
    io::write_json(path, config)
}

/// Trainable arrays only, for comparisons that ignore running statistics.
pub fn trainable(params: &ParamStore) -> Vec<(&str, &[f32])> {
    params
        .iter()
        .filter(|(_, p)| p.kind.trainable())
        .map(|(n, p)| (n, p.data.as_slice()))
        .collect()
}
