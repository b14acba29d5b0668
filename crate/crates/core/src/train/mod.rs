//! BPTT training: frame sampling and augmentation, AdamW with a cosine
//! schedule, the per-epoch loop, evaluation and k-fold cross-validation.

mod data;
mod optim;

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{MultiViewFrame, ViewGeometry};
use crate::encoder::{
    name_matches, Cemformer, EncoderConfig, MemoryMode, ModelConfig, Prediction, RolloutOptions,
};
use crate::episodes::{generate_episode, Episode, FoldMetrics, FoldSplit, GenConfig, MetricsReport};
use crate::error::{Error, Result};
use crate::kernel::{finite_diff_grad_check, GradCheckReport, Tape, Tensor};
use crate::loss::{episode_loss_op, LossBreakdown, LossWeighting};
use crate::rules::ScenarioSet;

pub use data::{
    crop_image, flip_image, mirror_class, mirror_context, prepare_sample, sample_frames, segment, Augment,
    Sample, SampleMode,
};
pub use optim::{clip_global_norm, cosine_lr, AdamW, ADAM_EPS, BETA1, BETA2};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub memory_tokens: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    /// Timesteps `T` sampled per episode.
    pub steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub truncation: Option<usize>,
    pub seed: u64,
    /// Parameter-name globs excluded from training.
    pub freeze: Vec<String>,
    pub crop_pad: usize,
    pub flip: bool,
    pub weighting: LossWeighting,
    /// Adds the context-consistency term to the loss.
    pub use_cc: bool,
    pub memory_mode: MemoryMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            layers: 2,
            dim: 64,
            heads: 4,
            memory_tokens: 4,
            mlp_ratio: 2,
            patch: 8,
            steps: 5,
            epochs: 30,
            batch_size: 10,
            lr: 1e-3,
            lr_floor: 0.0,
            weight_decay: 0.05,
            clip_norm: 1.0,
            truncation: None,
            seed: 0,
            freeze: Vec::new(),
            crop_pad: 2,
            flip: false,
            weighting: LossWeighting::Exponential,
            use_cc: true,
            memory_mode: MemoryMode::Carry,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("steps, epochs and batch_size must be at least 1"));
        }
        let positive = [self.lr, self.clip_norm].iter().all(|v| v.is_finite() && *v > 0.0);
        let non_negative = [self.lr_floor, self.weight_decay].iter().all(|v| v.is_finite() && *v >= 0.0);
        if !positive || !non_negative {
            return Err(Error::config(
                "lr and clip_norm must be positive; lr_floor and weight_decay non-negative",
            ));
        }
        if self.truncation == Some(0) {
            return Err(Error::config("truncation window must be at least 1"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn model_config(&self, views: Vec<ViewGeometry>, n_classes: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                layers: self.layers,
                dim: self.dim,
                heads: self.heads,
                memory_tokens: self.memory_tokens,
                mlp_ratio: self.mlp_ratio,
                n_classes,
            },
            patch: self.patch,
            views,
            memory_mode: self.memory_mode,
        }
    }

    fn is_trainable(&self, name: &str) -> bool {
        !self.freeze.iter().any(|p| name_matches(p, name))
    }

    fn augment(&self) -> Augment {
        Augment {
            crop_pad: self.crop_pad,
            flip: self.flip,
        }
    }
}

/// Loss and gradients of one episode; frozen parameters get `None`.
pub fn episode_gradients(
    model: &Cemformer,
    sample: &Sample,
    rules: Option<&ScenarioSet>,
    weighting: LossWeighting,
    truncation: Option<usize>,
    trainable: &[bool],
) -> Result<(LossBreakdown, Vec<Option<Tensor>>)> {
    let mut tape = Tape::new();
    let names: Vec<&str> = model.params().iter().map(|(n, _)| n).collect();
    let bound = model.bind(&mut tape, |name| {
        names
            .iter()
            .position(|n| *n == name)
            .map(|i| trainable[i])
            .unwrap_or(false)
    });
    let frames: Vec<_> = sample.frames.iter().collect();
    let opts = RolloutOptions {
        truncation,
        record_attention: false,
    };
    let outs = model.rollout(&mut tape, &bound, &frames, &opts)?;
    let probs: Vec<_> = outs.iter().map(|o| o.probs).collect();
    let loss = episode_loss_op(&mut tape, &probs, sample.label, &sample.context, rules, weighting)?;
    let mut grads = tape.backward(loss.total)?;
    let out = bound
        .vars
        .iter()
        .zip(trainable)
        .map(|(&v, &t)| {
            if !t {
                return None;
            }
            Some(grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
        })
        .collect();
    Ok((loss.breakdown, out))
}

/// Joint loss of one sample without building gradients.
pub fn sample_loss(
    model: &Cemformer,
    sample: &Sample,
    rules: Option<&ScenarioSet>,
    weighting: LossWeighting,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, |_| false);
    let frames: Vec<_> = sample.frames.iter().collect();
    let outs = model.rollout(&mut tape, &bound, &frames, &RolloutOptions::default())?;
    let probs: Vec<_> = outs.iter().map(|o| o.probs).collect();
    Ok(episode_loss_op(&mut tape, &probs, sample.label, &sample.context, rules, weighting)?.breakdown)
}

/// Central-difference check of the joint loss gradient with respect to
/// every model parameter.
pub fn joint_loss_gradcheck(
    model: &Cemformer,
    sample: &Sample,
    rules: Option<&ScenarioSet>,
    weighting: LossWeighting,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let trainable = vec![true; model.params().len()];
    let (_, grads) = episode_gradients(model, sample, rules, weighting, None, &trainable)?;
    let analytic: Vec<Tensor> = grads.into_iter().map(|g| g.expect("all trainable")).collect();
    let mut probe = model.clone();
    finite_diff_grad_check(model.params().tensors(), &analytic, h, tol, |ps| {
        probe.params_mut().tensors_mut().clone_from_slice(ps);
        Ok(sample_loss(&probe, sample, rules, weighting)?.total)
    })
}

/// Model, episode and tolerances for a self-contained gradient check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSetup {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub memory_tokens: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub steps: usize,
    pub seed: u64,
    pub h: f64,
    pub tol: f64,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        GradCheckSetup {
            layers: 1,
            dim: 16,
            heads: 2,
            memory_tokens: 2,
            mlp_ratio: 2,
            patch: 8,
            views: 1,
            height: 16,
            width: 16,
            steps: 3,
            seed: 0,
            h: 1e-4,
            tol: 1e-4,
        }
    }
}

impl GradCheckSetup {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    /// Runs the check on one generated episode under the shipped rules.
    pub fn run(&self, rules: &ScenarioSet) -> Result<GradCheckReport> {
        if self.views == 0 || self.views > 2 {
            return Err(Error::config("gradient check supports one or two views"));
        }
        let gen = GenConfig {
            frames: self.steps,
            height: self.height,
            width: self.width,
            ..GenConfig::default()
        };
        let ep = generate_episode(0, self.seed, &gen, rules)?;
        let frames = ep
            .frames
            .iter()
            .map(|f| MultiViewFrame::new(f.views()[..self.views].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let train = TrainConfig {
            layers: self.layers,
            dim: self.dim,
            heads: self.heads,
            memory_tokens: self.memory_tokens,
            mlp_ratio: self.mlp_ratio,
            patch: self.patch,
            ..TrainConfig::default()
        };
        let model = Cemformer::new(
            train.model_config(frames[0].geometry(), rules.classes().len()),
            self.seed,
        )?;
        let sample = Sample {
            frames,
            label: ep.label,
            context: ep.context,
        };
        joint_loss_gradcheck(&model, &sample, Some(rules), LossWeighting::Exponential, self.h, self.tol)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean joint loss over the epoch's episodes.
    pub loss: f64,
    pub ce: f64,
    pub cc: f64,
    /// Learning rate of the epoch's last optimizer step.
    pub lr: f64,
}

impl fmt::Display for EpochStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch {}\tloss {:.6}\tce {:.6}\tcc {:.6}\tlr {:.6e}",
            self.epoch, self.loss, self.ce, self.cc, self.lr
        )
    }
}

/// Owns a model and its optimizer state for one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: Cemformer,
    optimizer: AdamW,
    config: TrainConfig,
    rules: ScenarioSet,
    trainable: Vec<bool>,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, views: Vec<ViewGeometry>, rules: ScenarioSet) -> Result<Self> {
        config.validate()?;
        let model_config = config.model_config(views, rules.classes().len());
        let model = Cemformer::new(model_config, config.seed)?;
        Self::from_model(model, config, rules)
    }

    pub fn from_model(model: Cemformer, config: TrainConfig, rules: ScenarioSet) -> Result<Self> {
        config.validate()?;
        if model.config().encoder.n_classes != rules.classes().len() {
            return Err(Error::config("model and rule set disagree on the number of classes"));
        }
        let model = model.with_memory_mode(config.memory_mode);
        let trainable = model.params().iter().map(|(n, _)| config.is_trainable(n)).collect();
        let optimizer = AdamW::new(model.params().tensors());
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261_696E);
        Ok(Trainer {
            model,
            optimizer,
            config,
            rules,
            trainable,
            rng,
            step: 0,
        })
    }

    pub fn model(&self) -> &Cemformer {
        &self.model
    }

    pub fn into_model(self) -> Cemformer {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optimizer
    }

    fn total_steps(&self, n_episodes: usize) -> usize {
        self.config.epochs * n_episodes.div_ceil(self.config.batch_size)
    }

    /// One pass over `episodes` in a seeded random order.
    pub fn train_epoch(&mut self, episodes: &[&Episode], epoch: usize) -> Result<EpochStats> {
        if episodes.is_empty() {
            return Err(Error::contract("cannot train on an empty episode set"));
        }
        let total = self.total_steps(episodes.len());
        let mut order: Vec<usize> = (0..episodes.len()).collect();
        order.shuffle(&mut self.rng);
        let rules = self.config.use_cc.then_some(&self.rules);
        let (mut sum_loss, mut sum_ce, mut sum_cc) = (0.0, 0.0, 0.0);
        let mut lr = self.config.lr;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let mut acc: Vec<Option<Tensor>> = self
                .trainable
                .iter()
                .zip(self.model.params().tensors())
                .map(|(&t, p)| t.then(|| Tensor::zeros(p.shape())))
                .collect();
            for &i in chunk {
                let ep = episodes[i];
                let where_ = |e: Error| e.within(&format!("epoch {epoch} batch {b} episode {}", ep.id));
                let sample = prepare_sample(
                    ep,
                    self.config.steps,
                    SampleMode::Train,
                    self.config.augment(),
                    self.rules.classes(),
                    &mut self.rng,
                )?;
                let (loss, grads) = episode_gradients(
                    &self.model,
                    &sample,
                    rules,
                    self.config.weighting,
                    self.config.truncation,
                    &self.trainable,
                )
                .map_err(where_)?;
                if !loss.total.is_finite() {
                    return Err(where_(Error::Numeric("joint loss".into())));
                }
                sum_loss += loss.total;
                sum_ce += loss.weighted_ce();
                sum_cc += loss.weighted_cc();
                for (a, g) in acc.iter_mut().zip(grads) {
                    if let (Some(a), Some(g)) = (a.as_mut(), g) {
                        a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            for a in acc.iter_mut().flatten() {
                a.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
            clip_global_norm(&mut acc, self.config.clip_norm);
            lr = cosine_lr(self.step, total, self.config.lr, self.config.lr_floor);
            self.optimizer
                .step(self.model.params_mut().tensors_mut(), &acc, lr, self.config.weight_decay)?;
            self.step += 1;
        }
        let n = episodes.len() as f64;
        Ok(EpochStats {
            epoch,
            loss: sum_loss / n,
            ce: sum_ce / n,
            cc: sum_cc / n,
            lr,
        })
    }

    /// Runs all configured epochs, handing each epoch's stats and the
    /// updated model to `on_epoch`.
    pub fn fit(
        &mut self,
        episodes: &[&Episode],
        mut on_epoch: impl FnMut(&EpochStats, &Cemformer) -> Result<()>,
    ) -> Result<Vec<EpochStats>> {
        let mut stats = Vec::with_capacity(self.config.epochs);
        for epoch in 1..=self.config.epochs {
            let s = self.train_epoch(episodes, epoch)?;
            on_epoch(&s, &self.model)?;
            stats.push(s);
        }
        Ok(stats)
    }
}

/// Per-step predictions of each episode under eval-mode sampling.
pub fn predict_episodes(model: &Cemformer, episodes: &[&Episode], steps: usize) -> Result<Vec<Vec<Prediction>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    episodes
        .iter()
        .map(|ep| {
            let idx = sample_frames(ep.frames.len(), steps, SampleMode::Eval, &mut rng)?;
            let frames: Vec<_> = idx.iter().map(|&i| &ep.frames[i]).collect();
            model
                .predict_sequence(&frames)
                .map_err(|e| e.within(&format!("episode {}", ep.id)))
        })
        .collect()
}

/// Final-step metrics of `model` on `episodes`.
pub fn evaluate(model: &Cemformer, episodes: &[&Episode], steps: usize, rules: &ScenarioSet) -> Result<FoldMetrics> {
    let preds = predict_episodes(model, episodes, steps)?;
    let per_step: Vec<Vec<usize>> = preds.iter().map(|p| p.iter().map(|q| q.label).collect()).collect();
    let labels: Vec<usize> = episodes.iter().map(|e| e.label).collect();
    let contexts: Vec<_> = episodes.iter().map(|e| e.context.clone()).collect();
    FoldMetrics::evaluate(&per_step, &labels, &contexts, rules)
}

#[derive(Clone, Debug)]
pub struct CvOutcome {
    pub report: MetricsReport,
    pub models: Vec<Cemformer>,
    pub logs: Vec<Vec<EpochStats>>,
}

/// Trains one model per fold (that fold held out) and aggregates the
/// held-out metrics.
pub fn run_cv(
    episodes: &[Episode],
    rules: &ScenarioSet,
    split: &FoldSplit,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &EpochStats, &Cemformer) -> Result<()>,
) -> Result<CvOutcome> {
    let views = episodes
        .first()
        .ok_or_else(|| Error::contract("empty dataset"))?
        .frames[0]
        .geometry();
    let by_id = |ids: &[u64]| -> Result<Vec<&Episode>> {
        ids.iter()
            .map(|id| {
                episodes
                    .iter()
                    .find(|e| e.id == *id)
                    .ok_or_else(|| Error::contract(format!("fold refers to unknown episode {id}")))
            })
            .collect()
    };
    let mut folds = Vec::with_capacity(split.len());
    let mut models = Vec::with_capacity(split.len());
    let mut logs = Vec::with_capacity(split.len());
    for f in 0..split.len() {
        let fold_err = |e: Error| match e {
            Error::Numeric(m) => Error::Numeric(format!("fold {f}: {m}")),
            Error::Contract(m) => Error::Contract(format!("fold {f}: {m}")),
            other => other,
        };
        let (train_ids, test_ids) = split.train_test(f);
        let train = by_id(&train_ids)?;
        let test = by_id(&test_ids)?;
        let mut trainer = Trainer::new(config.clone(), views.clone(), rules.clone()).map_err(fold_err)?;
        let stats = trainer.fit(&train, |s, m| on_epoch(f, s, m)).map_err(fold_err)?;
        let metrics = evaluate(trainer.model(), &test, config.steps, rules).map_err(fold_err)?;
        folds.push(metrics);
        models.push(trainer.into_model());
        logs.push(stats);
    }
    Ok(CvOutcome {
        report: MetricsReport::from_folds(folds),
        models,
        logs,
    })
}
