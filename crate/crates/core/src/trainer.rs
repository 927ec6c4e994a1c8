//! Pre-training: joint flow-matching, melody distillation and alignment losses.

use std::collections::BTreeMap;

use log::warn;
use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::alignment::cka_loss_graph;
use crate::autodiff::Graph;
use crate::backbone::{
    self, apply_condition_dropout, flow_matching_loss_graph, interpolate, lambda_cka_schedule_with, static_condition,
    total_loss, CondVars, LossWeights, Model, ModelConfig,
};
use crate::checkpoint::Checkpoint;
use crate::corpus::{FeatureLayout, GroundTruthClip};
use crate::error::{Error, Result};
use crate::melody::{kd_loss_graph, resample_graph, student_forward, teacher_extract};
use crate::params::{accumulate, AdamW, AdamWConfig, GradMap};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub seed: u64,
    pub dropout: f64,
    pub lambda_kd: f64,
    pub lambda_cka_start: f64,
    pub lambda_cka_end: f64,
    pub lambda_cka_decay_steps: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            batch_size: 4,
            total_steps: 5000,
            warmup_steps: 200,
            peak_lr: 1e-3,
            seed: 0,
            dropout: 0.2,
            lambda_kd: backbone::LAMBDA_KD,
            lambda_cka_start: backbone::LAMBDA_CKA_START,
            lambda_cka_end: backbone::LAMBDA_CKA_END,
            lambda_cka_decay_steps: backbone::LAMBDA_CKA_DECAY_STEPS,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(Error::Config("batch_size and total_steps must be positive".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1]".into()));
        }
        for (name, v) in [
            ("lambda_kd", self.lambda_kd),
            ("lambda_cka_start", self.lambda_cka_start),
            ("lambda_cka_end", self.lambda_cka_end),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0")));
            }
        }
        Ok(())
    }

    pub fn weights_at(&self, step: u64) -> LossWeights {
        LossWeights {
            lambda_kd: self.lambda_kd,
            lambda_cka: lambda_cka_schedule_with(
                step,
                self.lambda_cka_start,
                self.lambda_cka_end,
                self.lambda_cka_decay_steps,
            ),
            step,
        }
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are ignored.
    pub fn parse_flat(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            c.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value `{v}` for `{key}`"))
        }
        let m = &mut self.model;
        match key {
            "batch_size" => self.batch_size = num(key, value)?,
            "total_steps" => self.total_steps = num(key, value)?,
            "warmup_steps" => self.warmup_steps = num(key, value)?,
            "peak_lr" => self.peak_lr = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "lambda_kd" => self.lambda_kd = num(key, value)?,
            "lambda_cka_start" => self.lambda_cka_start = num(key, value)?,
            "lambda_cka_end" => self.lambda_cka_end = num(key, value)?,
            "lambda_cka_decay_steps" => self.lambda_cka_decay_steps = num(key, value)?,
            "beta1" => self.optimizer.beta1 = num(key, value)?,
            "beta2" => self.optimizer.beta2 = num(key, value)?,
            "weight_decay" => self.optimizer.weight_decay = num(key, value)?,
            "layers" => m.layers = num(key, value)?,
            "hidden" => m.hidden = num(key, value)?,
            "heads" => m.heads = num(key, value)?,
            "feature_dim" => m.feature_dim = num(key, value)?,
            "melody_dim" => m.melody_dim = num(key, value)?,
            "vocab_size" => m.vocab_size = num(key, value)?,
            "cka_layer_index" => m.cka_layer_index = num(key, value)?,
            "extractor_hidden" => m.extractor_hidden = num(key, value)?,
            "ff_mult" => m.ff_mult = num(key, value)?,
            "teacher_rate_ratio" => m.teacher_rate_ratio = num(key, value)?,
            "prompt_fraction" => m.prompt_fraction = num(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }
}

/// Linear warm-up from 0 to the peak, then linear decay to 0 at `total_steps`.
pub fn lr_schedule(step: u64, config: &TrainConfig) -> f64 {
    let step = step.min(config.total_steps);
    if step < config.warmup_steps {
        return config.peak_lr * step as f64 / config.warmup_steps as f64;
    }
    let decay = config.total_steps - config.warmup_steps;
    if decay == 0 {
        return config.peak_lr;
    }
    config.peak_lr * (config.total_steps - step) as f64 / decay as f64
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss_total: f64,
    pub loss_diff: f64,
    pub loss_kd: f64,
    pub loss_cka: f64,
    pub lr: f64,
    pub lambda_cka: f64,
    #[serde(default)]
    pub skipped: bool,
}

/// Mutable pre-training state; `step` counts completed updates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: AdamW,
    pub step: u64,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::init(config.model, config.seed)?;
        let optimizer = AdamW::new(config.optimizer, &model.params);
        Ok(Self {
            model,
            optimizer,
            step: 0,
        })
    }

    pub fn to_checkpoint(&self, config: &TrainConfig) -> Result<Checkpoint> {
        Ok(Checkpoint {
            model: self.model.clone(),
            step: self.step,
            optimizer: Some(self.optimizer.clone()),
            extra: serde_json::to_value(config)?,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let optimizer = ckpt
            .optimizer
            .ok_or_else(|| Error::Contract("checkpoint has no optimizer state to resume from".into()))?;
        Ok(Self {
            model: ckpt.model,
            optimizer,
            step: ckpt.step,
        })
    }
}

/// Loss parts for one clip and their gradient.
struct ClipLoss {
    diff: f64,
    kd: f64,
    cka: f64,
    grads: GradMap,
}

fn clip_loss(
    model: &Model,
    layout: &FeatureLayout,
    clip: &GroundTruthClip,
    step: u64,
    weights: &LossWeights,
    config: &TrainConfig,
    batch_scale: f64,
) -> Result<ClipLoss> {
    let mc = &model.config;
    let mut r = rng::stream(config.seed, &[rng::label_seed("train"), step, rng::label_seed(&clip.clip_id)]);
    let t = loop {
        let t: f64 = r.random();
        if t > 0.0 {
            break t;
        }
    };
    let (frames, dim) = clip.features.frames.dim();
    let noise = Array2::from_shape_fn((frames, dim), |_| r.sample::<f64, _>(StandardNormal));
    let teacher = teacher_extract(layout, &clip.features, mc.teacher_rate_ratio)?;
    let base = static_condition(mc, clip)?;
    let cond = apply_condition_dropout(&base, config.dropout, &mut r);

    let mut g = Graph::new();
    let feats = g.constant(clip.features.frames.clone());
    let melody = student_forward(&mut g, &model.params, feats)?;
    let student_at_teacher = resample_graph(&mut g, melody, teacher.frame_count());
    let kd = kd_loss_graph(&mut g, &model.params, student_at_teacher, &teacher.values)?;

    let (x_t, target) = interpolate(&clip.features.frames, &noise, t);
    let x = g.constant(x_t);
    let melody_frames = resample_graph(&mut g, melody, frames);
    let vars = CondVars {
        padded_lyrics: &cond.padded_lyrics,
        prompt: g.constant(cond.prompt.clone()),
        melody: melody_frames,
        drop: cond.drop,
    };
    let out = backbone::forward(&mut g, mc, &model.params, x, t, &vars)?;
    let diff = flow_matching_loss_graph(&mut g, out.velocity, &target);
    let cka = cka_loss_graph(&mut g, melody_frames, out.hidden)?;

    let kd_w = g.scale(kd, weights.lambda_kd);
    let cka_w = g.scale(cka, weights.lambda_cka);
    let partial = g.add(diff, kd_w);
    let total = g.add(partial, cka_w);
    let total = g.scale(total, batch_scale);
    let back = g.backward(total);
    let mut grads = GradMap::new();
    accumulate(&mut grads, g.param_grads(&back));
    Ok(ClipLoss {
        diff: g.scalar(diff),
        kd: g.scalar(kd),
        cka: g.scalar(cka),
        grads,
    })
}

/// Weighted total loss of one clip at `step` and its gradient over every trainable tensor.
pub fn clip_objective(
    model: &Model,
    layout: &FeatureLayout,
    clip: &GroundTruthClip,
    step: u64,
    config: &TrainConfig,
) -> Result<(f64, GradMap)> {
    let weights = config.weights_at(step);
    let part = clip_loss(model, layout, clip, step, &weights, config, 1.0)?;
    Ok((total_loss(part.diff, part.kd, part.cka, &weights), part.grads))
}

/// Clips drawn for `step`; a function of the seed and step only.
pub fn batch_for_step<'a>(corpus: &'a [GroundTruthClip], step: u64, config: &TrainConfig) -> Vec<&'a GroundTruthClip> {
    let mut r = rng::stream(config.seed, &[rng::label_seed("batch"), step]);
    corpus
        .choose_multiple(&mut r, config.batch_size.min(corpus.len()))
        .collect()
}

/// One joint update of the backbone, extractor and projection.
pub fn train_step(
    state: &mut TrainState,
    layout: &FeatureLayout,
    batch: &[&GroundTruthClip],
    config: &TrainConfig,
) -> Result<StepLog> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let step = state.step;
    let weights = config.weights_at(step);
    let lr = lr_schedule(step, config);
    let n = batch.len() as f64;
    let mut grads = GradMap::new();
    let (mut diff, mut kd, mut cka) = (0.0, 0.0, 0.0);
    for clip in batch {
        let part = clip_loss(&state.model, layout, clip, step, &weights, config, 1.0 / n)?;
        diff += part.diff / n;
        kd += part.kd / n;
        cka += part.cka / n;
        accumulate(&mut grads, part.grads);
    }
    let loss_total = total_loss(diff, kd, cka, &weights);
    let mut log = StepLog {
        step,
        loss_total,
        loss_diff: diff,
        loss_kd: kd,
        loss_cka: cka,
        lr,
        lambda_cka: weights.lambda_cka,
        skipped: false,
    };
    if !loss_total.is_finite() {
        warn!("step {step}: non-finite loss, skipping update");
        log.skipped = true;
    } else if let Err(e) = state.optimizer.step(&mut state.model.params, &grads, lr) {
        match e {
            Error::NonFinite(what) => {
                warn!("step {step}: non-finite {what}, skipping update");
                log.skipped = true;
            }
            other => return Err(other),
        }
    }
    state.step += 1;
    Ok(log)
}

/// Trains until `state.step == stop_at` (capped at `total_steps`).
pub fn train_until(
    state: &mut TrainState,
    layout: &FeatureLayout,
    corpus: &[GroundTruthClip],
    config: &TrainConfig,
    stop_at: u64,
    mut on_step: impl FnMut(&StepLog, &TrainState) -> Result<()>,
) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Config("empty corpus".into()));
    }
    let stop_at = stop_at.min(config.total_steps);
    while state.step < stop_at {
        let batch = batch_for_step(corpus, state.step, config);
        let log = train_step(state, layout, &batch, config)?;
        on_step(&log, state)?;
    }
    Ok(())
}

/// Fresh run over the whole schedule.
pub fn pretrain(
    layout: &FeatureLayout,
    corpus: &[GroundTruthClip],
    config: &TrainConfig,
    on_step: impl FnMut(&StepLog, &TrainState) -> Result<()>,
) -> Result<TrainState> {
    let mut state = TrainState::new(config)?;
    train_until(&mut state, layout, corpus, config, config.total_steps, on_step)?;
    Ok(state)
}

/// Flat `key = value` dump accepted by [`TrainConfig::parse_flat`].
pub fn to_flat(config: &TrainConfig) -> String {
    let m = &config.model;
    let rows: BTreeMap<&str, String> = BTreeMap::from([
        ("batch_size", config.batch_size.to_string()),
        ("total_steps", config.total_steps.to_string()),
        ("warmup_steps", config.warmup_steps.to_string()),
        ("peak_lr", config.peak_lr.to_string()),
        ("seed", config.seed.to_string()),
        ("dropout", config.dropout.to_string()),
        ("lambda_kd", config.lambda_kd.to_string()),
        ("lambda_cka_start", config.lambda_cka_start.to_string()),
        ("lambda_cka_end", config.lambda_cka_end.to_string()),
        ("lambda_cka_decay_steps", config.lambda_cka_decay_steps.to_string()),
        ("beta1", config.optimizer.beta1.to_string()),
        ("beta2", config.optimizer.beta2.to_string()),
        ("weight_decay", config.optimizer.weight_decay.to_string()),
        ("layers", m.layers.to_string()),
        ("hidden", m.hidden.to_string()),
        ("heads", m.heads.to_string()),
        ("feature_dim", m.feature_dim.to_string()),
        ("melody_dim", m.melody_dim.to_string()),
        ("vocab_size", m.vocab_size.to_string()),
        ("cka_layer_index", m.cka_layer_index.to_string()),
        ("extractor_hidden", m.extractor_hidden.to_string()),
        ("ff_mult", m.ff_mult.to_string()),
        ("teacher_rate_ratio", m.teacher_rate_ratio.to_string()),
        ("prompt_fraction", m.prompt_fraction.to_string()),
    ]);
    rows.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}
