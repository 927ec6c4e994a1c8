//! Conditional flow-matching transformer.
//!
//! The network predicts a velocity field over the feature frames given the
//! noisy state, the flow time, and three conditions (padded lyrics, a feature
//! prompt, and the extracted melody). A dropped condition is replaced by a
//! learned null embedding.

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};
use crate::corpus::{pad_lyrics, FeatureSequence, GroundTruthClip, Token};
use crate::error::{Error, Result};
use crate::melody::{self, resample_melody};
use crate::params::ParamStore;
use crate::rng;

const TIME_FEATURES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub feature_dim: usize,
    pub melody_dim: usize,
    pub vocab_size: usize,
    pub cka_layer_index: usize,
    pub extractor_hidden: usize,
    pub ff_mult: usize,
    /// Teacher frames per extractor frame.
    pub teacher_rate_ratio: f64,
    /// Prompt length as a fraction of the clip.
    pub prompt_fraction: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 64,
            heads: 4,
            feature_dim: 16,
            melody_dim: 32,
            vocab_size: 32,
            cka_layer_index: 2,
            extractor_hidden: 64,
            ff_mult: 2,
            teacher_rate_ratio: 1.5,
            prompt_fraction: 0.125,
        }
    }
}

impl ModelConfig {
    /// Reference dimensions of the full-size decoder (12 layers, width 1024, 16 heads).
    pub fn reference_scale() -> Self {
        Self {
            layers: 12,
            hidden: 1024,
            heads: 16,
            cka_layer_index: 6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 {
            return bad("layers, hidden and heads must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("heads ({}) must divide hidden ({})", self.heads, self.hidden));
        }
        if self.cka_layer_index >= self.layers {
            return bad(format!("cka_layer_index {} outside [0, {})", self.cka_layer_index, self.layers));
        }
        if self.feature_dim < 4 || self.melody_dim == 0 || self.vocab_size < 2 {
            return bad("feature_dim >= 4, melody_dim >= 1 and vocab_size >= 2 required".into());
        }
        if self.extractor_hidden == 0 || self.ff_mult == 0 {
            return bad("extractor_hidden and ff_mult must be positive".into());
        }
        if !(self.teacher_rate_ratio.is_finite() && self.teacher_rate_ratio > 0.0) {
            return bad("teacher_rate_ratio must be positive".into());
        }
        if !(0.0..1.0).contains(&self.prompt_fraction) {
            return bad("prompt_fraction must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn prompt_frames(&self, frames: usize) -> usize {
        ((frames as f64 * self.prompt_fraction).floor() as usize).max(1).min(frames)
    }
}

/// Which conditions are replaced by their null embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DropFlags {
    pub lyrics: bool,
    pub prompt: bool,
    pub melody: bool,
}

impl DropFlags {
    pub const ALL: DropFlags = DropFlags {
        lyrics: true,
        prompt: true,
        melody: true,
    };
    pub const NONE: DropFlags = DropFlags {
        lyrics: false,
        prompt: false,
        melody: false,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    pub padded_lyrics: Vec<Token>,
    /// `T x D_f`; frames past the prompt are zero.
    pub prompt: Mat,
    /// Extractor output resampled to `T` frames.
    pub melody: Mat,
    pub drop: DropFlags,
}

impl ConditionBundle {
    pub fn frames(&self) -> usize {
        self.padded_lyrics.len()
    }

    pub fn with_drop(&self, drop: DropFlags) -> Self {
        Self { drop, ..self.clone() }
    }
}

/// First `prompt_frames` rows of `reference`, zero elsewhere.
pub fn prompt_matrix(reference: &FeatureSequence, prompt_frames: usize) -> Mat {
    let mut prompt = Array2::zeros(reference.frames.raw_dim());
    let p = prompt_frames.min(reference.len());
    prompt.slice_mut(s![..p, ..]).assign(&reference.frames.slice(s![..p, ..]));
    prompt
}

/// Condition for synthesising `clip`, using the clip itself as prompt and melody reference.
pub fn condition_for_clip(model: &Model, clip: &GroundTruthClip) -> Result<ConditionBundle> {
    let mut cond = static_condition(&model.config, clip)?;
    let melody = melody::student_extract(&model.params, &clip.features)?;
    cond.melody = resample_melody(&melody, cond.frames())?.values;
    Ok(cond)
}

/// Lyrics and prompt for `clip`, with a zero melody placeholder for callers
/// that supply the melody themselves.
pub fn static_condition(config: &ModelConfig, clip: &GroundTruthClip) -> Result<ConditionBundle> {
    let padded = pad_lyrics(&clip.lyrics)?;
    let t = padded.len();
    Ok(ConditionBundle {
        padded_lyrics: padded,
        prompt: prompt_matrix(&clip.features, config.prompt_frames(t)),
        melody: Array2::zeros((t, config.melody_dim)),
        drop: DropFlags::NONE,
    })
}

/// Independently drops each condition with probability `rate`.
pub fn apply_condition_dropout(cond: &ConditionBundle, rate: f64, rng: &mut impl Rng) -> ConditionBundle {
    let drop = DropFlags {
        lyrics: rng.random::<f64>() < rate,
        prompt: rng.random::<f64>() < rate,
        melody: rng.random::<f64>() < rate,
    };
    cond.with_drop(drop)
}

/// Backbone parameter names.
pub mod names {
    pub const IN_X: &str = "backbone.in_x";
    pub const IN_PROMPT: &str = "backbone.in_prompt";
    pub const IN_MELODY: &str = "backbone.in_melody";
    pub const IN_BIAS: &str = "backbone.in_bias";
    pub const TOKEN_EMB: &str = "backbone.token_emb";
    pub const NULL_LYRICS: &str = "backbone.null_lyrics";
    pub const NULL_PROMPT: &str = "backbone.null_prompt";
    pub const NULL_MELODY: &str = "backbone.null_melody";
    pub const TIME_W1: &str = "backbone.time_w1";
    pub const TIME_B1: &str = "backbone.time_b1";
    pub const TIME_W2: &str = "backbone.time_w2";
    pub const TIME_B2: &str = "backbone.time_b2";
    pub const OUT_W: &str = "backbone.out_w";
    pub const OUT_B: &str = "backbone.out_b";

    pub fn block(layer: usize, part: &str) -> String {
        format!("backbone.block{layer}.{part}")
    }
}

/// Backbone, extractor and projection parameters with their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, &[0x494E_4954]);
        let mut p = ParamStore::new();
        let h = config.hidden;
        let d = config.feature_dim;
        let inv = |n: usize| (1.0 / n as f64).sqrt();
        p.insert_normal(names::IN_X, d, h, inv(d), &mut r);
        p.insert_normal(names::IN_PROMPT, d, h, inv(d), &mut r);
        p.insert_normal(names::IN_MELODY, config.melody_dim, h, inv(config.melody_dim), &mut r);
        p.insert_zeros(names::IN_BIAS, 1, h);
        p.insert_normal(names::TOKEN_EMB, config.vocab_size, h, 1.0, &mut r);
        p.insert_normal(names::NULL_LYRICS, 1, h, 1.0, &mut r);
        p.insert_normal(names::NULL_PROMPT, 1, h, 1.0, &mut r);
        p.insert_normal(names::NULL_MELODY, 1, h, 1.0, &mut r);
        p.insert_normal(names::TIME_W1, TIME_FEATURES, h, inv(TIME_FEATURES), &mut r);
        p.insert_zeros(names::TIME_B1, 1, h);
        p.insert_normal(names::TIME_W2, h, h, inv(h), &mut r);
        p.insert_zeros(names::TIME_B2, 1, h);
        let ff = h * config.ff_mult;
        let residual_scale = inv(h) / (2.0 * config.layers as f64).sqrt();
        for l in 0..config.layers {
            for part in ["wq", "wk", "wv"] {
                p.insert_normal(&names::block(l, part), h, h, inv(h), &mut r);
            }
            p.insert_normal(&names::block(l, "wo"), h, h, residual_scale, &mut r);
            p.insert_normal(&names::block(l, "ff_w1"), h, ff, inv(h), &mut r);
            p.insert_zeros(&names::block(l, "ff_b1"), 1, ff);
            p.insert_normal(&names::block(l, "ff_w2"), ff, h, residual_scale, &mut r);
            p.insert_zeros(&names::block(l, "ff_b2"), 1, h);
        }
        p.insert_normal(names::OUT_W, h, d, 0.02, &mut r);
        p.insert_zeros(names::OUT_B, 1, d);
        melody::init_extractor(&mut p, d, config.extractor_hidden, config.melody_dim, &mut r);
        Ok(Self { config, params: p })
    }

    /// Velocity prediction and the intermediate features at `cka_layer_index`.
    pub fn velocity(&self, x_t: &Mat, t: f64, cond: &ConditionBundle) -> Result<(Mat, Mat)> {
        velocity_with(&self.config, &self.params, x_t, t, cond)
    }
}

/// Inference-only forward pass with an explicit parameter set.
pub fn velocity_with(
    config: &ModelConfig,
    params: &ParamStore,
    x_t: &Mat,
    t: f64,
    cond: &ConditionBundle,
) -> Result<(Mat, Mat)> {
    let mut g = Graph::inference();
    let x = g.constant(x_t.clone());
    let inputs = CondVars::constants(&mut g, cond);
    let out = forward(&mut g, config, params, x, t, &inputs)?;
    Ok((g.value(out.velocity).clone(), g.value(out.hidden).clone()))
}

/// Condition tensors already placed on a graph.
#[derive(Debug, Clone)]
pub struct CondVars<'a> {
    pub padded_lyrics: &'a [Token],
    pub prompt: Var,
    pub melody: Var,
    pub drop: DropFlags,
}

impl<'a> CondVars<'a> {
    pub fn constants(g: &mut Graph, cond: &'a ConditionBundle) -> Self {
        Self {
            padded_lyrics: &cond.padded_lyrics,
            prompt: g.constant(cond.prompt.clone()),
            melody: g.constant(cond.melody.clone()),
            drop: cond.drop,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub velocity: Var,
    pub hidden: Var,
}

fn time_features(t: f64) -> Mat {
    let half = TIME_FEATURES / 2;
    Array2::from_shape_fn((1, TIME_FEATURES), |(_, j)| {
        let freq = (1000.0f64).powf(-((j % half) as f64) / half as f64) * 100.0;
        if j < half {
            (t * freq).sin()
        } else {
            (t * freq).cos()
        }
    })
}

fn positional_encoding(frames: usize, hidden: usize) -> Mat {
    Array2::from_shape_fn((frames, hidden), |(p, j)| {
        let rate = (10_000f64).powf(-((j / 2 * 2) as f64) / hidden as f64);
        if j % 2 == 0 {
            (p as f64 * rate).sin()
        } else {
            (p as f64 * rate).cos()
        }
    })
}

fn linear(g: &mut Graph, params: &ParamStore, x: Var, w: &str, b: Option<&str>) -> Var {
    let wv = g.param(w, params.get(w));
    let y = g.matmul(x, wv);
    match b {
        Some(b) => {
            let bv = g.param(b, params.get(b));
            g.add_row(y, bv)
        }
        None => y,
    }
}

/// Records the backbone forward pass on `g`.
pub fn forward(
    g: &mut Graph,
    config: &ModelConfig,
    params: &ParamStore,
    x_t: Var,
    t: f64,
    cond: &CondVars<'_>,
) -> Result<ForwardOutput> {
    let (frames, dim) = g.value(x_t).dim();
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("flow time {t} outside [0, 1]")));
    }
    if dim != config.feature_dim {
        return Err(Error::Shape(format!("x_t has {dim} channels, model expects {}", config.feature_dim)));
    }
    if cond.padded_lyrics.len() != frames
        || g.value(cond.prompt).dim() != (frames, dim)
        || g.value(cond.melody).dim() != (frames, config.melody_dim)
    {
        return Err(Error::Shape(format!(
            "conditions must span {frames} frames (lyrics {}, prompt {:?}, melody {:?})",
            cond.padded_lyrics.len(),
            g.value(cond.prompt).dim(),
            g.value(cond.melody).dim()
        )));
    }
    if let Some(bad) = cond.padded_lyrics.iter().find(|&&tok| tok as usize >= config.vocab_size) {
        return Err(Error::Shape(format!("token {bad} outside vocabulary")));
    }
    let h_dim = config.hidden;

    let mut h = linear(g, params, x_t, names::IN_X, None);
    let lyr = if cond.drop.lyrics {
        let null = g.param(names::NULL_LYRICS, params.get(names::NULL_LYRICS));
        g.repeat_rows(null, frames)
    } else {
        let table = g.param(names::TOKEN_EMB, params.get(names::TOKEN_EMB));
        let idx: Vec<usize> = cond.padded_lyrics.iter().map(|&t| t as usize).collect();
        g.gather_rows(table, &idx)
    };
    h = g.add(h, lyr);
    let prompt = if cond.drop.prompt {
        let null = g.param(names::NULL_PROMPT, params.get(names::NULL_PROMPT));
        g.repeat_rows(null, frames)
    } else {
        linear(g, params, cond.prompt, names::IN_PROMPT, None)
    };
    h = g.add(h, prompt);
    let mel = if cond.drop.melody {
        let null = g.param(names::NULL_MELODY, params.get(names::NULL_MELODY));
        g.repeat_rows(null, frames)
    } else {
        linear(g, params, cond.melody, names::IN_MELODY, None)
    };
    h = g.add(h, mel);
    let pos = g.constant(positional_encoding(frames, h_dim));
    h = g.add(h, pos);

    let tf = g.constant(time_features(t));
    let te = linear(g, params, tf, names::TIME_W1, Some(names::TIME_B1));
    let te = g.silu(te);
    let te = linear(g, params, te, names::TIME_W2, Some(names::TIME_B2));
    let in_bias = g.param(names::IN_BIAS, params.get(names::IN_BIAS));
    let te = g.add(te, in_bias);
    h = g.add_row(h, te);

    let head_dim = config.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut hidden = h;
    for l in 0..config.layers {
        let a = g.layer_norm(h);
        let q = linear(g, params, a, &names::block(l, "wq"), None);
        let k = linear(g, params, a, &names::block(l, "wk"), None);
        let v = linear(g, params, a, &names::block(l, "wv"), None);
        let mut heads = Vec::with_capacity(config.heads);
        for hd in 0..config.heads {
            let off = hd * head_dim;
            let qh = g.slice_cols(q, off, head_dim);
            let kh = g.slice_cols(k, off, head_dim);
            let vh = g.slice_cols(v, off, head_dim);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            heads.push(g.matmul(attn, vh));
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        let o = linear(g, params, cat, &names::block(l, "wo"), None);
        h = g.add(h, o);
        let f = g.layer_norm(h);
        let f = linear(g, params, f, &names::block(l, "ff_w1"), Some(&names::block(l, "ff_b1")));
        let f = g.silu(f);
        let f = linear(g, params, f, &names::block(l, "ff_w2"), Some(&names::block(l, "ff_b2")));
        h = g.add(h, f);
        if l == config.cka_layer_index {
            hidden = h;
        }
    }
    let out = g.layer_norm(h);
    let velocity = linear(g, params, out, names::OUT_W, Some(names::OUT_B));
    Ok(ForwardOutput { velocity, hidden })
}

/// Rectified-flow interpolant `x_t = (1 - t) noise + t x1` and target `x1 - noise`.
pub fn interpolate(x1: &Mat, noise: &Mat, t: f64) -> (Mat, Mat) {
    let x_t = noise * (1.0 - t) + x1 * t;
    let target = x1 - noise;
    (x_t, target)
}

/// Mean squared error between predicted and target velocity, recorded on `g`.
pub fn flow_matching_loss_graph(g: &mut Graph, velocity: Var, target: &Mat) -> Var {
    let tv = g.constant(target.clone());
    let diff = g.sub(velocity, tv);
    let sq = g.mul(diff, diff);
    g.mean(sq)
}

pub fn flow_matching_loss(
    model: &Model,
    clip: &GroundTruthClip,
    cond: &ConditionBundle,
    t: f64,
    noise: &Mat,
) -> Result<f64> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Domain(format!("training time {t} outside (0, 1)")));
    }
    if noise.dim() != clip.features.frames.dim() {
        return Err(Error::Shape("noise must match the clip features".into()));
    }
    let (x_t, target) = interpolate(&clip.features.frames, noise, t);
    let (v, _) = model.velocity(&x_t, t, cond)?;
    let diff = v - target;
    Ok(diff.mapv(|d| d * d).mean().expect("non-empty"))
}

pub const LAMBDA_KD: f64 = 1.0;
pub const LAMBDA_CKA_START: f64 = 0.3;
pub const LAMBDA_CKA_END: f64 = 0.01;
pub const LAMBDA_CKA_DECAY_STEPS: u64 = 2500;

/// Linear decay of the alignment weight from 0.3 to 0.01 over 2500 steps.
pub fn lambda_cka_schedule(step: u64) -> f64 {
    lambda_cka_schedule_with(step, LAMBDA_CKA_START, LAMBDA_CKA_END, LAMBDA_CKA_DECAY_STEPS)
}

pub fn lambda_cka_schedule_with(step: u64, start: f64, end: f64, decay_steps: u64) -> f64 {
    if decay_steps == 0 || step >= decay_steps {
        return end;
    }
    start + (end - start) * step as f64 / decay_steps as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_kd: f64,
    pub lambda_cka: f64,
    pub step: u64,
}

impl LossWeights {
    pub fn at_step(step: u64) -> Self {
        Self {
            lambda_kd: LAMBDA_KD,
            lambda_cka: lambda_cka_schedule(step),
            step,
        }
    }
}

/// `diffusion + lambda_kd * kd + lambda_cka * cka`.
pub fn total_loss(diffusion: f64, kd: f64, cka: f64, weights: &LossWeights) -> f64 {
    diffusion + weights.lambda_kd * kd + weights.lambda_cka * cka
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};
    use rand_distr::StandardNormal;

    fn small() -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 16,
            heads: 2,
            cka_layer_index: 1,
            extractor_hidden: 16,
            melody_dim: 8,
            ..ModelConfig::default()
        }
    }

    fn clip() -> GroundTruthClip {
        generate_corpus(1, &CorpusConfig { frames: 32, ..Default::default() }, 3).unwrap().remove(0)
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::reference_scale().validate().is_ok());
        assert_eq!(ModelConfig::reference_scale().head_dim(), 64);
        assert!(ModelConfig { heads: 3, ..small() }.validate().is_err());
        assert!(ModelConfig { cka_layer_index: 2, ..small() }.validate().is_err());
    }

    #[test]
    fn velocity_is_deterministic_with_expected_shapes() {
        let m = Model::init(small(), 1).unwrap();
        let c = clip();
        let cond = condition_for_clip(&m, &c).unwrap();
        let x = Array2::from_elem((32, 16), 0.3);
        let (v1, z1) = m.velocity(&x, 0.4, &cond).unwrap();
        let (v2, z2) = m.velocity(&x, 0.4, &cond).unwrap();
        assert_eq!(v1.dim(), (32, 16));
        assert_eq!(z1.dim(), (32, 16));
        assert_eq!((v1, z1), (v2, z2));
    }

    #[test]
    fn fully_dropped_conditions_ignore_inputs() {
        let m = Model::init(small(), 2).unwrap();
        let corpus = generate_corpus(2, &CorpusConfig { frames: 32, ..Default::default() }, 8).unwrap();
        let a = condition_for_clip(&m, &corpus[0]).unwrap().with_drop(DropFlags::ALL);
        let b = condition_for_clip(&m, &corpus[1]).unwrap().with_drop(DropFlags::ALL);
        assert_ne!(a.padded_lyrics, b.padded_lyrics);
        let x = Array2::from_elem((32, 16), -0.2);
        assert_eq!(m.velocity(&x, 0.7, &a).unwrap(), m.velocity(&x, 0.7, &b).unwrap());
        let partial = condition_for_clip(&m, &corpus[1]).unwrap();
        assert_ne!(m.velocity(&x, 0.7, &a).unwrap().0, m.velocity(&x, 0.7, &partial).unwrap().0);
    }

    #[test]
    fn velocity_rejects_bad_shapes_and_times() {
        let m = Model::init(small(), 2).unwrap();
        let cond = condition_for_clip(&m, &clip()).unwrap();
        assert!(matches!(m.velocity(&Array2::zeros((31, 16)), 0.5, &cond), Err(Error::Shape(_))));
        assert!(matches!(m.velocity(&Array2::zeros((32, 15)), 0.5, &cond), Err(Error::Shape(_))));
        assert!(matches!(m.velocity(&Array2::zeros((32, 16)), 1.5, &cond), Err(Error::Domain(_))));
    }

    #[test]
    fn flow_loss_is_zero_when_prediction_matches() {
        let mut m = Model::init(small(), 4).unwrap();
        let c = clip();
        let cond = condition_for_clip(&m, &c).unwrap();
        // with a zero output layer the prediction is the output bias; a
        // noise equal to x1 - bias makes the target equal to the bias
        m.params.insert_zeros(names::OUT_W, 16, 16);
        let bias = Array2::from_shape_fn((1, 16), |(_, j)| j as f64 * 0.1);
        m.params.insert(names::OUT_B, bias.clone());
        let noise = &c.features.frames - &bias;
        let loss = flow_matching_loss(&m, &c, &cond, 0.3, &noise).unwrap();
        assert!(loss.abs() < 1e-24, "{loss}");
    }

    #[test]
    fn flow_loss_non_negative() {
        let m = Model::init(small(), 5).unwrap();
        let c = clip();
        let cond = condition_for_clip(&m, &c).unwrap();
        let mut r = rng::stream(5, &[]);
        for _ in 0..10 {
            let noise = Array2::from_shape_fn((32, 16), |_| r.sample::<f64, _>(StandardNormal));
            let t = r.random_range(0.01..0.99);
            assert!(flow_matching_loss(&m, &c, &cond, t, &noise).unwrap() >= 0.0);
        }
        assert!(flow_matching_loss(&m, &c, &cond, 0.0, &Array2::zeros((32, 16))).is_err());
    }

    #[test]
    fn schedule_fixtures() {
        assert_eq!(lambda_cka_schedule(0), 0.3);
        assert_eq!(lambda_cka_schedule(2500), 0.01);
        assert_eq!(lambda_cka_schedule(10_000), 0.01);
        assert!((lambda_cka_schedule(1250) - 0.155).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for s in 0..3000 {
            let l = lambda_cka_schedule(s);
            assert!(l <= prev && (0.01..=0.3).contains(&l));
            prev = l;
        }
    }

    #[test]
    fn total_loss_fixtures() {
        assert_eq!(total_loss(1.0, 0.0, 0.0, &LossWeights::at_step(17)), 1.0);
        assert!((total_loss(0.5, 0.2, 0.1, &LossWeights::at_step(0)) - 0.73).abs() < 1e-12);
        assert!((total_loss(0.5, 0.2, 0.1, &LossWeights::at_step(2500)) - 0.701).abs() < 1e-12);
        assert!((total_loss(0.5, 0.2, 0.1, &LossWeights::at_step(9000)) - 0.701).abs() < 1e-12);
    }

    #[test]
    fn dropout_rates() {
        let m = Model::init(small(), 6).unwrap();
        let cond = condition_for_clip(&m, &clip()).unwrap();
        let mut r = rng::stream(1, &[]);
        for _ in 0..100 {
            assert_eq!(apply_condition_dropout(&cond, 0.0, &mut r).drop, DropFlags::NONE);
            assert_eq!(apply_condition_dropout(&cond, 1.0, &mut r).drop, DropFlags::ALL);
        }
        let trials = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..trials {
            let d = apply_condition_dropout(&cond, 0.2, &mut r).drop;
            counts[0] += usize::from(d.lyrics);
            counts[1] += usize::from(d.prompt);
            counts[2] += usize::from(d.melody);
        }
        for c in counts {
            let freq = c as f64 / trials as f64;
            assert!((freq - 0.2).abs() < 0.01, "{freq}");
        }
    }
}
