//! Group-relative policy post-training over single-step stochastic rollouts.

use std::collections::BTreeMap;

use log::{debug, warn};
use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};
use crate::backbone::{condition_for_clip, ConditionBundle, Model, ModelConfig};
use crate::corpus::{oracle_pitch, oracle_transcribe, FeatureLayout, FeatureSequence, GroundTruthClip};
use crate::error::{Error, Result};
use crate::params::{AdamW, AdamWConfig, GradMap, ParamStore};
use crate::reward::{self, assign_advantages, contour_to_f64, melody_reward_or_zero, RewardBundle};
use crate::rng;
use crate::sampler::{self, cfg_velocity_graph, Policy, RolloutRecord, SamplerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SnapshotTag {
    Old,
    Reference,
}

/// Frozen parameter copy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    params: ParamStore,
    tag: SnapshotTag,
}

impl PolicySnapshot {
    pub fn new(params: &ParamStore, tag: SnapshotTag) -> Self {
        Self {
            params: params.clone(),
            tag,
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn tag(&self) -> SnapshotTag {
        self.tag
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub kl_weight: f64,
    pub inner_epochs: usize,
    /// `None` disables ratio clipping.
    pub ratio_clip: Option<f64>,
    pub noise_level_a: f64,
    pub learning_rate: f64,
    pub steps: usize,
    /// Prompts per outer step; each contributes one group.
    pub prompts_per_step: usize,
    pub sampler_steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
    pub reward_weights: BTreeMap<String, f64>,
    pub optimizer: AdamWConfig,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            kl_weight: 0.04,
            inner_epochs: 1,
            ratio_clip: Some(0.2),
            noise_level_a: 0.7,
            learning_rate: 3e-5,
            steps: 300,
            prompts_per_step: 4,
            sampler_steps: 32,
            cfg_scale: 2.0,
            seed: 0,
            reward_weights: reward::default_weights(),
            optimizer: AdamWConfig::default(),
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config(format!("group_size {} must be >= 2", self.group_size)));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config("kl_weight must be >= 0".into()));
        }
        if self.inner_epochs == 0 || self.prompts_per_step == 0 {
            return Err(Error::Config("inner_epochs and prompts_per_step must be positive".into()));
        }
        if let Some(c) = self.ratio_clip {
            if !(c > 0.0 && c < 1.0) {
                return Err(Error::Config(format!("ratio_clip {c} must lie in (0, 1)")));
            }
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be >= 0".into()));
        }
        self.sampler().validate()
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.sampler_steps,
            cfg_scale: self.cfg_scale,
            noise_level_a: self.noise_level_a,
            stochastic_step_index: None,
        }
    }
}

/// Scores generated features against a clip's tokens and pitch contour.
pub fn score_features(
    layout: &FeatureLayout,
    clip: &GroundTruthClip,
    generated: &FeatureSequence,
    weights: &BTreeMap<String, f64>,
) -> Result<RewardBundle> {
    let hyp = oracle_transcribe(layout, generated)?;
    let w = reward::wer(&clip.lyrics.tokens(), &hyp)?;
    let pitch = oracle_pitch(layout, generated)?;
    let r_mel = melody_reward_or_zero(&contour_to_f64(&pitch), &contour_to_f64(&clip.pitch_contour));
    RewardBundle::new(w, r_mel, weights.clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub record: RolloutRecord,
    pub reward: RewardBundle,
}

/// `G` rollouts for one prompt, sharing its condition bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredGroup {
    pub clip_id: String,
    pub cond: ConditionBundle,
    pub members: Vec<Member>,
}

/// Runs one rollout per seed under `old` and fills in group advantages.
pub fn collect_group(
    model_config: &ModelConfig,
    old: &PolicySnapshot,
    layout: &FeatureLayout,
    clip: &GroundTruthClip,
    config: &GrpoConfig,
    seeds: &[u64],
) -> Result<ScoredGroup> {
    if seeds.len() < 2 {
        return Err(Error::Config(format!("group needs at least 2 members, got {}", seeds.len())));
    }
    let model = Model {
        config: *model_config,
        params: old.params().clone(),
    };
    let cond = condition_for_clip(&model, clip)?;
    let policy = Policy {
        config: model_config,
        params: old.params(),
    };
    let sampler = config.sampler();
    let mut members = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let record = sampler::sample_sde_rollout(&policy, &cond, &sampler, seed)?;
        let generated = FeatureSequence::new(record.x1().clone(), clip.features.frame_rate)?;
        let reward = score_features(layout, clip, &generated, &config.reward_weights)?;
        members.push(Member { record, reward });
    }
    let mut bundles: Vec<RewardBundle> = members.iter().map(|m| m.reward.clone()).collect();
    assign_advantages(&mut bundles)?;
    for (m, b) in members.iter_mut().zip(bundles) {
        m.reward = b;
    }
    Ok(ScoredGroup {
        clip_id: clip.clip_id.clone(),
        cond,
        members,
    })
}

fn transition_mean_with(params: &ParamStore, config: &ModelConfig, cond: &ConditionBundle, record: &RolloutRecord) -> Result<Mat> {
    sampler::transition_mean(&Policy { config, params }, cond, record)
}

/// `exp(logp_new - logp_old)` for the recorded stochastic transition.
pub fn policy_ratio(
    config: &ModelConfig,
    cond: &ConditionBundle,
    record: &RolloutRecord,
    params_new: &ParamStore,
    params_old: &ParamStore,
) -> Result<f64> {
    let (_, next, _, std) = record.transition()?;
    if std == 0.0 {
        return Ok(1.0);
    }
    let new = transition_mean_with(params_new, config, cond, record)?;
    let old = transition_mean_with(params_old, config, cond, record)?;
    let lp_new = sampler::gaussian_log_density(next, &new, std)?;
    let lp_old = sampler::gaussian_log_density(next, &old, std)?;
    Ok((lp_new - lp_old).exp())
}

/// KL between the new and reference transition Gaussians, `|mu_new - mu_ref|^2 / (2 s^2)`.
pub fn kl_penalty(
    config: &ModelConfig,
    cond: &ConditionBundle,
    record: &RolloutRecord,
    params_new: &ParamStore,
    params_ref: &ParamStore,
) -> Result<f64> {
    let (_, _, _, std) = record.transition()?;
    if std == 0.0 {
        return Ok(0.0);
    }
    let new = transition_mean_with(params_new, config, cond, record)?;
    let reference = transition_mean_with(params_ref, config, cond, record)?;
    Ok(gaussian_kl(&new, &reference, std))
}

pub fn gaussian_kl(mean_a: &Mat, mean_b: &Mat, std: f64) -> f64 {
    let sq: f64 = mean_a.iter().zip(mean_b.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    sq / (2.0 * std * std)
}

/// Per-member objective `min(r A, clip(r) A) - beta KL` from an in-graph log-ratio and KL.
pub fn surrogate_graph(g: &mut Graph, log_ratio: Var, kl: Var, advantage: f64, config: &GrpoConfig) -> Var {
    let ratio = g.exp(log_ratio);
    let weighted = g.scale(ratio, advantage);
    let policy_term = match config.ratio_clip {
        Some(eps) => {
            let clipped = g.clamp(ratio, 1.0 - eps, 1.0 + eps);
            let clipped = g.scale(clipped, advantage);
            g.min(weighted, clipped)
        }
        None => weighted,
    };
    let penalty = g.scale(kl, config.kl_weight);
    g.sub(policy_term, penalty)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepMetrics {
    pub objective: f64,
    pub mean_reward: f64,
    pub mean_r_con: f64,
    pub mean_r_mel: f64,
    pub mean_ratio: f64,
    pub mean_kl: f64,
    pub skipped: bool,
}

/// Objective value and its gradient with respect to the backbone parameters.
pub fn objective_and_grads(
    model_config: &ModelConfig,
    params: &ParamStore,
    old: &PolicySnapshot,
    reference: &PolicySnapshot,
    groups: &[ScoredGroup],
    config: &GrpoConfig,
) -> Result<(StepMetrics, GradMap)> {
    let count: usize = groups.iter().map(|g| g.members.len()).sum();
    if count == 0 {
        return Err(Error::Contract("no scored groups".into()));
    }
    let n = count as f64;
    let mut metrics = StepMetrics::default();
    let mut grads = GradMap::new();
    for group in groups {
        for member in &group.members {
            let record = &member.record;
            let reward = &member.reward;
            metrics.mean_reward += reward.total / n;
            metrics.mean_r_con += reward.r_con / n;
            metrics.mean_r_mel += reward.r_mel / n;
            let (x, next, k, std) = record.transition()?;
            if std == 0.0 {
                // degenerate transition: ratio 1, no KL, no gradient
                metrics.objective += reward.advantage / n;
                metrics.mean_ratio += 1.0 / n;
                continue;
            }
            let t = record.config.time(k);
            let dt = record.config.dt();
            let inv = 1.0 / (2.0 * std * std);
            let mean_old = transition_mean_with(old.params(), model_config, &group.cond, record)?;
            let mean_ref = transition_mean_with(reference.params(), model_config, &group.cond, record)?;
            let lp_old = -sq_dist(next, &mean_old) * inv;

            let mut g = Graph::new();
            let v = cfg_velocity_graph(&mut g, model_config, params, x, t, &group.cond, record.config.cfg_scale)?;
            let step = g.scale(v, dt);
            let xv = g.constant(x.clone());
            let mean_new = g.add(xv, step);
            let next_v = g.constant(next.clone());
            let resid = g.sub(next_v, mean_new);
            let sq = g.sum_sq(resid);
            let lp_new = g.scale(sq, -inv);
            let log_ratio = g.offset(lp_new, -lp_old);
            let ref_v = g.constant(mean_ref);
            let d = g.sub(mean_new, ref_v);
            let d_sq = g.sum_sq(d);
            let kl = g.scale(d_sq, inv);
            let obj = surrogate_graph(&mut g, log_ratio, kl, reward.advantage, config);
            let scaled = g.scale(obj, 1.0 / n);

            metrics.objective += g.scalar(scaled);
            metrics.mean_ratio += g.scalar(log_ratio).exp() / n;
            metrics.mean_kl += g.scalar(kl) / n;
            let back = g.backward(scaled);
            crate::params::accumulate(&mut grads, g.param_grads(&back));
        }
    }
    Ok((metrics, grads))
}

fn sq_dist(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// One ascent step on the group objective; a non-finite gradient skips the update.
pub fn grpo_step(
    model: &mut Model,
    optimizer: &mut AdamW,
    old: &PolicySnapshot,
    reference: &PolicySnapshot,
    groups: &[ScoredGroup],
    config: &GrpoConfig,
) -> Result<StepMetrics> {
    let (mut metrics, mut grads) = objective_and_grads(&model.config, &model.params, old, reference, groups, config)?;
    crate::params::scale_grads(&mut grads, -1.0);
    match optimizer.step(&mut model.params, &grads, config.learning_rate) {
        Ok(()) => {}
        Err(Error::NonFinite(what)) => {
            warn!("skipping update: non-finite {what}");
            metrics.skipped = true;
        }
        Err(e) => return Err(e),
    }
    Ok(metrics)
}

/// One line of the reward-curve log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_r_con: f64,
    pub mean_r_mel: f64,
    pub mean_kl: f64,
}

/// Outer loop: refresh the old snapshot, collect one group per sampled prompt,
/// then run the inner epochs. The reference snapshot is the starting model.
pub fn post_train(
    model: &Model,
    layout: &FeatureLayout,
    prompts: &[GroundTruthClip],
    config: &GrpoConfig,
    mut on_step: impl FnMut(&CurvePoint) -> Result<()>,
) -> Result<(Model, Vec<CurvePoint>)> {
    config.validate()?;
    if prompts.is_empty() {
        return Err(Error::Config("no prompt clips".into()));
    }
    let mut current = model.clone();
    let reference = PolicySnapshot::new(&model.params, SnapshotTag::Reference);
    let mut optimizer = AdamW::new(config.optimizer, &current.params);
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let old = PolicySnapshot::new(&current.params, SnapshotTag::Old);
        let mut pick = rng::stream(config.seed, &[rng::label_seed("prompts"), step as u64]);
        let mut groups = Vec::with_capacity(config.prompts_per_step);
        for p in 0..config.prompts_per_step {
            let clip = prompts.choose(&mut pick).expect("non-empty");
            let seeds: Vec<u64> = (0..config.group_size)
                .map(|m| rng::stream_seed(config.seed, &[rng::label_seed("rollout"), step as u64, p as u64, m as u64]))
                .collect();
            match collect_group(&current.config, &old, layout, clip, config, &seeds) {
                Ok(g) => groups.push(g),
                Err(e) => warn!("step {step}: discarding group for {}: {e}", clip.clip_id),
            }
        }
        if groups.is_empty() {
            warn!("step {step}: no valid groups");
            continue;
        }
        let mut first = None;
        for _ in 0..config.inner_epochs {
            let m = grpo_step(&mut current, &mut optimizer, &old, &reference, &groups, config)?;
            first.get_or_insert(m);
        }
        let m = first.expect("inner_epochs >= 1");
        let point = CurvePoint {
            step,
            mean_reward: m.mean_reward,
            mean_r_con: m.mean_r_con,
            mean_r_mel: m.mean_r_mel,
            mean_kl: m.mean_kl,
        };
        debug!("grpo step {step}: reward {:.4} kl {:.5}", point.mean_reward, point.mean_kl);
        on_step(&point)?;
        curve.push(point);
    }
    Ok((current, curve))
}
