//! Corpus evaluation: content error, melody correlation and a feature-similarity stub.

use serde::{Deserialize, Serialize};

use crate::backbone::{condition_for_clip, Model};
use crate::corpus::{oracle_pitch, oracle_transcribe, FeatureLayout, FeatureSequence, GroundTruthClip};
use crate::error::{Error, Result};
use crate::reward::{self, content_reward, contour_to_f64, melody_reward};
use crate::rng;
use crate::sampler::{sample_ode, SamplerConfig};

pub const SIM_NOTE: &str = "sim is the cosine between mean feature vectors; it is a stub and not comparable to speaker-embedding similarity";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEval {
    pub clip_id: String,
    pub wer: f64,
    #[serde(rename = "S")]
    pub substitutions: usize,
    #[serde(rename = "D")]
    pub deletions: usize,
    #[serde(rename = "I")]
    pub insertions: usize,
    pub r_con: f64,
    pub r_mel: f64,
    /// Pearson correlation on jointly voiced frames; `None` when undefined.
    pub fpc: Option<f64>,
    pub sim: f64,
}

impl ClipEval {
    pub fn total_reward(&self) -> f64 {
        self.r_con + self.r_mel
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub clips: usize,
    pub wer: Option<f64>,
    pub r_con: Option<f64>,
    pub r_mel: Option<f64>,
    pub total_reward: Option<f64>,
    /// Mean over clips where the correlation is defined.
    pub fpc: Option<f64>,
    pub fpc_defined: usize,
    pub sim: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl Aggregate {
    pub fn from_clips(clips: &[ClipEval]) -> Self {
        Self {
            clips: clips.len(),
            wer: mean(clips.iter().map(|c| c.wer)),
            r_con: mean(clips.iter().map(|c| c.r_con)),
            r_mel: mean(clips.iter().map(|c| c.r_mel)),
            total_reward: mean(clips.iter().map(ClipEval::total_reward)),
            fpc: mean(clips.iter().filter_map(|c| c.fpc)),
            fpc_defined: clips.iter().filter(|c| c.fpc.is_some()).count(),
            sim: mean(clips.iter().map(|c| c.sim)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sampler: SamplerConfig,
    pub seed: u64,
    pub sim_note: String,
    pub clips: Vec<ClipEval>,
    pub aggregate: Aggregate,
}

pub fn parse_eval_report(bytes: &[u8]) -> Result<EvalReport> {
    let report: EvalReport = serde_json::from_slice(bytes)?;
    if report.aggregate.clips != report.clips.len() {
        return Err(Error::Format(format!(
            "aggregate counts {} clips, list holds {}",
            report.aggregate.clips,
            report.clips.len()
        )));
    }
    Ok(report)
}

/// Cosine similarity between the time-averaged feature vectors.
pub fn mean_feature_cosine(a: &FeatureSequence, b: &FeatureSequence) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape("feature widths differ".into()));
    }
    let ma = a.frames.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let mb = b.frames.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let denom = ma.dot(&ma).sqrt() * mb.dot(&mb).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(ma.dot(&mb) / denom)
}

/// Scores `generated` against the clip it was conditioned on.
pub fn score_clip(layout: &FeatureLayout, clip: &GroundTruthClip, generated: &FeatureSequence) -> Result<ClipEval> {
    let hyp = oracle_transcribe(layout, generated)?;
    let w = reward::wer(&clip.lyrics.tokens(), &hyp)?;
    let pitch = oracle_pitch(layout, generated)?;
    let fpc = melody_reward(&contour_to_f64(&pitch), &contour_to_f64(&clip.pitch_contour)).ok();
    Ok(ClipEval {
        clip_id: clip.clip_id.clone(),
        wer: w.wer,
        substitutions: w.substitutions,
        deletions: w.deletions,
        insertions: w.insertions,
        r_con: content_reward(w.wer),
        r_mel: fpc.unwrap_or(0.0),
        fpc,
        sim: mean_feature_cosine(generated, &clip.features)?,
    })
}

/// Seed used for one clip's initial noise; independent of corpus order.
pub fn clip_seed(seed: u64, clip_id: &str) -> u64 {
    rng::stream_seed(seed, &[rng::label_seed(clip_id)])
}

/// Generates every clip with the deterministic sampler and scores it.
pub fn evaluate(
    model: &Model,
    layout: &FeatureLayout,
    clips: &[GroundTruthClip],
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(clips.len());
    for clip in clips {
        let cond = condition_for_clip(model, clip)?;
        let x = sample_ode(model, &cond, sampler, clip_seed(seed, &clip.clip_id))?;
        let generated = FeatureSequence::new(x, clip.features.frame_rate)?;
        rows.push(score_clip(layout, clip, &generated)?);
    }
    Ok(EvalReport {
        sampler: *sampler,
        seed,
        sim_note: SIM_NOTE.to_string(),
        aggregate: Aggregate::from_clips(&rows),
        clips: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::corpus::{generate_corpus, CorpusConfig};

    #[test]
    fn ground_truth_scores_perfectly() {
        let cc = CorpusConfig::default();
        let layout = FeatureLayout::from_config(&cc).unwrap();
        for clip in generate_corpus(5, &cc, 1).unwrap() {
            let e = score_clip(&layout, &clip, &clip.features).unwrap();
            assert_eq!((e.wer, e.r_con), (0.0, 1.0));
            assert!((e.fpc.unwrap() - 1.0).abs() < 1e-12);
            assert!((e.sim - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregates_are_means() {
        let row = |wer: f64, fpc: Option<f64>| ClipEval {
            clip_id: "c".into(),
            wer,
            substitutions: 0,
            deletions: 0,
            insertions: 0,
            r_con: 1.0 - wer,
            r_mel: fpc.unwrap_or(0.0),
            fpc,
            sim: 0.5,
        };
        let a = Aggregate::from_clips(&[row(0.0, Some(0.8)), row(0.5, None), row(1.0, Some(0.4))]);
        assert_eq!(a.wer, Some(0.5));
        assert!((a.fpc.unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(a.fpc_defined, 2);
        assert!((a.r_mel.unwrap() - 0.4).abs() < 1e-12);
        let empty = Aggregate::from_clips(&[]);
        assert_eq!((empty.clips, empty.wer), (0, None));
    }

    #[test]
    fn report_json_round_trip() {
        let cc = CorpusConfig { frames: 32, ..Default::default() };
        let layout = FeatureLayout::from_config(&cc).unwrap();
        let clips = generate_corpus(2, &cc, 1).unwrap();
        let m = Model::init(
            crate::backbone::ModelConfig {
                layers: 1,
                hidden: 8,
                heads: 2,
                cka_layer_index: 0,
                extractor_hidden: 4,
                melody_dim: 3,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let cfg = SamplerConfig { steps: 4, ..Default::default() };
        let r = evaluate(&m, &layout, &clips, &cfg, 3).unwrap();
        let bytes = serde_json::to_vec(&r).unwrap();
        assert_eq!(parse_eval_report(&bytes).unwrap(), r);
        assert_eq!(evaluate(&m, &layout, &clips, &cfg, 3).unwrap(), r);
        assert!(parse_eval_report(b"{}").is_err());
    }

    proptest! {
        #[test]
        fn report_parser_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..96)) {
            let _ = parse_eval_report(&bytes);
        }
    }
}
