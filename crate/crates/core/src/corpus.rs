//! Synthetic singing corpus.
//!
//! Each clip is a lyric sequence sung on a piecewise-constant melody. Frames
//! are rendered into a feature matrix whose channels fall into three disjoint
//! groups:
//!
//! ```text
//! [0, token_dims)            token codeword of the syllable sung at the frame
//! token_dims                 voicing flag (+1 voiced, -1 unvoiced)
//! token_dims + 1             pitch, (note - 24.5) / 12 on voiced frames
//! [token_dims + 2, D_f)      low-amplitude residual noise
//! ```
//!
//! Because the groups are disjoint, [`oracle_transcribe`] and [`oracle_pitch`]
//! recover tokens and contour exactly from clean features.

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::rng;

pub type Token = u32;

/// Reserved vocabulary entry occupying frames with no sung syllable.
pub const FILLER_TOKEN: Token = 0;
/// Highest note index; 0 marks an unvoiced frame.
pub const MAX_NOTE: u32 = 48;

const CODEBOOK_SEED: u64 = 0x4D46_4C57;
const RESIDUAL_SCALE: f64 = 0.1;
const PITCH_CENTER: f64 = 24.5;
const PITCH_SPAN: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub frames: usize,
    pub frame_rate: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            feature_dim: 16,
            frames: 64,
            frame_rate: 93.75,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config(format!("vocab_size must be >= 4, got {}", self.vocab_size)));
        }
        if self.feature_dim < 4 {
            return Err(Error::Config(format!("feature_dim must be >= 4, got {}", self.feature_dim)));
        }
        if !(32..=512).contains(&self.frames) {
            return Err(Error::Config(format!("frames must lie in [32, 512], got {}", self.frames)));
        }
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return Err(Error::Config("frame_rate must be positive".into()));
        }
        Ok(())
    }
}

/// One lyric line and the frames `[start, end)` it is sung over.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<Token>,
    pub start: usize,
    pub end: usize,
}

impl Sentence {
    pub fn width(&self) -> usize {
        self.end.saturating_sub(self.start)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LyricSequence {
    pub sentences: Vec<Sentence>,
    pub total_frames: usize,
}

impl LyricSequence {
    /// All tokens in sentence order.
    pub fn tokens(&self) -> Vec<Token> {
        self.sentences.iter().flat_map(|s| s.tokens.iter().copied()).collect()
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(|s| s.tokens.len()).sum()
    }

    /// Checks spans are sorted, disjoint and inside the clip, and token ids
    /// are below `vocab_size` when given.
    pub fn validate(&self, vocab_size: Option<usize>) -> Result<()> {
        if self.total_frames == 0 {
            return Err(Error::Config("total_frames must be >= 1".into()));
        }
        let mut prev_end = 0;
        for (i, s) in self.sentences.iter().enumerate() {
            if s.start >= s.end || s.end > self.total_frames {
                return Err(Error::Config(format!(
                    "sentence {i} span ({}, {}) outside [0, {})",
                    s.start, s.end, self.total_frames
                )));
            }
            if s.start < prev_end {
                return Err(Error::Config(format!("sentence {i} overlaps or precedes its predecessor")));
            }
            prev_end = s.end;
            if let Some(v) = vocab_size {
                if let Some(bad) = s.tokens.iter().find(|&&t| t as usize >= v) {
                    return Err(Error::Config(format!("token {bad} outside vocabulary of size {v}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub frames: Mat,
    pub frame_rate: f64,
}

impl FeatureSequence {
    pub fn new(frames: Mat, frame_rate: f64) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::Shape("feature sequence needs at least one frame".into()));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature values".into()));
        }
        Ok(Self { frames, frame_rate })
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthClip {
    pub clip_id: String,
    pub lyrics: LyricSequence,
    pub pitch_contour: Vec<u32>,
    pub features: FeatureSequence,
    /// Seed of the residual-noise channels.
    pub seed: u64,
}

/// Channel layout and token codebook shared by the renderer and the oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLayout {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub token_dims: usize,
    codebook: Mat,
}

impl FeatureLayout {
    pub fn new(vocab_size: usize, feature_dim: usize) -> Result<Self> {
        if vocab_size < 2 || feature_dim < 4 {
            return Err(Error::Config("layout needs vocab_size >= 2 and feature_dim >= 4".into()));
        }
        let token_dims = feature_dim / 2;
        let codebook = build_codebook(vocab_size, token_dims);
        Ok(Self {
            vocab_size,
            feature_dim,
            token_dims,
            codebook,
        })
    }

    pub fn from_config(config: &CorpusConfig) -> Result<Self> {
        config.validate()?;
        Self::new(config.vocab_size, config.feature_dim)
    }

    pub fn voicing_channel(&self) -> usize {
        self.token_dims
    }

    pub fn pitch_channel(&self) -> usize {
        self.token_dims + 1
    }

    pub fn codeword(&self, token: Token) -> ndarray::ArrayView1<'_, f64> {
        self.codebook.row(token as usize)
    }

    fn check_dim(&self, features: &FeatureSequence) -> Result<()> {
        if features.dim() != self.feature_dim {
            return Err(Error::Shape(format!(
                "features have {} channels, layout expects {}",
                features.dim(),
                self.feature_dim
            )));
        }
        Ok(())
    }

    /// Nearest codeword for each frame, before collapsing.
    pub fn decode_frames(&self, features: &FeatureSequence) -> Result<Vec<Token>> {
        self.check_dim(features)?;
        let tok = features.frames.slice(s![.., ..self.token_dims]);
        Ok(tok
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = (f64::INFINITY, FILLER_TOKEN);
                for (id, code) in self.codebook.rows().into_iter().enumerate() {
                    let d: f64 = row.iter().zip(code.iter()).map(|(a, b)| (a - b).powi(2)).sum();
                    if d < best.0 {
                        best = (d, id as Token);
                    }
                }
                best.1
            })
            .collect())
    }
}

/// Picks well-separated `±1` codewords when the token group can hold them,
/// falling back to Gaussian codewords otherwise.
fn build_codebook(vocab_size: usize, dims: usize) -> Mat {
    let mut rng = rng::stream(CODEBOOK_SEED, &[vocab_size as u64, dims as u64]);
    let binary_capacity = if dims >= 20 { usize::MAX } else { 1usize << dims };
    if vocab_size > binary_capacity {
        return Array2::from_shape_fn((vocab_size, dims), |_| rng.sample::<f64, _>(StandardNormal));
    }
    let candidates: Vec<u64> = if dims <= 12 {
        let mut all: Vec<u64> = (0..(1u64 << dims)).collect();
        all.shuffle(&mut rng);
        all
    } else {
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::new();
        while out.len() < vocab_size * 64 && out.len() < binary_capacity {
            let c = rng.random::<u64>() & ((1u64 << dims) - 1);
            if seen.insert(c) {
                out.push(c);
            }
        }
        out
    };
    let mut chosen: Vec<u64> = Vec::new();
    for min_dist in (1..=3u32).rev() {
        chosen.clear();
        for &c in &candidates {
            if chosen.iter().all(|&o| (o ^ c).count_ones() >= min_dist) {
                chosen.push(c);
                if chosen.len() == vocab_size {
                    break;
                }
            }
        }
        if chosen.len() == vocab_size {
            break;
        }
    }
    Array2::from_shape_fn((vocab_size, dims), |(i, j)| if chosen[i] >> j & 1 == 1 { 1.0 } else { -1.0 })
}

/// Lays tokens out on the frame grid: each sentence's tokens occupy the first
/// frames of its span, every other frame holds [`FILLER_TOKEN`].
pub fn pad_lyrics(lyrics: &LyricSequence) -> Result<Vec<Token>> {
    lyrics.validate(None)?;
    let mut grid = vec![FILLER_TOKEN; lyrics.total_frames];
    for (i, s) in lyrics.sentences.iter().enumerate() {
        if s.tokens.len() > s.width() {
            return Err(Error::SpanOverflow {
                sentence: i,
                tokens: s.tokens.len(),
                width: s.width(),
            });
        }
        grid[s.start..s.start + s.tokens.len()].copy_from_slice(&s.tokens);
    }
    Ok(grid)
}

/// Frame-level token alignment implied by the lyrics and contour: within a
/// sentence span, each maximal run of constant non-zero pitch carries one token.
fn align_tokens(lyrics: &LyricSequence, contour: &[u32]) -> Result<Vec<Token>> {
    if contour.len() != lyrics.total_frames {
        return Err(Error::Shape(format!(
            "contour has {} frames, lyrics expect {}",
            contour.len(),
            lyrics.total_frames
        )));
    }
    let mut per_frame = vec![FILLER_TOKEN; contour.len()];
    let mut covered = vec![false; contour.len()];
    for (i, sentence) in lyrics.sentences.iter().enumerate() {
        let mut segments: Vec<(usize, usize)> = Vec::new();
        for f in sentence.start..sentence.end {
            covered[f] = true;
            if contour[f] == 0 {
                continue;
            }
            match segments.last_mut() {
                Some((_, end)) if *end == f && contour[f - 1] == contour[f] => *end = f + 1,
                _ => segments.push((f, f + 1)),
            }
        }
        if segments.len() != sentence.tokens.len() {
            return Err(Error::Alignment(format!(
                "sentence {i} has {} tokens but {} sung notes",
                sentence.tokens.len(),
                segments.len()
            )));
        }
        for ((a, b), &tok) in segments.into_iter().zip(&sentence.tokens) {
            per_frame[a..b].fill(tok);
        }
    }
    if let Some(f) = (0..contour.len()).find(|&f| !covered[f] && contour[f] != 0) {
        return Err(Error::Alignment(format!("voiced frame {f} lies outside every sentence")));
    }
    Ok(per_frame)
}

/// Renders features for a lyric sequence sung on `contour`.
pub fn render_features(
    layout: &FeatureLayout,
    lyrics: &LyricSequence,
    contour: &[u32],
    seed: u64,
    frame_rate: f64,
) -> Result<FeatureSequence> {
    lyrics.validate(Some(layout.vocab_size))?;
    if let Some(bad) = contour.iter().find(|&&n| n > MAX_NOTE) {
        return Err(Error::Config(format!("note {bad} above {MAX_NOTE}")));
    }
    let per_frame = align_tokens(lyrics, contour)?;
    let mut rng = rng::stream(seed, &[0x5245_5349]);
    let t = contour.len();
    let mut frames = Array2::zeros((t, layout.feature_dim));
    for (f, (&tok, &note)) in per_frame.iter().zip(contour).enumerate() {
        let mut row = frames.row_mut(f);
        row.slice_mut(s![..layout.token_dims]).assign(&layout.codeword(tok));
        if note > 0 {
            row[layout.voicing_channel()] = 1.0;
            row[layout.pitch_channel()] = (f64::from(note) - PITCH_CENTER) / PITCH_SPAN;
        } else {
            row[layout.voicing_channel()] = -1.0;
        }
        for c in layout.token_dims + 2..layout.feature_dim {
            row[c] = rng.sample::<f64, _>(StandardNormal) * RESIDUAL_SCALE;
        }
    }
    // Stored on disk as f32; keep in-memory values exactly representable.
    frames.mapv_inplace(|v| v as f32 as f64);
    FeatureSequence::new(frames, frame_rate)
}

/// Recovers the sung tokens: nearest codeword per frame, consecutive
/// duplicates collapsed, filler dropped.
pub fn oracle_transcribe(layout: &FeatureLayout, features: &FeatureSequence) -> Result<Vec<Token>> {
    let frames = layout.decode_frames(features)?;
    let mut out = Vec::new();
    let mut prev = None;
    for tok in frames {
        if prev != Some(tok) && tok != FILLER_TOKEN {
            out.push(tok);
        }
        prev = Some(tok);
    }
    Ok(out)
}

/// Recovers the per-frame note index; 0 where the voicing channel is not positive.
pub fn oracle_pitch(layout: &FeatureLayout, features: &FeatureSequence) -> Result<Vec<u32>> {
    layout.check_dim(features)?;
    let v = layout.voicing_channel();
    let p = layout.pitch_channel();
    Ok(features
        .frames
        .rows()
        .into_iter()
        .map(|row| {
            if row[v] <= 0.0 {
                0
            } else {
                let note = (row[p] * PITCH_SPAN + PITCH_CENTER).round();
                note.clamp(1.0, f64::from(MAX_NOTE)) as u32
            }
        })
        .collect())
}

fn generate_clip(config: &CorpusConfig, layout: &FeatureLayout, seed: u64, index: usize) -> Result<GroundTruthClip> {
    let clip_seed = rng::stream_seed(seed, &[index as u64]);
    let mut rng = rng::stream(clip_seed, &[0x4C59_5249]);
    let t = config.frames;
    let vocab = config.vocab_size as Token;
    let mut contour = vec![0u32; t];
    let mut sentences = Vec::new();
    let mut frame = rng.random_range(0..4usize);
    loop {
        let remaining = t.saturating_sub(frame);
        if remaining < 2 {
            break;
        }
        let wanted = rng.random_range(2..=6usize);
        let mut durations: Vec<usize> = (0..wanted).map(|_| rng.random_range(2..=5usize)).collect();
        while durations.iter().sum::<usize>() > remaining {
            durations.pop();
        }
        if durations.is_empty() {
            break;
        }
        let mut tokens = Vec::with_capacity(durations.len());
        let mut note = rng.random_range(8..=40u32) as i64;
        let mut cursor = frame;
        for (k, &d) in durations.iter().enumerate() {
            let mut tok = rng.random_range(1..vocab);
            if tokens.last() == Some(&tok) {
                tok = tok % (vocab - 1) + 1;
            }
            tokens.push(tok);
            if k > 0 {
                let step = rng.random_range(1..=4i64) * if rng.random::<bool>() { 1 } else { -1 };
                let mut next = (note + step).clamp(1, 46);
                if next == note {
                    next = (note - step).clamp(1, 46);
                }
                note = next;
            }
            contour[cursor..cursor + d].fill(note as u32);
            cursor += d;
        }
        sentences.push(Sentence {
            tokens,
            start: frame,
            end: cursor,
        });
        frame = cursor + rng.random_range(2..=6usize);
    }
    let lyrics = LyricSequence {
        sentences,
        total_frames: t,
    };
    let features = render_features(layout, &lyrics, &contour, clip_seed, config.frame_rate)?;
    Ok(GroundTruthClip {
        clip_id: format!("clip_{index:05}"),
        lyrics,
        pitch_contour: contour,
        features,
        seed: clip_seed,
    })
}

/// Deterministically generates `n_clips` clips from `(config, seed)`.
pub fn generate_corpus(n_clips: usize, config: &CorpusConfig, seed: u64) -> Result<Vec<GroundTruthClip>> {
    if n_clips == 0 {
        return Err(Error::Config("n_clips must be >= 1".into()));
    }
    let layout = FeatureLayout::from_config(config)?;
    (0..n_clips).map(|i| generate_clip(config, &layout, seed, i)).collect()
}

impl GroundTruthClip {
    /// Same clip sung `semitones` higher on every voiced frame.
    pub fn transposed(&self, layout: &FeatureLayout, semitones: i64) -> Result<GroundTruthClip> {
        let contour: Vec<u32> = self
            .pitch_contour
            .iter()
            .map(|&n| if n == 0 { 0 } else { (i64::from(n) + semitones).max(1) as u32 })
            .collect();
        let features = render_features(layout, &self.lyrics, &contour, self.seed, self.features.frame_rate)?;
        Ok(GroundTruthClip {
            clip_id: format!("{}_t{semitones:+}", self.clip_id),
            lyrics: self.lyrics.clone(),
            pitch_contour: contour,
            features,
            seed: self.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::wer;
    use proptest::prelude::*;
    use rand::Rng;

    fn lyrics(sentences: Vec<(Vec<Token>, usize, usize)>, t: usize) -> LyricSequence {
        LyricSequence {
            sentences: sentences
                .into_iter()
                .map(|(tokens, start, end)| Sentence { tokens, start, end })
                .collect(),
            total_frames: t,
        }
    }

    #[test]
    fn pad_places_tokens_at_span_start() {
        let l = lyrics(vec![(vec![5, 6], 0, 4)], 6);
        assert_eq!(pad_lyrics(&l).unwrap(), vec![5, 6, 0, 0, 0, 0]);
    }

    #[test]
    fn pad_empty_sentence_list() {
        let l = lyrics(vec![], 4);
        assert_eq!(pad_lyrics(&l).unwrap(), vec![0, 0, 0, 0]);
    }

    #[test]
    fn pad_rejects_overflowing_sentence() {
        let l = lyrics(vec![(vec![1, 2, 3], 1, 3)], 6);
        assert!(matches!(
            pad_lyrics(&l),
            Err(Error::SpanOverflow { tokens: 3, width: 2, .. })
        ));
    }

    #[test]
    fn pad_rejects_overlapping_spans() {
        let l = lyrics(vec![(vec![1], 0, 3), (vec![2], 2, 5)], 6);
        assert!(matches!(pad_lyrics(&l), Err(Error::Config(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let c = CorpusConfig::default();
        let a = generate_corpus(1, &c, 7).unwrap();
        let b = generate_corpus(1, &c, 7).unwrap();
        assert_eq!(a, b);
        let bytes = |clip: &GroundTruthClip| crate::storage::encode_features(&clip.features);
        assert_eq!(bytes(&a[0]), bytes(&b[0]));
        let other = generate_corpus(1, &c, 8).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn zero_clips_is_an_error() {
        assert!(matches!(generate_corpus(0, &CorpusConfig::default(), 1), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_config_is_rejected() {
        for c in [
            CorpusConfig { vocab_size: 3, ..Default::default() },
            CorpusConfig { feature_dim: 3, ..Default::default() },
            CorpusConfig { frames: 31, ..Default::default() },
            CorpusConfig { frames: 513, ..Default::default() },
        ] {
            assert!(matches!(generate_corpus(1, &c, 1), Err(Error::Config(_))));
        }
    }

    #[test]
    fn hundred_default_clips_round_trip() {
        let c = CorpusConfig::default();
        let layout = FeatureLayout::from_config(&c).unwrap();
        for clip in generate_corpus(100, &c, 11).unwrap() {
            assert!(!clip.lyrics.sentences.is_empty());
            assert_eq!(oracle_transcribe(&layout, &clip.features).unwrap(), clip.lyrics.tokens());
            assert_eq!(oracle_pitch(&layout, &clip.features).unwrap(), clip.pitch_contour);
        }
    }

    #[test]
    fn all_filler_features_transcribe_to_nothing() {
        let layout = FeatureLayout::new(32, 16).unwrap();
        let mut frames = Array2::zeros((10, 16));
        for mut row in frames.rows_mut() {
            row.slice_mut(s![..8]).assign(&layout.codeword(FILLER_TOKEN));
        }
        let f = FeatureSequence::new(frames, 93.75).unwrap();
        assert!(oracle_transcribe(&layout, &f).unwrap().is_empty());
    }

    #[test]
    fn zero_features_are_unvoiced() {
        let layout = FeatureLayout::new(32, 16).unwrap();
        let f = FeatureSequence::new(Array2::zeros((12, 16)), 93.75).unwrap();
        assert_eq!(oracle_pitch(&layout, &f).unwrap(), vec![0; 12]);
    }

    #[test]
    fn oracles_reject_wrong_width() {
        let layout = FeatureLayout::new(32, 16).unwrap();
        let f = FeatureSequence::new(Array2::zeros((4, 12)), 93.75).unwrap();
        assert!(matches!(oracle_pitch(&layout, &f), Err(Error::Shape(_))));
        assert!(matches!(oracle_transcribe(&layout, &f), Err(Error::Shape(_))));
    }

    #[test]
    fn transposition_shifts_contour_by_two() {
        let c = CorpusConfig::default();
        let layout = FeatureLayout::from_config(&c).unwrap();
        for clip in generate_corpus(20, &c, 5).unwrap() {
            let up = clip.transposed(&layout, 2).unwrap();
            let decoded = oracle_pitch(&layout, &up.features).unwrap();
            for (a, b) in decoded.iter().zip(&clip.pitch_contour) {
                if *b == 0 {
                    assert_eq!(*a, 0);
                } else {
                    assert_eq!(*a, b + 2);
                }
            }
            assert_eq!(oracle_transcribe(&layout, &up.features).unwrap(), clip.lyrics.tokens());
        }
    }

    /// Regression fixture: additive N(0, 0.5^2) noise on the default corpus.
    #[test]
    fn noisy_features_degrade_transcription() {
        let c = CorpusConfig::default();
        let layout = FeatureLayout::from_config(&c).unwrap();
        let mut rng = rng::stream(99, &[]);
        let mut total = 0.0;
        let clips = generate_corpus(20, &c, 3).unwrap();
        for clip in &clips {
            let noisy = clip
                .features
                .frames
                .mapv(|v| v + 0.5 * rng.sample::<f64, _>(StandardNormal));
            let f = FeatureSequence::new(noisy, c.frame_rate).unwrap();
            let hyp = oracle_transcribe(&layout, &f).unwrap();
            total += wer(&clip.lyrics.tokens(), &hyp).unwrap().wer;
        }
        let mean = total / clips.len() as f64;
        assert!(mean > 0.0);
        assert!((mean - NOISY_WER_FIXTURE).abs() < 1e-12, "mean noisy WER {mean}");
    }

    const NOISY_WER_FIXTURE: f64 = 0.052431588019823304;

    #[test]
    fn codebook_is_distinct() {
        for (v, d) in [(32, 8), (4, 2), (64, 3), (32, 30)] {
            let layout = FeatureLayout::new(v, d * 2).unwrap();
            for i in 0..v {
                for j in 0..i {
                    assert_ne!(layout.codeword(i as Token), layout.codeword(j as Token));
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn round_trip_for_any_seed(seed in any::<u64>(), frames in 32usize..160) {
            let c = CorpusConfig { frames, ..Default::default() };
            let layout = FeatureLayout::from_config(&c).unwrap();
            let clip = generate_corpus(1, &c, seed).unwrap().remove(0);
            prop_assert_eq!(oracle_transcribe(&layout, &clip.features).unwrap(), clip.lyrics.tokens());
            prop_assert_eq!(oracle_pitch(&layout, &clip.features).unwrap(), clip.pitch_contour.clone());
            let grid = pad_lyrics(&clip.lyrics).unwrap();
            prop_assert_eq!(grid.len(), frames);
            prop_assert_eq!(grid.iter().filter(|&&t| t == FILLER_TOKEN).count(), frames - clip.lyrics.token_count());
        }
    }
}
