//! On-disk corpus layout.
//!
//! ```text
//! <root>/corpus.json              config + clip ids
//! <root>/<clip_id>/lyrics.json    {"total_frames", "sentences": [{"tokens", "start", "end"}]}
//! <root>/<clip_id>/pitch.json     [note, ...]
//! <root>/<clip_id>/features.bin   "MFLW", u32 T, u32 D_f, T*D_f f32 (all little-endian, row-major)
//! <root>/<clip_id>/clip.json      {"seed"}
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusConfig, FeatureSequence, GroundTruthClip, LyricSequence, MAX_NOTE};
use crate::error::{Error, Result};

pub const FEATURES_MAGIC: &[u8; 4] = b"MFLW";
const HEADER_LEN: usize = 12;

pub fn encode_features(features: &FeatureSequence) -> Vec<u8> {
    let (t, d) = features.frames.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + t * d * 4);
    out.extend_from_slice(FEATURES_MAGIC);
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in features.frames.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Parses a `features.bin` payload. The frame rate is not part of the file.
pub fn decode_features(bytes: &[u8], frame_rate: f64) -> Result<FeatureSequence> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("features file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != FEATURES_MAGIC {
        return Err(Error::Format("bad features magic".into()));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if t == 0 || d == 0 {
        return Err(Error::Format(format!("empty feature matrix {t}x{d}")));
    }
    let expected = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format("feature dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "features payload is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    let frames = Array2::from_shape_vec((t, d), values).map_err(|e| Error::Format(e.to_string()))?;
    FeatureSequence::new(frames, frame_rate).map_err(|e| Error::Format(e.to_string()))
}

pub fn parse_lyrics(bytes: &[u8]) -> Result<LyricSequence> {
    let lyrics: LyricSequence = serde_json::from_slice(bytes)?;
    lyrics.validate(None)?;
    Ok(lyrics)
}

pub fn parse_pitch(bytes: &[u8]) -> Result<Vec<u32>> {
    let contour: Vec<u32> = serde_json::from_slice(bytes)?;
    if let Some(bad) = contour.iter().find(|&&n| n > MAX_NOTE) {
        return Err(Error::Format(format!("note {bad} above {MAX_NOTE}")));
    }
    Ok(contour)
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusIndex {
    config: CorpusConfig,
    clips: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClipMeta {
    seed: u64,
}

pub fn write_features(path: &Path, features: &FeatureSequence) -> Result<()> {
    fs::write(path, encode_features(features))?;
    Ok(())
}

pub fn read_features(path: &Path, frame_rate: f64) -> Result<FeatureSequence> {
    decode_features(&fs::read(path)?, frame_rate)
}

pub fn save_clip(dir: &Path, clip: &GroundTruthClip) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("lyrics.json"), serde_json::to_vec(&clip.lyrics)?)?;
    fs::write(dir.join("pitch.json"), serde_json::to_vec(&clip.pitch_contour)?)?;
    fs::write(dir.join("clip.json"), serde_json::to_vec(&ClipMeta { seed: clip.seed })?)?;
    write_features(&dir.join("features.bin"), &clip.features)
}

pub fn load_clip(dir: &Path, config: &CorpusConfig) -> Result<GroundTruthClip> {
    let clip_id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Format(format!("bad clip directory {}", dir.display())))?
        .to_string();
    let lyrics = parse_lyrics(&fs::read(dir.join("lyrics.json"))?)?;
    lyrics.validate(Some(config.vocab_size))?;
    let pitch_contour = parse_pitch(&fs::read(dir.join("pitch.json"))?)?;
    let features = read_features(&dir.join("features.bin"), config.frame_rate)?;
    let meta: ClipMeta = match fs::read(dir.join("clip.json")) {
        Ok(b) => serde_json::from_slice(&b)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => ClipMeta { seed: 0 },
        Err(e) => return Err(e.into()),
    };
    if features.dim() != config.feature_dim {
        return Err(Error::Shape(format!(
            "clip {clip_id}: {} channels, corpus declares {}",
            features.dim(),
            config.feature_dim
        )));
    }
    if pitch_contour.len() != features.len() || lyrics.total_frames != features.len() {
        return Err(Error::Shape(format!("clip {clip_id}: frame counts disagree")));
    }
    Ok(GroundTruthClip {
        clip_id,
        lyrics,
        pitch_contour,
        features,
        seed: meta.seed,
    })
}

pub fn save_corpus(root: &Path, config: &CorpusConfig, clips: &[GroundTruthClip]) -> Result<()> {
    fs::create_dir_all(root)?;
    for clip in clips {
        save_clip(&root.join(&clip.clip_id), clip)?;
    }
    let index = CorpusIndex {
        config: *config,
        clips: clips.iter().map(|c| c.clip_id.clone()).collect(),
    };
    fs::write(root.join("corpus.json"), serde_json::to_vec_pretty(&index)?)?;
    Ok(())
}

pub fn load_corpus(root: &Path) -> Result<(CorpusConfig, Vec<GroundTruthClip>)> {
    let index: CorpusIndex = serde_json::from_slice(&fs::read(root.join("corpus.json"))?)?;
    index.config.validate()?;
    let clips = index
        .clips
        .iter()
        .map(|id| load_clip(&root.join(id), &index.config))
        .collect::<Result<Vec<_>>>()?;
    Ok((index.config, clips))
}
