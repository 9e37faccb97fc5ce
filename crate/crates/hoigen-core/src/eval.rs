//! Image-text scoring: prompt similarity, verb-only similarity and batch
//! aggregation. Embeddings come from a pluggable provider; scores for
//! external classifiers (image quality, interaction detection) attach
//! through the extra-scorer interface without a bundled implementation.

use crate::error::{Error, Result};
use crate::imaging::{fnv1a64, PixelImage};
use crate::prompt::{gerund, HoiTriplet};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Text/image embedding provider.
pub trait Embedder {
    fn id(&self) -> &str;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
    fn embed_image(&self, image: &PixelImage) -> Result<Vec<f64>>;
}

/// Provider-tagged auxiliary scorer (quality metrics, interaction
/// classifiers). Implementations live outside this crate.
pub trait ExtraScorer {
    fn name(&self) -> &str;
    fn score(&self, image: &PixelImage, prompt: &str) -> Result<f64>;
}

/// Deterministic stand-in embedder: token-hash bags for text, coarse
/// channel statistics for images. Useful for pipeline plumbing and tests;
/// scores carry no semantic meaning.
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(64)
    }
}

impl Embedder for HashEmbedder {
    fn id(&self) -> &str {
        "hash"
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        for token in text.to_lowercase().split_whitespace() {
            let h = fnv1a64(token.as_bytes());
            v[(h % self.dim as u64) as usize] += 1.0;
            v[((h >> 32) % self.dim as u64) as usize] += 0.5;
        }
        Ok(v)
    }

    fn embed_image(&self, image: &PixelImage) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        let data = image.data();
        let (h, w, _) = data.dim();
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    let bucket = (i * 7 + j * 13 + c * 29) % self.dim;
                    v[bucket] += data[[i, j, c]];
                }
            }
        }
        Ok(v)
    }
}

pub fn create_embedder(kind: &str) -> Result<Option<Box<dyn Embedder>>> {
    match kind {
        "none" => Ok(None),
        "hash" | "mock" => Ok(Some(Box::new(HashEmbedder::default()))),
        other => Err(Error::InvalidConfig(format!("unknown embedder {other:?}"))),
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "embedding widths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

/// Scaling constant applied to the clamped cosine; recorded in every
/// report header.
pub const SCORE_SCALE: f64 = 100.0;

/// `100 x max(0, cos(text, image))`.
pub fn score_pair(image: &PixelImage, text: &str, embedder: &dyn Embedder) -> Result<f64> {
    let te = embedder.embed_text(text)?;
    let ie = embedder.embed_image(image)?;
    Ok(SCORE_SCALE * cosine(&te, &ie)?.max(0.0))
}

/// Similarity against the verb phrase alone, rendered as
/// "a person is {verb-ing}" so no object token leaks into the text.
pub fn verb_score(
    image: &PixelImage,
    triplet: &HoiTriplet,
    embedder: &dyn Embedder,
    gerund_overrides: &BTreeMap<String, String>,
) -> Result<f64> {
    if triplet.verb.trim().is_empty() {
        return Err(Error::InvalidTriplet("verb required for verb score".into()));
    }
    let phrase = verb_phrase(triplet, gerund_overrides);
    score_pair(image, &phrase, embedder)
}

pub fn verb_phrase(triplet: &HoiTriplet, gerund_overrides: &BTreeMap<String, String>) -> String {
    format!("a person is {}", gerund(&triplet.verb, gerund_overrides))
}

/// Scores of one generated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub run_id: String,
    pub prompt: String,
    pub clip_score: f64,
    pub verb_clip_score: f64,
    pub extra: BTreeMap<String, f64>,
}

/// Score one image on both similarity metrics plus any attached extra
/// scorers.
pub fn score_record(
    run_id: &str,
    image: &PixelImage,
    prompt: &str,
    triplet: &HoiTriplet,
    embedder: &dyn Embedder,
    extras: &[Box<dyn ExtraScorer>],
    gerund_overrides: &BTreeMap<String, String>,
) -> Result<ScoreRecord> {
    let mut extra = BTreeMap::new();
    for scorer in extras {
        extra.insert(scorer.name().to_string(), scorer.score(image, prompt)?);
    }
    Ok(ScoreRecord {
        run_id: run_id.to_string(),
        prompt: prompt.to_string(),
        clip_score: score_pair(image, prompt, embedder)?,
        verb_clip_score: verb_score(image, triplet, embedder, gerund_overrides)?,
        extra,
    })
}

/// Per-metric means over a batch, ordered deterministically by prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub count: usize,
    pub mean_clip_score: f64,
    pub mean_verb_clip_score: f64,
    pub extra_means: BTreeMap<String, f64>,
}

pub fn batch_report(records: &[ScoreRecord]) -> Result<BatchReport> {
    if records.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut sorted: Vec<&ScoreRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.prompt.cmp(&b.prompt).then(a.run_id.cmp(&b.run_id)));
    let n = sorted.len() as f64;
    let mut extra_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in &sorted {
        for (k, v) in &r.extra {
            let e = extra_sums.entry(k.clone()).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    Ok(BatchReport {
        count: sorted.len(),
        mean_clip_score: sorted.iter().map(|r| r.clip_score).sum::<f64>() / n,
        mean_verb_clip_score: sorted.iter().map(|r| r.verb_clip_score).sum::<f64>() / n,
        extra_means: extra_sums
            .into_iter()
            .map(|(k, (s, c))| (k, s / c as f64))
            .collect(),
    })
}

/// Write scores as a tab-separated table. The header comment records the
/// scaling convention.
pub fn save_scores(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut sorted: Vec<&ScoreRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.prompt.cmp(&b.prompt).then(a.run_id.cmp(&b.run_id)));
    let mut out = format!("# scale: {SCORE_SCALE} x max(0, cosine)\n");
    out.push_str("run_id\tprompt\tclip_score\tverb_clip_score\n");
    for r in sorted {
        out.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\n",
            r.run_id, r.prompt, r.clip_score, r.verb_clip_score
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
