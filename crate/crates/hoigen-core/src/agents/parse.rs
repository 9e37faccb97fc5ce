//! Deterministic grammar for scraping agent replies.
//!
//! Pose selection: the first integer in the reply decides; when no digit
//! appears, the first ordinal/word number ("one".."ten", "first".."tenth")
//! is used. A value outside `1..=k` is an error, never silently clamped.
//!
//! Layout: the first `[x, y, x, y]` bracket group of decimals is the box.
//! Values already inside the unit square pass through; otherwise they are
//! interpreted as pixels and divided by the image dimensions.

use super::BoundingBox;
use crate::error::{Error, Result};
use std::sync::OnceLock;

const WORD_NUMBERS: [(&str, usize); 20] = [
    ("one", 1),
    ("two", 2),
    ("three", 3),
    ("four", 4),
    ("five", 5),
    ("six", 6),
    ("seven", 7),
    ("eight", 8),
    ("nine", 9),
    ("ten", 10),
    ("first", 1),
    ("second", 2),
    ("third", 3),
    ("fourth", 4),
    ("fifth", 5),
    ("sixth", 6),
    ("seventh", 7),
    ("eighth", 8),
    ("ninth", 9),
    ("tenth", 10),
];

fn digit_re() -> &'static regex::Regex {
    static RE: OnceLock<regex::Regex> = OnceLock::new();
    RE.get_or_init(|| regex::Regex::new(r"\d+").unwrap())
}

fn box_re() -> &'static regex::Regex {
    static RE: OnceLock<regex::Regex> = OnceLock::new();
    RE.get_or_init(|| {
        regex::Regex::new(
            r"\[\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*\]",
        )
        .unwrap()
    })
}

/// Parse a 1-based image reference into a 0-based index below `k`.
pub fn parse_pose_index(reply: &str, k: usize) -> Result<usize> {
    if let Some(m) = digit_re().find(reply) {
        let value: usize = m
            .as_str()
            .parse()
            .map_err(|_| Error::UnparsableAgentReply(format!("integer overflow in {reply:?}")))?;
        if (1..=k).contains(&value) {
            return Ok(value - 1);
        }
        return Err(Error::UnparsableAgentReply(format!(
            "index {value} out of range 1..={k} in {reply:?}"
        )));
    }
    let lower = reply.to_lowercase();
    let mut earliest: Option<(usize, usize)> = None; // (byte position, value)
    for (word, value) in WORD_NUMBERS {
        for (pos, _) in lower.match_indices(word) {
            // whole-word match only
            let before_ok = pos == 0
                || !lower[..pos]
                    .chars()
                    .next_back()
                    .is_some_and(|c| c.is_alphanumeric());
            let after = pos + word.len();
            let after_ok = after == lower.len()
                || !lower[after..]
                    .chars()
                    .next()
                    .is_some_and(|c| c.is_alphanumeric());
            if before_ok && after_ok && earliest.is_none_or(|(p, _)| pos < p) {
                earliest = Some((pos, value));
            }
        }
    }
    match earliest {
        Some((_, value)) if (1..=k).contains(&value) => Ok(value - 1),
        Some((_, value)) => Err(Error::UnparsableAgentReply(format!(
            "index {value} out of range 1..={k} in {reply:?}"
        ))),
        None => Err(Error::UnparsableAgentReply(format!(
            "no image reference in {reply:?}"
        ))),
    }
}

/// Scrape the first well-formed box from a reply. `image_size` (width,
/// height) rescales pixel-unit boxes into the unit square.
pub fn parse_box(reply: &str, image_size: (usize, usize)) -> Result<BoundingBox> {
    let caps = box_re()
        .captures(reply)
        .ok_or_else(|| Error::UnparsableAgentReply(format!("no box group in {reply:?}")))?;
    let mut vals = [0.0f64; 4];
    for (i, v) in vals.iter_mut().enumerate() {
        *v = caps[i + 1]
            .parse()
            .map_err(|_| Error::UnparsableAgentReply(format!("bad number in {reply:?}")))?;
    }
    let unit = vals.iter().all(|&v| (0.0..=1.0).contains(&v));
    let [x0, y0, x1, y1] = if unit {
        vals
    } else {
        let (w, h) = (image_size.0 as f64, image_size.1 as f64);
        [vals[0] / w, vals[1] / h, vals[2] / w, vals[3] / h]
    };
    BoundingBox::new(x0, y0, x1, y1)
}

/// Best-effort scrape of `key: value` visual-attribute lines.
pub fn parse_visual_attributes(reply: &str) -> Vec<(String, String)> {
    const KEYS: [&str; 4] = ["pose type", "body orientation", "object relation", "pose"];
    let mut out = Vec::new();
    for line in reply.lines() {
        let lower = line.to_lowercase();
        for key in KEYS {
            if let Some(rest) = lower.strip_prefix(key) {
                if let Some(value) = rest.strip_prefix(':') {
                    let value = value.trim();
                    if !value.is_empty() {
                        out.push((key.to_string(), value.to_string()));
                    }
                    break;
                }
            }
        }
    }
    out
}
