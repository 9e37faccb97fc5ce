//! Object box extraction from a cross-attention map.
//!
//! The map is scaled to 256 gray levels, thresholded where the
//! between-class variance peaks, and the tight box of the largest
//! 8-connected foreground component is returned in normalized coordinates.

use super::BoundingBox;
use crate::attention::AttentionMap;
use crate::error::{Error, Result};
use ndarray::Array2;

/// Quantize non-negative map values to 0..=255 by the map maximum.
pub fn quantize_levels(values: &Array2<f64>) -> Result<Array2<u8>> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if max == min {
        return Err(Error::DegenerateMap);
    }
    Ok(values.mapv(|v| ((v / max) * 255.0).floor().clamp(0.0, 255.0) as u8))
}

/// Between-class-variance-maximizing threshold over an 8-bit histogram.
/// Ties resolve to the smallest threshold. Foreground is `level > t`.
pub fn otsu_threshold(levels: &Array2<u8>) -> u8 {
    let mut hist = [0u64; 256];
    for &v in levels.iter() {
        hist[v as usize] += 1;
    }
    let total = levels.len() as f64;
    let sum_total: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &h)| i as f64 * h as f64)
        .sum();

    let mut w_b = 0.0;
    let mut sum_b = 0.0;
    let mut best_var = -1.0;
    let mut best_t = 0u8;
    for (t, &h) in hist.iter().enumerate().take(255) {
        w_b += h as f64;
        if w_b == 0.0 {
            continue;
        }
        let w_f = total - w_b;
        if w_f == 0.0 {
            break;
        }
        sum_b += t as f64 * h as f64;
        let m_b = sum_b / w_b;
        let m_f = (sum_total - sum_b) / w_f;
        let var_between = w_b * w_f * (m_b - m_f) * (m_b - m_f);
        if var_between > best_var {
            best_var = var_between;
            best_t = t as u8;
        }
    }
    best_t
}

/// Label 8-connected components of a binary mask in row-major scan order;
/// returns (labels, per-label sizes). Label 0 is background.
pub fn label_components(mask: &Array2<bool>) -> (Array2<usize>, Vec<usize>) {
    let (h, w) = mask.dim();
    let mut labels = Array2::zeros((h, w));
    let mut sizes = vec![0usize]; // index 0 unused (background)
    let mut stack = Vec::new();
    for si in 0..h {
        for sj in 0..w {
            if !mask[[si, sj]] || labels[[si, sj]] != 0 {
                continue;
            }
            let label = sizes.len();
            sizes.push(0);
            stack.push((si, sj));
            labels[[si, sj]] = label;
            while let Some((i, j)) = stack.pop() {
                sizes[label] += 1;
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        if di == 0 && dj == 0 {
                            continue;
                        }
                        let (ni, nj) = (i as i64 + di, j as i64 + dj);
                        if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                            continue;
                        }
                        let (ni, nj) = (ni as usize, nj as usize);
                        if mask[[ni, nj]] && labels[[ni, nj]] == 0 {
                            labels[[ni, nj]] = label;
                            stack.push((ni, nj));
                        }
                    }
                }
            }
        }
    }
    (labels, sizes)
}

/// Tight normalized box of the largest foreground component. Size ties
/// resolve to the component discovered first in scan order.
pub fn extract_object_box(object_map: &AttentionMap) -> Result<BoundingBox> {
    box_from_values(&object_map.values)
}

/// Same extraction on a bare grid (useful when maps are aggregated before
/// extraction).
pub fn box_from_values(values: &Array2<f64>) -> Result<BoundingBox> {
    if values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::ValueOutOfRange(
            "attention map must be finite and non-negative".into(),
        ));
    }
    let levels = quantize_levels(values)?;
    let threshold = otsu_threshold(&levels);
    let mask = levels.mapv(|v| v > threshold);
    let (labels, sizes) = label_components(&mask);
    let biggest = sizes
        .iter()
        .enumerate()
        .skip(1)
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(label, _)| label)
        .ok_or(Error::DegenerateMap)?;

    let (h, w) = mask.dim();
    let mut row_min = h;
    let mut row_max = 0;
    let mut col_min = w;
    let mut col_max = 0;
    for i in 0..h {
        for j in 0..w {
            if labels[[i, j]] == biggest {
                row_min = row_min.min(i);
                row_max = row_max.max(i);
                col_min = col_min.min(j);
                col_max = col_max.max(j);
            }
        }
    }
    BoundingBox::new(
        col_min as f64 / w as f64,
        row_min as f64 / h as f64,
        (col_max + 1) as f64 / w as f64,
        (row_max + 1) as f64 / h as f64,
    )
}
