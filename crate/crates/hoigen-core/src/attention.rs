//! Attention map computation, cross-stream merging and inverse masking.
//!
//! Three manipulations drive the pipeline:
//! - row-softmax attention from query/key products,
//! - per-token substitution of full-prompt cross maps with intransitive
//!   ones (self maps substituted wholesale once the step passes the gate),
//! - overlap elimination: the complement of the object's map multiplied
//!   into every other token's map.

use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Identifies one attention layer of a backbone.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerId(pub String);

impl std::fmt::Display for LayerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Which prompt stream produced a map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    FullStream,
    IntransitiveStream,
}

/// One token's spatial attention at one layer and step, stored as an
/// `r x r` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub values: Array2<f64>,
    pub token_index: usize,
    pub layer_id: LayerId,
    pub step: usize,
    pub provenance: Provenance,
}

impl AttentionMap {
    pub fn resolution(&self) -> usize {
        self.values.nrows()
    }

    /// Scale values into `[0, 1]` by the map maximum. An all-zero map stays
    /// all-zero.
    pub fn normalized_unit(&self) -> Array2<f64> {
        normalize_unit(&self.values.view())
    }
}

/// Scale a non-negative grid by its maximum; max 0 leaves it untouched.
pub fn normalize_unit(values: &ArrayView2<'_, f64>) -> Array2<f64> {
    let max = values.iter().cloned().fold(0.0_f64, f64::max);
    if max > 0.0 {
        values.mapv(|v| v / max)
    } else {
        values.to_owned()
    }
}

/// Captured attention of one denoising step: cross maps keyed by
/// `(layer, token)` plus one self grid per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMapSet {
    pub cross: BTreeMap<(LayerId, usize), AttentionMap>,
    pub self_attention: BTreeMap<LayerId, Array2<f64>>,
    pub step: usize,
}

impl AttentionMapSet {
    pub fn new(step: usize) -> Self {
        Self {
            cross: BTreeMap::new(),
            self_attention: BTreeMap::new(),
            step,
        }
    }

    pub fn layers(&self) -> Vec<LayerId> {
        let mut out: Vec<LayerId> = self.cross.keys().map(|(l, _)| l.clone()).collect();
        out.dedup();
        out
    }

    pub fn token_indices(&self, layer: &LayerId) -> Vec<usize> {
        self.cross
            .keys()
            .filter(|(l, _)| l == layer)
            .map(|(_, n)| *n)
            .collect()
    }

    pub fn cross_map(&self, layer: &LayerId, token: usize) -> Option<&AttentionMap> {
        self.cross.get(&(layer.clone(), token))
    }

    /// Check the softmax row invariant on a freshly captured set: for every
    /// layer and spatial position, attention summed over tokens is 1.
    /// Masked sets intentionally violate this.
    pub fn validate_stochastic(&self, tol: f64) -> Result<()> {
        for layer in self.layers() {
            let tokens = self.token_indices(&layer);
            let first = &self.cross[&(layer.clone(), tokens[0])].values;
            let mut sums = Array2::<f64>::zeros(first.raw_dim());
            for &n in &tokens {
                sums += &self.cross[&(layer.clone(), n)].values;
            }
            if sums.iter().any(|s| (s - 1.0).abs() > tol) {
                return Err(Error::ValueOutOfRange(format!(
                    "cross rows of layer {layer} do not sum to 1"
                )));
            }
        }
        for (layer, grid) in &self.self_attention {
            for row in grid.rows() {
                let s: f64 = row.sum();
                if (s - 1.0).abs() > tol {
                    return Err(Error::ValueOutOfRange(format!(
                        "self rows of layer {layer} do not sum to 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Query/key inputs for one attention computation.
#[derive(Debug, Clone)]
pub struct QkInputs {
    /// positions x d
    pub query: Array2<f64>,
    /// tokens x d
    pub key: Array2<f64>,
}

impl QkInputs {
    pub fn new(query: Array2<f64>, key: Array2<f64>) -> Result<Self> {
        if query.ncols() != key.ncols() || key.ncols() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "query width {} vs key width {}",
                query.ncols(),
                key.ncols()
            )));
        }
        let q = Self { query, key };
        if q.query.iter().chain(q.key.iter()).any(|v| !v.is_finite()) {
            return Err(Error::ValueOutOfRange("non-finite q/k entry".into()));
        }
        Ok(q)
    }

    pub fn embed_dim(&self) -> usize {
        self.key.ncols()
    }
}

/// Row-stochastic attention `softmax(Q K^T / sqrt(d))`, positions x tokens.
pub fn compute_attention(qk: &QkInputs) -> Result<Array2<f64>> {
    let scale = 1.0 / (qk.embed_dim() as f64).sqrt();
    let logits = qk.query.dot(&qk.key.t()) * scale;
    let mut out = Array2::<f64>::zeros(logits.raw_dim());
    for (mut orow, lrow) in out.rows_mut().into_iter().zip(logits.rows()) {
        let max = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (o, &l) in orow.iter_mut().zip(lrow.iter()) {
            *o = (l - max).exp();
            denom += *o;
        }
        orow.mapv_inplace(|v| v / denom);
    }
    Ok(out)
}

/// Substitute aligned tokens' cross maps with the intransitive stream's.
///
/// Token `n` of the full prompt takes the intransitive map at the aligned
/// index when the alignment covers `n`, and keeps the full-stream map
/// otherwise. Values are copied bit-for-bit; layer/step/token metadata stay
/// with the full-prompt indexing.
pub fn merge_cross_attention(
    full_maps: &AttentionMapSet,
    intrans_maps: &AttentionMapSet,
    alignment: &BTreeMap<usize, usize>,
) -> Result<AttentionMapSet> {
    let mut merged = AttentionMapSet::new(full_maps.step);
    merged.self_attention = full_maps.self_attention.clone();
    for ((layer, n), map) in &full_maps.cross {
        let out = match alignment.get(n) {
            Some(&j) => {
                let source = intrans_maps.cross_map(layer, j).ok_or_else(|| {
                    Error::ResolutionMismatch(format!(
                        "intransitive stream missing layer {layer} token {j}"
                    ))
                })?;
                if source.values.raw_dim() != map.values.raw_dim() {
                    return Err(Error::ResolutionMismatch(format!(
                        "layer {layer}: {:?} vs {:?}",
                        map.values.dim(),
                        source.values.dim()
                    )));
                }
                AttentionMap {
                    values: source.values.clone(),
                    token_index: *n,
                    layer_id: layer.clone(),
                    step: map.step,
                    provenance: source.provenance,
                }
            }
            None => map.clone(),
        };
        merged.cross.insert((layer.clone(), *n), out);
    }
    Ok(merged)
}

/// Step-gated self-attention substitution: the intransitive grid replaces
/// the full one only while `t > gamma`.
pub fn merge_self_attention(
    full_self: &Array2<f64>,
    intrans_self: &Array2<f64>,
    step: usize,
    gamma: usize,
) -> Result<Array2<f64>> {
    if full_self.raw_dim() != intrans_self.raw_dim() {
        return Err(Error::ShapeMismatch(format!(
            "self grids {:?} vs {:?}",
            full_self.dim(),
            intrans_self.dim()
        )));
    }
    if step > gamma {
        Ok(intrans_self.clone())
    } else {
        Ok(full_self.clone())
    }
}

/// Complement of a unit-normalized map. Input values must lie in `[0, 1]`.
pub fn inverse_mask(object_map: &ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if object_map.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::ValueOutOfRange(
            "inverse mask input must be normalized to [0, 1]".into(),
        ));
    }
    Ok(object_map.mapv(|v| 1.0 - v))
}

/// Multiply every token map except the object's own by the mask.
///
/// All maps in the set must share the mask's resolution; callers working
/// with multi-resolution sets split per layer first.
pub fn apply_inverse_mask(
    mask: &ArrayView2<'_, f64>,
    maps: &AttentionMapSet,
    object_index: usize,
) -> Result<AttentionMapSet> {
    let mut out = maps.clone();
    for ((layer, n), map) in &mut out.cross {
        if *n == object_index {
            continue;
        }
        if map.values.raw_dim() != mask.raw_dim() {
            return Err(Error::ShapeMismatch(format!(
                "mask {:?} vs layer {layer} map {:?}",
                mask.dim(),
                map.values.dim()
            )));
        }
        map.values = &map.values * mask;
    }
    Ok(out)
}

/// On-disk dump of one map: a plain-text array file next to an 8-bit
/// grayscale heatmap. Layout `<root>/<step>/<layer>/<token>.{arr,png}`.
pub fn dump_map(root: &Path, map: &AttentionMap) -> Result<(PathBuf, PathBuf)> {
    let dir = root
        .join(map.step.to_string())
        .join(map.layer_id.to_string());
    std::fs::create_dir_all(&dir)?;
    let arr_path = dir.join(format!("{}.arr", map.token_index));
    let png_path = dir.join(format!("{}.png", map.token_index));

    let mut text = format!("{} {}\n", map.values.nrows(), map.values.ncols());
    for row in map.values.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        text.push_str(&cells.join(" "));
        text.push('\n');
    }
    std::fs::write(&arr_path, text)?;

    let unit = map.normalized_unit();
    let r = unit.nrows();
    let gray = image::GrayImage::from_fn(unit.ncols() as u32, r as u32, |x, y| {
        image::Luma([(unit[[y as usize, x as usize]] * 255.0).round() as u8])
    });
    gray.save(&png_path)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok((arr_path, png_path))
}

/// Grayscale heatmap of an arbitrary grid, for mask logging.
pub fn save_heatmap(path: &Path, grid: &ArrayView2<'_, f64>) -> Result<()> {
    let unit = normalize_unit(grid);
    let gray = image::GrayImage::from_fn(unit.ncols() as u32, unit.nrows() as u32, |x, y| {
        image::Luma([(unit[[y as usize, x as usize]] * 255.0).round() as u8])
    });
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    gray.save(path)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}
