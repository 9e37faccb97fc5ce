//! Reasoning agents: pose selection and layout suggestion over a pluggable
//! VLM client, plus the geometric plumbing they need (attention-derived
//! object boxes, pose keypoints, IoU change gate).

pub mod layout;
pub mod otsu;
pub mod parse;
pub mod pose;
pub mod vlm;

pub use layout::{select_pose, suggest_layout, AgentLog};
pub use otsu::extract_object_box;
pub use pose::{detect_keypoints, human_box, KeypointBackend, PoseKeypoints};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        let inside = |v: f64| (0.0..=1.0).contains(&v);
        if ![x_min, y_min, x_max, y_max].iter().all(|&v| inside(v)) {
            return Err(Error::BoxOutOfRange(format!("{b:?} leaves [0,1]")));
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::BoxOutOfRange(format!("{b:?} has non-positive extent")));
        }
        Ok(b)
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let iy = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    /// Cell index ranges covered by the box at resolution `r`
    /// (inclusive, row-major: `(rows, cols)`).
    pub fn raster_extent(&self, r: usize) -> Result<(std::ops::RangeInclusive<usize>, std::ops::RangeInclusive<usize>)> {
        let col_start = (self.x_min * r as f64).floor() as usize;
        let col_end = ((self.x_max * r as f64).ceil() as usize).saturating_sub(1);
        let row_start = (self.y_min * r as f64).floor() as usize;
        let row_end = ((self.y_max * r as f64).ceil() as usize).saturating_sub(1);
        let col_end = col_end.min(r - 1);
        let row_end = row_end.min(r - 1);
        if col_start > col_end || row_start > row_end {
            return Err(Error::BoxTooSmall(r));
        }
        Ok((row_start..=row_end, col_start..=col_end))
    }

    /// Binary indicator grid of the box at resolution `r`.
    pub fn rasterize(&self, r: usize) -> Result<ndarray::Array2<f64>> {
        let (rows, cols) = self.raster_extent(r)?;
        let mut grid = ndarray::Array2::zeros((r, r));
        for i in rows {
            for j in cols.clone() {
                grid[[i, j]] = 1.0;
            }
        }
        Ok(grid)
    }
}

/// True when the agent's proposed box differs enough from the extracted
/// one to warrant correction: `IoU < threshold` (strictly).
pub fn change_gate(extracted: &BoundingBox, proposed: &BoundingBox, threshold: f64) -> bool {
    extracted.iou(proposed) < threshold
}

/// The layout agent's verdict for one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSuggestion {
    pub extracted_box: BoundingBox,
    pub proposed_box: BoundingBox,
    pub needs_correction: bool,
    pub rationale: String,
    pub visual_attributes: Vec<(String, String)>,
}

impl LayoutSuggestion {
    /// `needs_correction` is derived here from the change gate, so the
    /// invariant `!needs_correction => IoU >= threshold` holds by
    /// construction.
    pub fn new(
        extracted_box: BoundingBox,
        proposed_box: BoundingBox,
        threshold: f64,
        rationale: String,
        visual_attributes: Vec<(String, String)>,
    ) -> Self {
        Self {
            extracted_box,
            proposed_box,
            needs_correction: change_gate(&extracted_box, &proposed_box, threshold),
            rationale,
            visual_attributes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_invariants() {
        assert!(BoundingBox::new(0.2, 0.2, 0.6, 0.8).is_ok());
        assert!(BoundingBox::new(0.6, 0.2, 0.2, 0.8).is_err());
        assert!(BoundingBox::new(-0.1, 0.2, 0.6, 0.8).is_err());
        assert!(BoundingBox::new(0.2, 0.2, 1.1, 0.8).is_err());
    }

    #[test]
    fn iou_identical_and_disjoint() {
        let a = BoundingBox::new(0.1, 0.1, 0.5, 0.5).unwrap();
        let b = BoundingBox::new(0.6, 0.6, 0.9, 0.9).unwrap();
        assert!((a.iou(&a) - 1.0).abs() < 1e-12);
        assert_eq!(a.iou(&b), 0.0);
    }

    #[test]
    fn gate_is_strict_less_than() {
        let a = BoundingBox::new(0.0, 0.0, 0.5, 1.0).unwrap();
        let b = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let iou = a.iou(&b); // exactly 0.5
        assert!((iou - 0.5).abs() < 1e-12);
        assert!(!change_gate(&a, &b, 0.5)); // at threshold: no correction
        assert!(change_gate(&a, &b, 0.5 + 1e-9));
        assert!(!change_gate(&a, &a, 1.0)); // identical boxes never trigger
        let c = BoundingBox::new(0.6, 0.6, 0.9, 0.9).unwrap();
        assert!(change_gate(&a, &c, 1e-6)); // disjoint always triggers
    }

    #[test]
    fn suggestion_invariant_holds_by_construction() {
        let a = BoundingBox::new(0.1, 0.1, 0.5, 0.5).unwrap();
        let s = LayoutSuggestion::new(a, a, 0.8, String::new(), vec![]);
        assert!(!s.needs_correction);
        assert!(s.extracted_box.iou(&s.proposed_box) >= 0.8);
    }

    #[test]
    fn rasterize_tight_block() {
        let b = BoundingBox::new(0.25, 0.25, 0.75, 0.75).unwrap();
        let g = b.rasterize(4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let inside = (1..=2).contains(&i) && (1..=2).contains(&j);
                assert_eq!(g[[i, j]], if inside { 1.0 } else { 0.0 });
            }
        }
    }
}
