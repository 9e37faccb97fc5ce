//! Full-body pose keypoints: the standard 33-landmark layout, detection
//! backends, human boxes and the rasterized hull mask.
//!
//! Real pose estimation sits behind [`KeypointBackend`]; this crate ships a
//! fixture backend (stored annotations, verbatim) and a synthetic backend
//! that fits a canonical skeleton template to the image's luminance
//! structure so toy pipelines have deterministic keypoints to reason over.

use super::BoundingBox;
use crate::error::{Error, Result};
use crate::imaging::PixelImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Landmark names in the standard full-body ordering.
pub const LANDMARK_NAMES: [&str; 33] = [
    "nose",
    "left_eye_inner",
    "left_eye",
    "left_eye_outer",
    "right_eye_inner",
    "right_eye",
    "right_eye_outer",
    "left_ear",
    "right_ear",
    "mouth_left",
    "mouth_right",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_pinky",
    "right_pinky",
    "left_index",
    "right_index",
    "left_thumb",
    "right_thumb",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
    "left_heel",
    "right_heel",
    "left_foot_index",
    "right_foot_index",
];

pub const NUM_LANDMARKS: usize = 33;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub valid: bool,
}

/// Exactly 33 ordered landmarks in normalized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseKeypoints {
    points: Vec<Keypoint>,
    pub source: String,
}

impl PoseKeypoints {
    pub fn new(points: Vec<Keypoint>, source: &str) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::InsufficientKeypoints {
                got: points.len(),
                need: NUM_LANDMARKS,
            });
        }
        for p in points.iter().filter(|p| p.valid) {
            if !(0.0..=1.0).contains(&p.x) || !(0.0..=1.0).contains(&p.y) {
                return Err(Error::ValueOutOfRange(format!(
                    "valid keypoint ({}, {}) outside [0,1]^2",
                    p.x, p.y
                )));
            }
        }
        Ok(Self {
            points,
            source: source.to_string(),
        })
    }

    pub fn points(&self) -> &[Keypoint] {
        &self.points
    }

    pub fn valid_points(&self) -> impl Iterator<Item = &Keypoint> {
        self.points.iter().filter(|p| p.valid)
    }

    /// Serialize for an agent request: one `name: (x, y)` line per valid
    /// landmark.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for (name, p) in LANDMARK_NAMES.iter().zip(&self.points) {
            if p.valid {
                out.push_str(&format!("{name}: ({:.3}, {:.3})\n", p.x, p.y));
            }
        }
        out
    }

    /// Convex hull of the valid keypoints rasterized at `resolution`;
    /// the human mask handed to logging and optional downstream use.
    pub fn hull_mask(&self, resolution: usize) -> Array2<f64> {
        let pts: Vec<(f64, f64)> = self.valid_points().map(|p| (p.x, p.y)).collect();
        let hull = convex_hull(&pts);
        let mut grid = Array2::zeros((resolution, resolution));
        if hull.len() < 3 {
            return grid;
        }
        for i in 0..resolution {
            for j in 0..resolution {
                let cx = (j as f64 + 0.5) / resolution as f64;
                let cy = (i as f64 + 0.5) / resolution as f64;
                if point_in_polygon(cx, cy, &hull) {
                    grid[[i, j]] = 1.0;
                }
            }
        }
        grid
    }
}

/// Tight box over the valid keypoints expanded by `margin` on every edge,
/// clamped to the unit square. Needs at least two valid points.
pub fn human_box(points: &PoseKeypoints, margin: f64) -> Result<BoundingBox> {
    let valid: Vec<&Keypoint> = points.valid_points().collect();
    if valid.len() < 2 {
        return Err(Error::InsufficientKeypoints {
            got: valid.len(),
            need: 2,
        });
    }
    let xs: Vec<f64> = valid.iter().map(|p| p.x).collect();
    let ys: Vec<f64> = valid.iter().map(|p| p.y).collect();
    let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    BoundingBox::new(
        (min(&xs) - margin).max(0.0),
        (min(&ys) - margin).max(0.0),
        (max(&xs) + margin).min(1.0),
        (max(&ys) + margin).min(1.0),
    )
}

/// Pose detector interface; the concrete estimator is deployment-specific.
pub trait KeypointBackend {
    fn id(&self) -> &str;
    fn detect(&self, image: &PixelImage) -> Result<PoseKeypoints>;
}

/// Returns stored annotations verbatim, for tests and replays.
pub struct FixtureBackend {
    annotation: PoseKeypoints,
}

impl FixtureBackend {
    pub fn new(annotation: PoseKeypoints) -> Self {
        Self { annotation }
    }

    /// Load a JSON fixture: a list of 33 `[x, y, valid]` entries.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let raw: Vec<(f64, f64, bool)> = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("keypoint fixture: {e}")))?;
        let points = raw
            .into_iter()
            .map(|(x, y, valid)| Keypoint { x, y, valid })
            .collect();
        Ok(Self {
            annotation: PoseKeypoints::new(points, "fixture")?,
        })
    }
}

impl KeypointBackend for FixtureBackend {
    fn id(&self) -> &str {
        "fixture"
    }

    fn detect(&self, _image: &PixelImage) -> Result<PoseKeypoints> {
        Ok(self.annotation.clone())
    }
}

/// Canonical standing-figure template in a unit box, one entry per
/// landmark. Fitted to the image's luminance-deviation centroid and spread.
const SKELETON_TEMPLATE: [(f64, f64); NUM_LANDMARKS] = [
    (0.50, 0.05), // nose
    (0.46, 0.04),
    (0.44, 0.04),
    (0.42, 0.04),
    (0.54, 0.04),
    (0.56, 0.04),
    (0.58, 0.04),
    (0.38, 0.05), // ears
    (0.62, 0.05),
    (0.46, 0.08), // mouth
    (0.54, 0.08),
    (0.30, 0.20), // shoulders
    (0.70, 0.20),
    (0.22, 0.35), // elbows
    (0.78, 0.35),
    (0.18, 0.50), // wrists
    (0.82, 0.50),
    (0.16, 0.55), // pinkies
    (0.84, 0.55),
    (0.15, 0.54),
    (0.85, 0.54),
    (0.17, 0.53),
    (0.83, 0.53),
    (0.38, 0.52), // hips
    (0.62, 0.52),
    (0.36, 0.72), // knees
    (0.64, 0.72),
    (0.35, 0.90), // ankles
    (0.65, 0.90),
    (0.34, 0.94),
    (0.66, 0.94),
    (0.36, 0.97),
    (0.64, 0.97),
];

/// Fits the skeleton template to wherever the image has structure. A flat
/// image carries no structure and yields `NoHumanDetected`.
pub struct SyntheticBackend;

impl KeypointBackend for SyntheticBackend {
    fn id(&self) -> &str {
        "synthetic"
    }

    fn detect(&self, image: &PixelImage) -> Result<PoseKeypoints> {
        let lum = image.luminance();
        let (h, w) = lum.dim();
        let mean = lum.sum() / lum.len() as f64;
        let dev = lum.mapv(|v| (v - mean).abs());
        let total = dev.sum();
        if total < 1e-9 {
            return Err(Error::NoHumanDetected);
        }
        let mut cx = 0.0;
        let mut cy = 0.0;
        for i in 0..h {
            for j in 0..w {
                let wgt = dev[[i, j]] / total;
                cx += wgt * (j as f64 + 0.5) / w as f64;
                cy += wgt * (i as f64 + 0.5) / h as f64;
            }
        }
        let mut sx = 0.0;
        let mut sy = 0.0;
        for i in 0..h {
            for j in 0..w {
                let wgt = dev[[i, j]] / total;
                sx += wgt * ((j as f64 + 0.5) / w as f64 - cx).powi(2);
                sy += wgt * ((i as f64 + 0.5) / h as f64 - cy).powi(2);
            }
        }
        // half-extents: two standard deviations, kept inside a sane range
        let ex = (2.0 * sx.sqrt()).clamp(0.1, 0.45);
        let ey = (2.0 * sy.sqrt()).clamp(0.1, 0.45);
        let points = SKELETON_TEMPLATE
            .iter()
            .map(|&(tx, ty)| Keypoint {
                x: (cx + (tx - 0.5) * 2.0 * ex).clamp(0.0, 1.0),
                y: (cy + (ty - 0.5) * 2.0 * ey).clamp(0.0, 1.0),
                valid: true,
            })
            .collect();
        PoseKeypoints::new(points, "synthetic")
    }
}

/// Detect keypoints with the given backend.
pub fn detect_keypoints(
    backend: &dyn KeypointBackend,
    image: &PixelImage,
) -> Result<PoseKeypoints> {
    backend.detect(image)
}

pub fn create_backend(
    kind: &str,
    fixture: Option<&Path>,
) -> Result<Box<dyn KeypointBackend>> {
    match kind {
        "synthetic" => Ok(Box::new(SyntheticBackend)),
        "fixture" => {
            let path = fixture.ok_or_else(|| {
                Error::InvalidConfig("keypoints = fixture needs keypoints_fixture = <path>".into())
            })?;
            Ok(Box::new(FixtureBackend::from_file(path)?))
        }
        other => Err(Error::InvalidConfig(format!(
            "unknown keypoint backend {other:?}"
        ))),
    }
}

/// Andrew's monotone chain; returns hull vertices in counter-clockwise
/// order (y growing downward flips orientation, which the containment test
/// does not care about).
fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn point_in_polygon(x: f64, y: f64, polygon: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = polygon.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = polygon[i];
        let (xj, yj) = polygon[j];
        if ((yi > y) != (yj > y)) && (x < (xj - xi) * (y - yi) / (yj - yi) + xi) {
            inside = !inside;
        }
        j = i;
    }
    inside
}
