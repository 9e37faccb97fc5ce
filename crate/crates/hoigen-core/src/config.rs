//! Guidance hyper-parameters and run configuration.
//!
//! Run configs are flat `key = value` text (see `docs/config.md`); CLI
//! flags override file values. Snapshots serialize back to the same flat
//! form so a manifest reproduces its run exactly.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;

/// Per-step weight schedule for the latent update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AlphaSchedule {
    /// Linear decay from `alpha_max` to 0 across the active window.
    LinearDecay { alpha_max: f64 },
}

impl AlphaSchedule {
    /// Weight for the `index`-th active step out of `active_steps`.
    pub fn weight(&self, index: usize, active_steps: usize) -> f64 {
        match self {
            AlphaSchedule::LinearDecay { alpha_max } => {
                if active_steps == 0 {
                    0.0
                } else {
                    alpha_max * (1.0 - index as f64 / active_steps as f64)
                }
            }
        }
    }

    pub fn alpha_max(&self) -> f64 {
        match self {
            AlphaSchedule::LinearDecay { alpha_max } => *alpha_max,
        }
    }
}

/// Weights of the three box-constraint terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub inner: f64,
    pub outer: f64,
    pub corner: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            inner: 1.0,
            outer: 1.0,
            corner: 1.0,
        }
    }
}

/// Denoising and correction hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Steps of the coarse candidate schedule.
    pub t1: usize,
    /// Steps of the correction schedule.
    pub t2: usize,
    /// Candidate count k.
    pub candidates: usize,
    /// Self-attention substitution gate: active while t > gamma.
    pub gamma: usize,
    /// Classifier-free guidance scale.
    pub cfg_scale: f64,
    pub alpha_schedule: AlphaSchedule,
    pub loss_weights: LossWeights,
    /// IoU below which the layout agent's box triggers correction.
    pub change_threshold: f64,
    /// Fraction of the correction schedule with active latent updates.
    pub loss_active_fraction: f64,
    /// Top-value fraction used by the inner/outer box losses.
    pub top_fraction: f64,
    /// Corner-loss band half-width in cells.
    pub corner_band: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            t1: 10,
            t2: 50,
            candidates: 5,
            gamma: 5,
            cfg_scale: 7.5,
            alpha_schedule: AlphaSchedule::LinearDecay { alpha_max: 20.0 },
            loss_weights: LossWeights::default(),
            change_threshold: 0.8,
            loss_active_fraction: 0.6,
            top_fraction: 0.2,
            corner_band: 2,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t1 > self.t2 {
            return Err(Error::InvalidConfig(format!(
                "t1 ({}) must not exceed t2 ({})",
                self.t1, self.t2
            )));
        }
        if self.t1 == 0 {
            return Err(Error::InvalidConfig("t1 must be positive".into()));
        }
        if self.candidates == 0 {
            return Err(Error::InvalidConfig("candidates must be >= 1".into()));
        }
        if self.cfg_scale < 1.0 {
            return Err(Error::InvalidConfig("cfg_scale must be >= 1".into()));
        }
        let w = self.loss_weights;
        if w.inner < 0.0 || w.outer < 0.0 || w.corner < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.change_threshold) {
            return Err(Error::InvalidConfig("change_threshold in [0, 1]".into()));
        }
        if !(self.loss_active_fraction > 0.0 && self.loss_active_fraction <= 1.0) {
            return Err(Error::InvalidConfig(
                "loss_active_fraction in (0, 1]".into(),
            ));
        }
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(Error::InvalidConfig("top_fraction in (0, 1]".into()));
        }
        if self.alpha_schedule.alpha_max() < 0.0 {
            return Err(Error::InvalidConfig("alpha_max must be >= 0".into()));
        }
        Ok(())
    }

    /// Number of correction steps with active latent updates.
    pub fn active_steps(&self) -> usize {
        (self.loss_active_fraction * self.t2 as f64).ceil() as usize
    }
}

/// How the correction stage continues from the chosen candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageHandoff {
    /// Restart the long schedule from the candidate's initial noise seed.
    SeedReuse,
    /// Continue from the candidate's final latent.
    LatentContinuation,
}

/// Full run configuration: guidance plus provider selection and artifact
/// layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub guidance: GuidanceConfig,
    pub backbone: String,
    /// Model identifier handed to a backbone adapter; the toy ignores it.
    pub backbone_model: String,
    /// Device string handed to a backbone adapter.
    pub backbone_device: String,
    pub vlm: String,
    pub embedder: String,
    pub keypoints: String,
    pub seed: u64,
    pub substitution: bool,
    pub modules: ModuleSet,
    pub stage_handoff: StageHandoff,
    pub out_root: PathBuf,
    pub workers: usize,
    /// Margin added around the keypoint-tight human box.
    pub human_box_margin: f64,
    pub gerund_overrides: BTreeMap<String, String>,
    pub mock_pose_reply: Option<String>,
    pub mock_layout_reply: Option<String>,
    pub vlm_cache_dir: Option<PathBuf>,
    pub vlm_min_interval_ms: u64,
    pub vlm_retries: usize,
    pub fewshot_dir: Option<PathBuf>,
    pub keypoints_fixture: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            guidance: GuidanceConfig::default(),
            backbone: "toy".into(),
            backbone_model: String::new(),
            backbone_device: "cpu".into(),
            vlm: "mock".into(),
            embedder: "none".into(),
            keypoints: "synthetic".into(),
            seed: 0,
            substitution: true,
            modules: ModuleSet::Full,
            stage_handoff: StageHandoff::SeedReuse,
            out_root: PathBuf::from("runs"),
            workers: 1,
            human_box_margin: 0.05,
            gerund_overrides: BTreeMap::new(),
            mock_pose_reply: None,
            mock_layout_reply: None,
            vlm_cache_dir: None,
            vlm_min_interval_ms: 0,
            vlm_retries: 2,
            fewshot_dir: None,
            keypoints_fixture: None,
        }
    }
}

/// Which pipeline modules a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModuleSet {
    /// Coarse generation only.
    Generate,
    /// Generation plus agent reasoning; the chosen candidate is re-rendered
    /// without correction.
    GenerateReason,
    /// The full pipeline.
    Full,
}

impl ModuleSet {
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
        match parts.as_slice() {
            ["g"] => Ok(ModuleSet::Generate),
            ["g", "r"] => Ok(ModuleSet::GenerateReason),
            ["g", "r", "c"] => Ok(ModuleSet::Full),
            _ => Err(Error::InvalidConfig(format!(
                "modules must be g | g,r | g,r,c (got {s:?})"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ModuleSet::Generate => "g",
            ModuleSet::GenerateReason => "g,r",
            ModuleSet::Full => "g,r,c",
        }
    }

    pub fn reasoning(&self) -> bool {
        !matches!(self, ModuleSet::Generate)
    }

    pub fn correction(&self) -> bool {
        matches!(self, ModuleSet::Full)
    }
}

/// Parse flat `key = value` text; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("line {}: expected key = value", lineno + 1))
        })?;
        out.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(out)
}

fn parse_typed<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::InvalidConfig(format!("bad value for {key}: {value:?}")))
}

impl RunConfig {
    /// Apply a parsed key/value map on top of the current values.
    pub fn apply(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (key, value) in kv {
            match key.as_str() {
                "t1" => self.guidance.t1 = parse_typed(key, value)?,
                "t2" => self.guidance.t2 = parse_typed(key, value)?,
                "candidates" | "k" => self.guidance.candidates = parse_typed(key, value)?,
                "gamma" => self.guidance.gamma = parse_typed(key, value)?,
                "cfg_scale" => self.guidance.cfg_scale = parse_typed(key, value)?,
                "alpha_max" => {
                    self.guidance.alpha_schedule = AlphaSchedule::LinearDecay {
                        alpha_max: parse_typed(key, value)?,
                    }
                }
                "w_ib" => self.guidance.loss_weights.inner = parse_typed(key, value)?,
                "w_ob" => self.guidance.loss_weights.outer = parse_typed(key, value)?,
                "w_cc" => self.guidance.loss_weights.corner = parse_typed(key, value)?,
                "change_threshold" => {
                    self.guidance.change_threshold = parse_typed(key, value)?
                }
                "loss_active_fraction" => {
                    self.guidance.loss_active_fraction = parse_typed(key, value)?
                }
                "top_fraction" => self.guidance.top_fraction = parse_typed(key, value)?,
                "corner_band" => self.guidance.corner_band = parse_typed(key, value)?,
                "backbone" => self.backbone = value.clone(),
                "backbone_model" => self.backbone_model = value.clone(),
                "backbone_device" => self.backbone_device = value.clone(),
                "vlm" => self.vlm = value.clone(),
                "embedder" => self.embedder = value.clone(),
                "keypoints" => self.keypoints = value.clone(),
                "seed" => self.seed = parse_typed(key, value)?,
                "substitution" => self.substitution = parse_typed(key, value)?,
                "modules" => self.modules = ModuleSet::parse(value)?,
                "stage_handoff" => {
                    self.stage_handoff = match value.as_str() {
                        "seed-reuse" => StageHandoff::SeedReuse,
                        "latent-continuation" => StageHandoff::LatentContinuation,
                        other => {
                            return Err(Error::InvalidConfig(format!(
                                "stage_handoff must be seed-reuse | latent-continuation \
                                 (got {other:?})"
                            )))
                        }
                    }
                }
                "out" => self.out_root = PathBuf::from(value),
                "workers" => self.workers = parse_typed(key, value)?,
                "human_box_margin" => self.human_box_margin = parse_typed(key, value)?,
                "gerund_overrides" => {
                    self.gerund_overrides.clear();
                    for entry in value.split(',').filter(|e| !e.trim().is_empty()) {
                        let (base, ger) = entry.split_once(':').ok_or_else(|| {
                            Error::InvalidConfig(format!(
                                "gerund_overrides entries are base:gerund (got {entry:?})"
                            ))
                        })?;
                        self.gerund_overrides
                            .insert(base.trim().to_string(), ger.trim().to_string());
                    }
                }
                "mock_pose_reply" => self.mock_pose_reply = Some(value.clone()),
                "mock_layout_reply" => self.mock_layout_reply = Some(value.clone()),
                "vlm_cache_dir" => self.vlm_cache_dir = Some(PathBuf::from(value)),
                "vlm_min_interval_ms" => self.vlm_min_interval_ms = parse_typed(key, value)?,
                "vlm_retries" => self.vlm_retries = parse_typed(key, value)?,
                "fewshot_dir" => self.fewshot_dir = Some(PathBuf::from(value)),
                "keypoints_fixture" => self.keypoints_fixture = Some(PathBuf::from(value)),
                other => {
                    return Err(Error::InvalidConfig(format!("unknown config key {other:?}")))
                }
            }
        }
        self.guidance.validate()?;
        if self.workers == 0 {
            return Err(Error::InvalidConfig("workers must be >= 1".into()));
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &std::path::Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply(&parse_kv(&text)?)
    }

    /// Canonical flat snapshot; feeding it back through [`RunConfig::apply`]
    /// reproduces this config.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        let g = &self.guidance;
        kv.insert("t1".into(), g.t1.to_string());
        kv.insert("t2".into(), g.t2.to_string());
        kv.insert("candidates".into(), g.candidates.to_string());
        kv.insert("gamma".into(), g.gamma.to_string());
        kv.insert("cfg_scale".into(), format!("{}", g.cfg_scale));
        kv.insert("alpha_max".into(), format!("{}", g.alpha_schedule.alpha_max()));
        kv.insert("w_ib".into(), format!("{}", g.loss_weights.inner));
        kv.insert("w_ob".into(), format!("{}", g.loss_weights.outer));
        kv.insert("w_cc".into(), format!("{}", g.loss_weights.corner));
        kv.insert("change_threshold".into(), format!("{}", g.change_threshold));
        kv.insert(
            "loss_active_fraction".into(),
            format!("{}", g.loss_active_fraction),
        );
        kv.insert("top_fraction".into(), format!("{}", g.top_fraction));
        kv.insert("corner_band".into(), g.corner_band.to_string());
        kv.insert("backbone".into(), self.backbone.clone());
        if !self.backbone_model.is_empty() {
            kv.insert("backbone_model".into(), self.backbone_model.clone());
        }
        kv.insert("backbone_device".into(), self.backbone_device.clone());
        kv.insert("vlm".into(), self.vlm.clone());
        kv.insert("embedder".into(), self.embedder.clone());
        kv.insert("keypoints".into(), self.keypoints.clone());
        kv.insert("seed".into(), self.seed.to_string());
        kv.insert("substitution".into(), self.substitution.to_string());
        kv.insert("modules".into(), self.modules.as_str().to_string());
        kv.insert(
            "stage_handoff".into(),
            match self.stage_handoff {
                StageHandoff::SeedReuse => "seed-reuse".into(),
                StageHandoff::LatentContinuation => "latent-continuation".into(),
            },
        );
        kv.insert("out".into(), self.out_root.display().to_string());
        kv.insert("workers".into(), self.workers.to_string());
        kv.insert(
            "human_box_margin".into(),
            format!("{}", self.human_box_margin),
        );
        if !self.gerund_overrides.is_empty() {
            let entries: Vec<String> = self
                .gerund_overrides
                .iter()
                .map(|(b, g)| format!("{b}:{g}"))
                .collect();
            kv.insert("gerund_overrides".into(), entries.join(","));
        }
        if let Some(v) = &self.mock_pose_reply {
            kv.insert("mock_pose_reply".into(), v.clone());
        }
        if let Some(v) = &self.mock_layout_reply {
            kv.insert("mock_layout_reply".into(), v.clone());
        }
        if let Some(v) = &self.vlm_cache_dir {
            kv.insert("vlm_cache_dir".into(), v.display().to_string());
        }
        kv.insert(
            "vlm_min_interval_ms".into(),
            self.vlm_min_interval_ms.to_string(),
        );
        kv.insert("vlm_retries".into(), self.vlm_retries.to_string());
        if let Some(v) = &self.fewshot_dir {
            kv.insert("fewshot_dir".into(), v.display().to_string());
        }
        if let Some(v) = &self.keypoints_fixture {
            kv.insert("keypoints_fixture".into(), v.display().to_string());
        }
        kv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let g = GuidanceConfig::default();
        assert_eq!(g.t1, 10);
        assert_eq!(g.t2, 50);
        assert_eq!(g.candidates, 5);
        assert_eq!(g.gamma, 5);
        assert!((g.cfg_scale - 7.5).abs() < f64::EPSILON);
        g.validate().unwrap();
    }

    #[test]
    fn kv_parsing_handles_comments_and_blank_lines() {
        let kv = parse_kv("# header\n t1 = 4 \n\nseed = 9 # trailing\n").unwrap();
        assert_eq!(kv["t1"], "4");
        assert_eq!(kv["seed"], "9");
        assert_eq!(kv.len(), 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        let kv = parse_kv("nope = 1").unwrap();
        assert!(cfg.apply(&kv).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = RunConfig::default();
        let kv = parse_kv("t1 = 4\nt2 = 8\ncandidates = 2\nseed = 77\nmodules = g,r").unwrap();
        cfg.apply(&kv).unwrap();
        let mut rebuilt = RunConfig::default();
        rebuilt.apply(&cfg.snapshot()).unwrap();
        assert_eq!(cfg, rebuilt);
    }

    #[test]
    fn invariants_are_enforced() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply(&parse_kv("t1 = 60").unwrap()).is_err()); // t1 > t2
        let mut cfg2 = RunConfig::default();
        assert!(cfg2.apply(&parse_kv("cfg_scale = 0.5").unwrap()).is_err());
        let mut cfg3 = RunConfig::default();
        assert!(cfg3.apply(&parse_kv("candidates = 0").unwrap()).is_err());
    }

    #[test]
    fn module_set_parsing() {
        assert_eq!(ModuleSet::parse("g").unwrap(), ModuleSet::Generate);
        assert_eq!(ModuleSet::parse("g,r").unwrap(), ModuleSet::GenerateReason);
        assert_eq!(ModuleSet::parse("g, r, c").unwrap(), ModuleSet::Full);
        assert!(ModuleSet::parse("r,c").is_err());
    }

    #[test]
    fn alpha_schedule_decays_linearly_to_zero() {
        let s = AlphaSchedule::LinearDecay { alpha_max: 20.0 };
        assert!((s.weight(0, 10) - 20.0).abs() < 1e-12);
        assert!((s.weight(5, 10) - 10.0).abs() < 1e-12);
        assert!(s.weight(9, 10) > 0.0);
        assert_eq!(s.weight(10, 10), 0.0);
    }
}
