//! Denoising backbone contract: attention capture/override hooks, a
//! deterministic sampler, classifier-free guidance and latent decode.
//!
//! The [`Backbone`] trait is the adapter surface for any latent-diffusion
//! runtime. This crate ships [`toy::ToyBackbone`], a fully specified
//! closed-form implementation small enough for every pipeline behavior to
//! be asserted exactly; a real model adapter implements the same trait.

pub mod toy;

use crate::attention::{AttentionMapSet, LayerId, Provenance};
use crate::error::{Error, Result};
use crate::imaging::PixelImage;
use ndarray::{Array3, ArrayView2};
use serde::{Deserialize, Serialize};

pub type Latent = Array3<f64>;

/// Noisy latent plus its position in the schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Latent,
    /// Denoising step; counts down from the schedule length to 0.
    pub t: usize,
    pub seed: u64,
    pub stream_tag: Provenance,
}

impl LatentState {
    pub fn validate(&self, schedule_len: usize) -> Result<()> {
        if self.t > schedule_len {
            return Err(Error::ScheduleExhausted(self.t));
        }
        if !self.z.iter().all(|v| v.is_finite()) {
            return Err(Error::BackboneFailure("non-finite latent".into()));
        }
        Ok(())
    }
}

/// Deterministic sampler schedule. `alphas_bar[t-1]` is the cumulative
/// signal fraction at step `t`; step 0 is fully denoised by convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSchedule {
    pub alphas_bar: Vec<f64>,
    pub eta: f64,
}

impl SamplerSchedule {
    pub fn new(alphas_bar: Vec<f64>, eta: f64) -> Result<Self> {
        if alphas_bar.is_empty() {
            return Err(Error::InvalidConfig("empty schedule".into()));
        }
        if alphas_bar[0] > 1.0 {
            return Err(Error::InvalidConfig("alpha_bar must start <= 1".into()));
        }
        if alphas_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidConfig(
                "alphas_bar must be strictly decreasing".into(),
            ));
        }
        if alphas_bar.iter().any(|&a| a <= 0.0) {
            return Err(Error::InvalidConfig("alpha_bar must stay positive".into()));
        }
        Ok(Self { alphas_bar, eta })
    }

    /// Linear ramp used by the toy backbone: `num_steps` values from 0.99
    /// down to 0.05.
    pub fn linear(num_steps: usize) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::InvalidConfig("schedule needs at least 1 step".into()));
        }
        let (hi, lo) = (0.99, 0.05);
        let alphas = if num_steps == 1 {
            vec![hi]
        } else {
            (0..num_steps)
                .map(|i| hi - (hi - lo) * i as f64 / (num_steps - 1) as f64)
                .collect()
        };
        Self::new(alphas, 0.0)
    }

    pub fn num_steps(&self) -> usize {
        self.alphas_bar.len()
    }

    /// Cumulative signal fraction at step `t`; 1 at t = 0.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.alphas_bar
            .get(t - 1)
            .copied()
            .ok_or(Error::ScheduleExhausted(t))
    }
}

/// Classifier-free guidance blend: `uncond + s * (cond - uncond)`.
pub fn guided_noise(cond: &Latent, uncond: &Latent, scale: f64) -> Result<Latent> {
    if cond.raw_dim() != uncond.raw_dim() {
        return Err(Error::ShapeMismatch(format!(
            "cond {:?} vs uncond {:?}",
            cond.dim(),
            uncond.dim()
        )));
    }
    Ok(uncond + &((cond - uncond) * scale))
}

/// One deterministic sampler step (eta = 0): project the clean estimate and
/// re-noise at the previous level.
pub fn sampler_step(
    state: &LatentState,
    noise_estimate: &Latent,
    schedule: &SamplerSchedule,
) -> Result<LatentState> {
    if state.t == 0 {
        return Err(Error::ScheduleExhausted(0));
    }
    if noise_estimate.raw_dim() != state.z.raw_dim() {
        return Err(Error::ShapeMismatch("noise estimate shape".into()));
    }
    let a_t = schedule.alpha_bar(state.t)?;
    let a_prev = schedule.alpha_bar(state.t - 1)?;
    let x0 = (&state.z - &(noise_estimate * (1.0 - a_t).sqrt())) / a_t.sqrt();
    let z_prev = &(x0 * a_prev.sqrt()) + &(noise_estimate * (1.0 - a_prev).sqrt());
    Ok(LatentState {
        z: z_prev,
        t: state.t - 1,
        seed: state.seed,
        stream_tag: state.stream_tag,
    })
}

/// Tokenized prompt handed to a backbone, tagged with the stream it
/// represents so captured maps carry provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptEmbedding {
    pub tokens: Vec<String>,
    pub provenance: Provenance,
}

impl PromptEmbedding {
    pub fn new(tokens: Vec<String>, provenance: Provenance) -> Self {
        Self { tokens, provenance }
    }

    /// The empty-prompt embedding used as the single unconditional stream.
    pub fn unconditional() -> Self {
        Self {
            tokens: vec![String::new()],
            provenance: Provenance::FullStream,
        }
    }
}

/// A cross- or self-attention layer exposed by a backbone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerInfo {
    pub id: LayerId,
    pub resolution: usize,
}

/// Adapter surface for a denoising model.
///
/// `predict_noise` returns the conditional noise estimate together with the
/// attention maps that were actually used: freshly computed ones unless the
/// caller supplied overrides, in which case the overriding maps replace the
/// matching computed entries before they weight the values. Capture is
/// side-effect free; a run that ignores the returned maps is bit-identical
/// to one that stores them.
pub trait Backbone {
    fn id(&self) -> &'static str;
    fn latent_shape(&self) -> (usize, usize, usize);
    fn layers(&self) -> Vec<LayerInfo>;
    fn make_schedule(&self, num_steps: usize) -> Result<SamplerSchedule>;
    fn init_latent(&self, seed: u64, num_steps: usize) -> LatentState;

    fn predict_noise(
        &self,
        state: &LatentState,
        prompt: &PromptEmbedding,
        overrides: Option<&AttentionMapSet>,
    ) -> Result<(Latent, AttentionMapSet)>;

    fn decode(&self, state: &LatentState) -> Result<PixelImage>;

    /// Vector-Jacobian product of one cross-attention token map with respect
    /// to the latent: given `dLoss/dA[:, token]` as a spatial grid, return
    /// `dLoss/dz`. Gradient-based correction needs exactly this hook; a real
    /// adapter backs it with autograd.
    fn cross_attention_vjp(
        &self,
        state: &LatentState,
        prompt: &PromptEmbedding,
        layer: &LayerId,
        token_index: usize,
        upstream: &ArrayView2<'_, f64>,
    ) -> Result<Latent>;
}

/// Instantiate a backbone by config key. `model` and `device` are passed
/// through to adapters; the toy backbone ignores both.
pub fn create(kind: &str, model: &str, device: &str) -> Result<Box<dyn Backbone>> {
    match kind {
        "toy" => Ok(Box::new(toy::ToyBackbone::new())),
        "ldm-adapter" => Err(Error::BackboneFailure(format!(
            "no latent-diffusion adapter is linked into this build (requested \
             model {model:?} on device {device:?}); implement the Backbone \
             trait against your model runtime and register it here"
        ))),
        other => Err(Error::InvalidConfig(format!("unknown backbone {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn guidance_is_identity_at_scale_one() {
        let cond = Array3::from_elem((1, 2, 2), 3.0);
        let uncond = Array3::from_elem((1, 2, 2), 1.0);
        assert_eq!(guided_noise(&cond, &uncond, 1.0).unwrap(), cond);
    }

    #[test]
    fn guidance_collapses_when_streams_agree() {
        let cond = Array3::from_elem((1, 2, 2), 0.7);
        for s in [0.0, 1.0, 7.5, 100.0] {
            assert_eq!(guided_noise(&cond, &cond, s).unwrap(), cond);
        }
    }

    #[test]
    fn guidance_is_linear_in_scale() {
        let cond = Array3::from_shape_fn((1, 2, 2), |(_, i, j)| (i + 2 * j) as f64);
        let uncond = Array3::from_elem((1, 2, 2), 0.25);
        let g = |s| guided_noise(&cond, &uncond, s).unwrap();
        let (g1, g2, g3) = (g(1.0), g(2.0), g(3.0));
        // three-point collinearity: g3 - g2 == g2 - g1
        let lhs = &g3 - &g2;
        let rhs = &g2 - &g1;
        for (a, b) in lhs.iter().zip(rhs.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sampler_fixed_point_when_alpha_constant() {
        // alpha_bar(t-1) == alpha_bar(t) and zero noise leave z unchanged.
        // The constructor enforces strict decrease, so build the degenerate
        // schedule directly.
        let sched = SamplerSchedule {
            alphas_bar: vec![0.5, 0.5],
            eta: 0.0,
        };
        let state = LatentState {
            z: Array3::from_elem((1, 1, 1), 1.25),
            t: 2,
            seed: 0,
            stream_tag: crate::attention::Provenance::FullStream,
        };
        let noise = Array3::zeros((1, 1, 1));
        let next = sampler_step(&state, &noise, &sched).unwrap();
        assert!((next.z[[0, 0, 0]] - 1.25).abs() < 1e-12);
        assert_eq!(next.t, 1);
    }

    #[test]
    fn sampler_hand_arithmetic() {
        // alpha_t = 0.25, alpha_prev = 1, z = 1, eps = 0.5:
        // x0 = (1 - sqrt(0.75)*0.5) / 0.5, z' = x0
        let sched = SamplerSchedule::new(vec![0.25], 0.0).unwrap();
        let state = LatentState {
            z: Array3::from_elem((1, 1, 1), 1.0),
            t: 1,
            seed: 0,
            stream_tag: crate::attention::Provenance::FullStream,
        };
        let noise = Array3::from_elem((1, 1, 1), 0.5);
        let next = sampler_step(&state, &noise, &sched).unwrap();
        let want = (1.0 - 0.75_f64.sqrt() * 0.5) / 0.25_f64.sqrt();
        assert!((next.z[[0, 0, 0]] - want).abs() < 1e-12);
        assert_eq!(next.t, 0);
    }

    #[test]
    fn sampler_rejects_exhausted_state() {
        let sched = SamplerSchedule::linear(4).unwrap();
        let state = LatentState {
            z: Array3::zeros((1, 1, 1)),
            t: 0,
            seed: 0,
            stream_tag: crate::attention::Provenance::FullStream,
        };
        assert!(matches!(
            sampler_step(&state, &Array3::zeros((1, 1, 1)), &sched),
            Err(Error::ScheduleExhausted(0))
        ));
    }

    #[test]
    fn linear_schedule_shape() {
        let s = SamplerSchedule::linear(10).unwrap();
        assert_eq!(s.num_steps(), 10);
        assert!((s.alpha_bar(1).unwrap() - 0.99).abs() < 1e-12);
        assert!((s.alpha_bar(10).unwrap() - 0.05).abs() < 1e-12);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        assert!(s.alpha_bar(11).is_err());
    }

    #[test]
    fn unknown_backbone_kind_is_rejected() {
        assert!(create("toy", "", "").is_ok());
        assert!(create("ldm-adapter", "some-model", "cuda:0").is_err());
        assert!(create("imaginary", "", "").is_err());
    }
}
