//! Coarse candidate generation: dual-stream denoising with per-token
//! attention substitution.
//!
//! Both prompt streams run on the same latent every step so their maps are
//! comparable. Cross maps of tokens that exist in the intransitive prompt
//! are substituted; self maps are substituted wholesale once the step
//! passes the gate. The merged maps are injected back into a full-prompt
//! prediction that drives the trajectory under classifier-free guidance.

use crate::attention::{
    merge_cross_attention, merge_self_attention, AttentionMapSet, Provenance,
};
use crate::backbone::{
    guided_noise, sampler_step, Backbone, LatentState, PromptEmbedding, SamplerSchedule,
};
use crate::config::GuidanceConfig;
use crate::error::{Error, Result};
use crate::imaging::PixelImage;
use crate::prompt::PromptPair;

/// One coarse candidate: preview image, final latent and the merged
/// cross-attention snapshot of its last denoising step.
#[derive(Debug, Clone)]
pub struct CandidateImage {
    pub index: usize,
    pub seed: u64,
    pub preview: PixelImage,
    pub final_latent: crate::backbone::Latent,
    pub final_cross_maps: AttentionMapSet,
    pub prompt_pair: PromptPair,
}

/// Shared step driver for coarse generation and correction.
pub struct DualStreamDriver<'a> {
    pub backbone: &'a dyn Backbone,
    pub pair: &'a PromptPair,
    pub config: &'a GuidanceConfig,
    /// Attention substitution on/off (the plain-backbone ablation).
    pub substitution: bool,
}

impl<'a> DualStreamDriver<'a> {
    pub fn new(
        backbone: &'a dyn Backbone,
        pair: &'a PromptPair,
        config: &'a GuidanceConfig,
        substitution: bool,
    ) -> Self {
        Self {
            backbone,
            pair,
            config,
            substitution,
        }
    }

    pub fn full_embedding(&self) -> PromptEmbedding {
        PromptEmbedding::new(self.pair.full_tokens.clone(), Provenance::FullStream)
    }

    fn intrans_embedding(&self) -> PromptEmbedding {
        PromptEmbedding::new(
            self.pair.intrans_tokens.clone(),
            Provenance::IntransitiveStream,
        )
    }

    /// Capture both streams on the shared latent and merge their maps. With
    /// substitution disabled (or nothing to align) the full stream's maps
    /// come back untouched.
    pub fn merged_maps(&self, state: &LatentState) -> Result<AttentionMapSet> {
        let (_, full_maps) = self
            .backbone
            .predict_noise(state, &self.full_embedding(), None)?;
        if !self.substitution || self.pair.alignment.is_empty() {
            return Ok(full_maps);
        }
        let (_, intrans_maps) = self
            .backbone
            .predict_noise(state, &self.intrans_embedding(), None)?;
        let mut merged =
            merge_cross_attention(&full_maps, &intrans_maps, &self.pair.alignment)?;
        for (layer, full_grid) in &full_maps.self_attention {
            let intrans_grid = intrans_maps.self_attention.get(layer).ok_or_else(|| {
                Error::ResolutionMismatch(format!("intransitive stream missing layer {layer}"))
            })?;
            merged.self_attention.insert(
                layer.clone(),
                merge_self_attention(full_grid, intrans_grid, state.t, self.config.gamma)?,
            );
        }
        Ok(merged)
    }

    /// Advance one step, predicting with the given maps injected (or plain
    /// when `None`) and blending with the unconditional stream.
    pub fn step_with_maps(
        &self,
        state: &LatentState,
        maps: Option<&AttentionMapSet>,
        schedule: &SamplerSchedule,
    ) -> Result<(LatentState, AttentionMapSet)> {
        let (cond, used) = self
            .backbone
            .predict_noise(state, &self.full_embedding(), maps)?;
        let (uncond, _) = self
            .backbone
            .predict_noise(state, &PromptEmbedding::unconditional(), None)?;
        let guided = guided_noise(&cond, &uncond, self.config.cfg_scale)?;
        let next = sampler_step(state, &guided, schedule)?;
        Ok((next, used))
    }

    /// Run a full trajectory from `seed` over `num_steps`, returning the
    /// final state and the maps used at the last step.
    pub fn run(&self, seed: u64, num_steps: usize) -> Result<(LatentState, AttentionMapSet)> {
        self.run_observed(seed, num_steps, &mut |_, _| {})
    }

    /// Same trajectory with a capture-only observer: after each step it
    /// receives the step index and the maps that step used.
    pub fn run_observed(
        &self,
        seed: u64,
        num_steps: usize,
        observer: &mut dyn FnMut(usize, &AttentionMapSet),
    ) -> Result<(LatentState, AttentionMapSet)> {
        let schedule = self.backbone.make_schedule(num_steps)?;
        let mut state = self.backbone.init_latent(seed, num_steps);
        state.validate(schedule.num_steps())?;
        let mut last_maps = None;
        while state.t > 0 {
            let step = state.t;
            let maps = if self.substitution && !self.pair.alignment.is_empty() {
                Some(self.merged_maps(&state)?)
            } else {
                None
            };
            let (next, used) = self.step_with_maps(&state, maps.as_ref(), &schedule)?;
            state = next;
            observer(step, &used);
            last_maps = Some(used);
        }
        let maps = last_maps.ok_or(Error::ScheduleExhausted(0))?;
        Ok((state, maps))
    }
}

/// Generate `k` coarse candidates on the short schedule. Seeds are
/// `base_seed + index`, so candidates differ in their initial noise only.
pub fn generate_candidates(
    pair: &PromptPair,
    config: &GuidanceConfig,
    backbone: &dyn Backbone,
    base_seed: u64,
    substitution: bool,
) -> Result<Vec<CandidateImage>> {
    if config.candidates == 0 {
        return Err(Error::CandidateCountZero);
    }
    let driver = DualStreamDriver::new(backbone, pair, config, substitution);
    let mut out = Vec::with_capacity(config.candidates);
    for index in 0..config.candidates {
        let seed = base_seed + index as u64;
        let (final_state, final_maps) = driver.run(seed, config.t1)?;
        let preview = backbone.decode(&final_state)?;
        out.push(CandidateImage {
            index,
            seed,
            preview,
            final_latent: final_state.z,
            final_cross_maps: final_maps,
            prompt_pair: pair.clone(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::toy::ToyBackbone;
    use crate::prompt::{render_prompts, HoiTriplet, WhitespaceTokenizer};
    use std::collections::BTreeMap;

    fn carry_pair() -> PromptPair {
        let t = HoiTriplet::new("man", "carry", "bicycle").unwrap();
        render_prompts(&t, &WhitespaceTokenizer, &BTreeMap::new()).unwrap()
    }

    fn toy_config() -> GuidanceConfig {
        GuidanceConfig::default()
    }

    #[test]
    fn default_candidate_count_is_five() {
        let bb = ToyBackbone::new();
        let out = generate_candidates(&carry_pair(), &toy_config(), &bb, 100, true).unwrap();
        assert_eq!(out.len(), 5);
        let seeds: Vec<u64> = out.iter().map(|c| c.seed).collect();
        assert_eq!(seeds, vec![100, 101, 102, 103, 104]);
    }

    #[test]
    fn zero_candidates_is_an_error() {
        let bb = ToyBackbone::new();
        let mut cfg = toy_config();
        cfg.candidates = 0;
        assert!(matches!(
            generate_candidates(&carry_pair(), &cfg, &bb, 0, true),
            Err(Error::CandidateCountZero)
        ));
    }

    #[test]
    fn candidates_are_bit_reproducible() {
        let bb = ToyBackbone::new();
        let a = generate_candidates(&carry_pair(), &toy_config(), &bb, 7, true).unwrap();
        let b = generate_candidates(&carry_pair(), &toy_config(), &bb, 7, true).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.preview, y.preview);
            assert_eq!(x.final_cross_maps, y.final_cross_maps);
        }
    }

    #[test]
    fn different_seeds_give_different_candidates() {
        let bb = ToyBackbone::new();
        let out = generate_candidates(&carry_pair(), &toy_config(), &bb, 0, true).unwrap();
        assert_ne!(out[0].preview, out[1].preview);
    }

    #[test]
    fn identity_alignment_degenerates_to_plain_sampling() {
        // Empty object -> full == intransitive -> substitution must not
        // perturb the trajectory at all.
        let bb = ToyBackbone::new();
        let t = HoiTriplet {
            subject: "boy".into(),
            verb: "jump".into(),
            object: String::new(),
            bare_subject: false,
            bare_object: false,
        };
        let pair = render_prompts(&t, &WhitespaceTokenizer, &BTreeMap::new()).unwrap();
        let cfg = toy_config();
        let with = generate_candidates(&pair, &cfg, &bb, 3, true).unwrap();
        let without = generate_candidates(&pair, &cfg, &bb, 3, false).unwrap();
        for (a, b) in with.iter().zip(without.iter()) {
            assert_eq!(a.preview, b.preview);
        }
    }

    #[test]
    fn substitution_changes_the_output_and_off_matches_plain_run() {
        let bb = ToyBackbone::new();
        let pair = carry_pair();
        let cfg = toy_config();
        let on = generate_candidates(&pair, &cfg, &bb, 3, true).unwrap();
        let off = generate_candidates(&pair, &cfg, &bb, 3, false).unwrap();
        assert_ne!(on[0].preview, off[0].preview);

        // substitution off == plain single-stream run of the full prompt
        let driver = DualStreamDriver::new(&bb, &pair, &cfg, false);
        let (state, _) = driver.run(3, cfg.t1).unwrap();
        assert_eq!(bb.decode(&state).unwrap(), off[0].preview);
    }

    #[test]
    fn verb_map_snapshot_comes_from_the_intransitive_stream() {
        let bb = ToyBackbone::new();
        let pair = carry_pair();
        let out = generate_candidates(&pair, &toy_config(), &bb, 9, true).unwrap();
        for cand in &out {
            for layer in cand.final_cross_maps.layers() {
                let verb_map = cand
                    .final_cross_maps
                    .cross_map(&layer, pair.verb_index)
                    .unwrap();
                assert_eq!(verb_map.provenance, Provenance::IntransitiveStream);
                let obj_map = cand
                    .final_cross_maps
                    .cross_map(&layer, pair.object_index)
                    .unwrap();
                assert_eq!(obj_map.provenance, Provenance::FullStream);
            }
        }
    }
}
