//! Interaction correction: re-denoise the chosen candidate with
//! box-constrained latent updates and overlap masking until the object
//! lands in the proposed box.
//!
//! Per step, while inside the loss-active window: the object's aggregated
//! cross map is scored against the target box (inner-box, outer-box and
//! corner terms), the loss gradient flows back to the latent through the
//! backbone's VJP, the latent takes one descent step, and the complement
//! of the object map attenuates every other token's attention before the
//! sampler advances.

use crate::agents::{BoundingBox, LayoutSuggestion};
use crate::attention::{apply_inverse_mask, inverse_mask, AttentionMapSet, LayerId};
use crate::backbone::{Backbone, Latent, LatentState, SamplerSchedule};
use crate::coarse::{CandidateImage, DualStreamDriver};
use crate::config::{GuidanceConfig, StageHandoff};
use crate::error::{Error, Result};
use crate::imaging::PixelImage;
use crate::prompt::PromptPair;
use ndarray::Array2;
use std::path::Path;

/// Consecutive loss increases tolerated before the run aborts.
pub const DIVERGENCE_PATIENCE: usize = 10;

/// Loss breakdown of one correction step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxLossReport {
    pub inner: f64,
    pub outer: f64,
    pub corner: f64,
    pub total: f64,
    pub step: usize,
    pub grad_norm: f64,
}

type Cell = (usize, usize);

/// Pick the top `k` cells of a grid by value (ties resolve in scan order).
fn top_cells(values: &Array2<f64>, k: usize) -> Vec<Cell> {
    let mut cells: Vec<(Cell, f64)> = values.indexed_iter().map(|(c, &v)| (c, v)).collect();
    cells.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    cells.into_iter().take(k).map(|(c, _)| c).collect()
}

fn band_indices(r: usize, lo: usize, hi: usize, width: usize) -> Vec<usize> {
    (0..r)
        .filter(|&j| j.abs_diff(lo) <= width || j.abs_diff(hi) <= width)
        .collect()
}

/// A `(max value, argmax index)` pair along one axis.
type AxisMax = (f64, usize);

/// Per-axis maxima of a grid: (column maxima with argmax rows, row maxima
/// with argmax cols). First maximum wins, matching the gradient routing.
fn projections(values: &Array2<f64>) -> (Vec<AxisMax>, Vec<AxisMax>) {
    let (h, w) = values.dim();
    let mut col_max = vec![(f64::NEG_INFINITY, 0usize); w];
    let mut row_max = vec![(f64::NEG_INFINITY, 0usize); h];
    for i in 0..h {
        for j in 0..w {
            let v = values[[i, j]];
            if v > col_max[j].0 {
                col_max[j] = (v, i);
            }
            if v > row_max[i].0 {
                row_max[i] = (v, j);
            }
        }
    }
    (col_max, row_max)
}

/// Box-constraint losses of a unit-normalized object map against a target
/// box, plus the loss gradient with respect to the map.
pub fn box_losses_with_grad(
    unit_map: &Array2<f64>,
    target: &BoundingBox,
    config: &GuidanceConfig,
) -> Result<(BoxLossReport, Array2<f64>)> {
    let r = unit_map.nrows();
    if unit_map.ncols() != r {
        return Err(Error::ShapeMismatch("object map must be square".into()));
    }
    if unit_map.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::ValueOutOfRange(
            "box losses need a unit-normalized map".into(),
        ));
    }
    let indicator = target.rasterize(r)?;
    let (rows, cols) = target.raster_extent(r)?;
    let inside_count = indicator.sum() as usize;
    let outside_count = r * r - inside_count;
    if inside_count == 0 {
        return Err(Error::BoxTooSmall(r));
    }
    let w = &config.loss_weights;
    let mut grad = Array2::<f64>::zeros((r, r));

    // inner box: pull the strongest in-box responses toward 1
    let k_in = ((config.top_fraction * inside_count as f64).ceil() as usize).max(1);
    let masked_in = unit_map * &indicator;
    let in_cells = top_cells(&masked_in, k_in);
    let inner = 1.0 - in_cells.iter().map(|&c| masked_in[c]).sum::<f64>() / k_in as f64;
    for &c in &in_cells {
        grad[c] -= w.inner * indicator[c] / k_in as f64;
    }

    // outer box: push the strongest out-of-box responses toward 0
    let outer = if outside_count == 0 {
        0.0
    } else {
        let k_out = ((config.top_fraction * outside_count as f64).ceil() as usize).max(1);
        let inverse = indicator.mapv(|v| 1.0 - v);
        let masked_out = unit_map * &inverse;
        let out_cells = top_cells(&masked_out, k_out);
        for &c in &out_cells {
            grad[c] += w.outer * inverse[c] / k_out as f64;
        }
        out_cells.iter().map(|&c| masked_out[c]).sum::<f64>() / k_out as f64
    };

    // corner: align per-axis max profiles near the box edges
    let (col_max, row_max) = projections(unit_map);
    let col_band = band_indices(r, *cols.start(), *cols.end(), config.corner_band);
    let row_band = band_indices(r, *rows.start(), *rows.end(), config.corner_band);
    let mut corner = 0.0;
    for &j in &col_band {
        let b = if (*cols.start()..=*cols.end()).contains(&j) {
            1.0
        } else {
            0.0
        };
        let (v, argmax_i) = col_max[j];
        corner += (v - b).abs() / (2.0 * col_band.len() as f64);
        let sign = (v - b).signum();
        grad[[argmax_i, j]] += w.corner * sign / (2.0 * col_band.len() as f64);
    }
    for &i in &row_band {
        let b = if (*rows.start()..=*rows.end()).contains(&i) {
            1.0
        } else {
            0.0
        };
        let (v, argmax_j) = row_max[i];
        corner += (v - b).abs() / (2.0 * row_band.len() as f64);
        let sign = (v - b).signum();
        grad[[i, argmax_j]] += w.corner * sign / (2.0 * row_band.len() as f64);
    }

    let total = w.inner * inner + w.outer * outer + w.corner * corner;
    Ok((
        BoxLossReport {
            inner,
            outer,
            corner,
            total,
            step: 0,
            grad_norm: 0.0,
        },
        grad,
    ))
}

/// Loss-only evaluation.
pub fn box_losses(
    unit_map: &Array2<f64>,
    target: &BoundingBox,
    config: &GuidanceConfig,
) -> Result<BoxLossReport> {
    box_losses_with_grad(unit_map, target, config).map(|(report, _)| report)
}

/// One descent step on the latent; the step index is untouched because the
/// update precedes the sampler step.
pub fn update_latent(state: &LatentState, loss_grad: &Latent, alpha: f64) -> Result<LatentState> {
    if loss_grad.raw_dim() != state.z.raw_dim() {
        return Err(Error::ShapeMismatch("loss gradient shape".into()));
    }
    if !loss_grad.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteGradient(state.t));
    }
    Ok(LatentState {
        z: &state.z - &(loss_grad * alpha),
        t: state.t,
        seed: state.seed,
        stream_tag: state.stream_tag,
    })
}

/// Mean object map over the loss layers (raw values). The same aggregate
/// feeds the box extraction and the correction loss.
pub fn aggregate_object_map(
    maps: &AttentionMapSet,
    layers: &[LayerId],
    object_index: usize,
) -> Result<Array2<f64>> {
    let mut acc: Option<Array2<f64>> = None;
    for layer in layers {
        let map = maps.cross_map(layer, object_index).ok_or_else(|| {
            Error::ResolutionMismatch(format!("layer {layer} missing object token"))
        })?;
        acc = Some(match acc {
            None => map.values.clone(),
            Some(a) => {
                if a.raw_dim() != map.values.raw_dim() {
                    return Err(Error::ResolutionMismatch(
                        "loss layers must share a resolution".into(),
                    ));
                }
                a + &map.values
            }
        });
    }
    let mut agg = acc.ok_or_else(|| Error::ResolutionMismatch("no loss layers".into()))?;
    agg /= layers.len() as f64;
    Ok(agg)
}

/// Aggregate plus its unit normalization and maximum, for gradient
/// chaining.
fn aggregated_object_map(
    maps: &AttentionMapSet,
    layers: &[LayerId],
    object_index: usize,
) -> Result<(Array2<f64>, Array2<f64>, f64)> {
    let agg = aggregate_object_map(maps, layers, object_index)?;
    let max = agg.iter().cloned().fold(0.0_f64, f64::max);
    let unit = if max > 0.0 { &agg / max } else { agg.clone() };
    Ok((unit, agg, max))
}

/// Loss report and full latent gradient for the current state. The object
/// map is taken from the full prompt stream, which the per-token merge
/// leaves untouched for the object token.
pub fn latent_loss_gradient(
    backbone: &dyn Backbone,
    state: &LatentState,
    pair: &PromptPair,
    layers: &[LayerId],
    target: &BoundingBox,
    config: &GuidanceConfig,
) -> Result<(BoxLossReport, Latent)> {
    let embedding = crate::backbone::PromptEmbedding::new(
        pair.full_tokens.clone(),
        crate::attention::Provenance::FullStream,
    );
    let (_, maps) = backbone.predict_noise(state, &embedding, None)?;
    let (unit, agg, max) = aggregated_object_map(&maps, layers, pair.object_index)?;
    let (mut report, grad_unit) = box_losses_with_grad(&unit, target, config)?;
    report.step = state.t;

    // chain through the max normalization: unit = agg / max(agg)
    let grad_agg = if max > 0.0 {
        let argmax = agg
            .indexed_iter()
            .fold(((0, 0), f64::NEG_INFINITY), |best, (c, &v)| {
                if v > best.1 {
                    (c, v)
                } else {
                    best
                }
            })
            .0;
        let dot: f64 = grad_unit
            .indexed_iter()
            .map(|(c, &g)| g * agg[c])
            .sum();
        let mut g = grad_unit.mapv(|v| v / max);
        g[argmax] -= dot / (max * max);
        g
    } else {
        grad_unit
    };

    // spread across layers (aggregate is their mean) and pull back to z
    let per_layer = grad_agg.mapv(|v| v / layers.len() as f64);
    let mut grad_z: Option<Latent> = None;
    for layer in layers {
        let g = backbone.cross_attention_vjp(
            state,
            &embedding,
            layer,
            pair.object_index,
            &per_layer.view(),
        )?;
        grad_z = Some(match grad_z {
            None => g,
            Some(acc) => acc + &g,
        });
    }
    let grad_z = grad_z.expect("layers checked non-empty");
    report.grad_norm = grad_z.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok((report, grad_z))
}

/// Overlap elimination: every non-object token map is attenuated by the
/// complement of that layer's unit-normalized object map.
fn mask_object_overlap(maps: &AttentionMapSet, object_index: usize) -> Result<AttentionMapSet> {
    let mut out = maps.clone();
    for layer in maps.layers() {
        let object_map = maps.cross_map(&layer, object_index).ok_or_else(|| {
            Error::ResolutionMismatch(format!("layer {layer} missing object token"))
        })?;
        let before = object_map.values.clone();
        let mask = inverse_mask(&object_map.normalized_unit().view())?;

        let mut subset = AttentionMapSet::new(maps.step);
        for ((l, n), m) in &out.cross {
            if *l == layer {
                subset.cross.insert((l.clone(), *n), m.clone());
            }
        }
        let masked = apply_inverse_mask(&mask.view(), &subset, object_index)?;
        for (key, m) in masked.cross {
            out.cross.insert(key, m);
        }
        // the object's own map must come through untouched
        assert_eq!(
            out.cross_map(&layer, object_index).unwrap().values,
            before,
            "overlap masking must not attenuate the object map"
        );
    }
    Ok(out)
}

/// Result of a correction (or plain re-render) pass.
#[derive(Debug, Clone)]
pub struct CorrectionOutcome {
    pub image: PixelImage,
    pub trace: Vec<BoxLossReport>,
    pub final_state: LatentState,
    pub final_maps: AttentionMapSet,
}

/// Everything a correction pass needs besides the candidate itself.
pub struct CorrectionContext<'a> {
    pub backbone: &'a dyn Backbone,
    pub config: &'a GuidanceConfig,
    pub substitution: bool,
    pub handoff: StageHandoff,
    /// Layers whose object maps are aggregated for the loss.
    pub loss_layers: Vec<LayerId>,
}

impl<'a> CorrectionContext<'a> {
    pub fn new(backbone: &'a dyn Backbone, config: &'a GuidanceConfig, substitution: bool) -> Self {
        let loss_layers = coarsest_layers(backbone);
        Self {
            backbone,
            config,
            substitution,
            handoff: StageHandoff::SeedReuse,
            loss_layers,
        }
    }

    fn start_state(&self, chosen: &CandidateImage, schedule: &SamplerSchedule) -> Result<LatentState> {
        let steps = schedule.num_steps();
        match self.handoff {
            StageHandoff::SeedReuse => Ok(self.backbone.init_latent(chosen.seed, steps)),
            StageHandoff::LatentContinuation => {
                // forward-noise the candidate's final latent to the top of
                // the long schedule with its own seed noise
                let noise = self.backbone.init_latent(chosen.seed, steps).z;
                let a_top = schedule.alpha_bar(steps)?;
                let z = &(chosen.final_latent.clone() * a_top.sqrt())
                    + &(noise * (1.0 - a_top).sqrt());
                Ok(LatentState {
                    z,
                    t: steps,
                    seed: chosen.seed,
                    stream_tag: crate::attention::Provenance::FullStream,
                })
            }
        }
    }

    fn run_t2(
        &self,
        chosen: &CandidateImage,
        pair: &PromptPair,
        target: Option<&BoundingBox>,
    ) -> Result<CorrectionOutcome> {
        self.run_t2_observed(chosen, pair, target, &mut |_, _| {})
    }

    /// The correction loop with a capture-only observer over the maps each
    /// step used; attention inspection replays runs through this.
    pub fn run_t2_observed(
        &self,
        chosen: &CandidateImage,
        pair: &PromptPair,
        target: Option<&BoundingBox>,
        observer: &mut dyn FnMut(usize, &AttentionMapSet),
    ) -> Result<CorrectionOutcome> {
        let cfg = self.config;
        let driver = DualStreamDriver::new(self.backbone, pair, cfg, self.substitution);
        let schedule = self.backbone.make_schedule(cfg.t2)?;
        let mut state = self.start_state(chosen, &schedule)?;
        state.validate(schedule.num_steps())?;
        let n_active = cfg.active_steps();
        let mut trace = Vec::new();
        let mut last_maps = None;
        let mut streak = 0usize;
        let mut prev_total: Option<f64> = None;

        while state.t > 0 {
            let step_index = cfg.t2 - state.t;
            let substituting = self.substitution && !pair.alignment.is_empty();
            let mut maps = if substituting {
                Some(driver.merged_maps(&state)?)
            } else {
                None
            };

            if let Some(target) = target {
                if step_index < n_active {
                    let alpha = cfg.alpha_schedule.weight(step_index, n_active);
                    let (report, grad) = latent_loss_gradient(
                        self.backbone,
                        &state,
                        pair,
                        &self.loss_layers,
                        target,
                        cfg,
                    )?;
                    trace.push(report);
                    if alpha > 0.0 {
                        state = update_latent(&state, &grad, alpha)?;
                        // recompute on the updated latent, then gate overlap
                        let merged = driver.merged_maps(&state)?;
                        maps = Some(mask_object_overlap(&merged, pair.object_index)?);

                        match prev_total {
                            Some(prev) if report.total > prev => {
                                streak += 1;
                                if streak >= DIVERGENCE_PATIENCE {
                                    return Err(Error::DivergenceDetected(streak));
                                }
                            }
                            _ => streak = 0,
                        }
                        prev_total = Some(report.total);
                    }
                }
            }

            let step = state.t;
            let (next, used) = driver.step_with_maps(&state, maps.as_ref(), &schedule)?;
            state = next;
            observer(step, &used);
            last_maps = Some(used);
        }

        let final_maps = last_maps.ok_or(Error::ScheduleExhausted(0))?;
        Ok(CorrectionOutcome {
            image: self.backbone.decode(&state)?,
            trace,
            final_state: state,
            final_maps,
        })
    }

    /// Plain re-render of a candidate on the long schedule: substitution
    /// only, no losses, no masking. The path the no-changes signal takes.
    pub fn plain_rerender(
        &self,
        chosen: &CandidateImage,
        pair: &PromptPair,
    ) -> Result<CorrectionOutcome> {
        self.run_t2(chosen, pair, None)
    }

    /// Full correction toward the suggested box. Callers bypass this when
    /// the suggestion signals no changes.
    pub fn corrected_generate(
        &self,
        chosen: &CandidateImage,
        suggestion: &LayoutSuggestion,
        pair: &PromptPair,
    ) -> Result<CorrectionOutcome> {
        self.run_t2(chosen, pair, Some(&suggestion.proposed_box))
    }
}

/// Layers at the backbone's two coarsest cross-attention resolutions.
pub fn coarsest_layers(backbone: &dyn Backbone) -> Vec<LayerId> {
    let mut layers = backbone.layers();
    layers.sort_by_key(|l| l.resolution);
    let mut resolutions: Vec<usize> = layers.iter().map(|l| l.resolution).collect();
    resolutions.dedup();
    let keep: Vec<usize> = resolutions.into_iter().take(2).collect();
    layers
        .into_iter()
        .filter(|l| keep.contains(&l.resolution))
        .map(|l| l.id)
        .collect()
}

/// Fraction of the object map's mass inside a box, measured on the maps a
/// run actually used at its final step.
pub fn object_mass_in_box(
    maps: &AttentionMapSet,
    layers: &[LayerId],
    object_index: usize,
    target: &BoundingBox,
) -> Result<f64> {
    let (_, agg, _) = aggregated_object_map(maps, layers, object_index)?;
    let indicator = target.rasterize(agg.nrows())?;
    let total = agg.sum();
    if total <= 0.0 {
        return Ok(0.0);
    }
    Ok((&agg * &indicator).sum() / total)
}

/// Write the per-step loss trace as a CSV table.
pub fn save_loss_trace(path: &Path, trace: &[BoxLossReport]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = String::from("step,loss_inner,loss_outer,loss_corner,total,grad_norm\n");
    for r in trace {
        out.push_str(&format!(
            "{},{:.12},{:.12},{:.12},{:.12},{:.12}\n",
            r.step, r.inner, r.outer, r.corner, r.total, r.grad_norm
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
