//! Deterministic toy denoiser.
//!
//! The forward pass is a closed-form function of the latent and the token
//! strings, so every attention manipulation has an exactly checkable
//! effect:
//!
//! - latent 4 x 8 x 8,
//! - token key/value embeddings: per-token hash-seeded normal vectors
//!   (d = 16),
//! - one cross-attention layer at 8 x 8: `Q = Wq z_p` per position,
//!   `A = softmax(Q K^T / sqrt(d))`,
//! - self-attention at the same resolution from the latent queries,
//! - noise estimate: self-mixed, attention-weighted token values projected
//!   back to latent channels,
//! - decode: affine map of latent channels around mid-gray.

use super::{Backbone, Latent, LatentState, LayerInfo, PromptEmbedding, SamplerSchedule};
use crate::attention::{
    compute_attention, AttentionMap, AttentionMapSet, LayerId, Provenance, QkInputs,
};
use crate::error::{Error, Result};
use crate::imaging::{fnv1a64, PixelImage};
use ndarray::{Array2, Array3, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const CHANNELS: usize = 4;
pub const RESOLUTION: usize = 8;
pub const EMBED_DIM: usize = 16;
const POSITIONS: usize = RESOLUTION * RESOLUTION;
const LAYER_NAME: &str = "cross8";

// Salts separating the deterministic weight streams.
const SALT_KEY: u64 = 0x6b65795f73616c74;
const SALT_VALUE: u64 = 0x76616c5f73616c74;
const SALT_WQ: u64 = 0x77715f5f73616c74;
const SALT_WO: u64 = 0x776f5f5f73616c74;
const SALT_WD: u64 = 0x77645f5f73616c74;

fn seeded_matrix(seed: u64, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v * scale
    })
}

pub struct ToyBackbone {
    /// embed_dim x channels; maps a latent channel vector to a query.
    w_query: Array2<f64>,
    /// channels x embed_dim; projects mixed values back to latent channels.
    w_out: Array2<f64>,
    /// 3 x channels; decode projection around mid-gray.
    w_decode: Array2<f64>,
}

impl Default for ToyBackbone {
    fn default() -> Self {
        Self::new()
    }
}

impl ToyBackbone {
    pub fn new() -> Self {
        Self {
            w_query: seeded_matrix(SALT_WQ, EMBED_DIM, CHANNELS, 0.25),
            w_out: seeded_matrix(SALT_WO, CHANNELS, EMBED_DIM, 1.0 / 8.0),
            w_decode: seeded_matrix(SALT_WD, 3, CHANNELS, 0.15),
        }
    }

    fn layer_id() -> LayerId {
        LayerId(LAYER_NAME.into())
    }

    /// Deterministic per-token embedding, salted per role.
    fn token_vector(token: &str, salt: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(token.as_bytes()) ^ salt);
        (0..EMBED_DIM)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }

    fn key_matrix(tokens: &[String]) -> Array2<f64> {
        let mut k = Array2::zeros((tokens.len(), EMBED_DIM));
        for (i, tok) in tokens.iter().enumerate() {
            for (j, v) in Self::token_vector(tok, SALT_KEY).into_iter().enumerate() {
                k[[i, j]] = v;
            }
        }
        k
    }

    fn value_matrix(tokens: &[String]) -> Array2<f64> {
        let mut v = Array2::zeros((tokens.len(), EMBED_DIM));
        for (i, tok) in tokens.iter().enumerate() {
            for (j, x) in Self::token_vector(tok, SALT_VALUE).into_iter().enumerate() {
                v[[i, j]] = x;
            }
        }
        v
    }

    /// positions x channels view of the latent, position-major (p = i*r+j).
    fn flatten_latent(z: &Latent) -> Array2<f64> {
        let (c, h, w) = z.dim();
        Array2::from_shape_fn((h * w, c), |(p, ch)| z[[ch, p / w, p % w]])
    }

    fn queries(&self, z: &Latent) -> Array2<f64> {
        Self::flatten_latent(z).dot(&self.w_query.t())
    }

    /// Raw cross attention (positions x tokens) for a prompt on a latent.
    fn cross_attention(&self, z: &Latent, tokens: &[String]) -> Result<Array2<f64>> {
        let qk = QkInputs::new(self.queries(z), Self::key_matrix(tokens))?;
        compute_attention(&qk)
    }

    fn self_attention(&self, z: &Latent) -> Result<Array2<f64>> {
        let q = self.queries(z);
        let qk = QkInputs::new(q.clone(), q)?;
        compute_attention(&qk)
    }

    fn grid_from_column(matrix: &Array2<f64>, col: usize) -> Array2<f64> {
        Array2::from_shape_fn((RESOLUTION, RESOLUTION), |(i, j)| {
            matrix[[i * RESOLUTION + j, col]]
        })
    }

    fn column_from_grid(grid: &ArrayView2<'_, f64>) -> Vec<f64> {
        let mut out = Vec::with_capacity(POSITIONS);
        for i in 0..RESOLUTION {
            for j in 0..RESOLUTION {
                out.push(grid[[i, j]]);
            }
        }
        out
    }
}

impl Backbone for ToyBackbone {
    fn id(&self) -> &'static str {
        "toy"
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        (CHANNELS, RESOLUTION, RESOLUTION)
    }

    fn layers(&self) -> Vec<LayerInfo> {
        vec![LayerInfo {
            id: Self::layer_id(),
            resolution: RESOLUTION,
        }]
    }

    fn make_schedule(&self, num_steps: usize) -> Result<SamplerSchedule> {
        SamplerSchedule::linear(num_steps)
    }

    fn init_latent(&self, seed: u64, num_steps: usize) -> LatentState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Array3::from_shape_fn((CHANNELS, RESOLUTION, RESOLUTION), |_| {
            StandardNormal.sample(&mut rng)
        });
        LatentState {
            z,
            t: num_steps,
            seed,
            stream_tag: Provenance::FullStream,
        }
    }

    fn predict_noise(
        &self,
        state: &LatentState,
        prompt: &PromptEmbedding,
        overrides: Option<&AttentionMapSet>,
    ) -> Result<(Latent, AttentionMapSet)> {
        if prompt.tokens.is_empty() {
            return Err(Error::BackboneFailure("empty token list".into()));
        }
        let layer = Self::layer_id();
        let n_tokens = prompt.tokens.len();
        let mut cross = self.cross_attention(&state.z, &prompt.tokens)?;
        let mut self_attn = self.self_attention(&state.z)?;

        // Track provenance per token; overrides keep their own tags.
        let mut provenance = vec![prompt.provenance; n_tokens];
        if let Some(over) = overrides {
            for ((l, n), map) in &over.cross {
                if *l != layer {
                    continue;
                }
                if *n >= n_tokens {
                    return Err(Error::HookShapeMismatch(format!(
                        "override token {n} beyond prompt length {n_tokens}"
                    )));
                }
                if map.values.dim() != (RESOLUTION, RESOLUTION) {
                    return Err(Error::HookShapeMismatch(format!(
                        "override map {:?}, layer expects {RESOLUTION}x{RESOLUTION}",
                        map.values.dim()
                    )));
                }
                for (p, v) in Self::column_from_grid(&map.values.view())
                    .into_iter()
                    .enumerate()
                {
                    cross[[p, *n]] = v;
                }
                provenance[*n] = map.provenance;
            }
            if let Some(grid) = over.self_attention.get(&layer) {
                if grid.dim() != (POSITIONS, POSITIONS) {
                    return Err(Error::HookShapeMismatch(format!(
                        "self override {:?}, layer expects {POSITIONS}x{POSITIONS}",
                        grid.dim()
                    )));
                }
                self_attn = grid.clone();
            }
        }

        // Noise estimate: cross-weighted token values, spatially mixed by
        // self attention, projected back to latent channels.
        let values = Self::value_matrix(&prompt.tokens);
        let mixed = self_attn.dot(&cross.dot(&values));
        let projected = mixed.dot(&self.w_out.t());
        let noise = Array3::from_shape_fn((CHANNELS, RESOLUTION, RESOLUTION), |(c, i, j)| {
            projected[[i * RESOLUTION + j, c]]
        });

        let mut captured = AttentionMapSet::new(state.t);
        for (n, &tag) in provenance.iter().enumerate() {
            captured.cross.insert(
                (layer.clone(), n),
                AttentionMap {
                    values: Self::grid_from_column(&cross, n),
                    token_index: n,
                    layer_id: layer.clone(),
                    step: state.t,
                    provenance: tag,
                },
            );
        }
        captured.self_attention.insert(layer, self_attn);
        Ok((noise, captured))
    }

    fn decode(&self, state: &LatentState) -> Result<PixelImage> {
        let flat = Self::flatten_latent(&state.z);
        let rgb = flat.dot(&self.w_decode.t());
        let img = Array3::from_shape_fn((RESOLUTION, RESOLUTION, 3), |(i, j, c)| {
            0.5 + rgb[[i * RESOLUTION + j, c]]
        });
        PixelImage::new(img)
    }

    fn cross_attention_vjp(
        &self,
        state: &LatentState,
        prompt: &PromptEmbedding,
        layer: &LayerId,
        token_index: usize,
        upstream: &ArrayView2<'_, f64>,
    ) -> Result<Latent> {
        if *layer != Self::layer_id() {
            return Err(Error::HookShapeMismatch(format!("unknown layer {layer}")));
        }
        if token_index >= prompt.tokens.len() {
            return Err(Error::HookShapeMismatch(format!(
                "token {token_index} beyond prompt length"
            )));
        }
        if upstream.dim() != (RESOLUTION, RESOLUTION) {
            return Err(Error::HookShapeMismatch(format!(
                "upstream grid {:?}",
                upstream.dim()
            )));
        }
        let keys = Self::key_matrix(&prompt.tokens);
        let attn = self.cross_attention(&state.z, &prompt.tokens)?;
        let scale = 1.0 / (EMBED_DIM as f64).sqrt();
        let g = Self::column_from_grid(upstream);

        // Per position p: dL/dQ_p = g_p * A[p,m] / sqrt(d)
        //                          * (K_m - sum_n A[p,n] K_n),
        // then dL/dz_p = Wq^T dL/dQ_p.
        let mut grad = Array3::zeros((CHANNELS, RESOLUTION, RESOLUTION));
        let key_m = keys.row(token_index);
        for p in 0..POSITIONS {
            let a_pm = attn[[p, token_index]];
            let coeff = g[p] * a_pm * scale;
            if coeff == 0.0 {
                continue;
            }
            let dq: Vec<f64> = (0..EMBED_DIM)
                .map(|e| {
                    let avg_key: f64 = (0..prompt.tokens.len())
                        .map(|n| attn[[p, n]] * keys[[n, e]])
                        .sum();
                    coeff * (key_m[e] - avg_key)
                })
                .collect();
            let (i, j) = (p / RESOLUTION, p % RESOLUTION);
            for c in 0..CHANNELS {
                grad[[c, i, j]] = dq
                    .iter()
                    .enumerate()
                    .map(|(e, d)| self.w_query[[e, c]] * d)
                    .sum();
            }
        }
        Ok(grad)
    }
}
