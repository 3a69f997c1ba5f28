//! Linear patch encoder with a linear prototype head.
//!
//! Parameters live in one flat vector laid out as
//! `[embed weights (D x P²) | embed bias (D) | head weights (K x D) | head bias (K)]`
//! so EMA and finite-difference checks can treat them uniformly.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ssl_losses::LogitVector;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    patch: usize,
    embed_dim: usize,
    prototypes: usize,
    params: Vec<f64>,
}

/// Forward intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct PatchForward {
    /// Flattened pixels per patch.
    pub inputs: Vec<Vec<f64>>,
    /// Embedding per patch.
    pub embeddings: Vec<Vec<f64>>,
    pub pooled_input: Vec<f64>,
    pub pooled: Vec<f64>,
    pub grid: usize,
}

impl ToyEncoder {
    pub fn zeros(patch: usize, embed_dim: usize, prototypes: usize) -> Self {
        let n = embed_dim * patch * patch + embed_dim + prototypes * embed_dim + prototypes;
        Self {
            patch,
            embed_dim,
            prototypes,
            params: vec![0.0; n],
        }
    }

    /// Uniform `±1/sqrt(fan_in)` weights and zero biases.
    pub fn random<R: Rng + ?Sized>(patch: usize, embed_dim: usize, prototypes: usize, rng: &mut R) -> Self {
        Self::random_scaled(patch, embed_dim, prototypes, 1.0, rng)
    }

    /// Uniform `±gain/sqrt(fan_in)` weights and zero biases.
    pub fn random_scaled<R: Rng + ?Sized>(
        patch: usize,
        embed_dim: usize,
        prototypes: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut enc = Self::zeros(patch, embed_dim, prototypes);
        let p2 = patch * patch;
        let (we, wh) = (gain / (p2 as f64).sqrt(), gain / (embed_dim as f64).sqrt());
        let (e, _, h, _) = enc.offsets();
        for v in &mut enc.params[e..e + embed_dim * p2] {
            *v = rng.gen_range(-we..we);
        }
        for v in &mut enc.params[h..h + prototypes * embed_dim] {
            *v = rng.gen_range(-wh..wh);
        }
        enc
    }

    pub fn from_params(patch: usize, embed_dim: usize, prototypes: usize, params: Vec<f64>) -> Result<Self> {
        let mut enc = Self::zeros(patch, embed_dim, prototypes);
        if params.len() != enc.params.len() {
            return Err(Error::DimensionMismatch {
                left: params.len(),
                right: enc.params.len(),
            });
        }
        enc.params = params;
        Ok(enc)
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn prototypes(&self) -> usize {
        self.prototypes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn same_shape(&self, other: &ToyEncoder) -> bool {
        (self.patch, self.embed_dim, self.prototypes) == (other.patch, other.embed_dim, other.prototypes)
    }

    /// Start offsets of embed weights, embed bias, head weights, head bias.
    fn offsets(&self) -> (usize, usize, usize, usize) {
        let e = 0;
        let be = self.embed_dim * self.patch * self.patch;
        let h = be + self.embed_dim;
        let bh = h + self.prototypes * self.embed_dim;
        (e, be, h, bh)
    }

    /// Splits a `size x size` view into patches and embeds them. Patches
    /// listed in `hidden` (row-major token indices) are zeroed first.
    pub fn embed(&self, view: &[f32], size: usize, hidden: &[bool]) -> Result<PatchForward> {
        if size == 0 || !size.is_multiple_of(self.patch) || view.len() != size * size {
            return Err(Error::ShapeMismatch(format!(
                "view of {} pixels (side {size}) does not tile into {}px patches",
                view.len(),
                self.patch
            )));
        }
        let grid = size / self.patch;
        if !hidden.is_empty() && hidden.len() != grid * grid {
            return Err(Error::ShapeMismatch(format!(
                "token mask of {} for a {grid}x{grid} grid",
                hidden.len()
            )));
        }
        let p = self.patch;
        let p2 = p * p;
        let (e, be, _, _) = self.offsets();
        let mut inputs = Vec::with_capacity(grid * grid);
        let mut embeddings = Vec::with_capacity(grid * grid);
        for gy in 0..grid {
            for gx in 0..grid {
                let token = gy * grid + gx;
                let x: Vec<f64> = if hidden.get(token).copied().unwrap_or(false) {
                    vec![0.0; p2]
                } else {
                    (0..p2)
                        .map(|i| f64::from(view[(gy * p + i / p) * size + gx * p + i % p]))
                        .collect()
                };
                let emb: Vec<f64> = (0..self.embed_dim)
                    .map(|d| {
                        let row = &self.params[e + d * p2..e + (d + 1) * p2];
                        self.params[be + d] + row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>()
                    })
                    .collect();
                inputs.push(x);
                embeddings.push(emb);
            }
        }
        let n = inputs.len() as f64;
        let mut pooled_input = vec![0.0; p2];
        for x in &inputs {
            for (a, v) in pooled_input.iter_mut().zip(x) {
                *a += v / n;
            }
        }
        let mut pooled = vec![0.0; self.embed_dim];
        for emb in &embeddings {
            for (a, v) in pooled.iter_mut().zip(emb) {
                *a += v / n;
            }
        }
        Ok(PatchForward {
            inputs,
            embeddings,
            pooled_input,
            pooled,
            grid,
        })
    }

    /// Head applied to one embedding.
    pub fn head(&self, embedding: &[f64]) -> LogitVector {
        let (_, _, h, bh) = self.offsets();
        let d = self.embed_dim;
        LogitVector(
            (0..self.prototypes)
                .map(|k| {
                    let row = &self.params[h + k * d..h + (k + 1) * d];
                    self.params[bh + k] + row.iter().zip(embedding).map(|(w, v)| w * v).sum::<f64>()
                })
                .collect(),
        )
    }

    /// Image-level logits: head of the mean patch embedding.
    pub fn forward(&self, view: &[f32], size: usize) -> Result<LogitVector> {
        Ok(self.head(&self.embed(view, size, &[])?.pooled))
    }

    /// Accumulates gradients for `logits = head(embedding)` given
    /// `d loss / d logits`, where `embedding = E x + b_e`. Also adds
    /// `extra_embedding_grad` (e.g. from a loss on the embedding itself).
    pub fn backward_into(
        &self,
        input: &[f64],
        embedding: &[f64],
        logit_grad: Option<&[f64]>,
        extra_embedding_grad: Option<&[f64]>,
        grad: &mut [f64],
    ) {
        let (e, be, h, bh) = self.offsets();
        let d = self.embed_dim;
        let p2 = self.patch * self.patch;
        let mut emb_grad = vec![0.0; d];
        if let Some(g) = logit_grad {
            for (k, &gk) in g.iter().enumerate() {
                if gk == 0.0 {
                    continue;
                }
                grad[bh + k] += gk;
                for j in 0..d {
                    grad[h + k * d + j] += gk * embedding[j];
                    emb_grad[j] += gk * self.params[h + k * d + j];
                }
            }
        }
        if let Some(extra) = extra_embedding_grad {
            for (a, b) in emb_grad.iter_mut().zip(extra) {
                *a += b;
            }
        }
        for (j, &gj) in emb_grad.iter().enumerate() {
            if gj == 0.0 {
                continue;
            }
            grad[be + j] += gj;
            for (i, &xi) in input.iter().enumerate().take(p2) {
                grad[e + j * p2 + i] += gj * xi;
            }
        }
    }
}
