//! Vector-quantized variant of the transformer autoencoder: encoder
//! latents snap to their nearest codebook entry before decoding, with
//! straight-through gradients and the codebook/commitment objective.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{tokenize, PerturbationRecord, PointCloud};
use crate::losses::{vq_total_loss, LossBreakdown};
use crate::par;
use crate::rng::{rng_for, tags};
use crate::transformer::{SerpTransformer, TransformerConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqConfig {
    /// Codebook size K.
    pub codebook_size: usize,
    /// Weight of the codebook (embedding-pulling) term.
    pub alpha: f64,
    /// Weight of the commitment term.
    pub beta: f64,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig {
            codebook_size: 1024,
            alpha: 1.0,
            beta: 0.25,
        }
    }
}

impl VqConfig {
    pub fn desk() -> Self {
        VqConfig {
            codebook_size: 32,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 {
            return Err(Error::config("vq: codebook needs at least 2 entries"));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::config("vq: loss weights must be nonnegative"));
        }
        Ok(())
    }
}

/// K learnable embedding rows living in the shared parameter set.
#[derive(Clone, Copy, Debug)]
pub struct Codebook {
    pub slot: usize,
    pub size: usize,
    pub width: usize,
}

/// Per-token nearest codebook row by squared distance, ties to the lowest
/// index. Pure function of the two value matrices.
pub fn quantize_indices(z_e: &Tensor<f32>, codebook: &Tensor<f32>) -> Result<Vec<usize>> {
    if z_e.cols() != codebook.cols() {
        return Err(Error::shape(format!(
            "quantize: latent width {} vs codebook width {}",
            z_e.cols(),
            codebook.cols()
        )));
    }
    let k = codebook.rows();
    Ok(par::map_collect(z_e.rows(), 16, |t| {
        let row = z_e.row(t);
        let mut best = (f32::INFINITY, usize::MAX);
        for j in 0..k {
            let mut d = 0.0f32;
            for (a, b) in row.iter().zip(codebook.row(j)) {
                let diff = a - b;
                d += diff * diff;
            }
            if d < best.0 || (d == best.0 && j < best.1) {
                best = (d, j);
            }
        }
        best.1
    }))
}

/// Histogram of codebook usage for utilization reports.
pub fn index_histogram(indices: &[usize], k: usize) -> Vec<usize> {
    let mut h = vec![0usize; k];
    for &i in indices {
        h[i] += 1;
    }
    h
}

pub struct Vasp {
    pub model: SerpTransformer,
    pub codebook: Codebook,
    pub vq: VqConfig,
}

impl Vasp {
    pub fn new(config: TransformerConfig, vq: VqConfig, seed: u64) -> Result<Self> {
        vq.validate()?;
        let mut model = SerpTransformer::new(config, seed)?;
        let k = vq.codebook_size;
        let width = model.config.latent_dim;
        // uniform(−1/K, 1/K) init
        let mut rng = rng_for(seed, tags::INIT, 1);
        use rand::Rng as _;
        let span = 1.0f32 / k as f32;
        let data: Vec<f32> = (0..k * width)
            .map(|_| rng.random_range(-span..span))
            .collect();
        let slot = model
            .params
            .register("vasp.codebook.embeddings", Tensor::new(vec![k, width], data));
        Ok(Vasp {
            model,
            codebook: Codebook {
                slot,
                size: k,
                width,
            },
            vq,
        })
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.model.params
    }

    /// Encode, quantize against the codebook in `ps`, and return
    /// (z_e, z_q bound to the codebook, indices). The z_q rows are bitwise
    /// copies of codebook rows.
    pub fn quantize(
        &self,
        g: &mut Graph<f32>,
        ps: &ParamSet<f32>,
        z_e: Var,
    ) -> Result<(Var, Vec<usize>)> {
        let cb_value = &ps.get(self.codebook.slot).value;
        let indices = quantize_indices(g.value(z_e), cb_value)?;
        let cb = g.param(self.codebook.slot, cb_value);
        let z_q = g.gather_rows(cb, &indices)?;
        Ok((z_q, indices))
    }

    /// Full forward: encoder → quantize → straight-through → decoder →
    /// reconstruction, with the three-term objective.
    pub fn forward(
        &self,
        g: &mut Graph<f32>,
        ps: &ParamSet<f32>,
        clean: &PointCloud,
        record: &PerturbationRecord,
        seed: u64,
    ) -> Result<(Var, LossBreakdown, Vec<usize>)> {
        if clean.len() != record.perturbed.len() {
            return Err(Error::shape(format!(
                "vasp: clean cloud has {} points, perturbed {}",
                clean.len(),
                record.perturbed.len()
            )));
        }
        let cfg = &self.model.config;
        let patches = tokenize(&record.perturbed, cfg.num_patches, cfg.patch_size, seed)?;

        let tokens = self.model.embed(g, ps, &patches)?;
        let z_e = self.model.encode(g, ps, tokens)?;
        let (z_q, indices) = self.quantize(g, ps, z_e)?;
        let st = g.straight_through(z_q, z_e)?;
        let decoded = self.model.decode(g, ps, st)?;
        let pred = self.model.reconstruct_patches(g, ps, decoded)?;

        let targets = patches.normalized_from(clean)?;
        let n = cfg.patch_size;
        let mut per_patch = Vec::with_capacity(cfg.num_patches);
        for i in 0..cfg.num_patches {
            let row = g.slice_rows(pred, i, 1)?;
            let pred_pts = g.reshape(row, vec![n, 3])?;
            let tgt = Tensor::new(
                vec![n, 3],
                targets.data()[i * n * 3..(i + 1) * n * 3].to_vec(),
            );
            per_patch.push(g.chamfer_to(pred_pts, &tgt)?);
        }
        let rec = g.mean_scalars(&per_patch)?;
        let (total, bd) = vq_total_loss(g, rec, z_e, z_q, self.vq.alpha, self.vq.beta)?;
        Ok((total, bd, indices))
    }
}
