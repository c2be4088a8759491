//! Patch-token transformer autoencoder: a lightweight PointNet embeds each
//! normalized patch, center positions are embedded by a small MLP, and an
//! asymmetric encoder-decoder over the full (unmasked) token set
//! reconstructs every patch.

use serde::{Deserialize, Serialize};

use crate::diffcore::{AttentionBlock, Graph, Init, LayerNorm, Linear, Mlp, ParamSet, SharedMlp, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{tokenize, PatchSet, PerturbationRecord, PointCloud};
use crate::losses::LossBreakdown;
use crate::rng::{rng_for, tags};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    /// Patch count c.
    pub num_patches: usize,
    /// Points per patch n.
    pub patch_size: usize,
    /// Embedding width d; patch and position embeddings concatenate to 2d.
    pub dim: usize,
    /// Latent width ℓ.
    pub latent_dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    /// Lightweight PointNet widths for patch embedding.
    pub pointnet_widths: Vec<usize>,
    /// Hidden width of the center-position MLP.
    pub pos_hidden: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            num_patches: 64,
            patch_size: 32,
            dim: 384,
            latent_dim: 384,
            encoder_depth: 12,
            decoder_depth: 4,
            heads: 6,
            pointnet_widths: vec![128, 256],
            pos_hidden: 128,
        }
    }
}

impl TransformerConfig {
    /// Desk-scale configuration: d = ℓ = 64, depth 3/2, 4 heads.
    pub fn desk() -> Self {
        TransformerConfig {
            num_patches: 16,
            patch_size: 32,
            dim: 64,
            latent_dim: 64,
            encoder_depth: 3,
            decoder_depth: 2,
            heads: 4,
            pointnet_widths: vec![32, 64],
            pos_hidden: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_patches == 0 || self.patch_size == 0 {
            return Err(Error::config("transformer: c and n must be positive"));
        }
        if self.dim == 0 || self.latent_dim == 0 {
            return Err(Error::config("transformer: widths must be positive"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 || self.latent_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "transformer: dim {} and latent {} must be divisible by {} heads",
                self.dim, self.latent_dim, self.heads
            )));
        }
        if self.latent_dim > 2 * self.dim {
            return Err(Error::config(format!(
                "transformer: latent {} exceeds token width {}",
                self.latent_dim,
                2 * self.dim
            )));
        }
        if self.pointnet_widths.is_empty() {
            return Err(Error::config("transformer: patch embed widths empty"));
        }
        Ok(())
    }
}

pub struct SerpTransformer {
    pub config: TransformerConfig,
    pub params: ParamSet<f32>,
    patch_net: SharedMlp,
    patch_proj: Linear,
    pos_mlp: Mlp,
    cls_token: usize,
    cls_pos: usize,
    input_proj: Linear,
    encoder: Vec<AttentionBlock>,
    encoder_norm: LayerNorm,
    decoder: Vec<AttentionBlock>,
    decoder_norm: LayerNorm,
    output_proj: Linear,
    recon_fc: Linear,
}

impl SerpTransformer {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        Self::with_prefix(config, seed, "transformer")
    }

    pub(crate) fn with_prefix(config: TransformerConfig, seed: u64, prefix: &str) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, tags::INIT, 0);
        let mut ps = ParamSet::new();
        let d = config.dim;
        let l = config.latent_dim;
        let init = Init::Normal(0.02);

        let patch_net = SharedMlp::new(&mut ps, &format!("{prefix}.embed.pointnet"), 3, &config.pointnet_widths, &mut rng);
        let patch_proj = Linear::new(&mut ps, &format!("{prefix}.embed.proj"), patch_net.out_dim(), d, init, &mut rng);
        let pos_mlp = Mlp::new(&mut ps, &format!("{prefix}.embed.pos"), 3, config.pos_hidden, d, init, &mut rng);
        let cls_token = ps.register(
            format!("{prefix}.embed.cls_token"),
            crate::diffcore::sample_normal(&mut rng, vec![1, d], 0.02),
        );
        let cls_pos = ps.register(
            format!("{prefix}.embed.cls_pos"),
            crate::diffcore::sample_normal(&mut rng, vec![1, d], 0.02),
        );
        let input_proj = Linear::new(&mut ps, &format!("{prefix}.encoder.proj"), 2 * d, l, init, &mut rng);
        let mut encoder = Vec::with_capacity(config.encoder_depth);
        for i in 0..config.encoder_depth {
            encoder.push(AttentionBlock::new(&mut ps, &format!("{prefix}.encoder.block{i}"), l, config.heads, &mut rng)?);
        }
        let encoder_norm = LayerNorm::new(&mut ps, &format!("{prefix}.encoder.norm"), l);
        let mut decoder = Vec::with_capacity(config.decoder_depth);
        for i in 0..config.decoder_depth {
            decoder.push(AttentionBlock::new(&mut ps, &format!("{prefix}.decoder.block{i}"), l, config.heads, &mut rng)?);
        }
        let decoder_norm = LayerNorm::new(&mut ps, &format!("{prefix}.decoder.norm"), l);
        let output_proj = Linear::new(&mut ps, &format!("{prefix}.decoder.proj"), l, d, init, &mut rng);
        let recon_fc = Linear::new(&mut ps, &format!("{prefix}.recon.fc"), d, 3 * config.patch_size, init, &mut rng);

        Ok(SerpTransformer {
            config,
            params: ps,
            patch_net,
            patch_proj,
            pos_mlp,
            cls_token,
            cls_pos,
            input_proj,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            output_proj,
            recon_fc,
        })
    }

    /// Patch tokens → input embeddings [(c+1), 2d]: per-patch PointNet
    /// features concatenated with center-position embeddings, with the
    /// learnable CLS row prepended.
    pub fn embed(&self, g: &mut Graph<f32>, ps: &ParamSet<f32>, patches: &PatchSet) -> Result<Var> {
        let c = self.config.num_patches;
        let n = self.config.patch_size;
        if patches.num_patches != c || patches.patch_size != n {
            return Err(Error::shape(format!(
                "embed: patch set is {}x{}, model expects {c}x{n}",
                patches.num_patches, patches.patch_size
            )));
        }
        let pts = g.input(patches.flat_points());
        let pooled = self.patch_net.pooled(g, ps, pts, n)?;
        let t_e = self.patch_proj.forward(g, ps, pooled)?;

        let centers = g.input(patches.centers_tensor());
        let p_e = self.pos_mlp.forward(g, ps, centers)?;

        let tokens = g.concat_cols(t_e, p_e)?;
        let cls_tok = g.param(self.cls_token, &ps.get(self.cls_token).value);
        let cls_pos = g.param(self.cls_pos, &ps.get(self.cls_pos).value);
        let cls_row = g.concat_cols(cls_tok, cls_pos)?;
        g.concat_rows(cls_row, tokens)
    }

    /// Token embeddings → latents [(c+1), ℓ].
    pub fn encode(&self, g: &mut Graph<f32>, ps: &ParamSet<f32>, tokens: Var) -> Result<Var> {
        Ok(self.encode_probed(g, ps, tokens)?.0)
    }

    /// As `encode`, also returning every attention map for inspection.
    pub fn encode_probed(
        &self,
        g: &mut Graph<f32>,
        ps: &ParamSet<f32>,
        tokens: Var,
    ) -> Result<(Var, Vec<Var>)> {
        if g.value(tokens).cols() != 2 * self.config.dim {
            return Err(Error::shape(format!(
                "encode: token width {} vs 2d = {}",
                g.value(tokens).cols(),
                2 * self.config.dim
            )));
        }
        let mut h = self.input_proj.forward(g, ps, tokens)?;
        let mut maps = Vec::new();
        for block in &self.encoder {
            let (out, attn) = block.forward_probed(g, ps, h)?;
            h = out;
            maps.extend(attn);
        }
        let h = self.encoder_norm.forward(g, ps, h)?;
        Ok((h, maps))
    }

    /// Latents → decoded token features [(c+1), d].
    pub fn decode(&self, g: &mut Graph<f32>, ps: &ParamSet<f32>, latent: Var) -> Result<Var> {
        if g.value(latent).cols() != self.config.latent_dim {
            return Err(Error::shape(format!(
                "decode: latent width {} vs ℓ = {}",
                g.value(latent).cols(),
                self.config.latent_dim
            )));
        }
        let mut h = latent;
        for block in &self.decoder {
            h = block.forward(g, ps, h)?;
        }
        let h = self.decoder_norm.forward(g, ps, h)?;
        self.output_proj.forward(g, ps, h)
    }

    /// Decoded features → normalized patch predictions [c, 3n] (CLS row
    /// dropped, one FC per token).
    pub fn reconstruct_patches(
        &self,
        g: &mut Graph<f32>,
        ps: &ParamSet<f32>,
        decoded: Var,
    ) -> Result<Var> {
        if g.value(decoded).cols() != self.config.dim {
            return Err(Error::shape(format!(
                "reconstruct: width {} vs d = {}",
                g.value(decoded).cols(),
                self.config.dim
            )));
        }
        let c = self.config.num_patches;
        let patch_rows = g.slice_rows(decoded, 1, c)?;
        self.recon_fc.forward(g, ps, patch_rows)
    }

    /// Full forward on an already-tokenized cloud: per-patch predictions
    /// in normalized coordinates, shape [c, 3n].
    pub fn forward_patches(
        &self,
        g: &mut Graph<f32>,
        ps: &ParamSet<f32>,
        patches: &PatchSet,
    ) -> Result<Var> {
        let tokens = self.embed(g, ps, patches)?;
        let latent = self.encode(g, ps, tokens)?;
        let decoded = self.decode(g, ps, latent)?;
        self.reconstruct_patches(g, ps, decoded)
    }

    /// Mean per-patch Chamfer between predictions and the clean cloud's
    /// points at the same indices, both in the corrupted patch's frame.
    pub fn loss_on_patches(
        &self,
        g: &mut Graph<f32>,
        ps: &ParamSet<f32>,
        patches: &PatchSet,
        clean: &PointCloud,
    ) -> Result<(Var, LossBreakdown)> {
        let pred = self.forward_patches(g, ps, patches)?;
        let targets = patches.normalized_from(clean)?;
        let n = self.config.patch_size;
        let mut per_patch = Vec::with_capacity(patches.num_patches);
        for i in 0..patches.num_patches {
            let row = g.slice_rows(pred, i, 1)?;
            let pred_pts = g.reshape(row, vec![n, 3])?;
            let tgt = Tensor::new(
                vec![n, 3],
                targets.data()[i * n * 3..(i + 1) * n * 3].to_vec(),
            );
            per_patch.push(g.chamfer_to(pred_pts, &tgt)?);
        }
        let loss = g.mean_scalars(&per_patch)?;
        let bd = LossBreakdown::new(vec![("chamfer".into(), g.scalar(loss) as f64)]);
        Ok((loss, bd))
    }

    /// Pretraining loss: tokenize the corrupted cloud with `seed`, then
    /// score reconstructions against the clean cloud.
    pub fn pretrain_loss(
        &self,
        g: &mut Graph<f32>,
        ps: &ParamSet<f32>,
        clean: &PointCloud,
        record: &PerturbationRecord,
        seed: u64,
    ) -> Result<(Var, LossBreakdown)> {
        if clean.len() != record.perturbed.len() {
            return Err(Error::shape(format!(
                "pretrain: clean cloud has {} points, perturbed {}",
                clean.len(),
                record.perturbed.len()
            )));
        }
        let patches = tokenize(
            &record.perturbed,
            self.config.num_patches,
            self.config.patch_size,
            seed,
        )?;
        self.loss_on_patches(g, ps, &patches, clean)
    }

    /// CLS latent (row 0 of the encoder output) used downstream.
    pub fn cls_var(
        &self,
        g: &mut Graph<f32>,
        ps: &ParamSet<f32>,
        cloud: &PointCloud,
        seed: u64,
    ) -> Result<Var> {
        let patches = tokenize(cloud, self.config.num_patches, self.config.patch_size, seed)?;
        let tokens = self.embed(g, ps, &patches)?;
        let latent = self.encode(g, ps, tokens)?;
        g.slice_rows(latent, 0, 1)
    }

    pub fn cls_representation(&self, cloud: &PointCloud, seed: u64) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let v = self.cls_var(&mut g, &self.params, cloud, seed)?;
        Ok(g.value(v).clone())
    }

    /// Reconstruct a cloud from its corrupted tokenization: returns the
    /// patch set and the predicted points mapped back to the cloud frame.
    pub fn reconstruct_cloud(
        &self,
        cloud: &PointCloud,
        seed: u64,
    ) -> Result<(PatchSet, Vec<[f32; 3]>)> {
        let patches = tokenize(cloud, self.config.num_patches, self.config.patch_size, seed)?;
        let mut g = Graph::new();
        let pred = self.forward_patches(&mut g, &self.params, &patches)?;
        let points = patches.denormalized(g.value(pred))?;
        Ok((patches, points))
    }
}
