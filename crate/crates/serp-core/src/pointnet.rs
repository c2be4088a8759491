//! PointNet-style denoising autoencoder: a shared-MLP encoder pools a
//! global feature, per-point features are fused from local + global, and
//! two heads score corruption and reconstruct the clean cloud.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Linear, ParamSet, SharedMlp, Tensor, Var};
use crate::diffcore::Init;
use crate::error::{Error, Result};
use crate::geometry::{PerturbationRecord, PointCloud};
use crate::losses::{self, LossBreakdown};
use crate::rng::{rng_for, tags};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconMode {
    /// Predict the per-point offset clean − perturbed; MSE loss.
    Delta,
    /// Predict absolute coordinates; Chamfer ℓ2 loss.
    Cdl2,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PointNetConfig {
    /// Per-point shared MLP widths; the last is the global feature width.
    pub shared_widths: Vec<usize>,
    /// Which shared block's activations serve as the local feature.
    pub local_layer: usize,
    pub perpoint_dim: usize,
    /// Exactly four fusion FC widths, ending in `perpoint_dim`.
    pub fusion_widths: Vec<usize>,
    pub recon_mode: ReconMode,
    pub alpha_cls: f64,
    pub alpha_rec: f64,
}

impl Default for PointNetConfig {
    fn default() -> Self {
        PointNetConfig {
            shared_widths: vec![64, 64, 64, 128, 1024],
            local_layer: 1,
            perpoint_dim: 128,
            fusion_widths: vec![512, 256, 128, 128],
            recon_mode: ReconMode::Delta,
            alpha_cls: 0.001,
            alpha_rec: 1.5,
        }
    }
}

impl PointNetConfig {
    /// Small configuration for desk-scale runs and tests.
    pub fn desk() -> Self {
        PointNetConfig {
            shared_widths: vec![32, 32, 64, 128],
            local_layer: 1,
            perpoint_dim: 32,
            fusion_widths: vec![96, 64, 32, 32],
            ..Default::default()
        }
    }

    pub fn global_dim(&self) -> usize {
        *self.shared_widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shared_widths.is_empty() || self.global_dim() == 0 {
            return Err(Error::config("pointnet: shared widths must be nonempty"));
        }
        if self.local_layer >= self.shared_widths.len() {
            return Err(Error::config(format!(
                "pointnet: local layer {} out of {} shared blocks",
                self.local_layer,
                self.shared_widths.len()
            )));
        }
        if self.fusion_widths.len() != 4 {
            return Err(Error::config("pointnet: fusion must have 4 FC layers"));
        }
        if *self.fusion_widths.last().unwrap() != self.perpoint_dim {
            return Err(Error::config(format!(
                "pointnet: fusion must end in perpoint width {}",
                self.perpoint_dim
            )));
        }
        if self.alpha_cls < 0.0 || self.alpha_rec < 0.0 {
            return Err(Error::config("pointnet: loss weights must be nonnegative"));
        }
        Ok(())
    }
}

pub struct SerpPointNet {
    pub config: PointNetConfig,
    pub params: ParamSet<f32>,
    shared: SharedMlp,
    fusion: Vec<Linear>,
    cls_head: Linear,
    recon_head: Linear,
}

impl SerpPointNet {
    pub fn new(config: PointNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, tags::INIT, 0);
        let mut params = ParamSet::new();
        let shared = SharedMlp::new(&mut params, "pointnet.shared", 3, &config.shared_widths, &mut rng);

        let local_dim = config.shared_widths[config.local_layer];
        let mut fusion = Vec::with_capacity(4);
        let mut prev = local_dim + config.global_dim();
        for (i, &w) in config.fusion_widths.iter().enumerate() {
            fusion.push(Linear::new(
                &mut params,
                &format!("pointnet.fusion.fc{i}"),
                prev,
                w,
                Init::He,
                &mut rng,
            ));
            prev = w;
        }
        let cls_head = Linear::new(&mut params, "pointnet.head.cls", prev, 1, Init::He, &mut rng);
        let recon_head = Linear::new(&mut params, "pointnet.head.recon", prev, 3, Init::He, &mut rng);
        Ok(SerpPointNet {
            config,
            params,
            shared,
            fusion,
            cls_head,
            recon_head,
        })
    }

    fn cloud_tensor(cloud: &PointCloud) -> Tensor<f32> {
        Tensor::new(vec![cloud.len(), 3], cloud.flat())
    }

    /// (global [1, G], per-point local [N, L]) off one shared-MLP pass.
    fn backbone(
        &self,
        g: &mut Graph<f32>,
        ps: &ParamSet<f32>,
        x: Var,
    ) -> Result<(Var, Var)> {
        let n = g.value(x).rows();
        let feats = self.shared.forward_all(g, ps, x)?;
        let global = g.max_segments(*feats.last().unwrap(), n)?;
        Ok((global, feats[self.config.local_layer]))
    }

    /// Permutation-invariant global feature of width `global_dim`.
    pub fn encode_global_var(
        &self,
        g: &mut Graph<f32>,
        ps: &ParamSet<f32>,
        cloud: &PointCloud,
    ) -> Result<Var> {
        let x = g.input(Self::cloud_tensor(cloud));
        Ok(self.backbone(g, ps, x)?.0)
    }

    pub fn encode_global(&self, cloud: &PointCloud) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let v = self.encode_global_var(&mut g, &self.params, cloud)?;
        Ok(g.value(v).clone())
    }

    /// Per-point fused features [N, perpoint_dim].
    pub fn perpoint_features_var(
        &self,
        g: &mut Graph<f32>,
        ps: &ParamSet<f32>,
        cloud: &PointCloud,
    ) -> Result<Var> {
        let n = cloud.len();
        let x = g.input(Self::cloud_tensor(cloud));
        let (global, local) = self.backbone(g, ps, x)?;
        let global_rows = g.broadcast_row(global, n)?;
        let mut h = g.concat_cols(local, global_rows)?;
        for fc in &self.fusion {
            h = fc.forward(g, ps, h)?;
            h = g.relu(h);
        }
        Ok(h)
    }

    pub fn perpoint_features(&self, cloud: &PointCloud) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let v = self.perpoint_features_var(&mut g, &self.params, cloud)?;
        Ok(g.value(v).clone())
    }

    /// Pretraining loss on one (perturbed, clean) pair: per-point corruption
    /// logits scored against the mask, plus the configured reconstruction
    /// objective, combined with the α weights.
    pub fn pretrain_loss(
        &self,
        g: &mut Graph<f32>,
        ps: &ParamSet<f32>,
        record: &PerturbationRecord,
        clean: &PointCloud,
    ) -> Result<(Var, LossBreakdown)> {
        let n = record.perturbed.len();
        if clean.len() != n {
            return Err(Error::shape(format!(
                "pretrain: clean cloud has {} points, perturbed {n}",
                clean.len()
            )));
        }
        let feats = self.perpoint_features_var(g, ps, &record.perturbed)?;
        let logits = self.cls_head.forward(g, ps, feats)?;
        let logits = g.reshape(logits, vec![n])?;
        let l_cls = losses::perturbation_cls_loss(g, logits, &record.mask)?;

        let recon = self.recon_head.forward(g, ps, feats)?;
        let l_rec = match self.config.recon_mode {
            ReconMode::Delta => {
                let mut delta = Vec::with_capacity(n * 3);
                for (c, p) in clean.points().iter().zip(record.perturbed.points()) {
                    for k in 0..3 {
                        delta.push(c[k] - p[k]);
                    }
                }
                let target = Tensor::new(vec![n, 3], delta);
                losses::delta_mse_loss(g, recon, &target)?
            }
            ReconMode::Cdl2 => {
                let target = Self::cloud_tensor(clean);
                g.chamfer_to(recon, &target)?
            }
        };
        losses::pointnet_total_loss(g, l_cls, l_rec, self.config.alpha_cls, self.config.alpha_rec)
    }

    /// Evaluation-only forward; builds and drops its own graph.
    pub fn forward_pretrain(
        &self,
        record: &PerturbationRecord,
        clean: &PointCloud,
    ) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let (_, bd) = self.pretrain_loss(&mut g, &self.params, record, clean)?;
        Ok(bd)
    }

    /// Reconstruction of the clean cloud from a perturbed one. Delta mode
    /// adds the predicted offsets; cdℓ2 mode emits coordinates directly.
    pub fn reconstruct(&self, record: &PerturbationRecord) -> Result<PointCloud> {
        let mut g = Graph::new();
        let feats = self.perpoint_features_var(&mut g, &self.params, &record.perturbed)?;
        let recon = self.recon_head.forward(&mut g, &self.params, feats)?;
        let pred = g.value(recon);
        let n = record.perturbed.len();
        let mut points = Vec::with_capacity(n);
        for i in 0..n {
            let row = pred.row(i);
            let p = record.perturbed.point(i);
            points.push(match self.config.recon_mode {
                ReconMode::Delta => [p[0] + row[0], p[1] + row[1], p[2] + row[2]],
                ReconMode::Cdl2 => [row[0], row[1], row[2]],
            });
        }
        let mut cloud = PointCloud::new(points)?;
        cloud.set_label(record.perturbed.label());
        Ok(cloud)
    }

    /// Zero both head layers; used to pin down head-free behavior in tests.
    pub fn zero_heads(&mut self) {
        for name in [
            "pointnet.head.cls.w",
            "pointnet.head.cls.b",
            "pointnet.head.recon.w",
            "pointnet.head.recon.b",
        ] {
            let slot = self.params.slot_of(name).expect("head param exists");
            let shape = self.params.get(slot).value.shape().to_vec();
            self.params.get_mut(slot).value = Tensor::zeros(shape);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::perturb;
    use rand::Rng as _;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = rng_for(seed, 91, 0);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng.random_range(-1.0f32..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    fn tiny_config() -> PointNetConfig {
        PointNetConfig {
            shared_widths: vec![8, 8, 16],
            local_layer: 1,
            perpoint_dim: 8,
            fusion_widths: vec![16, 16, 8, 8],
            ..Default::default()
        }
    }

    #[test]
    fn global_feature_has_configured_width() {
        let model = SerpPointNet::new(PointNetConfig::default(), 1).unwrap();
        let cloud = random_cloud(32, 2);
        let v = model.encode_global(&cloud).unwrap();
        assert_eq!(v.shape(), &[1, 1024]);
    }

    #[test]
    fn global_feature_is_permutation_invariant_bitwise() {
        let model = SerpPointNet::new(tiny_config(), 3).unwrap();
        let cloud = random_cloud(24, 4);
        let base = model.encode_global(&cloud).unwrap();
        let perm: Vec<usize> = (0..24).rev().collect();
        let shuffled = cloud.select(&perm);
        let out = model.encode_global(&shuffled).unwrap();
        assert_eq!(base.data(), out.data());
    }

    #[test]
    fn perpoint_features_are_permutation_equivariant_bitwise() {
        let model = SerpPointNet::new(tiny_config(), 5).unwrap();
        let cloud = random_cloud(12, 6);
        let base = model.perpoint_features(&cloud).unwrap();
        let perm: Vec<usize> = (0..12).rev().collect();
        let out = model.perpoint_features(&cloud.select(&perm)).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            assert_eq!(out.row(i), base.row(src), "row {i}");
        }
    }

    #[test]
    fn single_point_shapes() {
        let model = SerpPointNet::new(tiny_config(), 7).unwrap();
        let cloud = PointCloud::new(vec![[0.1, 0.2, 0.3]]).unwrap();
        let f = model.perpoint_features(&cloud).unwrap();
        assert_eq!(f.shape(), &[1, 8]);
    }

    #[test]
    fn sigma_zero_with_zero_head_gives_zero_rec_loss() {
        let mut model = SerpPointNet::new(tiny_config(), 8).unwrap();
        model.zero_heads();
        let cloud = random_cloud(32, 9);
        let rec = perturb(&cloud, 4, 4, 0.0, 1).unwrap();
        let bd = model.forward_pretrain(&rec, &cloud).unwrap();
        assert_eq!(bd.component("rec").unwrap(), 0.0);
        // zero logits on a mixed mask cost ln 2 each, weighted by alpha_cls
        let want_cls = 0.001 * std::f64::consts::LN_2;
        assert!((bd.component("cls").unwrap() - want_cls).abs() < 1e-6);
    }

    #[test]
    fn zero_head_delta_reconstruction_is_input() {
        let mut model = SerpPointNet::new(tiny_config(), 10).unwrap();
        model.zero_heads();
        let cloud = random_cloud(16, 11);
        let rec = perturb(&cloud, 2, 4, 0.05, 2).unwrap();
        let out = model.reconstruct(&rec).unwrap();
        assert_eq!(out.len(), rec.perturbed.len());
        for (a, b) in out.points().iter().zip(rec.perturbed.points()) {
            assert_eq!(a.map(f32::to_bits), b.map(f32::to_bits));
        }
    }

    #[test]
    fn both_recon_modes_produce_finite_losses_and_grads() {
        for mode in [ReconMode::Delta, ReconMode::Cdl2] {
            let cfg = PointNetConfig {
                recon_mode: mode,
                ..tiny_config()
            };
            let model = SerpPointNet::new(cfg, 12).unwrap();
            let cloud = random_cloud(20, 13);
            let rec = perturb(&cloud, 3, 4, 0.03, 3).unwrap();
            let mut g = Graph::new();
            let (total, bd) = model
                .pretrain_loss(&mut g, &model.params, &rec, &cloud)
                .unwrap();
            assert!(bd.is_finite());
            g.backward(total);
            let mut store = model.params.zero_grads();
            g.accumulate_param_grads(&mut store);
            for (slot, buf) in store.iter().enumerate() {
                assert!(!buf.is_empty(), "no grad for {}", model.params.get(slot).name);
                assert!(buf.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn mismatched_clouds_are_rejected() {
        let model = SerpPointNet::new(tiny_config(), 14).unwrap();
        let cloud = random_cloud(16, 15);
        let other = random_cloud(17, 16);
        let rec = perturb(&cloud, 2, 2, 0.01, 4).unwrap();
        let mut g = Graph::new();
        assert!(model
            .pretrain_loss(&mut g, &model.params, &rec, &other)
            .is_err());
    }

    #[test]
    fn config_validation_catches_bad_fusion() {
        let cfg = PointNetConfig {
            fusion_widths: vec![64, 32],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = PointNetConfig {
            fusion_widths: vec![64, 32, 16, 99],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
