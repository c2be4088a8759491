//! Training objectives: squared-distance Chamfer, per-point corruption
//! classification, delta regression, and the combined PointNet / VQ
//! objectives.
//!
//! Each loss exists in two forms where both are needed: a plain scalar
//! function over point slices (metrics, reports) and a graph op
//! (training). The graph forms live on [`Graph`]; this module adds the
//! assemblies and the scalar Chamfer used for evaluation.

use crate::diffcore::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::par;

/// Named, already-weighted loss contributions; `total` is their sum.
#[derive(Clone, Debug, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub components: Vec<(String, f64)>,
}

impl LossBreakdown {
    pub fn new(components: Vec<(String, f64)>) -> Self {
        let total = components.iter().map(|(_, v)| v).sum();
        LossBreakdown { total, components }
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.components.iter().all(|(_, v)| v.is_finite())
    }

    /// Mean of per-item breakdowns with identical component layouts.
    pub fn mean_of(items: &[LossBreakdown]) -> LossBreakdown {
        assert!(!items.is_empty());
        let n = items.len() as f64;
        let components = items[0]
            .components
            .iter()
            .enumerate()
            .map(|(k, (name, _))| {
                let s: f64 = items.iter().map(|b| b.components[k].1).sum();
                (name.clone(), s / n)
            })
            .collect();
        LossBreakdown::new(components)
    }
}

// ── Chamfer ℓ2 ───────────────────────────────────────────────────────

fn nn_dist2(point: &[f32; 3], set: &[[f32; 3]]) -> f64 {
    let mut best = f64::INFINITY;
    for q in set {
        let d = (0..3).map(|k| (point[k] as f64 - q[k] as f64).powi(2)).sum();
        if d < best {
            best = d;
        }
    }
    best
}

/// Symmetric mean of squared nearest-neighbor distances between two point
/// sets. Scalar form, used for metrics; the differentiable form is
/// [`Graph::chamfer_to`].
pub fn chamfer_l2(a: &[[f32; 3]], b: &[[f32; 3]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid_argument("chamfer: empty point set"));
    }
    let d_ab: Vec<f64> = par::map_collect(a.len(), 256, |i| nn_dist2(&a[i], b));
    let d_ba: Vec<f64> = par::map_collect(b.len(), 256, |j| nn_dist2(&b[j], a));
    let s1: f64 = d_ab.iter().sum::<f64>() / a.len() as f64;
    let s2: f64 = d_ba.iter().sum::<f64>() / b.len() as f64;
    Ok(s1 + s2)
}

// ── graph-form wrappers ──────────────────────────────────────────────

/// Mean binary cross-entropy of one logit per point against the
/// perturbation mask.
pub fn perturbation_cls_loss<R: Real>(
    g: &mut Graph<R>,
    logits: Var,
    mask: &[bool],
) -> Result<Var> {
    g.bce_with_logits_mean(logits, mask)
}

/// Mean squared error between a predicted and a true displacement field.
pub fn delta_mse_loss<R: Real>(g: &mut Graph<R>, pred: Var, target: &Tensor<R>) -> Result<Var> {
    g.mse_to(pred, target)
}

// ── assemblies ───────────────────────────────────────────────────────

/// total = α_cls·l_cls + α_rec·l_rec, with the weighted terms recorded.
pub fn pointnet_total_loss<R: Real>(
    g: &mut Graph<R>,
    l_cls: Var,
    l_rec: Var,
    alpha_cls: f64,
    alpha_rec: f64,
) -> Result<(Var, LossBreakdown)> {
    if alpha_cls < 0.0 || alpha_rec < 0.0 {
        return Err(Error::invalid_argument("loss weights must be nonnegative"));
    }
    let wc = g.scale(l_cls, R::from_f64(alpha_cls));
    let wr = g.scale(l_rec, R::from_f64(alpha_rec));
    let total = g.add(wc, wr)?;
    let breakdown = LossBreakdown::new(vec![
        ("cls".into(), g.scalar(wc).to_f64()),
        ("rec".into(), g.scalar(wr).to_f64()),
    ]);
    Ok((total, breakdown))
}

/// total = rec + α‖sg[z_e] − e‖² + β‖z_e − sg[e]‖², squared norms averaged
/// over token rows. The α-term reaches only the codebook rows behind
/// `z_q_sel`, the β-term only the encoder behind `z_e`.
pub fn vq_total_loss<R: Real>(
    g: &mut Graph<R>,
    rec_loss: Var,
    z_e: Var,
    z_q_sel: Var,
    alpha: f64,
    beta: f64,
) -> Result<(Var, LossBreakdown)> {
    if g.value(z_e).shape() != g.value(z_q_sel).shape() {
        return Err(Error::shape(format!(
            "vq loss: z_e {:?} vs selected embeddings {:?}",
            g.value(z_e).shape(),
            g.value(z_q_sel).shape()
        )));
    }
    let ze_sg = g.detach(z_e);
    let cb_diff = g.sub(ze_sg, z_q_sel)?;
    let cb = g.mean_row_sq_norm(cb_diff);
    let cb_w = g.scale(cb, R::from_f64(alpha));

    let e_sg = g.detach(z_q_sel);
    let commit_diff = g.sub(z_e, e_sg)?;
    let commit = g.mean_row_sq_norm(commit_diff);
    let commit_w = g.scale(commit, R::from_f64(beta));

    let t = g.add(rec_loss, cb_w)?;
    let total = g.add(t, commit_w)?;
    let breakdown = LossBreakdown::new(vec![
        ("chamfer".into(), g.scalar(rec_loss).to_f64()),
        ("codebook".into(), g.scalar(cb_w).to_f64()),
        ("commit".into(), g.scalar(commit_w).to_f64()),
    ]);
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng as _;

    fn random_points(n: usize, seed: u64) -> Vec<[f32; 3]> {
        let mut rng = rng_for(seed, 94, 0);
        (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0f32..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    #[test]
    fn chamfer_hand_values() {
        let p = vec![[0.0f32, 0.0, 0.0]];
        let ph = vec![[1.0f32, 0.0, 0.0]];
        assert!((chamfer_l2(&p, &ph).unwrap() - 2.0).abs() < 1e-6);

        let p = vec![[0.0f32, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let ph = vec![[0.0f32, 0.0, 0.0]];
        assert!((chamfer_l2(&p, &ph).unwrap() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn chamfer_zero_on_equal_and_symmetric() {
        let p = random_points(32, 1);
        assert_eq!(chamfer_l2(&p, &p).unwrap(), 0.0);
        let q = random_points(24, 2);
        assert_eq!(chamfer_l2(&p, &q).unwrap(), chamfer_l2(&q, &p).unwrap());
        assert!(chamfer_l2(&p, &q).unwrap() > 0.0);
    }

    #[test]
    fn chamfer_rejects_empty() {
        let p = random_points(4, 3);
        assert!(chamfer_l2(&p, &[]).is_err());
        assert!(chamfer_l2(&[], &p).is_err());
    }

    #[test]
    fn bce_saturated_logits_approach_zero() {
        let mut g = Graph::<f32>::new();
        let mask = vec![true, false, true];
        let x = g.input(Tensor::new(vec![3], vec![30.0, -30.0, 30.0]));
        let l = perturbation_cls_loss(&mut g, x, &mask).unwrap();
        assert!(g.scalar(l) < 1e-9);
    }

    #[test]
    fn delta_mse_hand_values() {
        let mut g = Graph::<f32>::new();
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]);
        let x = g.input(Tensor::new(vec![2, 3], vec![1.0; 6]));
        let l = delta_mse_loss(&mut g, x, &t).unwrap();
        assert_eq!(g.scalar(l), 1.0);
        let y = g.input(t.clone());
        let l0 = delta_mse_loss(&mut g, y, &t).unwrap();
        assert_eq!(g.scalar(l0), 0.0);
    }

    #[test]
    fn delta_mse_matches_two_loop_oracle() {
        let mut rng = rng_for(10, 93, 0);
        let pred: Vec<f32> = (0..24).map(|_| rng.random_range(-2.0..2.0)).collect();
        let tgt: Vec<f32> = (0..24).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut acc = 0.0f64;
        for (a, b) in pred.iter().zip(&tgt) {
            acc += ((*a - *b) as f64).powi(2);
        }
        let want = acc / 24.0;
        let mut g = Graph::<f32>::new();
        let t = Tensor::new(vec![8, 3], tgt);
        let x = g.input(Tensor::new(vec![8, 3], pred));
        let l = delta_mse_loss(&mut g, x, &t).unwrap();
        assert!((g.scalar(l) as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn bce_matches_per_point_oracle() {
        let mut rng = rng_for(11, 92, 0);
        let logits: Vec<f32> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mask: Vec<bool> = (0..16).map(|_| rng.random_range(0..2) == 1).collect();
        let mut acc = 0.0f64;
        for (x, t) in logits.iter().zip(&mask) {
            let x = *x as f64;
            let t = if *t { 1.0 } else { 0.0 };
            let p = 1.0 / (1.0 + (-x).exp());
            acc += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
        }
        let want = acc / 16.0;
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(vec![16], logits));
        let l = perturbation_cls_loss(&mut g, x, &mask).unwrap();
        assert!((g.scalar(l) as f64 - want).abs() < 1e-6, "{} vs {want}", g.scalar(l));
    }

    #[test]
    fn pointnet_assembly_matches_weights() {
        let mut g = Graph::<f32>::new();
        let lc = g.input(Tensor::scalar(2.0));
        let lr = g.input(Tensor::scalar(1.0));
        let (total, bd) = pointnet_total_loss(&mut g, lc, lr, 0.001, 1.5).unwrap();
        assert!((g.scalar(total) - 1.502).abs() < 1e-6);
        assert!((bd.total - 1.502).abs() < 1e-6);
        assert!((bd.component("cls").unwrap() - 0.002).abs() < 1e-9);
        assert!((bd.component("rec").unwrap() - 1.5).abs() < 1e-9);

        let (z, _) = pointnet_total_loss(&mut g, lc, lr, 0.0, 0.0).unwrap();
        let lc0 = g.input(Tensor::scalar(0.0));
        let lr0 = g.input(Tensor::scalar(0.0));
        let (zz, _) = pointnet_total_loss(&mut g, lc0, lr0, 0.001, 1.5).unwrap();
        assert_eq!(g.scalar(z), 0.0);
        assert_eq!(g.scalar(zz), 0.0);
    }

    #[test]
    fn vq_loss_hand_values_and_grad_routing() {
        // z_e = (1,0), e = (0,0), α = 1, β = 0.25
        let mut g = Graph::<f32>::new();
        let z_e = g.input(Tensor::new(vec![1, 2], vec![1.0, 0.0]));
        let e = g.input(Tensor::new(vec![1, 2], vec![0.0, 0.0]));
        let rec = g.input(Tensor::scalar(0.0));
        let (total, bd) = vq_total_loss(&mut g, rec, z_e, e, 1.0, 0.25).unwrap();
        assert!((bd.component("codebook").unwrap() - 1.0).abs() < 1e-6);
        assert!((bd.component("commit").unwrap() - 0.25).abs() < 1e-6);
        assert!((g.scalar(total) - 1.25).abs() < 1e-6);

        g.backward(total);
        // ∂total/∂z_e comes only from the β-term: 2β(z_e − e) = (0.5, 0)
        assert_eq!(g.grad(z_e).unwrap(), &[0.5, 0.0]);
        // ∂total/∂e comes only from the α-term: 2α(e − z_e) = (−2, 0)
        assert_eq!(g.grad(e).unwrap(), &[-2.0, 0.0]);
    }

    #[test]
    fn vq_loss_zero_when_z_matches_codebook() {
        let mut g = Graph::<f32>::new();
        let vals = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.2, 0.3]);
        let z_e = g.input(vals.clone());
        let e = g.input(vals);
        let rec = g.input(Tensor::scalar(0.7));
        let (total, bd) = vq_total_loss(&mut g, rec, z_e, e, 1.0, 0.25).unwrap();
        assert_eq!(bd.component("codebook").unwrap(), 0.0);
        assert_eq!(bd.component("commit").unwrap(), 0.0);
        assert!((g.scalar(total) - 0.7).abs() < 1e-7);
    }

    #[test]
    fn breakdown_total_is_sum_of_components() {
        let bd = LossBreakdown::new(vec![("a".into(), 0.25), ("b".into(), 1.5)]);
        assert!((bd.total - 1.75).abs() < 1e-12);
        let mean = LossBreakdown::mean_of(&[bd.clone(), bd]);
        assert!((mean.total - 1.75).abs() < 1e-12);
    }
}
