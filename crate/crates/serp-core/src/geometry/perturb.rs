//! Patch-wise Gaussian corruption: pick centers, gather each center's
//! nearest neighbors into a patch, and noise the union of patch members.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::cloud::PointCloud;
use crate::geometry::fps::fps;
use crate::geometry::knn::knn;
use crate::rng::{rng_for, tags};

/// How perturbation centers are chosen. `Fps` pushes corruption toward
/// shape extremities instead of uniformly over the volume.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PerturbCenters {
    #[default]
    Random,
    Fps,
}

#[derive(Clone, Debug)]
pub struct PerturbationRecord {
    pub perturbed: PointCloud,
    /// true = point was displaced; exactly the union of the patch index sets.
    pub mask: Vec<bool>,
    pub sigma: f32,
    pub seed: u64,
}

impl PerturbationRecord {
    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Corrupt `num_centers` patches of `patch_size` neighbors with i.i.d.
/// Gaussian noise of the given standard deviation. Overlapping patches
/// noise a shared point once.
pub fn perturb(
    cloud: &PointCloud,
    num_centers: usize,
    patch_size: usize,
    sigma: f32,
    seed: u64,
) -> Result<PerturbationRecord> {
    perturb_with(cloud, num_centers, patch_size, sigma, seed, PerturbCenters::Random)
}

pub fn perturb_with(
    cloud: &PointCloud,
    num_centers: usize,
    patch_size: usize,
    sigma: f32,
    seed: u64,
    centers: PerturbCenters,
) -> Result<PerturbationRecord> {
    let n = cloud.len();
    if num_centers > n {
        return Err(Error::invalid_argument(format!(
            "perturb: {num_centers} centers exceed cloud size {n}"
        )));
    }
    if patch_size > n {
        return Err(Error::invalid_argument(format!(
            "perturb: patch size {patch_size} exceeds cloud size {n}"
        )));
    }
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::invalid_argument(format!(
            "perturb: sigma must be finite and nonnegative, got {sigma}"
        )));
    }

    let mut rng = rng_for(seed, tags::PERTURB, 0);
    let center_idx: Vec<usize> = match centers {
        PerturbCenters::Random => {
            // uniform without replacement via partial Fisher-Yates
            let mut pool: Vec<usize> = (0..n).collect();
            for i in 0..num_centers {
                let j = rng.random_range(i..n);
                pool.swap(i, j);
            }
            pool.truncate(num_centers);
            pool
        }
        PerturbCenters::Fps => fps(cloud, num_centers.max(1), seed)?
            .into_iter()
            .take(num_centers)
            .collect(),
    };

    let center_pts: Vec<[f32; 3]> = center_idx.iter().map(|&i| *cloud.point(i)).collect();
    let patches = knn(cloud, &center_pts, patch_size)?;

    let mut mask = vec![false; n];
    for row in &patches {
        for &i in row {
            mask[i] = true;
        }
    }

    let mut perturbed = cloud.clone();
    if sigma > 0.0 {
        // ascending index order keeps the noise stream reproducible
        let pts = perturbed.points_mut();
        for (i, m) in mask.iter().enumerate() {
            if *m {
                for v in pts[i].iter_mut() {
                    *v += sigma * rng.sample::<f32, _>(StandardNormal);
                }
            }
        }
    }

    Ok(PerturbationRecord {
        perturbed,
        mask,
        sigma,
        seed,
    })
}
