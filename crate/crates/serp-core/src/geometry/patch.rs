//! Tokenization: FPS centers, KNN patch membership, and per-patch
//! normalization with retained statistics.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::geometry::cloud::PointCloud;
use crate::geometry::fps::fps;
use crate::geometry::knn::knn;

/// Floor for the normalization divisor; keeps degenerate (near-constant)
/// patches at zero instead of NaN.
pub const STD_CLAMP: f32 = 1e-8;

/// Per-patch 3-vector mean and scalar standard deviation over all 3n
/// coordinate values. A scalar std preserves patch anisotropy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchStats {
    pub mean: [f32; 3],
    pub std: f32,
}

impl PatchStats {
    fn compute(points: &[[f32; 3]]) -> Self {
        let n = points.len() as f64;
        let mut mean = [0.0f64; 3];
        for p in points {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += *v as f64;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = 0.0f64;
        for p in points {
            for k in 0..3 {
                var += (p[k] as f64 - mean[k]).powi(2);
            }
        }
        var /= 3.0 * n;
        PatchStats {
            mean: [mean[0] as f32, mean[1] as f32, mean[2] as f32],
            std: (var.sqrt() as f32).max(0.0),
        }
    }

    fn divisor(&self) -> f32 {
        self.std.max(STD_CLAMP)
    }

    pub fn normalize(&self, p: &[f32; 3]) -> [f32; 3] {
        let d = self.divisor();
        [
            (p[0] - self.mean[0]) / d,
            (p[1] - self.mean[1]) / d,
            (p[2] - self.mean[2]) / d,
        ]
    }

    pub fn denormalize(&self, p: &[f32; 3]) -> [f32; 3] {
        let d = self.divisor();
        [
            p[0] * d + self.mean[0],
            p[1] * d + self.mean[1],
            p[2] * d + self.mean[2],
        ]
    }
}

/// c center-normalized patches of n points each.
#[derive(Clone, Debug)]
pub struct PatchSet {
    pub num_patches: usize,
    pub patch_size: usize,
    /// Center coordinates in the cloud's frame, one per patch.
    pub centers: Vec<[f32; 3]>,
    /// Row-major c×n indices into the source cloud.
    pub indices: Vec<usize>,
    /// Normalized coordinates, shape [c, n, 3].
    pub patches: Tensor<f32>,
    pub stats: Vec<PatchStats>,
}

impl PatchSet {
    pub fn patch_indices(&self, patch: usize) -> &[usize] {
        &self.indices[patch * self.patch_size..(patch + 1) * self.patch_size]
    }

    /// Patches as a [c·n, 3] matrix for model input.
    pub fn flat_points(&self) -> Tensor<f32> {
        self.patches
            .clone()
            .reshaped(vec![self.num_patches * self.patch_size, 3])
            .expect("patch buffer is c*n*3")
    }

    /// Centers as a [c, 3] matrix.
    pub fn centers_tensor(&self) -> Tensor<f32> {
        Tensor::new(
            vec![self.num_patches, 3],
            self.centers.iter().flatten().copied().collect(),
        )
    }

    /// Points of `source` at this patch layout, normalized with *this*
    /// set's statistics: the shared frame for reconstruction targets.
    pub fn normalized_from(&self, source: &PointCloud) -> Result<Tensor<f32>> {
        if source.len() <= *self.indices.iter().max().unwrap_or(&0) {
            return Err(Error::shape(format!(
                "source cloud of {} points does not cover patch indices",
                source.len()
            )));
        }
        let mut data = Vec::with_capacity(self.indices.len() * 3);
        for (pi, chunk) in self.indices.chunks(self.patch_size).enumerate() {
            let st = &self.stats[pi];
            for &idx in chunk {
                data.extend_from_slice(&st.normalize(source.point(idx)));
            }
        }
        Ok(Tensor::new(
            vec![self.num_patches, self.patch_size, 3],
            data,
        ))
    }

    /// Map normalized patch coordinates (ours or a model's prediction of
    /// them, shape [c, n, 3] or [c·n, 3]) back to the cloud frame.
    pub fn denormalized(&self, normalized: &Tensor<f32>) -> Result<Vec<[f32; 3]>> {
        let expected = self.num_patches * self.patch_size * 3;
        if normalized.numel() != expected {
            return Err(Error::shape(format!(
                "denormalize: {} values, expected {expected}",
                normalized.numel()
            )));
        }
        let d = normalized.data();
        let mut out = Vec::with_capacity(self.num_patches * self.patch_size);
        for pi in 0..self.num_patches {
            let st = &self.stats[pi];
            for j in 0..self.patch_size {
                let base = (pi * self.patch_size + j) * 3;
                out.push(st.denormalize(&[d[base], d[base + 1], d[base + 2]]));
            }
        }
        Ok(out)
    }
}

/// Split a cloud into c patches of n nearest neighbors around FPS centers,
/// each patch normalized to zero mean and unit scalar std.
pub fn tokenize(cloud: &PointCloud, c: usize, n: usize, seed: u64) -> Result<PatchSet> {
    let center_idx = fps(cloud, c, seed)?;
    let centers: Vec<[f32; 3]> = center_idx.iter().map(|&i| *cloud.point(i)).collect();
    let rows = knn(cloud, &centers, n)?;

    let mut indices = Vec::with_capacity(c * n);
    let mut data = Vec::with_capacity(c * n * 3);
    let mut stats = Vec::with_capacity(c);
    for row in &rows {
        let pts: Vec<[f32; 3]> = row.iter().map(|&i| *cloud.point(i)).collect();
        let st = PatchStats::compute(&pts);
        for p in &pts {
            data.extend_from_slice(&st.normalize(p));
        }
        indices.extend_from_slice(row);
        stats.push(st);
    }

    Ok(PatchSet {
        num_patches: c,
        patch_size: n,
        centers,
        indices,
        patches: Tensor::new(vec![c, n, 3], data),
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng as _;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = rng_for(seed, 95, 0);
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

    #[test]
    fn shapes_follow_config() {
        let c = random_cloud(1024, 1);
        let ps = tokenize(&c, 64, 32, 7).unwrap();
        assert_eq!(ps.patches.shape(), &[64, 32, 3]);
        assert_eq!(ps.indices.len(), 64 * 32);
        assert!(ps.indices.iter().all(|&i| i < 1024));
    }

    #[test]
    fn patches_are_normalized() {
        let c = random_cloud(256, 2);
        let ps = tokenize(&c, 16, 16, 3).unwrap();
        for pi in 0..16 {
            let mut mean = [0.0f64; 3];
            let mut var = 0.0f64;
            let d = ps.patches.data();
            for j in 0..16 {
                let base = (pi * 16 + j) * 3;
                for k in 0..3 {
                    mean[k] += d[base + k] as f64;
                }
            }
            for m in mean.iter_mut() {
                *m /= 16.0;
            }
            for j in 0..16 {
                let base = (pi * 16 + j) * 3;
                for k in 0..3 {
                    var += (d[base + k] as f64 - mean[k]).powi(2);
                }
            }
            var /= 48.0;
            for m in mean {
                assert!(m.abs() < 1e-5, "patch {pi} mean {m}");
            }
            assert!((var.sqrt() - 1.0).abs() < 1e-4, "patch {pi} std {}", var.sqrt());
        }
    }

    #[test]
    fn degenerate_patch_is_all_zeros() {
        let pts = vec![[0.25f32, -0.5, 1.0]; 8];
        let mut all = pts.clone();
        all.push([5.0, 5.0, 5.0]); // keep the cloud non-degenerate overall
        let cloud = PointCloud::new(all).unwrap();
        let row: Vec<usize> = (0..8).collect();
        let patch_pts: Vec<[f32; 3]> = row.iter().map(|&i| *cloud.point(i)).collect();
        let st = PatchStats::compute(&patch_pts);
        assert!(st.std < STD_CLAMP);
        for p in &patch_pts {
            let n = st.normalize(p);
            assert_eq!(n, [0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn denormalize_round_trip() {
        let c = random_cloud(512, 4);
        let ps = tokenize(&c, 32, 16, 9).unwrap();
        let back = ps.denormalized(&ps.patches).unwrap();
        for (flat_idx, &cloud_idx) in ps.indices.iter().enumerate() {
            let orig = c.point(cloud_idx);
            let got = back[flat_idx];
            for k in 0..3 {
                assert!(
                    (orig[k] - got[k]).abs() < 1e-5,
                    "index {flat_idx}: {orig:?} vs {got:?}"
                );
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let c = random_cloud(256, 5);
        let a = tokenize(&c, 8, 8, 11).unwrap();
        let b = tokenize(&c, 8, 8, 11).unwrap();
        assert_eq!(a.indices, b.indices);
        assert_eq!(a.patches.data(), b.patches.data());
    }

    #[test]
    fn normalized_from_self_matches_patches() {
        let c = random_cloud(128, 6);
        let ps = tokenize(&c, 8, 8, 2).unwrap();
        let again = ps.normalized_from(&c).unwrap();
        assert_eq!(again.data(), ps.patches.data());
    }
}
