//! Farthest point sampling: greedily pick the point maximizing the minimum
//! distance to the already-selected set.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::geometry::cloud::{dist2, PointCloud};
use crate::par;
use crate::rng::{rng_for, tags};

/// FPS with a caller-chosen start index. Exposed so oracle comparisons can
/// share the start with a reference implementation.
pub fn fps_from_start(cloud: &PointCloud, k: usize, start: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if k == 0 {
        return Err(Error::invalid_argument("fps: k must be at least 1"));
    }
    if k > n {
        return Err(Error::invalid_argument(format!(
            "fps: k = {k} exceeds cloud size {n}"
        )));
    }
    if start >= n {
        return Err(Error::invalid_argument(format!(
            "fps: start index {start} out of range {n}"
        )));
    }

    let pts = cloud.points();
    let mut selected = Vec::with_capacity(k);
    // min squared distance to the selected set; selected entries drop to
    // -inf so they can never win the argmax again
    let mut min_d2 = vec![f32::INFINITY; n];
    let mut last = start;
    selected.push(start);
    min_d2[start] = f32::NEG_INFINITY;

    while selected.len() < k {
        let lp = pts[last];
        par::for_each_chunk_mut(&mut min_d2, 1024, 4, |ci, chunk| {
            let base = ci * 1024;
            for (j, m) in chunk.iter_mut().enumerate() {
                let d = dist2(&pts[base + j], &lp);
                if d < *m {
                    *m = d;
                }
            }
        });
        let next = par::argmax_by_key(n, 4096, |i| min_d2[i]);
        selected.push(next);
        min_d2[next] = f32::NEG_INFINITY;
        last = next;
    }
    Ok(selected)
}

/// Seeded FPS: the first point is drawn uniformly, the rest greedily.
pub fn fps(cloud: &PointCloud, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::invalid_argument("fps: k must be at least 1"));
    }
    if k > cloud.len() {
        return Err(Error::invalid_argument(format!(
            "fps: k = {k} exceeds cloud size {}",
            cloud.len()
        )));
    }
    let start = rng_for(seed, tags::TOKENIZE, 0).random_range(0..cloud.len());
    fps_from_start(cloud, k, start)
}

/// FPS-subset a dense cloud down to `m` points, selection order preserved.
pub fn downsample(dense: &PointCloud, m: usize, seed: u64) -> Result<PointCloud> {
    let idx = fps(dense, m, seed)?;
    Ok(dense.select(&idx))
}
