//! Brute-force k-nearest-neighbor queries. Clouds stay small enough at
//! desk scale that a selection pass beats any acceleration structure.

use crate::error::{Error, Result};
use crate::geometry::cloud::{dist2, PointCloud};
use crate::par;

/// Indices of the `n` points of `cloud` nearest to `query`, sorted by
/// nondecreasing distance, ties broken by lower index.
pub fn knn_indices(cloud: &PointCloud, query: &[f32; 3], n: usize) -> Result<Vec<usize>> {
    let total = cloud.len();
    if n > total {
        return Err(Error::invalid_argument(format!(
            "knn: n = {n} exceeds cloud size {total}"
        )));
    }
    let mut scored: Vec<(f32, usize)> = cloud
        .points()
        .iter()
        .enumerate()
        .map(|(i, p)| (dist2(p, query), i))
        .collect();
    let cmp = |a: &(f32, usize), b: &(f32, usize)| {
        a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
    };
    if n < total {
        scored.select_nth_unstable_by(n - 1, cmp);
        scored.truncate(n);
    }
    scored.sort_unstable_by(cmp);
    Ok(scored.into_iter().map(|(_, i)| i).collect())
}

/// One row of neighbor indices per query point.
pub fn knn(cloud: &PointCloud, query_points: &[[f32; 3]], n: usize) -> Result<Vec<Vec<usize>>> {
    if n > cloud.len() {
        return Err(Error::invalid_argument(format!(
            "knn: n = {n} exceeds cloud size {}",
            cloud.len()
        )));
    }
    let rows = par::map_collect(query_points.len(), 4, |q| {
        knn_indices(cloud, &query_points[q], n).expect("bounds checked above")
    });
    Ok(rows)
}
