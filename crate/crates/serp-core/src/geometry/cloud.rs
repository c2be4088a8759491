//! The ordered point cloud. Point identity is the index: every kernel
//! preserves order, and masks/index matrices refer to positions here.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<[f32; 3]>,
    label: Option<u32>,
}

pub fn dist2(a: &[f32; 3], b: &[f32; 3]) -> f32 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl PointCloud {
    /// At least one point, all coordinates finite.
    pub fn new(points: Vec<[f32; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid_argument("point cloud must be nonempty"));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid_argument(format!(
                "non-finite coordinate at point {i}"
            )));
        }
        Ok(PointCloud {
            points,
            label: None,
        })
    }

    pub fn with_label(points: Vec<[f32; 3]>, label: u32) -> Result<Self> {
        let mut c = Self::new(points)?;
        c.label = Some(label);
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: N >= 1
    }

    pub fn points(&self) -> &[[f32; 3]] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f32; 3] {
        &self.points[i]
    }

    pub fn label(&self) -> Option<u32> {
        self.label
    }

    pub fn set_label(&mut self, label: Option<u32>) {
        self.label = label;
    }

    pub(crate) fn points_mut(&mut self) -> &mut [[f32; 3]] {
        &mut self.points
    }

    /// Subset by index, preserving the given order and the label.
    pub fn select(&self, indices: &[usize]) -> Self {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            label: self.label,
        }
    }

    /// Center on the centroid and scale so the farthest point sits on the
    /// unit sphere. Applied at ingestion so noise magnitudes mean the same
    /// thing across data sources.
    pub fn normalize_unit_sphere(&mut self) {
        let n = self.points.len() as f64;
        let mut c = [0.0f64; 3];
        for p in &self.points {
            for (ci, v) in c.iter_mut().zip(p) {
                *ci += *v as f64;
            }
        }
        let c = [c[0] / n, c[1] / n, c[2] / n];
        let mut max_r2 = 0.0f64;
        for p in &self.points {
            let r2 = (0..3).map(|k| (p[k] as f64 - c[k]).powi(2)).sum::<f64>();
            max_r2 = max_r2.max(r2);
        }
        let scale = if max_r2 > 0.0 { 1.0 / max_r2.sqrt() } else { 1.0 };
        for p in &mut self.points {
            for k in 0..3 {
                p[k] = ((p[k] as f64 - c[k]) * scale) as f32;
            }
        }
    }

    /// Flat xyz buffer, used to feed model inputs.
    pub fn flat(&self) -> Vec<f32> {
        self.points.iter().flatten().copied().collect()
    }
}
