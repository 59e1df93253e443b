//! Point containers, unit-cube normalization and the per-scale cell frame.
//!
//! At scale `s` the cube `[-1, 1]^3` is split into `s^3` axis-aligned cells
//! of width `2/s`. Cells are half-open `[lo, hi)` per axis except the last
//! one, which also owns the `+1` face, so every in-cube point has exactly
//! one cell.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Default margin left between the normalized bounding box and the cube
/// faces: boxes are fit into `[-0.95, 0.95]^3`.
pub const NORMALIZE_MARGIN: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
}

impl PointCloud {
    /// Builds a cloud; normals, if given, are rescaled to unit length.
    pub fn new(points: Vec<Vec3>, normals: Option<Vec<Vec3>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(p) = points.iter().find(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite([p.x, p.y, p.z]));
        }
        let normals = match normals {
            Some(ns) => {
                if ns.len() != points.len() {
                    return Err(Error::Config(format!(
                        "{} normals for {} points",
                        ns.len(),
                        points.len()
                    )));
                }
                let mut out = Vec::with_capacity(ns.len());
                for n in ns {
                    let len = n.norm();
                    if !(len.is_finite() && len > 0.0) {
                        return Err(Error::NonFinite([n.x, n.y, n.z]));
                    }
                    out.push(n / len);
                }
                Some(out)
            }
            None => None,
        };
        Ok(Self { points, normals })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn without_normals(mut self) -> Self {
        self.normals = None;
        self
    }

    /// Errors unless every point lies in `[-1, 1]^3`.
    pub fn check_in_cube(&self) -> Result<()> {
        self.points.iter().try_for_each(check_in_cube)
    }

    /// Reorders points (and normals) by `order`, which must be a permutation.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            points: order.iter().map(|&i| self.points[i]).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| order.iter().map(|&i| ns[i]).collect()),
        }
    }
}

/// Query points in normalized space, with ground-truth signed distances when
/// used for training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QuerySet {
    pub points: Vec<Vec3>,
    pub gt_signed_distance: Option<Vec<f64>>,
}

impl QuerySet {
    pub fn new(points: Vec<Vec3>, gt_signed_distance: Option<Vec<f64>>) -> Result<Self> {
        if let Some(gt) = &gt_signed_distance {
            if gt.len() != points.len() {
                return Err(Error::Config(format!(
                    "{} distances for {} queries",
                    gt.len(),
                    points.len()
                )));
            }
        }
        Ok(Self {
            points,
            gt_signed_distance,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Uniform scale and translation taking world coordinates to the unit cube:
/// `normalized = (world - center) * scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizeTransform {
    pub center: [f64; 3],
    pub scale: f64,
}

impl NormalizeTransform {
    pub fn identity() -> Self {
        Self {
            center: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        (p - Vec3::from(self.center)) * self.scale
    }

    pub fn invert(&self, p: &Vec3) -> Vec3 {
        p / self.scale + Vec3::from(self.center)
    }

    /// Converts a normalized-space distance to world units.
    pub fn distance_to_world(&self, d: f64) -> f64 {
        d / self.scale
    }
}

/// Centers the bounding box and scales it uniformly to fit
/// `[-(1 - margin), 1 - margin]^3`. A degenerate box (all points equal)
/// gets scale 1 and a pure translation.
pub fn normalize_with_margin(raw: &[Vec3], margin: f64) -> Result<(PointCloud, NormalizeTransform)> {
    if raw.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(p) = raw.iter().find(|p| !p.iter().all(|c| c.is_finite())) {
        return Err(Error::NonFinite([p.x, p.y, p.z]));
    }
    let mut lo = raw[0];
    let mut hi = raw[0];
    for p in raw {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let center = (lo + hi) * 0.5;
    let half = (hi - lo).max() * 0.5;
    let scale = if half > 0.0 { (1.0 - margin) / half } else { 1.0 };
    let transform = NormalizeTransform {
        center: [center.x, center.y, center.z],
        scale,
    };
    let points = raw
        .iter()
        .map(|p| clamp_cube(transform.apply(p)))
        .collect();
    Ok((PointCloud::new(points, None)?, transform))
}

/// [`normalize_with_margin`] with the default 5% margin.
pub fn normalize_to_unit_cube(raw: &[Vec3]) -> Result<(PointCloud, NormalizeTransform)> {
    normalize_with_margin(raw, NORMALIZE_MARGIN)
}

/// Normalizes a cloud that carries normals; normals are unchanged by a
/// uniform scale.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<(PointCloud, NormalizeTransform)> {
    let (normed, t) = normalize_to_unit_cube(cloud.points())?;
    let normed = PointCloud::new(normed.points, cloud.normals().map(<[Vec3]>::to_vec))?;
    Ok((normed, t))
}

// Rounding can push an extreme coordinate a few ulps past the face.
fn clamp_cube(p: Vec3) -> Vec3 {
    p.map(|c| c.clamp(-1.0, 1.0))
}

pub fn check_in_cube(p: &Vec3) -> Result<()> {
    if p.iter().all(|c| (-1.0..=1.0).contains(c)) {
        Ok(())
    } else {
        Err(Error::OutsideCube {
            point: [p.x, p.y, p.z],
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CellIndex {
    pub scale: usize,
    pub ijk: [usize; 3],
}

impl CellIndex {
    /// Row-major index in `0..scale^3` (x slowest).
    pub fn linear(&self) -> usize {
        let s = self.scale;
        (self.ijk[0] * s + self.ijk[1]) * s + self.ijk[2]
    }

    pub fn from_linear(scale: usize, idx: usize) -> Self {
        Self {
            scale,
            ijk: [idx / (scale * scale), (idx / scale) % scale, idx % scale],
        }
    }

    pub fn center(&self) -> Vec3 {
        let w = 2.0 / self.scale as f64;
        Vec3::new(
            -1.0 + (self.ijk[0] as f64 + 0.5) * w,
            -1.0 + (self.ijk[1] as f64 + 0.5) * w,
            -1.0 + (self.ijk[2] as f64 + 0.5) * w,
        )
    }
}

/// Cell index along one axis; the caller guarantees `x` is in `[-1, 1]`.
pub(crate) fn axis_cell(x: f64, scale: usize) -> usize {
    let i = ((x + 1.0) * scale as f64 / 2.0).floor();
    (i.max(0.0) as usize).min(scale - 1)
}

pub fn cell_of(p: &Vec3, scale: usize) -> Result<CellIndex> {
    if scale == 0 {
        return Err(Error::Config("scale must be positive".into()));
    }
    check_in_cube(p)?;
    Ok(CellIndex {
        scale,
        ijk: [axis_cell(p.x, scale), axis_cell(p.y, scale), axis_cell(p.z, scale)],
    })
}

/// Coordinates of `p` in the frame of its containing cell at `scale`: the
/// cell center maps to the origin and the cell to `[-1, 1]^3`.
pub fn to_cell_coordinates(p: &Vec3, scale: usize) -> Result<Vec3> {
    let cell = cell_of(p, scale)?;
    Ok(clamp_cube((p - cell.center()) * scale as f64))
}
