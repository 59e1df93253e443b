//! Uniform cell buckets and cell-restricted nearest-neighbor search.

use crate::error::Result;
use crate::geometry::{axis_cell, cell_of, CellIndex, Vec3};

/// Point indices bucketed by cell at one scale, stored CSR-style: bucket `c`
/// is `indices[starts[c]..starts[c + 1]]`, ascending.
#[derive(Clone, Debug)]
pub struct SpatialHashGrid {
    scale: usize,
    starts: Vec<usize>,
    indices: Vec<u32>,
    point_cell: Vec<u32>,
}

impl SpatialHashGrid {
    pub fn build(points: &[Vec3], scale: usize) -> Result<Self> {
        let cells = scale * scale * scale;
        let mut point_cell = Vec::with_capacity(points.len());
        for p in points {
            point_cell.push(cell_of(p, scale)?.linear() as u32);
        }
        let mut starts = vec![0usize; cells + 1];
        for &c in &point_cell {
            starts[c as usize + 1] += 1;
        }
        for c in 0..cells {
            starts[c + 1] += starts[c];
        }
        let mut fill = starts.clone();
        let mut indices = vec![0u32; points.len()];
        for (i, &c) in point_cell.iter().enumerate() {
            indices[fill[c as usize]] = i as u32;
            fill[c as usize] += 1;
        }
        Ok(Self {
            scale,
            starts,
            indices,
            point_cell,
        })
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn num_cells(&self) -> usize {
        self.starts.len() - 1
    }

    pub fn num_points(&self) -> usize {
        self.indices.len()
    }

    pub fn bucket(&self, cell: usize) -> &[u32] {
        &self.indices[self.starts[cell]..self.starts[cell + 1]]
    }

    /// Linear cell index of every point.
    pub fn point_cells(&self) -> &[u32] {
        &self.point_cell
    }

    pub fn nonempty_cells(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_cells()).filter(|&c| self.starts[c] < self.starts[c + 1])
    }

    /// The `k` bucket residents of `cell` nearest to `query`, by ascending
    /// distance with ties broken by point index.
    pub fn knn_in_cell(&self, points: &[Vec3], query: &Vec3, cell: &CellIndex, k: usize) -> Vec<usize> {
        let mut cand: Vec<(f64, u32)> = self
            .bucket(cell.linear())
            .iter()
            .map(|&i| ((points[i as usize] - query).norm_squared(), i))
            .collect();
        take_k_nearest(&mut cand, k)
    }
}

/// [`SpatialHashGrid::build`] under its operation name.
pub fn build_spatial_hash(points: &[Vec3], scale: usize) -> Result<SpatialHashGrid> {
    SpatialHashGrid::build(points, scale)
}

fn take_k_nearest(cand: &mut Vec<(f64, u32)>, k: usize) -> Vec<usize> {
    let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if cand.len() > k && k > 0 {
        cand.select_nth_unstable_by(k - 1, cmp);
        cand.truncate(k);
    }
    cand.truncate(k);
    cand.sort_unstable_by(cmp);
    cand.iter().map(|c| c.1 as usize).collect()
}

/// Buckets at or below this size are scanned directly.
const DIRECT_SCAN_LIMIT: usize = 96;

/// Cell-restricted kNN over one point set at one scale. Large cells (the
/// single global cell at scale 1, say) are searched ring by ring over a finer
/// auxiliary grid; results are identical to scanning the whole bucket.
#[derive(Clone, Debug)]
pub struct CellKnnIndex {
    points: Vec<Vec3>,
    grid: SpatialHashGrid,
    fine: SpatialHashGrid,
}

impl CellKnnIndex {
    pub fn build(points: &[Vec3], scale: usize) -> Result<Self> {
        let grid = SpatialHashGrid::build(points, scale)?;
        // about two points per fine cell on average
        let fine_scale = ((points.len() as f64 / 2.0).cbrt().round() as usize).clamp(scale, 64);
        let fine = SpatialHashGrid::build(points, fine_scale)?;
        Ok(Self {
            points: points.to_vec(),
            grid,
            fine,
        })
    }

    pub fn grid(&self) -> &SpatialHashGrid {
        &self.grid
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn scale(&self) -> usize {
        self.grid.scale
    }

    pub fn knn_in_cell(&self, query: &Vec3, cell: &CellIndex, k: usize) -> Vec<usize> {
        let bucket = self.grid.bucket(cell.linear());
        if bucket.len() <= DIRECT_SCAN_LIMIT || bucket.len() <= k {
            return self.grid.knn_in_cell(&self.points, query, cell, k);
        }
        self.ring_search(query, cell, k)
    }

    fn ring_search(&self, query: &Vec3, cell: &CellIndex, k: usize) -> Vec<usize> {
        let s = self.grid.scale;
        let fs = self.fine.scale;
        let cw = 2.0 / s as f64;
        let fw = 2.0 / fs as f64;
        let target = cell.linear() as u32;
        let mut range = [(0usize, 0usize); 3];
        let mut qf = [0isize; 3];
        for a in 0..3 {
            let lo = -1.0 + cell.ijk[a] as f64 * cw;
            let hi = (lo + cw).min(1.0);
            range[a] = (axis_cell(lo, fs), axis_cell(hi, fs));
            qf[a] = axis_cell(query[a].clamp(-1.0, 1.0), fs) as isize;
        }
        let mut cand: Vec<(f64, u32)> = Vec::new();
        let max_ring = (0..3)
            .map(|a| (qf[a] - range[a].0 as isize).abs().max((range[a].1 as isize - qf[a]).abs()))
            .max()
            .unwrap_or(0);
        for r in 0..=max_ring {
            self.visit_ring(qf, r, &range, |i| {
                if self.grid.point_cell[i as usize] == target {
                    cand.push(((self.points[i as usize] - query).norm_squared(), i));
                }
            });
            if cand.len() >= k {
                let kth = kth_distance(&mut cand, k);
                // No point outside the (2r+1)^3 block of fine cells around
                // the query cell can be closer than the block boundary.
                let mut bound = f64::INFINITY;
                for a in 0..3 {
                    let lo_edge = -1.0 + (qf[a] - r) as f64 * fw;
                    let hi_edge = -1.0 + (qf[a] + r + 1) as f64 * fw;
                    bound = bound.min(query[a] - lo_edge).min(hi_edge - query[a]);
                }
                if bound > 0.0 && bound * bound > kth {
                    break;
                }
            }
        }
        take_k_nearest(&mut cand, k)
    }

    fn visit_ring(&self, center: [isize; 3], r: isize, range: &[(usize, usize); 3], mut f: impl FnMut(u32)) {
        let lo = |a: usize| (center[a] - r).max(range[a].0 as isize);
        let hi = |a: usize| (center[a] + r).min(range[a].1 as isize);
        let fs = self.fine.scale;
        for i in lo(0)..=hi(0) {
            for j in lo(1)..=hi(1) {
                let on_shell_ij = (i - center[0]).abs() == r || (j - center[1]).abs() == r;
                if on_shell_ij {
                    for k in lo(2)..=hi(2) {
                        let c = (i as usize * fs + j as usize) * fs + k as usize;
                        self.fine.bucket(c).iter().for_each(|&p| f(p));
                    }
                } else {
                    for k in [center[2] - r, center[2] + r] {
                        if k < lo(2) || k > hi(2) || (r == 0 && k != center[2]) {
                            continue;
                        }
                        let c = (i as usize * fs + j as usize) * fs + k as usize;
                        self.fine.bucket(c).iter().for_each(|&p| f(p));
                        if r == 0 {
                            break;
                        }
                    }
                }
            }
        }
    }
}

fn kth_distance(cand: &mut [(f64, u32)], k: usize) -> f64 {
    let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    cand.select_nth_unstable_by(k - 1, cmp);
    cand[k - 1].0
}
