//! Mesh comparison: Chamfer-L2 (×100) and normal consistency over
//! area-uniform surface samples.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::mesh::TriangleMesh;

/// Exact nearest-point queries over a fixed point set, bucketed in a
/// uniform grid over its bounding box. Ties go to the lowest index.
pub struct NearestIndex {
    points: Vec<Vec3>,
    lo: Vec3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<u32>,
    items: Vec<u32>,
}

impl NearestIndex {
    pub fn build(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = (hi - lo).max().max(1e-12);
        // about two points per cell along the longest axis
        let per_axis = ((points.len() as f64 / 2.0).cbrt().ceil() as usize).clamp(1, 128);
        let cell = extent / per_axis as f64;
        let dims = [0, 1, 2].map(|a| (((hi[a] - lo[a]) / cell).floor() as usize + 1).min(per_axis + 1));
        let n_cells = dims[0] * dims[1] * dims[2];
        let mut index = Self {
            points: points.to_vec(),
            lo,
            cell,
            dims,
            starts: vec![0; n_cells + 1],
            items: vec![0; points.len()],
        };
        let cells: Vec<usize> = points.iter().map(|p| index.linear(index.cell_of(p))).collect();
        for &c in &cells {
            index.starts[c + 1] += 1;
        }
        for c in 0..n_cells {
            index.starts[c + 1] += index.starts[c];
        }
        let mut fill = index.starts.clone();
        for (i, &c) in cells.iter().enumerate() {
            index.items[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        Ok(index)
    }

    fn cell_of(&self, p: &Vec3) -> [usize; 3] {
        [0, 1, 2].map(|a| {
            let t = ((p[a] - self.lo[a]) / self.cell).floor();
            (t.max(0.0) as usize).min(self.dims[a] - 1)
        })
    }

    fn linear(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// `(index, squared distance)` of the nearest point.
    pub fn nearest(&self, q: &Vec3) -> (usize, f64) {
        let c = self.cell_of(q);
        let mut best = (usize::MAX, f64::INFINITY);
        let max_ring = *self.dims.iter().max().expect("three axes");
        for ring in 0..=max_ring as isize {
            // everything at ring `ring` or beyond is at least (ring-1) cells away
            let bound = ((ring - 1).max(0) as f64) * self.cell;
            if bound * bound > best.1 {
                break;
            }
            self.scan_ring(q, c, ring, &mut best);
        }
        best
    }

    fn scan_ring(&self, q: &Vec3, c: [usize; 3], ring: isize, best: &mut (usize, f64)) {
        let range = |a: usize| {
            let lo = (c[a] as isize - ring).max(0);
            let hi = (c[a] as isize + ring).min(self.dims[a] as isize - 1);
            (lo, hi)
        };
        let (x0, x1) = range(0);
        let (y0, y1) = range(1);
        let (z0, z1) = range(2);
        for x in x0..=x1 {
            let dx = (x - c[0] as isize).abs();
            for y in y0..=y1 {
                let dy = (y - c[1] as isize).abs();
                let on_shell = dx == ring || dy == ring;
                let mut z = z0;
                while z <= z1 {
                    let dz = (z - c[2] as isize).abs();
                    if on_shell || dz == ring {
                        let cell = self.linear([x as usize, y as usize, z as usize]);
                        for &i in &self.items[self.starts[cell] as usize..self.starts[cell + 1] as usize] {
                            let d2 = (self.points[i as usize] - q).norm_squared();
                            let i = i as usize;
                            if d2 < best.1 || (d2 == best.1 && i < best.0) {
                                *best = (i, d2);
                            }
                        }
                        z += 1;
                    } else {
                        // skip the interior of the shell in one jump
                        z = (c[2] as isize + ring).max(z + 1);
                    }
                }
            }
        }
    }
}

/// Linear scan; ties to the lowest index.
pub fn nearest_brute(points: &[Vec3], q: &Vec3) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d2 = (p - q).norm_squared();
        if d2 < best.1 {
            best = (i, d2);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub chamfer_l2_x100: f64,
    pub normal_consistency: f64,
    pub samples_a: usize,
    pub samples_b: usize,
}

struct Sampled {
    points: Vec<Vec3>,
    normals: Vec<Vec3>,
}

fn sample(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<Sampled> {
    if mesh.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let (points, normals) = mesh.sample_surface(n, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(Sampled { points, normals })
}

/// For each point of `from`, squared distance and `|n·n'|` to its nearest
/// neighbor in `to`.
fn one_way(from: &Sampled, to: &Sampled) -> Result<(f64, f64)> {
    let index = NearestIndex::build(&to.points)?;
    let per_point: Vec<(f64, f64)> = from
        .points
        .par_iter()
        .zip(&from.normals)
        .map(|(p, n)| {
            let (j, d2) = index.nearest(p);
            (d2, n.dot(&to.normals[j]).abs())
        })
        .collect();
    // summed in order so the result does not depend on the thread count
    let (d, c) = per_point.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let k = from.points.len() as f64;
    Ok((d / k, c / k))
}

/// Both meshes are sampled with the same seed, so the result is symmetric
/// and a mesh against itself scores exactly 0 / 1.
pub fn compare_meshes(a: &TriangleMesh, b: &TriangleMesh, n_samples: usize, seed: u64) -> Result<MetricReport> {
    if n_samples == 0 {
        return Err(Error::Config("metric sample count must be positive".into()));
    }
    let sa = sample(a, n_samples, seed)?;
    let sb = sample(b, n_samples, seed)?;
    let (dab, cab) = one_way(&sa, &sb)?;
    let (dba, cba) = one_way(&sb, &sa)?;
    Ok(MetricReport {
        chamfer_l2_x100: 100.0 * (dab + dba),
        normal_consistency: 0.5 * (cab + cba),
        samples_a: n_samples,
        samples_b: n_samples,
    })
}

pub fn chamfer_l2(a: &TriangleMesh, b: &TriangleMesh, n_samples: usize, seed: u64) -> Result<f64> {
    Ok(compare_meshes(a, b, n_samples, seed)?.chamfer_l2_x100)
}

pub fn normal_consistency(a: &TriangleMesh, b: &TriangleMesh, n_samples: usize, seed: u64) -> Result<f64> {
    Ok(compare_meshes(a, b, n_samples, seed)?.normal_consistency)
}
