//! Mesh extraction: evaluate the field on voxels near the input points,
//! spread signs into the rest of the grid with an iterated box filter, then
//! run marching cubes and map back to world units.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::ReconstructionConfig;
use crate::encoder::MultiScaleFeatures;
use crate::error::{Error, Result};
use crate::geometry::{axis_cell, NormalizeTransform, PointCloud, Vec3};
use crate::marching_cubes::{marching_cubes, voxel_center, DenseGrid};
use crate::mesh::TriangleMesh;
use crate::model::Model;

/// Voxels with an evaluated value; every other voxel is empty.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseSdfGrid {
    pub resolution: usize,
    /// `(linear voxel index, value)`, ascending by index.
    pub known: Vec<(usize, f64)>,
}

impl SparseSdfGrid {
    pub fn new(resolution: usize, mut known: Vec<(usize, f64)>) -> Self {
        known.sort_unstable_by_key(|k| k.0);
        Self { resolution, known }
    }
}

fn linear(r: usize, i: usize, j: usize, k: usize) -> usize {
    (i * r + j) * r + k
}

/// Voxels within Chebyshev distance `radius` of a voxel holding an input
/// point, as ascending linear indices.
pub fn select_near_surface_voxels(points: &PointCloud, resolution: usize, radius: usize) -> Vec<usize> {
    let r = resolution;
    let mut mask = vec![false; r * r * r];
    for p in points.points() {
        let (i, j, k) = (axis_cell(p.x, r), axis_cell(p.y, r), axis_cell(p.z, r));
        mask[linear(r, i, j, k)] = true;
    }
    // A Chebyshev ball is a box, so the dilation separates per axis.
    for axis in 0..3 {
        mask = dilate_axis(&mask, r, radius, axis);
    }
    mask.iter().enumerate().filter_map(|(i, m)| m.then_some(i)).collect()
}

fn dilate_axis(mask: &[bool], r: usize, radius: usize, axis: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    let stride = [r * r, r, 1][axis];
    for base in 0..mask.len() {
        // visit each line once, from its first voxel
        let coord = (base / stride) % r;
        if coord != 0 {
            continue;
        }
        let mut last_set: Option<usize> = None;
        // forward sweep marks voxels within `radius` after a set voxel
        for c in 0..r {
            if mask[base + c * stride] {
                last_set = Some(c);
            }
            if let Some(l) = last_set {
                if c - l <= radius {
                    out[base + c * stride] = true;
                }
            }
        }
        let mut next_set: Option<usize> = None;
        for c in (0..r).rev() {
            if mask[base + c * stride] {
                next_set = Some(c);
            }
            if let Some(n) = next_set {
                if n - c <= radius {
                    out[base + c * stride] = true;
                }
            }
        }
    }
    out
}

/// Signed distances at `queries`, evaluated in independent chunks (in
/// parallel) against features computed once.
pub fn evaluate_sdf_batch(model: &Model, msf: &MultiScaleFeatures, queries: &[Vec3], chunk: usize) -> Result<Vec<f64>> {
    let parts = queries
        .par_chunks(chunk.max(1))
        .map(|c| model.predict_sdf(msf, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct PropagationStats {
    pub passes: usize,
    /// Voxels signed by the box filter.
    pub filled: usize,
    /// Voxels the filter never reached, signed by their nearest known voxel.
    pub fallback: usize,
}

fn sign_of(v: f64) -> i8 {
    if v < 0.0 {
        -1
    } else {
        1
    }
}

/// Spreads signs into empty voxels. Each synchronous pass sums the signs of
/// the known voxels in every empty voxel's `ε^3` window; a response above
/// `t_update` in magnitude makes the voxel known with that sign and
/// magnitude `τ`. Passes repeat until nothing changes; voxels still empty
/// then take the sign of the nearest known voxel (ties: lowest index).
pub fn propagate_signs(grid: &SparseSdfGrid, cfg: &ReconstructionConfig) -> Result<(DenseGrid, PropagationStats)> {
    if grid.known.is_empty() {
        return Err(Error::NoKnownVoxels);
    }
    let r = grid.resolution;
    let n = r * r * r;
    let half = (cfg.epsilon / 2) as isize;
    let tau = cfg.fill_voxels * 2.0 / r as f64;
    let mut sign = vec![0i8; n];
    let mut values = vec![0.0; n];
    for &(i, v) in &grid.known {
        sign[i] = sign_of(v);
        values[i] = v;
    }

    // Window sums are kept up to date incrementally: whenever a voxel gets a
    // sign, it is added to the response of every voxel in its window. Only
    // voxels whose response moved need re-testing.
    let mut response = vec![0i16; n];
    let mut dirty = vec![false; n];
    let mut candidates = Vec::new();
    let scatter = |idx: usize, s: i8, sign: &[i8], response: &mut [i16], candidates: &mut Vec<usize>, dirty: &mut [bool]| {
        let (i, j, k) = ((idx / (r * r)) as isize, ((idx / r) % r) as isize, (idx % r) as isize);
        let ri = r as isize;
        for di in -half..=half {
            let a = i + di;
            if a < 0 || a >= ri {
                continue;
            }
            for dj in -half..=half {
                let b = j + dj;
                if b < 0 || b >= ri {
                    continue;
                }
                let row = (a as usize * r + b as usize) * r;
                let lo = (k - half).max(0) as usize;
                let hi = (k + half).min(ri - 1) as usize;
                for c in lo..=hi {
                    let t = row + c;
                    response[t] += s as i16;
                    if sign[t] == 0 && !dirty[t] {
                        dirty[t] = true;
                        candidates.push(t);
                    }
                }
            }
        }
    };
    for &(i, _) in &grid.known {
        scatter(i, sign[i], &sign, &mut response, &mut candidates, &mut dirty);
    }

    let t_update = cfg.t_update as i16;
    let mut stats = PropagationStats::default();
    loop {
        stats.passes += 1;
        let current = std::mem::take(&mut candidates);
        let mut updates = Vec::new();
        for &c in &current {
            dirty[c] = false;
            if sign[c] == 0 && response[c].abs() > t_update {
                updates.push((c, if response[c] > 0 { 1i8 } else { -1 }));
            }
        }
        if updates.is_empty() {
            break;
        }
        for &(c, s) in &updates {
            sign[c] = s;
            values[c] = s as f64 * tau;
        }
        for &(c, s) in &updates {
            scatter(c, s, &sign, &mut response, &mut candidates, &mut dirty);
        }
        stats.filled += updates.len();
    }

    let unreached: Vec<usize> = (0..n).filter(|&i| sign[i] == 0).collect();
    stats.fallback = unreached.len();
    if !unreached.is_empty() {
        let fills: Vec<(usize, i8)> = unreached
            .par_iter()
            .map(|&u| (u, sign[nearest_known(&sign, r, u)]))
            .collect();
        for (u, s) in fills {
            values[u] = s as f64 * tau;
        }
    }
    Ok((DenseGrid::new(r, values), stats))
}

/// Nearest voxel with a sign by Euclidean index distance; ties go to the
/// lowest linear index. Searches Chebyshev shells outward until no closer
/// voxel can exist.
fn nearest_known(sign: &[i8], r: usize, u: usize) -> usize {
    let (i, j, k) = ((u / (r * r)) as isize, ((u / r) % r) as isize, (u % r) as isize);
    let ri = r as isize;
    let mut best: Option<(isize, usize)> = None;
    for shell in 1..ri {
        if let Some((d2, _)) = best {
            // every voxel on this shell is at least `shell` away
            if shell * shell > d2 {
                break;
            }
        }
        for di in -shell..=shell {
            let a = i + di;
            if a < 0 || a >= ri {
                continue;
            }
            for dj in -shell..=shell {
                let b = j + dj;
                if b < 0 || b >= ri {
                    continue;
                }
                let on_face = di.abs() == shell || dj.abs() == shell;
                let step = if on_face { 1 } else { 2 * shell };
                let mut dk = -shell;
                while dk <= shell {
                    let c = k + dk;
                    if c >= 0 && c < ri {
                        let idx = linear(r, a as usize, b as usize, c as usize);
                        if sign[idx] != 0 {
                            let d2 = di * di + dj * dj + dk * dk;
                            if best.is_none_or(|(bd, bi)| d2 < bd || (d2 == bd && idx < bi)) {
                                best = Some((d2, idx));
                            }
                        }
                    }
                    dk += step;
                }
            }
        }
    }
    best.expect("at least one known voxel").1
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub encode: f64,
    pub select: f64,
    pub evaluate: f64,
    pub propagate: f64,
    pub marching_cubes: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReconstructionReport {
    pub resolution: usize,
    pub evaluated_voxels: usize,
    pub propagation: PropagationStats,
    pub vertices: usize,
    pub triangles: usize,
    /// Seconds per stage.
    pub timings: StageTimings,
}

pub struct Reconstruction {
    /// World units.
    pub mesh: TriangleMesh,
    pub report: ReconstructionReport,
}

/// Full pipeline on a normalized cloud; `transform` maps the result back to
/// world units.
pub fn reconstruct(
    model: &Model,
    cloud: &PointCloud,
    transform: &NormalizeTransform,
    cfg: &ReconstructionConfig,
) -> Result<Reconstruction> {
    cfg.validate()?;
    let start = Instant::now();
    let msf = model.encode(cloud)?;
    let t_encode = start.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let voxels = select_near_surface_voxels(cloud, cfg.resolution, cfg.dilation);
    let centers: Vec<Vec3> = voxels
        .iter()
        .map(|&v| {
            let r = cfg.resolution;
            voxel_center(r, [v / (r * r), (v / r) % r, v % r])
        })
        .collect();
    let t_select = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let values = evaluate_sdf_batch(model, &msf, &centers, cfg.chunk_size)?;
    let t_eval = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let sparse = SparseSdfGrid::new(cfg.resolution, voxels.iter().copied().zip(values).collect());
    let (dense, propagation) = propagate_signs(&sparse, cfg)?;
    let t_prop = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let mesh = marching_cubes(&dense, 0.0).to_world(transform);
    let t_mc = t0.elapsed().as_secs_f64();

    let report = ReconstructionReport {
        resolution: cfg.resolution,
        evaluated_voxels: voxels.len(),
        propagation,
        vertices: mesh.vertices.len(),
        triangles: mesh.triangles.len(),
        timings: StageTimings {
            encode: t_encode,
            select: t_select,
            evaluate: t_eval,
            propagate: t_prop,
            marching_cubes: t_mc,
            total: start.elapsed().as_secs_f64(),
        },
    };
    Ok(Reconstruction { mesh, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ReconstructionConfig {
        ReconstructionConfig::default()
    }

    /// Straightforward reference: full window sums for every voxel on every
    /// pass, then brute-force nearest known voxel.
    pub(crate) fn propagate_reference(grid: &SparseSdfGrid, cfg: &ReconstructionConfig) -> Vec<f64> {
        let r = grid.resolution as isize;
        let n = (r * r * r) as usize;
        let half = (cfg.epsilon / 2) as isize;
        let tau = cfg.fill_voxels * 2.0 / r as f64;
        let mut sign = vec![0i32; n];
        let mut val = vec![0.0; n];
        for &(i, v) in &grid.known {
            sign[i] = if v < 0.0 { -1 } else { 1 };
            val[i] = v;
        }
        let at = |i: isize, j: isize, k: isize| ((i * r + j) * r + k) as usize;
        loop {
            let mut next = sign.clone();
            let mut changed = false;
            for i in 0..r {
                for j in 0..r {
                    for k in 0..r {
                        if sign[at(i, j, k)] != 0 {
                            continue;
                        }
                        let mut resp = 0;
                        for a in (i - half).max(0)..=(i + half).min(r - 1) {
                            for b in (j - half).max(0)..=(j + half).min(r - 1) {
                                for c in (k - half).max(0)..=(k + half).min(r - 1) {
                                    resp += sign[at(a, b, c)];
                                }
                            }
                        }
                        if resp.abs() > cfg.t_update as i32 {
                            next[at(i, j, k)] = resp.signum();
                            val[at(i, j, k)] = resp.signum() as f64 * tau;
                            changed = true;
                        }
                    }
                }
            }
            sign = next;
            if !changed {
                break;
            }
        }
        let known: Vec<usize> = (0..n).filter(|&i| sign[i] != 0).collect();
        for u in 0..n {
            if sign[u] != 0 {
                continue;
            }
            let pos = |x: usize| {
                let x = x as isize;
                (x / (r * r), (x / r) % r, x % r)
            };
            let (ui, uj, uk) = pos(u);
            let mut best = (isize::MAX, usize::MAX);
            for &q in &known {
                let (a, b, c) = pos(q);
                let d2 = (a - ui).pow(2) + (b - uj).pow(2) + (c - uk).pow(2);
                if d2 < best.0 || (d2 == best.0 && q < best.1) {
                    best = (d2, q);
                }
            }
            val[u] = sign[best.1] as f64 * tau;
        }
        val
    }

    #[test]
    fn dilation_examples() {
        let c = PointCloud::new(vec![Vec3::new(0.01, 0.01, 0.01)], None).unwrap();
        assert_eq!(select_near_surface_voxels(&c, 16, 0).len(), 1);
        assert_eq!(select_near_surface_voxels(&c, 16, 1).len(), 27);
        let corner = PointCloud::new(vec![Vec3::new(-1.0, -1.0, -1.0)], None).unwrap();
        assert_eq!(select_near_surface_voxels(&corner, 16, 1).len(), 8);
    }

    #[test]
    fn dilation_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts: Vec<Vec3> = (0..40)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let cloud = PointCloud::new(pts.clone(), None).unwrap();
        let r = 20usize;
        for radius in [0, 1, 3] {
            let got = select_near_surface_voxels(&cloud, r, radius);
            let occ: Vec<[isize; 3]> = pts
                .iter()
                .map(|p| [axis_cell(p.x, r) as isize, axis_cell(p.y, r) as isize, axis_cell(p.z, r) as isize])
                .collect();
            let mut expect = Vec::new();
            for v in 0..r * r * r {
                let ijk = [(v / (r * r)) as isize, ((v / r) % r) as isize, (v % r) as isize];
                if occ
                    .iter()
                    .any(|o| (0..3).map(|a| (o[a] - ijk[a]).abs()).max().unwrap() <= radius as isize)
                {
                    expect.push(v);
                }
            }
            assert_eq!(got, expect, "radius {radius}");
        }
    }

    #[test]
    fn fully_known_grid_is_unchanged() {
        let r = 6;
        let known: Vec<(usize, f64)> = (0..r * r * r).map(|i| (i, (i as f64 * 0.37).sin())).collect();
        let grid = SparseSdfGrid::new(r, known.clone());
        let (dense, stats) = propagate_signs(&grid, &cfg()).unwrap();
        assert_eq!(stats.passes, 1);
        assert_eq!(stats.filled + stats.fallback, 0);
        assert!(known.iter().all(|&(i, v)| dense.values[i] == v));
    }

    #[test]
    fn threshold_examples() {
        let r = 5;
        let centre = linear(r, 2, 2, 2);
        // all 124 neighbours positive
        let known: Vec<(usize, f64)> = (0..125).filter(|&i| i != centre).map(|i| (i, 0.1)).collect();
        let (dense, stats) = propagate_signs(&SparseSdfGrid::new(r, known), &cfg()).unwrap();
        assert!(dense.values[centre] > 0.0);
        assert_eq!(stats.filled, 1);

        // 7 positive and 6 negative known voxels: response 1, not enough
        let mut known = Vec::new();
        let others: Vec<usize> = (0..125).filter(|&i| i != centre).collect();
        for (n, &i) in others.iter().take(13).enumerate() {
            known.push((i, if n < 7 { 0.1 } else { -0.1 }));
        }
        let grid = SparseSdfGrid::new(r, known);
        let (_, stats) = propagate_signs(&grid, &cfg()).unwrap();
        assert_eq!(stats.filled, 0);
        assert_eq!(stats.fallback, 125 - 13);
    }

    #[test]
    fn no_known_voxels_is_an_error() {
        assert!(matches!(
            propagate_signs(&SparseSdfGrid::new(4, vec![]), &cfg()),
            Err(Error::NoKnownVoxels)
        ));
    }

    #[test]
    fn matches_reference_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..6 {
            let r = 12;
            let density = [0.02, 0.1, 0.3][trial % 3];
            let known: Vec<(usize, f64)> = (0..r * r * r)
                .filter_map(|i| {
                    let keep = rng.random::<f64>() < density;
                    let v = rng.random_range(-1.0..1.0);
                    keep.then_some((i, v))
                })
                .collect();
            if known.is_empty() {
                continue;
            }
            let grid = SparseSdfGrid::new(r, known);
            let (dense, _) = propagate_signs(&grid, &cfg()).unwrap();
            assert_eq!(dense.values, propagate_reference(&grid, &cfg()), "trial {trial}");
        }
    }

    #[test]
    fn sphere_shell_fills_inside_and_out() {
        // Known values only in a band around a sphere; propagation must
        // recover the full sign field.
        let r = 32;
        let g = DenseGrid::from_fn(r, |p| p.norm() - 0.5);
        let known: Vec<(usize, f64)> = g
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.abs() < 0.15)
            .map(|(i, v)| (i, *v))
            .collect();
        let (dense, stats) = propagate_signs(&SparseSdfGrid::new(r, known), &cfg()).unwrap();
        assert!(stats.filled > 0);
        for (a, b) in dense.values.iter().zip(&g.values) {
            assert_eq!(a.signum(), b.signum());
        }
        let mesh = marching_cubes(&dense, 0.0);
        assert!(mesh.is_closed());
        assert_eq!(mesh.euler_characteristic(), 2);
    }
}
