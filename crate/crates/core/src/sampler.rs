//! Query feature sampling. For each query and scale, the feature row is
//! `[T_s(q), f^c, f^N, p̄]`: the query in its cell's frame, the cell feature,
//! a weighted mean of the query's nearest in-cell neighbors' point features,
//! and the matching weighted mean of their relative positions (times `s`).

use lazysurf_tape::{Tensor, Var};

use crate::config::{ScaleConfig, Weighting};
use crate::encoder::{MultiScaleFeatures, ScaleVars};
use crate::error::{Error, Result};
use crate::geometry::{cell_of, to_cell_coordinates, Vec3};
use crate::grid::CellKnnIndex;
use crate::nn::{Ctx, ParamId};

/// Below this distance a neighbor counts as coincident with the query.
pub const COINCIDENT: f64 = 1e-12;

/// Query-side geometry at one scale; independent of any learned weight.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborPlan {
    /// Dense cell index of the query.
    pub cell: usize,
    pub local: Vec3,
    /// Point indices, nearest first.
    pub neighbors: Vec<usize>,
    /// `s · (p_i − q)` per neighbor.
    pub rel: Vec<Vec3>,
    pub dist: Vec<f64>,
}

pub fn plan_query(q: &Vec3, index: &CellKnnIndex, k: usize) -> Result<NeighborPlan> {
    let s = index.scale();
    let cell = cell_of(q, s)?;
    let neighbors = index.knn_in_cell(q, &cell, k);
    let pts = index.points();
    let rel = neighbors.iter().map(|&i| (pts[i] - q) * s as f64).collect();
    let dist = neighbors.iter().map(|&i| (pts[i] - q).norm()).collect();
    Ok(NeighborPlan {
        cell: cell.linear(),
        local: to_cell_coordinates(q, s)?,
        neighbors,
        rel,
        dist,
    })
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Neighbor weights from their distances to the query (nearest first).
/// InterpNN: `w_i ∝ 1/d_i²`, with a coincident neighbor taking all the
/// weight. EW: `1/n`. LW: softmax of the first `n` rank logits.
pub fn weights_from_distances(dist: &[f64], weighting: Weighting, lw_logits: Option<&[f64]>) -> Result<Vec<f64>> {
    let n = dist.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    Ok(match weighting {
        Weighting::InterpNN => {
            if let Some(hit) = dist.iter().position(|&d| d < COINCIDENT) {
                let mut w = vec![0.0; n];
                w[hit] = 1.0;
                w
            } else {
                let sims: Vec<f64> = dist.iter().map(|d| 1.0 / (d * d)).collect();
                let z: f64 = sims.iter().sum();
                sims.into_iter().map(|v| v / z).collect()
            }
        }
        Weighting::EqualWeight => vec![1.0 / n as f64; n],
        Weighting::LearnedWeight => {
            let l = lw_logits.ok_or_else(|| Error::Config("learned weighting needs rank logits".into()))?;
            if l.len() < n {
                return Err(Error::Config(format!("{n} neighbors but only {} rank logits", l.len())));
            }
            softmax(&l[..n])
        }
    })
}

/// Weights of `neighbors` for `query`; see [`weights_from_distances`].
pub fn interp_weights(
    query: &Vec3,
    neighbors: &[Vec3],
    weighting: Weighting,
    lw_logits: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let dist: Vec<f64> = neighbors.iter().map(|p| (p - query).norm()).collect();
    weights_from_distances(&dist, weighting, lw_logits)
}

/// `Σ_i w_i f_i`; zero-length input gives an empty-feature zero vector of
/// `width`.
pub fn mean_nn_feature(weights: &[f64], features: &[&[f64]], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; width];
    for (w, f) in weights.iter().zip(features) {
        for (o, v) in out.iter_mut().zip(f.iter()) {
            *o += w * v;
        }
    }
    out
}

/// `s · Σ_i w_i (p_i − q)`; zero for no neighbors.
pub fn mean_relative_nn_position(query: &Vec3, neighbors: &[Vec3], weights: &[f64], scale: usize) -> Vec3 {
    let mut acc = Vec3::zeros();
    for (p, w) in neighbors.iter().zip(weights) {
        acc += (p - query) * *w;
    }
    acc * scale as f64
}

/// Learned rank logits per scale, when the weighting needs them.
pub type RankLogits<'a> = Option<&'a [Vec<f64>]>;

/// Per-scale `Q x F` feature matrices for `queries` (eval path).
pub fn sample_query_features(
    queries: &[Vec3],
    msf: &MultiScaleFeatures,
    cfg: &ScaleConfig,
    lw_logits: RankLogits<'_>,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(msf.scales.len());
    for (si, sf) in msf.scales.iter().enumerate() {
        let f1 = sf.local.cols();
        let f2 = sf.cells.cols();
        let width = 6 + f1 + f2;
        let logits = lw_logits.map(|l| l[si].as_slice());
        let mut data = Vec::with_capacity(queries.len() * width);
        for q in queries {
            let plan = plan_query(q, &sf.index, cfg.knn_k)?;
            let w = weights_from_distances(&plan.dist, cfg.weighting, logits)?;
            data.extend_from_slice(plan.local.as_slice());
            if plan.neighbors.is_empty() {
                data.extend(std::iter::repeat_n(0.0, f2 + f1 + 3));
                continue;
            }
            data.extend_from_slice(sf.cell_row(plan.cell));
            let feats: Vec<&[f64]> = plan.neighbors.iter().map(|&i| sf.local.row(i)).collect();
            data.extend(mean_nn_feature(&w, &feats, f1));
            let mut pbar = Vec3::zeros();
            for (r, wi) in plan.rel.iter().zip(&w) {
                pbar += r * *wi;
            }
            data.extend_from_slice(pbar.as_slice());
        }
        out.push(Tensor::matrix(queries.len(), width, data)?);
    }
    Ok(out)
}

/// Tape path for one scale: queries of every cloud in the batch, stacked in
/// cloud order, sampled from the batch's encoder output.
pub fn sample_on_tape(
    ctx: &mut Ctx<'_>,
    vars: &ScaleVars,
    indices: &[&CellKnnIndex],
    queries: &[&[Vec3]],
    cfg: &ScaleConfig,
    lw_logits: Option<ParamId>,
) -> Result<Var> {
    let k = cfg.knn_k;
    let s = vars.scale;
    let total: usize = queries.iter().map(|q| q.len()).sum();
    let mut local = Vec::with_capacity(total * 3);
    let mut cell_idx = Vec::with_capacity(total);
    let mut nn_idx = Vec::with_capacity(total * k);
    let mut rel = Vec::with_capacity(total * k * 3);
    let mut counts = Vec::with_capacity(total);
    let mut fixed_w = Vec::with_capacity(total * k);
    for (ci, (index, qs)) in indices.iter().zip(queries).enumerate() {
        if index.scale() != s {
            return Err(Error::Config("index scale does not match encoder scale".into()));
        }
        for q in qs.iter() {
            let plan = plan_query(q, index, k)?;
            local.extend_from_slice(plan.local.as_slice());
            let n = plan.neighbors.len();
            counts.push(n);
            cell_idx.push(if n > 0 { vars.cell_row[ci][plan.cell] } else { None });
            for r in 0..k {
                if r < n {
                    nn_idx.push(Some(vars.point_offset[ci] + plan.neighbors[r]));
                    rel.extend_from_slice(plan.rel[r].as_slice());
                } else {
                    nn_idx.push(None);
                    rel.extend_from_slice(&[0.0; 3]);
                }
            }
            if cfg.weighting != Weighting::LearnedWeight {
                let w = weights_from_distances(&plan.dist, cfg.weighting, None)?;
                fixed_w.extend_from_slice(&w);
                fixed_w.extend(std::iter::repeat_n(0.0, k - n));
            }
        }
    }
    let tape = &mut *ctx.tape;
    let t = tape.constant(Tensor::matrix(total, 3, local)?);
    let fc = tape.gather_rows(vars.cells, &cell_idx)?;
    let w = match cfg.weighting {
        Weighting::LearnedWeight => {
            let id = lw_logits.ok_or_else(|| Error::Config("learned weighting needs rank logits".into()))?;
            let l = ctx.var(id);
            ctx.tape.rank_softmax(l, &counts)?
        }
        _ => ctx.tape.constant(Tensor::matrix(total, k, fixed_w)?),
    };
    let tape = &mut *ctx.tape;
    let nbr = tape.gather_rows(vars.local, &nn_idx)?;
    let fnn = tape.weighted_sum(w, nbr)?;
    let relv = tape.constant(Tensor::matrix(total * k, 3, rel)?);
    let pbar = tape.weighted_sum(w, relv)?;
    Ok(tape.concat_cols(&[t, fc, fnn, pbar])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::encoder::{extract_multiscale, Encoder};
    use crate::geometry::PointCloud;
    use crate::nn::{Mode, ParamStore};
    use lazysurf_tape::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    #[test]
    fn weight_examples() {
        let q = v(0.0, 0.0, 0.0);
        let w = interp_weights(&q, &[v(0.3, 0.0, 0.0)], Weighting::InterpNN, None).unwrap();
        assert_eq!(w, vec![1.0]);
        let w = interp_weights(&q, &[v(0.1, 0.0, 0.0), v(0.0, -0.1, 0.0)], Weighting::InterpNN, None).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
        let w = weights_from_distances(&[1.0, 2.0], Weighting::InterpNN, None).unwrap();
        assert!((w[0] - 0.8).abs() < 1e-15 && (w[1] - 0.2).abs() < 1e-15);
        let w = weights_from_distances(&[0.0, 0.5, 0.7], Weighting::InterpNN, None).unwrap();
        assert_eq!(w, vec![1.0, 0.0, 0.0]);
        let w = weights_from_distances(&[0.1, 0.5, 0.7, 0.8], Weighting::EqualWeight, None).unwrap();
        assert_eq!(w, vec![0.25; 4]);
        let logits = [0.0, 1.0, 2.0];
        let w = weights_from_distances(&[0.1, 0.2], Weighting::LearnedWeight, Some(&logits)).unwrap();
        let e = 1f64.exp();
        assert!((w[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!(weights_from_distances(&[0.1], Weighting::LearnedWeight, None).is_err());
    }

    #[test]
    fn mean_feature_examples() {
        let f = [1.0, -2.0, 3.0];
        let m = mean_nn_feature(&[0.3, 0.7], &[&f, &f], 3);
        assert!(m.iter().zip(&f).all(|(a, b)| (a - b).abs() < 1e-15));
        assert_eq!(mean_nn_feature(&[1.0], &[&f], 3), f.to_vec());
        assert_eq!(mean_nn_feature(&[], &[], 3), vec![0.0; 3]);
    }

    #[test]
    fn mean_feature_matches_direct_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats: Vec<Vec<f64>> = (0..8).map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let raw: Vec<f64> = (0..8).map(|_| rng.random_range(0.1..1.0)).collect();
        let z: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|r| r / z).collect();
        let refs: Vec<&[f64]> = feats.iter().map(|f| f.as_slice()).collect();
        let got = mean_nn_feature(&w, &refs, 16);
        for c in 0..16 {
            let mut acc = 0.0;
            for i in 0..8 {
                acc += w[i] * feats[i][c];
            }
            assert!((got[c] - acc).abs() < 1e-14);
        }
    }

    #[test]
    fn relative_position_examples() {
        let q = v(0.2, 0.2, 0.2);
        assert_eq!(mean_relative_nn_position(&q, &[q], &[1.0], 4), Vec3::zeros());
        let sym = [v(0.3, 0.2, 0.2), v(0.1, 0.2, 0.2)];
        assert!(mean_relative_nn_position(&q, &sym, &[0.5, 0.5], 4).norm() < 1e-15);
        let p = mean_relative_nn_position(&q, &[v(0.3, 0.2, 0.2)], &[1.0], 4);
        assert!((p - v(0.4, 0.0, 0.0)).norm() < 1e-12);
    }

    fn model(scales: Vec<usize>, weighting: Weighting) -> (ModelConfig, ParamStore, Encoder) {
        let mut cfg = ModelConfig::default();
        cfg.scale.scales = scales;
        cfg.scale.weighting = weighting;
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        (cfg, store, enc)
    }

    fn random_cloud(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
        (0..n).map(|_| v(rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9))).collect()
    }

    #[test]
    fn global_scale_and_empty_cells() {
        let (cfg, store, enc) = model(vec![1, 16], Weighting::InterpNN);
        let cloud = PointCloud::new(vec![v(-0.8, -0.8, -0.8), v(-0.7, -0.8, -0.8), v(0.5, 0.5, 0.5)], None).unwrap();
        let msf = extract_multiscale(&cloud, &enc, &store).unwrap();
        let queries = [v(0.0, 0.0, 0.0), v(-0.75, -0.8, -0.8)];
        let f = sample_query_features(&queries, &msf, &cfg.scale, None).unwrap();
        assert_eq!(f[0].cols(), 198);
        // columns: T_s(q) 0..3, f^c 3..131, f^N 131..195, p̄ 195..198
        assert_eq!(f[0].row(0)[3..131], f[0].row(1)[3..131]);
        assert_eq!(&f[0].row(0)[3..131], msf.scales[0].cell_row(0));
        // first query lands in an empty scale-16 cell
        let row = f[1].row(0);
        let local = to_cell_coordinates(&queries[0], 16).unwrap();
        assert_eq!(&row[..3], local.as_slice());
        assert!(row[3..].iter().all(|x| *x == 0.0));
    }

    #[test]
    fn tape_path_matches_eval_path() {
        for weighting in [Weighting::InterpNN, Weighting::EqualWeight, Weighting::LearnedWeight] {
            let (cfg, mut store, enc) = model(vec![1, 4], weighting);
            let lw: Vec<ParamId> = [1usize, 4]
                .iter()
                .map(|s| store.param(format!("lw{s}"), Tensor::new(vec![8], (0..8).map(|i| i as f64 * 0.1).collect()).unwrap()))
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let clouds: Vec<PointCloud> = (0..2).map(|_| PointCloud::new(random_cloud(120, &mut rng), None).unwrap()).collect();
            let queries: Vec<Vec<Vec3>> = (0..2).map(|_| random_cloud(30, &mut rng)).collect();
            let logits: Vec<Vec<f64>> = lw.iter().map(|id| store.get(*id).data().to_vec()).collect();

            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval, false);
            let idx: Vec<Vec<CellKnnIndex>> = clouds
                .iter()
                .map(|c| [1, 4].iter().map(|&s| CellKnnIndex::build(c.points(), s).unwrap()).collect())
                .collect();
            let mut outs = Vec::new();
            for (si, e) in enc.scales.iter().enumerate() {
                let per: Vec<&CellKnnIndex> = idx.iter().map(|c| &c[si]).collect();
                let vars = e.forward(&mut ctx, &per).unwrap();
                let qs: Vec<&[Vec3]> = queries.iter().map(|q| q.as_slice()).collect();
                outs.push(sample_on_tape(&mut ctx, &vars, &per, &qs, &cfg.scale, Some(lw[si])).unwrap());
            }
            for (ci, c) in clouds.iter().enumerate() {
                let msf = extract_multiscale(c, &enc, &store).unwrap();
                let f = sample_query_features(&queries[ci], &msf, &cfg.scale, Some(&logits)).unwrap();
                for si in 0..2 {
                    let tv = tape.value(outs[si]);
                    for qi in 0..30 {
                        let a = tv.row(ci * 30 + qi);
                        let b = f[si].row(qi);
                        for (x, y) in a.iter().zip(b) {
                            assert!((x - y).abs() < 1e-12, "{weighting} scale {si}");
                        }
                    }
                }
            }
        }
    }
}
