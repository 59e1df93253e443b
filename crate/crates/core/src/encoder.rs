//! Per-scale point and cell encoders.
//!
//! At each scale every point is mapped into its cell's local frame and
//! encoded by a small MLP; a feature transform predicted from the cell's
//! pooled features is applied per point; a second MLP followed by a
//! channel-wise max over each cell's members gives the cell feature. None of
//! this sees query points, so one encoding serves any number of queries.

use lazysurf_tape::{Tape, Tensor, Var};
use rand::Rng;
use rayon::prelude::*;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::{to_cell_coordinates, PointCloud, Vec3};
use crate::grid::CellKnnIndex;
use crate::nn::{Ctx, Linear, Mlp, Mode, ParamStore};

/// Predicts one `F1 x F1` matrix per cell from the max-pooled point features
/// of that cell. The output layer starts at zero weight and identity bias, so
/// a fresh transform is the identity.
#[derive(Clone, Debug)]
pub struct FeatureTransform {
    pub fc1: Linear,
    pub fc2: Linear,
    pub width: usize,
}

impl FeatureTransform {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, hidden: usize, rng: &mut R) -> Self {
        let fc1 = Linear::new(store, &format!("{name}.fc1"), width, hidden, rng);
        let fc2 = Linear::new(store, &format!("{name}.fc2"), hidden, width * width, rng);
        *store.get_mut(fc2.w) = Tensor::zeros(&[hidden, width * width]);
        let mut bias = Tensor::zeros(&[width * width]);
        for i in 0..width {
            bias.data_mut()[i * width + i] = 1.0;
        }
        *store.get_mut(fc2.b) = bias;
        Self { fc1, fc2, width }
    }

    fn forward(&self, ctx: &mut Ctx<'_>, x: Var, seg: &[usize], num_segments: usize) -> Result<Var> {
        let pooled = ctx.tape.segment_max(x, seg, num_segments)?;
        let h = self.fc1.forward(ctx, pooled)?;
        let h = ctx.tape.relu(h);
        let mats = self.fc2.forward(ctx, h)?;
        Ok(ctx.tape.apply_row_transforms(x, mats, seg)?)
    }
}

#[derive(Clone, Debug)]
pub struct ScaleEncoder {
    pub scale: usize,
    pub local: Mlp,
    pub transform: Option<FeatureTransform>,
    pub cell: Mlp,
}

/// Tape-side encoder output for a batch of clouds at one scale.
#[derive(Clone, Debug)]
pub struct ScaleVars {
    pub scale: usize,
    /// Per-point features of all clouds, stacked (`ΣP x F1`).
    pub local: Var,
    /// One row per nonempty (cloud, cell) pair (`M x F2`).
    pub cells: Var,
    /// Per cloud: dense cell index → row of `cells`.
    pub cell_row: Vec<Vec<Option<usize>>>,
    /// Per cloud: first row of `local`.
    pub point_offset: Vec<usize>,
}

impl ScaleEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, scale: usize, cfg: &ModelConfig, rng: &mut R) -> Self {
        let name = format!("enc{scale}");
        let (f1, f2) = (cfg.local_width, cfg.cell_width);
        Self {
            scale,
            local: Mlp::new(store, &format!("{name}.local"), &[3, f1, f1], cfg.bn_eps, rng),
            transform: cfg
                .feature_transform
                .then(|| FeatureTransform::new(store, &format!("{name}.xform"), f1, cfg.transform_hidden, rng)),
            cell: Mlp::new(store, &format!("{name}.cell"), &[f1, f2, f2, f2], cfg.bn_eps, rng),
        }
    }

    /// Encodes a batch of clouds (given by their indices at this scale).
    /// Batch-norm statistics in train mode run over all points of the batch.
    pub fn forward(&self, ctx: &mut Ctx<'_>, clouds: &[&CellKnnIndex]) -> Result<ScaleVars> {
        let s = self.scale;
        let mut coords = Vec::new();
        let mut seg = Vec::new();
        let mut cell_row = Vec::with_capacity(clouds.len());
        let mut point_offset = Vec::with_capacity(clouds.len());
        let mut rows = 0usize;
        for idx in clouds {
            if idx.scale() != s {
                return Err(Error::Config(format!("index at scale {} fed to scale {s}", idx.scale())));
            }
            point_offset.push(coords.len() / 3);
            let grid = idx.grid();
            let mut lookup = vec![None; grid.num_cells()];
            for c in grid.nonempty_cells() {
                lookup[c] = Some(rows);
                rows += 1;
            }
            for (p, &c) in idx.points().iter().zip(grid.point_cells()) {
                let t = to_cell_coordinates(p, s)?;
                coords.extend_from_slice(t.as_slice());
                seg.push(lookup[c as usize].expect("occupied cell has a row"));
            }
            cell_row.push(lookup);
        }
        let n = coords.len() / 3;
        let x = ctx.tape.constant(Tensor::matrix(n, 3, coords)?);
        let mut local = self.local.forward(ctx, x)?;
        if let Some(t) = &self.transform {
            local = t.forward(ctx, local, &seg, rows)?;
        }
        let per_point = self.cell.forward(ctx, local)?;
        let cells = ctx.tape.segment_max(per_point, &seg, rows)?;
        Ok(ScaleVars {
            scale: s,
            local,
            cells,
            cell_row,
            point_offset,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub scales: Vec<ScaleEncoder>,
    pub local_width: usize,
    pub cell_width: usize,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            scales: cfg.scale.scales.iter().map(|&s| ScaleEncoder::new(store, s, cfg, rng)).collect(),
            local_width: cfg.local_width,
            cell_width: cfg.cell_width,
        }
    }

    pub fn scale_list(&self) -> Vec<usize> {
        self.scales.iter().map(|e| e.scale).collect()
    }
}

/// Per-cloud neighbor-search structures, one per configured scale.
#[derive(Clone, Debug)]
pub struct CloudIndex {
    pub scales: Vec<CellKnnIndex>,
}

impl CloudIndex {
    pub fn build(cloud: &PointCloud, scales: &[usize]) -> Result<Self> {
        cloud.check_in_cube()?;
        Ok(Self {
            scales: scales
                .iter()
                .map(|&s| CellKnnIndex::build(cloud.points(), s))
                .collect::<Result<_>>()?,
        })
    }
}

/// Evaluated features of one cloud at one scale.
#[derive(Clone, Debug)]
pub struct ScaleFeatures {
    pub scale: usize,
    pub index: CellKnnIndex,
    /// `P x F1`.
    pub local: Tensor,
    /// Dense `s^3 x F2`; rows of empty cells are zero.
    pub cells: Tensor,
}

impl ScaleFeatures {
    pub fn cell_row(&self, cell: usize) -> &[f64] {
        self.cells.row(cell)
    }
}

/// Everything the query stage needs from a cloud, computed once.
#[derive(Clone, Debug)]
pub struct MultiScaleFeatures {
    pub scales: Vec<ScaleFeatures>,
}

impl MultiScaleFeatures {
    pub fn num_points(&self) -> usize {
        self.scales.first().map(|s| s.index.points().len()).unwrap_or(0)
    }
}

/// Per-point features at one scale (eval mode): row `i` is the local
/// encoder applied to `T_s(p_i)`, followed by the cell's feature transform.
pub fn encode_points(cloud: &PointCloud, enc: &ScaleEncoder, store: &ParamStore) -> Result<Tensor> {
    let idx = CellKnnIndex::build(cloud.points(), enc.scale)?;
    Ok(eval_scale(&idx, enc, store)?.local)
}

/// Per-cell features from per-point features (eval mode): each nonempty
/// cell gets the channel-wise max of the cell encoder over its points, and
/// empty cells a zero row.
pub fn pool_cells(local: &Tensor, index: &CellKnnIndex, enc: &ScaleEncoder, store: &ParamStore) -> Result<Tensor> {
    let grid = index.grid();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, store, Mode::Eval, false);
    let x = ctx.tape.constant(local.clone());
    let per_point = enc.cell.forward(&mut ctx, x)?;
    let seg: Vec<usize> = grid.point_cells().iter().map(|&c| c as usize).collect();
    let dense = tape.segment_max(per_point, &seg, grid.num_cells())?;
    Ok(tape.value(dense).clone())
}

fn eval_scale(index: &CellKnnIndex, enc: &ScaleEncoder, store: &ParamStore) -> Result<ScaleFeatures> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, store, Mode::Eval, false);
    let vars = enc.forward(&mut ctx, &[index])?;
    let local = tape.value(vars.local).clone();
    let compact = tape.value(vars.cells);
    let width = compact.cols();
    let mut dense = Tensor::zeros(&[index.grid().num_cells(), width]);
    for (c, row) in vars.cell_row[0].iter().enumerate() {
        if let Some(r) = row {
            dense.row_mut(c).copy_from_slice(compact.row(*r));
        }
    }
    Ok(ScaleFeatures {
        scale: enc.scale,
        index: index.clone(),
        local,
        cells: dense,
    })
}

/// Runs every scale's encoder on `cloud` in eval mode. Scales are
/// independent and run in parallel; the result does not depend on the
/// schedule.
pub fn extract_multiscale(cloud: &PointCloud, encoder: &Encoder, store: &ParamStore) -> Result<MultiScaleFeatures> {
    let index = CloudIndex::build(cloud, &encoder.scale_list())?;
    extract_with_index(&index, encoder, store)
}

pub fn extract_with_index(index: &CloudIndex, encoder: &Encoder, store: &ParamStore) -> Result<MultiScaleFeatures> {
    let scales = encoder
        .scales
        .par_iter()
        .zip(&index.scales)
        .map(|(enc, idx)| eval_scale(idx, enc, store))
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiScaleFeatures { scales })
}

/// Cell-local coordinates of every point at `scale`, as an `P x 3` matrix.
pub fn local_coordinates(points: &[Vec3], scale: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(points.len() * 3);
    for p in points {
        data.extend_from_slice(to_cell_coordinates(p, scale)?.as_slice());
    }
    Ok(Tensor::matrix(points.len(), 3, data)?)
}
