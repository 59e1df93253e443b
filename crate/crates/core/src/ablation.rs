//! Scale/weighting presets and the train → reconstruct → compare harness
//! used for ablations.

use std::time::Instant;

use serde::Serialize;

use crate::config::{Config, Weighting};
use crate::data::{derive_seed, sample_scan};
use crate::error::{Error, Result};
use crate::geometry::{normalize_cloud, PointCloud};
use crate::metrics::{compare_meshes, MetricReport};
use crate::model::Model;
use crate::reconstruct::{reconstruct, ReconstructionReport};
use crate::shapes::Shape;
use crate::train::Trainer;

#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub scales: Vec<usize>,
    pub weighting: Weighting,
    pub attention: bool,
}

impl Preset {
    fn new(name: &'static str, scales: &[usize], weighting: Weighting, attention: bool) -> Self {
        Self {
            name,
            scales: scales.to_vec(),
            weighting,
            attention,
        }
    }

    pub fn apply(&self, base: &Config) -> Config {
        let mut cfg = base.clone();
        cfg.model.scale.scales = self.scales.clone();
        cfg.model.scale.weighting = self.weighting;
        cfg.model.attention = self.attention;
        cfg
    }
}

/// Single scale, multi-scale without and with attention, then the scale
/// sets and weightings compared with attention on.
pub fn standard_presets() -> Vec<Preset> {
    use Weighting::*;
    vec![
        Preset::new("base", &[1], InterpNN, false),
        Preset::new("multiscale", &[1, 4, 16], InterpNN, false),
        Preset::new("multiscale_attn", &[1, 4, 16], InterpNN, true),
        Preset::new("interpnn_1_4", &[1, 4], InterpNN, true),
        Preset::new("interpnn_1_5_25", &[1, 5, 25], InterpNN, true),
        Preset::new("interpnn_1_3_9_27", &[1, 3, 9, 27], InterpNN, true),
        Preset::new("lw_1_4_16", &[1, 4, 16], LearnedWeight, true),
        Preset::new("ew_1_4_16", &[1, 4, 16], EqualWeight, true),
    ]
}

pub fn find_preset(name: &str) -> Option<Preset> {
    standard_presets().into_iter().find(|p| p.name == name)
}

#[derive(Clone, Debug, Serialize)]
pub struct ShapeEval {
    pub shape: String,
    /// `None` when the reconstruction came out empty.
    pub metrics: Option<MetricReport>,
    pub reconstruction: ReconstructionReport,
}

/// Scans `shape`, reconstructs it and compares against a fine marching-cubes
/// mesh of its exact distance field, in the shape's own frame.
pub fn evaluate_shape(model: &Model, shape: &Shape, noise_sigma: f64, config: &Config, seed: u64) -> Result<ShapeEval> {
    let scan = sample_scan(shape, config.data.input_points, noise_sigma, seed)?;
    evaluate_scan(model, shape, &scan, config, seed)
}

/// Reconstructs `shape` from a given scan (in the shape's frame) and
/// compares against its reference mesh.
pub fn evaluate_scan(model: &Model, shape: &Shape, scan: &PointCloud, config: &Config, seed: u64) -> Result<ShapeEval> {
    let (cloud, transform) = normalize_cloud(&scan.clone().without_normals())?;
    let rec = reconstruct(model, &cloud, &transform, &config.reconstruction)?;
    let reference = shape.mesh(config.eval.reference_resolution);
    let metrics = match compare_meshes(&rec.mesh, &reference, config.eval.samples, seed) {
        Ok(m) => Some(m),
        Err(Error::EmptyMesh) if rec.mesh.is_empty() => None,
        Err(e) => return Err(e),
    };
    Ok(ShapeEval {
        shape: shape.kind().to_string(),
        metrics,
        reconstruction: rec.report,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub preset: String,
    pub scales: String,
    pub weighting: String,
    pub attention: bool,
    pub mean_chamfer_x100: f64,
    pub max_chamfer_x100: f64,
    pub mean_normal_consistency: f64,
    /// Shapes whose reconstruction was empty; excluded from the means and
    /// counted as infinite in the max.
    pub failed_shapes: usize,
    pub final_loss: f64,
    pub train_seconds: f64,
}

pub const CSV_HEADER: &str =
    "preset,scales,weighting,attention,mean_chamfer_x100,max_chamfer_x100,mean_normal_consistency,failed_shapes,final_loss,train_seconds";

impl AblationRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{},{:.6},{:.1}",
            self.preset,
            self.scales,
            self.weighting,
            self.attention,
            self.mean_chamfer_x100,
            self.max_chamfer_x100,
            self.mean_normal_consistency,
            self.failed_shapes,
            self.final_loss,
            self.train_seconds
        )
    }
}

pub fn csv_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

pub struct AblationResult {
    pub row: AblationRow,
    pub model: Model,
    pub evals: Vec<ShapeEval>,
}

/// Trains each preset on `shapes` and evaluates it on fresh scans of the
/// same shapes at the configured noise level.
pub fn run_ablation<F>(base: &Config, presets: &[Preset], shapes: &[Shape], mut progress: F) -> Result<Vec<AblationResult>>
where
    F: FnMut(&str),
{
    let mut out = Vec::new();
    for preset in presets {
        let cfg = preset.apply(base);
        let start = Instant::now();
        let mut trainer = Trainer::new(&cfg)?;
        trainer.fit(shapes, |t| {
            progress(&format!(
                "{}: epoch {}/{} loss {:.4}",
                preset.name,
                t.epoch,
                cfg.train.epochs,
                t.log.last().map_or(f64::NAN, |r| r.total)
            ));
            Ok(())
        })?;
        let train_seconds = start.elapsed().as_secs_f64();
        let evals = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| evaluate_shape(&trainer.model, s, cfg.data.noise.sigma(), &cfg, derive_seed(cfg.seed, &[0xE7A1, i as u64])))
            .collect::<Result<Vec<_>>>()?;
        let ok: Vec<&MetricReport> = evals.iter().filter_map(|e| e.metrics.as_ref()).collect();
        let failed_shapes = evals.len() - ok.len();
        let n = ok.len() as f64;
        let row = AblationRow {
            preset: preset.name.to_string(),
            scales: preset.scales.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" "),
            weighting: preset.weighting.to_string(),
            attention: preset.attention,
            mean_chamfer_x100: ok.iter().map(|m| m.chamfer_l2_x100).sum::<f64>() / n,
            max_chamfer_x100: if failed_shapes > 0 {
                f64::INFINITY
            } else {
                ok.iter().map(|m| m.chamfer_l2_x100).fold(0.0, f64::max)
            },
            mean_normal_consistency: ok.iter().map(|m| m.normal_consistency).sum::<f64>() / n,
            failed_shapes,
            final_loss: trainer.log.last().map_or(f64::NAN, |r| r.total),
            train_seconds,
        };
        progress(&row.csv());
        out.push(AblationResult {
            row,
            model: trainer.model,
            evals,
        });
    }
    Ok(out)
}
