//! The full network: encoders, query sampling, cross-scale attention and
//! the SDF head, over one shared parameter store.

use lazysurf_tape::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::CrossScaleAttention;
use crate::config::{LossConfig, ModelConfig, Weighting};
use crate::encoder::{extract_multiscale, CloudIndex, Encoder, MultiScaleFeatures};
use crate::error::Result;
use crate::geometry::{PointCloud, Vec3};
use crate::head::{loss, signed_distance, HeadOut, LossVars, SdfHead};
use crate::nn::{Ctx, Mode, ParamId, ParamStore};
use crate::sampler::{sample_on_tape, sample_query_features};

/// Largest query batch pushed through the network at once (a few hundred
/// MB of activations with the default widths).
pub const EVAL_CHUNK: usize = 8192;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    /// Per-scale rank logits (learned weighting only).
    pub rank_logits: Vec<ParamId>,
    pub attention: Option<CrossScaleAttention>,
    pub head: SdfHead,
}

/// One cloud of a training batch with its queries.
pub struct BatchItem<'a> {
    pub index: &'a CloudIndex,
    pub queries: &'a [Vec3],
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, config, &mut rng);
        let rank_logits = if config.scale.weighting == Weighting::LearnedWeight {
            config
                .scale
                .scales
                .iter()
                .map(|s| store.param(format!("rank_logits{s}"), Tensor::zeros(&[config.scale.knn_k])))
                .collect()
        } else {
            Vec::new()
        };
        let f = config.feature_width();
        let attention = config
            .attention
            .then(|| CrossScaleAttention::new(&mut store, f, config.attention_ff, config.ln_eps, &mut rng));
        let head = SdfHead::new(&mut store, config.head_input(), &config.head_hidden, config.bn_eps, &mut rng);
        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            rank_logits,
            attention,
            head,
        })
    }

    pub fn scales(&self) -> &[usize] {
        &self.config.scale.scales
    }

    fn lw_id(&self, si: usize) -> Option<ParamId> {
        self.rank_logits.get(si).copied()
    }

    pub fn rank_logit_values(&self) -> Option<Vec<Vec<f64>>> {
        (!self.rank_logits.is_empty())
            .then(|| self.rank_logits.iter().map(|id| self.store.get(*id).data().to_vec()).collect())
    }

    /// Attention (if enabled) and head over per-scale `Q x F` features.
    pub fn fuse_and_head(&self, ctx: &mut Ctx<'_>, per_scale: &[Var]) -> Result<HeadOut> {
        let fused = match &self.attention {
            Some(a) => a.forward(ctx, per_scale)?.features,
            None => ctx.tape.concat_cols(per_scale)?,
        };
        self.head.forward(ctx, fused)
    }

    /// Full differentiable forward for a batch of clouds. Output rows follow
    /// the batch order, queries of each cloud in turn.
    pub fn forward_batch(&self, ctx: &mut Ctx<'_>, batch: &[BatchItem<'_>]) -> Result<HeadOut> {
        let queries: Vec<&[Vec3]> = batch.iter().map(|b| b.queries).collect();
        let mut per_scale = Vec::with_capacity(self.encoder.scales.len());
        for (si, enc) in self.encoder.scales.iter().enumerate() {
            let indices: Vec<_> = batch.iter().map(|b| &b.index.scales[si]).collect();
            let vars = enc.forward(ctx, &indices)?;
            per_scale.push(sample_on_tape(ctx, &vars, &indices, &queries, &self.config.scale, self.lw_id(si))?);
        }
        self.fuse_and_head(ctx, &per_scale)
    }

    pub fn batch_loss(
        &self,
        ctx: &mut Ctx<'_>,
        batch: &[BatchItem<'_>],
        gt: &[f64],
        cfg: &LossConfig,
    ) -> Result<LossVars> {
        let out = self.forward_batch(ctx, batch)?;
        loss(ctx, &out, gt, &self.head, cfg)
    }

    /// Eval-mode multi-scale features of a normalized cloud.
    pub fn encode(&self, cloud: &PointCloud) -> Result<MultiScaleFeatures> {
        extract_multiscale(cloud, &self.encoder, &self.store)
    }

    /// Eval-mode `(logit, magnitude)` per query against precomputed features.
    /// Queries are answered independently, in chunks of [`EVAL_CHUNK`] to
    /// bound memory.
    pub fn eval_queries(&self, msf: &MultiScaleFeatures, queries: &[Vec3]) -> Result<Vec<(f64, f64)>> {
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(EVAL_CHUNK) {
            out.extend(self.eval_chunk(msf, chunk)?);
        }
        Ok(out)
    }

    fn eval_chunk(&self, msf: &MultiScaleFeatures, queries: &[Vec3]) -> Result<Vec<(f64, f64)>> {
        let lw = self.rank_logit_values();
        let feats = sample_query_features(queries, msf, &self.config.scale, lw.as_deref())?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.store, Mode::Eval, false);
        let vars: Vec<Var> = feats.into_iter().map(|t| ctx.tape.constant(t)).collect();
        let out = self.fuse_and_head(&mut ctx, &vars)?;
        let l = tape.value(out.logit).data();
        let m = tape.value(out.magnitude).data();
        Ok(l.iter().zip(m).map(|(a, b)| (*a, *b)).collect())
    }

    /// Eval-mode signed distances (normalized units).
    pub fn predict_sdf(&self, msf: &MultiScaleFeatures, queries: &[Vec3]) -> Result<Vec<f64>> {
        Ok(self
            .eval_queries(msf, queries)?
            .into_iter()
            .map(|(l, m)| signed_distance(l, m))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.scale.scales = vec![1, 4];
        cfg
    }

    fn cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| Vec3::new(rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)))
            .collect();
        PointCloud::new(pts, None).unwrap()
    }

    #[test]
    fn reference_widths() {
        let m = Model::new(&ModelConfig::default(), 0).unwrap();
        assert_eq!(m.head.mlp.layers[0].fan_in, 594);
        assert_eq!(m.attention.as_ref().unwrap().width, 198);
        assert_eq!(m.attention.as_ref().unwrap().ff1.fan_out, 512);
        let widths: Vec<usize> = m.head.mlp.layers.iter().map(|l| l.fan_out).collect();
        assert_eq!(widths, vec![512, 256, 128, 64, 2]);
    }

    #[test]
    fn eval_batch_of_queries() {
        let m = Model::new(&small_config(), 1).unwrap();
        let c = cloud(200, 2);
        let msf = m.encode(&c).unwrap();
        let qs = cloud(1000, 3);
        let a = m.eval_queries(&msf, qs.points()).unwrap();
        let b = m.eval_queries(&msf, qs.points()).unwrap();
        assert_eq!(a.len(), 1000);
        assert_eq!(a, b);
        assert!(a.iter().all(|(_, mag)| *mag >= 0.0));
    }

    #[test]
    fn chunking_does_not_change_outputs() {
        let m = Model::new(&small_config(), 1).unwrap();
        let msf = m.encode(&cloud(150, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q: Vec<Vec3> = (0..EVAL_CHUNK + 37).map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        assert_eq!(m.eval_queries(&msf, &q).unwrap(), m.eval_chunk(&msf, &q).unwrap());
    }

    #[test]
    fn eval_is_query_order_independent() {
        let m = Model::new(&small_config(), 1).unwrap();
        let msf = m.encode(&cloud(150, 4)).unwrap();
        let qs = cloud(20, 5).points().to_vec();
        let mut rev = qs.clone();
        rev.reverse();
        let a = m.predict_sdf(&msf, &qs).unwrap();
        let mut b = m.predict_sdf(&msf, &rev).unwrap();
        b.reverse();
        assert_eq!(a, b);
    }

    #[test]
    fn tape_forward_matches_eval_path() {
        for weighting in [Weighting::InterpNN, Weighting::LearnedWeight] {
            let mut cfg = small_config();
            cfg.scale.weighting = weighting;
            let m = Model::new(&cfg, 3).unwrap();
            let c = cloud(100, 6);
            let qs = cloud(25, 7).points().to_vec();
            let idx = CloudIndex::build(&c, m.scales()).unwrap();
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &m.store, Mode::Eval, false);
            let out = m
                .forward_batch(&mut ctx, &[BatchItem { index: &idx, queries: &qs }])
                .unwrap();
            let msf = m.encode(&c).unwrap();
            let ev = m.eval_queries(&msf, &qs).unwrap();
            for (i, (l, mag)) in ev.iter().enumerate() {
                assert!((tape.value(out.logit).data()[i] - l).abs() < 1e-10);
                assert!((tape.value(out.magnitude).data()[i] - mag).abs() < 1e-10);
            }
        }
    }
}
