//! Signed-distance head and training loss.

use lazysurf_tape::Var;
use rand::Rng;
use serde::Serialize;

use crate::config::LossConfig;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Mlp, ParamStore};

/// Five dense layers; the output has two columns: the sign logit and a
/// pre-magnitude whose absolute value is the distance magnitude.
#[derive(Clone, Debug)]
pub struct SdfHead {
    pub mlp: Mlp,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOut {
    /// `Q x 1` sign logits.
    pub logit: Var,
    /// `Q x 1` non-negative magnitudes.
    pub magnitude: Var,
}

impl SdfHead {
    pub fn new<R: Rng>(store: &mut ParamStore, input: usize, hidden: &[usize], eps: f64, rng: &mut R) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(2);
        Self {
            mlp: Mlp::new(store, "head", &widths, eps, rng),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<HeadOut> {
        let out = self.mlp.forward(ctx, x)?;
        let logit = ctx.tape.slice_cols(out, 0, 1)?;
        let raw = ctx.tape.slice_cols(out, 1, 2)?;
        let magnitude = ctx.tape.abs(raw);
        Ok(HeadOut { logit, magnitude })
    }
}

/// `sgn(l̂)·m̂`, with `l̂ = 0` counted as positive.
pub fn signed_distance(logit: f64, magnitude: f64) -> f64 {
    if logit >= 0.0 {
        magnitude
    } else {
        -magnitude
    }
}

/// Loss values after a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub total: f64,
    pub magnitude: f64,
    pub sign: f64,
    pub regularizer: f64,
}

pub struct LossVars {
    pub total: Var,
    pub magnitude: Var,
    pub sign: Var,
    pub regularizer: Var,
}

impl LossVars {
    pub fn values(&self, ctx: &Ctx<'_>) -> LossParts {
        let get = |v: Var| ctx.tape.value(v).item();
        LossParts {
            total: get(self.total),
            magnitude: get(self.magnitude),
            sign: get(self.sign),
            regularizer: get(self.regularizer),
        }
    }
}

/// `λ_mag·mean|tanh(m̂) − tanh(|d|)| + λ_sgn·BCE(l̂, [d ≥ 0]) + λ_reg·Σ|W|`,
/// the last sum running over the head's weight matrices.
pub fn loss(ctx: &mut Ctx<'_>, out: &HeadOut, gt: &[f64], head: &SdfHead, cfg: &LossConfig) -> Result<LossVars> {
    let n = ctx.tape.shape(out.logit)[0];
    if gt.len() != n {
        return Err(Error::Config(format!("{} targets for {n} predictions", gt.len())));
    }
    let tape = &mut *ctx.tape;
    let target_mag = tape.constant(lazysurf_tape::Tensor::matrix(n, 1, gt.iter().map(|d| d.abs().tanh()).collect())?);
    let pred = tape.tanh(out.magnitude);
    let diff = tape.sub(pred, target_mag)?;
    let diff = tape.abs(diff);
    let magnitude = tape.mean(diff);

    let labels: Vec<f64> = gt.iter().map(|&d| if d >= 0.0 { 1.0 } else { 0.0 }).collect();
    let sign = tape.bce_with_logits(out.logit, &labels)?;

    let mut terms = Vec::new();
    for layer in &head.mlp.layers {
        let w = ctx.var(layer.w);
        let a = ctx.tape.abs(w);
        terms.push(ctx.tape.sum(a));
    }
    let tape = &mut *ctx.tape;
    let mut regularizer = terms[0];
    for t in &terms[1..] {
        regularizer = tape.add(regularizer, *t)?;
    }

    let a = tape.scale(magnitude, cfg.lambda_mag);
    let b = tape.scale(sign, cfg.lambda_sgn);
    let c = tape.scale(regularizer, cfg.lambda_reg);
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(LossVars {
        total,
        magnitude,
        sign,
        regularizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mode, ParamStore};
    use lazysurf_tape::{Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head(input: usize) -> (ParamStore, SdfHead) {
        let mut store = ParamStore::new();
        let h = SdfHead::new(&mut store, input, &[16, 8, 8, 4], 1e-5, &mut ChaCha8Rng::seed_from_u64(0));
        (store, h)
    }

    #[test]
    fn signed_distance_examples() {
        assert_eq!(signed_distance(2.3, 0.3), 0.3);
        assert_eq!(signed_distance(-0.1, 0.3), -0.3);
        assert_eq!(signed_distance(0.0, 0.3), 0.3);
        assert_eq!(signed_distance(-5.0, 0.0), 0.0);
    }

    #[test]
    fn zero_final_layer_gives_bias() {
        let (mut store, h) = head(6);
        let last = h.mlp.layers.last().unwrap();
        *store.get_mut(last.w) = Tensor::zeros(&[4, 2]);
        *store.get_mut(last.b) = Tensor::new(vec![2], vec![0.7, -0.4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::matrix(3, 6, (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval, false);
        let xv = ctx.tape.constant(x);
        let out = h.forward(&mut ctx, xv).unwrap();
        assert!(tape.value(out.logit).data().iter().all(|v| *v == 0.7));
        assert!(tape.value(out.magnitude).data().iter().all(|v| *v == 0.4));
    }

    #[test]
    fn perfect_magnitudes_and_zero_weights() {
        let (mut store, h) = head(2);
        for l in &h.mlp.layers {
            let shape = store.get(l.w).shape().to_vec();
            *store.get_mut(l.w) = Tensor::zeros(&shape);
        }
        let gt = [0.1, -0.25, 0.0];
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval, false);
        let logit = ctx.tape.constant(Tensor::matrix(3, 1, vec![1.0, -1.0, 1.0]).unwrap());
        let magnitude = ctx.tape.constant(Tensor::matrix(3, 1, gt.iter().map(|d: &f64| d.abs()).collect()).unwrap());
        let parts = loss(&mut ctx, &HeadOut { logit, magnitude }, &gt, &h, &LossConfig::default()).unwrap().values(&ctx);
        assert_eq!(parts.magnitude, 0.0);
        assert_eq!(parts.regularizer, 0.0);
        assert!(parts.sign > 0.0);
    }

    #[test]
    fn total_is_weighted_component_sum() {
        let (store, h) = head(5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20;
        let x = Tensor::matrix(n, 5, (0..n * 5).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let gt: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Train, true);
        let xv = ctx.tape.constant(x);
        let out = h.forward(&mut ctx, xv).unwrap();
        let parts = loss(&mut ctx, &out, &gt, &h, &LossConfig::default()).unwrap().values(&ctx);

        // Independent recomputation from the head outputs and raw weights.
        let l = ctx.tape.value(out.logit).data().to_vec();
        let m = ctx.tape.value(out.magnitude).data().to_vec();
        let mut mag = 0.0;
        let mut bce = 0.0;
        for i in 0..n {
            mag += (m[i].tanh() - gt[i].abs().tanh()).abs();
            let y = if gt[i] >= 0.0 { 1.0 } else { 0.0 };
            let p = 1.0 / (1.0 + (-l[i]).exp());
            bce -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        mag /= n as f64;
        bce /= n as f64;
        let reg: f64 = h
            .mlp
            .layers
            .iter()
            .map(|layer| store.get(layer.w).data().iter().map(|w| w.abs()).sum::<f64>())
            .sum();
        assert!((parts.magnitude - mag).abs() < 1e-12);
        assert!((parts.sign - bce).abs() < 1e-12);
        assert!((parts.regularizer - reg).abs() < 1e-9);
        let total = 5.0 * mag + 2.0 * bce + 1e-6 * reg;
        assert!((parts.total - total).abs() < 1e-11);
        assert!(parts.magnitude >= 0.0 && parts.sign >= 0.0 && parts.regularizer >= 0.0);
    }
}
