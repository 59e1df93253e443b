//! Central finite-difference checking of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Pass threshold on the relative error.
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator, so entries whose true
    /// gradient is at round-off level are compared absolutely.
    pub abs_floor: f64,
    /// Check at most this many entries per input (sampled without
    /// replacement). `None` checks everything.
    pub max_entries: Option<usize>,
    /// Reject entries whose `x ± h` evaluations take a different branch of
    /// a ReLU, |x| or max than `x` does; a difference quotient across a kink
    /// does not estimate the derivative. Rejected entries are replaced by
    /// further samples when `max_entries` is set.
    pub skip_kinks: bool,
    /// Stop resampling an input after this many rejections.
    pub max_skips: usize,
    /// Instead of rejecting a kink-straddling stencil, evaluate `x ± h`
    /// with every piecewise op held on the branch it took at `x`. The
    /// quotient is then a central difference of the piece the analytic
    /// gradient belongs to. Needed for large ReLU networks, where almost
    /// any perturbation of an early parameter flips some unit.
    pub freeze_kinks: bool,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-3,
            abs_floor: 1e-7,
            max_entries: None,
            skip_kinks: true,
            max_skips: 64,
            freeze_kinks: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
    /// Entries rejected because the stencil straddled a kink.
    pub kinks_skipped: usize,
    /// Checked entries whose stencil straddled a kink and was evaluated
    /// with frozen branches.
    pub kinks_frozen: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    /// Every input had at least one checkable entry and all were within
    /// tolerance.
    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance && self.inputs.iter().all(|r| r.entries_checked > 0)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences `(f(x + h) - f(x - h)) / 2h`, entry by entry.
pub fn gradient_check<F>(mut f: F, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let (analytic, base_pattern, base_branches) = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let pattern = tape.branch_pattern();
        let branches = tape.branches();
        let mut grads = tape.backward(out)?;
        let g = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect::<Vec<_>>();
        (g, pattern, branches)
    };

    let mut eval = |values: &[Tensor], frozen: bool| -> Result<(f64, bool)> {
        let mut tape = if frozen { Tape::replaying(base_branches.clone()) } else { Tape::new() };
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let smooth = frozen || !(cfg.skip_kinks || cfg.freeze_kinks) || tape.branch_pattern() == base_pattern;
        Ok((tape.value(out).item(), smooth))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (which, input) in inputs.iter().enumerate() {
        let n = input.len();
        let want = cfg.max_entries.map_or(n, |m| m.min(n));
        // a random visiting order, so rejected entries are replaced by fresh ones
        let order: Vec<usize> = if want < n { sample(&mut rng, n, n).into_vec() } else { (0..n).collect() };
        let mut report = InputReport {
            max_rel_error: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
            entries_checked: 0,
            kinks_skipped: 0,
            kinks_frozen: 0,
        };
        for &e in &order {
            if report.entries_checked == want || report.kinks_skipped >= cfg.max_skips {
                break;
            }
            let x0 = input.data()[e];
            let mut stencil = |frozen: bool| -> Result<(f64, f64, bool)> {
                work[which].data_mut()[e] = x0 + cfg.step;
                let (plus, smooth_plus) = eval(&work, frozen)?;
                work[which].data_mut()[e] = x0 - cfg.step;
                let (minus, smooth_minus) = eval(&work, frozen)?;
                work[which].data_mut()[e] = x0;
                Ok((plus, minus, smooth_plus && smooth_minus))
            };
            let (mut plus, mut minus, smooth) = stencil(false)?;
            if !smooth {
                if cfg.freeze_kinks {
                    (plus, minus, _) = stencil(true)?;
                    report.kinks_frozen += 1;
                } else {
                    report.kinks_skipped += 1;
                    continue;
                }
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[which].data()[e];
            let err = relative_error(a, numeric, cfg.abs_floor);
            if err > report.max_rel_error || report.entries_checked == 0 {
                report.max_rel_error = err;
                report.worst_entry = e;
                report.analytic = a;
                report.numeric = numeric;
            }
            report.entries_checked += 1;
        }
        reports.push(report);
    }
    Ok(GradCheckReport {
        inputs: reports,
        tolerance: cfg.tolerance,
    })
}
