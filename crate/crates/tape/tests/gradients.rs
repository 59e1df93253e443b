use lazysurf_tape::{gradient_check, GradCheckConfig, Result, Tape, TapeError, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random values bounded away from zero, for ops with a kink at 0.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Contracts an op output with a fixed random weighting so every output
/// entry influences the scalar being differentiated.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(random(&mut rng, &shape));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let cfg = GradCheckConfig {
        step: 1e-5,
        tolerance: 1e-6,
        abs_floor: 1e-6,
        ..Default::default()
    };
    let report = gradient_check(f, inputs, &cfg).unwrap();
    report.max_rel_error()
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[8, 8]);
    let b = random(&mut rng, &[8, 8]);
    let err = check(&[a, b], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, 7)
    });
    assert!(err < 1e-6, "matmul rel err {err}");
}

#[test]
fn linear_and_add_row_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[5, 4]);
    let w = random(&mut rng, &[4, 3]);
    let b = random(&mut rng, &[3]);
    let err = check(&[x.clone(), w.clone(), b.clone()], |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        project(t, y, 3)
    });
    assert!(err < 1e-6, "linear rel err {err}");
    let err = check(&[x, b.clone().reshaped(vec![1, 3]).unwrap(), w], |t, v| {
        let y = t.matmul(v[0], v[2])?;
        let y = t.add_row(y, v[1])?;
        project(t, y, 4)
    });
    assert!(err < 1e-6, "add_row rel err {err}");
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = away_from_zero(&mut rng, &[4, 5]);
    let b = random(&mut rng, &[4, 5]);
    let err = check(&[a.clone(), b.clone()], |t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(s, v[1])?;
        let m = t.mul(d, v[1])?;
        let r = t.relu(v[0]);
        let th = t.tanh(m);
        let ab = t.abs(v[0]);
        let sg = t.sigmoid(v[1]);
        let x = t.add(r, th)?;
        let x = t.add(x, ab)?;
        let x = t.mul(x, sg)?;
        let x = t.scale(x, 0.7);
        project(t, x, 5)
    });
    assert!(err < 1e-6, "elementwise rel err {err}");
}

#[test]
fn softmax_concat_slice_reshape_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[3, 2]);
    let err = check(&[a, b], |t, v| {
        let c = t.concat_cols(&[v[0], v[1]])?;
        let s = t.softmax_rows(c)?;
        let sl = t.slice_cols(s, 1, 5)?;
        let r = t.reshape(sl, vec![6, 2])?;
        let m = t.mean(r);
        let p = project(t, r, 6)?;
        t.add(m, p)
    });
    assert!(err < 1e-6, "softmax/concat rel err {err}");
}

#[test]
fn normalization_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[7, 3]);
    let g = random(&mut rng, &[3]);
    let b = random(&mut rng, &[3]);
    let err = check(&[x.clone(), g.clone(), b.clone()], |t, v| {
        let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
        project(t, y, 8)
    });
    assert!(err < 1e-6, "batch_norm train rel err {err}");
    let err = check(&[x.clone(), g.clone(), b.clone()], |t, v| {
        let y = t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)?;
        project(t, y, 9)
    });
    assert!(err < 1e-6, "batch_norm eval rel err {err}");
    let err = check(&[x, g, b], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        project(t, y, 10)
    });
    assert!(err < 1e-6, "layer_norm rel err {err}");
}

#[test]
fn pooling_and_gather_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // Distinct values so the argmax is stable under the finite-difference step.
    let x = Tensor::new(
        vec![6, 3],
        (0..18).map(|i| ((i * 7) % 18) as f64 * 0.1 + rng.random_range(0.0..0.01)).collect(),
    )
    .unwrap();
    let seg = [0usize, 2, 0, 2, 2, 0];
    let err = check(&[x.clone()], |t, v| {
        let y = t.segment_max(v[0], &seg, 4)?;
        let g = t.gather_rows(y, &[Some(2), None, Some(0), Some(2)])?;
        project(t, g, 11)
    });
    assert!(err < 1e-6, "segment_max/gather rel err {err}");

    let mats = random(&mut rng, &[2, 9]);
    let err = check(&[x, mats], |t, v| {
        let y = t.apply_row_transforms(v[0], v[1], &[1, 0, 1, 1, 0, 0])?;
        project(t, y, 12)
    });
    assert!(err < 1e-6, "apply_row_transforms rel err {err}");
}

#[test]
fn grouped_attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, &[6, 4]);
    let b = random(&mut rng, &[6, 4]);
    let v = random(&mut rng, &[6, 5]);
    let err = check(&[a, b, v], |t, x| {
        let s = t.group_scores(x[0], x[1], 3)?;
        let p = t.softmax_rows(s)?;
        let o = t.group_mix(p, x[2], 3)?;
        project(t, o, 13)
    });
    assert!(err < 1e-6, "grouped attention rel err {err}");
}

#[test]
fn weighted_sum_and_rank_softmax_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits = random(&mut rng, &[1, 4]);
    let vals = random(&mut rng, &[12, 3]);
    let err = check(&[logits, vals], |t, x| {
        let w = t.rank_softmax(x[0], &[4, 1, 0])?;
        let y = t.weighted_sum(w, x[1])?;
        project(t, y, 14)
    });
    assert!(err < 1e-6, "weighted_sum/rank_softmax rel err {err}");
}

#[test]
fn bce_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let l = random(&mut rng, &[6, 1]);
    let targets = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    let err = check(&[l], |t, x| t.bce_with_logits(x[0], &targets));
    assert!(err < 1e-6, "bce rel err {err}");
}

#[test]
fn tanh_at_zero() {
    let mut t = Tape::new();
    let x = t.variable(Tensor::scalar(0.0));
    let y = t.tanh(x);
    assert_eq!(t.value(y).item(), 0.0);
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 1.0);
}

#[test]
fn single_member_segment_passes_gradient_through() {
    let mut t = Tape::new();
    let x = t.variable(Tensor::matrix(1, 3, vec![0.5, -2.0, 3.0]).unwrap());
    let y = t.segment_max(x, &[0], 1).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, -2.0, 3.0]);
    let up = t.constant(Tensor::matrix(1, 3, vec![1.5, 2.5, -4.0]).unwrap());
    let l = t.mul(y, up).unwrap();
    let l = t.sum(l);
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.5, 2.5, -4.0]);
}

#[test]
fn segment_max_ties_route_to_lowest_index() {
    let mut t = Tape::new();
    let x = t.variable(Tensor::matrix(3, 1, vec![1.0, 2.0, 2.0]).unwrap());
    let y = t.segment_max(x, &[0, 0, 0], 1).unwrap();
    let l = t.sum(y);
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn empty_segment_is_zero() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::matrix(2, 2, vec![-1.0, -2.0, -3.0, -4.0]).unwrap());
    let y = t.segment_max(x, &[1, 1], 3).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 0.0, -1.0, -2.0, 0.0, 0.0]);
}

#[test]
fn sum_gives_unit_gradient_and_zero_scale_gives_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let w0 = random(&mut rng, &[3, 4]);
    let mut t = Tape::new();
    let w = t.variable(w0.clone());
    let l = t.sum(w);
    let g = t.backward(l).unwrap();
    assert!(g.get(w).unwrap().data().iter().all(|v| *v == 1.0));

    let mut t = Tape::new();
    let w = t.variable(w0);
    let f = t.tanh(w);
    let f = t.sum(f);
    let l = t.scale(f, 0.0);
    let g = t.backward(l).unwrap();
    assert!(g.get(w).unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut t = Tape::new();
    let w = t.variable(Tensor::zeros(&[2, 2]));
    assert!(matches!(t.backward(w), Err(TapeError::NonScalarLoss(_))));
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[4, 5]));
    let msg = t.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn repeated_backward_is_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x0 = random(&mut rng, &[5, 4]);
    let w0 = random(&mut rng, &[4, 2]);
    let run = || {
        let mut t = Tape::new();
        let x = t.constant(x0.clone());
        let w = t.variable(w0.clone());
        let y = t.matmul(x, w).unwrap();
        let y = t.tanh(y);
        let l = t.sum(y);
        t.backward(l).unwrap().get(w).unwrap().clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn gradient_check_on_linear_function_is_at_round_off() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&mut rng, &[3, 3]);
    let report = gradient_check(
        |t, v| {
            let y = t.scale(v[0], 3.0);
            Ok(t.sum(y))
        },
        &[x],
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-9, "{}", report.max_rel_error());
}

#[test]
fn relu_away_from_kink_passes() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = away_from_zero(&mut rng, &[4, 4]);
    let report = gradient_check(
        |t, v| {
            let y = t.relu(v[0]);
            project(t, y, 2)
        },
        &[x],
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed());
}

proptest! {
    #[test]
    fn batch_norm_eval_is_affine(
        xs in proptest::collection::vec(-5.0f64..5.0, 8),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        // f(a·x + b·y) == a·f(x) + b·f(y) - (a + b - 1)·f(0) for an affine f.
        let run = |data: Vec<f64>| {
            let mut t = Tape::new();
            let x = t.constant(Tensor::matrix(4, 2, data).unwrap());
            let g = t.constant(Tensor::new(vec![2], vec![1.3, -0.7]).unwrap());
            let be = t.constant(Tensor::new(vec![2], vec![0.2, 0.4]).unwrap());
            let y = t.batch_norm_eval(x, g, be, &[0.5, -0.5], &[2.0, 0.25], 1e-5).unwrap();
            t.value(y).data().to_vec()
        };
        let x: Vec<f64> = xs[..8].to_vec();
        let y: Vec<f64> = xs.iter().rev().cloned().collect();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let (fx, fy, f0, fm) = (run(x), run(y), run(vec![0.0; 8]), run(mix));
        for i in 0..8 {
            let expect = a * fx[i] + b * fy[i] - (a + b - 1.0) * f0[i];
            prop_assert!((fm[i] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(xs in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(3, 4, xs).unwrap());
        let y = t.softmax_rows(x).unwrap();
        for r in 0..3 {
            let s: f64 = t.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn stencils_across_a_kink_are_rejected() {
    // 3e-5 sits inside the ±1e-4 stencil of the ReLU kink at 0
    let x = Tensor::new(vec![3], vec![3e-5, 0.5, -0.7]).unwrap();
    let f = |t: &mut Tape, v: &[Var]| {
        let y = t.relu(v[0]);
        Ok(t.sum(y))
    };
    let strict = GradCheckConfig {
        skip_kinks: false,
        ..Default::default()
    };
    let naive = gradient_check(f, std::slice::from_ref(&x), &strict).unwrap();
    assert!(!naive.passed());
    assert_eq!(naive.inputs[0].worst_entry, 0);

    let report = gradient_check(f, &[x], &GradCheckConfig::default()).unwrap();
    assert!(report.passed());
    assert_eq!(report.inputs[0].kinks_skipped, 1);
    assert_eq!(report.inputs[0].entries_checked, 2);
}

#[test]
fn all_entries_on_kinks_is_not_a_pass() {
    let x = Tensor::new(vec![2], vec![1e-5, -2e-5]).unwrap();
    let report = gradient_check(
        |t, v| {
            let y = t.abs(v[0]);
            Ok(t.sum(y))
        },
        &[x],
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert_eq!(report.inputs[0].entries_checked, 0);
    assert!(!report.passed());
}

#[test]
fn branch_pattern_tracks_pieces() {
    let pattern = |vals: Vec<f64>| {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![3, 1], vals).unwrap());
        let r = t.relu(x);
        let _ = t.segment_max(r, &[0, 0, 1], 2).unwrap();
        t.branch_pattern()
    };
    assert_eq!(pattern(vec![1.0, 2.0, 3.0]), pattern(vec![1.5, 2.5, 0.1]));
    // a ReLU input changes sign
    assert_ne!(pattern(vec![1.0, 2.0, 3.0]), pattern(vec![1.0, 2.0, -3.0]));
    // the segment winner changes
    assert_ne!(pattern(vec![1.0, 2.0, 3.0]), pattern(vec![2.5, 2.0, 3.0]));
}

#[test]
fn frozen_stencils_check_the_active_piece() {
    let x = Tensor::new(vec![3], vec![1e-5, -2e-5, 0.4]).unwrap();
    let f = |t: &mut Tape, v: &[Var]| {
        let a = t.abs(v[0]);
        let r = t.relu(v[0]);
        let s = t.add(a, r)?;
        Ok(t.sum(s))
    };
    let cfg = GradCheckConfig {
        freeze_kinks: true,
        ..Default::default()
    };
    let report = gradient_check(f, &[x], &cfg).unwrap();
    let r = &report.inputs[0];
    assert_eq!((r.entries_checked, r.kinks_frozen, r.kinks_skipped), (3, 2, 0));
    assert!(r.max_rel_error < 1e-9, "{r:?}");
    assert!(report.passed());
}

#[test]
fn replay_holds_branches() {
    let record = |vals: Vec<f64>, tape: &mut Tape| {
        let x = tape.constant(Tensor::new(vec![4, 1], vals).unwrap());
        let r = tape.relu(x);
        let a = tape.abs(x);
        let s = tape.add(r, a).unwrap();
        let m = tape.segment_max(s, &[0, 0, 1, 1], 3).unwrap();
        tape.value(m).data().to_vec()
    };
    let mut base = Tape::new();
    let base_out = record(vec![1.0, 2.0, -3.0, 0.5], &mut base);
    assert_eq!(base_out, vec![4.0, 3.0, 0.0]);

    // replaying on the recorded inputs reproduces the pass
    let mut same = Tape::replaying(base.branches());
    assert_eq!(record(vec![1.0, 2.0, -3.0, 0.5], &mut same), base_out);

    // flipped signs and a new segment winner stay on the recorded piece
    let mut moved = Tape::replaying(base.branches());
    let out = record(vec![5.0, 2.0, 3.0, -0.5], &mut moved);
    // rows 1 and 2 still win; row 2 keeps relu off and abs negated: 0 + -3
    assert_eq!(out, vec![4.0, -3.0, 0.0]);
    assert_ne!(moved.branches(), base.branches());
}

proptest! {
    #[test]
    fn buffers_and_gradients_follow_the_shape(m in 1usize..6, k in 1usize..6, n in 1usize..6, extra in 1usize..4, seed in any::<u64>()) {
        prop_assert!(Tensor::new(vec![m, k], vec![0.0; m * k + extra]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::new();
        let a = t.variable(random(&mut rng, &[m, k]));
        let b = t.variable(random(&mut rng, &[k, n]));
        let y = t.matmul(a, b).unwrap();
        let r = t.relu(y);
        let s = t.sum(r);
        let mut g = t.backward(s).unwrap();
        prop_assert_eq!(g.take(a).unwrap().shape().to_vec(), vec![m, k]);
        prop_assert_eq!(g.take(b).unwrap().shape().to_vec(), vec![k, n]);
    }
}
