//! Training data from synthetic shapes: simulated scans, query sampling with
//! ground-truth distances, and rotation augmentation.

use nalgebra::Matrix3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::geometry::{normalize_cloud, NormalizeTransform, PointCloud, QuerySet, Vec3};
use crate::shapes::{random_rotation, Shape};

/// Derives an independent stream seed from a base seed and tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    // splitmix64 finalizer over the running state
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    tags.iter().fold(mix(base), |acc, t| mix(acc ^ mix(*t)))
}

/// `n` points uniform by area, displaced along the normal by `N(0, σ²)`.
pub fn sample_scan(shape: &Shape, n: usize, noise_sigma: f64, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pts, nrm) = shape.sample_surface(n, &mut rng);
    if noise_sigma > 0.0 {
        let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for (p, n) in pts.iter_mut().zip(&nrm) {
            *p += n * noise.sample(&mut rng);
        }
    }
    PointCloud::new(pts, Some(nrm))
}

/// Queries in the shape's own frame: `n_surface` surface points offset
/// along the normal by `U(-offset_range, offset_range)`, then `n_uniform`
/// uniform in `[-1, 1]^3`.
pub fn sample_queries(shape: &Shape, n_surface: usize, n_uniform: usize, offset_range: f64, seed: u64) -> QuerySet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_queries_in(shape, n_surface, n_uniform, offset_range, &NormalizeTransform::identity(), &mut rng)
}

/// As [`sample_queries`] but in the normalized frame given by `frame`:
/// offsets and uniform draws are in normalized units, and distances are
/// evaluated on the shape and scaled. Points pushed outside the cube by an
/// offset are clamped onto it.
pub fn sample_queries_in<R: Rng>(
    shape: &Shape,
    n_surface: usize,
    n_uniform: usize,
    offset_range: f64,
    frame: &NormalizeTransform,
    rng: &mut R,
) -> QuerySet {
    let mut points = Vec::with_capacity(n_surface + n_uniform);
    let (surf, nrm) = shape.sample_surface(n_surface, rng);
    for (p, n) in surf.iter().zip(&nrm) {
        let t = if offset_range > 0.0 {
            rng.random_range(-offset_range..=offset_range)
        } else {
            0.0
        };
        let q = frame.apply(p) + n * t;
        points.push(q.map(|c| c.clamp(-1.0, 1.0)));
    }
    for _ in 0..n_uniform {
        points.push(Vec3::from_fn(|_, _| rng.random_range(-1.0..=1.0)));
    }
    let gt = points.iter().map(|q| shape.sdf(&frame.invert(q)) * frame.scale).collect();
    QuerySet {
        points,
        gt_signed_distance: Some(gt),
    }
}

/// One training example in the normalized frame.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub cloud: PointCloud,
    pub queries: Vec<Vec3>,
    pub gt: Vec<f64>,
    /// Applied to the shape before scanning.
    pub rotation: Matrix3<f64>,
    pub transform: NormalizeTransform,
}

/// Scan the (rotated) shape, normalize by the scan, and draw the query
/// pool in that frame; `queries_per_step` of the pool are kept.
pub fn make_train_sample(shape: &Shape, cfg: &DataConfig, rotation: Matrix3<f64>, seed: u64) -> Result<TrainSample> {
    let shape = if rotation == Matrix3::identity() {
        shape.clone()
    } else {
        shape.clone().rotated(&rotation)
    };
    let scan = sample_scan(&shape, cfg.input_points, cfg.noise.sigma(), derive_seed(seed, &[0]))?;
    let (cloud, transform) = normalize_cloud(&scan)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
    let pool = sample_queries_in(
        &shape,
        cfg.surface_queries,
        cfg.uniform_queries,
        cfg.offset_range,
        &transform,
        &mut rng,
    );
    let gt_all = pool.gt_signed_distance.expect("sampled with distances");
    let mut order: Vec<usize> = (0..pool.points.len()).collect();
    order.shuffle(&mut rng);
    order.truncate(cfg.queries_per_step.min(order.len()));
    Ok(TrainSample {
        cloud,
        queries: order.iter().map(|&i| pool.points[i]).collect(),
        gt: order.iter().map(|&i| gt_all[i]).collect(),
        rotation,
        transform,
    })
}

/// A training sample of `shape` under a uniformly random rotation.
pub fn random_rotation_augment(shape: &Shape, cfg: &DataConfig, seed: u64) -> Result<TrainSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2]));
    make_train_sample(shape, cfg, random_rotation(&mut rng), seed)
}

pub fn generate_corpus(n: usize, seed: u64) -> Vec<Shape> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Shape::random(&mut rng)).collect()
}

fn fixed_scan_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, &[u64::MAX, index as u64])
}

/// The scan of shape `index` seen in every epoch when augmentation is off,
/// in the shape's own frame.
pub fn fixed_training_scan(shape: &Shape, cfg: &DataConfig, seed: u64, index: usize) -> Result<PointCloud> {
    sample_scan(shape, cfg.input_points, cfg.noise.sigma(), derive_seed(fixed_scan_seed(seed, index), &[0]))
}

/// Fresh samples of every shape for one epoch, `cfg.repeats` per shape;
/// sample `i` is of shape `i % shapes.len()`. Each sample has its own
/// seed, so results do not depend on the thread count.
pub fn epoch_samples(shapes: &[Shape], cfg: &DataConfig, seed: u64, epoch: usize) -> Result<Vec<TrainSample>> {
    (0..shapes.len() * cfg.repeats)
        .into_par_iter()
        .map(|i| {
            let s = &shapes[i % shapes.len()];
            let sample_seed = derive_seed(seed, &[epoch as u64, i as u64]);
            if cfg.augment {
                random_rotation_augment(s, cfg, sample_seed)
            } else {
                // the scan stays fixed across epochs; only queries change
                let mut sample = make_train_sample(s, cfg, Matrix3::identity(), fixed_scan_seed(seed, i))?;
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
                let pool = sample_queries_in(
                    s,
                    cfg.surface_queries,
                    cfg.uniform_queries,
                    cfg.offset_range,
                    &sample.transform,
                    &mut rng,
                );
                let gt = pool.gt_signed_distance.expect("sampled with distances");
                let mut order: Vec<usize> = (0..pool.points.len()).collect();
                order.shuffle(&mut rng);
                order.truncate(cfg.queries_per_step.min(order.len()));
                sample.queries = order.iter().map(|&j| pool.points[j]).collect();
                sample.gt = order.iter().map(|&j| gt[j]).collect();
                Ok(sample)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere() -> Shape {
        Shape::Sphere {
            center: [0.0; 3],
            radius: 0.5,
        }
    }

    #[test]
    fn noiseless_scan_is_on_the_sphere() {
        let c = sample_scan(&sphere(), 2000, 0.0, 1).unwrap();
        assert!(c.points().iter().all(|p| (p.norm() - 0.5).abs() < 1e-9));
        assert_eq!(c, sample_scan(&sphere(), 2000, 0.0, 1).unwrap());
        assert!(sample_scan(&sphere(), 0, 0.0, 1).is_err());
    }

    #[test]
    fn scan_noise_has_the_requested_spread() {
        let c = sample_scan(&sphere(), 6000, 0.01, 7).unwrap();
        let err: Vec<f64> = c.points().iter().map(|p| p.norm() - 0.5).collect();
        let mean = err.iter().sum::<f64>() / err.len() as f64;
        let std = (err.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (err.len() - 1) as f64).sqrt();
        assert!((std - 0.01).abs() < 0.001, "std {std}");
    }

    #[test]
    fn query_examples() {
        let q = sample_queries(&sphere(), 1000, 1000, 0.02, 3);
        assert_eq!(q.points.len(), 2000);
        let gt = q.gt_signed_distance.unwrap();
        assert!(gt[..1000].iter().all(|d| d.abs() <= 0.02 + 1e-12));
        assert!(q.points[1000..].iter().all(|p| p.abs().max() <= 1.0));

        let zero = sample_queries(&sphere(), 50, 0, 0.0, 4);
        assert!(zero.gt_signed_distance.unwrap().iter().all(|d| d.abs() < 1e-12));

        assert_eq!(sphere().sdf(&Vec3::zeros()), -0.5);
    }

    #[test]
    fn band_distances_equal_offsets_on_a_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frame = NormalizeTransform::identity();
        let (p, n) = sphere().sample_surface(100, &mut rng);
        let q = sample_queries_in(&sphere(), 100, 0, 0.02, &frame, &mut ChaCha8Rng::seed_from_u64(5));
        let gt = q.gt_signed_distance.unwrap();
        for i in 0..100 {
            let offset = (q.points[i] - p[i]).dot(&n[i]);
            assert!((gt[i] - offset).abs() < 1e-12);
        }
    }

    #[test]
    fn training_sample_is_normalized_with_scaled_distances() {
        let cfg = DataConfig::default();
        let shape = Shape::Sphere {
            center: [0.1, 0.0, -0.2],
            radius: 0.4,
        };
        let s = make_train_sample(&shape, &cfg, Matrix3::identity(), 9).unwrap();
        assert_eq!(s.cloud.len(), 6000);
        assert_eq!(s.queries.len(), 1000);
        assert!(s.cloud.check_in_cube().is_ok());
        for (q, d) in s.queries.iter().zip(&s.gt) {
            let world = s.transform.invert(q);
            assert!((shape.sdf(&world) * s.transform.scale - d).abs() < 1e-12);
        }
    }

    #[test]
    fn augmentation_preserves_distances() {
        let cfg = DataConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = Shape::random(&mut rng);
        let s = random_rotation_augment(&shape, &cfg, 12).unwrap();
        let r = s.rotation;
        assert!((r.determinant() - 1.0).abs() < 1e-9);
        for (q, d) in s.queries.iter().zip(&s.gt) {
            // back to the unrotated shape frame
            let world = r.transpose() * s.transform.invert(q);
            assert!((shape.sdf(&world) * s.transform.scale - d).abs() < 1e-12);
        }
        let id = make_train_sample(&shape, &cfg, Matrix3::identity(), 12).unwrap();
        let plain = make_train_sample(&shape, &cfg, Matrix3::identity(), 12).unwrap();
        assert_eq!(id.queries, plain.queries);
        assert_eq!(id.gt, plain.gt);
    }

    #[test]
    fn epochs_are_deterministic() {
        let shapes = generate_corpus(3, 1);
        let mut cfg = DataConfig::default();
        cfg.input_points = 500;
        let a = epoch_samples(&shapes, &cfg, 2, 0).unwrap();
        let b = epoch_samples(&shapes, &cfg, 2, 0).unwrap();
        let c = epoch_samples(&shapes, &cfg, 2, 1).unwrap();
        assert_eq!(a[1].gt, b[1].gt);
        assert_ne!(a[1].gt, c[1].gt);
        cfg.augment = false;
        let d = epoch_samples(&shapes, &cfg, 2, 0).unwrap();
        let e = epoch_samples(&shapes, &cfg, 2, 1).unwrap();
        assert_eq!(d[0].cloud, e[0].cloud);
        assert_ne!(d[0].gt, e[0].gt);
    }

    #[test]
    fn fixed_scan_is_the_one_trained_on() {
        let shapes = generate_corpus(2, 4);
        let mut cfg = DataConfig::default();
        cfg.input_points = 400;
        cfg.augment = false;
        let epoch = epoch_samples(&shapes, &cfg, 9, 3).unwrap();
        for (i, s) in shapes.iter().enumerate() {
            let scan = fixed_training_scan(s, &cfg, 9, i).unwrap();
            let (cloud, _) = normalize_cloud(&scan).unwrap();
            assert_eq!(cloud, epoch[i].cloud);
        }
    }

    #[test]
    fn repeats_match_a_replicated_corpus() {
        let shapes = generate_corpus(2, 4);
        let mut cfg = DataConfig::default();
        cfg.input_points = 300;
        cfg.augment = false;
        let tripled: Vec<Shape> = (0..3).flat_map(|_| shapes.clone()).collect();
        let expect = epoch_samples(&tripled, &cfg, 5, 1).unwrap();
        cfg.repeats = 3;
        let got = epoch_samples(&shapes, &cfg, 5, 1).unwrap();
        assert_eq!(got.len(), 6);
        for (a, b) in got.iter().zip(&expect) {
            assert_eq!((&a.cloud, &a.queries, &a.gt), (&b.cloud, &b.queries, &b.gt));
        }
        // copies of one shape are different scans
        assert_ne!(got[0].cloud, got[2].cloud);
    }
}
