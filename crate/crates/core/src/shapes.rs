//! Synthetic shapes with analytic signed distances and area-uniform surface
//! samplers. Primitives are exact; CSG combinations use min/max, which is
//! exact outside and a bound inside near the seams.

use nalgebra::{Matrix3, UnitQuaternion, Vector4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;
use crate::marching_cubes::{marching_cubes, DenseGrid};
use crate::mesh::TriangleMesh;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    /// Axis-aligned box.
    Box { center: [f64; 3], half: [f64; 3] },
    /// Ring in the xy-plane.
    Torus { center: [f64; 3], major: f64, minor: f64 },
    Union { a: Box<Shape>, b: Box<Shape> },
    /// `a` with `b` carved out.
    Difference { a: Box<Shape>, b: Box<Shape> },
    Rotated { rotation: [[f64; 3]; 3], inner: Box<Shape> },
}

fn v(a: [f64; 3]) -> Vec3 {
    Vec3::from(a)
}

fn mat(r: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| r[i][j])
}

/// Uniformly distributed rotation (normalized Gaussian quaternion).
pub fn random_rotation<R: Rng>(rng: &mut R) -> Matrix3<f64> {
    let q = Vector4::from_fn(|_, _| StandardNormal.sample(rng));
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::from(q));
    *q.to_rotation_matrix().matrix()
}

impl Shape {
    pub fn rotated(self, rotation: &Matrix3<f64>) -> Shape {
        let rotation = [0, 1, 2].map(|i| [0, 1, 2].map(|j| rotation[(i, j)]));
        Shape::Rotated {
            rotation,
            inner: Box::new(self),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Shape::Sphere { .. } => "sphere",
            Shape::Box { .. } => "box",
            Shape::Torus { .. } => "torus",
            Shape::Union { .. } => "union",
            Shape::Difference { .. } => "difference",
            Shape::Rotated { inner, .. } => inner.kind(),
        }
    }

    /// Negative inside.
    pub fn sdf(&self, p: &Vec3) -> f64 {
        match self {
            Shape::Sphere { center, radius } => (p - v(*center)).norm() - radius,
            Shape::Box { center, half } => {
                let q = (p - v(*center)).abs() - v(*half);
                q.sup(&Vec3::zeros()).norm() + q.max().min(0.0)
            }
            Shape::Torus { center, major, minor } => {
                let d = p - v(*center);
                let ring = (d.x * d.x + d.y * d.y).sqrt() - major;
                (ring * ring + d.z * d.z).sqrt() - minor
            }
            Shape::Union { a, b } => a.sdf(p).min(b.sdf(p)),
            Shape::Difference { a, b } => a.sdf(p).max(-b.sdf(p)),
            Shape::Rotated { rotation, inner } => inner.sdf(&(mat(rotation).transpose() * p)),
        }
    }

    /// Surface area of the primitive, or of all components for CSG (used
    /// only to weight proposals).
    fn proposal_area(&self) -> f64 {
        use std::f64::consts::PI;
        match self {
            Shape::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Shape::Box { half: h, .. } => 8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2]),
            Shape::Torus { major, minor, .. } => 4.0 * PI * PI * major * minor,
            Shape::Union { a, b } | Shape::Difference { a, b } => a.proposal_area() + b.proposal_area(),
            Shape::Rotated { inner, .. } => inner.proposal_area(),
        }
    }

    /// One area-uniform proposal over all component surfaces, with the
    /// outward normal; `None` when it lands on a part removed by CSG.
    fn propose<R: Rng>(&self, rng: &mut R) -> Option<(Vec3, Vec3)> {
        match self {
            Shape::Sphere { center, radius } => {
                let d = Vec3::from_fn(|_, _| StandardNormal.sample(rng)).normalize();
                Some((v(*center) + d * *radius, d))
            }
            Shape::Box { center, half: h } => {
                let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let u = rng.random::<f64>() * (areas[0] + areas[1] + areas[2]);
                let axis = if u < areas[0] {
                    0
                } else if u < areas[0] + areas[1] {
                    1
                } else {
                    2
                };
                let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let mut p = Vec3::from_fn(|i, _| rng.random_range(-h[i]..=h[i]));
                p[axis] = side * h[axis];
                let mut n = Vec3::zeros();
                n[axis] = side;
                Some((v(*center) + p, n))
            }
            Shape::Torus { center, major, minor } => {
                let u = rng.random_range(0.0..std::f64::consts::TAU);
                // area element ∝ (R + r cos v)
                let t = loop {
                    let t = rng.random_range(0.0..std::f64::consts::TAU);
                    if rng.random::<f64>() * (major + minor) <= major + minor * t.cos() {
                        break t;
                    }
                };
                let n = Vec3::new(t.cos() * u.cos(), t.cos() * u.sin(), t.sin());
                let p = Vec3::new((major + minor * t.cos()) * u.cos(), (major + minor * t.cos()) * u.sin(), minor * t.sin());
                Some((v(*center) + p, n))
            }
            Shape::Union { a, b } => {
                let wa = a.proposal_area();
                if rng.random::<f64>() * (wa + b.proposal_area()) < wa {
                    a.propose(rng).filter(|(p, _)| b.sdf(p) > 0.0)
                } else {
                    b.propose(rng).filter(|(p, _)| a.sdf(p) > 0.0)
                }
            }
            Shape::Difference { a, b } => {
                let wa = a.proposal_area();
                if rng.random::<f64>() * (wa + b.proposal_area()) < wa {
                    a.propose(rng).filter(|(p, _)| b.sdf(p) > 0.0)
                } else {
                    b.propose(rng).filter(|(p, _)| a.sdf(p) < 0.0).map(|(p, n)| (p, -n))
                }
            }
            Shape::Rotated { rotation, inner } => {
                let r = mat(rotation);
                inner.propose(rng).map(|(p, n)| (r * p, r * n))
            }
        }
    }

    /// `n` points uniform by area on the surface with outward unit normals.
    pub fn sample_surface<R: Rng>(&self, n: usize, rng: &mut R) -> (Vec<Vec3>, Vec<Vec3>) {
        let mut pts = Vec::with_capacity(n);
        let mut nrm = Vec::with_capacity(n);
        while pts.len() < n {
            if let Some((p, q)) = self.propose(rng) {
                pts.push(p);
                nrm.push(q);
            }
        }
        (pts, nrm)
    }

    /// Zero level set by marching cubes over `[-1, 1]^3`.
    pub fn mesh(&self, resolution: usize) -> TriangleMesh {
        marching_cubes(&DenseGrid::from_fn(resolution, |p| self.sdf(p)), 0.0)
    }

    /// A random member of one of the five families, inside `[-0.9, 0.9]^3`
    /// under any rotation about the origin.
    pub fn random<R: Rng>(rng: &mut R) -> Shape {
        match rng.random_range(0..5) {
            0 => Shape::random_sphere(rng, 0.0),
            1 => Shape::random_box(rng, 0.0),
            2 => Shape::random_torus(rng),
            3 => {
                let a = Shape::random_box(rng, 0.15);
                let b = Shape::random_sphere(rng, 0.25);
                Shape::Union {
                    a: Box::new(a),
                    b: Box::new(b),
                }
            }
            _ => {
                let a = Shape::random_box(rng, 0.0);
                let Shape::Box { half, .. } = a else { unreachable!() };
                // carve a sphere centered on one face
                let axis = rng.random_range(0..3);
                let mut c = [0.0; 3];
                c[axis] = if rng.random::<bool>() { half[axis] } else { -half[axis] };
                let r = rng.random_range(0.45..0.8) * half.iter().copied().fold(f64::INFINITY, f64::min);
                Shape::Difference {
                    a: Box::new(a),
                    b: Box::new(Shape::Sphere { center: c, radius: r }),
                }
            }
        }
    }

    fn random_sphere<R: Rng>(rng: &mut R, offset: f64) -> Shape {
        let center = random_offset(rng, offset);
        Shape::Sphere {
            center,
            radius: rng.random_range(0.35..0.85 - offset * 3f64.sqrt()),
        }
    }

    fn random_box<R: Rng>(rng: &mut R, offset: f64) -> Shape {
        let center = random_offset(rng, offset);
        // keep the corner within the 0.9-ball
        let budget = 0.9 - offset * 3f64.sqrt();
        let mut half: [f64; 3] = [0; 3].map(|_| rng.random_range(0.25..0.6));
        let norm = (half[0] * half[0] + half[1] * half[1] + half[2] * half[2]).sqrt();
        if norm > budget {
            half = half.map(|h| h * budget / norm);
        }
        Shape::Box { center, half }
    }

    fn random_torus<R: Rng>(rng: &mut R) -> Shape {
        let minor = rng.random_range(0.12..0.25);
        Shape::Torus {
            center: [0.0; 3],
            major: rng.random_range(0.35..0.85 - minor),
            minor,
        }
    }
}

fn random_offset<R: Rng>(rng: &mut R, offset: f64) -> [f64; 3] {
    [0; 3].map(|_| rng.random_range(-offset..=offset))
}
