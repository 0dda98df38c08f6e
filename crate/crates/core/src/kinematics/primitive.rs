use std::f64::consts::PI;

use nalgebra::{Point3, Vector2, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Closed surface primitive in its local frame. Cylinders and capsules run
/// along the local z axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    Box { half: [f64; 3] },
    Cylinder { radius: f64, half_length: f64 },
    /// Cylinder of `half_length` capped by hemispheres of `radius`.
    Capsule { radius: f64, half_length: f64 },
}

impl Primitive {
    pub fn area(&self) -> f64 {
        match *self {
            Primitive::Box { half: [x, y, z] } => 8.0 * (x * y + y * z + x * z),
            Primitive::Cylinder { radius, half_length } => {
                2.0 * PI * radius * 2.0 * half_length + 2.0 * PI * radius * radius
            }
            Primitive::Capsule { radius, half_length } => {
                2.0 * PI * radius * 2.0 * half_length + 4.0 * PI * radius * radius
            }
        }
    }

    /// Uniform (area-measure) sample on the surface.
    pub fn sample_surface<R: Rng + ?Sized>(&self, rng: &mut R) -> Point3<f64> {
        match *self {
            Primitive::Box { half } => {
                let [x, y, z] = half;
                // Face pairs normal to x, y, z.
                let areas = [y * z, x * z, x * y];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.gen::<f64>() * total;
                let mut axis = 2;
                for (k, &a) in areas.iter().enumerate() {
                    if pick < a {
                        axis = k;
                        break;
                    }
                    pick -= a;
                }
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let mut p = [0.0; 3];
                for k in 0..3 {
                    p[k] = if k == axis {
                        sign * half[k]
                    } else {
                        rng.gen_range(-half[k]..=half[k])
                    };
                }
                Point3::new(p[0], p[1], p[2])
            }
            Primitive::Cylinder { radius, half_length } => {
                let side = 2.0 * PI * radius * 2.0 * half_length;
                let cap = PI * radius * radius;
                let pick = rng.gen::<f64>() * (side + 2.0 * cap);
                let theta = rng.gen::<f64>() * 2.0 * PI;
                if pick < side {
                    let z = rng.gen_range(-half_length..=half_length);
                    Point3::new(radius * theta.cos(), radius * theta.sin(), z)
                } else {
                    let r = radius * rng.gen::<f64>().sqrt();
                    let z = if pick < side + cap { half_length } else { -half_length };
                    Point3::new(r * theta.cos(), r * theta.sin(), z)
                }
            }
            Primitive::Capsule { radius, half_length } => {
                let side = 2.0 * PI * radius * 2.0 * half_length;
                let sphere = 4.0 * PI * radius * radius;
                if rng.gen::<f64>() * (side + sphere) < side {
                    let theta = rng.gen::<f64>() * 2.0 * PI;
                    let z = rng.gen_range(-half_length..=half_length);
                    Point3::new(radius * theta.cos(), radius * theta.sin(), z)
                } else {
                    let dir = loop {
                        let v = Vector3::new(
                            rng.sample::<f64, _>(StandardNormal),
                            rng.sample::<f64, _>(StandardNormal),
                            rng.sample::<f64, _>(StandardNormal),
                        );
                        let n = v.norm();
                        if n > 1e-12 {
                            break v / n;
                        }
                    };
                    let shift = if dir.z >= 0.0 { half_length } else { -half_length };
                    Point3::new(radius * dir.x, radius * dir.y, radius * dir.z + shift)
                }
            }
        }
    }

    /// Exact signed distance to the surface (negative inside).
    pub fn signed_distance(&self, p: &Point3<f64>) -> f64 {
        match *self {
            Primitive::Box { half } => {
                let q = Vector3::new(p.x.abs() - half[0], p.y.abs() - half[1], p.z.abs() - half[2]);
                let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
                outside + q.x.max(q.y).max(q.z).min(0.0)
            }
            Primitive::Cylinder { radius, half_length } => {
                let d = Vector2::new(
                    (p.x * p.x + p.y * p.y).sqrt() - radius,
                    p.z.abs() - half_length,
                );
                d.x.max(d.y).min(0.0) + Vector2::new(d.x.max(0.0), d.y.max(0.0)).norm()
            }
            Primitive::Capsule { radius, half_length } => {
                let z = p.z.clamp(-half_length, half_length);
                (p - Point3::new(0.0, 0.0, z)).norm() - radius
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    const SHAPES: [Primitive; 3] = [
        Primitive::Box { half: [0.3, 0.1, 0.05] },
        Primitive::Cylinder { radius: 0.2, half_length: 0.4 },
        Primitive::Capsule { radius: 0.07, half_length: 0.5 },
    ];

    #[test]
    fn samples_lie_on_surface() {
        let mut r = stream(1, &[]);
        for s in SHAPES {
            for _ in 0..2000 {
                let p = s.sample_surface(&mut r);
                assert!(s.signed_distance(&p).abs() < 1e-12, "{s:?} {p:?}");
            }
        }
    }

    #[test]
    fn sdf_signs() {
        for s in SHAPES {
            assert!(s.signed_distance(&Point3::origin()) < 0.0);
            assert!(s.signed_distance(&Point3::new(5.0, 5.0, 5.0)) > 0.0);
        }
        let b = SHAPES[0];
        assert!((b.signed_distance(&Point3::new(1.3, 0.0, 0.0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn areas() {
        assert!((SHAPES[0].area() - 8.0 * (0.03 + 0.005 + 0.015)).abs() < 1e-12);
        let unit_sphere = Primitive::Capsule { radius: 1.0, half_length: 0.0 };
        assert!((unit_sphere.area() - 4.0 * PI).abs() < 1e-12);
    }
}
