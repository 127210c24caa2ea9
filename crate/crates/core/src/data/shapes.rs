//! Parametric surfaces sampled uniformly by area, with exact outward normals.
//! The up axis is +z.

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::geometry::{Point, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipsoid,
    Box,
    Cylinder,
    Lamp,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Ellipsoid, ShapeKind::Box, ShapeKind::Cylinder, ShapeKind::Lamp];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Ellipsoid => "ellipsoid",
            ShapeKind::Box => "box",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Lamp => "lamp",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ShapeFamily {
    Ellipsoid { radii: [f32; 3] },
    Box { half_extents: [f32; 3] },
    /// Closed cylinder along z, centered at the origin.
    Cylinder { radius: f32, height: f32 },
    /// Base disk on the ground, a thin pole, and an open lampshade frustum on top.
    Lamp {
        base_radius: f32,
        base_height: f32,
        pole_radius: f32,
        pole_height: f32,
        shade_bottom_radius: f32,
        shade_top_radius: f32,
        shade_height: f32,
    },
}

impl ShapeFamily {
    pub fn kind(&self) -> ShapeKind {
        match self {
            ShapeFamily::Ellipsoid { .. } => ShapeKind::Ellipsoid,
            ShapeFamily::Box { .. } => ShapeKind::Box,
            ShapeFamily::Cylinder { .. } => ShapeKind::Cylinder,
            ShapeFamily::Lamp { .. } => ShapeKind::Lamp,
        }
    }

    fn dims(&self) -> Vec<f32> {
        match *self {
            ShapeFamily::Ellipsoid { radii } => radii.to_vec(),
            ShapeFamily::Box { half_extents } => half_extents.to_vec(),
            ShapeFamily::Cylinder { radius, height } => vec![radius, height],
            ShapeFamily::Lamp {
                base_radius,
                base_height,
                pole_radius,
                pole_height,
                shade_bottom_radius,
                shade_top_radius,
                shade_height,
            } => vec![
                base_radius,
                base_height,
                pole_radius,
                pole_height,
                shade_bottom_radius,
                shade_top_radius,
                shade_height,
            ],
        }
    }
}

/// Rotation about the up axis followed by a translation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub yaw: f32,
    pub translation: Point,
}

impl Pose {
    fn apply(&self, p: Point, n: Point) -> (Point, Point) {
        let (s, c) = self.yaw.sin_cos();
        let rot = |v: Point| [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]];
        let rp = rot(p);
        let t = self.translation;
        ([rp[0] + t[0], rp[1] + t[1], rp[2] + t[2]], rot(n))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub family: ShapeFamily,
    #[serde(default)]
    pub pose: Pose,
    pub seed: u64,
}

/// Draws `n` surface points of `spec` with outward unit normals. The cloud is not normalized.
pub fn sample_shape(spec: &ShapeSpec, n: usize) -> Result<PointCloud> {
    if n == 0 {
        return Err(arg("sample_shape needs n >= 1"));
    }
    let dims = spec.family.dims();
    if dims.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
        return Err(arg(format!("shape dimensions must be positive, got {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let surfaces = surfaces(&spec.family);
    let total: f32 = surfaces.iter().map(Surface::area).sum();
    let mut positions = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pick = rng.random::<f32>() * total;
        let mut chosen = &surfaces[surfaces.len() - 1];
        for s in &surfaces {
            if pick < s.area() {
                chosen = s;
                break;
            }
            pick -= s.area();
        }
        let (p, nrm) = chosen.sample(&mut rng);
        let (p, nrm) = spec.pose.apply(p, nrm);
        positions.push(p);
        normals.push(unit(nrm));
    }
    PointCloud::with_normals(positions, normals)
}

fn unit(v: Point) -> Point {
    let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|x| x / len)
}

enum Surface {
    Ellipsoid { radii: [f32; 3] },
    /// Axis-aligned rectangle at `offset` along `axis`, facing `sign`.
    Face { axis: usize, sign: f32, offset: f32, half: [f32; 2] },
    /// Horizontal disk at height `z`, normal `sign` along z.
    Disk { radius: f32, z: f32, sign: f32 },
    /// Lateral surface of a frustum along z (a cylinder when the radii agree).
    Frustum { r0: f32, r1: f32, z0: f32, height: f32 },
}

fn surfaces(family: &ShapeFamily) -> Vec<Surface> {
    match *family {
        ShapeFamily::Ellipsoid { radii } => vec![Surface::Ellipsoid { radii }],
        ShapeFamily::Box { half_extents: h } => {
            let mut faces = Vec::with_capacity(6);
            for axis in 0..3 {
                let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                for sign in [1.0, -1.0] {
                    faces.push(Surface::Face { axis, sign, offset: sign * h[axis], half: [h[u], h[v]] });
                }
            }
            faces
        }
        ShapeFamily::Cylinder { radius, height } => {
            let z0 = -0.5 * height;
            vec![
                Surface::Frustum { r0: radius, r1: radius, z0, height },
                Surface::Disk { radius, z: z0 + height, sign: 1.0 },
                Surface::Disk { radius, z: z0, sign: -1.0 },
            ]
        }
        ShapeFamily::Lamp {
            base_radius,
            base_height,
            pole_radius,
            pole_height,
            shade_bottom_radius,
            shade_top_radius,
            shade_height,
        } => {
            let pole_top = base_height + pole_height;
            // the shade hangs so that its top ring sits slightly above the pole tip
            let shade_z0 = pole_top - 0.8 * shade_height;
            vec![
                Surface::Disk { radius: base_radius, z: 0.0, sign: -1.0 },
                Surface::Disk { radius: base_radius, z: base_height, sign: 1.0 },
                Surface::Frustum { r0: base_radius, r1: base_radius, z0: 0.0, height: base_height },
                Surface::Frustum { r0: pole_radius, r1: pole_radius, z0: base_height, height: pole_height },
                Surface::Frustum { r0: shade_bottom_radius, r1: shade_top_radius, z0: shade_z0, height: shade_height },
            ]
        }
    }
}

impl Surface {
    fn area(&self) -> f32 {
        match *self {
            Surface::Ellipsoid { radii: [a, b, c] } => {
                // Knud Thomsen's approximation; only used to weight this single surface
                let p = 1.6075f32;
                let m = ((a * b).powf(p) + (a * c).powf(p) + (b * c).powf(p)) / 3.0;
                4.0 * PI * m.powf(1.0 / p)
            }
            Surface::Face { half, .. } => 4.0 * half[0] * half[1],
            Surface::Disk { radius, .. } => PI * radius * radius,
            Surface::Frustum { r0, r1, height, .. } => {
                let slant = ((r0 - r1).powi(2) + height * height).sqrt();
                PI * (r0 + r1) * slant
            }
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> (Point, Point) {
        match *self {
            Surface::Ellipsoid { radii } => loop {
                // a uniform direction mapped onto the ellipsoid, thinned by the area stretch
                let u = unit_direction(rng);
                let stretch = (0..3).map(|d| (u[d] / radii[d]).powi(2)).sum::<f32>().sqrt();
                let max_stretch = radii.iter().fold(0f32, |m, r| m.max(1.0 / r));
                if rng.random::<f32>() * max_stretch <= stretch {
                    let p = [0, 1, 2].map(|d| u[d] * radii[d]);
                    let n = [0, 1, 2].map(|d| p[d] / (radii[d] * radii[d]));
                    return (p, n);
                }
            },
            Surface::Face { axis, sign, offset, half } => {
                let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                let mut p = [0.0; 3];
                p[axis] = offset;
                p[u] = rng.random_range(-half[0]..=half[0]);
                p[v] = rng.random_range(-half[1]..=half[1]);
                let mut n = [0.0; 3];
                n[axis] = sign;
                (p, n)
            }
            Surface::Disk { radius, z, sign } => {
                let r = radius * rng.random::<f32>().sqrt();
                let (s, c) = (2.0 * PI * rng.random::<f32>()).sin_cos();
                ([r * c, r * s, z], [0.0, 0.0, sign])
            }
            Surface::Frustum { r0, r1, z0, height } => {
                let rmax = r0.max(r1);
                let v = loop {
                    let v = rng.random::<f32>();
                    if rng.random::<f32>() * rmax <= r0 + (r1 - r0) * v {
                        break v;
                    }
                };
                let r = r0 + (r1 - r0) * v;
                let (s, c) = (2.0 * PI * rng.random::<f32>()).sin_cos();
                // outward normal of the cone wall: radial part ~ height, axial part ~ r0 - r1
                ([r * c, r * s, z0 + v * height], [height * c, height * s, r0 - r1])
            }
        }
    }
}

fn unit_direction(rng: &mut ChaCha8Rng) -> Point {
    loop {
        let v: Point = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let len2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        if len2 > 1e-12 {
            return v.map(|x| x / len2.sqrt());
        }
    }
}

/// Random parameters for a member of `kind`, drawn from fixed desk-scale ranges.
pub fn random_spec(kind: ShapeKind, rng: &mut impl Rng) -> ShapeSpec {
    let mut u = |lo: f32, hi: f32| rng.random_range(lo..hi);
    let family = match kind {
        ShapeKind::Ellipsoid => ShapeFamily::Ellipsoid { radii: [u(0.5, 1.0), u(0.5, 1.0), u(0.3, 1.0)] },
        ShapeKind::Box => ShapeFamily::Box { half_extents: [u(0.3, 1.0), u(0.3, 1.0), u(0.2, 1.0)] },
        ShapeKind::Cylinder => ShapeFamily::Cylinder { radius: u(0.3, 0.7), height: u(0.6, 2.0) },
        ShapeKind::Lamp => {
            let shade_bottom_radius = u(0.35, 0.6);
            ShapeFamily::Lamp {
                base_radius: u(0.25, 0.45),
                base_height: u(0.05, 0.12),
                pole_radius: u(0.03, 0.06),
                pole_height: u(0.8, 1.4),
                shade_bottom_radius,
                shade_top_radius: shade_bottom_radius * u(0.3, 0.8),
                shade_height: u(0.3, 0.6),
            }
        }
    };
    let yaw = u(0.0, 2.0 * PI);
    let seed = rng.random();
    ShapeSpec { family, pose: Pose { yaw, translation: [0.0; 3] }, seed }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(family: ShapeFamily) -> ShapeSpec {
        ShapeSpec { family, pose: Pose::default(), seed: 11 }
    }

    #[test]
    fn unit_sphere_points_and_normals() {
        let c = sample_shape(&spec(ShapeFamily::Ellipsoid { radii: [1.0; 3] }), 2000).unwrap();
        for (p, n) in c.positions().iter().zip(c.normals().unwrap()) {
            let r = p.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((r - 1.0).abs() < 1e-5);
            assert!((0..3).all(|d| (p[d] - n[d]).abs() < 1e-5));
        }
    }

    #[test]
    fn box_normals_are_signed_basis_vectors() {
        let c = sample_shape(&spec(ShapeFamily::Box { half_extents: [0.5, 1.0, 0.3] }), 600).unwrap();
        for n in c.normals().unwrap() {
            let mut abs: Vec<f32> = n.iter().map(|v| v.abs()).collect();
            abs.sort_by(f32::total_cmp);
            assert_eq!(abs, vec![0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn nonpositive_dimensions_are_rejected() {
        assert!(sample_shape(&spec(ShapeFamily::Cylinder { radius: 0.0, height: 1.0 }), 10).is_err());
        assert!(sample_shape(&spec(ShapeFamily::Box { half_extents: [1.0, -1.0, 1.0] }), 10).is_err());
        assert!(sample_shape(&spec(ShapeFamily::Ellipsoid { radii: [1.0; 3] }), 0).is_err());
    }

    #[test]
    fn cylinder_points_lie_on_the_surface() {
        let c = sample_shape(&spec(ShapeFamily::Cylinder { radius: 0.5, height: 2.0 }), 500).unwrap();
        for (p, n) in c.positions().iter().zip(c.normals().unwrap()) {
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            if n[2].abs() > 0.5 {
                assert!((p[2].abs() - 1.0).abs() < 1e-5 && r <= 0.5 + 1e-5);
            } else {
                assert!((r - 0.5).abs() < 1e-5 && p[2].abs() <= 1.0 + 1e-5);
            }
        }
    }

    #[test]
    fn yaw_rotates_normals_with_points() {
        let mut s = spec(ShapeFamily::Ellipsoid { radii: [1.0; 3] });
        s.pose.yaw = 0.7;
        let c = sample_shape(&s, 200).unwrap();
        for (p, n) in c.positions().iter().zip(c.normals().unwrap()) {
            assert!((0..3).all(|d| (p[d] - n[d]).abs() < 1e-5));
        }
    }
}
