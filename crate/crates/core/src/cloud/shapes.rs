//! Procedural surface samplers for the synthetic shape families used as the
//! desk-scale dataset.

use rand::Rng;

use super::{CloudError, PointCloud};
use crate::seeds;
use crate::Vec3;

pub const FAMILY_COUNT: usize = 8;

/// Shape family with size parameters in model units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeFamily {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
    Torus { major: f64, minor: f64 },
    Cylinder { radius: f64, height: f64 },
    Cone { radius: f64, height: f64 },
    PlaneCross { extent: f64 },
    Helix { radius: f64, pitch: f64, turns: f64, tube: f64 },
    Ellipsoid { semi_axes: [f64; 3] },
}

impl ShapeFamily {
    /// Class label, by declaration order.
    pub fn index(&self) -> u16 {
        match self {
            ShapeFamily::Sphere { .. } => 0,
            ShapeFamily::Box { .. } => 1,
            ShapeFamily::Torus { .. } => 2,
            ShapeFamily::Cylinder { .. } => 3,
            ShapeFamily::Cone { .. } => 4,
            ShapeFamily::PlaneCross { .. } => 5,
            ShapeFamily::Helix { .. } => 6,
            ShapeFamily::Ellipsoid { .. } => 7,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ShapeFamily::Sphere { .. } => "sphere",
            ShapeFamily::Box { .. } => "box",
            ShapeFamily::Torus { .. } => "torus",
            ShapeFamily::Cylinder { .. } => "cylinder",
            ShapeFamily::Cone { .. } => "cone",
            ShapeFamily::PlaneCross { .. } => "plane_cross",
            ShapeFamily::Helix { .. } => "helix",
            ShapeFamily::Ellipsoid { .. } => "ellipsoid",
        }
    }

    /// Default proportions per family; `spread` in [0, 1) scales the size
    /// parameters so dataset classes contain intra-class variety.
    pub fn default_for_index(index: usize, spread: f64) -> ShapeFamily {
        let s = 1.0 + spread;
        match index {
            0 => ShapeFamily::Sphere { radius: 1.0 },
            1 => ShapeFamily::Box {
                half_extents: [1.0, 0.7 * s, 0.45 / s],
            },
            2 => ShapeFamily::Torus {
                major: 1.0,
                minor: 0.25 * s,
            },
            3 => ShapeFamily::Cylinder {
                radius: 0.5 * s,
                height: 1.8 / s,
            },
            4 => ShapeFamily::Cone {
                radius: 0.7 * s,
                height: 1.6 / s,
            },
            5 => ShapeFamily::PlaneCross { extent: 1.0 },
            6 => ShapeFamily::Helix {
                radius: 0.7,
                pitch: 0.5 * s,
                turns: 2.5,
                tube: 0.08,
            },
            7 => ShapeFamily::Ellipsoid {
                semi_axes: [1.0, 0.6 * s, 0.35 / s],
            },
            _ => panic!("family index {index} out of range"),
        }
    }

    fn validate(&self) -> Result<(), CloudError> {
        let ok = match self {
            ShapeFamily::Sphere { radius } => *radius > 0.0,
            ShapeFamily::Box { half_extents } => half_extents.iter().all(|&e| e > 0.0),
            ShapeFamily::Torus { major, minor } => *major > 0.0 && *minor > 0.0 && minor < major,
            ShapeFamily::Cylinder { radius, height } => *radius > 0.0 && *height > 0.0,
            ShapeFamily::Cone { radius, height } => *radius > 0.0 && *height > 0.0,
            ShapeFamily::PlaneCross { extent } => *extent > 0.0,
            ShapeFamily::Helix {
                radius,
                pitch,
                turns,
                tube,
            } => *radius > 0.0 && *pitch > 0.0 && *turns > 0.0 && *tube > 0.0 && tube < radius,
            ShapeFamily::Ellipsoid { semi_axes } => semi_axes.iter().all(|&a| a > 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(CloudError::BadSpec(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSpec {
    pub family: ShapeFamily,
    pub n_points: usize,
}

impl ShapeSpec {
    pub fn new(family: ShapeFamily, n_points: usize) -> Self {
        Self { family, n_points }
    }
}

/// Surface samples of the family, centered at the origin by construction and
/// rescaled to unit max radius, labeled by family index. Deterministic per
/// seed.
pub fn generate_shape(spec: &ShapeSpec, seed: u64) -> Result<PointCloud, CloudError> {
    if spec.n_points < 16 {
        return Err(CloudError::BadSpec(format!(
            "n_points = {} below minimum 16",
            spec.n_points
        )));
    }
    spec.family.validate()?;
    let mut rng = seeds::stream(seed, 0x5A, spec.family.index() as u64, 0);
    let mut points = sample_surface_raw(&spec.family, spec.n_points, &mut rng);
    let max_r = points
        .iter()
        .map(|p| p.norm())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    for p in &mut points {
        *p = *p / max_r;
    }
    Ok(PointCloud {
        points,
        label: Some(spec.family.index()),
        seed: Some(seed),
    })
}

/// Raw surface samples before rescaling. The analytic center of every family
/// is the origin.
pub fn sample_surface_raw<R: Rng>(family: &ShapeFamily, n: usize, rng: &mut R) -> Vec<Vec3> {
    (0..n).map(|_| sample_one(family, rng)).collect()
}

fn sample_one<R: Rng>(family: &ShapeFamily, rng: &mut R) -> Vec3 {
    match *family {
        ShapeFamily::Sphere { radius } => unit_direction(rng) * radius,
        ShapeFamily::Box { half_extents: [a, b, c] } => {
            // Face selection proportional to area.
            let areas = [b * c, b * c, a * c, a * c, a * b, a * b];
            let total: f64 = areas.iter().sum();
            let mut pick = rng.random::<f64>() * total;
            let mut face = 0;
            for (i, &w) in areas.iter().enumerate() {
                if pick < w {
                    face = i;
                    break;
                }
                pick -= w;
            }
            let u = seeds::uniform_symmetric(rng, 1.0);
            let v = seeds::uniform_symmetric(rng, 1.0);
            match face {
                0 => Vec3::new(a, u * b, v * c),
                1 => Vec3::new(-a, u * b, v * c),
                2 => Vec3::new(u * a, b, v * c),
                3 => Vec3::new(u * a, -b, v * c),
                4 => Vec3::new(u * a, v * b, c),
                _ => Vec3::new(u * a, v * b, -c),
            }
        }
        ShapeFamily::Torus { major, minor } => loop {
            let u = rng.random::<f64>() * std::f64::consts::TAU;
            let v = rng.random::<f64>() * std::f64::consts::TAU;
            // Area element scales with (R + r cos v); rejection keeps the
            // sampling uniform over the surface.
            let w = (major + minor * v.cos()) / (major + minor);
            if rng.random::<f64>() <= w {
                let ring = major + minor * v.cos();
                break Vec3::new(ring * u.cos(), ring * u.sin(), minor * v.sin());
            }
        },
        ShapeFamily::Cylinder { radius, height } => {
            let lateral = std::f64::consts::TAU * radius * height;
            let cap = std::f64::consts::PI * radius * radius;
            let pick = rng.random::<f64>() * (lateral + 2.0 * cap);
            let theta = rng.random::<f64>() * std::f64::consts::TAU;
            if pick < lateral {
                let z = seeds::uniform_symmetric(rng, height / 2.0);
                Vec3::new(radius * theta.cos(), radius * theta.sin(), z)
            } else {
                let r = radius * rng.random::<f64>().sqrt();
                let z = if pick < lateral + cap {
                    height / 2.0
                } else {
                    -height / 2.0
                };
                Vec3::new(r * theta.cos(), r * theta.sin(), z)
            }
        }
        ShapeFamily::Cone { radius, height } => {
            let slant = (radius * radius + height * height).sqrt();
            let lateral = std::f64::consts::PI * radius * slant;
            let base = std::f64::consts::PI * radius * radius;
            let pick = rng.random::<f64>() * (lateral + base);
            let theta = rng.random::<f64>() * std::f64::consts::TAU;
            // Apex up at z = +h/2, base disk at z = -h/2.
            if pick < lateral {
                let t = rng.random::<f64>().sqrt();
                let r = t * radius;
                let z = height / 2.0 - t * height;
                Vec3::new(r * theta.cos(), r * theta.sin(), z)
            } else {
                let r = radius * rng.random::<f64>().sqrt();
                Vec3::new(r * theta.cos(), r * theta.sin(), -height / 2.0)
            }
        }
        ShapeFamily::PlaneCross { extent } => {
            let u = seeds::uniform_symmetric(rng, extent);
            let v = seeds::uniform_symmetric(rng, extent);
            if rng.random::<bool>() {
                Vec3::new(u, 0.0, v)
            } else {
                Vec3::new(0.0, u, v)
            }
        }
        ShapeFamily::Helix {
            radius,
            pitch,
            turns,
            tube,
        } => {
            // Tube around the helical curve; the curve has constant speed so
            // uniform t is uniform in arc length.
            let t = rng.random::<f64>() * turns * std::f64::consts::TAU;
            let phi = rng.random::<f64>() * std::f64::consts::TAU;
            let k = pitch / std::f64::consts::TAU;
            let center = Vec3::new(
                radius * t.cos(),
                radius * t.sin(),
                k * t - (turns * pitch) / 2.0,
            );
            // Unit normal and binormal of the helix at t.
            let normal = Vec3::new(-t.cos(), -t.sin(), 0.0);
            let tangent = Vec3::new(-radius * t.sin(), radius * t.cos(), k)
                .normalized(1e-12)
                .unwrap();
            let binormal = crate::linalg3::cross(tangent, normal);
            center + (normal * phi.cos() + binormal * phi.sin()) * tube
        }
        ShapeFamily::Ellipsoid { semi_axes: [a, b, c] } => loop {
            let u = unit_direction(rng);
            // Accept with probability proportional to the local area
            // stretch so samples are uniform over the ellipsoid surface.
            let g = Vec3::new(u.x * b * c, u.y * a * c, u.z * a * b).norm();
            let g_max = [b * c, a * c, a * b].into_iter().fold(0.0f64, f64::max);
            if rng.random::<f64>() <= g / g_max {
                break Vec3::new(a * u.x, b * u.y, c * u.z);
            }
        },
    }
}

fn unit_direction<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(
            seeds::standard_normal(rng),
            seeds::standard_normal(rng),
            seeds::standard_normal(rng),
        );
        if let Some(u) = v.normalized(1e-9) {
            return u;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_points_on_unit_radius() {
        let spec = ShapeSpec::new(ShapeFamily::Sphere { radius: 2.5 }, 400);
        let pc = generate_shape(&spec, 3).unwrap();
        assert_eq!(pc.label, Some(0));
        for p in &pc.points {
            assert!((p.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn box_raw_samples_lie_on_faces() {
        let fam = ShapeFamily::Box {
            half_extents: [1.0, 1.0, 1.0],
        };
        let mut rng = seeds::rng_from(1);
        for p in sample_surface_raw(&fam, 500, &mut rng) {
            assert!(p.x.abs() <= 1.0 + 1e-12 && p.y.abs() <= 1.0 + 1e-12 && p.z.abs() <= 1.0 + 1e-12);
            let on_face = (p.x.abs() - 1.0).abs() < 1e-12
                || (p.y.abs() - 1.0).abs() < 1e-12
                || (p.z.abs() - 1.0).abs() < 1e-12;
            assert!(on_face, "{p:?} not on any face");
        }
    }

    #[test]
    fn torus_implicit_residual() {
        let fam = ShapeFamily::Torus {
            major: 1.0,
            minor: 0.25,
        };
        let mut rng = seeds::rng_from(2);
        for p in sample_surface_raw(&fam, 500, &mut rng) {
            let ring = (p.x * p.x + p.y * p.y).sqrt();
            let d = ((ring - 1.0).powi(2) + p.z * p.z).sqrt();
            assert!((d - 0.25).abs() < 1e-9, "torus residual {d}");
        }
    }

    #[test]
    fn generation_is_deterministic_and_validated() {
        let spec = ShapeSpec::new(ShapeFamily::Ellipsoid { semi_axes: [1.0, 0.6, 0.35] }, 128);
        let a = generate_shape(&spec, 77).unwrap();
        let b = generate_shape(&spec, 77).unwrap();
        assert_eq!(a, b);

        let bad = ShapeSpec::new(ShapeFamily::Sphere { radius: -1.0 }, 64);
        assert!(matches!(generate_shape(&bad, 0), Err(CloudError::BadSpec(_))));
        let tiny = ShapeSpec::new(ShapeFamily::Sphere { radius: 1.0 }, 8);
        assert!(matches!(generate_shape(&tiny, 0), Err(CloudError::BadSpec(_))));
    }

    #[test]
    fn all_families_generate_unit_scale_clouds() {
        for i in 0..FAMILY_COUNT {
            let fam = ShapeFamily::default_for_index(i, 0.1);
            let pc = generate_shape(&ShapeSpec::new(fam, 256), 5).unwrap();
            assert_eq!(pc.label, Some(i as u16));
            assert_eq!(pc.len(), 256);
            let max_r = pc.points.iter().map(|p| p.norm()).fold(0.0f64, f64::max);
            assert!((max_r - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn classes_are_separable_by_radial_histogram() {
        // Sanity floor for the training harness: nearest-centroid on sorted
        // distance histograms beats 50% on the 8 classes.
        let bins = 24;
        let per_class = 12;
        let n_pts = 256;
        let hist = |pc: &PointCloud| -> Vec<f64> {
            let c = pc.barycenter();
            let mut h = vec![0.0; bins];
            for p in &pc.points {
                let d = (*p - c).norm().min(1.999);
                h[((d / 2.0) * bins as f64) as usize] += 1.0 / n_pts as f64;
            }
            h
        };
        let mut train: Vec<Vec<f64>> = Vec::new();
        let mut test: Vec<(usize, Vec<f64>)> = Vec::new();
        for class in 0..FAMILY_COUNT {
            let mut centroid = vec![0.0; bins];
            for s in 0..per_class {
                let fam = ShapeFamily::default_for_index(class, 0.0);
                let pc = generate_shape(&ShapeSpec::new(fam, n_pts), (class * 100 + s) as u64).unwrap();
                let h = hist(&pc);
                if s < per_class / 2 {
                    for (c, v) in centroid.iter_mut().zip(h.iter()) {
                        *c += v / (per_class / 2) as f64;
                    }
                } else {
                    test.push((class, h));
                }
            }
            train.push(centroid);
        }
        let mut correct = 0;
        for (class, h) in &test {
            let pred = train
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da: f64 = a.iter().zip(h.iter()).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = b.iter().zip(h.iter()).map(|(x, y)| (x - y).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap()
                .0;
            if pred == *class {
                correct += 1;
            }
        }
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 0.5, "nearest-centroid accuracy {acc}");
    }
}
