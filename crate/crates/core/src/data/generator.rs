//! Synthetic indoor-style scene generator. Scenes are built from axis-aligned
//! geometric primitives with per-class size, color, and density parameters,
//! plus uniform background clutter. The placement plan is exposed separately
//! from point sampling so geometric checks can re-derive surface distances.

use super::{DataError, LabeledPointCloud};
use crate::seeds::{self, stream};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    /// Rectangle parallel to the xy plane; `size = [sx, sy, 0]`.
    HorizontalPlane,
    /// Rectangle normal to x (`orient = 0`) or y (`orient = 1`).
    VerticalPlane,
    /// Axis-aligned cuboid surface.
    Box,
    /// Sphere of diameter `size[0]`.
    Sphere,
    /// Vertical cylinder (lateral surface plus caps), diameter `size[0]`,
    /// height `size[2]`.
    Cylinder,
    /// Slanted rectangular patch rising by `size[2]` along the orient axis.
    Ramp,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub kind: PrimitiveKind,
    pub size_min: [f64; 3],
    pub size_max: [f64; 3],
    pub color_mean: [f64; 3],
    /// Per-point color noise around the instance color.
    pub color_std: f64,
    /// Per-instance shift of the whole color, drawn once per placement; this
    /// is the main source of support/query appearance variation.
    pub instance_color_std: f64,
    /// Surface sampling density, points per square meter.
    pub points_per_area: f64,
}

impl ClassSpec {
    fn new(
        name: &str,
        kind: PrimitiveKind,
        size_min: [f64; 3],
        size_max: [f64; 3],
        color_mean: [f64; 3],
        color_std: f64,
        points_per_area: f64,
    ) -> Self {
        Self {
            name: name.to_string(),
            kind,
            size_min,
            size_max,
            color_mean,
            color_std,
            instance_color_std: 0.22,
            points_per_area,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Scene bounding box in meters.
    pub extent: [f64; 3],
    /// Gaussian surface jitter sigma; the jitter vector norm is truncated at
    /// 3.9 sigma so points stay within the 4-sigma surface band.
    pub jitter: f64,
    /// Min/max number of distinct foreground classes per scene.
    pub classes_per_scene: [usize; 2],
    /// Min/max uniform background clutter points per scene.
    pub background_points: [usize; 2],
    pub min_points_per_instance: usize,
    pub max_points_per_instance: usize,
    /// Global multiplier on per-class densities and instance floors.
    pub density_scale: f64,
    /// Per-point extra feature channels; the first three follow the class
    /// color model, any further channels are uniform noise.
    pub extra_dim: usize,
    pub classes: Vec<ClassSpec>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::default_indoor()
    }
}

impl GeneratorConfig {
    /// Twelve foreground classes over six primitive kinds, sized for a
    /// 4 x 4 x 3 meter scene.
    pub fn default_indoor() -> Self {
        use PrimitiveKind::*;
        let classes = vec![
            ClassSpec::new("plate", HorizontalPlane, [1.2, 1.2, 0.0], [2.4, 2.4, 0.0], [0.55, 0.55, 0.55], 0.08, 340.0),
            ClassSpec::new("slab", HorizontalPlane, [0.5, 0.5, 0.0], [1.0, 1.0, 0.0], [0.45, 0.30, 0.20], 0.08, 620.0),
            ClassSpec::new("panel", VerticalPlane, [0.0, 1.0, 0.8], [0.0, 2.0, 1.8], [0.75, 0.70, 0.60], 0.08, 340.0),
            ClassSpec::new("screen", VerticalPlane, [0.0, 0.5, 0.4], [0.0, 1.0, 0.8], [0.15, 0.15, 0.20], 0.08, 620.0),
            ClassSpec::new("crate", Box, [0.5, 0.5, 0.5], [1.0, 1.0, 1.0], [0.62, 0.48, 0.28], 0.08, 260.0),
            ClassSpec::new("carton", Box, [0.2, 0.2, 0.2], [0.5, 0.5, 0.5], [0.85, 0.80, 0.70], 0.08, 520.0),
            ClassSpec::new("ball", Sphere, [0.35, 0.0, 0.0], [0.7, 0.0, 0.0], [0.75, 0.20, 0.20], 0.08, 420.0),
            ClassSpec::new("globe", Sphere, [0.15, 0.0, 0.0], [0.32, 0.0, 0.0], [0.20, 0.30, 0.75], 0.08, 900.0),
            ClassSpec::new("column", Cylinder, [0.25, 0.0, 1.2], [0.5, 0.0, 2.4], [0.50, 0.58, 0.50], 0.08, 300.0),
            ClassSpec::new("pipe", Cylinder, [0.08, 0.0, 0.5], [0.2, 0.0, 1.5], [0.20, 0.45, 0.30], 0.08, 900.0),
            ClassSpec::new("ramp", Ramp, [0.8, 0.6, 0.4], [1.6, 1.2, 0.9], [0.55, 0.35, 0.60], 0.08, 340.0),
            ClassSpec::new("wedge", Ramp, [0.3, 0.3, 0.2], [0.7, 0.6, 0.5], [0.85, 0.55, 0.25], 0.08, 680.0),
        ];
        Self {
            extent: [4.0, 4.0, 3.0],
            jitter: 0.02,
            classes_per_scene: [2, 5],
            background_points: [900, 1800],
            min_points_per_instance: 160,
            max_points_per_instance: 4000,
            density_scale: 1.0,
            extra_dim: 3,
            classes,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.classes.len() < 6 {
            return Err(DataError::TooFewClasses {
                got: self.classes.len(),
                needed: 6,
            });
        }
        if self.extent.iter().any(|&e| e <= 0.0) {
            return Err(DataError::BadGeneratorConfig("extent must be positive".into()));
        }
        if self.jitter < 0.0 {
            return Err(DataError::BadGeneratorConfig("jitter must be >= 0".into()));
        }
        if self.classes_per_scene[0] < 2
            || self.classes_per_scene[0] > self.classes_per_scene[1]
            || self.classes_per_scene[1] > self.classes.len()
        {
            return Err(DataError::BadGeneratorConfig(
                "classes_per_scene must satisfy 2 <= min <= max <= #classes".into(),
            ));
        }
        if self.background_points[0] < 1 || self.background_points[0] > self.background_points[1] {
            return Err(DataError::BadGeneratorConfig(
                "background_points must satisfy 1 <= min <= max".into(),
            ));
        }
        if self.extra_dim < 1 {
            return Err(DataError::BadGeneratorConfig("extra_dim must be >= 1".into()));
        }
        if self.density_scale <= 0.0 {
            return Err(DataError::BadGeneratorConfig("density_scale must be > 0".into()));
        }
        for spec in &self.classes {
            if spec.points_per_area <= 0.0 {
                return Err(DataError::BadGeneratorConfig(format!(
                    "class '{}' has non-positive density",
                    spec.name
                )));
            }
            for ax in 0..3 {
                if spec.size_min[ax] > spec.size_max[ax] || spec.size_min[ax] < 0.0 {
                    return Err(DataError::BadGeneratorConfig(format!(
                        "class '{}' has a bad size range on axis {ax}",
                        spec.name
                    )));
                }
            }
            let bbox = max_bbox(spec);
            if bbox.iter().zip(&self.extent).any(|(b, e)| b > e) {
                return Err(DataError::PrimitiveTooLarge {
                    class: spec.name.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Axis-aligned bounding box of the largest instance a spec can produce.
fn max_bbox(spec: &ClassSpec) -> [f64; 3] {
    instance_bbox(spec.kind, spec.size_max)
}

fn instance_bbox(kind: PrimitiveKind, size: [f64; 3]) -> [f64; 3] {
    match kind {
        PrimitiveKind::HorizontalPlane => [size[0], size[1], 0.0],
        // orientation can put the span on either horizontal axis
        PrimitiveKind::VerticalPlane => [size[1], size[1], size[2]],
        PrimitiveKind::Box => size,
        PrimitiveKind::Sphere => [size[0], size[0], size[0]],
        PrimitiveKind::Cylinder => [size[0], size[0], size[2]],
        PrimitiveKind::Ramp => [size[0].max(size[1]), size[0].max(size[1]), size[2]],
    }
}

/// One placed instance; `class_id` is the 1-based corpus label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedPrimitive {
    pub class_id: u32,
    pub kind: PrimitiveKind,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub orient: u8,
    pub points: usize,
    /// Instance-level color offset added to the class color mean.
    pub color_shift: [f64; 3],
}

/// Deterministic placement plan for one scene seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLayout {
    pub primitives: Vec<PlacedPrimitive>,
    pub background_points: usize,
}

fn surface_area(kind: PrimitiveKind, size: [f64; 3]) -> f64 {
    match kind {
        PrimitiveKind::HorizontalPlane => size[0] * size[1],
        PrimitiveKind::VerticalPlane => size[1] * size[2],
        PrimitiveKind::Box => {
            2.0 * (size[0] * size[1] + size[1] * size[2] + size[0] * size[2])
        }
        PrimitiveKind::Sphere => PI * size[0] * size[0],
        PrimitiveKind::Cylinder => {
            let r = size[0] / 2.0;
            2.0 * PI * r * size[2] + 2.0 * PI * r * r
        }
        PrimitiveKind::Ramp => (size[0] * size[0] + size[2] * size[2]).sqrt() * size[1],
    }
}

/// Plan instance placements for `(seed, config)` without sampling points.
pub fn plan_scene(seed: u64, config: &GeneratorConfig) -> Result<SceneLayout, DataError> {
    config.validate()?;
    let mut rng = seeds::rng(&[seed, stream::SCENE_LAYOUT]);
    let [lo, hi] = config.classes_per_scene;
    let m = rng.random_range(lo..=hi);

    // partial shuffle for m distinct class indices
    let mut ids: Vec<usize> = (0..config.classes.len()).collect();
    for i in 0..m {
        let j = rng.random_range(i..ids.len());
        ids.swap(i, j);
    }
    ids.truncate(m);

    let mut primitives = Vec::with_capacity(m);
    for &ci in &ids {
        let spec = &config.classes[ci];
        let mut size = [0.0; 3];
        for ax in 0..3 {
            size[ax] = if spec.size_max[ax] > spec.size_min[ax] {
                rng.random_range(spec.size_min[ax]..spec.size_max[ax])
            } else {
                spec.size_min[ax]
            };
        }
        if matches!(spec.kind, PrimitiveKind::Sphere) {
            size[1] = size[0];
            size[2] = size[0];
        }
        if matches!(spec.kind, PrimitiveKind::Cylinder) {
            size[1] = size[0];
        }
        let orient = rng.random_range(0..2u8);
        let bbox = oriented_bbox(spec.kind, size, orient);
        let mut center = [0.0; 3];
        for ax in 0..3 {
            let half = bbox[ax] / 2.0;
            let lo = half;
            let hi = config.extent[ax] - half;
            center[ax] = if hi > lo { rng.random_range(lo..hi) } else { lo };
        }
        let density = spec.points_per_area * config.density_scale;
        let floor =
            ((config.min_points_per_instance as f64) * config.density_scale).ceil() as usize;
        let points = ((surface_area(spec.kind, size) * density).round() as usize)
            .max(floor.max(8))
            .min(config.max_points_per_instance);
        let mut color_shift = [0.0; 3];
        if spec.instance_color_std > 0.0 {
            let shift_noise = Normal::new(0.0, spec.instance_color_std).unwrap();
            for c in &mut color_shift {
                *c = shift_noise.sample(&mut rng);
            }
        }
        primitives.push(PlacedPrimitive {
            class_id: (ci + 1) as u32,
            kind: spec.kind,
            center,
            size,
            orient,
            points,
            color_shift,
        });
    }
    let background_points =
        rng.random_range(config.background_points[0]..=config.background_points[1]);
    Ok(SceneLayout {
        primitives,
        background_points,
    })
}

fn oriented_bbox(kind: PrimitiveKind, size: [f64; 3], orient: u8) -> [f64; 3] {
    match kind {
        PrimitiveKind::VerticalPlane => {
            if orient == 0 {
                [0.0, size[1], size[2]]
            } else {
                [size[1], 0.0, size[2]]
            }
        }
        PrimitiveKind::Ramp => {
            if orient == 0 {
                [size[0], size[1], size[2]]
            } else {
                [size[1], size[0], size[2]]
            }
        }
        _ => instance_bbox(kind, size),
    }
}

/// A point uniformly distributed on the primitive surface, before jitter.
pub fn sample_surface_point(p: &PlacedPrimitive, rng: &mut ChaCha12Rng) -> [f64; 3] {
    let c = p.center;
    let s = p.size;
    let u = |rng: &mut ChaCha12Rng| rng.random_range(-0.5..0.5f64);
    match p.kind {
        PrimitiveKind::HorizontalPlane => [c[0] + u(rng) * s[0], c[1] + u(rng) * s[1], c[2]],
        PrimitiveKind::VerticalPlane => {
            if p.orient == 0 {
                [c[0], c[1] + u(rng) * s[1], c[2] + u(rng) * s[2]]
            } else {
                [c[0] + u(rng) * s[1], c[1], c[2] + u(rng) * s[2]]
            }
        }
        PrimitiveKind::Box => {
            let areas = [
                s[1] * s[2], // +x / -x
                s[0] * s[2], // +y / -y
                s[0] * s[1], // +z / -z
            ];
            let total = 2.0 * (areas[0] + areas[1] + areas[2]);
            let mut pick = rng.random_range(0.0..total);
            let mut face = 5;
            for f in 0..6 {
                let a = areas[f / 2];
                if pick < a {
                    face = f;
                    break;
                }
                pick -= a;
            }
            let sign = if face % 2 == 0 { 0.5 } else { -0.5 };
            let axis = face / 2;
            let mut out = [0.0; 3];
            for ax in 0..3 {
                out[ax] = if ax == axis {
                    c[ax] + sign * s[ax]
                } else {
                    c[ax] + u(rng) * s[ax]
                };
            }
            out
        }
        PrimitiveKind::Sphere => {
            let r = s[0] / 2.0;
            let normal = Normal::new(0.0, 1.0).unwrap();
            loop {
                let v: [f64; 3] = [
                    normal.sample(rng),
                    normal.sample(rng),
                    normal.sample(rng),
                ];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 1e-9 {
                    return [
                        c[0] + v[0] / n * r,
                        c[1] + v[1] / n * r,
                        c[2] + v[2] / n * r,
                    ];
                }
            }
        }
        PrimitiveKind::Cylinder => {
            let r = s[0] / 2.0;
            let h = s[2];
            let lateral = 2.0 * PI * r * h;
            let caps = 2.0 * PI * r * r;
            if rng.random_range(0.0..lateral + caps) < lateral {
                let theta = rng.random_range(0.0..2.0 * PI);
                [
                    c[0] + r * theta.cos(),
                    c[1] + r * theta.sin(),
                    c[2] + u(rng) * h,
                ]
            } else {
                let top = rng.random_range(0..2) == 0;
                let rho = r * rng.random_range(0.0..1.0f64).sqrt();
                let theta = rng.random_range(0.0..2.0 * PI);
                [
                    c[0] + rho * theta.cos(),
                    c[1] + rho * theta.sin(),
                    c[2] + if top { h / 2.0 } else { -h / 2.0 },
                ]
            }
        }
        PrimitiveKind::Ramp => {
            let (uu, vv) = (u(rng), u(rng));
            if p.orient == 0 {
                [
                    c[0] + uu * s[0],
                    c[1] + vv * s[1],
                    c[2] + uu * s[2],
                ]
            } else {
                [
                    c[0] + vv * s[1],
                    c[1] + uu * s[0],
                    c[2] + uu * s[2],
                ]
            }
        }
    }
}

fn jitter_vector(sigma: f64, rng: &mut ChaCha12Rng) -> [f64; 3] {
    if sigma == 0.0 {
        return [0.0; 3];
    }
    let normal = Normal::new(0.0, sigma).unwrap();
    let mut v: [f64; 3] = [
        normal.sample(rng),
        normal.sample(rng),
        normal.sample(rng),
    ];
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let cap = 3.9 * sigma;
    if n > cap {
        for x in &mut v {
            *x *= cap / n;
        }
    }
    v
}

/// Generate a fully labeled scene. Identical `(seed, config)` reproduces the
/// byte-identical cloud.
pub fn generate_scene(seed: u64, config: &GeneratorConfig) -> Result<LabeledPointCloud, DataError> {
    let layout = plan_scene(seed, config)?;
    let mut rng = seeds::rng(&[seed, stream::SCENE_POINTS]);
    let total: usize =
        layout.primitives.iter().map(|p| p.points).sum::<usize>() + layout.background_points;
    let f0 = config.extra_dim;
    let mut coords = Array2::<f32>::zeros((total, 3));
    let mut extras = Array2::<f32>::zeros((total, f0));
    let mut labels = Array1::<i32>::zeros(total);

    let mut row = 0;
    for prim in &layout.primitives {
        let spec = &config.classes[(prim.class_id - 1) as usize];
        let color_noise = Normal::new(0.0, spec.color_std.max(1e-12)).unwrap();
        for _ in 0..prim.points {
            let base = sample_surface_point(prim, &mut rng);
            let jit = jitter_vector(config.jitter, &mut rng);
            for ax in 0..3 {
                coords[[row, ax]] = (base[ax] + jit[ax]) as f32;
            }
            for ch in 0..f0 {
                let value = if ch < 3 {
                    (spec.color_mean[ch] + prim.color_shift[ch] + color_noise.sample(&mut rng))
                        .clamp(0.0, 1.0)
                } else {
                    rng.random_range(0.0..1.0)
                };
                extras[[row, ch]] = value as f32;
            }
            labels[row] = prim.class_id as i32;
            row += 1;
        }
    }
    for _ in 0..layout.background_points {
        for ax in 0..3 {
            coords[[row, ax]] = rng.random_range(0.0..config.extent[ax]) as f32;
        }
        for ch in 0..f0 {
            extras[[row, ch]] = rng.random_range(0.0..1.0) as f32;
        }
        labels[row] = 0;
        row += 1;
    }
    debug_assert_eq!(row, total);
    Ok(LabeledPointCloud::new(coords, extras, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_seed_and_config_reproduce_scene() {
        let cfg = GeneratorConfig::default_indoor();
        let a = generate_scene(7, &cfg).unwrap();
        let b = generate_scene(7, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(8, &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn scene_has_background_and_at_least_two_classes() {
        let cfg = GeneratorConfig::default_indoor();
        for seed in 0..8 {
            let scene = generate_scene(seed, &cfg).unwrap();
            let mut present: std::collections::BTreeSet<i32> =
                scene.labels.iter().copied().collect();
            assert!(present.remove(&0), "background points missing");
            assert!(present.len() >= 2, "fewer than two foreground classes");
        }
    }

    #[test]
    fn restricted_class_list_restricts_labels() {
        let mut cfg = GeneratorConfig::default_indoor();
        cfg.classes.truncate(6);
        cfg.classes_per_scene = [2, 3];
        let scene = generate_scene(7, &cfg).unwrap();
        assert!(scene.labels.iter().all(|&l| (0..=6).contains(&l)));
    }

    #[test]
    fn oversized_primitive_rejected() {
        let mut cfg = GeneratorConfig::default_indoor();
        cfg.classes[4].size_max = [9.0, 9.0, 9.0]; // crate bigger than the extent
        let err = generate_scene(1, &cfg).unwrap_err();
        assert!(matches!(err, DataError::PrimitiveTooLarge { .. }));
    }

    #[test]
    fn too_few_classes_rejected() {
        let mut cfg = GeneratorConfig::default_indoor();
        cfg.classes.truncate(4);
        cfg.classes_per_scene = [2, 3];
        let err = plan_scene(1, &cfg).unwrap_err();
        assert!(matches!(err, DataError::TooFewClasses { .. }));
    }

    #[test]
    fn points_stay_in_padded_extent() {
        let cfg = GeneratorConfig::default_indoor();
        let scene = generate_scene(3, &cfg).unwrap();
        let pad = (4.0 * cfg.jitter) as f32;
        for r in 0..scene.len() {
            for ax in 0..3 {
                let v = scene.coords[[r, ax]];
                assert!(v >= -pad && v <= cfg.extent[ax] as f32 + pad);
            }
        }
    }
}
