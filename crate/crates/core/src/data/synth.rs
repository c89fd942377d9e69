//! Seeded synthetic LiDAR scenes: labeled boxes sampled on their sensor-facing
//! faces, unlabeled distractor objects, and ground clutter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DifficultyRule, Frame, Label};
use crate::error::{Error, Result};
use crate::geometry::{bev_intersection, Box3D};
use crate::voxel::{Point, PointCloud};

/// Surface points are pulled this far inside their box so that rounding to `f32`
/// never moves them out.
const INSET: f64 = 0.02;

const PLACEMENT_TRIES: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneRecipe {
    /// Inclusive range of labeled objects per scene.
    pub objects: [usize; 2],
    /// Mean `(l, w, h)` of labeled objects.
    pub size_mean: [f64; 3],
    pub size_std: [f64; 3],
    /// Inclusive range of surface points per labeled object.
    pub points_per_object: [usize; 2],
    /// Inclusive range of unlabeled distractor objects.
    pub distractors: [usize; 2],
    pub clutter_points: usize,
    pub ground_z: f64,
    /// Region `[min, max]` along x and y for object centers and clutter.
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    /// Half-open range `[min, max)` of object headings.
    pub yaw_range: [f64; 2],
    pub class: String,
    pub seed: u64,
}

impl Default for SceneRecipe {
    fn default() -> Self {
        SceneRecipe {
            objects: [1, 4],
            size_mean: [3.9, 1.6, 1.56],
            size_std: [0.2, 0.1, 0.1],
            points_per_object: [20, 300],
            distractors: [0, 3],
            clutter_points: 300,
            ground_z: -1.73,
            x_range: [0.0, 25.6],
            y_range: [-12.8, 12.8],
            yaw_range: [-std::f64::consts::PI, std::f64::consts::PI],
            class: "Car".into(),
            seed: 0,
        }
    }
}

impl SceneRecipe {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Domain(format!("scene recipe: {msg}")));
        for (name, r) in [
            ("objects", self.objects),
            ("points_per_object", self.points_per_object),
            ("distractors", self.distractors),
        ] {
            if r[0] > r[1] {
                return bad(format!("{name} range {r:?} is empty"));
            }
        }
        for (name, r) in [
            ("x_range", self.x_range),
            ("y_range", self.y_range),
            ("yaw_range", self.yaw_range),
        ] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] < r[1]) {
                return bad(format!("{name} {r:?} is empty"));
            }
        }
        if self.size_mean.iter().any(|m| !(m.is_finite() && *m > 8.0 * INSET))
            || self.size_std.iter().any(|s| !(s.is_finite() && *s >= 0.0))
        {
            return bad(format!(
                "sizes need positive means and nonnegative deviations, got {:?} / {:?}",
                self.size_mean, self.size_std
            ));
        }
        if !self.ground_z.is_finite() {
            return bad("ground_z must be finite".into());
        }
        Ok(())
    }
}

fn sample_range(rng: &mut ChaCha8Rng, r: [usize; 2]) -> usize {
    rng.random_range(r[0]..=r[1])
}

/// Places a box of the given size without footprint overlap with `taken`.
fn place(
    rng: &mut ChaCha8Rng,
    recipe: &SceneRecipe,
    size: [f64; 3],
    taken: &[Box3D],
) -> Result<Box3D> {
    for _ in 0..PLACEMENT_TRIES {
        let x = rng.random_range(recipe.x_range[0]..recipe.x_range[1]);
        let y = rng.random_range(recipe.y_range[0]..recipe.y_range[1]);
        let yaw = rng.random_range(recipe.yaw_range[0]..recipe.yaw_range[1]);
        let b = Box3D::new([x, y, recipe.ground_z + 0.5 * size[2]], size, yaw)?;
        if taken.iter().all(|t| bev_intersection(t, &b) == 0.0) {
            return Ok(b);
        }
    }
    Err(Error::Generation(format!(
        "could not place a {size:?} box without overlap after {PLACEMENT_TRIES} tries"
    )))
}

/// Samples `n` points on the faces of `b` that face a sensor at the origin.
fn surface_points(rng: &mut ChaCha8Rng, b: &Box3D, n: usize) -> Vec<Point> {
    let [l, w, h] = b.size();
    let c = b.center();
    let (s, co) = b.yaw().sin_cos();
    // (axis, sign, area) for the four sides and the top
    let mut faces: Vec<(usize, f64, f64)> = Vec::new();
    for (axis, half, area) in [(0, 0.5 * l, w * h), (1, 0.5 * w, l * h)] {
        for sign in [1.0, -1.0] {
            let (nx, ny) = if axis == 0 { (co, s) } else { (-s, co) };
            let fx = c[0] + sign * half * nx;
            let fy = c[1] + sign * half * ny;
            if sign * (nx * -fx + ny * -fy) > 0.0 {
                faces.push((axis, sign, area));
            }
        }
    }
    if c[2] + 0.5 * h < 0.0 {
        faces.push((2, 1.0, l * w));
    }
    if faces.is_empty() {
        // sensor inside the footprint: every side is seen from within
        faces = vec![(0, 1.0, w * h), (0, -1.0, w * h), (1, 1.0, l * h), (1, -1.0, l * h)];
    }
    let total: f64 = faces.iter().map(|f| f.2).sum();
    let half = [0.5 * l - INSET, 0.5 * w - INSET, 0.5 * h - INSET];
    let r_base: f64 = rng.random_range(0.1..0.9);
    (0..n)
        .map(|_| {
            let mut pick = rng.random_range(0.0..total);
            let mut face = faces[faces.len() - 1];
            for f in &faces {
                if pick < f.2 {
                    face = *f;
                    break;
                }
                pick -= f.2;
            }
            let mut local = [
                rng.random_range(-half[0]..=half[0]),
                rng.random_range(-half[1]..=half[1]),
                rng.random_range(-half[2]..=half[2]),
            ];
            local[face.0] = face.1 * half[face.0];
            let x = c[0] + co * local[0] - s * local[1];
            let y = c[1] + s * local[0] + co * local[1];
            let z = c[2] + local[2];
            let r = (r_base + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0);
            Point::new(x as f32, y as f32, z as f32, r as f32)
        })
        .collect()
}

/// Generates one scene. Labels carry support recomputed from the cloud and
/// support-based difficulty.
pub fn generate_scene(recipe: &SceneRecipe) -> Result<Frame> {
    recipe.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let n_obj = sample_range(&mut rng, recipe.objects);
    let n_dis = sample_range(&mut rng, recipe.distractors);
    let mut taken: Vec<Box3D> = Vec::new();
    let mut labels = Vec::new();
    let mut points = Vec::new();
    for _ in 0..n_obj {
        let mut size = [0.0; 3];
        for k in 0..3 {
            let d = Normal::new(recipe.size_mean[k], recipe.size_std[k])
                .map_err(|e| Error::Domain(e.to_string()))?;
            size[k] = d.sample(&mut rng).max(0.5 * recipe.size_mean[k]);
        }
        let b = place(&mut rng, recipe, size, &taken)?;
        let n = sample_range(&mut rng, recipe.points_per_object);
        points.extend(surface_points(&mut rng, &b, n));
        taken.push(b);
        labels.push(Label::synthetic(&recipe.class, b));
    }
    for _ in 0..n_dis {
        let size = [
            rng.random_range(0.3..1.2),
            rng.random_range(0.3..1.2),
            rng.random_range(0.5..2.0),
        ];
        let b = place(&mut rng, recipe, size, &taken)?;
        let n = rng.random_range(10..=120);
        points.extend(surface_points(&mut rng, &b, n));
        taken.push(b);
    }
    let noise = Normal::new(0.0, 0.03).map_err(|e| Error::Domain(e.to_string()))?;
    let mut placed = 0;
    let mut attempts = 0;
    while placed < recipe.clutter_points && attempts < 20 * recipe.clutter_points {
        attempts += 1;
        let x = rng.random_range(recipe.x_range[0]..recipe.x_range[1]);
        let y = rng.random_range(recipe.y_range[0]..recipe.y_range[1]);
        let z = recipe.ground_z + noise.sample(&mut rng);
        // ground under an object is occluded
        if taken.iter().any(|b| b.contains([x, y, b.center()[2]])) {
            continue;
        }
        let r: f64 = rng.random_range(0.0..0.3);
        points.push(Point::new(x as f32, y as f32, z as f32, r as f32));
        placed += 1;
    }
    let cloud = PointCloud::new(points)?;
    Ok(Frame::new(
        &format!("{:06}", recipe.seed),
        cloud,
        labels,
        DifficultyRule::Support,
    ))
}
