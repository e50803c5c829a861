//! Procedural synthetic scenes, the analytic ray-casting oracle, dataset
//! generation and manifest handling.

mod dataset;
mod manifest;

pub use dataset::{
    desk_scene, generate_dataset, generate_views, make_desk_dataset, split_unlabelled, subsample,
    DeskDatasetConfig, ViewStrategy,
};
pub use manifest::{
    load_manifest, save_manifest, DatasetManifest, LabelAudit, Record, SealedPose, Split,
    UnlabelledImage,
};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{DepthImage, RgbImage};
use crate::se3::Pose;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere {
        radius: f64,
    },
    /// Axis-aligned box given by its half extents (meters).
    Box {
        half_extents: [f64; 3],
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: [f64; 3],
    pub albedo: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::from_fn(|k, _| 0.5 * (self.min[k] + self.max[k]))
    }

    pub fn half_extents(&self) -> Vector3<f64> {
        Vector3::from_fn(|k, _| 0.5 * (self.max[k] - self.min[k]))
    }

    fn encloses(&self, other: &Aabb) -> bool {
        (0..3).all(|k| other.min[k] >= self.min[k] && other.max[k] <= self.max[k])
    }
}

impl Primitive {
    pub fn sphere(center: [f64; 3], radius: f64, albedo: [f64; 3]) -> Self {
        Self {
            shape: Shape::Sphere { radius },
            center,
            albedo,
        }
    }

    pub fn cuboid(center: [f64; 3], half_extents: [f64; 3], albedo: [f64; 3]) -> Self {
        Self {
            shape: Shape::Box { half_extents },
            center,
            albedo,
        }
    }

    pub fn aabb(&self) -> Aabb {
        let h = match self.shape {
            Shape::Sphere { radius } => [radius; 3],
            Shape::Box { half_extents } => half_extents,
        };
        Aabb {
            min: std::array::from_fn(|k| self.center[k] - h[k]),
            max: std::array::from_fn(|k| self.center[k] + h[k]),
        }
    }

    /// Strict interior test.
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let c = Vector3::from(self.center);
        match self.shape {
            Shape::Sphere { radius } => (p - c).norm() < radius,
            Shape::Box { half_extents } => (0..3).all(|k| (p[k] - c[k]).abs() < half_extents[k]),
        }
    }

    /// Distance along a unit ray to the first surface crossing with `t > 0`.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let c = Vector3::from(self.center);
        match self.shape {
            Shape::Sphere { radius } => {
                let oc = origin - c;
                let b = oc.dot(dir);
                let cc = oc.dot(&oc) - radius * radius;
                let disc = b * b - cc;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                [-b - sq, -b + sq].into_iter().find(|&t| t > 0.0)
            }
            Shape::Box { half_extents } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                for k in 0..3 {
                    let lo = c[k] - half_extents[k];
                    let hi = c[k] + half_extents[k];
                    if dir[k] == 0.0 {
                        if origin[k] < lo || origin[k] > hi {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / dir[k];
                    let (mut t0, mut t1) = ((lo - origin[k]) * inv, (hi - origin[k]) * inv);
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    t_near = t_near.max(t0);
                    t_far = t_far.min(t1);
                    if t_near > t_far {
                        return None;
                    }
                }
                if t_near > 0.0 {
                    Some(t_near)
                } else if t_far > 0.0 {
                    Some(t_far)
                } else {
                    None
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub primitives: Vec<Primitive>,
    pub background_color: [f64; 3],
    pub bounds: Aabb,
}

impl SceneDescription {
    pub fn new(
        primitives: Vec<Primitive>,
        background_color: [f64; 3],
        bounds: Aabb,
    ) -> Result<Self> {
        let scene = Self {
            primitives,
            background_color,
            bounds,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.len() < 3 {
            return Err(Error::invalid(format!(
                "a scene needs at least 3 primitives, found {}",
                self.primitives.len()
            )));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if !self.bounds.encloses(&p.aabb()) {
                return Err(Error::invalid(format!(
                    "primitive {i} leaves the scene bounds"
                )));
            }
        }
        Ok(())
    }

    /// Mean of primitive centers; cameras look at this point.
    pub fn centroid(&self) -> Vector3<f64> {
        let n = self.primitives.len().max(1) as f64;
        self.primitives
            .iter()
            .map(|p| Vector3::from(p.center))
            .sum::<Vector3<f64>>()
            / n
    }

    /// Largest side of the bounding box (meters).
    pub fn diameter(&self) -> f64 {
        let h = self.bounds.half_extents();
        2.0 * h.max()
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let scene: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Pinhole intrinsics. Pixel `(u, v)` samples image coordinate `(u, v)`,
/// so the principal point `(W/2, H/2)` lands exactly on a pixel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub principal_point: [f64; 2],
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(focal: f64, principal_point: [f64; 2], width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            focal,
            principal_point,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn centered(width: usize, height: usize, focal: f64) -> Result<Self> {
        Self::new(
            focal,
            [width as f64 / 2.0, height as f64 / 2.0],
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let [cx, cy] = self.principal_point;
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(Error::invalid(format!(
                "focal must be positive, got {}",
                self.focal
            )));
        }
        if !(cx > 0.0 && cx < self.width as f64 && cy > 0.0 && cy < self.height as f64) {
            return Err(Error::invalid(format!(
                "principal point ({cx}, {cy}) outside a {}x{} image",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Unnormalized camera-frame direction through image coordinate `(u, v)`.
    pub fn direction(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new(
            (u - self.principal_point[0]) / self.focal,
            (v - self.principal_point[1]) / self.focal,
            1.0,
        )
    }

    /// Image coordinates sampled by a `grid_w × grid_h` render: each grid
    /// cell samples the center of its block of full-resolution pixels.
    pub fn grid_coordinates(&self, grid_w: usize, grid_h: usize) -> Result<Vec<(f64, f64)>> {
        if grid_w == 0 || grid_h == 0 || self.width % grid_w != 0 || self.height % grid_h != 0 {
            return Err(Error::invalid(format!(
                "render grid {grid_w}x{grid_h} does not divide {}x{}",
                self.width, self.height
            )));
        }
        let sx = (self.width / grid_w) as f64;
        let sy = (self.height / grid_h) as f64;
        let mut out = Vec::with_capacity(grid_w * grid_h);
        for j in 0..grid_h {
            for i in 0..grid_w {
                out.push((
                    i as f64 * sx + (sx - 1.0) / 2.0,
                    j as f64 * sy + (sy - 1.0) / 2.0,
                ));
            }
        }
        Ok(out)
    }
}

/// Flat-albedo ray casting: every pixel takes the albedo of the first
/// primitive its ray hits, or the background color. Depth is the hit
/// distance along the unit ray, 0 for misses.
pub fn raycast_oracle(
    scene: &SceneDescription,
    camera: &Camera,
    pose: &Pose,
) -> Result<(RgbImage, DepthImage)> {
    camera.validate()?;
    let origin = *pose.translation();
    if !scene.bounds.contains(&origin) {
        return Err(Error::invalid(
            "camera center lies outside the scene bounds",
        ));
    }
    if let Some(i) = scene.primitives.iter().position(|p| p.contains(&origin)) {
        return Err(Error::DegenerateViewpoint(i));
    }
    let bg = scene.background_color.map(|v| v as f32);
    let mut rgb = RgbImage::filled(camera.width, camera.height, bg);
    let mut depth = vec![0.0; camera.width * camera.height];
    for v in 0..camera.height {
        for u in 0..camera.width {
            let dir = (pose.rotation() * camera.direction(u as f64, v as f64)).normalize();
            let mut best: Option<(f64, usize)> = None;
            for (i, prim) in scene.primitives.iter().enumerate() {
                if let Some(t) = prim.intersect(&origin, &dir) {
                    if best.map_or(true, |(bt, _)| t < bt) {
                        best = Some((t, i));
                    }
                }
            }
            if let Some((t, i)) = best {
                rgb.set_pixel(u, v, scene.primitives[i].albedo.map(|a| a as f32));
                depth[v * camera.width + u] = t;
            }
        }
    }
    Ok((
        rgb,
        DepthImage {
            width: camera.width,
            height: camera.height,
            data: depth,
        },
    ))
}
