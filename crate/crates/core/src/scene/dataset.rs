use std::path::Path;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{save_manifest, DatasetManifest, Record, Split};
use super::{raycast_oracle, Aabb, Camera, Primitive, SceneDescription};
use crate::error::{Error, Result};
use crate::se3::Pose;

/// Camera placement around the scene centroid. All cameras look at the
/// centroid with world +z up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ViewStrategy {
    /// Evenly spaced azimuths on a horizontal circle.
    Orbit {
        radius: f64,
        elevation_deg: f64,
        phase_deg: f64,
    },
    /// Uniform radius, elevation and azimuth within a spherical shell band.
    RandomInShell {
        min_radius: f64,
        max_radius: f64,
        min_elevation_deg: f64,
        max_elevation_deg: f64,
    },
}

impl ViewStrategy {
    pub fn radius_range(&self) -> (f64, f64) {
        match *self {
            ViewStrategy::Orbit { radius, .. } => (radius, radius),
            ViewStrategy::RandomInShell {
                min_radius,
                max_radius,
                ..
            } => (min_radius, max_radius),
        }
    }
}

fn spherical(
    center: &Vector3<f64>,
    radius: f64,
    elevation_deg: f64,
    azimuth_deg: f64,
) -> Vector3<f64> {
    let (el, az) = (elevation_deg.to_radians(), azimuth_deg.to_radians());
    center + radius * Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
}

pub fn generate_views(
    scene: &SceneDescription,
    n_views: usize,
    strategy: &ViewStrategy,
    seed: u64,
) -> Result<Vec<Pose>> {
    if n_views < 2 {
        return Err(Error::invalid("generate_dataset needs at least 2 views"));
    }
    let target = scene.centroid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_views)
        .map(|k| {
            let eye = match *strategy {
                ViewStrategy::Orbit {
                    radius,
                    elevation_deg,
                    phase_deg,
                } => spherical(
                    &target,
                    radius,
                    elevation_deg,
                    phase_deg + 360.0 * k as f64 / n_views as f64,
                ),
                ViewStrategy::RandomInShell {
                    min_radius,
                    max_radius,
                    min_elevation_deg,
                    max_elevation_deg,
                } => {
                    let r = rng.gen_range(min_radius..=max_radius);
                    let el = rng.gen_range(min_elevation_deg..=max_elevation_deg);
                    let az = rng.gen_range(0.0..360.0);
                    spherical(&target, r, el, az)
                }
            };
            Pose::look_at(eye, target, Vector3::z())
        })
        .collect()
}

fn render_records(
    scene: &SceneDescription,
    camera: &Camera,
    poses: &[Pose],
    split: Split,
    out_dir: &Path,
) -> Result<Vec<Record>> {
    poses
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            let rel = format!("images/{}_{i:04}.png", split.as_str());
            let (rgb, _) = raycast_oracle(scene, camera, pose)?;
            rgb.save_png(&out_dir.join(&rel))?;
            Ok(Record::labelled(split, rel, *pose))
        })
        .collect()
}

/// Renders `n_views` oracle images into `out_dir/images` and returns a
/// manifest of train records rooted at `out_dir`.
pub fn generate_dataset(
    scene: &SceneDescription,
    camera: &Camera,
    n_views: usize,
    strategy: &ViewStrategy,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let poses = generate_views(scene, n_views, strategy, seed)?;
    let mut m = DatasetManifest::new(*camera, out_dir);
    m.records = render_records(scene, camera, &poses, Split::Train, out_dir)?;
    Ok(m)
}

/// Keeps every `d`-th train record in manifest order.
pub fn subsample(manifest: &DatasetManifest, d: usize) -> Result<DatasetManifest> {
    if d < 1 {
        return Err(Error::invalid("spacing window must be >= 1"));
    }
    let mut out = manifest.clone();
    let mut k = 0usize;
    out.records.retain(|r| {
        if r.split != Split::Train {
            return true;
        }
        let keep = k % d == 0;
        k += 1;
        keep
    });
    out.spacing_window = manifest.spacing_window * d;
    Ok(out)
}

/// Tags `⌊fraction · |test pool|⌋` randomly chosen test records as
/// unlabelled; their poses move into sealed held-out storage.
pub fn split_unlabelled(
    manifest: &DatasetManifest,
    fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!(
            "fraction {fraction} outside [0, 1]"
        )));
    }
    let mut pool = manifest.indices(Split::Test);
    let count = (fraction * pool.len() as f64 + 1e-9).floor() as usize;
    if count > 0 && pool.is_empty() {
        return Err(Error::invalid(
            "no test records to draw unlabelled images from",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    let mut chosen = pool[..count].to_vec();
    chosen.sort_unstable();
    let mut out = manifest.clone();
    for i in chosen {
        out.seal(i);
    }
    Ok(out)
}

/// The default desk-scale scene: a floor slab with seven colored
/// primitives, 4 m bounds, black background.
pub fn desk_scene() -> SceneDescription {
    let prims = vec![
        Primitive::cuboid([0.0, 0.0, -0.6], [1.3, 1.3, 0.05], [0.55, 0.5, 0.42]),
        Primitive::sphere([0.45, 0.3, -0.25], 0.3, [0.9, 0.15, 0.1]),
        Primitive::cuboid([-0.5, -0.35, -0.3], [0.25, 0.2, 0.25], [0.1, 0.75, 0.2]),
        Primitive::sphere([-0.35, 0.55, -0.35], 0.2, [0.15, 0.3, 0.95]),
        Primitive::cuboid([0.35, -0.55, -0.4], [0.15, 0.15, 0.15], [0.95, 0.85, 0.1]),
        Primitive::cuboid([0.0, 0.0, -0.1], [0.08, 0.08, 0.45], [0.85, 0.2, 0.8]),
        Primitive::sphere([-0.75, 0.8, -0.45], 0.1, [0.1, 0.9, 0.9]),
        Primitive::cuboid([0.85, 0.8, -0.35], [0.12, 0.3, 0.2], [0.95, 0.55, 0.15]),
    ];
    SceneDescription::new(
        prims,
        [0.0; 3],
        Aabb {
            min: [-2.0; 3],
            max: [2.0; 3],
        },
    )
    .expect("desk scene is valid")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskDatasetConfig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub train_views: usize,
    pub test_views: usize,
    pub seed: u64,
    pub train_strategy: ViewStrategy,
    /// Test cameras follow a different path than the training cameras.
    pub test_strategy: ViewStrategy,
}

impl Default for DeskDatasetConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            focal: 56.0,
            train_views: 100,
            test_views: 30,
            seed: 0,
            train_strategy: ViewStrategy::RandomInShell {
                min_radius: 1.5,
                max_radius: 2.0,
                min_elevation_deg: 15.0,
                max_elevation_deg: 55.0,
            },
            test_strategy: ViewStrategy::Orbit {
                radius: 1.75,
                elevation_deg: 35.0,
                phase_deg: 6.0,
            },
        }
    }
}

/// Writes `scene.json`, rendered images and `manifest.txt` into `out_dir`.
pub fn make_desk_dataset(
    scene: &SceneDescription,
    cfg: &DeskDatasetConfig,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let camera = Camera::centered(cfg.width, cfg.height, cfg.focal)?;
    std::fs::create_dir_all(out_dir)?;
    scene.save(&out_dir.join("scene.json"))?;
    let train = generate_views(scene, cfg.train_views, &cfg.train_strategy, cfg.seed)?;
    let test = generate_views(
        scene,
        cfg.test_views,
        &cfg.test_strategy,
        cfg.seed.wrapping_add(1),
    )?;
    let mut m = DatasetManifest::new(camera, out_dir);
    m.records = render_records(scene, &camera, &train, Split::Train, out_dir)?;
    m.records
        .extend(render_records(scene, &camera, &test, Split::Test, out_dir)?);
    save_manifest(&out_dir.join("manifest.txt"), &m)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::translation_error;

    fn dummy_manifest(train: usize, test: usize) -> DatasetManifest {
        let mut m = DatasetManifest::new(Camera::centered(8, 8, 8.0).unwrap(), "");
        for i in 0..train {
            m.records.push(Record::labelled(
                Split::Train,
                format!("t{i}.png"),
                Pose::from_translation(Vector3::new(i as f64, 0.0, 0.0)),
            ));
        }
        for i in 0..test {
            m.records.push(Record::labelled(
                Split::Test,
                format!("v{i}.png"),
                Pose::from_translation(Vector3::new(0.0, i as f64, 0.0)),
            ));
        }
        m
    }

    #[test]
    fn orbit_two_views_are_opposite() {
        let scene = desk_scene();
        let s = ViewStrategy::Orbit {
            radius: 1.5,
            elevation_deg: 0.0,
            phase_deg: 0.0,
        };
        let poses = generate_views(&scene, 2, &s, 0).unwrap();
        let c = scene.centroid();
        let a = poses[0].translation() - c;
        let b = poses[1].translation() - c;
        assert!((a + b).norm() < 1e-9);
        for p in &poses {
            Pose::new(*p.rotation(), *p.translation()).unwrap();
        }
        assert!(generate_views(&scene, 1, &s, 0).is_err());
    }

    #[test]
    fn random_shell_is_deterministic_and_in_shell() {
        let scene = desk_scene();
        let cfg = DeskDatasetConfig::default();
        let a = generate_views(&scene, 100, &cfg.train_strategy, 7).unwrap();
        let b = generate_views(&scene, 100, &cfg.train_strategy, 7).unwrap();
        let lines = |v: &[Pose]| v.iter().map(Pose::to_line).collect::<Vec<_>>();
        assert_eq!(lines(&a), lines(&b));
        let (lo, hi) = cfg.train_strategy.radius_range();
        let center = Pose::from_translation(scene.centroid());
        for p in &a {
            let d = translation_error(p, &center);
            assert!(d >= lo - 1e-9 && d <= hi + 1e-9);
            assert!(scene.bounds.contains(p.translation()));
        }
    }

    #[test]
    fn subsample_rules() {
        let m = dummy_manifest(10, 3);
        assert_eq!(subsample(&m, 1).unwrap(), m);
        let s = subsample(&m, 5).unwrap();
        let kept: Vec<_> = s
            .labelled(Split::Train)
            .iter()
            .map(|(_, p)| p.translation()[0])
            .collect();
        assert_eq!(kept, vec![0.0, 5.0]);
        assert_eq!(s.count(Split::Test), 3);
        assert_eq!(s.spacing_window, 5);
        assert!(subsample(&m, 0).is_err());

        let big = dummy_manifest(7000, 0);
        assert_eq!(subsample(&big, 10).unwrap().count(Split::Train), 700);
    }

    #[test]
    fn split_unlabelled_counts_and_disjointness() {
        let m = dummy_manifest(20, 1000);
        assert_eq!(
            split_unlabelled(&m, 0.0, 1)
                .unwrap()
                .count(Split::Unlabelled),
            0
        );
        let u = split_unlabelled(&m, 0.10, 1).unwrap();
        assert_eq!(u.count(Split::Unlabelled), 100);
        assert_eq!(u.count(Split::Test), 900);
        assert_eq!(u.count(Split::Train), 20);
        assert!(u
            .records
            .iter()
            .filter(|r| r.split == Split::Unlabelled)
            .all(|r| r.pose().is_none() && r.heldout().is_some()));
        assert_eq!(u, split_unlabelled(&m, 0.10, 1).unwrap());
        assert!(split_unlabelled(&m, 1.5, 1).is_err());
        assert!(split_unlabelled(&m, -0.1, 1).is_err());
        assert!(
            split_unlabelled(&dummy_manifest(5, 0), 0.5, 1)
                .unwrap()
                .count(Split::Unlabelled)
                == 0
        );
    }

    #[test]
    fn desk_dataset_writes_everything() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DeskDatasetConfig {
            width: 16,
            height: 16,
            focal: 14.0,
            train_views: 6,
            test_views: 3,
            ..Default::default()
        };
        let m = make_desk_dataset(&desk_scene(), &cfg, dir.path()).unwrap();
        assert_eq!(m.count(Split::Train), 6);
        assert_eq!(m.count(Split::Test), 3);
        for r in &m.records {
            assert!(m.resolve(r).exists());
        }
        let loaded = super::super::load_manifest(&dir.path().join("manifest.txt")).unwrap();
        assert_eq!(loaded, m);
        // hit pixels are never closer than the nearest surface allows
        let (_, depth) =
            raycast_oracle(&desk_scene(), &m.camera, m.records[0].pose().unwrap()).unwrap();
        assert!(depth.data.iter().all(|&d| d == 0.0 || d >= 0.4));
    }

    #[test]
    fn generate_dataset_renders_train_records() {
        let dir = tempfile::tempdir().unwrap();
        let cam = Camera::centered(8, 8, 7.0).unwrap();
        let cfg = DeskDatasetConfig::default();
        let m =
            generate_dataset(&desk_scene(), &cam, 3, &cfg.train_strategy, 2, dir.path()).unwrap();
        assert_eq!(m.count(Split::Train), 3);
        assert!(m.records.iter().all(|r| m.resolve(r).exists()));
    }
}
