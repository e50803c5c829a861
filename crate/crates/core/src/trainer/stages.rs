use candle_core::Tensor;
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    rvs_synthesize, AlignSchedule, AprSchedule, LossRecord, PoseBranchSchedule, RenderSchedule,
};
use crate::apr::{
    images_tensor, loss_align, loss_image, loss_pose, loss_posemap, loss_rvs, loss_total,
    rolled_negatives, AprConfig, AprNet, LossTerms, Negatives,
};
use crate::error::{Error, Result};
use crate::field::{
    poses_tensor, sample_distances, FeatureSource, FieldConfig, FieldStage, Mode, NerfP, RaySet,
    POSE_GROUP, RENDER_GROUP,
};
use crate::imaging::RgbImage;
use crate::nn::{adam, flat_f64, scalar_f64, step, DEVICE};
use crate::scene::{Aabb, Camera, DatasetManifest, Split};
use crate::se3::{orthonormalize, PerturbationBounds, Pose};

/// A trained model and its per-iteration losses.
#[derive(Debug)]
pub struct StageOutput<T> {
    pub model: T,
    pub log: Vec<LossRecord>,
}

#[derive(Debug)]
pub struct Stage2Output {
    pub model: NerfP,
    pub log: Vec<LossRecord>,
    /// Decoder round-trip loss over all training poses before and after.
    pub initial_error: f64,
    pub final_error: f64,
}

#[derive(Debug)]
pub struct Stage4Output {
    pub model: AprNet,
    pub log: Vec<LossRecord>,
    /// Mean alignment loss of each pass over the unlabelled set.
    pub pass_means: Vec<f64>,
}

fn load_image(manifest: &DatasetManifest, index: usize) -> Result<RgbImage> {
    let img = RgbImage::load_png(&manifest.resolve(&manifest.records[index]))?;
    check_image(&img, &manifest.camera)?;
    Ok(img)
}

fn check_image(img: &RgbImage, camera: &Camera) -> Result<()> {
    if img.width != camera.width || img.height != camera.height {
        return Err(Error::invalid(format!(
            "image is {}x{}, camera is {}x{}",
            img.width, img.height, camera.width, camera.height
        )));
    }
    Ok(())
}

fn train_records(manifest: &DatasetManifest) -> Result<Vec<(usize, Pose)>> {
    let train = manifest.labelled(Split::Train);
    if train.is_empty() {
        return Err(Error::invalid("manifest has no train records"));
    }
    Ok(train)
}

fn index_tensor(idx: &[usize]) -> Result<Tensor> {
    Ok(Tensor::from_vec(
        idx.iter().map(|&i| i as u32).collect::<Vec<_>>(),
        idx.len(),
        &DEVICE,
    )?)
}

fn sample_batch(rng: &mut ChaCha8Rng, n: usize, b: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n, b.min(n)).into_vec()
}

/// Photometric training of the density and color branches on random rays.
pub fn train_stage1_render(
    manifest: &DatasetManifest,
    config: &FieldConfig,
    bounds: Aabb,
    schedule: &RenderSchedule,
) -> Result<StageOutput<NerfP>> {
    let train = train_records(manifest)?;
    let camera = manifest.camera;
    let mut field = NerfP::new(config.clone(), bounds, schedule.seed)?;
    let dtype = field.dtype();

    let pixels = camera.grid_coordinates(camera.width, camera.height)?;
    let cam_dirs: Vec<Vector3<f64>> = pixels
        .iter()
        .map(|&(u, v)| camera.direction(u, v))
        .collect();
    let total = train.len() * pixels.len();
    let (mut origins, mut dirs, mut colors) = (
        Vec::with_capacity(total * 3),
        Vec::with_capacity(total * 3),
        Vec::with_capacity(total * 3),
    );
    for (index, pose) in &train {
        let img = load_image(manifest, *index)?;
        let t = pose.translation();
        for (p, d) in cam_dirs.iter().enumerate() {
            let w = (pose.rotation() * d).normalize();
            origins.extend([t[0], t[1], t[2]]);
            dirs.extend([w[0], w[1], w[2]]);
            colors.extend(img.data[p * 3..p * 3 + 3].iter().map(|&c| c as f64));
        }
    }
    let origins = Tensor::from_vec(origins, (total, 3), &DEVICE)?.to_dtype(dtype)?;
    let dirs = Tensor::from_vec(dirs, (total, 3), &DEVICE)?.to_dtype(dtype)?;
    let colors = Tensor::from_vec(colors, (total, 3), &DEVICE)?.to_dtype(dtype)?;

    let mut opt = adam(
        field.params().vars_with_prefixes(&RENDER_GROUP),
        schedule.lr,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let (near, far, n) = (config.near, config.far, config.samples_per_ray);
    let r = schedule.rays_per_batch;
    let mut log = Vec::with_capacity(schedule.iters);
    for iter in 0..schedule.iters {
        let chosen: Vec<usize> = (0..r).map(|_| rng.gen_range(0..total)).collect();
        let idx = index_tensor(&chosen)?;
        let (mut ts, mut ds) = (Vec::with_capacity(r * n), Vec::with_capacity(r * n));
        for _ in 0..r {
            let jitter = if schedule.stratified {
                Some(&mut rng)
            } else {
                None
            };
            let (t, d) = sample_distances(near, far, n, jitter);
            ts.extend(t);
            ds.extend(d);
        }
        let rays = RaySet {
            origins: origins.index_select(&idx, 0)?,
            directions: dirs.index_select(&idx, 0)?,
            distances: Tensor::from_vec(ts, (r, n), &DEVICE)?.to_dtype(dtype)?,
            deltas: Tensor::from_vec(ds, (r, n), &DEVICE)?.to_dtype(dtype)?,
        };
        let rgb = field.render_rays_rgb(rays, Mode::TrainRender)?;
        let loss = (rgb - colors.index_select(&idx, 0)?)?.sqr()?.mean_all()?;
        step(&mut opt, &loss)?;
        log.push(LossRecord {
            iter,
            total: scalar_f64(&loss)?,
            pose: None,
            image: None,
            posemap: None,
            rvs: None,
        });
    }
    field.mark(FieldStage::RenderTrained, None);
    Ok(StageOutput { model: field, log })
}

fn decoder_error(
    field: &NerfP,
    cache: &crate::field::PoseMapCache,
    targets: &Tensor,
) -> Result<f64> {
    let views: Vec<usize> = (0..cache.views()).collect();
    let mut sum = 0.0;
    for chunk in views.chunks(64) {
        let maps = field.posemap_from_cache(cache, chunk, Mode::Frozen)?;
        let pred = field.decode(&maps, Mode::Frozen)?;
        let loss = loss_pose(&pred, &targets.index_select(&index_tensor(chunk)?, 0)?)?;
        sum += scalar_f64(&loss)? * chunk.len() as f64;
    }
    Ok(sum / views.len() as f64)
}

/// Trains the pose branch and decoder so that decoding the PoseMap rendered
/// at a training pose returns that pose. The rendering branch is frozen.
pub fn train_stage2_pose_branch(
    field: &NerfP,
    manifest: &DatasetManifest,
    schedule: &PoseBranchSchedule,
) -> Result<Stage2Output> {
    if field.stage() != FieldStage::RenderTrained {
        return Err(Error::Checkpoint(
            "stage 2 starts from a render-trained (stage 1) field".into(),
        ));
    }
    let train = train_records(manifest)?;
    let parent = field.id()?;
    let mut field = field.to_dtype(field.dtype())?;
    let poses: Vec<Pose> = train.iter().map(|(_, p)| *p).collect();
    let targets = poses_tensor(&poses, field.dtype())?;
    let mean = flat_f64(&targets.mean(0)?)?;
    let last = field.config.decoder_widths.len() - 2;
    field
        .params_mut()
        .set_bias(&format!("decoder.{last}"), &mean)?;

    let cache = field.posemap_cache(&manifest.camera, &poses)?;
    let initial_error = decoder_error(&field, &cache, &targets)?;
    let mut opt = adam(field.params().vars_with_prefixes(&POSE_GROUP), schedule.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut log = Vec::with_capacity(schedule.iters);
    for iter in 0..schedule.iters {
        let batch = sample_batch(&mut rng, poses.len(), schedule.batch);
        let maps = field.posemap_from_cache(&cache, &batch, Mode::TrainPose)?;
        let pred = field.decode(&maps, Mode::TrainPose)?;
        let loss = loss_pose(&pred, &targets.index_select(&index_tensor(&batch)?, 0)?)?;
        step(&mut opt, &loss)?;
        let v = scalar_f64(&loss)?;
        log.push(LossRecord {
            iter,
            total: v,
            pose: Some(v),
            image: None,
            posemap: None,
            rvs: None,
        });
    }
    let final_error = decoder_error(&field, &cache, &targets)?;
    field.mark(FieldStage::PoseTrained, Some(parent));
    Ok(Stage2Output {
        model: field,
        log,
        initial_error,
        final_error,
    })
}

/// Frozen-field products used by every stage-3 step: real training images,
/// their renders and PoseMaps at the true poses, and a pool of synthetic
/// views per training image.
#[derive(Clone, Debug)]
pub struct Stage3Data {
    pub camera: Camera,
    /// Manifest record of each view.
    pub records: Vec<usize>,
    pub per_view: usize,
    /// `[V, 12]`
    pub poses: Tensor,
    /// `[V, 3, H, W]`
    pub real: Tensor,
    /// `[V, 3, H, W]`
    pub rendered: Tensor,
    /// `[V, gh, gw, C]`
    pub posemaps: Tensor,
    /// `[V·K, 12]`
    pub rvs_poses: Tensor,
    /// `[V·K, 3, H, W]`
    pub rvs_images: Tensor,
    /// `[V·K, gh, gw, C]`
    pub rvs_posemaps: Tensor,
    field_id: String,
}

fn pool_seed(seed: u64, record: usize, k: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((record as u64) << 20 | k as u64)
}

impl Stage3Data {
    pub fn prepare(
        field: &NerfP,
        manifest: &DatasetManifest,
        bounds: &PerturbationBounds,
        per_view: usize,
        seed: u64,
    ) -> Result<Self> {
        if !field.pose_branch_trained() {
            return Err(Error::PoseBranchUntrained);
        }
        if per_view == 0 {
            return Err(Error::invalid("the RVS pool needs at least one view"));
        }
        bounds.validate()?;
        let train = train_records(manifest)?;
        let camera = manifest.camera;
        let dtype = field.dtype();
        let (mut real, mut rendered, mut maps) = (Vec::new(), Vec::new(), Vec::new());
        let (mut rvs_poses, mut rvs_images, mut rvs_maps) = (Vec::new(), Vec::new(), Vec::new());
        for (index, pose) in &train {
            real.push(load_image(manifest, *index)?);
            rendered.push(field.render_image(&camera, pose)?);
            maps.push(field.render_posemap(&camera, pose)?.to_tensor(dtype)?);
            for k in 0..per_view {
                let s = rvs_synthesize(field, &camera, pose, bounds, pool_seed(seed, *index, k))?;
                rvs_poses.push(s.pose);
                rvs_images.push(s.image);
                rvs_maps.push(s.posemap.to_tensor(dtype)?);
            }
        }
        let refs = |v: &[RgbImage]| -> Result<Tensor> {
            images_tensor(&v.iter().collect::<Vec<_>>(), dtype)
        };
        let poses: Vec<Pose> = train.iter().map(|(_, p)| *p).collect();
        Ok(Self {
            camera,
            records: train.iter().map(|(i, _)| *i).collect(),
            per_view,
            poses: poses_tensor(&poses, dtype)?,
            real: refs(&real)?,
            rendered: refs(&rendered)?,
            posemaps: Tensor::stack(&maps, 0)?,
            rvs_poses: poses_tensor(&rvs_poses, dtype)?,
            rvs_images: refs(&rvs_images)?,
            rvs_posemaps: Tensor::stack(&rvs_maps, 0)?,
            field_id: field.id()?,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Identifier of the field that produced the renders.
    pub fn field_id(&self) -> &str {
        &self.field_id
    }

    /// The views at `positions` (indices into this set) with their pools.
    pub fn subset(&self, positions: &[usize]) -> Result<Self> {
        if positions.is_empty() || positions.iter().any(|&p| p >= self.len()) {
            return Err(Error::invalid(
                "subset positions must be non-empty and in range",
            ));
        }
        let idx = index_tensor(positions)?;
        let pool: Vec<usize> = positions
            .iter()
            .flat_map(|&p| (0..self.per_view).map(move |k| p * self.per_view + k))
            .collect();
        let pidx = index_tensor(&pool)?;
        Ok(Self {
            camera: self.camera,
            records: positions.iter().map(|&p| self.records[p]).collect(),
            per_view: self.per_view,
            poses: self.poses.index_select(&idx, 0)?,
            real: self.real.index_select(&idx, 0)?,
            rendered: self.rendered.index_select(&idx, 0)?,
            posemaps: self.posemaps.index_select(&idx, 0)?,
            rvs_poses: self.rvs_poses.index_select(&pidx, 0)?,
            rvs_images: self.rvs_images.index_select(&pidx, 0)?,
            rvs_posemaps: self.rvs_posemaps.index_select(&pidx, 0)?,
            field_id: self.field_id.clone(),
        })
    }
}

fn opt_scalar(t: &Option<Tensor>) -> Result<Option<f64>> {
    t.as_ref().map(scalar_f64).transpose()
}

/// Trains the regressor with the pose, image-feature, PoseMap and RVS
/// terms enabled in `config.losses`. The field stays frozen throughout.
pub fn train_stage3_apr(
    field: &NerfP,
    data: &Stage3Data,
    config: &AprConfig,
    schedule: &AprSchedule,
) -> Result<StageOutput<AprNet>> {
    if !field.pose_branch_trained() {
        return Err(Error::Checkpoint(
            "stage 3 needs a pose-trained (stage 2) field".into(),
        ));
    }
    if data.field_id() != field.id()? {
        return Err(Error::Checkpoint(
            "stage-3 data was rendered by another field".into(),
        ));
    }
    if data.is_empty() {
        return Err(Error::invalid("no training views"));
    }
    if !config.losses.any() {
        return Err(Error::NoObjective);
    }
    let mut apr = AprNet::with_dtype(config.clone(), schedule.seed, field.dtype())?;
    let mean: [f64; 12] = flat_f64(&data.poses.mean(0)?)?.try_into().unwrap();
    apr.set_output_bias(&mean)?;
    apr.mark(None, Some(field.id()?));

    let camera = data.camera;
    let mut opt = adam(apr.trainable_vars(), schedule.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut log = Vec::with_capacity(schedule.iters);
    let toggles = config.losses;
    for iter in 0..schedule.iters {
        let views = sample_batch(&mut rng, data.len(), schedule.batch);
        let b = views.len();
        let pool: Vec<usize> = views
            .iter()
            .map(|&v| v * data.per_view + rng.gen_range(0..data.per_view))
            .collect();
        let idx = index_tensor(&views)?;
        let pidx = index_tensor(&pool)?;
        let target = data.poses.index_select(&idx, 0)?;

        let mut inputs = vec![data.real.index_select(&idx, 0)?];
        if toggles.image {
            inputs.push(data.rendered.index_select(&idx, 0)?);
        }
        if toggles.rvs {
            inputs.push(data.rvs_images.index_select(&pidx, 0)?);
        }
        let (poses, feats) = apr.forward(&Tensor::cat(&inputs, 0)?, false)?;
        let p_hat = poses.narrow(0, 0, b)?;

        let mut terms = LossTerms::default();
        if toggles.pose {
            terms.pose = Some(loss_pose(&p_hat, &target)?);
        }
        if toggles.image {
            let real = feats.narrow(0, 0, b)?;
            let rendered = feats.narrow(0, b, b)?;
            let rolled;
            let negatives = if b >= 2 {
                Negatives::InBatch
            } else {
                rolled = rolled_negatives(&rendered)?;
                Negatives::Explicit(&rolled)
            };
            terms.image = Some(loss_image(
                &real,
                &rendered,
                negatives,
                config.triplet_margin,
            )?);
        }
        if toggles.posemap {
            let pm = field.render_feature_maps(
                &camera,
                &p_hat,
                FeatureSource::PoseBranch,
                Mode::Frozen,
            )?;
            terms.posemap = Some(loss_posemap(&pm, &data.posemaps.index_select(&idx, 0)?)?);
        }
        if toggles.rvs {
            let offset = if toggles.image { 2 * b } else { b };
            let p_rvs_hat = poses.narrow(0, offset, b)?;
            let p_rvs = data.rvs_poses.index_select(&pidx, 0)?;
            let term = if toggles.posemap {
                let pm = field.render_feature_maps(
                    &camera,
                    &p_rvs_hat,
                    FeatureSource::PoseBranch,
                    Mode::Frozen,
                )?;
                let target_maps = data.rvs_posemaps.index_select(&pidx, 0)?;
                loss_rvs(&p_rvs_hat, &p_rvs, Some((&pm, &target_maps)))?
            } else {
                loss_rvs(&p_rvs_hat, &p_rvs, None)?
            };
            terms.rvs = Some(term);
        }
        let total = loss_total(&terms, &toggles, &config.weights)?;
        step(&mut opt, &total)?;
        log.push(LossRecord {
            iter,
            total: scalar_f64(&total)?,
            pose: opt_scalar(&terms.pose)?,
            image: opt_scalar(&terms.image)?,
            posemap: opt_scalar(&terms.posemap)?,
            rvs: opt_scalar(&terms.rvs)?,
        });
    }
    Ok(StageOutput { model: apr, log })
}

/// Self-supervised refinement on unlabelled images: estimate a pose,
/// render the image and PoseMap there, regress again from the render and
/// minimize the image-feature and PoseMap gaps. Ground-truth poses of the
/// unlabelled records are never touched.
pub fn train_stage4_align(
    apr: &AprNet,
    field: &NerfP,
    manifest: &DatasetManifest,
    schedule: &AlignSchedule,
) -> Result<Stage4Output> {
    if !field.pose_branch_trained() {
        return Err(Error::Checkpoint(
            "stage 4 needs a pose-trained (stage 2) field".into(),
        ));
    }
    let field_id = field.id()?;
    if apr.field_id() != Some(field_id.as_str()) {
        return Err(Error::Checkpoint(
            "regressor was trained against a different field checkpoint".into(),
        ));
    }
    let unlabelled = manifest.unlabelled_images();
    if unlabelled.is_empty() {
        return Err(Error::invalid("manifest has no unlabelled records"));
    }
    let camera = manifest.camera;
    let dtype = apr.dtype();
    let images = unlabelled
        .iter()
        .map(|u| {
            let img = RgbImage::load_png(&u.path)?;
            check_image(&img, &camera)?;
            images_tensor(&[&img], dtype)
        })
        .collect::<Result<Vec<_>>>()?;

    let parent = apr.id()?;
    let mut apr = apr.deep_clone()?;
    apr.mark(Some(parent), Some(field_id));
    let margin = apr.config.triplet_margin;
    let mut opt = adam(apr.trainable_vars(), schedule.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut log = Vec::new();
    let mut pass_means = Vec::with_capacity(schedule.passes);
    for _ in 0..schedule.passes {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for &i in &order {
            let image = &images[i];
            let raw = flat_f64(&apr.regress_batch(image, true)?)?;
            let estimate = orthonormalize(&raw)?;
            let render = field.render_image(&camera, &estimate)?;
            let render = images_tensor(&[&render], dtype)?;
            let (poses, feats) = apr.forward(&Tensor::cat(&[image, &render], 0)?, false)?;
            let real = feats.narrow(0, 0, 1)?;
            let rendered = feats.narrow(0, 1, 1)?;
            let negatives = rolled_negatives(&rendered)?;
            let image_term = loss_image(&real, &rendered, Negatives::Explicit(&negatives), margin)?;
            let (total, posemap_term) = if schedule.posemap {
                let target = field
                    .render_feature_maps(
                        &camera,
                        &poses_tensor(&[estimate], dtype)?,
                        FeatureSource::PoseBranch,
                        Mode::Frozen,
                    )?
                    .detach();
                let pm = field.render_feature_maps(
                    &camera,
                    &poses.narrow(0, 1, 1)?,
                    FeatureSource::PoseBranch,
                    Mode::Frozen,
                )?;
                let total = loss_align(
                    &real,
                    &rendered,
                    Negatives::Explicit(&negatives),
                    margin,
                    &pm,
                    &target,
                )?;
                (total, Some(scalar_f64(&loss_posemap(&pm, &target)?)?))
            } else {
                (image_term.clone(), None)
            };
            step(&mut opt, &total)?;
            let v = scalar_f64(&total)?;
            sum += v;
            log.push(LossRecord {
                iter: log.len(),
                total: v,
                pose: None,
                image: Some(scalar_f64(&image_term)?),
                posemap: posemap_term,
                rvs: None,
            });
        }
        pass_means.push(sum / order.len() as f64);
    }
    Ok(Stage4Output {
        model: apr,
        log,
        pass_means,
    })
}
