//! NeRF-P: a positional-encoded density/color field with an extra pose
//! feature branch, differentiable volume rendering of RGB and feature
//! maps, and the decoder that reads a pose back out of a PoseMap.

mod posemap;
mod render;

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use candle_core::{DType, Tensor, D};
use candle_nn::Module;
use serde::{Deserialize, Serialize};

pub use posemap::{adaptive_pool_grid, adaptive_pool_matrix, PoseMapImage};
pub use render::{
    accumulate, poses_tensor, rays_from_raw, render_rgb, render_weights, sample_distances,
    sample_rays, transmittance, weights_tensor, RaySet,
};

use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::nn::{encoding_width, positional_encoding, softplus, ParamStore, DEVICE};
use crate::scene::{Aabb, Camera};
use crate::se3::Pose;

const MAGIC: &[u8] = b"NERFP1\n";
pub const RENDER_GROUP: [&str; 3] = ["trunk.", "density.", "color."];
pub const POSE_GROUP: [&str; 2] = ["pose.", "decoder."];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub pe_frequencies_position: usize,
    pub pe_frequencies_direction: usize,
    pub trunk_width: usize,
    pub trunk_depth: usize,
    pub feature_channels: usize,
    pub samples_per_ray: usize,
    pub near: f64,
    pub far: f64,
    pub posemap_downsample: usize,
    pub decoder_widths: Vec<usize>,
    pub activation: Activation,
}

/// Hidden-layer nonlinearity of the field MLPs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    /// `x · sigmoid(x)`; keeps rendered features smooth in the pose.
    Silu,
}

impl Activation {
    fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Relu => x.relu()?,
            Activation::Silu => x.silu()?,
        })
    }
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            pe_frequencies_position: 6,
            pe_frequencies_direction: 4,
            trunk_width: 64,
            trunk_depth: 3,
            feature_channels: 64,
            samples_per_ray: 32,
            near: 0.4,
            far: 4.0,
            posemap_downsample: 16,
            decoder_widths: vec![1024, 256, 128, 12],
            activation: Activation::Silu,
        }
    }
}

impl FieldConfig {
    /// Published sizes: 256 feature channels and a 1536-wide decoder input.
    pub fn paper() -> Self {
        Self {
            feature_channels: 256,
            decoder_widths: vec![1536, 256, 128, 12],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.decoder_widths;
        if w.last() != Some(&12) {
            return Err(Error::invalid("decoder widths must end in 12"));
        }
        if !(self.near < self.far && self.near >= 0.0) {
            return Err(Error::invalid("need 0 <= near < far"));
        }
        if self.samples_per_ray < 2 {
            return Err(Error::invalid("need at least 2 samples per ray"));
        }
        if self.trunk_depth == 0 || self.trunk_width == 0 || self.feature_channels == 0 {
            return Err(Error::invalid("field widths must be positive"));
        }
        if self.posemap_downsample == 0 || w[0] % self.feature_channels != 0 {
            return Err(Error::invalid(
                "decoder input width must be a multiple of the feature channels",
            ));
        }
        Ok(())
    }

    /// Number of pooled cells `G` feeding the decoder.
    pub fn decoder_cells(&self) -> usize {
        self.decoder_widths[0] / self.feature_channels
    }

    /// PoseMap grid `(width, height)` for a camera.
    pub fn posemap_grid(&self, camera: &Camera) -> Result<(usize, usize)> {
        let s = self.posemap_downsample;
        if camera.width % s != 0 || camera.height % s != 0 {
            return Err(Error::invalid(format!(
                "downsample {s} does not divide {}x{}",
                camera.width, camera.height
            )));
        }
        Ok((camera.width / s, camera.height / s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldStage {
    RenderTrained,
    PoseTrained,
}

/// Which weights receive gradients during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Rendering branch trainable.
    TrainRender,
    /// Trunk latent detached; pose branch and decoder trainable.
    TrainPose,
    /// All weights constant; gradients still reach rays and poses.
    Frozen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    /// Pose-branch features (PoseMap).
    PoseBranch,
    /// Last shared trunk layer (NeRFMap baseline).
    Trunk,
}

/// Per-ray samples and field outputs along them.
#[derive(Clone, Debug)]
pub struct RayRenderBundle {
    pub rays: RaySet,
    /// `[R, N]`
    pub densities: Tensor,
    /// `[R, N, 3]`
    pub colors: Option<Tensor>,
    /// `[R, N, C]`
    pub features: Option<Tensor>,
}

impl RayRenderBundle {
    pub fn weights(&self) -> Result<Tensor> {
        weights_tensor(&self.densities, &self.rays.deltas)
    }
}

/// Frozen per-view trunk latents and compositing weights on the PoseMap
/// grid, so pose-branch training skips the trunk entirely.
#[derive(Clone, Debug)]
pub struct PoseMapCache {
    /// `[V, R, N, W]`
    latents: Tensor,
    /// `[V, R, N]`
    weights: Tensor,
    grid: (usize, usize),
}

impl PoseMapCache {
    pub fn views(&self) -> usize {
        self.latents.dims()[0]
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: FieldConfig,
    bounds: Aabb,
    stage: FieldStage,
    parent: Option<String>,
}

#[derive(Clone, Debug)]
pub struct NerfP {
    pub config: FieldConfig,
    pub bounds: Aabb,
    params: ParamStore,
    stage: FieldStage,
    parent: Option<String>,
    allow_untrained_pose: bool,
}

impl NerfP {
    pub fn new(config: FieldConfig, bounds: Aabb, seed: u64) -> Result<Self> {
        Self::with_dtype(config, bounds, seed, DType::F32)
    }

    pub fn with_dtype(config: FieldConfig, bounds: Aabb, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let w = config.trunk_width;
        let mut p = ParamStore::new(seed, dtype);
        let mut fan_in = encoding_width(3, config.pe_frequencies_position);
        for i in 0..config.trunk_depth {
            p.add_linear(&format!("trunk.{i}"), fan_in, w)?;
            fan_in = w;
        }
        p.add_linear("density", w, 1)?;
        p.scale_weight("density", 0.1)?;
        let dir = encoding_width(3, config.pe_frequencies_direction);
        p.add_linear("color.0", w + dir, w / 2)?;
        p.add_linear("color.1", w / 2, 3)?;
        p.add_linear("pose.0", w, w)?;
        p.add_linear("pose.1", w, config.feature_channels)?;
        let widths = &config.decoder_widths;
        for (i, pair) in widths.windows(2).enumerate() {
            p.add_linear(&format!("decoder.{i}"), pair[0], pair[1])?;
        }
        Ok(Self {
            config,
            bounds,
            params: p,
            stage: FieldStage::RenderTrained,
            parent: None,
            allow_untrained_pose: false,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn stage(&self) -> FieldStage {
        self.stage
    }

    pub fn parent(&self) -> Option<&str> {
        self.parent.as_deref()
    }

    pub fn pose_branch_trained(&self) -> bool {
        self.stage == FieldStage::PoseTrained
    }

    pub fn allow_untrained_pose_branch(&mut self, allow: bool) {
        self.allow_untrained_pose = allow;
    }

    pub(crate) fn mark(&mut self, stage: FieldStage, parent: Option<String>) {
        self.stage = stage;
        self.parent = parent;
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Identifier of the current weights (first 16 hex digits of their hash).
    pub fn id(&self) -> Result<String> {
        Ok(self.params.checksum(&[])?[..16].to_string())
    }

    pub fn render_checksum(&self) -> Result<String> {
        self.params.checksum(&RENDER_GROUP)
    }

    pub fn checksum(&self) -> Result<String> {
        self.params.checksum(&[])
    }

    /// Same weights in another float precision.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            params: self.params.to_dtype(dtype)?,
            ..self.clone()
        })
    }

    fn normalize(&self, pts: &Tensor) -> Result<Tensor> {
        let c = self.bounds.center();
        let h = self.bounds.half_extents();
        let center = Tensor::new(&[c[0], c[1], c[2]], &DEVICE)?.to_dtype(pts.dtype())?;
        let scale =
            Tensor::new(&[1.0 / h[0], 1.0 / h[1], 1.0 / h[2]], &DEVICE)?.to_dtype(pts.dtype())?;
        Ok(pts.broadcast_sub(&center)?.broadcast_mul(&scale)?)
    }

    /// Static trunk latent `[M, W]` at world positions `[M, 3]`.
    pub fn trunk(&self, pts: &Tensor, mode: Mode) -> Result<Tensor> {
        let frozen = mode != Mode::TrainRender;
        let mut h =
            positional_encoding(&self.normalize(pts)?, self.config.pe_frequencies_position)?;
        for i in 0..self.config.trunk_depth {
            let z = self
                .params
                .linear(&format!("trunk.{i}"), frozen)?
                .forward(&h)?;
            h = self.config.activation.apply(&z)?;
        }
        Ok(if mode == Mode::TrainPose {
            h.detach()
        } else {
            h
        })
    }

    fn density(&self, h: &Tensor, mode: Mode) -> Result<Tensor> {
        let raw = self
            .params
            .linear("density", mode != Mode::TrainRender)?
            .forward(h)?;
        Ok(softplus(&raw.affine(1.0, -1.0)?)?.squeeze(D::Minus1)?)
    }

    fn color(&self, h: &Tensor, dirs: &Tensor, mode: Mode) -> Result<Tensor> {
        let frozen = mode != Mode::TrainRender;
        let enc = positional_encoding(dirs, self.config.pe_frequencies_direction)?;
        let x = Tensor::cat(&[h, &enc], D::Minus1)?;
        let x = self
            .config
            .activation
            .apply(&self.params.linear("color.0", frozen)?.forward(&x)?)?;
        Ok(candle_nn::ops::sigmoid(
            &self.params.linear("color.1", frozen)?.forward(&x)?,
        )?)
    }

    /// Pose-branch features `[M, C]` from trunk latents `[M, W]`.
    pub fn pose_features(&self, h: &Tensor, mode: Mode) -> Result<Tensor> {
        let frozen = mode != Mode::TrainPose;
        let x = self
            .config
            .activation
            .apply(&self.params.linear("pose.0", frozen)?.forward(h)?)?;
        Ok(self.params.linear("pose.1", frozen)?.forward(&x)?)
    }

    /// Render-branch evaluation: densities `[M]` (≥ 0) and colors `[M, 3]`.
    pub fn eval_render(&self, pts: &Tensor, dirs: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let h = self.trunk(pts, mode)?;
        Ok((self.density(&h, mode)?, self.color(&h, dirs, mode)?))
    }

    /// Pose-branch evaluation `[M, C]`.
    pub fn eval_pose(&self, pts: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.trunk(pts, mode)?;
        self.pose_features(&h, mode)
    }

    /// Evaluates the field along every ray.
    pub fn bundle(
        &self,
        rays: RaySet,
        mode: Mode,
        colors: bool,
        features: Option<FeatureSource>,
    ) -> Result<RayRenderBundle> {
        let (r, n) = rays.distances.dims2()?;
        let pts = rays.positions()?.reshape((r * n, 3))?;
        let h = self.trunk(&pts, mode)?;
        let densities = self.density(&h, mode)?.reshape((r, n))?;
        let colors = if colors {
            let dirs = rays
                .directions
                .unsqueeze(1)?
                .broadcast_as((r, n, 3))?
                .reshape((r * n, 3))?;
            Some(self.color(&h, &dirs, mode)?.reshape((r, n, 3))?)
        } else {
            None
        };
        let features = match features {
            None => None,
            Some(FeatureSource::Trunk) => Some(h.reshape((r, n, ()))?),
            Some(FeatureSource::PoseBranch) => {
                Some(self.pose_features(&h, mode)?.reshape((r, n, ()))?)
            }
        };
        Ok(RayRenderBundle {
            rays,
            densities,
            colors,
            features,
        })
    }

    /// Per-ray RGB `[R, 3]`.
    pub fn render_rays_rgb(&self, rays: RaySet, mode: Mode) -> Result<Tensor> {
        let b = self.bundle(rays, mode, true, None)?;
        accumulate(&b.weights()?, b.colors.as_ref().unwrap())
    }

    /// Full-resolution deterministic render of a pose.
    pub fn render_image(&self, camera: &Camera, pose: &Pose) -> Result<RgbImage> {
        let pixels = camera.grid_coordinates(camera.width, camera.height)?;
        let raw = poses_tensor(std::slice::from_ref(pose), self.dtype())?;
        let mut data = Vec::with_capacity(pixels.len() * 3);
        for chunk in pixels.chunks(1024) {
            let rays = self.rays(camera, &raw, chunk, None)?;
            let rgb = self.render_rays_rgb(rays, Mode::Frozen)?;
            data.extend(
                rgb.to_dtype(DType::F32)?
                    .flatten_all()?
                    .to_vec1::<f32>()?
                    .into_iter()
                    .map(|v| v.clamp(0.0, 1.0)),
            );
        }
        RgbImage::from_data(camera.width, camera.height, data)
    }

    pub fn rays(
        &self,
        camera: &Camera,
        raw: &Tensor,
        pixels: &[(f64, f64)],
        stratified: Option<u64>,
    ) -> Result<RaySet> {
        let c = &self.config;
        rays_from_raw(
            camera,
            raw,
            pixels,
            c.near,
            c.far,
            c.samples_per_ray,
            stratified,
        )
    }

    fn check_pose_branch(&self) -> Result<()> {
        if self.pose_branch_trained() || self.allow_untrained_pose {
            Ok(())
        } else {
            Err(Error::PoseBranchUntrained)
        }
    }

    /// Feature maps `[B, gh, gw, K]` for raw poses `[B, 12]`, differentiable
    /// with respect to the poses. Sampling is deterministic.
    pub fn render_feature_maps(
        &self,
        camera: &Camera,
        raw: &Tensor,
        source: FeatureSource,
        mode: Mode,
    ) -> Result<Tensor> {
        if source == FeatureSource::PoseBranch {
            self.check_pose_branch()?;
        }
        let (gw, gh) = self.config.posemap_grid(camera)?;
        let pixels = camera.grid_coordinates(gw, gh)?;
        let b = raw.dims()[0];
        let rays = self.rays(camera, raw, &pixels, None)?;
        let bundle = self.bundle(rays, mode, false, Some(source))?;
        let f = accumulate(&bundle.weights()?, bundle.features.as_ref().unwrap())?;
        Ok(f.reshape((b, gh, gw, ()))?)
    }

    fn feature_image(
        &self,
        camera: &Camera,
        pose: &Pose,
        source: FeatureSource,
    ) -> Result<PoseMapImage> {
        let raw = poses_tensor(std::slice::from_ref(pose), self.dtype())?;
        let t = self.render_feature_maps(camera, &raw, source, Mode::Frozen)?;
        PoseMapImage::from_tensor(&t.squeeze(0)?, *pose)
    }

    /// Eq.-3 accumulation of pose-branch features on the downsampled grid.
    pub fn render_posemap(&self, camera: &Camera, pose: &Pose) -> Result<PoseMapImage> {
        self.feature_image(camera, pose, FeatureSource::PoseBranch)
    }

    /// Same accumulation with features from the last trunk layer.
    pub fn render_nerfmap(&self, camera: &Camera, pose: &Pose) -> Result<PoseMapImage> {
        self.feature_image(camera, pose, FeatureSource::Trunk)
    }

    /// Trunk latents and weights on the PoseMap grid for each pose.
    pub fn posemap_cache(&self, camera: &Camera, poses: &[Pose]) -> Result<PoseMapCache> {
        let (gw, gh) = self.config.posemap_grid(camera)?;
        let pixels = camera.grid_coordinates(gw, gh)?;
        let mut latents = Vec::new();
        let mut weights = Vec::new();
        for chunk in poses.chunks(16) {
            let raw = poses_tensor(chunk, self.dtype())?;
            let rays = self.rays(camera, &raw, &pixels, None)?;
            let (r, n) = rays.distances.dims2()?;
            let pts = rays.positions()?.reshape((r * n, 3))?;
            let h = self.trunk(&pts, Mode::Frozen)?.detach();
            let sigma = self.density(&h, Mode::Frozen)?.reshape((r, n))?;
            let w = weights_tensor(&sigma, &rays.deltas)?.detach();
            let b = chunk.len();
            latents.push(h.reshape((b, gw * gh, n, ()))?);
            weights.push(w.reshape((b, gw * gh, n))?);
        }
        Ok(PoseMapCache {
            latents: Tensor::cat(&latents, 0)?,
            weights: Tensor::cat(&weights, 0)?,
            grid: (gw, gh),
        })
    }

    /// PoseMaps `[B, gh, gw, C]` of cached views; only the pose branch is live.
    pub fn posemap_from_cache(
        &self,
        cache: &PoseMapCache,
        views: &[usize],
        mode: Mode,
    ) -> Result<Tensor> {
        let idx = Tensor::from_vec(
            views.iter().map(|&v| v as u32).collect::<Vec<_>>(),
            views.len(),
            &DEVICE,
        )?;
        let h = cache.latents.index_select(&idx, 0)?;
        let w = cache.weights.index_select(&idx, 0)?;
        let (b, r, n, width) = h.dims4()?;
        let f = self.pose_features(&h.reshape((b * r * n, width))?, mode)?;
        let f = f.reshape((b * r, n, ()))?;
        let out = accumulate(&w.reshape((b * r, n))?, &f)?;
        let (gw, gh) = cache.grid;
        Ok(out.reshape((b, gh, gw, ()))?)
    }

    /// Raw 12-vectors `[B, 12]` from feature maps `[B, gh, gw, C]`.
    pub fn decode(&self, maps: &Tensor, mode: Mode) -> Result<Tensor> {
        let (b, gh, gw, c) = maps.dims4()?;
        if c != self.config.feature_channels {
            return Err(Error::ChannelMismatch {
                expected: self.config.feature_channels,
                found: c,
            });
        }
        let cells = self.config.decoder_cells();
        let pool = adaptive_pool_matrix(gh, gw, cells)?;
        let pool = Tensor::from_vec(pool, (cells, gh * gw), &DEVICE)?.to_dtype(maps.dtype())?;
        let pooled = pool
            .unsqueeze(0)?
            .broadcast_matmul(&maps.reshape((b, gh * gw, c))?)?;
        let mut x = pooled.reshape((b, cells * c))?;
        let frozen = mode != Mode::TrainPose;
        let layers = self.config.decoder_widths.len() - 1;
        for i in 0..layers {
            x = self
                .params
                .linear(&format!("decoder.{i}"), frozen)?
                .forward(&x)?;
            if i + 1 < layers {
                x = self.config.activation.apply(&x)?;
            }
        }
        Ok(x)
    }

    /// Decoder applied to one PoseMap.
    pub fn pose_decoder(&self, map: &PoseMapImage) -> Result<[f64; 12]> {
        let t = map.to_tensor(self.dtype())?.unsqueeze(0)?;
        let out = crate::nn::flat_f64(&self.decode(&t, Mode::Frozen)?)?;
        Ok(out.try_into().unwrap())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        let header = Header {
            config: self.config.clone(),
            bounds: self.bounds,
            stage: self.stage,
            parent: self.parent.clone(),
        };
        serde_json::to_writer(&mut f, &header)?;
        f.write_all(b"\n")?;
        self.params.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut r = BufReader::new(file);
        let mut magic = vec![0u8; MAGIC.len()];
        std::io::Read::read_exact(&mut r, &mut magic)
            .map_err(|_| Error::Checkpoint("not a field checkpoint".into()))?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("not a field checkpoint".into()));
        }
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: Header = serde_json::from_str(&line)?;
        let params = ParamStore::read_from(&mut r, DType::F32)?;
        let fresh = Self::new(header.config.clone(), header.bounds, 0)?;
        let expected: Vec<_> = fresh.params.names().collect();
        if params.names().collect::<Vec<_>>() != expected {
            return Err(Error::Checkpoint(
                "parameter layout does not match config".into(),
            ));
        }
        Ok(Self {
            config: header.config,
            bounds: header.bounds,
            params,
            stage: header.stage,
            parent: header.parent,
            allow_untrained_pose: false,
        })
    }
}

#[cfg(test)]
mod tests;
