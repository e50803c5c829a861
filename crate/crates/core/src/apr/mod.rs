//! APRNet: a small convolutional pose regressor whose per-block feature
//! maps double as the image-feature extractor, plus the training losses.

mod losses;

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::{Conv2dConfig, Module};
use serde::{Deserialize, Serialize};

pub use losses::{
    feature_distances, loss_align, loss_image, loss_pose, loss_posemap, loss_rvs, loss_total,
    rolled_negatives, LossTerms, LossToggles, LossWeights, Negatives,
};

use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::nn::{flat_f64, l2_normalize, ParamStore, DEVICE};

const MAGIC: &[u8] = b"APRN1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AprConfig {
    pub image_width: usize,
    pub image_height: usize,
    pub backbone_blocks: usize,
    pub backbone_channels: usize,
    pub fusion_channels: usize,
    /// Downsampling of the fused feature maps relative to the image.
    pub feature_scale: usize,
    pub triplet_margin: f64,
    pub losses: LossToggles,
    pub weights: LossWeights,
}

impl Default for AprConfig {
    fn default() -> Self {
        Self {
            image_width: 64,
            image_height: 64,
            backbone_blocks: 3,
            backbone_channels: 16,
            fusion_channels: 32,
            feature_scale: 2,
            triplet_margin: 1.0,
            losses: LossToggles::default(),
            weights: LossWeights::default(),
        }
    }
}

impl AprConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fusion_channels == 0 || self.backbone_channels == 0 || self.backbone_blocks == 0 {
            return Err(Error::invalid("APR widths must be positive"));
        }
        if !(self.triplet_margin > 0.0) {
            return Err(Error::invalid("triplet margin must be positive"));
        }
        if self.feature_scale != 2 {
            return Err(Error::invalid("features are produced at half resolution"));
        }
        if self.image_width % 16 != 0 || self.image_height % 16 != 0 {
            return Err(Error::invalid("image size must be a multiple of 16"));
        }
        Ok(())
    }

    fn head_cells(&self) -> usize {
        (self.image_width / 16) * (self.image_height / 16)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureOrigin {
    Real,
    Rendered,
}

/// Fused, per-pixel unit-normalized image features, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub source: FeatureOrigin,
}

impl ImageFeatureMap {
    pub fn pixel(&self, x: usize, y: usize) -> Vec<f64> {
        let hw = self.width * self.height;
        (0..self.channels)
            .map(|c| self.data[c * hw + y * self.width + x])
            .collect()
    }

    /// `[1, C, h, w]` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &self.data,
            (1, self.channels, self.height, self.width),
            &DEVICE,
        )?
        .to_dtype(dtype)?)
    }
}

/// Batches images into a `[B, 3, H, W]` tensor.
pub fn images_tensor(images: &[&RgbImage], dtype: DType) -> Result<Tensor> {
    let (w, h) = (images[0].width, images[0].height);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if (img.width, img.height) != (w, h) {
            return Err(Error::invalid("images in a batch differ in size"));
        }
        data.extend(img.to_chw());
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &DEVICE)?.to_dtype(dtype)?)
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: AprConfig,
    parent: Option<String>,
    field: Option<String>,
}

#[derive(Clone, Debug)]
pub struct AprNet {
    pub config: AprConfig,
    params: ParamStore,
    parent: Option<String>,
    field: Option<String>,
}

impl AprNet {
    pub fn new(config: AprConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32)
    }

    pub fn with_dtype(config: AprConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let c = config.backbone_channels;
        let mut p = ParamStore::new(seed, dtype);
        p.add_conv("stem", 3, c, 3)?;
        for i in 0..config.backbone_blocks {
            p.add_conv(&format!("block.{i}"), c, c, 3)?;
            p.add_conv(&format!("proj.{i}"), c, config.fusion_channels, 1)?;
        }
        p.add_conv("head.conv.0", c, 2 * c, 3)?;
        p.add_conv("head.conv.1", 2 * c, 4 * c, 3)?;
        p.add_linear("head.fc.0", 4 * c * config.head_cells(), 128)?;
        p.add_linear("head.fc.1", 128, 12)?;
        p.scale_weight("head.fc.1", 0.1)?;
        Ok(Self {
            config,
            params: p,
            parent: None,
            field: None,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn parent(&self) -> Option<&str> {
        self.parent.as_deref()
    }

    /// Identifier of the field checkpoint this network was trained against.
    pub fn field_id(&self) -> Option<&str> {
        self.field.as_deref()
    }

    pub(crate) fn mark(&mut self, parent: Option<String>, field: Option<String>) {
        self.parent = parent;
        self.field = field;
    }

    pub fn id(&self) -> Result<String> {
        Ok(self.params.checksum(&[])?[..16].to_string())
    }

    pub fn checksum(&self) -> Result<String> {
        self.params.checksum(&[])
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            params: self.params.deep_clone()?,
            ..self.clone()
        })
    }

    /// Starts regression at `pose` (row-major 3×4) instead of at zero.
    pub fn set_output_bias(&mut self, pose: &[f64; 12]) -> Result<()> {
        self.params.set_bias("head.fc.1", pose)
    }

    pub fn trainable_vars(&self) -> Vec<candle_core::Var> {
        self.params.vars_with_prefixes(&[""])
    }

    fn check_size(&self, images: &Tensor) -> Result<()> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h != self.config.image_height || w != self.config.image_width {
            return Err(Error::invalid(format!(
                "expected 3x{}x{} input, got {c}x{h}x{w}",
                self.config.image_height, self.config.image_width
            )));
        }
        Ok(())
    }

    fn backbone(&self, images: &Tensor, frozen: bool) -> Result<(Tensor, Tensor)> {
        self.check_size(images)?;
        let x = images.affine(2.0, -1.0)?;
        let stem = Conv2dConfig {
            padding: 1,
            stride: 2,
            ..Default::default()
        };
        let mut h = self
            .params
            .conv("stem", stem, frozen)?
            .forward(&x)?
            .relu()?;
        let mut fused: Option<Tensor> = None;
        for i in 0..self.config.backbone_blocks {
            let d = 1 << i;
            let cfg = Conv2dConfig {
                padding: d,
                dilation: d,
                ..Default::default()
            };
            h = self
                .params
                .conv(&format!("block.{i}"), cfg, frozen)?
                .forward(&h)?
                .relu()?;
            let proj = self
                .params
                .conv(&format!("proj.{i}"), Conv2dConfig::default(), frozen)?
                .forward(&h)?;
            fused = Some(match fused {
                None => proj,
                Some(f) => (f + proj)?,
            });
        }
        let f = fused.unwrap().permute((0, 2, 3, 1))?;
        let f = l2_normalize(&f, 1e-12)?.permute((0, 3, 1, 2))?;
        Ok((h, f))
    }

    /// Fused features `[B, F, H/2, W/2]`, unit length along channels.
    pub fn features(&self, images: &Tensor, frozen: bool) -> Result<Tensor> {
        Ok(self.backbone(images, frozen)?.1)
    }

    /// Raw poses `[B, 12]` and fused features.
    pub fn forward(&self, images: &Tensor, frozen: bool) -> Result<(Tensor, Tensor)> {
        let (h, feats) = self.backbone(images, frozen)?;
        let down = Conv2dConfig {
            padding: 1,
            stride: 2,
            ..Default::default()
        };
        let x = self
            .params
            .conv("head.conv.0", down, frozen)?
            .forward(&h)?
            .relu()?;
        let x = self
            .params
            .conv("head.conv.1", down, frozen)?
            .forward(&x)?
            .relu()?;
        let x = x.avg_pool2d(2)?.flatten_from(1)?;
        let x = self
            .params
            .linear("head.fc.0", frozen)?
            .forward(&x)?
            .relu()?;
        let pose = self.params.linear("head.fc.1", frozen)?.forward(&x)?;
        Ok((pose, feats))
    }

    pub fn regress_batch(&self, images: &Tensor, frozen: bool) -> Result<Tensor> {
        Ok(self.forward(images, frozen)?.0)
    }

    /// Raw 12-vector for one image.
    pub fn regress_pose(&self, image: &RgbImage) -> Result<[f64; 12]> {
        let t = images_tensor(&[image], self.dtype())?;
        let out = flat_f64(&self.regress_batch(&t, true)?)?;
        Ok(out.try_into().unwrap())
    }

    pub fn extract_features(
        &self,
        image: &RgbImage,
        source: FeatureOrigin,
    ) -> Result<ImageFeatureMap> {
        let t = images_tensor(&[image], self.dtype())?;
        let f = self.features(&t, true)?;
        let (_, c, h, w) = f.dims4()?;
        Ok(ImageFeatureMap {
            width: w,
            height: h,
            channels: c,
            data: flat_f64(&f)?,
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        let header = Header {
            config: self.config.clone(),
            parent: self.parent.clone(),
            field: self.field.clone(),
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
            .map_err(|_| Error::Checkpoint("not an APR checkpoint".into()))?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("not an APR checkpoint".into()));
        }
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: Header = serde_json::from_str(&line)?;
        let params = ParamStore::read_from(&mut r, DType::F32)?;
        let fresh = Self::new(header.config.clone(), 0)?;
        if params.names().collect::<Vec<_>>() != fresh.params.names().collect::<Vec<_>>() {
            return Err(Error::Checkpoint(
                "parameter layout does not match config".into(),
            ));
        }
        Ok(Self {
            config: header.config,
            params,
            parent: header.parent,
            field: header.field,
        })
    }
}
